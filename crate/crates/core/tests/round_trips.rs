mod common;

#[test]
fn dataset_round_trip_is_bit_exact() {
    common::check_dataset_round_trip().unwrap();
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    common::check_checkpoint_round_trip().unwrap();
}
