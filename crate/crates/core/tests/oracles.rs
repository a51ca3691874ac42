mod common;

use proptest::prelude::*;

#[test]
fn local_assembly_matches_brute_force() {
    common::check_local_assembly().unwrap();
}

#[test]
fn edge_neighbours_follow_the_ring_order() {
    let rig = mbev::model::RigConfig::default().build().unwrap();
    let geo = common::geometric_neighbours(&rig).unwrap();
    for (v, &(l, r)) in geo.iter().enumerate() {
        assert_eq!((rig.left(v), rig.right(v)), (l, r), "view {v}");
    }
}

#[test]
fn hungarian_matches_exhaustive_search() {
    common::check_hungarian(500).unwrap();
}

#[test]
fn focal_spot_values() {
    common::check_focal_spot_values().unwrap();
}

#[test]
fn sincos_reference_cell() {
    common::check_sincos_reference().unwrap();
}

#[test]
fn partition_examples() {
    common::check_partition_examples().unwrap();
}

proptest! {
    #[test]
    fn partition_keeps_the_column_budget(wf in 1usize..200, rho in 0.001f64..0.999) {
        prop_assert!(common::partition_invariant(wf, rho).is_ok(), "{:?}", common::partition_invariant(wf, rho));
    }
}
