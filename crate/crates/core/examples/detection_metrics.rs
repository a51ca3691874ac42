//! Scores hand-made predictions against ground truth with the distance-based
//! AP, the true-positive errors and the composite score.

use mbev::detection::{GtBox, PredBox};
use mbev::metrics::{evaluate, nds_like};

fn gt(class_id: usize, x: f64, y: f64) -> GtBox {
    GtBox {
        class_id,
        center: [x, y, 0.8],
        size: [4.5, 1.9, 1.6],
        yaw: 0.3,
        velocity: [0.0, 0.0],
    }
}

fn pred(score: f64, g: &GtBox, dx: f64, dyaw: f64) -> PredBox {
    PredBox {
        score,
        class_id: g.class_id,
        center: [g.center[0] + dx, g.center[1], g.center[2]],
        size: g.size.map(|s| s * 1.1),
        yaw: g.yaw + dyaw,
        velocity: g.velocity,
    }
}

fn main() {
    let gts = vec![
        vec![gt(0, 10.0, 2.0), gt(1, -5.0, 12.0)],
        vec![gt(0, 20.0, -8.0), gt(0, 3.0, 3.0)],
    ];
    let preds = vec![
        vec![pred(0.9, &gts[0][0], 0.3, 0.1), pred(0.6, &gts[0][1], 1.5, 0.0)],
        // A confident false positive, a near hit and a miss.
        vec![pred(0.95, &gt(0, -20.0, -20.0), 0.0, 0.0), pred(0.7, &gts[1][1], 0.7, 0.5)],
    ];
    let r = evaluate(&preds, &gts, 2);
    println!("mAP {:.4}  per class {:?}", r.map, r.class_ap);
    println!("mATE {:.3} m  mASE {:.3}  mAOE {:.3} rad", r.mate, r.mase, r.maoe);
    println!("NDS_like {:.4}", r.nds);
    println!("perfect detector: {:.1}, nothing detected: {:.1}", nds_like(1.0, [0.0; 3]), nds_like(0.0, [2.0, 1.0, 3.2]));
}
