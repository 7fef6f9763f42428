mod common;

use common::gradcheck::{relative_error, ALL_OPS};
use jiehua_core::tensor::Rng;

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = Rng::new(0x6ead);
    let mut worst = Vec::new();
    for kind in ALL_OPS {
        let max = (0..50)
            .map(|_| relative_error(kind, &mut rng))
            .fold(0.0f64, f64::max);
        worst.push((kind, max));
    }
    for (kind, err) in &worst {
        println!("{kind:?}: max relative error {err:.2e}");
    }
    for (kind, err) in worst {
        assert!(err < 1e-3, "{kind:?} relative error {err}");
    }
}
