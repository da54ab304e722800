use attnpool::heads::HeadKind;
use attnpool::selftest::head_gradient_error;

#[test]
fn every_head_passes_finite_differences_over_twenty_seeds() {
    for kind in HeadKind::ALL {
        for seed in 0..20 {
            let err = head_gradient_error(kind, seed).unwrap();
            assert!(err <= 1e-6, "{kind} seed {seed}: {err:e}");
        }
    }
}
