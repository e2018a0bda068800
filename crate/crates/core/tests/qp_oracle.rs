mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpvmpc::qp::{solve_qp, QpStatus, DEFAULT_MAX_ITER};

#[test]
fn condensed_qps_match_projected_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut active = 0;
    for case in 0..120 {
        let np = 1 + case % 10;
        let qp = common::random_condensed_qp(&mut rng, np);
        let sol = solve_qp(&qp, 1e-9, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let kkt = qp.kkt_residual(&sol.z, &sol.lambda);
        assert!(kkt.max() <= 1e-6, "case {case}: {kkt:?}");
        let oracle = common::dual_projected_gradient(&qp, 1e-10, 400_000);
        let err = (&sol.z - &oracle).norm();
        worst = worst.max(err);
        assert!(err <= 1e-5, "case {case} (Np = {np}): |z - z_oracle| = {err:e}");
        active += usize::from(sol.lambda.iter().any(|&l| l > 0.0));
    }
    assert!(active > 30, "only {active} problems had active constraints");
    eprintln!("worst deviation {worst:e}, {active} problems with active constraints");
}
