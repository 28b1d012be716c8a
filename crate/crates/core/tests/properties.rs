//! Invariants over randomized inputs.

use faer::Mat;
use proptest::prelude::*;
use scvamp_core::dsm::{dsm_gradient, dsm_loss, weights_from_str, weights_to_string, DsmBatch, MlpScoreNet};
use scvamp_core::numerics::{pairwise_sum, RngStream};
use scvamp_core::score::{
    bg_score_scalar, score_bg_prior, BernoulliGaussianParams, PairwiseGaussianParams, PairwiseGaussianScore, ScoreModel,
};
use scvamp_core::siso::{extrinsic_message, onsager_coefficient, siso_from_scores, SisoConfig, SisoMessage};
use scvamp_core::state_evolution::{mmse_bg, run_se, GaussianPriorMmse, LinearMmse, SeConfig};

fn small_batch(seed: u64) -> DsmBatch {
    let mut rng = RngStream::seeded(seed);
    let x0: Vec<(f64, f64)> = (0..7).map(|_| (rng.standard_normal(), rng.standard_normal())).collect();
    let sigma: Vec<f64> = (0..7).map(|_| rng.uniform_range(0.1, 2.0)).collect();
    let z: Vec<(f64, f64)> = sigma
        .iter()
        .map(|s| (s * rng.standard_normal(), s * rng.standard_normal()))
        .collect();
    DsmBatch::new(&x0, &z, &sigma).unwrap()
}

#[test]
fn dsm_gradient_matches_finite_differences() {
    let mut net = MlpScoreNet::glorot(&[3, 6, 5, 2], 4).unwrap();
    let batch = small_batch(1);
    let (loss, grad) = dsm_gradient(&net, &batch).unwrap();
    assert_eq!(loss, dsm_loss(&net, &batch).unwrap());
    let h = 1e-6;
    for k in 0..grad.len() {
        let orig = net.params()[k];
        net.params_mut()[k] = orig + h;
        let up = dsm_loss(&net, &batch).unwrap();
        net.params_mut()[k] = orig - h;
        let down = dsm_loss(&net, &batch).unwrap();
        net.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        assert!(
            (fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
            "param {k}: {fd} vs {}",
            grad[k]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn onsager_alpha_stays_in_clip(v in 1e-4f64..10.0, j in 0.0f64..1e4, n in 1usize..500) {
        let o = onsager_coefficient(v, j, n, (1e-6, 1.0 - 1e-6)).unwrap();
        prop_assert!(o.alpha >= 1e-6 && o.alpha <= 1.0 - 1e-6);
        prop_assert_eq!(o.clipped, o.alpha != o.raw);
    }

    #[test]
    fn extrinsic_recombines_to_posterior(alpha in 0.01f64..0.99, v in 1e-3f64..5.0, seed in any::<u64>()) {
        let mut rng = RngStream::seeded(seed);
        let x_in = rng.gaussian_matrix(5, 3, 1.0);
        let x_post = rng.gaussian_matrix(5, 3, 1.0);
        let ext = extrinsic_message(x_in.as_ref(), v, x_post.as_ref(), alpha).unwrap();
        let v_post = v * alpha;
        prop_assert!((1.0 / v_post - (1.0 / v + 1.0 / ext.variance)).abs() <= 1e-9 / v_post);
        for j in 0..3 {
            for i in 0..5 {
                let combined = v_post * (x_in[(i, j)] / v + ext.mean[(i, j)] / ext.variance);
                prop_assert!((combined - x_post[(i, j)]).abs() <= 1e-9 * (1.0 + x_post[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn stein_calibration_enforces_the_moment(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = RngStream::seeded(seed);
        let x = rng.gaussian_matrix(6, 40, 1.0);
        let scores = Mat::from_fn(6, 40, |i, j| -scale * x[(i, j)] + 0.1 * (i as f64 - j as f64 / 40.0));
        let input = SisoMessage::new(x.clone(), 0.5).unwrap();
        let cfg = SisoConfig { stein_calibration: true, ..Default::default() };
        let r = siso_from_scores(&input, scores.clone(), None, &cfg).unwrap();
        prop_assume!(!r.calibration_fallback);
        let moments: Vec<f64> = (0..40)
            .map(|j| (0..6).map(|i| x[(i, j)] * r.calibration * scores[(i, j)]).sum())
            .collect();
        prop_assert!((pairwise_sum(&moments) / 40.0 + 6.0).abs() < 1e-9);
    }

    #[test]
    fn bg_mmse_is_below_both_simple_estimators(v in 1e-4f64..10.0, rho in 0.01f64..0.99) {
        let p = BernoulliGaussianParams::new(rho, 1.0).unwrap();
        let m = mmse_bg(v, &p, 2000);
        prop_assert!(m > 0.0);
        prop_assert!(m <= v.min(rho) * (1.0 + 1e-9));
        prop_assert!(m <= rho * v / (rho + v) * (1.0 + 1e-9));
    }

    #[test]
    fn bg_score_is_odd(x in -20.0f64..20.0, v in 1e-3f64..5.0, rho in 0.0f64..=1.0) {
        let p = BernoulliGaussianParams::new(rho, 1.0).unwrap();
        prop_assert!((bg_score_scalar(x, v, &p) + bg_score_scalar(-x, v, &p)).abs() <= 1e-12 * (1.0 + x.abs() / v));
        let s = score_bg_prior(&[x], v, &p).unwrap();
        prop_assert!(s[0].is_finite());
    }

    #[test]
    fn pairwise_score_is_linear(v in 1e-3f64..5.0, xi in -0.99f64..0.99, a in -5.0f64..5.0, seed in any::<u64>()) {
        let model = PairwiseGaussianScore::new(4, PairwiseGaussianParams::new(1.0, xi).unwrap()).unwrap();
        let mut rng = RngStream::seeded(seed);
        let r: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let ar: Vec<f64> = r.iter().map(|x| a * x).collect();
        let s = model.score(&r, v, None).unwrap();
        let sa = model.score(&ar, v, None).unwrap();
        for (p, q) in s.iter().zip(&sa) {
            prop_assert!((a * p - q).abs() <= 1e-10 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn gaussian_se_decreases_monotonically(p in 0.1f64..10.0, s2 in 0.01f64..5.0) {
        let se = run_se(
            &SeConfig { v_init: p, ..Default::default() },
            &LinearMmse::scalar(s2).unwrap(),
            &GaussianPriorMmse { power: p },
        )
        .unwrap();
        let mses: Vec<f64> = se.rows.iter().skip(1).map(|r| r.predicted_mse).collect();
        for w in mses.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let want = p * s2 / (p + s2);
        prop_assert!((mses.last().unwrap() - want).abs() <= 1e-10 * want);
    }

    #[test]
    fn weight_text_round_trips(seed in any::<u64>()) {
        let net = MlpScoreNet::glorot(&[3, 4, 2], seed).unwrap();
        let back = weights_from_str(&weights_to_string(&net).unwrap()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn split_streams_are_reproducible(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let a: Vec<u64> = { let mut r = RngStream::seeded(seed).split(&label); (0..4).map(|_| r.next_u64()).collect() };
        let mut parent = RngStream::seeded(seed);
        parent.next_u64();
        let b: Vec<u64> = { let mut r = parent.split(&label); (0..4).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(a, b);
    }
}
