use proptest::prelude::*;
use salt_core::lm::{apply_floor, temperature_scale, Distribution, LmConfig, LmModel};
use salt_core::losses::{ce_loss, combined_loss, kd_loss, mixture_dist, scaled_teacher, topk_kd_loss};
use salt_core::numcore::{Rng, Tensor};

fn logp(rows: &[Vec<f64>]) -> Tensor {
    let v = rows[0].len();
    Tensor::new(vec![rows.len(), v], rows.iter().flatten().map(|p| p.ln()).collect()).unwrap()
}

fn dists(rows: &[Vec<f64>]) -> Vec<Distribution> {
    rows.iter().map(|r| Distribution::new(r.clone()).unwrap()).collect()
}

/// Strictly positive probability rows.
fn rows_strategy(t: usize, v: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, v), t).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|p| p / z).collect()
            })
            .collect()
    })
}

#[test]
fn default_weights_scalar_example() {
    // teacher (0.7, 0.3) sharpened with exponent 0.25, student puts 0.25 on the target
    let out = combined_loss(&[0], &logp(&[vec![0.25, 0.75]]), &dists(&[vec![0.7, 0.3]]), 0.667, 0.25).unwrap();
    assert!((out.standard - 4f64.ln()).abs() < 1e-12);
    assert!((out.distill - 0.894_949_892_333_210_1).abs() < 1e-12);
    assert!((out.combined - 1.058_567_600_439_174_9).abs() < 1e-12);
}

#[test]
fn topk_full_set_is_plain_distillation() {
    let s = logp(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]);
    let t = dists(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]]);
    assert!((topk_kd_loss(&t, &s, 3).unwrap() - kd_loss(&t, &s, 1.0).unwrap()).abs() < 1e-12);
}

#[test]
fn floor_caps_token_loss() {
    let mut rng = Rng::new(8);
    let cap = 1000f64.ln();
    for _ in 0..500 {
        let w: Vec<f64> = (0..10).map(|i| if i == 0 { 1.0 } else { rng.uniform().powi(8) }).collect();
        let d = apply_floor(&Distribution::from_weights(w).unwrap(), 0.01).unwrap();
        assert!(d.probs().iter().all(|p| -p.ln() <= cap + 1e-12));
    }
}

#[test]
fn sequence_log_likelihood_is_negative_t_times_ce() {
    let cfg = LmConfig {
        vocab_size: 5,
        max_len: 6,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        prob_floor: 0.0,
        init_std: 0.5,
    };
    let m = LmModel::init(cfg, &mut Rng::new(2)).unwrap();
    let x = [4, 0, 2, 2, 1, 3];
    let ce = ce_loss(&m.forward_log_probs(&x).unwrap(), &x).unwrap();
    assert!((m.sequence_log_likelihood(&x).unwrap() + 6.0 * ce).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combined_is_affine_in_omega(s in rows_strategy(3, 4), t in rows_strategy(3, 4), rho in 0.1f64..2.0) {
        let (s, t) = (logp(&s), dists(&t));
        let x = [0, 3, 1];
        let at = |w| combined_loss(&x, &s, &t, w, rho).unwrap();
        prop_assert!((at(0.0).combined - at(0.0).standard).abs() < 1e-12);
        prop_assert!((at(1.0).combined - at(1.0).distill).abs() < 1e-12);
        prop_assert!((at(0.5).combined - 0.5 * (at(0.0).combined + at(1.0).combined)).abs() < 1e-12);
    }

    #[test]
    fn per_token_loss_is_mixture_cross_entropy(
        s in rows_strategy(3, 5), t in rows_strategy(3, 5), omega in 0.0f64..=1.0, rho in 0.1f64..2.0
    ) {
        let x = [4, 0, 2];
        let lp = logp(&s);
        let td = dists(&t);
        let out = combined_loss(&x, &lp, &td, omega, rho).unwrap();
        for pos in 0..3 {
            let mix = mixture_dist(x[pos], &scaled_teacher(&td[pos], rho).unwrap(), omega).unwrap();
            let direct = (1.0 - omega) * out.per_token_standard[pos] + omega * out.per_token_distill[pos];
            prop_assert!((mix.cross_entropy_logp(lp.row(pos)) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs(s in rows_strategy(2, 6), t in rows_strategy(2, 6)) {
        let td = dists(&t);
        let self_ce = kd_loss(&td, &logp(&t), 1.0).unwrap();
        prop_assert!(kd_loss(&td, &logp(&s), 1.0).unwrap() >= self_ce - 1e-12);
    }

    #[test]
    fn temperature_keeps_argmax(r in rows_strategy(1, 7), rho in 0.05f64..5.0) {
        let d = Distribution::new(r[0].clone()).unwrap();
        prop_assert_eq!(temperature_scale(&d, rho).unwrap().argmax(), d.argmax());
    }

    #[test]
    fn model_rows_are_causal(seed in 0u64..1000, tail in prop::collection::vec(0u32..6, 3)) {
        let cfg = LmConfig {
            vocab_size: 6, max_len: 6, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 8, prob_floor: 0.0, init_std: 0.5,
        };
        let m = LmModel::init(cfg, &mut Rng::new(seed)).unwrap();
        let a = [1u32, 2, 3, 0, 0, 0];
        let mut b = a;
        b[3..].copy_from_slice(&tail);
        let (la, lb) = (m.forward_log_probs(&a).unwrap(), m.forward_log_probs(&b).unwrap());
        // row t sees tokens before t only
        for t in 0..4 {
            prop_assert_eq!(la.row(t), lb.row(t));
        }
    }
}
