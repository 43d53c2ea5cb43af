use dse_core::bridge::{
    forward_marginal, make_step_schedule, posterior_coeffs, reverse_sample, step_params, BridgeSchedule, EpsSource,
};
use dse_core::tensor::{Latent, Tensor};
use proptest::prelude::*;

fn latent(values: &[f64]) -> Latent {
    Tensor::vector(values.to_vec())
}

proptest! {
    #[test]
    fn marginal_is_pinned_at_both_ends(
        total in 2usize..300,
        scale in 0.01f64..5.0,
        v in prop::collection::vec(-10.0f64..10.0, 12),
    ) {
        let s = BridgeSchedule::new(total, scale).unwrap();
        let (x0, y, eps) = (latent(&v[0..4]), latent(&v[4..8]), latent(&v[8..12]));
        prop_assert_eq!(forward_marginal(&s, &x0, &y, 0, &eps).unwrap(), x0.clone());
        prop_assert_eq!(forward_marginal(&s, &x0, &y, total, &eps).unwrap(), y);
    }

    #[test]
    fn transitions_compose(total in 3usize..500, scale in 0.01f64..5.0, picks in prop::array::uniform3(0.0f64..1.0)) {
        let s = BridgeSchedule::new(total, scale).unwrap();
        let mut ts: Vec<usize> = picks.iter().map(|p| (p * total as f64) as usize).collect();
        ts.sort();
        ts.dedup();
        prop_assume!(ts.len() == 3);
        let (a, b, c) = (ts[0], ts[1], ts[2]);
        let ab = step_params(&s, a, b).unwrap();
        let bc = step_params(&s, b, c).unwrap();
        let ac = step_params(&s, a, c).unwrap();
        prop_assert!((bc.a * ab.a - ac.a).abs() < 1e-12);
        prop_assert!((bc.a * ab.b + bc.b - ac.b).abs() < 1e-12);
        prop_assert!((bc.a * bc.a * ab.v + bc.v - ac.v).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_never_exceeds_marginal(total in 2usize..1000, scale in 0.01f64..5.0, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let s = BridgeSchedule::new(total, scale).unwrap();
        let t_from = 1 + (p * (total - 1) as f64) as usize;
        let t_to = (q * t_from as f64) as usize;
        prop_assume!(t_to < t_from);
        let c = posterior_coeffs(&s, t_from, t_to).unwrap();
        prop_assert!(c.variance.is_finite() && c.variance >= 0.0);
        prop_assert!(c.variance <= s.delta(t_to) * (1.0 + 1e-12));
        // A state on the line between x0 and y is carried along it.
        prop_assert!((c.coef_xt + c.coef_x0 + c.coef_y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step_schedules_run_from_t_to_zero(total in 1usize..2000, n in 1usize..2000) {
        prop_assume!(n <= total);
        let steps = make_step_schedule(total, n).unwrap();
        let st = steps.steps();
        prop_assert_eq!(st[0], total);
        prop_assert_eq!(st.len(), n);
        prop_assert!(st.windows(2).all(|w| w[0] > w[1]));
        let tr: Vec<_> = steps.transitions().collect();
        prop_assert_eq!(tr.len(), n);
        prop_assert_eq!(tr.last().unwrap().1, 0);
        prop_assert!(tr.iter().all(|(a, b)| a > b));
    }

    #[test]
    fn true_displacement_recovers_x0(total in 2usize..400, frac in 0.01f64..1.0, v in prop::collection::vec(-3.0f64..3.0, 8)) {
        let s = BridgeSchedule::new(total, 1.0).unwrap();
        let n = ((frac * total as f64) as usize).max(1);
        let (x0, y) = (latent(&v[0..4]), latent(&v[4..8]));
        let truth = |x: &Latent, _t: usize, _c: &Latent| x.zip_map(&x0, |a, b| a - b);
        let steps = make_step_schedule(total, n).unwrap();
        let eps = EpsSource::standard_normal(0.0).unwrap();
        let out = reverse_sample(&s, &y, &y, &truth, &steps, &eps, 0).unwrap();
        for (a, b) in out.data.iter().zip(&x0.data) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let s = BridgeSchedule::new(100, 1.0).unwrap();
    let y = latent(&[0.1, 0.2, 0.3, 0.4]);
    let zero = |x: &Latent, _t: usize, _c: &Latent| Ok(Tensor::zeros(x.channels, x.height, x.width));
    let steps = make_step_schedule(100, 20).unwrap();
    let eps = EpsSource::standard_normal(1.0).unwrap();
    let a = reverse_sample(&s, &y, &y, &zero, &steps, &eps, 3).unwrap();
    let b = reverse_sample(&s, &y, &y, &zero, &steps, &eps, 3).unwrap();
    let c = reverse_sample(&s, &y, &y, &zero, &steps, &eps, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
