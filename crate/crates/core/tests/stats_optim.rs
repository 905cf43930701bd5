use geode_core::optim::{clip_gradients, grad_norm, AdamConfig, AdamW, Schedule, StepOutcome};
use geode_core::stats::{binomial_ci, mean, sign_test, std};
use geode_core::GeodeError;
use geode_tensor::{GradMap, ParamStore, Tensor};
use proptest::prelude::*;

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn brute_tail(n: u64, k: u64) -> f64 {
    (k..=n).map(|j| choose(n, j)).sum::<f64>() / 2f64.powi(n as i32)
}

#[test]
fn mean_and_std_match_hand_values() {
    assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    assert!((std(&[1.0, 2.0, 6.0]).unwrap() - 7f64.sqrt()).abs() < 1e-12);
    assert!(std(&[4.0]).is_none());
    assert!(mean(&[]).is_nan());
}

proptest! {
    #[test]
    fn sign_test_matches_brute_force(pos in 0u64..40, neg in 0u64..40, ties in 0u64..5) {
        let mut d = vec![1.0; pos as usize];
        d.extend(vec![-0.5; neg as usize]);
        d.extend(vec![0.0; ties as usize]);
        let s = sign_test(&d);
        prop_assert_eq!((s.positive, s.negative, s.ties), (pos, neg, ties));
        let n = pos + neg;
        let greater = if n == 0 { 1.0 } else { brute_tail(n, pos) };
        let two = if n == 0 { 1.0 } else { (2.0 * brute_tail(n, pos.max(neg))).min(1.0) };
        prop_assert!((s.p_greater - greater).abs() < 1e-9);
        prop_assert!((s.p_two_sided - two).abs() < 1e-9);
    }

    #[test]
    fn binomial_ci_brackets_the_rate(n in 1u64..300, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as u64;
        let (lo, hi) = binomial_ci(k, n, 0.05);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }
}

#[test]
fn sign_test_reference_value() {
    let mut d = vec![1.0; 15];
    d.extend(vec![-1.0; 5]);
    let s = sign_test(&d);
    // P(X >= 15 | n = 20, p = 1/2) = 21700 / 2^20
    assert!((s.p_greater - 21700.0 / 1048576.0).abs() < 1e-12);
}

#[test]
fn clopper_pearson_reference_values() {
    let (lo, hi) = binomial_ci(5, 10, 0.05);
    assert!((lo - 0.1870860284).abs() < 1e-8, "{lo}");
    assert!((hi - 0.8129139716).abs() < 1e-8, "{hi}");
    let (lo, hi) = binomial_ci(0, 10, 0.05);
    assert_eq!(lo, 0.0);
    assert!((hi - 0.3084971078).abs() < 1e-8, "{hi}");
}

fn store_with(name: &str, values: Vec<f32>) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(name, Tensor::vector(values));
    s
}

fn grads_of(name: &str, values: Vec<f32>) -> GradMap {
    let mut g = GradMap::new();
    g.insert(name.to_string(), Tensor::vector(values));
    g
}

#[test]
fn zero_gradient_only_decays() {
    let mut s = store_with("w", vec![2.0, -4.0]);
    let mut opt = AdamW::new(AdamConfig::new(0.1, 0.01, 0.0, Schedule::Constant));
    opt.step(&mut s, grads_of("w", vec![0.0, 0.0])).unwrap();
    let w = s.get("w").unwrap().data();
    assert!((w[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-6);
    assert!((w[1] + 4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-6);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = grads_of("a", vec![3.0, 4.0]);
    g.insert("b".into(), Tensor::vector(vec![12.0]));
    let before = clip_gradients(&mut g, 1.0);
    assert!((before - 13.0).abs() < 1e-9);
    assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    let mut small = grads_of("a", vec![0.1]);
    clip_gradients(&mut small, 1.0);
    assert_eq!(small["a"].data(), &[0.1]);
}

#[test]
fn converges_on_a_quadratic() {
    let target = [1.5f32, -0.5, 3.0];
    let mut s = store_with("w", vec![0.0; 3]);
    let mut opt = AdamW::new(AdamConfig::new(0.05, 0.0, 1.0, Schedule::warmup_cosine(2000, 0.05)));
    for _ in 0..2000 {
        let w = s.get("w").unwrap().data().to_vec();
        let g = w.iter().zip(target).map(|(w, t)| 2.0 * (w - t)).collect();
        opt.step(&mut s, grads_of("w", g)).unwrap();
    }
    for (w, t) in s.get("w").unwrap().data().iter().zip(target) {
        assert!((w - t).abs() < 1e-2, "{w} vs {t}");
    }
}

#[test]
fn frozen_gradient_is_rejected() {
    let mut s = store_with("w", vec![1.0]);
    s.set_trainable("w", false);
    let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0, 0.0, Schedule::Constant));
    assert!(opt.step(&mut s, grads_of("w", vec![1.0])).is_err());
    assert!(opt.step(&mut s, grads_of("missing", vec![1.0])).is_err());
}

#[test]
fn non_finite_steps_skip_then_abort() {
    let mut s = store_with("w", vec![1.0]);
    let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0, 0.0, Schedule::Constant));
    for i in 1..geode_core::optim::MAX_SKIPPED {
        let out = opt.step(&mut s, grads_of("w", vec![f32::NAN])).unwrap();
        assert_eq!(out, StepOutcome::Skipped { consecutive: i });
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
    }
    let err = opt.step(&mut s, grads_of("w", vec![f32::INFINITY])).unwrap_err();
    assert!(matches!(err, GeodeError::Diverged(_)));
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let s = Schedule::warmup_cosine(100, 0.1);
    assert!((s.factor(0) - 0.1).abs() < 1e-12);
    assert!((s.factor(9) - 1.0).abs() < 1e-12);
    assert!(s.factor(50) < 1.0 && s.factor(50) > s.factor(90));
    assert!(s.factor(100).abs() < 1e-12);
}

#[test]
fn optimizer_state_round_trips() {
    let mut s = store_with("w", vec![1.0, 2.0]);
    let mut a = AdamW::new(AdamConfig::new(0.1, 0.01, 0.0, Schedule::Constant));
    for _ in 0..3 {
        a.step(&mut s, grads_of("w", vec![0.3, -0.2])).unwrap();
    }
    let mut b = AdamW::new(a.config.clone());
    b.load_state(&a.state()).unwrap();
    let (mut sa, mut sb) = (s.clone(), s);
    a.step(&mut sa, grads_of("w", vec![0.1, 0.1])).unwrap();
    b.step(&mut sb, grads_of("w", vec![0.1, 0.1])).unwrap();
    assert_eq!(sa.get("w").unwrap().data(), sb.get("w").unwrap().data());
    assert_eq!(a.steps(), b.steps());
}
