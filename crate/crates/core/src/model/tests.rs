use proptest::prelude::*;

use super::*;
use crate::gradcore::{GradSession, LayerSpec};

fn config(family: PrimitiveFamily, k: usize, risks: usize, d: usize, hidden: Vec<usize>) -> ModelConfig {
    ModelConfig {
        family,
        k,
        risks,
        layers: LayerSpec::new(d, hidden),
        alpha: 0.5,
        lambda: 0.3,
    }
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("f{i}")).collect()
}

fn model(family: PrimitiveFamily, seed: u64) -> DsmModel {
    let mut m = DsmModel::new(config(family, 3, 2, 4, vec![5, 3]), names(4)).unwrap();
    m.initialize(vec![PrimitiveParams::new(0.2, -0.1), PrimitiveParams::new(-0.3, 0.4)], seed)
        .unwrap();
    m.set_time_scale(1.7).unwrap();
    m
}

fn toy_data(n: usize, seed: u64) -> SurvivalDataset {
    use rand::Rng;
    let mut r = rng::stream(seed, "toy");
    let features = (0..n * 4).map(|_| r.gen_range(-1.5..1.5)).collect();
    let times = (0..n).map(|_| r.gen_range(0.05..4.0)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    SurvivalDataset::new(features, 4, times, labels, names(4), 2).unwrap()
}

#[test]
fn parameter_count_formula() {
    // d·h1 + h1 + h1·h2 + h2 + M(3·h2·K + 2K)
    let m = DsmModel::new(config(PrimitiveFamily::Weibull, 4, 2, 12, vec![50, 50]), names(12)).unwrap();
    assert_eq!(m.parameter_count(), 12 * 50 + 50 + 50 * 50 + 50 + 2 * (3 * 50 * 4 + 2 * 4));
    let one = DsmModel::new(config(PrimitiveFamily::LogNormal, 6, 1, 3, vec![7]), names(3)).unwrap();
    assert_eq!(one.parameter_count(), 3 * 7 + 7 + 3 * 7 * 6 + 2 * 6);
}

#[test]
fn config_validation() {
    let bad_alpha = ModelConfig {
        alpha: 1.5,
        ..config(PrimitiveFamily::Weibull, 1, 1, 2, vec![2])
    };
    assert!(DsmModel::new(bad_alpha, names(2)).is_err());
    assert!(DsmModel::new(config(PrimitiveFamily::Weibull, 0, 1, 2, vec![2]), names(2)).is_err());
    assert!(DsmModel::new(config(PrimitiveFamily::Weibull, 1, 1, 2, vec![2]), names(3)).is_err());
}

#[test]
fn zero_network_gives_base_parameters() {
    let mut m = DsmModel::new(config(PrimitiveFamily::Weibull, 2, 1, 2, vec![3]), names(2)).unwrap();
    let id = m.store().id("risk1.log_scale_base").unwrap();
    m.store_mut().value_mut(id).copy_from_slice(&[0.5, -0.5]);
    let mix = m.instance_mixture(1, &[1.0, 2.0]).unwrap();
    assert_eq!(mix.weights, vec![0.5, 0.5]);
    assert_eq!(mix.components[0], PrimitiveParams::new(0.0, 0.5));
    assert_eq!(mix.components[1], PrimitiveParams::new(0.0, -0.5));
    assert!(m.instance_mixture(2, &[1.0, 2.0]).is_err());
    assert!(m.instance_mixture(1, &[1.0]).is_err());
}

#[test]
fn time_scale_is_undone_in_predictions() {
    for family in [PrimitiveFamily::Weibull, PrimitiveFamily::LogNormal] {
        let mut m = model(family, 3);
        let x = [0.3, -0.2, 1.0, 0.1];
        m.set_time_scale(1.0).unwrap();
        let base = m.predict_survival(1, &x, 0.8).unwrap();
        m.set_time_scale(2.5).unwrap();
        let scaled = m.predict_survival(1, &x, 0.8 * 2.5).unwrap();
        assert!((base - scaled).abs() < 1e-12, "{family}: {base} vs {scaled}");
    }
}

#[test]
fn survival_curve_is_monotone_and_starts_at_one() {
    let m = model(PrimitiveFamily::LogNormal, 8);
    let x = [1.0, 0.0, -1.0, 0.5];
    assert_eq!(m.predict_survival(2, &x, 0.0).unwrap(), 1.0);
    let mut prev = 1.0;
    for i in 1..50 {
        let s = m.predict_survival(2, &x, i as f64 * 0.2).unwrap();
        assert!(s <= prev + 1e-15);
        prev = s;
    }
    assert!((m.predict_cif(2, &x, 1.0).unwrap() + m.predict_survival(2, &x, 1.0).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn elbos_bound_the_exact_log_likelihood() {
    let m = model(PrimitiveFamily::Weibull, 5);
    let mix = m.instance_mixture(1, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    for t in [0.1, 1.0, 3.0] {
        assert!(mix.elbo_uncensored(t).unwrap() <= mix.log_density(t).unwrap() + 1e-12);
        assert!(mix.elbo_censored(t).unwrap() <= mix.log_survival(t).unwrap() + 1e-12);
    }
    assert!(mix.elbo_uncensored(0.0).is_err());
}

#[test]
fn prior_loss_is_zero_at_the_anchors() {
    let mut m = model(PrimitiveFamily::Weibull, 1);
    let anchor = m.anchors()[0];
    for (name, v) in [("risk1.log_shape_base", anchor.log_shape), ("risk1.log_scale_base", anchor.log_scale)] {
        let id = m.store().id(name).unwrap();
        m.store_mut().value_mut(id).iter_mut().for_each(|x| *x = v);
    }
    assert_eq!(m.prior_loss(1).unwrap(), 0.0);
    assert!(m.prior_loss(2).unwrap() > 0.0);
}

/// Initialised model with biases moved off zero, so no ReLU6 unit sits
/// exactly on a kink.
fn model_off_kinks(family: PrimitiveFamily, seed: u64) -> DsmModel {
    use rand::Rng;
    let mut m = model(family, seed);
    let mut r = rng::stream(seed, "bias-jitter");
    let ids: Vec<_> = m.store().ids().filter(|&id| m.store().name(id).ends_with("bias")).collect();
    for id in ids {
        m.store_mut().value_mut(id).iter_mut().for_each(|b| *b = r.gen_range(0.05..0.3));
    }
    m
}

fn finite_difference_check(family: PrimitiveFamily, seed: u64) {
    let m = model_off_kinks(family, seed);
    let data = toy_data(40, seed);
    let rows: Vec<usize> = (0..data.len()).collect();
    let loss = CombinedLoss::new(&m, &data, &rows).unwrap();
    let mut grads = vec![0.0; m.parameter_count()];
    loss.value_and_grad(m.store().values(), &mut grads).unwrap();
    let mut values = m.store().values().to_vec();
    let h = 1e-6;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = loss.value(&values).unwrap();
        values[i] = orig - h;
        let down = loss.value(&values).unwrap();
        values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-5 * (1.0 + fd.abs());
        assert!(
            (fd - grads[i]).abs() < tol,
            "{family} {}: analytic {} vs numeric {fd}",
            m.store().name_of_index(i),
            grads[i]
        );
    }
}

#[test]
fn weibull_loss_gradient_matches_finite_differences() {
    finite_difference_check(PrimitiveFamily::Weibull, 11);
}

#[test]
fn lognormal_loss_gradient_matches_finite_differences() {
    finite_difference_check(PrimitiveFamily::LogNormal, 12);
}

#[test]
fn grad_session_accumulates_the_loss_gradient() {
    let mut m = model(PrimitiveFamily::Weibull, 2);
    let data = toy_data(10, 2);
    let rows: Vec<usize> = (0..data.len()).collect();
    let snapshot = m.clone();
    let loss = CombinedLoss::new(&snapshot, &data, &rows).unwrap();
    let mut session = GradSession::new(&loss);
    assert!(session.backward(m.store_mut()).is_err());
    let v = session.forward(m.store()).unwrap();
    assert_eq!(v, m.combined_loss(&data).unwrap());
    session.backward(m.store_mut()).unwrap();
    let mut direct = vec![0.0; m.parameter_count()];
    loss.value_and_grad(m.store().values(), &mut direct).unwrap();
    assert_eq!(m.store().grads(), direct.as_slice());
}

#[test]
fn censored_rows_are_inert_without_alpha() {
    let mut m = model(PrimitiveFamily::LogNormal, 4);
    m.set_alpha(0.0).unwrap();
    let data = toy_data(60, 4);
    let events: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) != 0).collect();
    let all: Vec<usize> = (0..data.len()).collect();
    let full = CombinedLoss::new(&m, &data, &all).unwrap().value(m.store().values()).unwrap();
    let trimmed = CombinedLoss::new(&m, &data, &events).unwrap().value(m.store().values()).unwrap();
    assert_eq!(full, trimmed);
}

#[test]
fn model_file_round_trips_bit_exactly() {
    let mut m = model(PrimitiveFamily::LogNormal, 21);
    m.feature_names[1] = "odd \\ name\nwith newline".into();
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let back = parse_model(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, m);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.store().values()), bits(m.store().values()));
}

#[test]
fn malformed_model_files_are_rejected() {
    let m = model(PrimitiveFamily::Weibull, 3);
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let truncated = &text[..text.len() / 2];
    assert!(parse_model(truncated).is_err());
    assert!(parse_model(&text.replace("risk1.gate", "risk1.gatex")).is_err());
    assert!(parse_model(&text.replace("dsm-model 1", "dsm-model 2")).is_err());
    assert!(parse_model(&text.replace("end\n", "")).is_err());
    assert!(parse_model(&format!("{text}junk\n")).is_err());
    assert!(parse_model("dsm-model 1\nfamily weibull\nk 1\nrisks 1\ninput_dim 99999999\nhidden 99999999\nalpha 1\nlambda 0\ntime_scale 1\nparam x 1 1 0\nend\n").is_err());
    let dropped: String = text.lines().filter(|l| !l.starts_with("anchor 2")).map(|l| format!("{l}\n")).collect();
    assert!(parse_model(&dropped).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gating_weights_form_a_distribution(x in prop::collection::vec(-5.0f64..5.0, 4), seed in 0u64..50) {
        let m = model(PrimitiveFamily::Weibull, seed);
        for risk in 1..=2 {
            let mix = m.instance_mixture(risk, &x).unwrap();
            prop_assert!((mix.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(mix.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn parse_never_panics(text in "\\PC{0,400}") {
        let _ = parse_model(&text);
    }
}
