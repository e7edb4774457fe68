mod common;

use clear_core::rap::{
    adaptive_lambda, edl_loss, edl_nll, entropy, evidence, kl_to_uniform, kl_to_uniform_value, one_hot,
    DirichletOutput, EdlLossConfig, NllForm, Schedule,
};
use clear_tensor::{finite_diff_check, GradCheckOptions, ParamStore, Rng, Tape, Tensor, TensorError};
use common::{kl_monte_carlo, random_vec};
use proptest::prelude::*;

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, data).unwrap()
}

fn nll(alpha: &[f64], label: usize, form: NllForm) -> f64 {
    let k = alpha.len();
    let tape = Tape::new();
    let y = one_hot::<f64>(&[label], k).unwrap();
    edl_nll(tape.constant(t64(&[1, k], alpha)), &y, form).unwrap().item().unwrap()
}

#[test]
fn evidence_examples() {
    let tape = Tape::new();
    let z = tape.constant(t64(&[2, 3], &[0.5, -1.0, 2.0, 1.0, 0.0, -3.0]));
    let w = tape.constant(Tensor::zeros(&[3, 4]));
    let e = evidence(z, w, tape.constant(Tensor::zeros(&[4]))).unwrap().to_tensor();
    assert!(e.data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    let e = evidence(z, w, tape.constant(Tensor::full(&[4], -20.0))).unwrap().to_tensor();
    assert!(e.data().iter().all(|&v| (0.0..=1e-8).contains(&v)));
}

#[test]
fn evidence_gradient_matches_finite_differences() {
    let mut rng = Rng::new(1, 0);
    let z = t64(&[3, 5], &random_vec(&mut rng, 15, -1.0, 1.0));
    let mut store = ParamStore::new();
    let w = store.add("w", t64(&[5, 4], &random_vec(&mut rng, 20, -1.0, 1.0))).unwrap();
    let b = store.add("b", t64(&[4], &random_vec(&mut rng, 4, -1.0, 1.0))).unwrap();
    let report = finite_diff_check(
        |tape, bound| {
            let e = evidence(tape.constant(z.clone()), bound[w], bound[b]).map_err(|e| TensorError::Graph(e.to_string()))?;
            e.square()?.mean_all()
        },
        &mut store,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:e}", report.max_rel_error());
}

#[test]
fn dirichlet_examples() {
    let o = DirichletOutput::from_evidence(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(o.alpha, vec![2.0, 1.0, 1.0, 1.0]);
    assert_eq!(o.total, 5.0);
    assert_eq!(o.probs, vec![0.4, 0.2, 0.2, 0.2]);

    let o = DirichletOutput::from_evidence(&[0.0; 4]).unwrap();
    assert!(o.probs.iter().all(|&p| p == 0.25));
    assert_eq!(o.total, 4.0);
    assert!((o.entropy - 4f64.ln()).abs() < 1e-12);
    assert!((o.entropy - 1.3863).abs() < 1e-4);

    let o = DirichletOutput::from_evidence(&[10.0, 0.0]).unwrap();
    assert_eq!(o.label, 0);
    assert!((o.probs[0] - 11.0 / 12.0).abs() < 1e-15 && (o.probs[1] - 1.0 / 12.0).abs() < 1e-15);

    assert!(DirichletOutput::from_evidence(&[]).is_err());
    assert!(DirichletOutput::from_evidence(&[1.0, -0.5]).is_err());
    assert!(DirichletOutput::from_evidence(&[1.0, f64::NAN]).is_err());
}

#[test]
fn uncertainty_summary_examples() {
    let o = DirichletOutput::from_evidence(&[0.0; 43]).unwrap();
    let (conf, h, s) = o.uncertainty_summary();
    assert!((conf - 1.0 / 43.0).abs() < 1e-15);
    assert!((h - 43f64.ln()).abs() < 1e-12 && (h - 3.761).abs() < 1e-3);
    assert_eq!(s, 43.0);

    let k = 10;
    let eps = 1e-6;
    let mut p = vec![eps / (k - 1) as f64; k];
    p[0] = 1.0 - eps;
    assert!(entropy(&p) < 1e-4);

    let base = DirichletOutput::from_evidence(&[0.5, 1.0, 2.0]).unwrap();
    for i in 0..3 {
        let mut e = vec![0.5, 1.0, 2.0];
        e[i] += 0.25;
        assert!(DirichletOutput::from_evidence(&e).unwrap().total > base.total);
    }
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(kl_to_uniform_value(&[1.0; 5]).unwrap(), 0.0);
    let v = kl_to_uniform_value(&[2.0, 1.0]).unwrap();
    assert!((v - (2f64.ln() - 0.5)).abs() < 1e-6);
    assert!((v - 0.19315).abs() < 1e-5);
    let mut prev = 0.0;
    for t in [0.5, 1.0, 2.0] {
        let v = kl_to_uniform_value(&[1.0 + t, 1.0]).unwrap();
        assert!(v > prev);
        prev = v;
    }
    assert!(kl_to_uniform_value(&[0.0, 1.0]).is_err());

    let tape = Tape::new();
    let kl = kl_to_uniform(tape.constant(t64(&[2, 2], &[2.0, 1.0, 1.0, 1.0]))).unwrap().to_tensor();
    assert!((kl.data()[0] - v_ref()).abs() < 1e-12);
    assert!(kl.data()[1].abs() < 1e-12);
}

fn v_ref() -> f64 {
    2f64.ln() - 0.5
}

#[test]
fn kl_agrees_with_monte_carlo() {
    let mut rng = Rng::new(2024, 0);
    for alpha in [vec![2.0, 1.0], vec![3.0, 1.5, 2.0]] {
        let closed = kl_to_uniform_value(&alpha).unwrap();
        let (mc, se) = kl_monte_carlo(&mut rng, &alpha, 1_000_000);
        assert!((closed - mc).abs() <= 3.0 * se, "{alpha:?}: closed {closed} mc {mc} se {se}");
    }
}

#[test]
fn nll_examples() {
    assert!(nll(&[1e6, 1.0, 1.0], 0, NllForm::LogMarginal) < 1e-5);
    for y in 0..2 {
        assert!((nll(&[1.0, 1.0], y, NllForm::LogMarginal) - 2f64.ln()).abs() < 1e-12);
    }
    assert!((nll(&[2.0, 1.0], 0, NllForm::DigammaCe) - 0.5).abs() < 1e-12);
    // (1 − 2/3)² + (1/3)² plus variance terms 2 · (2/3 · 1/3) / 4.
    let brier = 2.0 / 9.0 + 1.0 / 9.0;
    assert!((nll(&[2.0, 1.0], 0, NllForm::Brier) - brier).abs() < 1e-12);
}

#[test]
fn lambda_examples() {
    assert!((adaptive_lambda(5e-3, 1.2, 1.0, Schedule::Adaptive, 3, 10) - 6e-3).abs() < 1e-15);
    assert_eq!(adaptive_lambda(5e-3, 1.2, 0.0, Schedule::Adaptive, 3, 10), 5e-3);
    assert_eq!(adaptive_lambda(5e-3, 1.2, 0.7, Schedule::Anneal, 0, 10), 0.0);
    assert_eq!(adaptive_lambda(5e-3, 1.2, 0.7, Schedule::Anneal, 20, 10), 5e-3);
    assert_eq!(adaptive_lambda(5e-3, 1.2, 0.7, Schedule::Fixed, 0, 10), 5e-3);
}

#[test]
fn loss_examples() {
    let tape = Tape::new();
    let alpha = tape.constant(t64(&[2, 3], &[3.0, 1.5, 1.2, 1.1, 4.0, 2.0]));
    let labels = [0, 1];
    let y = one_hot::<f64>(&labels, 3).unwrap();
    let mean_nll = edl_nll(alpha, &y, NllForm::DigammaCe).unwrap().mean_all().unwrap().item().unwrap();
    let zero = EdlLossConfig { kl_coef: 0.0, ..Default::default() };
    let (loss, lambda) = edl_loss(alpha, &labels, &zero, 4).unwrap();
    assert_eq!(lambda, 0.0);
    assert_eq!(loss.item().unwrap(), mean_nll);

    let ones = tape.constant(Tensor::full(&[2, 3], 1.0));
    let ones_nll = edl_nll(ones, &y, NllForm::DigammaCe).unwrap().mean_all().unwrap().item().unwrap();
    for masking in [true, false] {
        let cfg = EdlLossConfig { kl_coef: 10.0, kl_masking: masking, ..Default::default() };
        let (loss, lambda) = edl_loss(ones, &labels, &cfg, 4).unwrap();
        assert!(lambda > 0.0);
        assert!((loss.item().unwrap() - ones_nll).abs() < 1e-12);
    }

    assert!(edl_loss(alpha, &[0], &zero, 0).is_err());
    assert!(edl_loss(alpha, &[0, 3], &zero, 0).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3, 0);
    let labels = [0usize, 2, 1, 2];
    for form in [NllForm::DigammaCe, NllForm::LogMarginal, NllForm::Brier] {
        for masking in [true, false] {
            let mut store = ParamStore::new();
            let a = store.add("alpha", t64(&[4, 3], &random_vec(&mut rng, 12, 1.2, 4.0))).unwrap();
            let cfg = EdlLossConfig {
                kl_coef: 0.05,
                schedule: Schedule::Fixed,
                nll_form: form,
                kl_masking: masking,
                ..Default::default()
            };
            let report = finite_diff_check(
                |_, bound| edl_loss(bound[a], &labels, &cfg, 0).map(|r| r.0).map_err(|e| TensorError::Graph(e.to_string())),
                &mut store,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{form} masking={masking}: {:e}", report.max_rel_error());
        }
    }
}

#[test]
fn more_true_class_evidence_lowers_nll() {
    for form in [NllForm::DigammaCe, NllForm::LogMarginal, NllForm::Brier] {
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let v = nll(&[t, 1.5, 1.0], 0, form);
            assert!(v < prev, "{form} at {t}");
            prev = v;
        }
    }
}

#[test]
fn config_strings_and_validation() {
    assert_eq!("brier".parse::<NllForm>().unwrap(), NllForm::Brier);
    assert_eq!("anneal".parse::<Schedule>().unwrap(), Schedule::Anneal);
    assert_eq!(NllForm::DigammaCe.to_string(), "digamma_ce");
    assert!("cosine".parse::<Schedule>().is_err());
    assert!(EdlLossConfig { kl_scale: 0.9, ..Default::default() }.validate().is_err());
    assert!(EdlLossConfig { kl_coef: -1.0, ..Default::default() }.validate().is_err());
    let d = EdlLossConfig::default();
    assert_eq!((d.kl_coef, d.kl_scale), (5e-3, 1.2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dirichlet_summaries_are_consistent(e in prop::collection::vec(0.0f64..1e3, 2..12)) {
        let k = e.len() as f64;
        let o = DirichletOutput::from_evidence(&e).unwrap();
        prop_assert!((o.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(o.total >= k);
        prop_assert!(o.entropy >= 0.0 && o.entropy <= k.ln() + 1e-12);
        prop_assert!(o.probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn kl_is_non_negative(alpha in prop::collection::vec(0.05f64..50.0, 2..8)) {
        let v = kl_to_uniform_value(&alpha).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
        let tape = Tape::new();
        let k = alpha.len();
        let clamped: Vec<f64> = alpha.iter().map(|a| a.max(1.0)).collect();
        let t = kl_to_uniform(tape.constant(t64(&[1, k], &clamped))).unwrap().item().unwrap();
        prop_assert!((t - v).abs() < 1e-9 * (1.0 + v));
    }

    #[test]
    fn lambda_stays_in_bounds(
        coef in 0.0f64..1.0,
        scale in 1.0f64..3.0,
        h in -1.0f64..2.0,
        epoch in 0usize..200,
        horizon in 0usize..50,
    ) {
        for schedule in [Schedule::Fixed, Schedule::Anneal, Schedule::Adaptive] {
            let l = adaptive_lambda(coef, scale, h, schedule, epoch, horizon);
            prop_assert!(l >= 0.0 && l <= coef * scale + 1e-15);
        }
    }
}
