//! Classification, calibration and selective-prediction metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rap::DirichletOutput;

pub const ECE_BINS: usize = 15;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
    pub n: u64,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.n - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.tp(c)).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(CoreError::input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(CoreError::input("confusion matrix needs at least one sample"));
    }
    let mut counts = vec![0u64; k * k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(CoreError::input(format!("class index {} out of range for K = {k}", p.max(t))));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix {
        k,
        counts,
        n: preds.len() as u64,
    })
}

/// Per-class rates; `None` where the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub oa: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes left out of at least one macro mean, with the reason.
    pub excluded: Vec<(usize, String)>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// F1 from precision and sensitivity; 0 when both are 0. An undefined
/// precision (nothing predicted) counts as 0.
pub fn f1_score(precision: Option<f64>, sensitivity: f64) -> f64 {
    let p = precision.unwrap_or(0.0);
    if p + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * p * sensitivity / (p + sensitivity)
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let mut excluded = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..cm.k)
        .map(|c| {
            let (tp, fp, fn_, tn) = (cm.tp(c), cm.fp(c), cm.fn_(c), cm.tn(c));
            let precision = ratio(tp, tp + fp);
            let sensitivity = ratio(tp, tp + fn_);
            if tp + fn_ == 0 {
                excluded.push((c, "no samples".to_string()));
            } else if precision.is_none() {
                excluded.push((c, "never predicted (precision only)".to_string()));
            }
            ClassMetrics {
                support: tp + fn_,
                predicted: tp + fp,
                precision,
                sensitivity,
                specificity: ratio(tn, tn + fp),
                f1: sensitivity.map(|se| f1_score(precision, se)),
            }
        })
        .collect();
    // Classes without samples are dropped from every mean.
    let kept = || per_class.iter().filter(|m| m.support > 0);
    MacroMetrics {
        oa: cm.trace() as f64 / cm.n as f64,
        precision: mean_defined(kept().map(|m| m.precision)),
        sensitivity: mean_defined(kept().map(|m| m.sensitivity)),
        specificity: mean_defined(kept().map(|m| m.specificity)),
        f1: mean_defined(kept().map(|m| m.f1)),
        per_class,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// Mean over contributing classes; NaN when no class contributes.
    #[serde(with = "nan_as_null")]
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes with no positive or no negative sample.
    pub excluded: Vec<usize>,
}

/// Midranks (1-based) of `values`; tied values share their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest Mann–Whitney AUC per class, macro-averaged. `scores` is
/// row-major `[N, K]` with rows on the probability simplex.
pub fn ovr_auc(scores: &[f64], labels: &[usize], k: usize) -> Result<AucResult> {
    let n = labels.len();
    if scores.len() != n * k {
        return Err(CoreError::input(format!("{} scores for {n} samples x {k} classes", scores.len())));
    }
    for (i, row) in scores.chunks(k.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| !(-1e-4..=1.0 + 1e-4).contains(&v)) {
            return Err(CoreError::input(format!("score row {i} is not a probability vector (sum {s})")));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(CoreError::input(format!("label {y} out of range for K = {k}")));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let n_pos = labels.iter().filter(|&&y| y == c).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            excluded.push(c);
            per_class.push(None);
            continue;
        }
        let ranks = midranks(&col);
        let rank_sum: f64 = (0..n).filter(|&i| labels[i] == c).map(|i| ranks[i]).sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        per_class.push(Some(u / (n_pos as f64 * n_neg as f64)));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(AucResult {
        macro_auc,
        per_class,
        excluded,
    })
}

/// Bin of a confidence value among `bins` equal-width bins on [0, 1]; 1.0
/// falls in the last bin.
pub fn ece_bin(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Expected calibration error `Σ_b (n_b/N) |acc_b − conf_b|`; empty bins
/// contribute nothing.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() || bins == 0 {
        return Err(CoreError::input("ece needs equal-length inputs and at least one bin"));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(CoreError::input(format!("confidence {c} outside [0, 1]")));
        }
        let b = ece_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let m = count[b] as f64;
        total += m / n * (hits[b] as f64 / m - conf_sum[b] / m).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    /// Nominal retained fraction.
    pub coverage: f64,
    pub retained: usize,
    /// Largest uncertainty among the retained samples.
    pub threshold: f64,
    pub selective_accuracy: f64,
    pub risk: f64,
}

/// Selective accuracy when keeping the `ceil(c N)` least uncertain samples
/// (at least one), for c = 100%, 90%, ..., 10%. Ties in uncertainty keep the
/// lower original index first.
pub fn risk_coverage(uncertainties: &[f64], correct: &[bool]) -> Result<Vec<RiskRow>> {
    if uncertainties.len() != correct.len() {
        return Err(CoreError::input("risk_coverage needs equal-length inputs"));
    }
    let n = uncertainties.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then(a.cmp(&b)));
    let mut prefix = vec![0usize; n + 1];
    for (i, &j) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + correct[j] as usize;
    }
    Ok((1..=10)
        .rev()
        .map(|tenths| {
            let kept = ((n * tenths).div_ceil(10)).max(1);
            let acc = prefix[kept] as f64 / kept as f64;
            RiskRow {
                coverage: tenths as f64 / 10.0,
                retained: kept,
                threshold: uncertainties[order[kept - 1]],
                selective_accuracy: acc,
                risk: 1.0 - acc,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linearly interpolated quantile of sorted data at `q` in [0, 1]
/// (position `q (n − 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSplit {
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub correct: Option<Quartiles>,
    pub incorrect: Option<Quartiles>,
    /// `median(correct) − median(incorrect)`, when both groups are present.
    pub gap: Option<f64>,
}

impl ConfidenceSplit {
    /// False when one of the groups is empty.
    pub fn is_complete(&self) -> bool {
        self.gap.is_some()
    }
}

pub fn confidence_split(confidences: &[f64], correct: &[bool]) -> Result<ConfidenceSplit> {
    if confidences.len() != correct.len() {
        return Err(CoreError::input("confidence_split needs equal-length inputs"));
    }
    let pick = |want: bool| -> Vec<f64> {
        confidences.iter().zip(correct).filter(|(_, &c)| c == want).map(|(&v, _)| v).collect()
    };
    let (good, bad) = (pick(true), pick(false));
    let (qc, qi) = (quartiles(&good), quartiles(&bad));
    Ok(ConfidenceSplit {
        n_correct: good.len(),
        n_incorrect: bad.len(),
        gap: qc.zip(qi).map(|(a, b)| a.median - b.median),
        correct: qc,
        incorrect: qi,
    })
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: usize,
    pub pred: usize,
    pub confidence: f64,
    pub entropy: f64,
    pub total_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub n: usize,
    pub oa: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// NaN when no class has both positives and negatives.
    #[serde(with = "nan_as_null")]
    pub auc: f64,
    pub ece: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub per_class_auc: Vec<Option<f64>>,
    pub excluded: Vec<(usize, String)>,
    pub risk_coverage: Vec<RiskRow>,
    pub confidence_split: ConfidenceSplit,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_outputs(outputs: &[DirichletOutput], labels: &[usize], k: usize) -> Result<Self> {
        if outputs.len() != labels.len() {
            return Err(CoreError::input(format!("{} outputs for {} labels", outputs.len(), labels.len())));
        }
        if let Some(o) = outputs.iter().find(|o| o.num_classes() != k) {
            return Err(CoreError::input(format!("output has {} classes, expected {k}", o.num_classes())));
        }
        let preds: Vec<usize> = outputs.iter().map(|o| o.label).collect();
        let cm = confusion(&preds, labels, k)?;
        let mm = macro_metrics(&cm);
        let scores: Vec<f64> = outputs.iter().flat_map(|o| o.probs.iter().copied()).collect();
        let auc = ovr_auc(&scores, labels, k)?;
        let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, y)| p == y).collect();
        let samples: Vec<SampleRecord> = outputs
            .iter()
            .zip(labels)
            .map(|(o, &y)| {
                let (confidence, entropy, total_evidence) = o.uncertainty_summary();
                SampleRecord {
                    label: y,
                    pred: o.label,
                    confidence,
                    entropy,
                    total_evidence,
                }
            })
            .collect();
        let conf: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
        let unc: Vec<f64> = samples.iter().map(|s| s.entropy).collect();
        let mut excluded = mm.excluded.clone();
        for &c in &auc.excluded {
            excluded.push((c, "no positive or no negative sample (AUC only)".to_string()));
        }
        Ok(EvalReport {
            num_classes: k,
            n: labels.len(),
            oa: mm.oa,
            precision: mm.precision,
            sensitivity: mm.sensitivity,
            specificity: mm.specificity,
            f1: mm.f1,
            auc: auc.macro_auc,
            ece: ece(&conf, &correct, ECE_BINS)?,
            confusion: cm,
            per_class: mm.per_class,
            per_class_auc: auc.per_class,
            excluded,
            risk_coverage: risk_coverage(&unc, &correct)?,
            confidence_split: confidence_split(&conf, &correct)?,
            samples,
        })
    }

    pub fn selective_accuracy_at(&self, coverage: f64) -> Option<f64> {
        self.risk_coverage
            .iter()
            .find(|r| (r.coverage - coverage).abs() < 1e-9)
            .map(|r| r.selective_accuracy)
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
