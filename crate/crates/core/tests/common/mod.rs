//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use clear_tensor::Rng;
use statrs::function::gamma::ln_gamma;

/// Plain loop over one visiting order. `x, a: [T, D]`, `b, c: [N, D]`,
/// `d: [D]`; returns `[T, D]` indexed by position.
pub fn scan_oracle(x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], dd: usize, order: &[usize]) -> Vec<f64> {
    let n = b.len() / dd;
    let mut h = vec![vec![0.0; dd]; n];
    let mut y = vec![0.0; x.len()];
    for &pos in order {
        for ch in 0..dd {
            let xv = x[pos * dd + ch];
            let mut out = d[ch] * xv;
            for (slot, hs) in h.iter_mut().enumerate() {
                hs[ch] = a[pos * dd + ch] * hs[ch] + b[slot * dd + ch] * xv;
                out += c[slot * dd + ch] * hs[ch];
            }
            y[pos * dd + ch] = out;
        }
    }
    y
}

pub fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

pub fn random_labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(k as u64) as usize).collect()
}

/// Random probability rows built from small integer weights, so ties occur.
pub fn random_simplex_rows(rng: &mut Rng, n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let w: Vec<f64> = (0..k).map(|_| 1.0 + rng.below(4) as f64).collect();
        let s: f64 = w.iter().sum();
        out.extend(w.iter().map(|v| v / s));
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Per-class counts by examining every sample against every class.
pub fn count_oracle(preds: &[usize], labels: &[usize], k: usize) -> Vec<Counts> {
    let mut out = vec![Counts::default(); k];
    for (c, cnt) in out.iter_mut().enumerate() {
        for (&p, &y) in preds.iter().zip(labels) {
            match (y == c, p == c) {
                (true, true) => cnt.tp += 1,
                (false, true) => cnt.fp += 1,
                (true, false) => cnt.fn_ += 1,
                (false, false) => cnt.tn += 1,
            }
        }
    }
    out
}

pub struct MacroOracle {
    pub oa: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

/// Macro rates over classes with at least one sample; undefined per-class
/// rates are skipped, F1 treats an undefined precision as 0.
pub fn macro_oracle(preds: &[usize], labels: &[usize], k: usize) -> MacroOracle {
    let counts = count_oracle(preds, labels, k);
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut acc = [(0.0, 0usize); 4];
    let mut push = |slot: usize, v: Option<f64>| {
        if let Some(v) = v {
            acc[slot].0 += v;
            acc[slot].1 += 1;
        }
    };
    for c in &counts {
        if c.tp + c.fn_ == 0 {
            continue;
        }
        let p = (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64);
        let se = c.tp as f64 / (c.tp + c.fn_) as f64;
        let sp = (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64);
        let pz = p.unwrap_or(0.0);
        let f1 = if pz + se == 0.0 { 0.0 } else { 2.0 * pz * se / (pz + se) };
        push(0, p);
        push(1, Some(se));
        push(2, sp);
        push(3, Some(f1));
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    MacroOracle {
        oa: hits as f64 / labels.len() as f64,
        precision: mean(acc[0]),
        sensitivity: mean(acc[1]),
        specificity: mean(acc[2]),
        f1: mean(acc[3]),
    }
}

/// One-vs-rest AUC by comparing every positive with every negative.
pub fn pairwise_auc(scores: &[f64], labels: &[usize], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| scores[i * k + c]).collect();
            let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != c).map(|i| scores[i * k + c]).collect();
            if pos.is_empty() || neg.is_empty() {
                return None;
            }
            let mut wins = 0.0;
            for &p in &pos {
                for &q in &neg {
                    wins += if p > q {
                        1.0
                    } else if p == q {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            Some(wins / (pos.len() * neg.len()) as f64)
        })
        .collect()
}

/// Per-bin loop with bins `[b/B, (b+1)/B)` and 1.0 in the last bin.
pub fn ece_oracle(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == bins - 1 && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf_sum: f64 = members.iter().map(|&i| conf[i]).sum();
        let hits = members.iter().filter(|&&i| correct[i]).count() as f64;
        total += m / n * (hits / m - conf_sum / m).abs();
    }
    total
}

/// `(retained, selective accuracy)` for coverage 100%, 90%, ..., 10%.
pub fn risk_oracle(unc: &[f64], correct: &[bool]) -> Vec<(usize, f64)> {
    let n = unc.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| unc[a].partial_cmp(&unc[b]).unwrap());
    (1..=10)
        .rev()
        .map(|t| {
            let kept = ((n * t + 9) / 10).max(1);
            let hits = idx[..kept].iter().filter(|&&i| correct[i]).count();
            (kept, hits as f64 / kept as f64)
        })
        .collect()
}

/// Linear-interpolation quantile at position `q (n − 1)` of sorted data.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Marsaglia–Tsang gamma sampler with unit scale.
pub fn sample_gamma(rng: &mut Rng, shape: f64) -> f64 {
    if shape < 1.0 {
        let u = rng.uniform();
        return sample_gamma(rng, shape + 1.0) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.uniform();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// Monte-Carlo estimate of `KL(Dir(alpha) || Dir(1))` and its standard
/// error, computing log-densities on each sample.
pub fn kl_monte_carlo(rng: &mut Rng, alpha: &[f64], samples: usize) -> (f64, f64) {
    let k = alpha.len();
    let s: f64 = alpha.iter().sum();
    let log_norm = ln_gamma(s) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let log_uniform = ln_gamma(k as f64);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut g = vec![0.0; k];
    for _ in 0..samples {
        for (gi, &a) in g.iter_mut().zip(alpha) {
            *gi = sample_gamma(rng, a);
        }
        let total: f64 = g.iter().sum();
        let log_p = log_norm + g.iter().zip(alpha).filter(|(_, &a)| a != 1.0).map(|(&gi, &a)| (a - 1.0) * (gi / total).ln()).sum::<f64>();
        let term = log_p - log_uniform;
        sum += term;
        sum_sq += term * term;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
