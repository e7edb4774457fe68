//! Evidential Dirichlet head, its training objective and uncertainty
//! summaries.

use std::fmt;
use std::str::FromStr;

use clear_tensor::special::{digamma, ln_gamma};
use clear_tensor::{Real, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Fixed,
    Anneal,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NllForm {
    DigammaCe,
    LogMarginal,
    Brier,
}

macro_rules! string_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = CoreError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(CoreError::input(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: ", $($s, " ",)+ ")"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$var => $s,)+
                })
            }
        }
    };
}

string_enum!(Schedule { Fixed => "fixed", Anneal => "anneal", Adaptive => "adaptive" });
string_enum!(NllForm { DigammaCe => "digamma_ce", LogMarginal => "log_marginal", Brier => "brier" });

#[derive(Debug, Clone, PartialEq)]
pub struct EdlLossConfig {
    pub kl_coef: f64,
    pub kl_scale: f64,
    pub schedule: Schedule,
    pub anneal_horizon: usize,
    pub nll_form: NllForm,
    /// Remove the true-class concentration before the KL term.
    pub kl_masking: bool,
}

impl Default for EdlLossConfig {
    fn default() -> Self {
        EdlLossConfig {
            kl_coef: 5e-3,
            kl_scale: 1.2,
            schedule: Schedule::Adaptive,
            anneal_horizon: 10,
            nll_form: NllForm::DigammaCe,
            kl_masking: true,
        }
    }
}

impl EdlLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(CoreError::input(format!("rap.kl_coef must be >= 0, got {}", self.kl_coef)));
        }
        if !(self.kl_scale >= 1.0 && self.kl_scale.is_finite()) {
            return Err(CoreError::input(format!("rap.kl_scale must be >= 1, got {}", self.kl_scale)));
        }
        Ok(())
    }
}

/// `softplus(z W + b)`: `z: [B, D]`, `w: [D, K]`, `b: [K]` → `[B, K]`.
pub fn evidence<'t, T: Real>(z: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(z.matmul(w)?.add(b)?.softplus()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub total: f64,
    pub probs: Vec<f64>,
    /// Predictive entropy of `probs`, in nats.
    pub entropy: f64,
    pub label: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

impl DirichletOutput {
    pub fn from_evidence(e: &[f64]) -> Result<Self> {
        if e.is_empty() {
            return Err(CoreError::input("evidence vector is empty"));
        }
        if let Some(bad) = e.iter().find(|&&v| !(v >= 0.0 && v.is_finite())) {
            return Err(CoreError::input(format!("evidence must be finite and non-negative, got {bad}")));
        }
        let alpha: Vec<f64> = e.iter().map(|&v| v + 1.0).collect();
        let total: f64 = alpha.iter().sum();
        let probs: Vec<f64> = alpha.iter().map(|&a| a / total).collect();
        Ok(DirichletOutput {
            evidence: e.to_vec(),
            total,
            entropy: entropy(&probs),
            label: argmax(&probs),
            alpha,
            probs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// `(confidence, entropy, total evidence)`, with confidence = max p̂.
    pub fn uncertainty_summary(&self) -> (f64, f64, f64) {
        (self.probs[self.label], self.entropy, self.total)
    }
}

/// `KL[Dir(α) ‖ Dir(1)]` evaluated in f64.
pub fn kl_to_uniform_value(alpha: &[f64]) -> Result<f64> {
    if let Some(bad) = alpha.iter().find(|&&a| !(a > 0.0)) {
        return Err(CoreError::input(format!("concentration must be positive, got {bad}")));
    }
    let alpha: Vec<f64> = alpha.iter().map(|&a| a.max(1.0)).collect();
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma(s) - ln_gamma(k);
    for &a in &alpha {
        kl += (a - 1.0) * (digamma(a) - psi_s) - ln_gamma(a);
    }
    Ok(kl.max(0.0))
}

/// Per-sample `KL[Dir(α̃) ‖ Dir(1)]` for `alpha_tilde: [B, K]`, returned as
/// `[B]`. Values are clamped to at least 1 first.
pub fn kl_to_uniform<'t, T: Real>(alpha_tilde: Var<'t, T>) -> Result<Var<'t, T>> {
    let dims = alpha_tilde.dims();
    if dims.len() != 2 {
        return Err(CoreError::input(format!("concentrations must be [B, K], got {dims:?}")));
    }
    let k = dims[1];
    let a = alpha_tilde.clamp_min(1.0)?;
    let s = a.sum(&[1], true)?;
    let digamma_gap = a.digamma()?.sub(s.digamma()?)?;
    let cross = a.add_scalar(-1.0)?.mul(digamma_gap)?.sum(&[1], false)?;
    let norm = s.lgamma()?.reshape(&[dims[0]])?.sub(a.lgamma()?.sum(&[1], false)?)?;
    Ok(norm.add(cross)?.add_scalar(-ln_gamma(k as f64))?)
}

/// One-hot `[B, K]` matrix for `labels`.
pub fn one_hot<T: Real>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CoreError::input(format!("label {y} out of range for {k} classes")));
        }
        data[i * k + y] = T::one();
    }
    Ok(Tensor::new(&[labels.len(), k], data)?)
}

fn check_one_hot<T: Real>(y: &Tensor<T>, dims: &[usize]) -> Result<()> {
    if y.dims() != dims {
        return Err(CoreError::input(format!("targets {:?} do not match concentrations {dims:?}", y.dims())));
    }
    for row in y.data().chunks(dims[1].max(1)) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(CoreError::input("targets are not one-hot"));
        }
    }
    Ok(())
}

/// Per-sample likelihood term, `[B]`.
pub fn edl_nll<'t, T: Real>(alpha: Var<'t, T>, y: &Tensor<T>, form: NllForm) -> Result<Var<'t, T>> {
    let dims = alpha.dims();
    if dims.len() != 2 {
        return Err(CoreError::input(format!("concentrations must be [B, K], got {dims:?}")));
    }
    check_one_hot(y, &dims)?;
    let tape = alpha.tape();
    let yv = tape.constant(y.clone());
    let s = alpha.sum(&[1], true)?;
    let b = dims[0];
    Ok(match form {
        NllForm::DigammaCe => {
            let picked = alpha.digamma()?.mul(yv)?.sum(&[1], false)?;
            s.digamma()?.reshape(&[b])?.sub(picked)?
        }
        NllForm::LogMarginal => {
            let picked = alpha.ln()?.mul(yv)?.sum(&[1], false)?;
            s.ln()?.reshape(&[b])?.sub(picked)?
        }
        NllForm::Brier => {
            let p = alpha.div(s)?;
            let err = yv.sub(p)?.square()?;
            let var = p.mul(p.rsub_scalar(1.0)?)?.div(s.add_scalar(1.0)?)?;
            err.add(var)?.sum(&[1], false)?
        }
    })
}

/// KL coefficient for one batch. `mean_norm_entropy` is the batch mean of
/// `H / ln K`, in [0, 1].
pub fn adaptive_lambda(
    kl_coef: f64,
    kl_scale: f64,
    mean_norm_entropy: f64,
    schedule: Schedule,
    epoch: usize,
    anneal_horizon: usize,
) -> f64 {
    match schedule {
        Schedule::Fixed => kl_coef,
        Schedule::Anneal => {
            let frac = if anneal_horizon == 0 { 1.0 } else { (epoch as f64 / anneal_horizon as f64).min(1.0) };
            kl_coef * frac
        }
        Schedule::Adaptive => kl_coef * (1.0 + (kl_scale - 1.0) * mean_norm_entropy.clamp(0.0, 1.0)),
    }
}

/// Batch mean of `H(p̂) / ln K` from concentration values `[B, K]`.
pub fn mean_normalized_entropy<T: Real>(alpha: &Tensor<T>) -> f64 {
    let k = alpha.dims()[1];
    if k < 2 || alpha.numel() == 0 {
        return 0.0;
    }
    let rows = alpha.data().chunks(k);
    let n = rows.len() as f64;
    let total: f64 = rows
        .map(|row| {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            let p: Vec<f64> = row.iter().map(|v| v.as_f64() / s).collect();
            entropy(&p)
        })
        .sum();
    total / n / (k as f64).ln()
}

/// Batch loss `mean_i [NLL_i + λ KL_i]` and the λ used. λ is computed from
/// the current concentrations but treated as a constant for differentiation.
pub fn edl_loss<'t, T: Real>(
    alpha: Var<'t, T>,
    labels: &[usize],
    cfg: &EdlLossConfig,
    epoch: usize,
) -> Result<(Var<'t, T>, f64)> {
    let dims = alpha.dims();
    if dims.len() != 2 || dims[0] != labels.len() || dims[0] == 0 {
        return Err(CoreError::input(format!(
            "{} labels for concentrations {dims:?}",
            labels.len()
        )));
    }
    let y = one_hot::<T>(labels, dims[1])?;
    let nll = edl_nll(alpha, &y, cfg.nll_form)?;
    let lambda = adaptive_lambda(
        cfg.kl_coef,
        cfg.kl_scale,
        mean_normalized_entropy(&alpha.value()),
        cfg.schedule,
        epoch,
        cfg.anneal_horizon,
    );
    if lambda == 0.0 {
        return Ok((nll.mean_all()?, lambda));
    }
    let tape = alpha.tape();
    let alpha_tilde = if cfg.kl_masking {
        let keep: Vec<T> = y.data().iter().map(|&v| T::one() - v).collect();
        let keep = tape.constant(Tensor::new(&dims, keep)?);
        alpha.mul(keep)?.add(tape.constant(y))?
    } else {
        alpha
    };
    let kl = kl_to_uniform(alpha_tilde)?.scale(lambda)?;
    Ok((nll.add(kl)?.mean_all()?, lambda))
}
