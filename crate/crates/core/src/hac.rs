//! Hyper-adaptive conditioning: a small generator maps the pooled feature `z`
//! of each sample to modulation parameters, which are applied through a gate
//! `X + α(X̃ − X)`.

use std::fmt;
use std::str::FromStr;

use clear_tensor::{Bound, ParamId, ParamStore, Real, Rng, Tensor, Var};

use crate::backbone::fan_in_uniform;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HacMode {
    Film,
    Adapter,
}

impl FromStr for HacMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film" => Ok(HacMode::Film),
            "adapter" => Ok(HacMode::Adapter),
            _ => Err(CoreError::input(format!("unknown hac mode `{s}` (expected film or adapter)"))),
        }
    }
}

impl fmt::Display for HacMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HacMode::Film => "film",
            HacMode::Adapter => "adapter",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HacConfig {
    pub mode: HacMode,
    pub had_feat_dim: usize,
    pub reduction: usize,
    pub gate_bias_init: f64,
}

impl Default for HacConfig {
    fn default() -> Self {
        HacConfig {
            mode: HacMode::Film,
            had_feat_dim: 64,
            reduction: 4,
            gate_bias_init: -2.0,
        }
    }
}

impl HacConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.had_feat_dim == 0 {
            return Err(CoreError::input("hac.had_feat_dim must be positive"));
        }
        if self.reduction == 0 || embed_dim % self.reduction != 0 {
            return Err(CoreError::input(format!(
                "hac.r = {} does not divide embed_dim {embed_dim}",
                self.reduction
            )));
        }
        if !self.gate_bias_init.is_finite() {
            return Err(CoreError::input("hac.gate_bias_init must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Film {
        w_gamma: ParamId,
        b_gamma: ParamId,
        w_beta: ParamId,
        b_beta: ParamId,
    },
    Adapter {
        w_down: ParamId,
        b_down_w: ParamId,
        w_down_b: ParamId,
        b_down_b: ParamId,
        w_up: ParamId,
        b_up_w: ParamId,
        w_up_b: ParamId,
        b_up_b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct HacParams {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub head: HeadParams,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| CoreError::Key(name.to_string()))
}

impl HacParams {
    /// Output heads that produce the modulation are zero-initialized, so the
    /// module starts as an exact identity. In adapter mode only the up
    /// projection is zeroed; the down projection starts random so its
    /// generator receives gradient from the first step.
    pub fn init<T: Real>(cfg: &HacConfig, embed_dim: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate(embed_dim)?;
        let (d, f, r) = (embed_dim, cfg.had_feat_dim, embed_dim / cfg.reduction);
        store.add("hac.hidden.w", fan_in_uniform(rng, &[d, f], d))?;
        store.add("hac.hidden.b", Tensor::zeros(&[f]))?;
        match cfg.mode {
            HacMode::Film => {
                store.add("hac.film.gamma.w", Tensor::zeros(&[f, d]))?;
                store.add("hac.film.gamma.b", Tensor::zeros(&[d]))?;
                store.add("hac.film.beta.w", Tensor::zeros(&[f, d]))?;
                store.add("hac.film.beta.b", Tensor::zeros(&[d]))?;
            }
            HacMode::Adapter => {
                store.add("hac.adapter.down.w", fan_in_uniform(rng, &[f, d * r], f))?;
                store.add("hac.adapter.down.wb", Tensor::zeros(&[d * r]))?;
                store.add("hac.adapter.down_bias.w", fan_in_uniform(rng, &[f, r], f))?;
                store.add("hac.adapter.down_bias.b", Tensor::zeros(&[r]))?;
                store.add("hac.adapter.up.w", Tensor::zeros(&[f, r * d]))?;
                store.add("hac.adapter.up.wb", Tensor::zeros(&[r * d]))?;
                store.add("hac.adapter.up_bias.w", Tensor::zeros(&[f, d]))?;
                store.add("hac.adapter.up_bias.b", Tensor::zeros(&[d]))?;
            }
        }
        store.add("hac.gate.w", Tensor::zeros(&[d, 1]))?;
        store.add("hac.gate.b", Tensor::full(&[1], T::lit(cfg.gate_bias_init)))?;
        Self::lookup(cfg, store)
    }

    pub fn lookup<T: Real>(cfg: &HacConfig, store: &ParamStore<T>) -> Result<Self> {
        let p = |s: &str| lookup(store, s);
        let head = match cfg.mode {
            HacMode::Film => HeadParams::Film {
                w_gamma: p("hac.film.gamma.w")?,
                b_gamma: p("hac.film.gamma.b")?,
                w_beta: p("hac.film.beta.w")?,
                b_beta: p("hac.film.beta.b")?,
            },
            HacMode::Adapter => HeadParams::Adapter {
                w_down: p("hac.adapter.down.w")?,
                b_down_w: p("hac.adapter.down.wb")?,
                w_down_b: p("hac.adapter.down_bias.w")?,
                b_down_b: p("hac.adapter.down_bias.b")?,
                w_up: p("hac.adapter.up.w")?,
                b_up_w: p("hac.adapter.up.wb")?,
                w_up_b: p("hac.adapter.up_bias.w")?,
                b_up_b: p("hac.adapter.up_bias.b")?,
            },
        };
        Ok(HacParams {
            w_hidden: p("hac.hidden.w")?,
            b_hidden: p("hac.hidden.b")?,
            head,
            w_gate: p("hac.gate.w")?,
            b_gate: p("hac.gate.b")?,
        })
    }
}

/// Per-sample generated parameters for a batch.
pub enum Modulation<'t, T: Real> {
    /// `gamma, beta: [B, D]`
    Film { gamma: Var<'t, T>, beta: Var<'t, T> },
    /// `down: [B, D, D/r]`, `b_down: [B, D/r]`, `up: [B, D/r, D]`, `b_up: [B, D]`
    Adapter {
        down: Var<'t, T>,
        b_down: Var<'t, T>,
        up: Var<'t, T>,
        b_up: Var<'t, T>,
    },
}

pub struct HacState<'t, T: Real> {
    pub modulation: Modulation<'t, T>,
    /// `[B, 1]`, each in (0, 1).
    pub gate: Var<'t, T>,
}

/// Runs the generator on `z: [B, D]`.
pub fn generate<'t, T: Real>(
    z: Var<'t, T>,
    cfg: &HacConfig,
    params: &HacParams,
    bound: &Bound<'t, T>,
) -> Result<HacState<'t, T>> {
    let zd = z.dims();
    if zd.len() != 2 {
        return Err(CoreError::input(format!("conditioning input must be [B, D], got {zd:?}")));
    }
    let (b, d) = (zd[0], zd[1]);
    let wd = bound[params.w_hidden].dims();
    if wd[0] != d {
        return Err(CoreError::input(format!("generator expects D = {}, got {d}", wd[0])));
    }
    let hidden = z.matmul(bound[params.w_hidden])?.add(bound[params.b_hidden])?.tanh()?;
    let lin = |w: ParamId, bias: ParamId| -> Result<Var<'t, T>> { Ok(hidden.matmul(bound[w])?.add(bound[bias])?) };
    let modulation = match (&params.head, cfg.mode) {
        (
            HeadParams::Film {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            },
            HacMode::Film,
        ) => Modulation::Film {
            gamma: lin(*w_gamma, *b_gamma)?.add_scalar(1.0)?,
            beta: lin(*w_beta, *b_beta)?,
        },
        (
            HeadParams::Adapter {
                w_down,
                b_down_w,
                w_down_b,
                b_down_b,
                w_up,
                b_up_w,
                w_up_b,
                b_up_b,
            },
            HacMode::Adapter,
        ) => {
            let r = d / cfg.reduction;
            Modulation::Adapter {
                down: lin(*w_down, *b_down_w)?.scale(1.0 / (d as f64).sqrt())?.reshape(&[b, d, r])?,
                b_down: lin(*w_down_b, *b_down_b)?,
                up: lin(*w_up, *b_up_w)?.reshape(&[b, r, d])?,
                b_up: lin(*w_up_b, *b_up_b)?,
            }
        }
        _ => return Err(CoreError::input("hac parameters were built for a different mode")),
    };
    let gate = z.matmul(bound[params.w_gate])?.add(bound[params.b_gate])?.sigmoid()?;
    Ok(HacState { modulation, gate })
}

/// `γ ⊙ X + β` for a map `x: [B*P, D]`, with `gamma, beta: [B, D]` broadcast
/// over the `P` positions of each sample.
pub fn apply_film<'t, T: Real>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xd, gd) = (x.dims(), gamma.dims());
    if xd.len() != 2 || gd.len() != 2 || gamma.dims() != beta.dims() || gd[1] != xd[1] || gd[0] == 0 || xd[0] % gd[0] != 0 {
        return Err(CoreError::input(format!(
            "film factors {gd:?} / {:?} do not match map {xd:?}",
            beta.dims()
        )));
    }
    let (b, d) = (gd[0], gd[1]);
    let x3 = x.reshape(&[b, xd[0] / b, d])?;
    let out = x3.mul(gamma.reshape(&[b, 1, d])?)?.add(beta.reshape(&[b, 1, d])?)?;
    Ok(out.reshape(&xd)?)
}

/// `h + W↑ᵀ relu(W↓ᵀ h + b↓) + b↑` per sample, `h: [B, D]`.
pub fn apply_adapter<'t, T: Real>(
    h: Var<'t, T>,
    down: Var<'t, T>,
    b_down: Var<'t, T>,
    up: Var<'t, T>,
    b_up: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let hd = h.dims();
    let dd = down.dims();
    if hd.len() != 2 || dd.len() != 3 || dd[0] != hd[0] || dd[1] != hd[1] {
        return Err(CoreError::input(format!("adapter down {dd:?} does not match input {hd:?}")));
    }
    let (b, d, r) = (dd[0], dd[1], dd[2]);
    if b_down.dims() != [b, r] || up.dims() != [b, r, d] || b_up.dims() != [b, d] {
        return Err(CoreError::input(format!(
            "adapter shapes disagree: b_down {:?}, up {:?}, b_up {:?}",
            b_down.dims(),
            up.dims(),
            b_up.dims()
        )));
    }
    let bottleneck = h.reshape(&[b, d, 1])?.mul(down)?.sum(&[1], false)?.add(b_down)?.relu()?;
    let lifted = bottleneck.reshape(&[b, r, 1])?.mul(up)?.sum(&[1], false)?;
    Ok(h.add(lifted)?.add(b_up)?)
}

/// `X + α ⊙ (X̃ − X)` with one gate value per sample; `alpha: [B, 1]` and
/// `x, x_tilde` with leading dimension a multiple of `B` (samples in
/// contiguous row groups).
pub fn conditioned_update<'t, T: Real>(x: Var<'t, T>, x_tilde: Var<'t, T>, alpha: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xd, ad) = (x.dims(), alpha.dims());
    if xd != x_tilde.dims() {
        return Err(CoreError::input(format!("update operands differ: {xd:?} vs {:?}", x_tilde.dims())));
    }
    let b = ad.first().copied().unwrap_or(0);
    if ad.len() != 2 || ad[1] != 1 || b == 0 || xd.is_empty() || xd[0] % b != 0 {
        return Err(CoreError::input(format!("gate {ad:?} does not match operands {xd:?}")));
    }
    if alpha.value().data().iter().any(|&a| !(a >= T::zero() && a <= T::one())) {
        return Err(CoreError::input("gate value outside [0, 1]"));
    }
    let inner: usize = xd.iter().product::<usize>() / b;
    let delta = x_tilde.sub(x)?.reshape(&[b, inner])?;
    Ok(x.add(alpha.mul(delta)?.reshape(&xd)?)?)
}

/// Generates, applies and gates the modulation.
///
/// Film mode modulates the map `x: [B*P, D]` and returns a map of the same
/// shape; adapter mode modulates the pooled `z: [B, D]` and returns `[B, D]`.
pub fn hac_forward<'t, T: Real>(
    z: Var<'t, T>,
    x: Var<'t, T>,
    cfg: &HacConfig,
    params: &HacParams,
    bound: &Bound<'t, T>,
) -> Result<Var<'t, T>> {
    let state = generate(z, cfg, params, bound)?;
    match state.modulation {
        Modulation::Film { gamma, beta } => conditioned_update(x, apply_film(x, gamma, beta)?, state.gate),
        Modulation::Adapter { down, b_down, up, b_up } => {
            conditioned_update(z, apply_adapter(z, down, b_down, up, b_up)?, state.gate)
        }
    }
}
