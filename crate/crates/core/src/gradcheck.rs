//! Finite-difference suite over every differentiable operation and over the
//! composed model loss, in f64.

use std::time::Instant;

use clear_tensor::{
    finite_diff_check, BinaryOp, Bound, GradCheckOptions, ParamStore, Rng, Tape, Tensor, TensorError, UnaryOp, Var,
};

use crate::backbone::{
    decay, fuse_with_gate, gated_fuse, global_pool, patch_embed, pre_norm, BackboneConfig, Scale,
};
use crate::error::{CoreError, Result};
use crate::hac::{apply_adapter, apply_film, conditioned_update, HacConfig, HacMode};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::rap::{edl_loss, edl_nll, kl_to_uniform, one_hot, EdlLossConfig, NllForm, Schedule};
use crate::scan::{raster_orders, selective_scan};

type TResult<T> = std::result::Result<T, TensorError>;

fn lift<T>(r: Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Graph(other.to_string()),
    })
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub tol: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::from_f64(dims, &v).expect("dims match")
}

/// `Σ w ⊙ v` with fixed random `w`, so every output element carries a
/// distinct weight into the scalar.
fn weighted_sum<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> TResult<Var<'t, f64>> {
    let mut rng = Rng::new(seed, 0x3e1);
    let w = tape.constant(uniform(&mut rng, &v.dims(), -1.0, 1.0));
    v.mul(w)?.sum_all()
}

fn run<F>(name: &str, store: &mut ParamStore<f64>, opts: GradCheckOptions, f: F) -> Result<CaseResult>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> TResult<Var<'t, f64>>,
{
    let start = Instant::now();
    let report = finite_diff_check(f, store, opts)?;
    Ok(CaseResult {
        name: name.to_string(),
        coords: report.params.iter().map(|p| p.checked).sum(),
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Every tape primitive and every model building block on small random
/// inputs away from kinks and domain edges.
pub fn primitive_cases(opts: GradCheckOptions) -> Result<Vec<CaseResult>> {
    let mut rng = Rng::new(7, 0x6c);
    let mut out = Vec::new();

    let unary: [(&str, UnaryOp, f64, f64); 11] = [
        ("neg", UnaryOp::Neg, -2.0, 2.0),
        ("sigmoid", UnaryOp::Sigmoid, -3.0, 3.0),
        ("tanh", UnaryOp::Tanh, -2.0, 2.0),
        ("relu", UnaryOp::Relu, 0.1, 2.0),
        ("softplus", UnaryOp::Softplus, -4.0, 4.0),
        ("exp", UnaryOp::Exp, -2.0, 2.0),
        ("ln", UnaryOp::Log, 0.3, 3.0),
        ("sqrt", UnaryOp::Sqrt, 0.3, 3.0),
        ("square", UnaryOp::Square, -2.0, 2.0),
        ("lgamma", UnaryOp::Lgamma, 0.4, 6.0),
        ("digamma", UnaryOp::Digamma, 0.4, 6.0),
    ];
    for (name, op, lo, hi) in unary {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&mut rng, &[3, 4], lo, hi))?;
        out.push(run(name, &mut s, opts, |t, b| weighted_sum(t, t.unary(op, b[x])?, 1))?);
    }
    // Relu also on the negative side, where its gradient is zero.
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(&mut rng, &[5], -2.0, -0.1))?;
    out.push(run("relu_negative", &mut s, opts, |t, b| weighted_sum(t, b[x].relu()?, 2))?);

    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        let mut s = ParamStore::new();
        let a = s.add("a", uniform(&mut rng, &[2, 3, 4], -2.0, 2.0))?;
        let c = s.add("b", uniform(&mut rng, &[3, 1], 0.5, 2.0))?;
        out.push(run(&format!("{name}_broadcast"), &mut s, opts, |t, b| {
            weighted_sum(t, t.binary(op, b[a], b[c])?, 3)
        })?);
    }

    let mut s = ParamStore::new();
    let a = s.add("a", uniform(&mut rng, &[3, 5], -1.0, 1.0))?;
    let c = s.add("b", uniform(&mut rng, &[5, 2], -1.0, 1.0))?;
    out.push(run("matmul", &mut s, opts, |t, b| weighted_sum(t, b[a].matmul(b[c])?, 4))?);

    for (name, axes, keep) in [("sum", vec![1usize], false), ("mean", vec![0, 2], true)] {
        let mut s = ParamStore::new();
        let a = s.add("a", uniform(&mut rng, &[2, 3, 4], -1.0, 1.0))?;
        let mean = name == "mean";
        out.push(run(name, &mut s, opts, |t, b| {
            let r = if mean { b[a].mean(&axes, keep)? } else { b[a].sum(&axes, keep)? };
            weighted_sum(t, r, 5)
        })?);
    }
    // Distinct values keep the maximum away from ties.
    let mut s = ParamStore::new();
    let vals: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 * 0.3 + rng.uniform_range(0.0, 0.05)).collect();
    let a = s.add("a", Tensor::from_f64(&[3, 4], &vals)?)?;
    out.push(run("max", &mut s, opts, |t, b| weighted_sum(t, b[a].max(&[1], false)?, 6))?);

    let mut s = ParamStore::new();
    let a = s.add("a", uniform(&mut rng, &[2, 6], -1.0, 1.0))?;
    out.push(run("reshape_narrow", &mut s, opts, |t, b| {
        weighted_sum(t, b[a].reshape(&[3, 4])?.narrow(1, 1, 2)?, 7)
    })?);
    out.push(run("affine", &mut s, opts, |t, b| weighted_sum(t, t.affine(b[a], 1.5, -0.25)?, 8))?);
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(&mut rng, &[6], 0.2, 2.0))?;
    out.push(run("clamp_min", &mut s, opts, |t, b| weighted_sum(t, b[a].clamp_min(0.0)?, 9))?);

    out.extend(block_cases(&mut rng, opts)?);
    Ok(out)
}

fn block_cases(rng: &mut Rng, opts: GradCheckOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let (batch, h, w, d, n) = (2usize, 2usize, 3usize, 3usize, 2usize);
    let bp = batch * h * w;

    // Images are constants in the model, so only the weights are checked.
    let images = uniform(rng, &[2, 2, 4, 4], -1.0, 1.0);
    let mut s = ParamStore::new();
    let we = s.add("w", uniform(rng, &[8, 3], -0.5, 0.5))?;
    let be = s.add("b", uniform(rng, &[3], -0.5, 0.5))?;
    let cfg = BackboneConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 2,
        embed_dim: 3,
        num_blocks: 1,
        state_dim: 1,
    };
    out.push(run("patch_embed", &mut s, opts, |t, b| {
        weighted_sum(t, lift(patch_embed(t, &images, &cfg, b[we], b[be]))?, 10)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let sc = s.add("scale", uniform(rng, &[d], 0.5, 1.5))?;
    let off = s.add("offset", uniform(rng, &[d], -0.5, 0.5))?;
    out.push(run("pre_norm", &mut s, opts, |t, b| {
        weighted_sum(t, lift(pre_norm(b[x], b[sc], b[off]))?, 11)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let wd = s.add("w", uniform(rng, &[d, 4 * d], -0.5, 0.5))?;
    let bd = s.add("b", uniform(rng, &[4 * d], -0.5, 0.5))?;
    out.push(run("decay", &mut s, opts, |t, b| weighted_sum(t, lift(decay(b[x], b[wd], b[bd]))?, 12))?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let a = s.add("a", uniform(rng, &[bp, 4 * d], 0.1, 0.9))?;
    let bb = s.add("b", uniform(rng, &[4, n, d], -1.0, 1.0))?;
    let cc = s.add("c", uniform(rng, &[4, n, d], -1.0, 1.0))?;
    let dd = s.add("d", uniform(rng, &[4, d], -1.0, 1.0))?;
    let orders = raster_orders(h, w);
    out.push(run("selective_scan", &mut s, opts, |t, b| {
        weighted_sum(t, lift(selective_scan(b[x], b[a], b[bb], b[cc], b[dd], batch, &orders))?, 13)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let y = s.add("y", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let wx = s.add("wx", uniform(rng, &[d, d], -0.5, 0.5))?;
    let wy = s.add("wy", uniform(rng, &[d, d], -0.5, 0.5))?;
    let bg = s.add("b", uniform(rng, &[d], -0.5, 0.5))?;
    out.push(run("gated_fuse", &mut s, opts, |t, b| {
        weighted_sum(t, lift(gated_fuse(b[x], b[y], b[wx], b[wy], b[bg]))?, 14)
    })?);
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let y = s.add("y", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let g = s.add("g", uniform(rng, &[bp, d], 0.1, 0.9))?;
    out.push(run("fuse_with_gate", &mut s, opts, |t, b| {
        weighted_sum(t, lift(fuse_with_gate(b[x], b[y], b[g]))?, 15)
    })?);
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    out.push(run("global_pool", &mut s, opts, |t, b| weighted_sum(t, lift(global_pool(b[x], batch))?, 16))?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let gm = s.add("gamma", uniform(rng, &[batch, d], 0.5, 1.5))?;
    let bt = s.add("beta", uniform(rng, &[batch, d], -0.5, 0.5))?;
    out.push(run("film", &mut s, opts, |t, b| weighted_sum(t, lift(apply_film(b[x], b[gm], b[bt]))?, 17))?);

    let r = 2;
    let mut s = ParamStore::new();
    let hh = s.add("h", uniform(rng, &[batch, d], -1.0, 1.0))?;
    let dn = s.add("down", uniform(rng, &[batch, d, r], -0.5, 0.5))?;
    let bdn = s.add("b_down", uniform(rng, &[batch, r], -0.5, 0.5))?;
    let up = s.add("up", uniform(rng, &[batch, r, d], -0.5, 0.5))?;
    let bup = s.add("b_up", uniform(rng, &[batch, d], -0.5, 0.5))?;
    out.push(run("adapter", &mut s, opts, |t, b| {
        weighted_sum(t, lift(apply_adapter(b[hh], b[dn], b[bdn], b[up], b[bup]))?, 18)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let xt = s.add("x_tilde", uniform(rng, &[bp, d], -1.0, 1.0))?;
    let al = s.add("alpha", uniform(rng, &[batch, 1], 0.1, 0.9))?;
    out.push(run("conditioned_update", &mut s, opts, |t, b| {
        weighted_sum(t, lift(conditioned_update(b[x], b[xt], b[al]))?, 19)
    })?);

    let mut s = ParamStore::new();
    let al = s.add("alpha", uniform(rng, &[3, 4], 1.2, 5.0))?;
    out.push(run("kl_to_uniform", &mut s, opts, |t, b| weighted_sum(t, lift(kl_to_uniform(b[al]))?, 20))?);

    let labels = [0usize, 3, 1];
    let y = one_hot::<f64>(&labels, 4)?;
    for form in [NllForm::DigammaCe, NllForm::LogMarginal, NllForm::Brier] {
        let mut s = ParamStore::new();
        let al = s.add("alpha", uniform(rng, &[3, 4], 1.2, 5.0))?;
        out.push(run(&format!("nll_{form}"), &mut s, opts, |t, b| {
            weighted_sum(t, lift(edl_nll(b[al], &y, form))?, 21)
        })?);
    }
    Ok(out)
}

/// Small full model: backbone T on 8x8 RGB images with 4x4 patches, FiLM
/// conditioning and the digamma cross-entropy loss on 2 samples.
pub fn composed_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::preset(Scale::T, 8, 4, 3),
        hac: HacConfig {
            mode: HacMode::Film,
            ..HacConfig::default()
        },
        hac_enabled: true,
        num_classes: 3,
    }
}

/// The composed loss with every parameter moved off its initial value
/// (zero-initialized heads would otherwise hide whole branches).
///
/// The adaptive KL weight is computed once at the checked point and then held
/// fixed, matching how training treats it as a constant.
pub fn composed_case(opts: GradCheckOptions) -> Result<CaseResult> {
    let cfg = composed_config();
    let mut rng = Rng::new(11, 0xc0);
    let mut store = ParamStore::<f64>::new();
    let params = ModelParams::init(&cfg, &mut store, &mut rng)?;
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.uniform_range(-0.1, 0.1);
        }
    }
    let images = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let labels = [0usize, 2];
    let adaptive = EdlLossConfig {
        nll_form: NllForm::DigammaCe,
        ..EdlLossConfig::default()
    };
    let lambda = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = forward(&tape, &bound, &cfg, &params, &images)?;
        edl_loss(out.alpha, &labels, &adaptive, 0)?.1
    };
    let frozen = EdlLossConfig {
        kl_coef: lambda,
        schedule: Schedule::Fixed,
        ..adaptive
    };
    run("composed_clear_lite_loss", &mut store, opts, |t, b| {
        let out = lift(forward(t, b, &cfg, &params, &images))?;
        Ok(lift(edl_loss(out.alpha, &labels, &frozen, 0))?.0)
    })
}

/// Primitive cases followed by the composed case.
pub fn run_suite(opts: GradCheckOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = primitive_cases(opts)?;
    cases.push(composed_case(opts)?);
    Ok(SuiteReport {
        cases,
        tol: opts.tol,
        seconds: start.elapsed().as_secs_f64(),
    })
}
