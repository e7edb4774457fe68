//! Patch embedding, stacked four-direction selective-scan blocks with gated
//! residual fusion, and global average pooling.
//!
//! Feature maps are carried as rank-2 tensors `[batch * H' * W', D]`: rows
//! grouped by sample, positions in row-major grid order within a sample,
//! channels last.

use std::fmt;
use std::str::FromStr;

use clear_tensor::{Bound, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::scan::{raster_orders, selective_scan};

pub const NORM_EPS: f64 = 1e-5;
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    T,
    S,
    B,
}

impl Scale {
    /// `(embed_dim, num_blocks)`.
    pub fn preset(self) -> (usize, usize) {
        match self {
            Scale::T => (64, 2),
            Scale::S => (96, 3),
            Scale::B => (128, 4),
        }
    }
}

impl FromStr for Scale {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" => Ok(Scale::T),
            "S" | "s" => Ok(Scale::S),
            "B" | "b" => Ok(Scale::B),
            _ => Err(CoreError::input(format!("unknown scale `{s}` (expected T, S or B)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::T => "T",
            Scale::S => "S",
            Scale::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub state_dim: usize,
}

impl BackboneConfig {
    pub fn preset(scale: Scale, image_size: usize, patch_size: usize, in_channels: usize) -> Self {
        let (embed_dim, num_blocks) = scale.preset();
        BackboneConfig {
            image_size,
            patch_size,
            in_channels,
            embed_dim,
            num_blocks,
            state_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CoreError::input(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(CoreError::input(format!("channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.embed_dim == 0 || self.state_dim == 0 {
            return Err(CoreError::input("embed_dim and state_dim must be positive"));
        }
        Ok(())
    }

    /// Grid side `H' = W'`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn positions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Handles of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
    /// `[D, 4D]` decay projection, one `D x D` slab per direction.
    pub w_decay: ParamId,
    pub b_decay: ParamId,
    /// `[4, N, D]`
    pub scan_b: ParamId,
    /// `[4, N, D]`
    pub scan_c: ParamId,
    /// `[4, D]`
    pub scan_d: ParamId,
    pub w_gate_x: ParamId,
    pub w_gate_y: ParamId,
    pub b_gate: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub w_embed: ParamId,
    pub b_embed: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real>(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(dims, data).expect("dims match data")
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| CoreError::Key(name.to_string()))
}

impl BackboneParams {
    pub fn init<T: Real>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, n, k) = (cfg.embed_dim, cfg.state_dim, cfg.patch_len());
        store.add("backbone.embed.w", fan_in_uniform(rng, &[k, d], k))?;
        store.add("backbone.embed.b", Tensor::zeros(&[d]))?;
        for l in 0..cfg.num_blocks {
            let p = |s: &str| format!("backbone.block{l}.{s}");
            store.add(p("norm.scale"), Tensor::full(&[d], T::one()))?;
            store.add(p("norm.offset"), Tensor::zeros(&[d]))?;
            store.add(p("decay.w"), fan_in_uniform(rng, &[d, 4 * d], d))?;
            store.add(p("decay.b"), Tensor::zeros(&[4 * d]))?;
            store.add(p("scan.b"), Tensor::full(&[4, n, d], T::one()))?;
            store.add(p("scan.c"), Tensor::full(&[4, n, d], T::lit(1.0 / n as f64)))?;
            store.add(p("scan.d"), Tensor::full(&[4, d], T::one()))?;
            store.add(p("gate.wx"), fan_in_uniform(rng, &[d, d], 2 * d))?;
            store.add(p("gate.wy"), fan_in_uniform(rng, &[d, d], 2 * d))?;
            store.add(p("gate.b"), Tensor::full(&[d], T::lit(GATE_BIAS_INIT)))?;
        }
        Self::lookup(cfg, store)
    }

    /// Resolves the handles of an already-populated store by name.
    pub fn lookup<T: Real>(cfg: &BackboneConfig, store: &ParamStore<T>) -> Result<Self> {
        let blocks = (0..cfg.num_blocks)
            .map(|l| {
                let p = |s: &str| lookup(store, &format!("backbone.block{l}.{s}"));
                Ok(BlockParams {
                    norm_scale: p("norm.scale")?,
                    norm_offset: p("norm.offset")?,
                    w_decay: p("decay.w")?,
                    b_decay: p("decay.b")?,
                    scan_b: p("scan.b")?,
                    scan_c: p("scan.c")?,
                    scan_d: p("scan.d")?,
                    w_gate_x: p("gate.wx")?,
                    w_gate_y: p("gate.wy")?,
                    b_gate: p("gate.b")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BackboneParams {
            w_embed: lookup(store, "backbone.embed.w")?,
            b_embed: lookup(store, "backbone.embed.b")?,
            blocks,
        })
    }
}

/// Rearranges `[B, C, H, W]` images into one row per patch, `[B*H'*W', C*p*p]`,
/// with patch values ordered channel, then row, then column.
pub fn im2col<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let dims = images.dims();
    let (b, c, h, w) = match *dims {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(CoreError::input(format!("images must be [C,H,W] or [B,C,H,W], got {dims:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CoreError::input(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let k = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * k);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..patch {
                        let base = ((bi * c + ch) * h + gy * patch + dy) * w + gx * patch;
                        out.extend_from_slice(&src[base..base + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b * gh * gw, k], out)?)
}

/// Linear projection of non-overlapping patches to `D` channels.
pub fn patch_embed<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    cfg: &BackboneConfig,
    w: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let dims = images.dims();
    let (c, h, wd) = match *dims {
        [c, h, w] | [_, c, h, w] => (c, h, w),
        _ => return Err(CoreError::input(format!("images must be [C,H,W] or [B,C,H,W], got {dims:?}"))),
    };
    if c != cfg.in_channels || h != cfg.image_size || wd != cfg.image_size {
        return Err(CoreError::input(format!(
            "image {c}x{h}x{wd} does not match configured {}x{}x{}",
            cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    let cols = tape.constant(im2col(images, cfg.patch_size)?);
    Ok(cols.matmul(w)?.add(b)?)
}

/// Normalizes each position over its channels, then applies a learned
/// per-channel scale and offset.
pub fn pre_norm<'t, T: Real>(x: Var<'t, T>, scale: Var<'t, T>, offset: Var<'t, T>) -> Result<Var<'t, T>> {
    let centered = x.sub(x.mean(&[1], true)?)?;
    let std = centered.square()?.mean(&[1], true)?.add_scalar(NORM_EPS)?.sqrt()?;
    Ok(centered.div(std)?.mul(scale)?.add(offset)?)
}

/// `sigmoid(x W + b)`.
pub fn decay<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.matmul(w)?.add(b)?.sigmoid()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One selective scan over a `[T, D]` sequence with decay `a: [T, D]`,
/// `b, c: [N, D]` and skip `d: [D]`. The backward direction visits the
/// sequence in reverse, which equals reversing input and output around a
/// forward scan.
pub fn directional_scan<'t, T: Real>(
    seq: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    d: Var<'t, T>,
    direction: Direction,
) -> Result<Var<'t, T>> {
    let sd = seq.dims();
    if sd.len() != 2 || sd[0] == 0 {
        return Err(CoreError::input(format!("sequence must be [T, D] with T >= 1, got {sd:?}")));
    }
    let bd = b.dims();
    if bd.len() != 2 {
        return Err(CoreError::input(format!("b must be [N, D], got {bd:?}")));
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..sd[0]).collect(),
        Direction::Backward => (0..sd[0]).rev().collect(),
    };
    let b3 = b.reshape(&[1, bd[0], bd[1]])?;
    let c3 = c.reshape(&[1, bd[0], bd[1]])?;
    let d2 = d.reshape(&[1, sd[1]])?;
    selective_scan(seq, a, b3, c3, d2, 1, &[order])
}

/// Four raster-direction scans of the normalized map `x` over an
/// `grid x grid` layout, averaged.
pub fn ss2d_lite<'t, T: Real>(
    x: Var<'t, T>,
    batch: usize,
    grid: usize,
    p: &BlockParams,
    bound: &Bound<'t, T>,
) -> Result<Var<'t, T>> {
    let a = decay(x, bound[p.w_decay], bound[p.b_decay])?;
    selective_scan(
        x,
        a,
        bound[p.scan_b],
        bound[p.scan_c],
        bound[p.scan_d],
        batch,
        &raster_orders(grid, grid),
    )
}

/// `X + g ⊙ (Y − X)` with `g = sigmoid(X W_x + Y W_y + b)`, i.e. a 1x1
/// projection of the channel concatenation `[X; Y]`.
pub fn gated_fuse<'t, T: Real>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    w_x: Var<'t, T>,
    w_y: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if x.dims() != y.dims() {
        return Err(CoreError::input(format!("gate inputs differ: {:?} vs {:?}", x.dims(), y.dims())));
    }
    let g = x.matmul(w_x)?.add(y.matmul(w_y)?)?.add(b)?.sigmoid()?;
    fuse_with_gate(x, y, g)
}

/// The fusion rule for a given gate value.
pub fn fuse_with_gate<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>, g: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.add(g.mul(y.sub(x)?)?)?)
}

/// Mean over positions: `[batch * P, D] -> [batch, D]`.
pub fn global_pool<'t, T: Real>(x: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let dims = x.dims();
    if dims.len() != 2 || batch == 0 || dims[0] % batch != 0 {
        return Err(CoreError::input(format!("cannot pool {dims:?} over batch {batch}")));
    }
    Ok(x.reshape(&[batch, dims[0] / batch, dims[1]])?.mean(&[1], false)?)
}

/// `X^(L)`: patch embedding followed by all blocks.
pub fn features<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    bound: &Bound<'t, T>,
) -> Result<Var<'t, T>> {
    let batch = if images.rank() == 4 { images.dims()[0] } else { 1 };
    let mut x = patch_embed(tape, images, cfg, bound[params.w_embed], bound[params.b_embed])?;
    for p in &params.blocks {
        let normed = pre_norm(x, bound[p.norm_scale], bound[p.norm_offset])?;
        let y = ss2d_lite(normed, batch, cfg.grid(), p, bound)?;
        x = gated_fuse(x, y, bound[p.w_gate_x], bound[p.w_gate_y], bound[p.b_gate])?;
    }
    Ok(x)
}

/// Pooled representation `z: [batch, D]`.
pub fn encode<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    bound: &Bound<'t, T>,
) -> Result<Var<'t, T>> {
    let batch = if images.rank() == 4 { images.dims()[0] } else { 1 };
    global_pool(features(tape, images, cfg, params, bound)?, batch)
}
