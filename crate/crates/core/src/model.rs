//! Full classifier: backbone, optional conditioning and evidential head.

use clear_tensor::{Bound, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

use crate::backbone::{fan_in_uniform, features, global_pool, BackboneConfig, BackboneParams};
use crate::error::{CoreError, Result};
use crate::hac::{hac_forward, HacConfig, HacMode, HacParams};
use crate::rap::{evidence, DirichletOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hac: HacConfig,
    pub hac_enabled: bool,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.hac_enabled {
            self.hac.validate(self.backbone.embed_dim)?;
        }
        if self.num_classes < 2 {
            return Err(CoreError::input(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub hac: Option<HacParams>,
    pub w_head: ParamId,
    pub b_head: ParamId,
}

impl ModelParams {
    pub fn init<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.backbone.embed_dim;
        let backbone = BackboneParams::init(&cfg.backbone, store, rng)?;
        let hac = if cfg.hac_enabled {
            Some(HacParams::init(&cfg.hac, d, store, rng)?)
        } else {
            None
        };
        let w_head = store.add("head.w", fan_in_uniform(rng, &[d, cfg.num_classes], d))?;
        let b_head = store.add("head.b", Tensor::zeros(&[cfg.num_classes]))?;
        Ok(ModelParams {
            backbone,
            hac,
            w_head,
            b_head,
        })
    }

    pub fn lookup<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |n: &str| store.id(n).ok_or_else(|| CoreError::Key(n.to_string()));
        Ok(ModelParams {
            backbone: BackboneParams::lookup(&cfg.backbone, store)?,
            hac: if cfg.hac_enabled {
                Some(HacParams::lookup(&cfg.hac, store)?)
            } else {
                None
            },
            w_head: id("head.w")?,
            b_head: id("head.b")?,
        })
    }
}

pub struct Forward<'t, T: Real> {
    /// `[B, D]` input to the evidential head.
    pub features: Var<'t, T>,
    /// `[B, K]`
    pub evidence: Var<'t, T>,
    /// `[B, K]`, `evidence + 1`.
    pub alpha: Var<'t, T>,
}

/// Forward pass for `images: [B, C, H, W]` (already normalized).
pub fn forward<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    cfg: &ModelConfig,
    params: &ModelParams,
    images: &Tensor<T>,
) -> Result<Forward<'t, T>> {
    if images.rank() != 4 {
        return Err(CoreError::input(format!("images must be [B,C,H,W], got {:?}", images.dims())));
    }
    let batch = images.dims()[0];
    let x = features(tape, images, &cfg.backbone, &params.backbone, bound)?;
    let z = global_pool(x, batch)?;
    let feats = match (&params.hac, cfg.hac_enabled) {
        (Some(hp), true) => {
            let out = hac_forward(z, x, &cfg.hac, hp, bound)?;
            match cfg.hac.mode {
                HacMode::Film => global_pool(out, batch)?,
                HacMode::Adapter => out,
            }
        }
        _ => z,
    };
    let e = evidence(feats, bound[params.w_head], bound[params.b_head])?;
    Ok(Forward {
        features: feats,
        evidence: e,
        alpha: e.add_scalar(1.0)?,
    })
}

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::init(&cfg, &mut store, rng)?;
        Ok(Model { cfg, store, params })
    }

    pub fn from_store(cfg: ModelConfig, store: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::lookup(&cfg, &store)?;
        Ok(Model { cfg, store, params })
    }

    /// Dirichlet outputs for a batch of normalized images `[B, C, H, W]`.
    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Vec<DirichletOutput>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let out = forward(&tape, &bound, &self.cfg, &self.params, images)?;
        let e = out.evidence.to_tensor();
        let k = self.cfg.num_classes;
        e.data()
            .chunks(k)
            .map(|row| DirichletOutput::from_evidence(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }
}
