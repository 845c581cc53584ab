//! Shared model plumbing: parameter initialization and the full-pipeline
//! assembly used by training, prediction and the gradient-check harness.

use crate::config::Config;
use crate::error::{CdsError, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::Rng;

/// Which component, if any, is replaced by its neutral stub for an
/// ablation run. At most one component is disabled at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Latent neighbor-future features forced to zero; no diffusion loss.
    Diffusion,
    /// Recurrent temporal encoder replaced by a mean-pooled embedding.
    TemporalEncoder,
    /// Attention output Υ forced to zero.
    SpatialEncoder,
    /// Gate chain replaced by an identity passthrough of Υ.
    Fusion,
    /// Recurrent decoder replaced by a single linear head over all steps.
    Decoder,
}

impl Ablation {
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Diffusion => "diffusion",
            Ablation::TemporalEncoder => "temporal",
            Ablation::SpatialEncoder => "spatial",
            Ablation::Fusion => "fusion",
            Ablation::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CdsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "diffusion" => Ok(Ablation::Diffusion),
            "temporal" => Ok(Ablation::TemporalEncoder),
            "spatial" => Ok(Ablation::SpatialEncoder),
            "fusion" => Ok(Ablation::Fusion),
            "decoder" => Ok(Ablation::Decoder),
            other => Err(CdsError::Config(format!(
                "unknown ablation '{other}', expected none|diffusion|temporal|spatial|fusion|decoder"
            ))),
        }
    }
}

/// Fixed scale applied to raw coordinates (meters) before they enter any
/// learned map. Highway windows span around a hundred meters; this keeps
/// the recurrent gates out of their saturated tails across that range.
pub const COORD_SCALE: f64 = 0.02;

/// Sampling seed for one scene's prediction, derived statelessly so that
/// evaluation never consumes the training RNG stream.
pub fn scene_seed(base: u64, scene_id: &str) -> u64 {
    crate::rng::fnv1a(scene_id.as_bytes()) ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Weight init: N(0, 1/fan_in) for an [fan_in × fan_out] right-multiplied
/// matrix.
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn init_bias(dim: usize) -> Tensor {
    Tensor::zeros(&[1, dim])
}

/// All learnable weights for the configured model, deterministically seeded.
pub fn init_params(cfg: &Config, seed: u64) -> Result<ParamStore> {
    init_params_for(cfg, seed, Ablation::None)
}

/// Parameter set for an ablated variant; the decoder stub needs its own
/// head, everything else reuses the standard set.
pub fn init_params_for(cfg: &Config, seed: u64, ablation: Ablation) -> Result<ParamStore> {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    crate::stencoder::init_params(&mut store, cfg, &mut rng)?;
    crate::diffusion::init_params(&mut store, cfg, &mut rng)?;
    crate::decoder::init_params(&mut store, cfg, &mut rng)?;
    if ablation == Ablation::Decoder {
        crate::decoder::init_flat_head_params(&mut store, cfg, &mut rng)?;
    }
    Ok(store)
}

/// Gradient oracle over the whole pipeline: encoder, rollout, both
/// trajectory losses and the diffusion ε-loss on one interacting scene.
/// Returns the worst relative error against central finite differences.
pub fn full_pipeline_gradcheck(cfg: &Config) -> Result<f64> {
    use crate::data::{gen_synthetic_with, SynthKind, SynthParams};
    use crate::training::{scene_loss, Stage};

    cfg.validate()?;
    let scene = gen_synthetic_with(
        SynthKind::BrakingInteraction,
        1,
        cfg.seed,
        SynthParams {
            n_max: cfg.n_max,
            ..Default::default()
        },
    )?
    .remove(0);
    // A small-coordinate copy keeps the loss magnitude moderate, which in
    // turn keeps finite-difference rounding noise under the checker's
    // denominator floor.
    let mut scene = scene;
    for t in [&mut scene.target_history, &mut scene.neighbor_histories, &mut scene.target_future, &mut scene.neighbor_futures] {
        for v in t.data_mut() {
            *v *= 0.02;
        }
    }
    let mut params = init_params(cfg, cfg.seed)?;

    let raw_loss = |params: &ParamStore, tape: &mut crate::numerics::Tape| -> Result<crate::numerics::Val> {
        let mut rng = Rng::seed_from(cfg.seed ^ 0x5eed);
        let mse = scene_loss(tape, &scene, params, cfg, Ablation::None, Stage::Mse, &mut rng)?;
        let mut rng = Rng::seed_from(cfg.seed ^ 0x5eed);
        let nll = scene_loss(tape, &scene, params, cfg, Ablation::None, Stage::Nll, &mut rng)?;
        tape.add(mse, nll)
    };

    // Freeze the normalization from one probe evaluation.
    let probe = {
        let mut tape = crate::numerics::Tape::new();
        let v = raw_loss(&params, &mut tape)?;
        tape.value(v).scalar_value()
    };
    let scale = 3e-3 / probe.abs().max(1.0);

    crate::numerics::finite_diff_gradcheck(
        &move |p, tape| {
            let v = raw_loss(p, tape)?;
            Ok(tape.scale(v, scale))
        },
        &mut params,
        1e-5,
    )
}
