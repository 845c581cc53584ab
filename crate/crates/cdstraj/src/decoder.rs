//! Recurrent rollout head: 25 chained cell steps turn the fused context
//! into per-step bivariate Gaussians over position displacements, which
//! accumulate into absolute scene coordinates.

use crate::config::Config;
use crate::data::{Scene, FUTURE_STEPS};
use crate::diffusion::{make_schedule, reverse_sample, LatentFeature};
use crate::error::{CdsError, Result};
use crate::model::Ablation;
use crate::numerics::{ParamStore, Tape, Tensor, Val};

/// Scale on the fed-back displacement (meters per step, up to ~6) so the
/// cell senses its own output without saturating.
const PREV_OUT_SCALE: f64 = 0.02;

/// Output gain folded into the affine head for the mean-displacement
/// channels; raw head values stay O(1)-conditioned for the optimizer.
const MU_OUT_SCALE: f64 = 1.0;
use crate::rng::Rng;
use crate::stencoder::{encode_scene_from, neighbor_temporal_encodings, temporal_encode_mode};

/// One predicted step: mean position (absolute scene meters), standard
/// deviations and correlation. σ is kept positive by an exponential link
/// and ρ inside (−1, 1) by a scaled tanh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams2D {
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectory {
    pub steps: Vec<GaussianParams2D>,
    pub sample_index: usize,
}

impl PredictedTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.len() != FUTURE_STEPS {
            return Err(CdsError::Contract(format!(
                "prediction has {} steps, wanted {FUTURE_STEPS}",
                self.steps.len()
            )));
        }
        for (t, s) in self.steps.iter().enumerate() {
            let finite = s.mu.0.is_finite()
                && s.mu.1.is_finite()
                && s.sigma.0.is_finite()
                && s.sigma.1.is_finite()
                && s.rho.is_finite();
            if !finite || s.sigma.0 <= 0.0 || s.sigma.1 <= 0.0 || s.rho.abs() >= 1.0 {
                return Err(CdsError::Numeric(format!(
                    "invalid Gaussian at step {t}: {s:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for one decoded step; `mu` is the absolute position after
/// accumulation, so losses read it directly.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub mu: Val,
    pub sigma: Val,
    pub rho: Val,
}

#[derive(Debug, Clone)]
pub struct RolloutVars {
    pub steps: Vec<StepVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    h: Val,
    c: Val,
}

impl LstmState {
    pub fn initial(tape: &mut Tape, cfg: &Config) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[1, cfg.hidden_dim])),
            c: tape.constant(Tensor::zeros(&[1, cfg.hidden_dim])),
        }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Result<()> {
    let d = cfg.hidden_dim;
    let in_dim = d + 2;
    for gate in ["i", "f", "g", "o"] {
        store.insert(&format!("decoder.lstm.w{gate}"), crate::model::init_weight(in_dim, d, rng))?;
        store.insert(&format!("decoder.lstm.u{gate}"), crate::model::init_weight(d, d, rng))?;
        // Forget gates start low so the cell settles near its fixed point
        // within the first steps of the rollout.
        let bias = if gate == "f" {
            Tensor::filled(&[1, d], -1.0)
        } else {
            crate::model::init_bias(d)
        };
        store.insert(&format!("decoder.lstm.b{gate}"), bias)?;
    }
    store.insert("decoder.head.w", Tensor::randn(&[d, 5], 0.01, rng))?;
    store.insert("decoder.head.b", crate::model::init_bias(5))?;
    Ok(())
}

/// Extra head for the decoder-ablated variant: one linear map emitting all
/// 25 steps at once.
pub fn init_flat_head_params(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Result<()> {
    store.insert(
        "decoder.flat.w",
        Tensor::randn(&[cfg.hidden_dim, 5 * FUTURE_STEPS], 0.01, rng),
    )?;
    store.insert("decoder.flat.b", crate::model::init_bias(5 * FUTURE_STEPS))?;
    Ok(())
}

/// Split a 1×5 raw head output into linked Gaussian parameters. The mean
/// is still a displacement here.
fn link_raw(tape: &mut Tape, raw: Val) -> Result<(Val, Val, Val)> {
    let mu_raw = tape.slice_cols(raw, 0, 2)?;
    let mu = tape.scale(mu_raw, MU_OUT_SCALE);
    let s_raw = tape.slice_cols(raw, 2, 2)?;
    let sigma = tape.exp(s_raw);
    let r_raw = tape.slice_cols(raw, 4, 1)?;
    let rho_t = tape.tanh(r_raw);
    let rho = tape.scale(rho_t, 0.999);
    Ok((mu, sigma, rho))
}

/// One cell step: input [context ; previous displacement], hidden state to
/// a 5-value head. Returns (displacement, σ, ρ) and the next state.
pub fn decode_step(
    tape: &mut Tape,
    context: Val,
    prev_out: Val,
    state: LstmState,
    params: &ParamStore,
    cfg: &Config,
) -> Result<((Val, Val, Val), LstmState)> {
    let _ = cfg;
    let scaled_prev = tape.scale(prev_out, PREV_OUT_SCALE);
    let x = tape.concat_cols(context, scaled_prev)?;

    let gate = |tape: &mut Tape, name: &str, x: Val, h: Val| -> Result<Val> {
        let w = tape.param(params, &format!("decoder.lstm.w{name}"))?;
        let u = tape.param(params, &format!("decoder.lstm.u{name}"))?;
        let b = tape.param(params, &format!("decoder.lstm.b{name}"))?;
        let wx = tape.linear(x, w, Some(b))?;
        let uh = tape.matmul(h, u)?;
        tape.add(wx, uh)
    };
    let i = gate(tape, "i", x, state.h)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, "f", x, state.h)?;
    let f = tape.sigmoid(f);
    let g = gate(tape, "g", x, state.h)?;
    let g = tape.tanh(g);
    let o = gate(tape, "o", x, state.h)?;
    let o = tape.sigmoid(o);

    let kept = tape.mul(f, state.c)?;
    let new = tape.mul(i, g)?;
    let c = tape.add(kept, new)?;
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct)?;

    let w_head = tape.param(params, "decoder.head.w")?;
    let b_head = tape.param(params, "decoder.head.b")?;
    let raw = tape.linear(h, w_head, Some(b_head))?;
    let linked = link_raw(tape, raw)?;
    Ok((linked, LstmState { h, c }))
}

/// 25 chained steps; the running sum of mean displacements gives absolute
/// positions (the target sits at the origin after normalization).
pub fn decode_rollout(
    tape: &mut Tape,
    context: Val,
    params: &ParamStore,
    cfg: &Config,
) -> Result<RolloutVars> {
    decode_rollout_mode(tape, context, params, cfg, Ablation::None)
}

pub(crate) fn decode_rollout_mode(
    tape: &mut Tape,
    context: Val,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<RolloutVars> {
    if ablation == Ablation::Decoder {
        return flat_rollout(tape, context, params);
    }
    let mut state = LstmState::initial(tape, cfg);
    let mut prev_out = tape.constant(Tensor::zeros(&[1, 2]));
    let mut position = tape.constant(Tensor::zeros(&[1, 2]));
    let mut steps = Vec::with_capacity(FUTURE_STEPS);
    for _ in 0..FUTURE_STEPS {
        let ((disp, sigma, rho), next) = decode_step(tape, context, prev_out, state, params, cfg)?;
        position = tape.add(position, disp)?;
        steps.push(StepVars {
            mu: position,
            sigma,
            rho,
        });
        prev_out = disp;
        state = next;
    }
    Ok(RolloutVars { steps })
}

/// Decoder ablation stub: a single linear head emits all steps at once.
fn flat_rollout(tape: &mut Tape, context: Val, params: &ParamStore) -> Result<RolloutVars> {
    let w = tape.param(params, "decoder.flat.w")?;
    let b = tape.param(params, "decoder.flat.b")?;
    let raw_all = tape.linear(context, w, Some(b))?;
    let mut position = tape.constant(Tensor::zeros(&[1, 2]));
    let mut steps = Vec::with_capacity(FUTURE_STEPS);
    for t in 0..FUTURE_STEPS {
        let raw = tape.slice_cols(raw_all, 5 * t, 5)?;
        let (disp, sigma, rho) = link_raw(tape, raw)?;
        position = tape.add(position, disp)?;
        steps.push(StepVars {
            mu: position,
            sigma,
            rho,
        });
    }
    Ok(RolloutVars { steps })
}

/// Pull concrete Gaussian parameters out of the tape.
pub fn rollout_values(tape: &Tape, rollout: &RolloutVars, sample_index: usize) -> PredictedTrajectory {
    let steps = rollout
        .steps
        .iter()
        .map(|s| {
            let mu = tape.value(s.mu);
            let sigma = tape.value(s.sigma);
            let rho = tape.value(s.rho);
            GaussianParams2D {
                mu: (mu.data()[0], mu.data()[1]),
                sigma: (sigma.data()[0], sigma.data()[1]),
                rho: rho.data()[0],
            }
        })
        .collect();
    PredictedTrajectory {
        steps,
        sample_index,
    }
}

/// End-to-end inference: temporal encodings once, K reverse-diffusion
/// latents, then interaction encoding and rollout per latent.
pub fn predict(
    scene: &Scene,
    params: &ParamStore,
    cfg: &Config,
    k: usize,
    seed: u64,
) -> Result<Vec<PredictedTrajectory>> {
    predict_with(scene, params, cfg, Ablation::None, k, seed)
}

pub fn predict_with(
    scene: &Scene,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
    k: usize,
    seed: u64,
) -> Result<Vec<PredictedTrajectory>> {
    if k == 0 {
        return Err(CdsError::Contract("predict needs K >= 1".into()));
    }
    scene.validate()?;
    let mut tape = Tape::new();
    let target_enc = temporal_encode_mode(&mut tape, &scene.target_history, params, cfg, ablation)?;
    let nb_temporal = neighbor_temporal_encodings(&mut tape, scene, params, cfg, ablation)?;

    let latents: Vec<LatentFeature> = if ablation == Ablation::Diffusion {
        vec![LatentFeature::zeros(scene.n_max(), cfg.latent_dim); k]
    } else {
        let sched = make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max)?;
        reverse_sample(
            tape.value(target_enc),
            tape.value(nb_temporal),
            &scene.neighbor_mask,
            k,
            &sched,
            params,
            cfg,
            seed,
        )?
    };

    let mut out = Vec::with_capacity(k);
    for (ki, latent) in latents.into_iter().enumerate() {
        let latent_val = tape.constant(latent.value);
        let encoded = encode_scene_from(
            &mut tape,
            scene,
            target_enc,
            nb_temporal,
            latent_val,
            params,
            cfg,
            ablation,
        )?;
        let rollout = decode_rollout_mode(&mut tape, encoded.context, params, cfg, ablation)?;
        let trajectory = rollout_values(&tape, &rollout, ki);
        trajectory.validate()?;
        out.push(trajectory);
    }
    Ok(out)
}
