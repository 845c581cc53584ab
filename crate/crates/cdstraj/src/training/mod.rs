//! Two-stage optimization: an MSE stage, then an NLL stage, jointly with
//! the diffusion ε-loss. Checkpoints every epoch; a (dataset, config, seed)
//! triple fully determines the metrics log and the final weights.

mod adam;
mod checkpoint;
mod loss;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use loss::{mse_loss, mse_of_prediction, nll_loss, nll_of_prediction};

use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::data::{DatasetSplit, Scene};
use crate::decoder::{decode_rollout_mode, predict_with};
use crate::diffusion::{diffusion_loss, future_feature_encode, make_schedule, reverse_sample, LatentFeature};
use crate::error::{CdsError, Result};
use crate::eval::squared_horizon_errors;
use crate::model::{scene_seed, Ablation};
use crate::numerics::{ParamStore, Tape, Val};
use crate::rng::Rng;
use crate::stencoder::{encode_scene_from, neighbor_temporal_encodings, temporal_encode_mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mse,
    Nll,
}

impl Stage {
    fn index(self) -> u8 {
        match self {
            Stage::Mse => 1,
            Stage::Nll => 2,
        }
    }
}

/// One metrics-log row, plus the validation NLL which the CSV schema does
/// not carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_rmse: [f64; 5],
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Rows produced by this call (a resumed run reports only its own).
    pub stats: Vec<EpochStats>,
    pub best_val_rmse5: f64,
    pub best_epoch: usize,
    pub final_params: ParamStore,
}

pub const METRICS_HEADER: &str =
    "epoch,stage,train_loss,val_rmse_1s,val_rmse_2s,val_rmse_3s,val_rmse_4s,val_rmse_5s";

/// Per-scene training loss on one tape: the stage's trajectory term plus
/// the weighted diffusion ε-term. In teacher mode the encoder sees the
/// ground-truth future features; otherwise it sees a sampled latent,
/// treated as a constant.
pub fn scene_loss(
    tape: &mut Tape,
    scene: &Scene,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
    stage: Stage,
    rng: &mut Rng,
) -> Result<Val> {
    let target_enc = temporal_encode_mode(tape, &scene.target_history, params, cfg, ablation)?;
    let nb_temporal = neighbor_temporal_encodings(tape, scene, params, cfg, ablation)?;

    let latent = if ablation == Ablation::Diffusion {
        tape.constant(LatentFeature::zeros(scene.n_max(), cfg.latent_dim).value)
    } else if cfg.teacher_mode {
        future_feature_encode(tape, scene, params, cfg)?
    } else {
        let sched = make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max)?;
        let sample_seed = rng.next_u64();
        let sample = reverse_sample(
            tape.value(target_enc),
            tape.value(nb_temporal),
            &scene.neighbor_mask,
            1,
            &sched,
            params,
            cfg,
            sample_seed,
        )?
        .remove(0);
        tape.constant(sample.value)
    };

    let encoded = encode_scene_from(tape, scene, target_enc, nb_temporal, latent, params, cfg, ablation)?;
    let rollout = decode_rollout_mode(tape, encoded.context, params, cfg, ablation)?;
    let traj_loss = match stage {
        Stage::Mse => mse_loss(tape, &rollout, &scene.target_future)?,
        Stage::Nll => nll_loss(tape, &rollout, &scene.target_future, cfg.nll_weight_alpha)?,
    };

    if ablation == Ablation::Diffusion {
        return Ok(traj_loss);
    }
    let sched = make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max)?;
    let diff = diffusion_loss(tape, scene, target_enc, nb_temporal, &sched, params, cfg, rng)?;
    let weighted = tape.scale(diff, cfg.diffusion_loss_weight);
    tape.add(traj_loss, weighted)
}

/// Validation pass: K=1 prediction per scene with a seed derived from the
/// scene id, per-horizon RMSE plus mean NLL.
fn validation_metrics(
    scenes: &[Scene],
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<([f64; 5], f64)> {
    let mut sq_sums = [0.0; 5];
    let mut nll_sum = 0.0;
    for scene in scenes {
        let pred = predict_with(scene, params, cfg, ablation, 1, scene_seed(cfg.seed, &scene.scene_id))?
            .remove(0);
        let sq = squared_horizon_errors(&pred, &scene.target_future);
        for (acc, v) in sq_sums.iter_mut().zip(sq) {
            *acc += v;
        }
        nll_sum += nll_of_prediction(&pred, &scene.target_future, 1.0)?;
    }
    let n = scenes.len() as f64;
    let rmse = sq_sums.map(|s| (s / n).sqrt());
    Ok((rmse, nll_sum / n))
}

fn format_row(stats: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        stats.epoch,
        stats.stage,
        stats.train_loss,
        stats.val_rmse[0],
        stats.val_rmse[1],
        stats.val_rmse[2],
        stats.val_rmse[3],
        stats.val_rmse[4],
    )
}

/// Train per the config's two-stage schedule, writing `metrics.csv`,
/// `checkpoint_latest.json` and `checkpoint_best.json` under `out_dir`.
pub fn train(split: &DatasetSplit, cfg: &Config, out_dir: &Path) -> Result<TrainOutcome> {
    train_with(split, cfg, Ablation::None, out_dir, false, None)
}

/// Full-control variant: `resume` continues from `checkpoint_latest.json`,
/// `stop_after` ends the run early after that many total epochs (an
/// interrupted run that a later resume completes).
pub fn train_with(
    split: &DatasetSplit,
    cfg: &Config,
    ablation: Ablation,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(CdsError::Config("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let latest_path = out_dir.join("checkpoint_latest.json");
    let best_path = out_dir.join("checkpoint_best.json");

    let total_epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    let last_epoch = stop_after.unwrap_or(total_epochs).min(total_epochs);

    let (mut params, mut adam, mut rng, start_epoch, mut best_val, mut best_epoch);
    if resume {
        let ck = Checkpoint::load(&latest_path)?;
        if ck.config_hash != cfg.hash() {
            return Err(CdsError::Config(format!(
                "checkpoint config hash {} does not match the provided config {}",
                ck.config_hash,
                cfg.hash()
            )));
        }
        if ck.ablation != ablation.tag() {
            return Err(CdsError::Config(format!(
                "checkpoint was trained with ablation '{}', requested '{}'",
                ck.ablation,
                ablation.tag()
            )));
        }
        params = ck.params;
        adam = ck.adam;
        rng = Rng::restore(ck.rng_state);
        start_epoch = ck.epoch;
        best_val = ck.best_val_rmse5;
        best_epoch = ck.best_epoch;
    } else {
        params = crate::model::init_params_for(cfg, cfg.seed, ablation)?;
        adam = AdamState::new(&params);
        rng = Rng::seed_from(cfg.seed);
        start_epoch = 0;
        best_val = f64::INFINITY;
        best_epoch = 0;
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
    }

    let mut metrics = std::fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let val_scenes: &[Scene] = if split.val.is_empty() { &split.train } else { &split.val };

    let mut stats_out = Vec::new();
    for epoch in (start_epoch + 1)..=last_epoch {
        let stage = if epoch <= cfg.stage1_epochs { Stage::Mse } else { Stage::Nll };
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            params.zero_grads();
            for &idx in batch {
                let scene = &split.train[idx];
                let mut tape = Tape::new();
                let loss = scene_loss(&mut tape, scene, &params, cfg, ablation, stage, &mut rng)?;
                let value = tape.value(loss).scalar_value();
                if !value.is_finite() {
                    return Err(CdsError::Numeric(format!(
                        "non-finite loss at epoch {epoch} batch {batch_no} (scene {})",
                        scene.scene_id
                    )));
                }
                loss_sum += value;
                tape.backward(loss, &mut params)?;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            clip_grad_norm(&mut params, cfg.grad_clip_norm);
            adam_step(&mut params, &mut adam, cfg.learning_rate, cfg.adam_betas, 1e-8)?;
        }
        let train_loss = loss_sum / split.train.len() as f64;

        let (val_rmse, val_nll) = validation_metrics(val_scenes, &params, cfg, ablation)?;
        let stats = EpochStats {
            epoch,
            stage: stage.index(),
            train_loss,
            val_rmse,
            val_nll,
        };
        writeln!(metrics, "{}", format_row(&stats))?;
        metrics.flush()?;
        stats_out.push(stats);

        params.zero_grads();
        if val_rmse[4] < best_val {
            best_val = val_rmse[4];
            best_epoch = epoch;
            let ck = Checkpoint {
                version: CHECKPOINT_VERSION,
                config_hash: cfg.hash(),
                config: cfg.clone(),
                ablation: ablation.tag().into(),
                epoch,
                params: params.clone(),
                adam: adam.clone(),
                rng_state: rng.state(),
                best_val_rmse5: best_val,
                best_epoch,
            };
            ck.save(&best_path)?;
        }
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            ablation: ablation.tag().into(),
            epoch,
            params: params.clone(),
            adam: adam.clone(),
            rng_state: rng.state(),
            best_val_rmse5: best_val,
            best_epoch,
        };
        ck.save(&latest_path)?;
    }

    Ok(TrainOutcome {
        stats: stats_out,
        best_val_rmse5: best_val,
        best_epoch,
        final_params: params,
    })
}
