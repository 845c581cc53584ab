use crate::data::FUTURE_STEPS;
use crate::decoder::{PredictedTrajectory, RolloutVars, StepVars};
use crate::error::{CdsError, Result};
use crate::numerics::{Tape, Tensor, Val};

const LOG_2PI: f64 = 1.8378770664093453;

fn check_lengths(rollout: &RolloutVars, truth: &Tensor) -> Result<()> {
    if rollout.steps.len() != FUTURE_STEPS {
        return Err(CdsError::Contract(format!(
            "rollout has {} steps, wanted {FUTURE_STEPS}",
            rollout.steps.len()
        )));
    }
    if truth.shape() != [FUTURE_STEPS, 2] {
        return Err(CdsError::Contract(format!(
            "truth shape {:?}, wanted [{FUTURE_STEPS}, 2]",
            truth.shape()
        )));
    }
    Ok(())
}

/// Σ_t ((ŷ_x − y_x)² + (ŷ_y − y_y)²) over the 25 mean positions.
pub fn mse_loss(tape: &mut Tape, rollout: &RolloutVars, truth: &Tensor) -> Result<Val> {
    check_lengths(rollout, truth)?;
    let mus: Vec<Val> = rollout.steps.iter().map(|s| s.mu).collect();
    let stacked = tape.stack_rows(&mus)?;
    let truth_c = tape.constant(truth.clone());
    let diff = tape.sub(stacked, truth_c)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Exact bivariate Gaussian negative log-likelihood of the truth under the
/// predicted per-step (μ, σ, ρ), summed over steps and scaled by `alpha`:
///
/// (1/(2(1−ρ²)))[(Δx/σx)² + (Δy/σy)² − 2ρΔxΔy/(σxσy)]
///   + log 2π + log σx + log σy + ½ log(1−ρ²)
pub fn nll_loss(tape: &mut Tape, rollout: &RolloutVars, truth: &Tensor, alpha: f64) -> Result<Val> {
    check_lengths(rollout, truth)?;
    let mut total = tape.scalar(0.0);
    for (t, step) in rollout.steps.iter().enumerate() {
        let sigma = tape.value(step.sigma);
        let rho = tape.value(step.rho).scalar_value();
        if sigma.data().iter().any(|&s| s <= 0.0) || rho.abs() >= 1.0 {
            return Err(CdsError::Numeric(format!(
                "degenerate Gaussian at step {t}: sigma {:?}, rho {rho}",
                sigma.data()
            )));
        }
        let step_nll = step_nll(tape, step, truth.get(t, 0), truth.get(t, 1))?;
        total = tape.add(total, step_nll)?;
    }
    Ok(tape.scale(total, alpha))
}

fn step_nll(tape: &mut Tape, step: &StepVars, tx: f64, ty: f64) -> Result<Val> {
    let truth = tape.constant(Tensor::row_vec(&[tx, ty]));
    let delta = tape.sub(truth, step.mu)?;
    let zd = tape.div(delta, step.sigma)?;
    let zd2 = tape.mul(zd, zd)?;
    let quad = tape.sum(zd2);

    let dx = tape.slice_cols(delta, 0, 1)?;
    let dy = tape.slice_cols(delta, 1, 1)?;
    let dprod = tape.mul(dx, dy)?;
    let sx = tape.slice_cols(step.sigma, 0, 1)?;
    let sy = tape.slice_cols(step.sigma, 1, 1)?;
    let sprod = tape.mul(sx, sy)?;
    let cross_num = tape.mul(step.rho, dprod)?;
    let cross = tape.div(cross_num, sprod)?;
    let cross2 = tape.scale(cross, 2.0);

    let rho2 = tape.mul(step.rho, step.rho)?;
    let one = tape.scalar(1.0);
    let omr = tape.sub(one, rho2)?;
    let denom = tape.scale(omr, 2.0);
    let numer = tape.sub(quad, cross2)?;
    let mahalanobis = tape.div(numer, denom)?;

    let log_sprod = tape.ln(sprod);
    let log_omr = tape.ln(omr);
    let half_log_omr = tape.scale(log_omr, 0.5);

    let acc = tape.add(mahalanobis, log_sprod)?;
    let acc = tape.add(acc, half_log_omr)?;
    Ok(tape.add_scalar(acc, LOG_2PI))
}

/// Evaluate [`nll_loss`] on a finished prediction by replaying its
/// parameters through the same tape path (σ and ρ
/// enter as constants).
pub fn nll_of_prediction(pred: &PredictedTrajectory, truth: &Tensor, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let steps = pred
        .steps
        .iter()
        .map(|s| StepVars {
            mu: tape.constant(Tensor::row_vec(&[s.mu.0, s.mu.1])),
            sigma: tape.constant(Tensor::row_vec(&[s.sigma.0, s.sigma.1])),
            rho: tape.constant(Tensor::scalar(s.rho)),
        })
        .collect();
    let rollout = RolloutVars { steps };
    let loss = nll_loss(&mut tape, &rollout, truth, alpha)?;
    Ok(tape.value(loss).scalar_value())
}

/// Squared-error counterpart of [`nll_of_prediction`].
pub fn mse_of_prediction(pred: &PredictedTrajectory, truth: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let steps = pred
        .steps
        .iter()
        .map(|s| StepVars {
            mu: tape.constant(Tensor::row_vec(&[s.mu.0, s.mu.1])),
            sigma: tape.constant(Tensor::row_vec(&[s.sigma.0, s.sigma.1])),
            rho: tape.constant(Tensor::scalar(s.rho)),
        })
        .collect();
    let rollout = RolloutVars { steps };
    let loss = mse_loss(&mut tape, &rollout, truth)?;
    Ok(tape.value(loss).scalar_value())
}
