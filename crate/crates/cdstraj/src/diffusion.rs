//! Characterized diffusion over neighbor-future feature vectors: a linear
//! variance schedule, the forward noising process, a learned per-neighbor
//! noise predictor conditioned on the scene encodings, and the adaptive
//! reverse update producing K conditioned latent samples.

use crate::config::Config;
use crate::data::{Scene, FUTURE_STEPS};
use crate::error::{CdsError, Result};
use crate::model::COORD_SCALE;
use crate::numerics::{ParamStore, Tape, Tensor, Val};
use crate::rng::Rng;

/// Per-step β, α = 1−β and running product ᾱ for Γ diffusion levels.
/// Level indices are 1-based in the math; accessors take δ ∈ [1, Γ].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn gamma(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_at(&self, level: usize) -> f64 {
        self.beta[level - 1]
    }

    pub fn alpha_at(&self, level: usize) -> f64 {
        self.alpha[level - 1]
    }

    pub fn alpha_bar_at(&self, level: usize) -> f64 {
        self.alpha_bar[level - 1]
    }
}

/// Linear β schedule from `beta_min` to `beta_max` over `gamma` steps.
pub fn make_schedule(gamma: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if gamma == 0 {
        return Err(CdsError::Config("schedule needs at least 1 step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CdsError::Config(format!(
            "beta bounds ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
        )));
    }
    let beta: Vec<f64> = if gamma == 1 {
        vec![beta_min]
    } else {
        (0..gamma)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (gamma - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(gamma);
    let mut product = 1.0;
    for &a in &alpha {
        product *= a;
        alpha_bar.push(product);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// One d_c-dimensional feature per neighbor slot; masked slots stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature {
    pub value: Tensor,
}

impl LatentFeature {
    pub fn zeros(n_max: usize, d_c: usize) -> Self {
        LatentFeature {
            value: Tensor::zeros(&[n_max, d_c]),
        }
    }

    pub fn zero_masked_rows(&mut self, mask: &[bool]) {
        let cols = self.value.cols();
        for (i, &active) in mask.iter().enumerate() {
            if !active {
                for j in 0..cols {
                    self.value.set(i, j, 0.0);
                }
            }
        }
    }
}

fn check_level(level: usize, lo: usize, hi: usize, what: &str) -> Result<()> {
    if level < lo || level > hi {
        return Err(CdsError::Contract(format!(
            "{what} level {level} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// One forward noising step: C^δ = √α_δ · C^{δ−1} + √(1−α_δ) · noise.
pub fn forward_step(
    c_prev: &LatentFeature,
    level: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<LatentFeature> {
    check_level(level, 1, sched.gamma(), "forward_step")?;
    if noise.shape() != c_prev.value.shape() {
        return Err(CdsError::Dimension(format!(
            "noise shape {:?} does not match latent {:?}",
            noise.shape(),
            c_prev.value.shape()
        )));
    }
    let a = sched.alpha_at(level);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = c_prev
        .value
        .data()
        .iter()
        .zip(noise.data())
        .map(|(c, n)| sa * c + sn * n)
        .collect();
    Ok(LatentFeature {
        value: Tensor::new(c_prev.value.shape().to_vec(), data)?,
    })
}

/// Jump straight to level δ: C^δ = √ᾱ_δ · C⁰ + √(1−ᾱ_δ) · noise.
pub fn forward_closed_form(
    c0: &LatentFeature,
    level: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<LatentFeature> {
    check_level(level, 1, sched.gamma(), "forward_closed_form")?;
    if noise.shape() != c0.value.shape() {
        return Err(CdsError::Dimension(format!(
            "noise shape {:?} does not match latent {:?}",
            noise.shape(),
            c0.value.shape()
        )));
    }
    let ab = sched.alpha_bar_at(level);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = c0
        .value
        .data()
        .iter()
        .zip(noise.data())
        .map(|(c, n)| sa * c + sn * n)
        .collect();
    Ok(LatentFeature {
        value: Tensor::new(c0.value.shape().to_vec(), data)?,
    })
}

/// Reverse update producing the level-δ estimate from level δ+1:
///
/// Ĉ^δ = (1/√α)(Ĉ^{δ+1} − ((1−α)/√(1−ᾱ)) ε̂) + √((1−α)/α) z
///
/// with α = α_{δ+1}, ᾱ = ᾱ_{δ+1}; δ ranges over [0, Γ−1] and the caller
/// forces z = 0 at the final step δ = 0.
pub fn reverse_step(
    c_next: &LatentFeature,
    eps_hat: &Tensor,
    delta: usize,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<LatentFeature> {
    if delta > sched.gamma() - 1 {
        return Err(CdsError::Contract(format!(
            "reverse_step level {delta} outside [0, {}]",
            sched.gamma() - 1
        )));
    }
    if eps_hat.shape() != c_next.value.shape() || z.shape() != c_next.value.shape() {
        return Err(CdsError::Dimension(format!(
            "eps/z shapes {:?}/{:?} do not match latent {:?}",
            eps_hat.shape(),
            z.shape(),
            c_next.value.shape()
        )));
    }
    let a = sched.alpha_at(delta + 1);
    let ab = sched.alpha_bar_at(delta + 1);
    let inv_sqrt_a = 1.0 / a.sqrt();
    let eps_coef = (1.0 - a) / (1.0 - ab).sqrt();
    let z_coef = ((1.0 - a) / a).sqrt();
    let data = c_next
        .value
        .data()
        .iter()
        .zip(eps_hat.data().iter().zip(z.data()))
        .map(|(c, (e, z))| inv_sqrt_a * (c - eps_coef * e) + z_coef * z)
        .collect();
    Ok(LatentFeature {
        value: Tensor::new(c_next.value.shape().to_vec(), data)?,
    })
}

/// Sinusoidal embedding of the diffusion level, dimension d_c.
fn step_embedding(delta: usize, d_c: usize) -> Tensor {
    let mut data = vec![0.0; d_c];
    let half = d_c / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        data[2 * i] = (delta as f64 * freq).sin();
        data[2 * i + 1] = (delta as f64 * freq).cos();
    }
    Tensor::new(vec![1, d_c], data).expect("embedding shape")
}

pub fn init_params(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Result<()> {
    let d = cfg.hidden_dim;
    let d_c = cfg.latent_dim;
    let eps_in = 2 * d + 2 * d_c;
    let eps_hidden = 2 * d_c;
    store.insert("diffusion.feat.w", crate::model::init_weight(2 * FUTURE_STEPS, d_c, rng))?;
    store.insert("diffusion.feat.b", crate::model::init_bias(d_c))?;
    store.insert("diffusion.eps.w1", crate::model::init_weight(eps_in, eps_hidden, rng))?;
    store.insert("diffusion.eps.b1", crate::model::init_bias(eps_hidden))?;
    store.insert("diffusion.eps.w2", crate::model::init_weight(eps_hidden, d_c, rng))?;
    store.insert("diffusion.eps.b2", crate::model::init_bias(d_c))?;
    Ok(())
}

fn row_mask_tensor(mask: &[bool], cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(mask.len() * cols);
    for &active in mask {
        let v = if active { 1.0 } else { 0.0 };
        data.extend(std::iter::repeat(v).take(cols));
    }
    Tensor::new(vec![mask.len(), cols], data).expect("mask shape")
}

/// Learned per-neighbor embedding of the ground-truth future trajectories:
/// each flattened 25×2 future maps linearly to d_c dims; masked rows zero.
pub fn future_feature_encode(
    tape: &mut Tape,
    scene: &Scene,
    params: &ParamStore,
    cfg: &Config,
) -> Result<Val> {
    let n_max = scene.n_max();
    let mut rows = Vec::with_capacity(n_max * 2 * FUTURE_STEPS);
    for i in 0..n_max {
        let future = scene.neighbor_future(i);
        rows.extend(future.data().iter().map(|v| v * COORD_SCALE));
    }
    let futures = tape.constant(Tensor::new(vec![n_max, 2 * FUTURE_STEPS], rows)?);
    let w = tape.param(params, "diffusion.feat.w")?;
    let b = tape.param(params, "diffusion.feat.b")?;
    let feat = tape.linear(futures, w, Some(b))?;
    tape.mul_const(feat, row_mask_tensor(&scene.neighbor_mask, cfg.latent_dim))
}

/// Noise predictor ε̂ = f(Ĉ^{δ+1}, target encoding, neighbor encodings, δ):
/// a two-layer row-wise network over [latent row ; target enc ; neighbor
/// enc row ; step embedding], masked rows zeroed.
pub fn predict_noise(
    tape: &mut Tape,
    c_next: Val,
    target_enc: Val,
    neighbor_enc: Val,
    mask: &[bool],
    delta: usize,
    params: &ParamStore,
    cfg: &Config,
) -> Result<Val> {
    let n_max = mask.len();
    let d_c = cfg.latent_dim;
    let emb = tape.constant(step_embedding(delta, d_c));
    let w1 = tape.param(params, "diffusion.eps.w1")?;
    let b1 = tape.param(params, "diffusion.eps.b1")?;
    let w2 = tape.param(params, "diffusion.eps.w2")?;
    let b2 = tape.param(params, "diffusion.eps.b2")?;

    let mut out_rows = Vec::with_capacity(n_max);
    for i in 0..n_max {
        if !mask[i] {
            // Masked slots are zeroed below anyway; skip the work.
            out_rows.push(tape.constant(Tensor::zeros(&[1, d_c])));
            continue;
        }
        let c_row = tape.row(c_next, i)?;
        let enc_row = tape.row(neighbor_enc, i)?;
        let joined = tape.concat_cols(c_row, target_enc)?;
        let joined = tape.concat_cols(joined, enc_row)?;
        let joined = tape.concat_cols(joined, emb)?;
        let hidden = tape.linear(joined, w1, Some(b1))?;
        let hidden = tape.leaky_relu(hidden, cfg.leaky_slope);
        out_rows.push(tape.linear(hidden, w2, Some(b2))?);
    }
    let stacked = tape.stack_rows(&out_rows)?;
    tape.mul_const(stacked, row_mask_tensor(mask, d_c))
}

fn predict_noise_value(
    c_next: &LatentFeature,
    target_enc: &Tensor,
    neighbor_enc: &Tensor,
    mask: &[bool],
    delta: usize,
    params: &ParamStore,
    cfg: &Config,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(c_next.value.clone());
    let t = tape.constant(target_enc.clone());
    let n = tape.constant(neighbor_enc.clone());
    let out = predict_noise(&mut tape, c, t, n, mask, delta, params, cfg)?;
    Ok(tape.value(out).clone())
}

/// Run K independent reverse chains from pure noise down to level 0,
/// conditioning each denoising step on the scene encodings. Deterministic
/// given `rng_seed`; masked rows are zeroed after every step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample(
    target_enc: &Tensor,
    neighbor_enc: &Tensor,
    mask: &[bool],
    k: usize,
    sched: &NoiseSchedule,
    params: &ParamStore,
    cfg: &Config,
    rng_seed: u64,
) -> Result<Vec<LatentFeature>> {
    if k == 0 {
        return Err(CdsError::Contract("reverse_sample needs K >= 1".into()));
    }
    let n_max = mask.len();
    let d_c = cfg.latent_dim;
    if mask.iter().all(|&m| !m) {
        return Ok(vec![LatentFeature::zeros(n_max, d_c); k]);
    }
    let gamma = sched.gamma();
    let mut samples = Vec::with_capacity(k);
    for chain in 0..k {
        let mut rng = Rng::derive(rng_seed, chain as u64);
        let mut latent = LatentFeature {
            value: Tensor::randn(&[n_max, d_c], 1.0, &mut rng),
        };
        latent.zero_masked_rows(mask);
        for delta in (0..gamma).rev() {
            let eps_hat =
                predict_noise_value(&latent, target_enc, neighbor_enc, mask, delta, params, cfg)?;
            let z = if delta > 0 {
                Tensor::randn(&[n_max, d_c], 1.0, &mut rng)
            } else {
                Tensor::zeros(&[n_max, d_c])
            };
            latent = reverse_step(&latent, &eps_hat, delta, sched, &z)?;
            latent.zero_masked_rows(mask);
        }
        if !latent.value.all_finite() {
            return Err(CdsError::Numeric("reverse chain diverged".into()));
        }
        samples.push(latent);
    }
    Ok(samples)
}

/// ε-prediction objective: noise the clean future features to a uniformly
/// drawn level and score the predictor's recovery of the injected noise.
/// Mean squared error over unmasked entries only.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    tape: &mut Tape,
    scene: &Scene,
    target_enc: Val,
    neighbor_enc: Val,
    sched: &NoiseSchedule,
    params: &ParamStore,
    cfg: &Config,
    rng: &mut Rng,
) -> Result<Val> {
    let level = 1 + rng.below(sched.gamma());
    let n_max = scene.n_max();
    let d_c = cfg.latent_dim;
    let mut eps = Tensor::randn(&[n_max, d_c], 1.0, rng);
    for (i, &active) in scene.neighbor_mask.iter().enumerate() {
        if !active {
            for j in 0..d_c {
                eps.set(i, j, 0.0);
            }
        }
    }
    diffusion_loss_at(tape, scene, target_enc, neighbor_enc, sched, params, cfg, level, eps)
}

/// Deterministic core of [`diffusion_loss`] with the level and noise
/// injected; exposed for oracles and gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_at(
    tape: &mut Tape,
    scene: &Scene,
    target_enc: Val,
    neighbor_enc: Val,
    sched: &NoiseSchedule,
    params: &ParamStore,
    cfg: &Config,
    level: usize,
    eps: Tensor,
) -> Result<Val> {
    check_level(level, 1, sched.gamma(), "diffusion_loss")?;
    let n_active = scene.n_active_neighbors();
    if n_active == 0 {
        return Ok(tape.scalar(0.0));
    }
    let d_c = cfg.latent_dim;
    let c0 = future_feature_encode(tape, scene, params, cfg)?;
    let ab = sched.alpha_bar_at(level);
    let scaled_c0 = tape.scale(c0, ab.sqrt());
    let noise_term = eps.map(|x| x * (1.0 - ab).sqrt());
    let noisy = tape.add_const(scaled_c0, noise_term)?;
    let eps_hat = predict_noise(
        tape,
        noisy,
        target_enc,
        neighbor_enc,
        &scene.neighbor_mask,
        level - 1,
        params,
        cfg,
    )?;
    let eps_const = tape.constant(eps);
    let diff = tape.sub(eps_const, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (n_active * d_c) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthKind};
    use crate::numerics::finite_diff_gradcheck;

    fn sched(gamma: usize) -> NoiseSchedule {
        make_schedule(gamma, 1e-4, 0.05).unwrap()
    }

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_at(1), 0.9);
        assert_eq!(s.alpha_bar_at(1), 0.9);
    }

    #[test]
    fn schedule_constant_beta_gives_powers() {
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        let want = [0.9, 0.81, 0.729];
        for (i, w) in want.iter().enumerate() {
            assert!((s.alpha_bar_at(i + 1) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_recurrence_and_monotonicity() {
        let s = sched(100);
        for level in 2..=100 {
            let want = s.alpha_bar_at(level - 1) * s.alpha_at(level);
            assert_eq!(s.alpha_bar_at(level), want);
            assert!(s.alpha_bar_at(level) < s.alpha_bar_at(level - 1));
        }
        assert!(s.alpha_bar_at(100) > 0.0 && s.alpha_bar_at(100) < 1.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.0, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 1.0).is_err());
    }

    fn latent_of(data: &[f64], rows: usize) -> LatentFeature {
        LatentFeature {
            value: Tensor::new(vec![rows, data.len() / rows], data.to_vec()).unwrap(),
        }
    }

    #[test]
    fn forward_step_zero_noise_scales() {
        let s = sched(10);
        let c = latent_of(&[1.0, -2.0, 3.0, 0.5], 2);
        let out = forward_step(&c, 4, &s, &Tensor::zeros(&[2, 2])).unwrap();
        let sa = s.alpha_at(4).sqrt();
        for (o, i) in out.value.data().iter().zip(c.value.data()) {
            assert!((o - sa * i).abs() < 1e-15);
        }
        assert!(forward_step(&c, 0, &s, &Tensor::zeros(&[2, 2])).is_err());
        assert!(forward_step(&c, 11, &s, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn closed_form_matches_single_step() {
        let s = sched(10);
        let c = latent_of(&[0.3, 1.7, -0.4, 0.9], 2);
        let noise = Tensor::new(vec![2, 2], vec![0.1, -0.7, 1.1, 0.2]).unwrap();
        let a = forward_step(&c, 1, &s, &noise).unwrap();
        let b = forward_closed_form(&c, 1, &s, &noise).unwrap();
        assert!(a.value.max_abs_diff(&b.value) < 1e-15);
    }

    #[test]
    fn chain_matches_closed_form_with_aggregate_noise() {
        // Brute-force aggregation oracle: fold the per-step noises into the
        // single equivalent noise and compare against the closed form.
        let gamma = 100;
        let s = sched(gamma);
        let mut rng = Rng::seed_from(21);
        let c0 = latent_of(&(0..6).map(|_| rng.normal()).collect::<Vec<_>>(), 2);
        let noises: Vec<Tensor> = (0..gamma)
            .map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng))
            .collect();

        let mut chained = c0.clone();
        for level in 1..=gamma {
            chained = forward_step(&chained, level, &s, &noises[level - 1]).unwrap();
        }

        let ab_final = s.alpha_bar_at(gamma);
        let mut agg = vec![0.0; 6];
        for level in 1..=gamma {
            let coef = (ab_final / s.alpha_bar_at(level)).sqrt() * (1.0 - s.alpha_at(level)).sqrt();
            for (a, n) in agg.iter_mut().zip(noises[level - 1].data()) {
                *a += coef * n;
            }
        }
        let denom = (1.0 - ab_final).sqrt();
        let eps_agg = Tensor::new(vec![2, 3], agg.iter().map(|a| a / denom).collect()).unwrap();
        let closed = forward_closed_form(&c0, gamma, &s, &eps_agg).unwrap();
        assert!(chained.value.max_abs_diff(&closed.value) < 1e-10);
    }

    #[test]
    fn closed_form_marginal_statistics() {
        let s = sched(30);
        let level = 17;
        let c0 = latent_of(&[0.8, -1.2, 0.4, 2.0, -0.6, 0.1], 2);
        let mut rng = Rng::seed_from(25);
        let n = 10_000usize;
        let mut sum = vec![0.0; 6];
        let mut sum_sq = vec![0.0; 6];
        for _ in 0..n {
            let noise = Tensor::randn(&[2, 3], 1.0, &mut rng);
            let out = forward_closed_form(&c0, level, &s, &noise).unwrap();
            for (i, v) in out.value.data().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let ab = s.alpha_bar_at(level);
        let want_var = 1.0 - ab;
        let mean_tol = 3.0 * want_var.sqrt() / (n as f64).sqrt();
        let var_tol = 3.0 * want_var * (2.0 / n as f64).sqrt();
        for i in 0..6 {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let want_mean = ab.sqrt() * c0.value.data()[i];
            assert!((mean - want_mean).abs() < mean_tol, "mean[{i}]");
            assert!((var - want_var).abs() < var_tol, "var[{i}]");
        }
    }

    #[test]
    fn single_step_perfect_eps_recovers_exactly() {
        let s = make_schedule(1, 0.05, 0.05).unwrap();
        let c0 = latent_of(&[1.3, -0.2, 0.7, 0.05], 2);
        let eps = Tensor::new(vec![2, 2], vec![0.4, -1.1, 0.9, 0.3]).unwrap();
        let c1 = forward_closed_form(&c0, 1, &s, &eps).unwrap();
        let back = reverse_step(&c1, &eps, 0, &s, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(back.value.max_abs_diff(&c0.value) < 1e-12);
    }

    #[test]
    fn reverse_step_zero_eps_is_pure_rescale() {
        let s = sched(10);
        let c = latent_of(&[2.0, -4.0], 1);
        let out = reverse_step(&c, &Tensor::zeros(&[1, 2]), 3, &s, &Tensor::zeros(&[1, 2])).unwrap();
        let scale = 1.0 / s.alpha_at(4).sqrt();
        for (o, i) in out.value.data().iter().zip(c.value.data()) {
            assert!((o - scale * i).abs() < 1e-15);
        }
        assert!(reverse_step(&c, &Tensor::zeros(&[1, 2]), 10, &s, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn perfect_eps_chain_reconstructs_c0() {
        // Forward with recorded noises, then reverse using the oracle ε̂
        // that makes every step land exactly on the forward chain.
        let gamma = 50;
        let s = sched(gamma);
        let mut rng = Rng::seed_from(8);
        let c0 = latent_of(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>(), 2);
        let mut chain = vec![c0.clone()];
        let mut noises = Vec::new();
        for level in 1..=gamma {
            let n = Tensor::randn(&[2, 4], 1.0, &mut rng);
            chain.push(forward_step(chain.last().unwrap(), level, &s, &n).unwrap());
            noises.push(n);
        }
        let mut current = chain[gamma].clone();
        for delta in (0..gamma).rev() {
            let level = delta + 1;
            let coef = (1.0 - s.alpha_bar_at(level)).sqrt() / (1.0 - s.alpha_at(level)).sqrt();
            let eps_hat = noises[level - 1].map(|n| n * coef);
            current = reverse_step(&current, &eps_hat, delta, &s, &Tensor::zeros(&[2, 4])).unwrap();
        }
        assert!(current.value.max_abs_diff(&c0.value) < 1e-8);
    }

    fn braking_fixture() -> (Scene, Config, ParamStore) {
        let cfg = Config {
            hidden_dim: 8,
            n_heads: 2,
            latent_dim: 4,
            n_max: 2,
            gamma: 6,
            ..Config::default()
        };
        let scene = gen_synthetic_scene(&cfg);
        let params = crate::model::init_params(&cfg, 5).unwrap();
        (scene, cfg, params)
    }

    fn gen_synthetic_scene(cfg: &Config) -> Scene {
        let mut scenes = crate::data::gen_synthetic_with(
            SynthKind::BrakingInteraction,
            1,
            4,
            crate::data::SynthParams {
                n_max: cfg.n_max,
                ..Default::default()
            },
        )
        .unwrap();
        scenes.remove(0)
    }

    fn fake_encodings(cfg: &Config, scene: &Scene) -> (Tensor, Tensor) {
        let mut rng = Rng::seed_from(17);
        let target = Tensor::randn(&[1, cfg.hidden_dim], 1.0, &mut rng);
        let mut neighbors = Tensor::randn(&[scene.n_max(), cfg.hidden_dim], 1.0, &mut rng);
        for (i, &active) in scene.neighbor_mask.iter().enumerate() {
            if !active {
                for j in 0..cfg.hidden_dim {
                    neighbors.set(i, j, 0.0);
                }
            }
        }
        (target, neighbors)
    }

    #[test]
    fn predict_noise_zero_weights_zero_output() {
        let (scene, cfg, _) = braking_fixture();
        let mut params = ParamStore::new();
        let mut rng = Rng::seed_from(1);
        init_params(&mut params, &cfg, &mut rng).unwrap();
        for name in params.names() {
            if name.starts_with("diffusion.eps") {
                let t = params.get_mut(&name).unwrap();
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let latent = LatentFeature {
            value: Tensor::randn(&[scene.n_max(), cfg.latent_dim], 1.0, &mut rng),
        };
        let out = predict_noise_value(
            &latent,
            &target,
            &neighbors,
            &scene.neighbor_mask,
            2,
            &params,
            &cfg,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_noise_is_pure() {
        let (scene, cfg, params) = braking_fixture();
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let latent = LatentFeature {
            value: Tensor::randn(&[scene.n_max(), cfg.latent_dim], 1.0, &mut Rng::seed_from(2)),
        };
        let a = predict_noise_value(&latent, &target, &neighbors, &scene.neighbor_mask, 1, &params, &cfg)
            .unwrap();
        let b = predict_noise_value(&latent, &target, &neighbors, &scene.neighbor_mask, 1, &params, &cfg)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_noise_gradchecks() {
        let (scene, cfg, mut params) = braking_fixture();
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let latent = Tensor::randn(&[scene.n_max(), cfg.latent_dim], 1.0, &mut Rng::seed_from(6));
        let mask = scene.neighbor_mask.clone();
        let worst = finite_diff_gradcheck(
            &|p, tape| {
                let c = tape.constant(latent.clone());
                let t = tape.constant(target.clone());
                let n = tape.constant(neighbors.clone());
                let out = predict_noise(tape, c, t, n, &mask, 3, p, &cfg)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn future_feature_encode_contracts() {
        let (scene, cfg, params) = braking_fixture();
        // Zero futures and zero weights -> zero feature.
        let mut zeroed = scene.clone();
        for v in zeroed.neighbor_futures.data_mut() {
            *v = 0.0;
        }
        let mut zero_params = params.clone();
        for name in ["diffusion.feat.w", "diffusion.feat.b"] {
            for v in zero_params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let out = future_feature_encode(&mut tape, &zeroed, &zero_params, &cfg).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // Masked slots stay zero regardless of weights.
        let mut tape = Tape::new();
        let out = future_feature_encode(&mut tape, &scene, &params, &cfg).unwrap();
        for (i, &active) in scene.neighbor_mask.iter().enumerate() {
            if !active {
                for j in 0..cfg.latent_dim {
                    assert_eq!(tape.value(out).get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn future_feature_encode_gradchecks() {
        let (scene, cfg, mut params) = braking_fixture();
        let worst = finite_diff_gradcheck(
            &|p, tape| {
                let out = future_feature_encode(tape, &scene, p, &cfg)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn reverse_sample_is_seed_deterministic_and_finite() {
        let (scene, cfg, params) = braking_fixture();
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let s = make_schedule(50, cfg.beta_min, cfg.beta_max).unwrap();
        let a = reverse_sample(&target, &neighbors, &scene.neighbor_mask, 2, &s, &params, &cfg, 77)
            .unwrap();
        let b = reverse_sample(&target, &neighbors, &scene.neighbor_mask, 2, &s, &params, &cfg, 77)
            .unwrap();
        assert_eq!(a, b);
        let c = reverse_sample(&target, &neighbors, &scene.neighbor_mask, 2, &s, &params, &cfg, 78)
            .unwrap();
        assert_ne!(a, c);
        for latent in &a {
            assert!(latent.value.all_finite());
            for (i, &active) in scene.neighbor_mask.iter().enumerate() {
                if !active {
                    for j in 0..cfg.latent_dim {
                        assert_eq!(latent.value.get(i, j), 0.0);
                    }
                }
            }
        }
        // The two chains of one call differ as well.
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn diffusion_loss_oracle_values() {
        let (scene, cfg, params) = braking_fixture();
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let s = make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max).unwrap();

        // Perfect predictor (injected): loss is exactly zero.
        let mut eps = Tensor::zeros(&[scene.n_max(), cfg.latent_dim]);
        // With ε = 0 and any predictor output o, loss = mean(o²) >= 0; with a
        // zero predictor both sides vanish.
        let mut zero_params = params.clone();
        for name in zero_params.names() {
            if name.starts_with("diffusion.eps") {
                for v in zero_params.get_mut(&name).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let n = tape.constant(neighbors.clone());
        let loss = diffusion_loss_at(
            &mut tape, &scene, t, n, &s, &zero_params, &cfg, 2, eps.clone(),
        )
        .unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);

        // Zero predictor against a unit ε: loss = mean(ε²) over unmasked rows.
        let mut rng = Rng::seed_from(9);
        for (i, &active) in scene.neighbor_mask.iter().enumerate() {
            if active {
                for j in 0..cfg.latent_dim {
                    eps.set(i, j, rng.normal());
                }
            }
        }
        let want: f64 = eps.data().iter().map(|v| v * v).sum::<f64>()
            / (scene.n_active_neighbors() * cfg.latent_dim) as f64;
        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let n = tape.constant(neighbors.clone());
        let loss =
            diffusion_loss_at(&mut tape, &scene, t, n, &s, &zero_params, &cfg, 3, eps).unwrap();
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn diffusion_loss_nonnegative_and_zero_for_isolated_scene() {
        let cfg = Config::gradcheck_tiny();
        let params = crate::model::init_params(&cfg, 3).unwrap();
        let s = make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max).unwrap();
        let scene = gen_synthetic(SynthKind::ConstantVelocity, 1, 1)
            .unwrap()
            .remove(0);
        let (target, neighbors) = fake_encodings(&cfg, &scene);
        let mut tape = Tape::new();
        let t = tape.constant(target);
        let n = tape.constant(neighbors);
        let mut rng = Rng::seed_from(2);
        let loss =
            diffusion_loss(&mut tape, &scene, t, n, &s, &params, &cfg, &mut rng).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }
}
