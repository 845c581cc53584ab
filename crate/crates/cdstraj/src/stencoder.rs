//! Spatial-temporal interaction encoding: per-step embedding with a gated
//! recurrent update, multi-head target-to-neighbor attention over history
//! plus diffused-future features, and gated fusion of the attended context.

use crate::config::Config;
use crate::data::{Scene, HISTORY_STEPS};
use crate::error::{CdsError, Result};
use crate::model::{Ablation, COORD_SCALE};
use crate::numerics::{ParamStore, Tape, Tensor, Val};
use crate::rng::Rng;

/// Everything downstream consumers need from one encoding pass. `context`
/// is the decoder input: [S ; h] projected back to d, so target information
/// survives scenes with no neighbors.
pub struct EncodedScene {
    /// Final temporal hidden state of the target, 1×d.
    pub target_enc: Val,
    /// Per-slot neighbor encodings, n_max×d, masked rows zero.
    pub neighbor_enc: Val,
    /// Gated fusion output S, 1×d.
    pub fused: Val,
    /// Decoder context, 1×d.
    pub context: Val,
    /// Attention weights per head (values, 1×n_max each); empty when every
    /// neighbor slot is masked.
    pub attn: Vec<Tensor>,
}

pub fn init_params(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Result<()> {
    let d = cfg.hidden_dim;
    let d_h = cfg.head_dim();
    let d_c = cfg.latent_dim;
    store.insert("temporal.w_emb", crate::model::init_weight(2, d, rng))?;
    for gate in ["z", "r", "h"] {
        store.insert(&format!("temporal.gru.w{gate}"), crate::model::init_weight(d, d, rng))?;
        store.insert(&format!("temporal.gru.u{gate}"), crate::model::init_weight(d, d, rng))?;
        // Update gate biased toward retention so the cell starts with a
        // memory horizon covering the whole 16-step history.
        let bias = if gate == "z" {
            Tensor::filled(&[1, d], -2.0)
        } else {
            crate::model::init_bias(d)
        };
        store.insert(&format!("temporal.gru.b{gate}"), bias)?;
    }
    store.insert("temporal.h0", Tensor::randn(&[1, d], 0.1, rng))?;
    store.insert("stencoder.nb.w", crate::model::init_weight(d + d_c, d, rng))?;
    store.insert("stencoder.nb.b", crate::model::init_bias(d))?;
    for head in 0..cfg.n_heads {
        store.insert(&format!("attn.q.{head}"), crate::model::init_weight(d, d_h, rng))?;
        store.insert(&format!("attn.k.{head}"), crate::model::init_weight(d, d_h, rng))?;
        store.insert(&format!("attn.v.{head}"), crate::model::init_weight(d, d_h, rng))?;
    }
    store.insert("attn.out.w", crate::model::init_weight(cfg.n_heads * d_h, d, rng))?;
    store.insert("fusion.w_a", crate::model::init_weight(d, d, rng))?;
    store.insert("fusion.b_a", crate::model::init_bias(d))?;
    store.insert("fusion.w_g", crate::model::init_weight(d, d, rng))?;
    store.insert("fusion.b_g", crate::model::init_bias(d))?;
    store.insert("stencoder.ctx.w", crate::model::init_weight(2 * d, d, rng))?;
    store.insert("stencoder.ctx.b", crate::model::init_bias(d))?;
    Ok(())
}

/// Embed one 16-step history and run the gated recurrent cell over it,
/// returning the final hidden state (1×d).
pub fn temporal_encode(
    tape: &mut Tape,
    history: &Tensor,
    params: &ParamStore,
    cfg: &Config,
) -> Result<Val> {
    temporal_encode_mode(tape, history, params, cfg, Ablation::None)
}

pub(crate) fn temporal_encode_mode(
    tape: &mut Tape,
    history: &Tensor,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<Val> {
    if history.shape() != [HISTORY_STEPS, 2] {
        return Err(CdsError::Contract(format!(
            "temporal_encode expects a {HISTORY_STEPS}x2 history, got {:?}",
            history.shape()
        )));
    }
    let scaled = tape.constant(history.map(|v| v * COORD_SCALE));
    let w_emb = tape.param(params, "temporal.w_emb")?;
    let embedded = tape.matmul(scaled, w_emb)?;
    let embedded = tape.leaky_relu(embedded, cfg.leaky_slope);

    if ablation == Ablation::TemporalEncoder {
        // Mean-pooled embedding stub: no recurrence at all.
        let pool = tape.constant(Tensor::filled(&[1, HISTORY_STEPS], 1.0 / HISTORY_STEPS as f64));
        return tape.matmul(pool, embedded);
    }

    let wz = tape.param(params, "temporal.gru.wz")?;
    let uz = tape.param(params, "temporal.gru.uz")?;
    let bz = tape.param(params, "temporal.gru.bz")?;
    let wr = tape.param(params, "temporal.gru.wr")?;
    let ur = tape.param(params, "temporal.gru.ur")?;
    let br = tape.param(params, "temporal.gru.br")?;
    let wh = tape.param(params, "temporal.gru.wh")?;
    let uh = tape.param(params, "temporal.gru.uh")?;
    let bh = tape.param(params, "temporal.gru.bh")?;
    let ones = tape.constant(Tensor::filled(&[1, cfg.hidden_dim], 1.0));

    let mut hidden = tape.param(params, "temporal.h0")?;
    for t in 0..HISTORY_STEPS {
        let x = tape.row(embedded, t)?;
        let zx = tape.linear(x, wz, Some(bz))?;
        let zh = tape.matmul(hidden, uz)?;
        let z = tape.add(zx, zh)?;
        let z = tape.sigmoid(z);
        let rx = tape.linear(x, wr, Some(br))?;
        let rh = tape.matmul(hidden, ur)?;
        let r = tape.add(rx, rh)?;
        let r = tape.sigmoid(r);
        let gated = tape.mul(r, hidden)?;
        let cx = tape.linear(x, wh, Some(bh))?;
        let ch = tape.matmul(gated, uh)?;
        let cand = tape.add(cx, ch)?;
        let cand = tape.tanh(cand);
        let keep = tape.sub(ones, z)?;
        let kept = tape.mul(keep, hidden)?;
        let new = tape.mul(z, cand)?;
        hidden = tape.add(kept, new)?;
    }
    Ok(hidden)
}

/// Stack of per-slot temporal encodings of the neighbor histories
/// (n_max×d, masked rows zero). This matrix doubles as the conditioning
/// input of the diffusion noise predictor.
pub(crate) fn neighbor_temporal_encodings(
    tape: &mut Tape,
    scene: &Scene,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<Val> {
    let d = cfg.hidden_dim;
    let mut rows = Vec::with_capacity(scene.n_max());
    for i in 0..scene.n_max() {
        if !scene.neighbor_mask[i] {
            rows.push(tape.constant(Tensor::zeros(&[1, d])));
            continue;
        }
        rows.push(temporal_encode_mode(tape, &scene.neighbor_history(i), params, cfg, ablation)?);
    }
    tape.stack_rows(&rows)
}

/// Ĥ rows: [temporal encoding ; diffused-future feature] projected to d.
pub(crate) fn project_neighbors(
    tape: &mut Tape,
    nb_temporal: Val,
    latent: Val,
    mask: &[bool],
    params: &ParamStore,
    cfg: &Config,
) -> Result<Val> {
    let d = cfg.hidden_dim;
    let w = tape.param(params, "stencoder.nb.w")?;
    let b = tape.param(params, "stencoder.nb.b")?;
    let mut rows = Vec::with_capacity(mask.len());
    for (i, &active) in mask.iter().enumerate() {
        if !active {
            rows.push(tape.constant(Tensor::zeros(&[1, d])));
            continue;
        }
        let enc = tape.row(nb_temporal, i)?;
        let feat = tape.row(latent, i)?;
        let joined = tape.concat_cols(enc, feat)?;
        rows.push(tape.linear(joined, w, Some(b))?);
    }
    tape.stack_rows(&rows)
}

/// Per neighbor: temporal encoding of its history concatenated with its
/// d_c-dim diffused-future feature, projected to d. Masked slots are zero
/// rows and skip the recurrent pass entirely.
pub fn encode_neighbors(
    tape: &mut Tape,
    scene: &Scene,
    latent: Val,
    params: &ParamStore,
    cfg: &Config,
) -> Result<Val> {
    let nb_temporal = neighbor_temporal_encodings(tape, scene, params, cfg, Ablation::None)?;
    project_neighbors(tape, nb_temporal, latent, &scene.neighbor_mask, params, cfg)
}

/// Multi-head cross-attention of the target over the neighbor encodings.
/// Masked slots are excluded through -inf logits and receive exactly zero
/// weight; with no neighbors at all, Υ = 0 and the weights are empty.
pub fn spatial_attention(
    tape: &mut Tape,
    target_enc: Val,
    neighbor_enc: Val,
    mask: &[bool],
    params: &ParamStore,
    cfg: &Config,
) -> Result<(Val, Vec<Tensor>)> {
    let d = cfg.hidden_dim;
    if mask.iter().all(|&m| !m) {
        return Ok((tape.constant(Tensor::zeros(&[1, d])), Vec::new()));
    }
    let logit_mask = Tensor::new(
        vec![1, mask.len()],
        mask.iter().map(|&m| if m { 0.0 } else { -1e30 }).collect(),
    )?;
    let scale = 1.0 / (d as f64).sqrt();

    let mut head_outs = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let wq = tape.param(params, &format!("attn.q.{head}"))?;
        let wk = tape.param(params, &format!("attn.k.{head}"))?;
        let wv = tape.param(params, &format!("attn.v.{head}"))?;
        let q = tape.matmul(target_enc, wq)?;
        let k = tape.matmul(neighbor_enc, wk)?;
        let v = tape.matmul(neighbor_enc, wv)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let logits = tape.add_const(logits, logit_mask.clone())?;
        let omega = tape.softmax_rows(logits);
        weights.push(tape.value(omega).clone());
        head_outs.push(tape.matmul(omega, v)?);
    }
    let mut joined = head_outs[0];
    for &h in &head_outs[1..] {
        joined = tape.concat_cols(joined, h)?;
    }
    let wo = tape.param(params, "attn.out.w")?;
    let upsilon = tape.matmul(joined, wo)?;
    Ok((upsilon, weights))
}

/// H_a = σ(W_a Υ + b_a); H_g = σ(W_g H_a + b_g); S = H_a ⊙ H_g.
pub fn gated_fusion(tape: &mut Tape, upsilon: Val, params: &ParamStore) -> Result<Val> {
    let wa = tape.param(params, "fusion.w_a")?;
    let ba = tape.param(params, "fusion.b_a")?;
    let wg = tape.param(params, "fusion.w_g")?;
    let bg = tape.param(params, "fusion.b_g")?;
    let ha = tape.linear(upsilon, wa, Some(ba))?;
    let ha = tape.sigmoid(ha);
    let hg = tape.linear(ha, wg, Some(bg))?;
    let hg = tape.sigmoid(hg);
    tape.mul(ha, hg)
}

/// Full encoding pass: temporal → spatial attention → gated fusion, then
/// the decoder context projection of [S ; h].
pub fn encode_scene(
    tape: &mut Tape,
    scene: &Scene,
    latent: Val,
    params: &ParamStore,
    cfg: &Config,
) -> Result<EncodedScene> {
    encode_scene_mode(tape, scene, latent, params, cfg, Ablation::None)
}

pub(crate) fn encode_scene_mode(
    tape: &mut Tape,
    scene: &Scene,
    latent: Val,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<EncodedScene> {
    let target_enc = temporal_encode_mode(tape, &scene.target_history, params, cfg, ablation)?;
    let nb_temporal = neighbor_temporal_encodings(tape, scene, params, cfg, ablation)?;
    encode_scene_from(tape, scene, target_enc, nb_temporal, latent, params, cfg, ablation)
}

/// Interaction half of [`encode_scene`], reusing already-computed temporal
/// encodings; `predict` runs the temporal pass once and calls this per
/// diffusion sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_scene_from(
    tape: &mut Tape,
    scene: &Scene,
    target_enc: Val,
    nb_temporal: Val,
    latent: Val,
    params: &ParamStore,
    cfg: &Config,
    ablation: Ablation,
) -> Result<EncodedScene> {
    let neighbor_enc =
        project_neighbors(tape, nb_temporal, latent, &scene.neighbor_mask, params, cfg)?;
    let (upsilon, attn) = if ablation == Ablation::SpatialEncoder {
        (tape.constant(Tensor::zeros(&[1, cfg.hidden_dim])), Vec::new())
    } else {
        spatial_attention(tape, target_enc, neighbor_enc, &scene.neighbor_mask, params, cfg)?
    };
    let fused = if ablation == Ablation::Fusion {
        upsilon
    } else {
        gated_fusion(tape, upsilon, params)?
    };
    let joined = tape.concat_cols(fused, target_enc)?;
    let w_ctx = tape.param(params, "stencoder.ctx.w")?;
    let b_ctx = tape.param(params, "stencoder.ctx.b")?;
    let context = tape.linear(joined, w_ctx, Some(b_ctx))?;
    Ok(EncodedScene {
        target_enc,
        neighbor_enc,
        fused,
        context,
        attn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_with, SynthKind, SynthParams};
    use crate::numerics::finite_diff_gradcheck;

    fn tiny_cfg() -> Config {
        Config {
            hidden_dim: 8,
            n_heads: 2,
            latent_dim: 4,
            n_max: 3,
            ..Config::default()
        }
    }

    fn fixture() -> (Scene, Config, ParamStore) {
        let cfg = tiny_cfg();
        let scene = gen_synthetic_with(
            SynthKind::BrakingInteraction,
            1,
            2,
            SynthParams {
                n_max: cfg.n_max,
                ..Default::default()
            },
        )
        .unwrap()
        .remove(0);
        let params = crate::model::init_params(&cfg, 7).unwrap();
        (scene, cfg, params)
    }

    fn zero_params_like(params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        for name in out.names() {
            for v in out.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        out
    }

    #[test]
    fn zero_history_zero_weights_zero_encoding() {
        let (_, cfg, params) = fixture();
        let zeroed = zero_params_like(&params);
        let mut tape = Tape::new();
        let h = temporal_encode(&mut tape, &Tensor::zeros(&[HISTORY_STEPS, 2]), &zeroed, &cfg)
            .unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_encode_rejects_wrong_length() {
        let (_, cfg, params) = fixture();
        let mut tape = Tape::new();
        let err = temporal_encode(&mut tape, &Tensor::zeros(&[10, 2]), &params, &cfg).unwrap_err();
        assert!(matches!(err, CdsError::Contract(_)));
    }

    #[test]
    fn temporal_encode_is_sensitive_to_early_steps() {
        let (scene, cfg, params) = fixture();
        let mut other = scene.target_history.clone();
        other.set(1, 0, other.get(1, 0) + 1.0);
        let mut tape = Tape::new();
        let a = temporal_encode(&mut tape, &scene.target_history, &params, &cfg).unwrap();
        let b = temporal_encode(&mut tape, &other, &params, &cfg).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-9);
    }

    #[test]
    fn temporal_encode_gradchecks_through_unroll() {
        let (scene, cfg, mut params) = fixture();
        let history = scene.target_history.clone();
        let worst = finite_diff_gradcheck(
            &move |p, tape| {
                let h = temporal_encode(tape, &history, p, &cfg)?;
                let sq = tape.mul(h, h)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    fn latent_const(tape: &mut Tape, scene: &Scene, cfg: &Config, seed: u64) -> Val {
        let mut t = Tensor::randn(&[scene.n_max(), cfg.latent_dim], 1.0, &mut Rng::seed_from(seed));
        for (i, &active) in scene.neighbor_mask.iter().enumerate() {
            if !active {
                for j in 0..cfg.latent_dim {
                    t.set(i, j, 0.0);
                }
            }
        }
        tape.constant(t)
    }

    #[test]
    fn all_masked_scene_encodes_to_zero_matrix() {
        let (mut scene, cfg, params) = fixture();
        scene.neighbor_mask = vec![false; scene.n_max()];
        for v in scene.neighbor_histories.data_mut() {
            *v = 0.0;
        }
        for v in scene.neighbor_futures.data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let latent = tape.constant(Tensor::zeros(&[scene.n_max(), cfg.latent_dim]));
        let enc = encode_neighbors(&mut tape, &scene, latent, &params, &cfg).unwrap();
        assert!(tape.value(enc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_slots_permutes_rows() {
        let (scene, cfg, params) = fixture();
        // Build a two-neighbor scene by duplicating the leader shifted.
        let mut scene2 = scene.clone();
        scene2.neighbor_mask[1] = true;
        for t in 0..HISTORY_STEPS {
            let base = (HISTORY_STEPS + t) * 2;
            scene2.neighbor_histories.data_mut()[base] = scene.neighbor_histories.data()[t * 2] + 4.0;
            scene2.neighbor_histories.data_mut()[base + 1] =
                scene.neighbor_histories.data()[t * 2 + 1] + 1.0;
        }
        for t in 0..crate::data::FUTURE_STEPS {
            let base = (crate::data::FUTURE_STEPS + t) * 2;
            scene2.neighbor_futures.data_mut()[base] = scene.neighbor_futures.data()[t * 2] + 4.0;
            scene2.neighbor_futures.data_mut()[base + 1] =
                scene.neighbor_futures.data()[t * 2 + 1] + 1.0;
        }

        let mut swapped = scene2.clone();
        swapped.neighbor_mask.swap(0, 1);
        let h = HISTORY_STEPS * 2;
        let f = crate::data::FUTURE_STEPS * 2;
        for k in 0..h {
            swapped.neighbor_histories.data_mut().swap(k, h + k);
        }
        for k in 0..f {
            swapped.neighbor_futures.data_mut().swap(k, f + k);
        }

        let mut tape = Tape::new();
        let latent = latent_const(&mut tape, &scene2, &cfg, 3);
        let latent_rows = tape.value(latent).clone();
        let enc = encode_neighbors(&mut tape, &scene2, latent, &params, &cfg).unwrap();
        let enc_vals = tape.value(enc).clone();

        let mut swapped_latent_t = latent_rows.clone();
        for j in 0..cfg.latent_dim {
            let a = swapped_latent_t.get(0, j);
            let b = swapped_latent_t.get(1, j);
            swapped_latent_t.set(0, j, b);
            swapped_latent_t.set(1, j, a);
        }
        let mut tape2 = Tape::new();
        let latent2 = tape2.constant(swapped_latent_t);
        let enc2 = encode_neighbors(&mut tape2, &swapped, latent2, &params, &cfg).unwrap();
        let enc2_vals = tape2.value(enc2).clone();

        for j in 0..cfg.hidden_dim {
            assert!((enc_vals.get(0, j) - enc2_vals.get(1, j)).abs() < 1e-12);
            assert!((enc_vals.get(1, j) - enc2_vals.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_neighbors_gradchecks() {
        let (scene, cfg, mut params) = fixture();
        let worst = finite_diff_gradcheck(
            &|p, tape| {
                let latent = latent_const(tape, &scene, &cfg, 5);
                let enc = encode_neighbors(tape, &scene, latent, p, &cfg)?;
                let sq = tape.mul(enc, enc)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    fn attention_fixture(
        cfg: &Config,
        mask: Vec<bool>,
        seed: u64,
    ) -> (Tensor, Tensor) {
        let mut rng = Rng::seed_from(seed);
        let target = Tensor::randn(&[1, cfg.hidden_dim], 1.0, &mut rng);
        let mut nb = Tensor::randn(&[mask.len(), cfg.hidden_dim], 1.0, &mut rng);
        for (i, &active) in mask.iter().enumerate() {
            if !active {
                for j in 0..cfg.hidden_dim {
                    nb.set(i, j, 0.0);
                }
            }
        }
        (target, nb)
    }

    #[test]
    fn single_unmasked_neighbor_gets_weight_one() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 1).unwrap();
        let mask = vec![false, true, false];
        let (target, nb) = attention_fixture(&cfg, mask.clone(), 4);
        let mut tape = Tape::new();
        let t = tape.constant(target);
        let n = tape.constant(nb);
        let (_, weights) = spatial_attention(&mut tape, t, n, &mask, &params, &cfg).unwrap();
        for w in &weights {
            assert_eq!(w.get(0, 0), 0.0);
            assert_eq!(w.get(0, 1), 1.0);
            assert_eq!(w.get(0, 2), 0.0);
        }
    }

    #[test]
    fn identical_neighbors_share_weight() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 1).unwrap();
        let mask = vec![true, true, false];
        let (target, mut nb) = attention_fixture(&cfg, mask.clone(), 4);
        for j in 0..cfg.hidden_dim {
            let v = nb.get(0, j);
            nb.set(1, j, v);
        }
        let mut tape = Tape::new();
        let t = tape.constant(target);
        let n = tape.constant(nb);
        let (_, weights) = spatial_attention(&mut tape, t, n, &mask, &params, &cfg).unwrap();
        for w in &weights {
            assert!((w.get(0, 0) - 0.5).abs() < 1e-12);
            assert!((w.get(0, 1) - 0.5).abs() < 1e-12);
            assert_eq!(w.get(0, 2), 0.0);
        }
    }

    #[test]
    fn attention_is_permutation_invariant() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 2).unwrap();
        let mask = vec![true, true, true];
        let (target, nb) = attention_fixture(&cfg, mask.clone(), 9);

        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let n = tape.constant(nb.clone());
        let (ups, w) = spatial_attention(&mut tape, t, n, &mask, &params, &cfg).unwrap();
        let ups_vals = tape.value(ups).clone();

        // Rotate the slots by one.
        let perm = [2usize, 0, 1];
        let mut nb_perm = Tensor::zeros(&[3, cfg.hidden_dim]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..cfg.hidden_dim {
                nb_perm.set(dst, j, nb.get(src, j));
            }
        }
        let mut tape2 = Tape::new();
        let t2 = tape2.constant(target);
        let n2 = tape2.constant(nb_perm);
        let (ups2, w2) = spatial_attention(&mut tape2, t2, n2, &mask, &params, &cfg).unwrap();
        assert!(ups_vals.max_abs_diff(tape2.value(ups2)) < 1e-12);
        for (wa, wb) in w.iter().zip(&w2) {
            for (dst, &src) in perm.iter().enumerate() {
                assert!((wa.get(0, src) - wb.get(0, dst)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 3).unwrap();
        for seed in 0..50u64 {
            let mask = vec![seed % 2 == 0, true, seed % 3 == 0];
            let (target, nb) = attention_fixture(&cfg, mask.clone(), seed);
            let mut tape = Tape::new();
            let t = tape.constant(target);
            let n = tape.constant(nb);
            let (_, weights) = spatial_attention(&mut tape, t, n, &mask, &params, &cfg).unwrap();
            for w in &weights {
                let sum: f64 = w.data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for (i, &active) in mask.iter().enumerate() {
                    if !active {
                        assert_eq!(w.get(0, i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn all_masked_attention_returns_zero_and_empty() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 3).unwrap();
        let mask = vec![false, false, false];
        let (target, nb) = attention_fixture(&cfg, mask.clone(), 8);
        let mut tape = Tape::new();
        let t = tape.constant(target);
        let n = tape.constant(nb);
        let (ups, weights) = spatial_attention(&mut tape, t, n, &mask, &params, &cfg).unwrap();
        assert!(tape.value(ups).data().iter().all(|&v| v == 0.0));
        assert!(weights.is_empty());
    }

    #[test]
    fn fusion_outputs_stay_in_unit_interval() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 6).unwrap();
        for seed in 0..20u64 {
            let ups = Tensor::randn(&[1, cfg.hidden_dim], 3.0, &mut Rng::seed_from(seed));
            let mut tape = Tape::new();
            let u = tape.constant(ups);
            let s = gated_fusion(&mut tape, u, &params).unwrap();
            for &v in tape.value(s).data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }

        // σ(0)·σ(0) = 0.25 with all-zero parameters.
        let zeroed = zero_params_like(&params);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[1, cfg.hidden_dim]));
        let s = gated_fusion(&mut tape, u, &zeroed).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_gradchecks() {
        let cfg = tiny_cfg();
        let mut params = crate::model::init_params(&cfg, 6).unwrap();
        let ups = Tensor::randn(&[1, cfg.hidden_dim], 1.0, &mut Rng::seed_from(2));
        let worst = finite_diff_gradcheck(
            &move |p, tape| {
                let u = tape.constant(ups.clone());
                let s = gated_fusion(tape, u, p)?;
                let sq = tape.mul(s, s)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn encode_scene_handles_no_neighbors_and_is_pure() {
        let cfg = tiny_cfg();
        let params = crate::model::init_params(&cfg, 4).unwrap();
        let scene = gen_synthetic_with(
            SynthKind::ConstantVelocity,
            1,
            3,
            SynthParams {
                n_max: cfg.n_max,
                ..Default::default()
            },
        )
        .unwrap()
        .remove(0);
        let run = || {
            let mut tape = Tape::new();
            let latent = tape.constant(Tensor::zeros(&[scene.n_max(), cfg.latent_dim]));
            let enc = encode_scene(&mut tape, &scene, latent, &params, &cfg).unwrap();
            (
                tape.value(enc.context).clone(),
                tape.value(enc.fused).clone(),
                enc.attn.len(),
            )
        };
        let (ctx_a, fused_a, attn_len) = run();
        let (ctx_b, fused_b, _) = run();
        assert!(ctx_a.all_finite());
        assert_eq!(attn_len, 0);
        assert_eq!(ctx_a, ctx_b);
        assert_eq!(fused_a, fused_b);
    }

    #[test]
    fn encode_scene_gradchecks_end_to_end() {
        let (scene, cfg, mut params) = fixture();
        let worst = finite_diff_gradcheck(
            &|p, tape| {
                let latent = latent_const(tape, &scene, &cfg, 7);
                let enc = encode_scene(tape, &scene, latent, p, &cfg)?;
                let sq = tape.mul(enc.context, enc.context)?;
                Ok(tape.mean(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
