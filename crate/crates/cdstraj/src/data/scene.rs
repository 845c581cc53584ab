use crate::data::{Scene, Trajectory, FUTURE_STEPS, HISTORY_STEPS, WINDOW_STEPS};
use crate::error::{CdsError, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Windows that could not be formed, for operator visibility.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipReport {
    /// Agents shorter than one full window.
    pub short_agents: usize,
    /// Candidate neighbors dropped for missing window coverage.
    pub partial_neighbors: usize,
    pub scenes_built: usize,
}

/// Slide a 41-step window (16 history + 25 future) over every agent with
/// full coverage and assemble one scene per placement.
///
/// Neighbors are the other agents present at the target's last history
/// frame within `radius_m`, nearest first, truncated to `n_max`. A
/// candidate must itself cover the whole window; partial tracks are
/// dropped and counted. All coordinates are translated so the target's
/// last history position is the origin.
pub fn build_scenes(
    trajs: &[Trajectory],
    radius_m: f64,
    n_max: usize,
) -> (Vec<Scene>, SkipReport) {
    let mut scenes = Vec::new();
    let mut report = SkipReport::default();

    for (ti, target) in trajs.iter().enumerate() {
        if target.points.len() < WINDOW_STEPS {
            report.short_agents += 1;
            continue;
        }
        for start in 0..=(target.points.len() - WINDOW_STEPS) {
            let window = &target.points[start..start + WINDOW_STEPS];
            let anchor = &window[HISTORY_STEPS - 1];
            let (ox, oy) = (anchor.x, anchor.y);
            let first_frame = window[0].frame;
            let last_frame = window[WINDOW_STEPS - 1].frame;

            // Candidate neighbors at the anchor frame, nearest first.
            let mut candidates: Vec<(f64, usize)> = Vec::new();
            for (ni, other) in trajs.iter().enumerate() {
                if ni == ti {
                    continue;
                }
                let at_anchor = match other.point_at_frame(anchor.frame) {
                    Some(p) => p,
                    None => continue,
                };
                let dist = ((at_anchor.x - ox).powi(2) + (at_anchor.y - oy).powi(2)).sqrt();
                if dist > radius_m {
                    continue;
                }
                let covers = other.point_at_frame(first_frame).is_some()
                    && other.point_at_frame(last_frame).is_some();
                if !covers {
                    report.partial_neighbors += 1;
                    continue;
                }
                candidates.push((dist, ni));
            }
            candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            candidates.truncate(n_max);

            let mut neighbor_histories = Tensor::zeros(&[n_max, HISTORY_STEPS, 2]);
            let mut neighbor_futures = Tensor::zeros(&[n_max, FUTURE_STEPS, 2]);
            let mut neighbor_mask = vec![false; n_max];
            for (slot, &(_, ni)) in candidates.iter().enumerate() {
                neighbor_mask[slot] = true;
                let other = &trajs[ni];
                for t in 0..WINDOW_STEPS {
                    let p = other
                        .point_at_frame(first_frame + t as i64)
                        .expect("coverage checked");
                    if t < HISTORY_STEPS {
                        let base = (slot * HISTORY_STEPS + t) * 2;
                        neighbor_histories.data_mut()[base] = p.x - ox;
                        neighbor_histories.data_mut()[base + 1] = p.y - oy;
                    } else {
                        let base = (slot * FUTURE_STEPS + (t - HISTORY_STEPS)) * 2;
                        neighbor_futures.data_mut()[base] = p.x - ox;
                        neighbor_futures.data_mut()[base + 1] = p.y - oy;
                    }
                }
            }

            let target_history = Tensor::new(
                vec![HISTORY_STEPS, 2],
                window[..HISTORY_STEPS]
                    .iter()
                    .flat_map(|p| [p.x - ox, p.y - oy])
                    .collect(),
            )
            .expect("history shape");
            let target_future = Tensor::new(
                vec![FUTURE_STEPS, 2],
                window[HISTORY_STEPS..]
                    .iter()
                    .flat_map(|p| [p.x - ox, p.y - oy])
                    .collect(),
            )
            .expect("future shape");

            scenes.push(Scene {
                scene_id: format!("{}:{}", target.agent_id, first_frame),
                origin: (ox, oy),
                target_history,
                neighbor_histories,
                neighbor_mask,
                target_future,
                neighbor_futures,
            });
            report.scenes_built += 1;
        }
    }
    (scenes, report)
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub seed: u64,
}

/// Seeded shuffle then partition. Val and test sizes round down; the
/// remainder goes to train.
pub fn split_dataset(
    scenes: Vec<Scene>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(CdsError::Config(format!(
            "split fractions ({ft}, {fv}, {fs}) must be positive and sum to 1"
        )));
    }
    let n = scenes.len();
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fs * n as f64).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    Rng::seed_from(seed).shuffle(&mut order);

    let mut shuffled: Vec<Option<Scene>> = scenes.into_iter().map(Some).collect();
    let take = |indices: &[usize], pool: &mut Vec<Option<Scene>>| -> Vec<Scene> {
        indices
            .iter()
            .map(|&i| pool[i].take().expect("index used once"))
            .collect()
    };
    let val = take(&order[..n_val], &mut shuffled);
    let test = take(&order[n_val..n_val + n_test], &mut shuffled);
    let train = take(&order[n_val + n_test..], &mut shuffled);
    Ok(DatasetSplit { train, val, test, seed })
}
