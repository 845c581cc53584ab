//! Trajectory ingestion, synthetic scenario generation, and assembly of
//! fixed-window prediction scenes.

mod ingest;
mod scene;
mod synthetic;

pub use ingest::{ingest_csv, resample_5hz, CsvSchema, Units};
pub use scene::{build_scenes, split_dataset, DatasetSplit, SkipReport};
pub use synthetic::{gen_synthetic, gen_synthetic_with, SynthKind, SynthParams};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CdsError, Result};
use crate::numerics::Tensor;

/// Observed timesteps per scene (3 s of history at 5 Hz plus the frame at
/// the prediction time).
pub const HISTORY_STEPS: usize = 16;
/// Predicted timesteps per scene (5 s at 5 Hz).
pub const FUTURE_STEPS: usize = 25;
/// Full window length.
pub const WINDOW_STEPS: usize = HISTORY_STEPS + FUTURE_STEPS;
/// Seconds between steps at 5 Hz.
pub const STEP_SECONDS: f64 = 0.2;

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: i64,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    /// Frame range covered, assuming unit stride.
    pub fn first_frame(&self) -> i64 {
        self.points[0].frame
    }

    pub fn point_at_frame(&self, frame: i64) -> Option<&TrackPoint> {
        let first = self.first_frame();
        if frame < first {
            return None;
        }
        self.points.get((frame - first) as usize)
    }
}

/// One prediction instance: a target agent's 16-step history and 25-step
/// future plus up to `n_max` neighbor tracks, all translated so the target
/// sits at the origin at the last history step.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub origin: (f64, f64),
    /// 16×2.
    pub target_history: Tensor,
    /// n_max×16×2; masked slots all zero.
    pub neighbor_histories: Tensor,
    pub neighbor_mask: Vec<bool>,
    /// 25×2.
    pub target_future: Tensor,
    /// n_max×25×2; masked slots all zero.
    pub neighbor_futures: Tensor,
}

impl Scene {
    pub fn n_max(&self) -> usize {
        self.neighbor_mask.len()
    }

    pub fn n_active_neighbors(&self) -> usize {
        self.neighbor_mask.iter().filter(|&&m| m).count()
    }

    /// 16×2 history slab for neighbor slot `i`.
    pub fn neighbor_history(&self, i: usize) -> Tensor {
        let start = i * HISTORY_STEPS * 2;
        Tensor::new(
            vec![HISTORY_STEPS, 2],
            self.neighbor_histories.data()[start..start + HISTORY_STEPS * 2].to_vec(),
        )
        .expect("neighbor history slab")
    }

    /// 25×2 future slab for neighbor slot `i`.
    pub fn neighbor_future(&self, i: usize) -> Tensor {
        let start = i * FUTURE_STEPS * 2;
        Tensor::new(
            vec![FUTURE_STEPS, 2],
            self.neighbor_futures.data()[start..start + FUTURE_STEPS * 2].to_vec(),
        )
        .expect("neighbor future slab")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_max();
        if self.target_history.shape() != [HISTORY_STEPS, 2] {
            return Err(CdsError::Contract(format!(
                "scene {}: target history shape {:?}",
                self.scene_id,
                self.target_history.shape()
            )));
        }
        if self.target_future.shape() != [FUTURE_STEPS, 2] {
            return Err(CdsError::Contract(format!(
                "scene {}: target future shape {:?}",
                self.scene_id,
                self.target_future.shape()
            )));
        }
        if self.neighbor_histories.shape() != [n, HISTORY_STEPS, 2]
            || self.neighbor_futures.shape() != [n, FUTURE_STEPS, 2]
        {
            return Err(CdsError::Contract(format!(
                "scene {}: neighbor tensor shapes {:?} / {:?} for n_max {n}",
                self.scene_id,
                self.neighbor_histories.shape(),
                self.neighbor_futures.shape()
            )));
        }
        let last = &self.target_history.data()[(HISTORY_STEPS - 1) * 2..];
        if last[0].abs() > 1e-9 || last[1].abs() > 1e-9 {
            return Err(CdsError::Contract(format!(
                "scene {}: target not at origin after normalization ({}, {})",
                self.scene_id, last[0], last[1]
            )));
        }
        for (i, &active) in self.neighbor_mask.iter().enumerate() {
            if !active {
                let zero_h = self.neighbor_history(i).data().iter().all(|&v| v == 0.0);
                let zero_f = self.neighbor_future(i).data().iter().all(|&v| v == 0.0);
                if !zero_h || !zero_f {
                    return Err(CdsError::Contract(format!(
                        "scene {}: masked neighbor slot {i} is not zeroed",
                        self.scene_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Wire form: nested row-major arrays, one JSON object per line.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SceneRecord {
    scene_id: String,
    origin: (f64, f64),
    target_history: Vec<[f64; 2]>,
    neighbor_histories: Vec<Vec<[f64; 2]>>,
    neighbor_mask: Vec<bool>,
    target_future: Vec<[f64; 2]>,
    neighbor_futures: Vec<Vec<[f64; 2]>>,
}

fn tensor_to_pairs(t: &Tensor, rows: usize) -> Vec<[f64; 2]> {
    (0..rows).map(|i| [t.data()[i * 2], t.data()[i * 2 + 1]]).collect()
}

fn slab_to_pairs(t: &Tensor, slots: usize, rows: usize) -> Vec<Vec<[f64; 2]>> {
    (0..slots)
        .map(|s| {
            (0..rows)
                .map(|i| {
                    let base = (s * rows + i) * 2;
                    [t.data()[base], t.data()[base + 1]]
                })
                .collect()
        })
        .collect()
}

fn pairs_to_tensor(rows: &[[f64; 2]], want_rows: usize) -> Result<Tensor> {
    if rows.len() != want_rows {
        return Err(CdsError::Data(format!(
            "expected {want_rows} rows, got {}",
            rows.len()
        )));
    }
    Tensor::new(vec![want_rows, 2], rows.iter().flatten().copied().collect())
}

fn pairs_to_slab(slots: &[Vec<[f64; 2]>], want_rows: usize) -> Result<Tensor> {
    let n = slots.len();
    let mut data = Vec::with_capacity(n * want_rows * 2);
    for rows in slots {
        if rows.len() != want_rows {
            return Err(CdsError::Data(format!(
                "expected {want_rows} rows per neighbor slot, got {}",
                rows.len()
            )));
        }
        data.extend(rows.iter().flatten());
    }
    Tensor::new(vec![n, want_rows, 2], data)
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id.clone(),
            origin: s.origin,
            target_history: tensor_to_pairs(&s.target_history, HISTORY_STEPS),
            neighbor_histories: slab_to_pairs(&s.neighbor_histories, s.n_max(), HISTORY_STEPS),
            neighbor_mask: s.neighbor_mask.clone(),
            target_future: tensor_to_pairs(&s.target_future, FUTURE_STEPS),
            neighbor_futures: slab_to_pairs(&s.neighbor_futures, s.n_max(), FUTURE_STEPS),
        }
    }
}

impl SceneRecord {
    fn into_scene(self) -> Result<Scene> {
        if self.neighbor_mask.len() != self.neighbor_histories.len()
            || self.neighbor_mask.len() != self.neighbor_futures.len()
        {
            return Err(CdsError::Data(format!(
                "scene {}: mask length {} disagrees with neighbor slots",
                self.scene_id,
                self.neighbor_mask.len()
            )));
        }
        let scene = Scene {
            scene_id: self.scene_id,
            origin: self.origin,
            target_history: pairs_to_tensor(&self.target_history, HISTORY_STEPS)?,
            neighbor_histories: pairs_to_slab(&self.neighbor_histories, HISTORY_STEPS)?,
            neighbor_mask: self.neighbor_mask,
            target_future: pairs_to_tensor(&self.target_future, FUTURE_STEPS)?,
            neighbor_futures: pairs_to_slab(&self.neighbor_futures, FUTURE_STEPS)?,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Write scenes as newline-delimited JSON.
pub fn write_scenes(path: &std::path::Path, scenes: &[Scene]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for scene in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from(scene))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenes(path: &std::path::Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    let mut scenes = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| {
            CdsError::Data(format!("scene file line {}: {e}", lineno + 1))
        })?;
        scenes.push(record.into_scene()?);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_roundtrips_through_jsonl() {
        let scenes = gen_synthetic(SynthKind::BrakingInteraction, 3, 7).unwrap();
        let path = std::env::temp_dir().join(format!("cdstraj-scenes-{}.jsonl", std::process::id()));
        write_scenes(&path, &scenes).unwrap();
        let back = read_scenes(&path).unwrap();
        assert_eq!(scenes, back);
        std::fs::remove_file(&path).ok();
    }
}
