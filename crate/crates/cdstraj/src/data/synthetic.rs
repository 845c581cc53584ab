use crate::data::{build_scenes, Scene, TrackPoint, Trajectory, STEP_SECONDS, WINDOW_STEPS};
use crate::error::{CdsError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    ConstantVelocity,
    LaneChange,
    BrakingInteraction,
}

impl SynthKind {
    fn tag(self) -> &'static str {
        match self {
            SynthKind::ConstantVelocity => "cv",
            SynthKind::LaneChange => "lc",
            SynthKind::BrakingInteraction => "brk",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = CdsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" => Ok(SynthKind::ConstantVelocity),
            "lane_change" => Ok(SynthKind::LaneChange),
            "braking_interaction" => Ok(SynthKind::BrakingInteraction),
            other => Err(CdsError::Config(format!(
                "unknown scenario kind '{other}', expected constant_velocity|lane_change|braking_interaction"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub noise_std: f64,
    pub n_max: usize,
    pub radius_m: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            noise_std: 0.05,
            n_max: 8,
            radius_m: 30.0,
        }
    }
}

/// Deterministic synthetic scenes with the default noise level.
pub fn gen_synthetic(kind: SynthKind, count: usize, seed: u64) -> Result<Vec<Scene>> {
    gen_synthetic_with(kind, count, seed, SynthParams::default())
}

pub fn gen_synthetic_with(
    kind: SynthKind,
    count: usize,
    seed: u64,
    params: SynthParams,
) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(CdsError::Config("scene count must be at least 1".into()));
    }
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = Rng::derive(seed, i as u64);
        let (trajs, target_id) = match kind {
            SynthKind::ConstantVelocity => (vec![constant_velocity_track(&mut rng)], 0),
            SynthKind::LaneChange => (vec![lane_change_track(&mut rng)], 0),
            SynthKind::BrakingInteraction => {
                let setup = BrakingSetup::draw(&mut rng);
                (braking_pair(&mut rng, setup), 0)
            }
        };
        let trajs = add_noise(trajs, params.noise_std, &mut rng);
        let (mut built, _) = build_scenes(&trajs, params.radius_m, params.n_max);
        let mut scene = built
            .drain(..)
            .find(|s| s.scene_id.starts_with(&format!("{target_id}:")))
            .ok_or_else(|| CdsError::Contract("synthetic window did not assemble".into()))?;
        scene.scene_id = format!("{}:{}:{}", kind.tag(), seed, i);
        scenes.push(scene);
    }
    Ok(scenes)
}

fn track_from(positions: impl Iterator<Item = (f64, f64)>, agent_id: i64) -> Trajectory {
    Trajectory {
        agent_id,
        points: positions
            .enumerate()
            .map(|(f, (x, y))| TrackPoint {
                frame: f as i64,
                x,
                y,
            })
            .collect(),
    }
}

fn constant_velocity_track(rng: &mut Rng) -> Trajectory {
    // Highway convention: motion along +x, only the speed varies per scene.
    let speed = rng.uniform(5.0, 30.0);
    track_from(
        (0..WINDOW_STEPS).map(|k| {
            let t = k as f64 * STEP_SECONDS;
            (speed * t, 0.0)
        }),
        0,
    )
}

fn lane_change_track(rng: &mut Rng) -> Trajectory {
    let speed = rng.uniform(8.0, 20.0);
    let t_mid = rng.uniform(2.5, 5.5);
    let tau = 0.6;
    track_from(
        (0..WINDOW_STEPS).map(|k| {
            let t = k as f64 * STEP_SECONDS;
            let lateral = 3.5 / (1.0 + (-(t - t_mid) / tau).exp());
            (speed * t, lateral)
        }),
        0,
    )
}

/// Distance travelled by time `t` for a vehicle cruising at `v0` that
/// brakes at `onset` with `decel` down to `v_min`.
fn braked_distance(t: f64, v0: f64, onset: f64, decel: f64, v_min: f64) -> f64 {
    if t <= onset {
        return v0 * t;
    }
    let tau = t - onset;
    let t_floor = (v0 - v_min) / decel;
    if tau <= t_floor {
        v0 * t + (-decel) * tau * tau / 2.0
    } else {
        v0 * onset + (v0 * v0 - v_min * v_min) / (2.0 * decel) + v_min * (tau - t_floor)
    }
}

struct BrakingSetup {
    v0: f64,
    gap: f64,
    onset: f64,
}

impl BrakingSetup {
    fn draw(rng: &mut Rng) -> BrakingSetup {
        BrakingSetup {
            v0: rng.uniform(15.0, 25.0),
            gap: rng.uniform(12.0, 25.0),
            onset: rng.uniform(1.8, 2.8),
        }
    }
}

/// Leader brakes at 3 m/s² somewhere in the tail of the history window; the
/// follower (the target, agent 0) reacts 1.2 s later with a harder 4.5 m/s²
/// stop. The reaction always falls at or after the last observed step, so
/// the follower's history alone never reveals when braking starts — only
/// the leader's track does.
fn braking_pair(_rng: &mut Rng, setup: BrakingSetup) -> Vec<Trajectory> {
    let BrakingSetup { v0, gap, onset } = setup;
    let follower_onset = onset + 1.2;
    let leader = track_from(
        (0..WINDOW_STEPS).map(|k| {
            let t = k as f64 * STEP_SECONDS;
            (gap + braked_distance(t, v0, onset, 3.0, 2.0), 0.0)
        }),
        1,
    );
    let follower = track_from(
        (0..WINDOW_STEPS).map(|k| {
            let t = k as f64 * STEP_SECONDS;
            (braked_distance(t, v0, follower_onset, 4.5, 2.0), 0.0)
        }),
        0,
    );
    vec![follower, leader]
}

fn add_noise(mut trajs: Vec<Trajectory>, std: f64, rng: &mut Rng) -> Vec<Trajectory> {
    if std > 0.0 {
        for traj in &mut trajs {
            for p in &mut traj.points {
                p.x += std * rng.normal();
                p.y += std * rng.normal();
            }
        }
    }
    trajs
}
