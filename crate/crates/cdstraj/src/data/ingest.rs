use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::data::{TrackPoint, Trajectory, FEET_TO_METERS};
use crate::error::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Feet,
    Meters,
}

impl std::str::FromStr for Units {
    type Err = CdsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feet" => Ok(Units::Feet),
            "meters" => Ok(Units::Meters),
            other => Err(CdsError::Config(format!(
                "unknown units '{other}', expected feet|meters"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CsvSchema {
    pub units: Units,
}

const REQUIRED: [&str; 4] = ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"];

/// Parse a trajectory CSV into per-vehicle tracks in meters.
///
/// The header must name `Vehicle_ID`, `Frame_ID`, `Local_X` and `Local_Y`;
/// extra columns are ignored. Rows for a vehicle must appear with strictly
/// increasing frame numbers.
pub fn ingest_csv(path: &Path, schema: CsvSchema) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or_else(|| CdsError::Schema("empty file, expected a header row".into()))??;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut idx = [0usize; 4];
    for (slot, name) in REQUIRED.iter().enumerate() {
        idx[slot] = columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CdsError::Schema(format!("missing column {name}")))?;
    }
    let scale = match schema.units {
        Units::Feet => FEET_TO_METERS,
        Units::Meters => 1.0,
    };

    // BTreeMap keeps vehicle output order stable.
    let mut tracks: BTreeMap<i64, Vec<TrackPoint>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let field = |slot: usize| -> Result<&str> {
            fields.get(idx[slot]).copied().ok_or_else(|| {
                CdsError::Data(format!(
                    "line {}: too few fields for column {}",
                    lineno + 2,
                    REQUIRED[slot]
                ))
            })
        };
        let parse_err = |what: &str, v: &str| {
            CdsError::Data(format!("line {}: bad {what} value '{v}'", lineno + 2))
        };
        let vehicle: i64 = field(0)?
            .parse()
            .map_err(|_| parse_err("Vehicle_ID", field(0).unwrap()))?;
        let frame: i64 = field(1)?
            .parse()
            .map_err(|_| parse_err("Frame_ID", field(1).unwrap()))?;
        let x: f64 = field(2)?
            .parse()
            .map_err(|_| parse_err("Local_X", field(2).unwrap()))?;
        let y: f64 = field(3)?
            .parse()
            .map_err(|_| parse_err("Local_Y", field(3).unwrap()))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(CdsError::Data(format!(
                "line {}: non-finite coordinate for vehicle {vehicle}",
                lineno + 2
            )));
        }
        tracks.entry(vehicle).or_default().push(TrackPoint {
            frame,
            x: x * scale,
            y: y * scale,
        });
    }

    let mut out = Vec::with_capacity(tracks.len());
    for (agent_id, points) in tracks {
        for pair in points.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(CdsError::Data(format!(
                    "vehicle {agent_id}: frames not strictly increasing ({} then {})",
                    pair[0].frame, pair[1].frame
                )));
            }
        }
        out.push(Trajectory { agent_id, points });
    }
    Ok(out)
}

/// Decimate a uniform 10 Hz track to 5 Hz by keeping every second point,
/// starting at the first. New frame numbers are the original frames halved
/// (integer division), which keeps different vehicles on a shared clock.
pub fn resample_5hz(traj: &Trajectory) -> Result<Trajectory> {
    if traj.points.len() < 2 {
        return Err(CdsError::Data(format!(
            "vehicle {}: need at least 2 points to resample, got {}",
            traj.agent_id,
            traj.points.len()
        )));
    }
    let stride = traj.points[1].frame - traj.points[0].frame;
    for pair in traj.points.windows(2) {
        if pair[1].frame - pair[0].frame != stride {
            return Err(CdsError::Data(format!(
                "vehicle {}: non-uniform frame spacing around frame {}",
                traj.agent_id, pair[0].frame
            )));
        }
    }
    let points = traj
        .points
        .iter()
        .step_by(2)
        .map(|p| TrackPoint {
            frame: p.frame.div_euclid(2 * stride),
            x: p.x,
            y: p.y,
        })
        .collect();
    Ok(Trajectory {
        agent_id: traj.agent_id,
        points,
    })
}
