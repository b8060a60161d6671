//! Synthetic single-agent junction scenes with known mode structure.
//!
//! A scene is generated in the agent-centric frame: the last history point is
//! the origin and the agent heads along `+x`. The junction offers up to three
//! branches (straight, left, right); the agent picks one of the available
//! branches or stops. The choice is hidden, so futures are multimodal given the
//! observed history and map features.

mod dataset;
mod generate;

use serde::{Deserialize, Serialize};

pub use dataset::{
    config_hash, generate_dataset, load_dataset, write_dataset, DatasetHeader, Split, SplitManifest,
    DATASET_FORMAT, DATASET_VERSION,
};
pub use generate::{generate_scene, normalize, to_world, RawScene};

use crate::error::{FlowsError, Result};

/// Number of entries in [`SceneSample::map_features`].
pub const MAP_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    Left,
    Right,
    Stop,
}

impl Maneuver {
    pub const ALL: [Maneuver; 4] = [Maneuver::Straight, Maneuver::Left, Maneuver::Right, Maneuver::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::Straight => "straight",
            Maneuver::Left => "left",
            Maneuver::Right => "right",
            Maneuver::Stop => "stop",
        }
    }
}

/// Scene-complexity label derived from the number of available branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityBucket {
    Sparse,
    Medium,
    Dense,
}

impl DensityBucket {
    pub const ALL: [DensityBucket; 3] = [DensityBucket::Sparse, DensityBucket::Medium, DensityBucket::Dense];

    pub fn from_branch_count(n: usize) -> Self {
        match n {
            0 | 1 => DensityBucket::Sparse,
            2 => DensityBucket::Medium,
            _ => DensityBucket::Dense,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DensityBucket::Sparse => "sparse",
            DensityBucket::Medium => "medium",
            DensityBucket::Dense => "dense",
        }
    }
}

/// Planar waypoints in scene units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(FlowsError::Shape(format!(
                "a trajectory needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FlowsError::NonFinite {
                name: "trajectory".into(),
                message: "waypoint coordinate".into(),
            });
        }
        Ok(Trajectory { waypoints })
    }

    pub fn zeros(len: usize) -> Self {
        Trajectory {
            waypoints: vec![[0.0; 2]; len],
        }
    }

    /// Row-major `[x0, y0, x1, y1, ..]`.
    pub fn from_flat(flat: &[f64]) -> Self {
        Trajectory {
            waypoints: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn endpoint(&self) -> [f64; 2] {
        *self.waypoints.last().expect("non-empty trajectory")
    }
}

/// One training / evaluation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene_id: String,
    /// `H` points ending at the origin.
    pub history: Vec<[f64; 2]>,
    /// See [`MAP_FEATURES`]: branch flags (straight, left, right), branch angles
    /// in radians (0 when unavailable), lane offset, branch count / 3.
    pub map_features: Vec<f64>,
    pub future: Trajectory,
    pub maneuver: Maneuver,
    pub density_bucket: DensityBucket,
}

impl SceneSample {
    /// Flattened history followed by the map features: the encoder input.
    pub fn encoder_input(&self) -> Vec<f64> {
        self.history
            .iter()
            .flat_map(|p| [p[0], p[1]])
            .chain(self.map_features.iter().copied())
            .collect()
    }

    pub fn branch_available(&self, m: Maneuver) -> bool {
        match m {
            Maneuver::Stop => true,
            other => self.map_features[other.index()] > 0.5,
        }
    }

    /// Mean speed over the observed history, in scene units per step.
    pub fn history_speed(&self) -> f64 {
        let h = &self.history;
        if h.len() < 2 {
            return 0.0;
        }
        let total: f64 = h
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum();
        total / (h.len() - 1) as f64
    }
}

/// Generator settings. Angles are in degrees, lengths in scene units
/// (one lane width = 1 unit), speeds in units per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub horizon: usize,
    pub history_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_angle_min_deg: f64,
    pub turn_angle_max_deg: f64,
    pub straight_bend_max_deg: f64,
    /// Stopping time as a fraction of the horizon.
    pub stop_frac_min: f64,
    pub stop_frac_max: f64,
    /// Probability that a straight or turning agent ends one lane over.
    pub lane_change_prob: f64,
    pub lane_change_shift: f64,
    /// Mean lateral lane offset of left (+) and right (-) turners.
    pub lane_offset_hint: f64,
    pub lane_offset_noise: f64,
    /// Relative speed excess at the start of the history of stopping agents.
    pub stop_history_decel: f64,
    pub waypoint_noise: f64,
    /// Straight, left, right, stop.
    pub maneuver_probs: [f64; 4],
    /// Straight, left, right.
    pub branch_avail_probs: [f64; 3],
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            horizon: 16,
            history_len: 5,
            speed_min: 0.3,
            speed_max: 0.6,
            turn_angle_min_deg: 60.0,
            turn_angle_max_deg: 100.0,
            straight_bend_max_deg: 10.0,
            stop_frac_min: 0.5,
            stop_frac_max: 0.75,
            lane_change_prob: 0.1,
            lane_change_shift: 1.0,
            lane_offset_hint: 0.3,
            lane_offset_noise: 0.1,
            stop_history_decel: 0.2,
            waypoint_noise: 0.03,
            maneuver_probs: [0.4, 0.25, 0.25, 0.1],
            branch_avail_probs: [0.85, 0.6, 0.6],
            train_size: 8000,
            val_size: 1000,
            test_size: 1000,
            seed: 42,
        }
    }
}

fn check_simplex(key: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FlowsError::config(key, "entries must be finite and non-negative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(FlowsError::config(key, format!("entries sum to {s}, expected 1")));
    }
    Ok(())
}

fn check_prob(key: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FlowsError::config(key, format!("{p} is not a probability")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(FlowsError::config("horizon", "must be at least 2"));
        }
        if self.history_len < 2 {
            return Err(FlowsError::config("history_len", "must be at least 2"));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(FlowsError::config("speed_min", "need 0 < speed_min <= speed_max"));
        }
        if !(self.turn_angle_min_deg >= 0.0 && self.turn_angle_min_deg <= self.turn_angle_max_deg) {
            return Err(FlowsError::config("turn_angle_min_deg", "need 0 <= min <= max"));
        }
        if self.straight_bend_max_deg < 0.0 {
            return Err(FlowsError::config("straight_bend_max_deg", "must be >= 0"));
        }
        if !(self.stop_frac_min > 0.0 && self.stop_frac_min <= self.stop_frac_max) {
            return Err(FlowsError::config("stop_frac_min", "need 0 < min <= max"));
        }
        check_prob("lane_change_prob", self.lane_change_prob)?;
        for (key, v) in [
            ("waypoint_noise", self.waypoint_noise),
            ("lane_offset_noise", self.lane_offset_noise),
            ("stop_history_decel", self.stop_history_decel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FlowsError::config(key, "must be finite and >= 0"));
            }
        }
        check_simplex("maneuver_probs", &self.maneuver_probs)?;
        for p in self.branch_avail_probs {
            check_prob("branch_avail_probs", p)?;
        }
        if self.branch_avail_probs.iter().all(|&p| p == 0.0) {
            return Err(FlowsError::config("branch_avail_probs", "at least one branch must be possible"));
        }
        // Some branch with positive availability must have positive maneuver mass,
        // or stopping must be possible.
        let reachable = self.maneuver_probs[3] > 0.0
            || (0..3).any(|i| self.branch_avail_probs[i] > 0.0 && self.maneuver_probs[i] > 0.0);
        if !reachable {
            return Err(FlowsError::config("maneuver_probs", "no maneuver can ever be sampled"));
        }
        for (key, n) in [
            ("train_size", self.train_size),
            ("val_size", self.val_size),
            ("test_size", self.test_size),
        ] {
            if n == 0 {
                return Err(FlowsError::config(key, "split sizes must be > 0"));
            }
        }
        Ok(())
    }

    pub fn encoder_input_len(&self) -> usize {
        self.history_len * 2 + MAP_FEATURES
    }
}
