use rand::Rng;
use rand_distr::StandardNormal;

use super::{DensityBucket, Maneuver, SceneSample, ScenarioConfig, Trajectory, MAP_FEATURES};

/// A scene expressed in an arbitrary world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScene {
    pub history: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    /// Agent heading at the last history point, radians.
    pub heading: f64,
    pub map_features: Vec<f64>,
    pub maneuver: Maneuver,
    pub density_bucket: DensityBucket,
    pub scene_id: String,
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Position and heading after arc length `s` on a constant-curvature arc from
/// the origin heading `+x`.
fn arc(curvature: f64, s: f64) -> ([f64; 2], f64) {
    if curvature.abs() < 1e-12 {
        ([s, 0.0], 0.0)
    } else {
        let h = curvature * s;
        ([h.sin() / curvature, (1.0 - h.cos()) / curvature], h)
    }
}

/// Draws one scene in the agent-centric frame. `scene_id` is left empty.
///
/// Branch availability is redrawn until at least one branch exists and the
/// restricted maneuver mixture has positive mass, so every emitted scene is
/// feasible.
pub fn generate_scene<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> SceneSample {
    let (avail, weights) = loop {
        let avail: [bool; 3] = std::array::from_fn(|i| rng.gen::<f64>() < config.branch_avail_probs[i]);
        if !avail.iter().any(|&a| a) {
            continue;
        }
        let weights: [f64; 4] = std::array::from_fn(|m| {
            if m == 3 || avail[m] {
                config.maneuver_probs[m]
            } else {
                0.0
            }
        });
        if weights.iter().sum::<f64>() > 0.0 {
            break (avail, weights);
        }
    };
    let bend = uniform(rng, -config.straight_bend_max_deg, config.straight_bend_max_deg).to_radians();
    let left = uniform(rng, config.turn_angle_min_deg, config.turn_angle_max_deg).to_radians();
    let right = uniform(rng, config.turn_angle_min_deg, config.turn_angle_max_deg).to_radians();
    let speed = uniform(rng, config.speed_min, config.speed_max);

    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut maneuver = Maneuver::Stop;
    for m in Maneuver::ALL {
        let w = weights[m.index()];
        if w > 0.0 && u < w {
            maneuver = m;
            break;
        }
        u -= w;
    }
    let lane_change = rng.gen::<f64>() < config.lane_change_prob;
    let stop_frac = uniform(rng, config.stop_frac_min, config.stop_frac_max);
    let hint = match maneuver {
        Maneuver::Left => config.lane_offset_hint,
        Maneuver::Right => -config.lane_offset_hint,
        _ => 0.0,
    };
    let lane_offset = hint + config.lane_offset_noise * gauss(rng);

    let h = config.history_len;
    let span = (h - 1) as f64;
    let decel = if maneuver == Maneuver::Stop {
        config.stop_history_decel
    } else {
        0.0
    };
    let history: Vec<[f64; 2]> = (0..h)
        .map(|i| {
            let tau = i as f64 - span;
            let x = speed * tau - speed * decel * tau * tau / (2.0 * span);
            if i + 1 == h {
                [0.0, 0.0]
            } else {
                [x + config.waypoint_noise * gauss(rng), config.waypoint_noise * gauss(rng)]
            }
        })
        .collect();

    let t = config.horizon;
    let length = speed * t as f64;
    let (curvature, shift_sign) = match maneuver {
        Maneuver::Straight => (bend / length, 1.0),
        Maneuver::Left => (left / length, -1.0),
        Maneuver::Right => (-right / length, 1.0),
        Maneuver::Stop => (0.0, 0.0),
    };
    let stop_time = stop_frac * t as f64;
    let future: Vec<[f64; 2]> = (1..=t)
        .map(|n| {
            let tau = n as f64;
            let p = if maneuver == Maneuver::Stop {
                let s = if tau < stop_time {
                    speed * tau - speed * tau * tau / (2.0 * stop_time)
                } else {
                    speed * stop_time / 2.0
                };
                [s, 0.0]
            } else {
                let (p, heading) = arc(curvature, speed * tau);
                let offset = if lane_change {
                    shift_sign * config.lane_change_shift * smoothstep(tau / t as f64)
                } else {
                    0.0
                };
                [p[0] - offset * heading.sin(), p[1] + offset * heading.cos()]
            };
            [p[0] + config.waypoint_noise * gauss(rng), p[1] + config.waypoint_noise * gauss(rng)]
        })
        .collect();

    let n_branches = avail.iter().filter(|&&a| a).count();
    let mut map_features = vec![0.0; MAP_FEATURES];
    for i in 0..3 {
        map_features[i] = if avail[i] { 1.0 } else { 0.0 };
    }
    map_features[3] = if avail[0] { bend } else { 0.0 };
    map_features[4] = if avail[1] { left } else { 0.0 };
    map_features[5] = if avail[2] { right } else { 0.0 };
    map_features[6] = lane_offset;
    map_features[7] = n_branches as f64 / 3.0;

    SceneSample {
        scene_id: String::new(),
        history,
        map_features,
        future: Trajectory { waypoints: future },
        maneuver,
        density_bucket: DensityBucket::from_branch_count(n_branches),
    }
}

fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Places an agent-centric sample at world pose `(origin, heading)`.
pub fn to_world(sample: &SceneSample, origin: [f64; 2], heading: f64) -> RawScene {
    let place = |p: &[f64; 2]| {
        let r = rotate(*p, heading);
        [r[0] + origin[0], r[1] + origin[1]]
    };
    RawScene {
        history: sample.history.iter().map(place).collect(),
        future: sample.future.waypoints.iter().map(place).collect(),
        heading,
        map_features: sample.map_features.clone(),
        maneuver: sample.maneuver,
        density_bucket: sample.density_bucket,
        scene_id: sample.scene_id.clone(),
    }
}

/// Agent-centric normalization: the last history point moves to the origin and
/// the heading is rotated onto `+x`.
pub fn normalize(raw: &RawScene) -> SceneSample {
    let origin = *raw.history.last().expect("non-empty history");
    let local = |p: &[f64; 2]| rotate([p[0] - origin[0], p[1] - origin[1]], -raw.heading);
    SceneSample {
        scene_id: raw.scene_id.clone(),
        history: raw.history.iter().map(local).collect(),
        map_features: raw.map_features.clone(),
        future: Trajectory {
            waypoints: raw.future.iter().map(local).collect(),
        },
        maneuver: raw.maneuver,
        density_bucket: raw.density_bucket,
    }
}
