//! Run configuration: one flat TOML table holding every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::error::{FlowsError, Result};
use crate::flowfield::TokenMode;
use crate::prior::PriorWeights;
use crate::scenesynth::ScenarioConfig;
use crate::selector::ThresholdRule;

/// Training variants; they differ only in two switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learned prior and consistency training.
    Full,
    /// Learned prior, flow loss only.
    PriorOnly,
    /// Standard-normal base, consistency training.
    FieldOnly,
    /// Standard-normal base, flow loss only.
    GaussianBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::PriorOnly, Variant::FieldOnly, Variant::GaussianBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PriorOnly => "prior_only",
            Variant::FieldOnly => "field_only",
            Variant::GaussianBaseline => "gaussian_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FlowsError::config("variant", format!("unknown variant `{s}`")))
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Variant::Full | Variant::PriorOnly)
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, Variant::Full | Variant::FieldOnly)
    }

    /// Consistency-trained fields integrate with `d = 1/n`, the others with velocity steps.
    pub fn token_mode(self) -> TokenMode {
        if self.uses_consistency() {
            TokenMode::Step
        } else {
            TokenMode::Velocity
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // scenes
    pub horizon: usize,
    pub history_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_angle_min_deg: f64,
    pub turn_angle_max_deg: f64,
    pub straight_bend_max_deg: f64,
    pub stop_frac_min: f64,
    pub stop_frac_max: f64,
    pub lane_change_prob: f64,
    pub lane_change_shift: f64,
    pub lane_offset_hint: f64,
    pub lane_offset_noise: f64,
    pub stop_history_decel: f64,
    pub waypoint_noise: f64,
    pub maneuver_probs: [f64; 4],
    pub branch_avail_probs: [f64; 3],
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub data_seed: u64,

    // networks
    pub modes: usize,
    pub context_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub prior_width: usize,
    pub query_dim: usize,
    pub field_hidden: Vec<usize>,
    pub embed_freqs: usize,
    pub rank_hidden: usize,
    /// Typical trajectory extent in scene units; network outputs are multiplied by it.
    pub traj_scale: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub field_out_gain: f64,
    /// Parameterize the field through its predicted endpoint.
    pub field_endpoint: bool,
    pub symmetric_init: bool,

    // objective
    pub lambda_nll: f64,
    pub lambda_mix: f64,
    pub lambda_ent: f64,
    pub lambda_div: f64,
    /// Hinge margin in scene units.
    pub div_margin: f64,
    pub tau_mix: f64,
    pub lambda_flow: f64,
    pub lambda_cons: f64,
    pub lambda_rank: f64,
    /// Step tokens trained by the consistency loss; the teacher takes two half steps.
    pub cons_tokens: Vec<f64>,
    /// Share of the mixture NLL weight given to the losing modes.
    pub wta_relax: f64,
    /// Train the field only from the anchor closest to the ground truth.
    pub wta_modes: bool,
    pub tau_train: f64,
    pub tau_infer: f64,

    // optimization
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is held at `lr`, then decays along a cosine to
    /// `lr * lr_final_ratio` over the last `lr_decay_frac` of the steps.
    pub lr_final_ratio: f64,
    pub lr_decay_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,

    // evaluation
    pub keep: usize,
    pub nms_lo_m: f64,
    pub nms_hi_m: f64,
    pub meters_per_unit: f64,
    pub nms_speed_at_hi: f64,
    pub miss_threshold: f64,
    pub horizon_fractions: Vec<f64>,
    pub eval_seed: u64,
    pub probe_times: Vec<f64>,
    pub sweep_steps: Vec<usize>,
    pub ablate_seeds: Vec<u64>,

    // process
    pub out_dir: PathBuf,
    /// Worker threads for evaluation; 0 uses the library default.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        RunConfig {
            horizon: s.horizon,
            history_len: s.history_len,
            speed_min: s.speed_min,
            speed_max: s.speed_max,
            turn_angle_min_deg: s.turn_angle_min_deg,
            turn_angle_max_deg: s.turn_angle_max_deg,
            straight_bend_max_deg: s.straight_bend_max_deg,
            stop_frac_min: s.stop_frac_min,
            stop_frac_max: s.stop_frac_max,
            lane_change_prob: s.lane_change_prob,
            lane_change_shift: s.lane_change_shift,
            lane_offset_hint: s.lane_offset_hint,
            lane_offset_noise: s.lane_offset_noise,
            stop_history_decel: s.stop_history_decel,
            waypoint_noise: s.waypoint_noise,
            maneuver_probs: s.maneuver_probs,
            branch_avail_probs: s.branch_avail_probs,
            train_size: s.train_size,
            val_size: s.val_size,
            test_size: s.test_size,
            data_seed: s.seed,

            modes: 6,
            context_dim: 32,
            encoder_hidden: vec![64, 64],
            prior_width: 128,
            query_dim: 16,
            field_hidden: vec![128, 128],
            embed_freqs: 8,
            rank_hidden: 64,
            traj_scale: 4.0,
            log_sigma_min: -0.7,
            log_sigma_max: 1.0,
            field_out_gain: 0.1,
            field_endpoint: true,
            symmetric_init: false,

            lambda_nll: 1.0,
            lambda_mix: 0.5,
            lambda_ent: 0.01,
            lambda_div: 0.1,
            div_margin: 1.2,
            tau_mix: 1.0,
            lambda_flow: 1.0,
            lambda_cons: 6.0,
            lambda_rank: 1.0,
            cons_tokens: vec![0.0625, 0.125, 0.25, 0.375, 0.5, 0.75, 1.0],
            wta_relax: 0.05,
            wta_modes: true,
            tau_train: 1.0,
            tau_infer: 0.5,

            seed: 1,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            lr_final_ratio: 0.1,
            lr_decay_frac: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.99,
            grad_clip: 0.0,

            keep: 6,
            nms_lo_m: 2.5,
            nms_hi_m: 3.5,
            meters_per_unit: 3.7,
            nms_speed_at_hi: 0.6,
            miss_threshold: 0.5,
            horizon_fractions: vec![0.375, 0.625, 1.0],
            eval_seed: 7,
            probe_times: vec![0.0, 0.25, 0.5, 0.75],
            sweep_steps: vec![1, 2, 4, 8, 16],
            ablate_seeds: vec![1, 2, 3],

            out_dir: PathBuf::from("flows-out"),
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            FlowsError::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlowsError::io(format!("reading config {}", path.display()), e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `FLOWS_OUT` and `FLOWS_THREADS` override the output directory and thread count.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(out) = std::env::var("FLOWS_OUT") {
            self.out_dir = PathBuf::from(out);
        }
        if let Ok(t) = std::env::var("FLOWS_THREADS") {
            self.threads = t
                .parse()
                .map_err(|_| FlowsError::config("FLOWS_THREADS", format!("`{t}` is not a thread count")))?;
        }
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            horizon: self.horizon,
            history_len: self.history_len,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            turn_angle_min_deg: self.turn_angle_min_deg,
            turn_angle_max_deg: self.turn_angle_max_deg,
            straight_bend_max_deg: self.straight_bend_max_deg,
            stop_frac_min: self.stop_frac_min,
            stop_frac_max: self.stop_frac_max,
            lane_change_prob: self.lane_change_prob,
            lane_change_shift: self.lane_change_shift,
            lane_offset_hint: self.lane_offset_hint,
            lane_offset_noise: self.lane_offset_noise,
            stop_history_decel: self.stop_history_decel,
            waypoint_noise: self.waypoint_noise,
            maneuver_probs: self.maneuver_probs,
            branch_avail_probs: self.branch_avail_probs,
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
            seed: self.data_seed,
        }
    }

    /// Learning rate after `step` of `total` optimizer steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let start = total as f64 * (1.0 - self.lr_decay_frac);
        let span = (total as f64 - 1.0 - start).max(1.0);
        let frac = ((step as f64 - start) / span).clamp(0.0, 1.0);
        let r = self.lr_final_ratio;
        self.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn prior_weights(&self) -> PriorWeights {
        PriorWeights {
            nll: self.lambda_nll,
            mix: self.lambda_mix,
            ent: self.lambda_ent,
            div: self.lambda_div,
        }
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        ThresholdRule {
            lo_m: self.nms_lo_m,
            hi_m: self.nms_hi_m,
            meters_per_unit: self.meters_per_unit,
            speed_at_hi: self.nms_speed_at_hi,
        }
    }

    /// Teacher token for a half step `d`: `d` itself when it is a trained
    /// token, otherwise the velocity token 0.
    pub fn teacher_token(&self, d: f64) -> f64 {
        if self.cons_tokens.iter().any(|&s| s == d) {
            d
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().validate()?;
        let positive = [
            ("modes", self.modes),
            ("context_dim", self.context_dim),
            ("prior_width", self.prior_width),
            ("query_dim", self.query_dim),
            ("embed_freqs", self.embed_freqs),
            ("rank_hidden", self.rank_hidden),
            ("batch_size", self.batch_size),
            ("keep", self.keep),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(FlowsError::config(key, "must be > 0"));
            }
        }
        if self.modes < 2 {
            return Err(FlowsError::config("modes", "need at least 2 modes"));
        }
        for (key, v) in [
            ("lambda_nll", self.lambda_nll),
            ("lambda_mix", self.lambda_mix),
            ("lambda_ent", self.lambda_ent),
            ("lambda_div", self.lambda_div),
            ("lambda_flow", self.lambda_flow),
            ("lambda_cons", self.lambda_cons),
            ("lambda_rank", self.lambda_rank),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FlowsError::config(key, "must be finite and >= 0"));
            }
        }
        for (key, v) in [
            ("div_margin", self.div_margin),
            ("tau_mix", self.tau_mix),
            ("tau_train", self.tau_train),
            ("tau_infer", self.tau_infer),
            ("traj_scale", self.traj_scale),
            ("lr", self.lr),
            ("miss_threshold", self.miss_threshold),
            ("meters_per_unit", self.meters_per_unit),
            ("nms_speed_at_hi", self.nms_speed_at_hi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowsError::config(key, "must be finite and > 0"));
            }
        }
        if !(self.nms_lo_m > 0.0 && self.nms_lo_m <= self.nms_hi_m) {
            return Err(FlowsError::config("nms_lo_m", "need 0 < nms_lo_m <= nms_hi_m"));
        }
        if !(self.log_sigma_min < self.log_sigma_max) {
            return Err(FlowsError::config("log_sigma_max", "must exceed log_sigma_min"));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(FlowsError::config("lr_final_ratio", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_frac) {
            return Err(FlowsError::config("lr_decay_frac", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.wta_relax) {
            return Err(FlowsError::config("wta_relax", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(FlowsError::config("ema_decay", "must lie in [0, 1)"));
        }
        if self.cons_tokens.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(FlowsError::config("cons_tokens", "tokens must lie in (0, 1]"));
        }
        if self.horizon_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(FlowsError::config("horizon_fractions", "fractions must lie in (0, 1]"));
        }
        if self.probe_times.iter().any(|&t| !(0.0..1.0).contains(&t)) {
            return Err(FlowsError::config("probe_times", "times must lie in [0, 1)"));
        }
        if self.sweep_steps.contains(&0) {
            return Err(FlowsError::config("sweep_steps", "step counts must be >= 1"));
        }
        if self.encoder_hidden.contains(&0) || self.field_hidden.contains(&0) {
            return Err(FlowsError::config("field_hidden", "layer widths must be > 0"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.out_dir.join("runs").join(format!("{}-seed{seed}", variant.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("epochs = 3\nmodes = 4\n").unwrap();
        assert_eq!((cfg.epochs, cfg.modes, cfg.horizon), (3, 4, 16));
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        match RunConfig::from_toml_str("epochz = 3\n") {
            Err(FlowsError::Config { key, .. }) => assert_eq!(key, "epochz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_mixture_names_the_key() {
        match RunConfig::from_toml_str("maneuver_probs = [0.5, 0.5, 0.5, 0.5]\n") {
            Err(FlowsError::Config { key, .. }) => assert_eq!(key, "maneuver_probs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variants_are_two_switches() {
        assert!(Variant::Full.uses_prior() && Variant::Full.uses_consistency());
        assert!(Variant::PriorOnly.uses_prior() && !Variant::PriorOnly.uses_consistency());
        assert!(!Variant::FieldOnly.uses_prior() && Variant::FieldOnly.uses_consistency());
        assert!(!Variant::GaussianBaseline.uses_prior() && !Variant::GaussianBaseline.uses_consistency());
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn teacher_tokens() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.teacher_token(0.5), 0.5);
        assert_eq!(cfg.teacher_token(0.0625), 0.0625);
        assert_eq!(cfg.teacher_token(0.03125), 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = RunConfig {
            lr_final_ratio: 0.1,
            lr_decay_frac: 0.5,
            ..RunConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 100), cfg.lr);
        assert_eq!(cfg.lr_at(50, 100), cfg.lr);
        assert!(cfg.lr_at(75, 100) < cfg.lr);
        assert!((cfg.lr_at(99, 100) - cfg.lr * 0.1).abs() < 1e-15);
        let flat = RunConfig {
            lr_final_ratio: 1.0,
            lr_decay_frac: 1.0,
            ..RunConfig::default()
        };
        assert_eq!(flat.lr_at(37, 100), flat.lr);
    }
}
