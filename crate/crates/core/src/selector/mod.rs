//! Candidate pruning and ranking, plus the evaluation metrics.

mod diagnostics;
mod map;
mod metrics;
mod nms;
mod rank;

use serde::{Deserialize, Serialize};

pub use diagnostics::{chi_mean, probe_row, transport_stats, HistogramBin, ProbeRow, TransportStats};
pub use map::{average_precision, map_metric, MapResult, SceneDetections};
pub use metrics::{
    ade, ade_upto, error_at, fde, horizon_errors, horizon_steps, min_ade, min_fde, miss, percentile, HorizonRow,
};
pub use nms::{adaptive_threshold, confidence_order, nms_indices, nms_select, CandidateSet, ThresholdRule};
pub use rank::{pl_rank_loss, pl_rank_loss_grad, quality_order, RankHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub name: String,
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// Mean AP over the maneuver buckets present in this group; absent when
    /// the group is itself a maneuver bucket with no scenes.
    pub ap: Option<f64>,
    pub soft_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub steps: usize,
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub soft_map: f64,
    pub per_maneuver: Vec<BucketMetrics>,
    pub per_density: Vec<BucketMetrics>,
    pub horizon: Vec<HorizonRow>,
    /// Field evaluations per scene, a hardware-free latency counter.
    pub field_evals_per_scene: usize,
    /// Anchor transport lengths; absent for variants without a prior.
    pub transport: Option<TransportStats>,
    /// Filled by a step sweep; empty for a single evaluation.
    pub step_sweep: Vec<SweepRow>,
}

/// Headline metrics at one integration step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub field_evals_per_scene: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub soft_map: f64,
}
