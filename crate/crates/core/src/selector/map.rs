//! Confidence-ranked average precision over behaviour buckets.
//!
//! Each scene has one ground-truth future. Within a scene, hypotheses are
//! visited by descending confidence: those before the first endpoint match are
//! false positives, the first match is the true positive and later hypotheses
//! are ignored. A scene without a match contributes all hypotheses as false
//! positives. The soft variant additionally lets each later matching
//! hypothesis `j` add `conf_j / conf_tp` to both the precision numerator and
//! denominator; recall counts true positives only.

use serde::{Deserialize, Serialize};

use super::nms::confidence_order;

/// Endpoint errors of one scene's kept hypotheses at each evaluated horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub bucket: usize,
    pub confidence: Vec<f64>,
    /// `[horizon][hypothesis]`.
    pub endpoint_errors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Tp,
    Fp,
    Credit(f64),
}

/// Average precision of one bucket at one horizon.
///
/// `matched[s][k]` says whether hypothesis `k` of scene `s` is within the miss threshold.
pub fn average_precision(confidence: &[&[f64]], matched: &[Vec<bool>], soft: bool) -> f64 {
    let gt = confidence.len();
    if gt == 0 {
        return 0.0;
    }
    // (confidence, scene, rank within scene, kind)
    let mut dets: Vec<(f64, usize, usize, Kind)> = Vec::new();
    for (s, (conf, m)) in confidence.iter().zip(matched).enumerate() {
        let order = confidence_order(conf);
        let tp = order.iter().position(|&k| m[k]);
        for (rank, &k) in order.iter().enumerate() {
            let kind = match tp {
                None => Kind::Fp,
                Some(t) if rank < t => Kind::Fp,
                Some(t) if rank == t => Kind::Tp,
                Some(t) if soft && m[k] => Kind::Credit(conf[k] / conf[order[t]]),
                Some(_) => continue,
            };
            dets.push((conf[k], s, rank, kind));
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let (mut tp, mut fp, mut credit) = (0.0, 0.0, 0.0);
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (_, _, _, kind) in dets {
        match kind {
            Kind::Tp => {
                tp += 1.0;
                curve.push((tp / gt as f64, (tp + credit) / (tp + fp + credit)));
            }
            Kind::Fp => fp += 1.0,
            Kind::Credit(c) => credit += c,
        }
    }
    // interpolated envelope: precision at recall r is the best precision at any recall >= r
    let mut ap = 0.0;
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for (i, &(_, p)) in curve.iter().enumerate().rev() {
        running = running.max(p);
        envelope[i] = running;
    }
    let mut last_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - last_recall) * envelope[i];
        last_recall = r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub soft_map: f64,
    /// Per bucket, averaged over horizons; `None` for empty buckets.
    pub per_bucket: Vec<Option<(f64, f64)>>,
}

/// Mean AP over non-empty buckets and all horizons.
pub fn map_metric(scenes: &[SceneDetections], buckets: usize, miss_threshold: f64) -> MapResult {
    let horizons = scenes.first().map(|s| s.endpoint_errors.len()).unwrap_or(0);
    let mut per_bucket = Vec::with_capacity(buckets);
    let (mut sum, mut soft_sum, mut used) = (0.0, 0.0, 0usize);
    for b in 0..buckets {
        let members: Vec<&SceneDetections> = scenes.iter().filter(|s| s.bucket == b).collect();
        if members.is_empty() || horizons == 0 {
            log::warn!("bucket {b} has no scenes and is left out of the mean");
            per_bucket.push(None);
            continue;
        }
        let conf: Vec<&[f64]> = members.iter().map(|s| s.confidence.as_slice()).collect();
        let (mut ap, mut soft) = (0.0, 0.0);
        for h in 0..horizons {
            let matched: Vec<Vec<bool>> = members
                .iter()
                .map(|s| s.endpoint_errors[h].iter().map(|e| *e <= miss_threshold).collect())
                .collect();
            ap += average_precision(&conf, &matched, false);
            soft += average_precision(&conf, &matched, true);
        }
        ap /= horizons as f64;
        soft /= horizons as f64;
        sum += ap;
        soft_sum += soft;
        used += 1;
        per_bucket.push(Some((ap, soft)));
    }
    let n = used.max(1) as f64;
    MapResult {
        map: sum / n,
        soft_map: soft_sum / n,
        per_bucket,
    }
}
