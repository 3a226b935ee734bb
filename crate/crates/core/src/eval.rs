//! Detection quality metrics: temporal IoU, average precision over
//! threshold grids, and the false-positive breakdown.
//!
//! Matching is greedy in score order: each prediction claims the unmatched
//! ground truth of its own class and video with the highest overlap, if
//! that overlap reaches the threshold. Score ties rank by (video id, start
//! time) so every metric is deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::data::{write_matrix, AnnotationSet, Prediction};
use crate::error::{Error, Result};

/// Intersection over union of two intervals given as (start, end) seconds;
/// zero when disjoint or degenerate.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Score-descending rank order with deterministic tie-breaking.
fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.start_s.partial_cmp(&b.start_s).expect("finite times"))
}

/// Ground-truth intervals grouped by (video, class), with match flags.
struct GtPools {
    intervals: BTreeMap<(String, String), Vec<(f64, f64)>>,
    matched: BTreeMap<(String, String), Vec<bool>>,
}

impl GtPools {
    fn build(annotations: &AnnotationSet) -> Self {
        let mut intervals: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for (video_id, video) in &annotations.videos {
            for inst in &video.instances {
                intervals
                    .entry((video_id.clone(), inst.label.clone()))
                    .or_default()
                    .push((inst.start_s, inst.end_s));
            }
        }
        let matched = intervals
            .iter()
            .map(|(k, v)| (k.clone(), vec![false; v.len()]))
            .collect();
        Self { intervals, matched }
    }

    /// Greedily matches one prediction: the unmatched ground truth of the
    /// same video and class with the highest overlap, provided it reaches
    /// `threshold`. Returns the claim's success.
    fn try_match(&mut self, p: &Prediction, threshold: f64) -> bool {
        let key = (p.video_id.clone(), p.label.clone());
        let Some(pool) = self.intervals.get(&key) else {
            return false;
        };
        let flags = self.matched.get_mut(&key).expect("pools share keys");
        let mut best: Option<(usize, f64)> = None;
        for (i, &gt) in pool.iter().enumerate() {
            if flags[i] {
                continue;
            }
            let ov = tiou((p.start_s, p.end_s), gt);
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((i, ov));
            }
        }
        match best {
            Some((i, ov)) if ov >= threshold => {
                flags[i] = true;
                true
            }
            _ => false,
        }
    }

    /// Best overlap of a prediction against every ground truth in its
    /// video, matched or not, regardless of class.
    fn best_overlap_any_class(&self, p: &Prediction) -> f64 {
        self.intervals
            .iter()
            .filter(|((video, _), _)| video == &p.video_id)
            .flat_map(|(_, pool)| pool.iter())
            .map(|&gt| tiou((p.start_s, p.end_s), gt))
            .fold(0.0, f64::max)
    }
}

/// Average precision of one class at one overlap threshold. Predictions of
/// other classes are ignored. Returns None when the class has no ground
/// truth (such classes are excluded from mAP).
pub fn average_precision(
    predictions: &[Prediction],
    annotations: &AnnotationSet,
    threshold: f64,
    class: &str,
) -> Option<f64> {
    let gt_count: usize = annotations
        .videos
        .values()
        .flat_map(|v| &v.instances)
        .filter(|i| i.label == class)
        .count();
    if gt_count == 0 {
        return None;
    }
    let mut ranked: Vec<&Prediction> = predictions.iter().filter(|p| p.label == class).collect();
    ranked.sort_by(|a, b| rank_order(a, b));

    let mut pools = GtPools::build(annotations);
    let mut tp_so_far = 0usize;
    let mut ap = 0.0;
    for (rank, p) in ranked.iter().enumerate() {
        if pools.try_match(p, threshold) {
            tp_so_far += 1;
            let precision = tp_so_far as f64 / (rank + 1) as f64;
            ap += precision / gt_count as f64;
        }
    }
    Some(ap)
}

/// Per-threshold mAP table plus the grid average.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Mean AP over evaluated classes, one entry per threshold.
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    /// AP per class (classes with ground truth only), one entry per
    /// threshold, keyed by label.
    pub per_class_ap: BTreeMap<String, Vec<f64>>,
}

/// Evaluates mAP over a threshold grid. Classes without any ground truth
/// are excluded from the mean.
pub fn map_report(
    predictions: &[Prediction],
    annotations: &AnnotationSet,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("mAP needs a nonempty threshold grid".into()));
    }
    if annotations.total_instances() == 0 {
        return Err(Error::InvalidConfig(
            "evaluation needs at least one ground-truth instance".into(),
        ));
    }
    let mut per_class_ap: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for class in &annotations.classes {
        let aps: Option<Vec<f64>> = thresholds
            .iter()
            .map(|&thr| average_precision(predictions, annotations, thr, class))
            .collect();
        if let Some(aps) = aps {
            per_class_ap.insert(class.clone(), aps);
        }
    }
    let evaluated = per_class_ap.len() as f64;
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|j| per_class_ap.values().map(|aps| aps[j]).sum::<f64>() / evaluated)
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map_per_threshold,
        average_map,
        per_class_ap,
    })
}

/// Outcome mix of the top-scoring predictions at one budget.
#[derive(Debug, Clone, Serialize)]
pub struct FpBudget {
    /// Budget as a multiple of the ground-truth count.
    pub multiple: usize,
    /// Predictions actually available at this budget.
    pub taken: usize,
    pub tp: f64,
    pub localization: f64,
    pub background: f64,
}

/// False-positive breakdown per prediction budget.
#[derive(Debug, Clone, Serialize)]
pub struct FpProfile {
    pub tiou_threshold: f64,
    pub gt_count: usize,
    pub rows: Vec<FpBudget>,
}

/// Classifies the top-(n * G) predictions for n = 1..=10, where G is the
/// total ground-truth count, into true positives, localization errors
/// (unmatched but overlapping some ground truth at tIoU >= 0.1, any class)
/// and background errors (best overlap below 0.1).
pub fn fp_profile(
    predictions: &[Prediction],
    annotations: &AnnotationSet,
    threshold: f64,
) -> Result<FpProfile> {
    let gt_count = annotations.total_instances();
    if gt_count == 0 {
        return Err(Error::InvalidConfig(
            "false-positive profile needs at least one ground-truth instance".into(),
        ));
    }
    let mut ranked: Vec<&Prediction> = predictions.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));

    // One greedy pass fixes each prediction's category: matching a prefix is
    // the prefix of matching the full list, so budgets can share it.
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Tp,
        Localization,
        Background,
    }
    let mut pools = GtPools::build(annotations);
    let kinds: Vec<Kind> = ranked
        .iter()
        .map(|p| {
            if pools.try_match(p, threshold) {
                Kind::Tp
            } else if pools.best_overlap_any_class(p) >= 0.1 {
                // Covers double detections and wrong-class overlaps alike;
                // the taxonomy has no separate bins for them.
                Kind::Localization
            } else {
                Kind::Background
            }
        })
        .collect();

    let rows = (1..=10)
        .map(|multiple| {
            let taken = (multiple * gt_count).min(ranked.len());
            let count = |kind: Kind| kinds[..taken].iter().filter(|&&k| k == kind).count();
            let frac = |n: usize| {
                if taken == 0 {
                    0.0
                } else {
                    n as f64 / taken as f64
                }
            };
            FpBudget {
                multiple,
                taken,
                tp: frac(count(Kind::Tp)),
                localization: frac(count(Kind::Localization)),
                background: frac(count(Kind::Background)),
            }
        })
        .collect();
    Ok(FpProfile {
        tiou_threshold: threshold,
        gt_count,
        rows,
    })
}

/// Cosine similarity of every pair of embedding rows; rows with zero norm
/// get zero similarity everywhere.
pub fn similarity_matrix(embedding: &Array2<f64>) -> Array2<f64> {
    let n = embedding.nrows();
    let norms: Vec<f64> = (0..n)
        .map(|i| embedding.row(i).dot(&embedding.row(i)).sqrt())
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            embedding.row(i).dot(&embedding.row(j)) / (norms[i] * norms[j])
        }
    })
}

/// Writes the pairwise similarity matrix of the given embedding in the
/// binary matrix format, for external plotting.
pub fn similarity_dump(path: &Path, embedding: &Array2<f64>) -> Result<()> {
    let sim = similarity_matrix(embedding).mapv(|v| v as f32);
    write_matrix(path, &sim)
}
