//! Decoding model outputs into scored detections.
//!
//! Each confident snippet proposes one candidate per binarization
//! threshold: the foreground run of its mask column that contains the
//! snippet itself, scored by class confidence times the mean mask value
//! over the run. The redundancy across snippets and thresholds is then
//! collapsed by SoftNMS.

use crate::config::{InferConfig, LossWeights};
use crate::data::Prediction;
use crate::eval::tiou;
use crate::losses::binarize_segments;
use crate::model::ScaleOutputs;

/// One decoded detection, with enough provenance to trace it back to the
/// snippet and threshold that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub video_id: String,
    /// Foreground class index.
    pub class: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    pub scale: usize,
    /// Snippet index at the source scale whose mask column was decoded.
    pub snippet: usize,
    /// Binarization threshold that produced the run.
    pub threshold: f64,
}

/// Decodes one scale's outputs. For every snippet whose best foreground
/// probability reaches `theta_c`, every threshold in `weights.thresholds`
/// binarizes that snippet's mask column; the foreground run containing the
/// snippet becomes a candidate scored by class confidence times the mean
/// mask value over the run. Snippets and thresholds are visited in fixed
/// ascending order, so the output order is deterministic.
pub fn decode_candidates(
    outputs: &ScaleOutputs,
    video_id: &str,
    duration_s: f64,
    base_snippets: usize,
    weights: &LossWeights,
) -> Vec<Candidate> {
    let num_fg = outputs.probs.nrows().saturating_sub(1);
    let t_len = outputs.probs.ncols();
    let snippet_s = duration_s / base_snippets as f64;
    let span_s = outputs.scale as f64 * snippet_s;
    let mut candidates = Vec::new();
    let mut column = vec![0.0; t_len];
    for t in 0..t_len {
        let mut class = 0;
        let mut p_star = f64::NEG_INFINITY;
        for k in 0..num_fg {
            let p = outputs.probs[(k, t)];
            if p > p_star {
                p_star = p;
                class = k;
            }
        }
        if num_fg == 0 || p_star < weights.theta_c {
            continue;
        }
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = outputs.masks[(r, t)];
        }
        for &theta in &weights.thresholds {
            let run = binarize_segments(&column, theta)
                .into_iter()
                .find(|seg| seg.foreground && seg.start <= t && t <= seg.end);
            let Some(run) = run else { continue };
            let sum: f64 = column[run.start..=run.end].iter().sum();
            let mask_score = sum / run.len() as f64;
            // Pooling can pad the last snippet past the video, so the end
            // is clipped to the actual duration.
            candidates.push(Candidate {
                video_id: video_id.to_string(),
                class,
                start_s: run.start as f64 * span_s,
                end_s: ((run.end + 1) as f64 * span_s).min(duration_s),
                score: p_star * mask_score,
                scale: outputs.scale,
                snippet: t,
                threshold: theta,
            });
        }
    }
    candidates
}

/// Gaussian SoftNMS over one video's candidates. Repeatedly keeps the
/// highest-scoring candidate and decays every overlapping rival by
/// exp(-tIoU^2 / sigma); rivals falling below the score floor drop out.
/// With `per_class` set, only candidates sharing a class suppress each
/// other. The output is sorted by final score, best first.
pub fn soft_nms(candidates: Vec<Candidate>, config: &InferConfig) -> Vec<Candidate> {
    let mut pool = candidates;
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < config.max_keep {
        let mut best = 0;
        for i in 1..pool.len() {
            if pool[i].score > pool[best].score {
                best = i;
            }
        }
        let chosen = pool.remove(best);
        for rival in pool.iter_mut() {
            if config.per_class && rival.class != chosen.class {
                continue;
            }
            let overlap = tiou(
                (chosen.start_s, chosen.end_s),
                (rival.start_s, rival.end_s),
            );
            rival.score *= (-(overlap * overlap) / config.sigma).exp();
        }
        pool.retain(|c| c.score >= config.score_floor);
        kept.push(chosen);
    }
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    kept
}

/// Full detection for one video: decode every scale, pool the candidates,
/// suppress once over the union.
pub fn detect(
    outputs: &[ScaleOutputs],
    video_id: &str,
    duration_s: f64,
    base_snippets: usize,
    weights: &LossWeights,
    infer: &InferConfig,
) -> Vec<Candidate> {
    let mut all = Vec::new();
    for scale_outputs in outputs {
        all.extend(decode_candidates(
            scale_outputs,
            video_id,
            duration_s,
            base_snippets,
            weights,
        ));
    }
    soft_nms(all, infer)
}

/// Maps candidates to the prediction records of the annotations format,
/// resolving class indices to labels.
pub fn candidates_to_predictions(candidates: &[Candidate], classes: &[String]) -> Vec<Prediction> {
    candidates
        .iter()
        .map(|c| Prediction {
            video_id: c.video_id.clone(),
            label: classes[c.class].clone(),
            score: c.score,
            start_s: c.start_s,
            end_s: c.end_s,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Three-class outputs where only the listed snippets are confident;
    /// each confident snippet gets foreground probability `p` on class 1.
    fn outputs_with(masks: Array2<f64>, confident: &[(usize, f64)], scale: usize) -> ScaleOutputs {
        let t_len = masks.ncols();
        let mut probs = Array2::zeros((4, t_len));
        for t in 0..t_len {
            probs[(3, t)] = 1.0;
        }
        for &(t, p) in confident {
            probs[(3, t)] = 1.0 - p;
            probs[(1, t)] = p;
        }
        ScaleOutputs {
            scale,
            probs,
            masks,
            embedding: Array2::zeros((t_len, 2)),
        }
    }

    fn single_threshold(theta: f64) -> LossWeights {
        LossWeights {
            thresholds: vec![theta],
            ..LossWeights::default()
        }
    }

    fn interval(video: &str, start_s: f64, end_s: f64, score: f64, class: usize) -> Candidate {
        Candidate {
            video_id: video.into(),
            class,
            start_s,
            end_s,
            score,
            scale: 1,
            snippet: 0,
            threshold: 0.5,
        }
    }

    #[test]
    fn decode_scores_the_run_around_the_snippet() {
        // Mask column 1 is [0.2, 0.9, 0.9, 0.2]: at theta 0.5 the run is
        // snippets 1..=2 with mean 0.9, and the class confidence is 0.8.
        let mut masks = Array2::zeros((4, 4));
        for (r, v) in [0.2, 0.9, 0.9, 0.2].into_iter().enumerate() {
            masks[(r, 1)] = v;
        }
        let outputs = outputs_with(masks, &[(1, 0.8)], 1);
        let got = decode_candidates(&outputs, "v", 4.0, 4, &single_threshold(0.5));
        assert_eq!(got.len(), 1);
        let c = &got[0];
        assert!((c.score - 0.72).abs() < 1e-12, "score {}", c.score);
        assert_eq!(c.class, 1);
        assert_eq!(c.snippet, 1);
        assert_eq!((c.start_s, c.end_s), (1.0, 3.0));
    }

    #[test]
    fn column_below_every_threshold_yields_nothing() {
        let masks = Array2::from_elem((4, 4), 0.05);
        let outputs = outputs_with(masks, &[(2, 0.9)], 1);
        let got = decode_candidates(&outputs, "v", 4.0, 4, &LossWeights::default());
        assert!(got.is_empty());
    }

    #[test]
    fn unconfident_snippets_are_skipped() {
        let masks = Array2::from_elem((4, 4), 0.9);
        // 0.2 is below the default class threshold 0.3.
        let outputs = outputs_with(masks, &[(0, 0.2)], 1);
        let got = decode_candidates(&outputs, "v", 4.0, 4, &single_threshold(0.5));
        assert!(got.is_empty());
    }

    #[test]
    fn run_must_contain_the_source_snippet() {
        // Column 0 has foreground at snippets 2..=3 only; snippet 0 itself
        // is below threshold, so there is no run to attach to.
        let mut masks = Array2::zeros((4, 4));
        masks[(2, 0)] = 0.9;
        masks[(3, 0)] = 0.9;
        let outputs = outputs_with(masks, &[(0, 0.8)], 1);
        let got = decode_candidates(&outputs, "v", 4.0, 4, &single_threshold(0.5));
        assert!(got.is_empty());
    }

    #[test]
    fn coarse_scale_runs_cover_wider_intervals() {
        // Scale 2 over an 8-snippet video: snippets span 2 seconds each, so
        // the run 1..=2 maps to [2, 6].
        let mut masks = Array2::zeros((4, 4));
        for (r, v) in [0.1, 0.8, 0.8, 0.1].into_iter().enumerate() {
            masks[(r, 1)] = v;
        }
        let outputs = outputs_with(masks, &[(1, 0.9)], 2);
        let got = decode_candidates(&outputs, "v", 8.0, 8, &single_threshold(0.5));
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].start_s, got[0].end_s), (2.0, 6.0));
    }

    #[test]
    fn padded_tail_is_clipped_to_the_duration() {
        // 5 base snippets at scale 2 pool to 3, whose last snippet extends
        // past the video; a run reaching it must stop at duration_s.
        let masks = Array2::from_elem((3, 3), 0.9);
        let outputs = outputs_with(masks, &[(1, 0.9)], 2);
        let got = decode_candidates(&outputs, "v", 5.0, 5, &single_threshold(0.5));
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].start_s, got[0].end_s), (0.0, 5.0));
    }

    #[test]
    fn every_interval_stays_inside_the_video() {
        let masks = Array2::from_elem((6, 6), 0.7);
        let outputs = outputs_with(masks, &[(0, 0.5), (3, 0.8), (5, 0.9)], 2);
        let got = decode_candidates(&outputs, "v", 11.0, 11, &LossWeights::default());
        assert!(!got.is_empty());
        for c in &got {
            assert!(c.start_s >= 0.0 && c.end_s <= 11.0 && c.start_s < c.end_s);
            assert!(c.score > 0.0);
        }
    }

    #[test]
    fn decode_order_is_snippet_then_threshold() {
        let masks = Array2::from_elem((4, 4), 0.6);
        let outputs = outputs_with(masks, &[(1, 0.8), (2, 0.9)], 1);
        let weights = LossWeights {
            thresholds: vec![0.3, 0.5],
            ..LossWeights::default()
        };
        let got = decode_candidates(&outputs, "v", 4.0, 4, &weights);
        let order: Vec<(usize, f64)> = got.iter().map(|c| (c.snippet, c.threshold)).collect();
        assert_eq!(order, vec![(1, 0.3), (1, 0.5), (2, 0.3), (2, 0.5)]);
    }

    #[test]
    fn identical_intervals_decay_by_the_gaussian() {
        let pool = vec![
            interval("v", 0.0, 10.0, 0.9, 0),
            interval("v", 0.0, 10.0, 0.8, 0),
        ];
        let kept = soft_nms(pool, &InferConfig::default());
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        let expected = 0.8 * (-2.0f64).exp();
        assert!(
            (kept[1].score - expected).abs() < 1e-12,
            "got {}, want {expected}",
            kept[1].score
        );
    }

    #[test]
    fn disjoint_candidates_keep_their_scores() {
        let pool = vec![
            interval("v", 0.0, 5.0, 0.9, 0),
            interval("v", 6.0, 9.0, 0.8, 1),
        ];
        let kept = soft_nms(pool, &InferConfig::default());
        assert_eq!(kept.len(), 2);
        assert_eq!((kept[0].score, kept[1].score), (0.9, 0.8));
    }

    #[test]
    fn single_candidate_passes_through() {
        let pool = vec![interval("v", 1.0, 2.0, 0.4, 2)];
        let kept = soft_nms(pool.clone(), &InferConfig::default());
        assert_eq!(kept, pool);
    }

    #[test]
    fn scores_never_increase_and_output_is_sorted() {
        let mut pool = Vec::new();
        for i in 0..12 {
            let start = (i % 5) as f64;
            pool.push(interval("v", start, start + 3.0, 0.3 + 0.05 * i as f64, i % 3));
        }
        let before: Vec<f64> = {
            let mut s: Vec<f64> = pool.iter().map(|c| c.score).collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s
        };
        let kept = soft_nms(pool, &InferConfig::default());
        for w in kept.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        // Pair each survivor with its rank in the input ordering: no score
        // may exceed the corresponding input score.
        for (c, orig) in kept.iter().zip(before.iter()) {
            assert!(c.score <= orig + 1e-15);
        }
    }

    #[test]
    fn floor_and_keep_limit_bound_the_output() {
        let pool: Vec<Candidate> = (0..30)
            .map(|i| interval("v", 0.0, 10.0, 0.9 - 0.001 * i as f64, 0))
            .collect();
        let config = InferConfig {
            max_keep: 4,
            ..InferConfig::default()
        };
        let kept = soft_nms(pool.clone(), &config);
        assert_eq!(kept.len(), 4);

        // With a floor above the first decay, one selection wipes the rest.
        let config = InferConfig {
            score_floor: 0.5,
            ..InferConfig::default()
        };
        let kept = soft_nms(pool, &config);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn per_class_pools_only_suppress_within_a_class() {
        let pool = vec![
            interval("v", 0.0, 10.0, 0.9, 0),
            interval("v", 0.0, 10.0, 0.8, 1),
        ];
        let agnostic = soft_nms(pool.clone(), &InferConfig::default());
        assert!(agnostic[1].score < 0.8);
        let config = InferConfig {
            per_class: true,
            ..InferConfig::default()
        };
        let per_class = soft_nms(pool, &config);
        assert_eq!((per_class[0].score, per_class[1].score), (0.9, 0.8));
    }

    #[test]
    fn detect_merges_scales_into_one_suppression_pool() {
        // Both scales decode the same 4-second event; class-agnostic NMS
        // keeps the strong one at full score and decays the duplicate.
        let mut fine = Array2::zeros((8, 8));
        for r in 2..6 {
            fine[(r, 3)] = 1.0;
        }
        let mut coarse = Array2::zeros((4, 4));
        coarse[(1, 1)] = 1.0;
        coarse[(2, 1)] = 1.0;
        let outputs = vec![
            outputs_with(fine, &[(3, 0.9)], 1),
            outputs_with(coarse, &[(1, 0.8)], 2),
        ];
        let weights = single_threshold(0.5);
        let got = detect(&outputs, "v", 8.0, 8, &weights, &InferConfig::default());
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].scale, 1);
        assert_eq!(got[0].score, 0.9);
        assert_eq!((got[0].start_s, got[0].end_s), (2.0, 6.0));
        assert_eq!((got[1].start_s, got[1].end_s), (2.0, 6.0));
        assert!((got[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn predictions_carry_the_class_label() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let preds = candidates_to_predictions(&[interval("v", 0.0, 1.0, 0.5, 1)], &classes);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].label, "b");
        assert_eq!(preds[0].video_id, "v");
    }
}
