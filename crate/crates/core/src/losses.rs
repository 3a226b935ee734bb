//! The four training loss terms and their building blocks.
//!
//! Every term exists twice: a pure value-level function that serves as the
//! reference (and as the oracle in tests), and a `build_*` graph constructor
//! that records the same computation on a [`Graph`] for backpropagation. The
//! graph builders freeze all discrete choices (hard-negative sets, mask
//! binarizations, top-k selections, fallback branches) at the current values
//! and record them in a [`BranchTrace`], so finite-difference checks can
//! detect when a perturbation crossed a selection boundary and skip that
//! coordinate instead of comparing gradients across a discontinuity.
//!
//! Terms, per scale:
//! * classification: focal term on the per-snippet class distribution plus a
//!   binary term on the per-class sigmoid scores with hard-negative mining;
//! * mask: boundary IoU of eroded masks (soft-L2 fallback when they do not
//!   overlap) plus a dice complement;
//! * promotion: per-snippet mask distance weighted by the contrast deficit
//!   of the best binarization threshold;
//! * consistency: cosine mismatch between foreground features pooled by the
//!   classification branch and by the mask branch.

use ndarray::Array2;

use crate::autodiff::{stable_sigmoid, Graph, NodeId};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::labels::ScaleTargets;

/// Order-sensitive digest of every discrete choice made while building a
/// loss graph (FNV-1a). Two builds with equal digests took the same branches
/// everywhere, so their losses are values of one differentiable function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchTrace {
    hash: u64,
}

impl BranchTrace {
    pub fn new() -> Self {
        Self {
            hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn push(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.hash ^= u64::from(byte);
            self.hash = self.hash.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn push_usize(&mut self, v: usize) {
        self.push(v as u64);
    }

    pub fn push_flag(&mut self, v: bool) {
        self.push(u64::from(v));
    }

    pub fn push_opt(&mut self, v: Option<usize>) {
        match v {
            // Offset by one so None and Some(0) hash differently.
            Some(i) => self.push(i as u64 + 1),
            None => self.push(0),
        }
    }

    pub fn digest(&self) -> u64 {
        self.hash
    }
}

impl Default for BranchTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// Sliding-window minimum of width `k` (odd), zero-padded at both ends.
pub fn erode(m: &[f64], k: usize) -> Vec<f64> {
    erode_with_argmin(m, k).0
}

/// Erosion plus, per output position, the input index the minimum came from
/// (`None` when the zero padding wins). Ties resolve to the leftmost
/// contender, padding included.
pub fn erode_with_argmin(m: &[f64], k: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    assert!(k % 2 == 1, "erosion width must be odd");
    let n = m.len();
    let r = (k / 2) as isize;
    let mut out = vec![0.0; n];
    let mut arg = vec![None; n];
    for j in 0..n {
        let mut best = f64::INFINITY;
        let mut best_idx = None;
        for p in (j as isize - r)..=(j as isize + r) {
            let (val, idx) = if p < 0 || p >= n as isize {
                (0.0, None)
            } else {
                (m[p as usize], Some(p as usize))
            };
            if val < best {
                best = val;
                best_idx = idx;
            }
        }
        out[j] = best;
        arg[j] = best_idx;
    }
    (out, arg)
}

/// A maximal run of constant binarization, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub foreground: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Splits `[0, len)` into maximal runs of `m_t >= theta` / `m_t < theta`.
pub fn binarize_segments(m: &[f64], theta: f64) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    for t in 0..m.len() {
        let z = m[t] >= theta;
        let next_differs = t + 1 == m.len() || (m[t + 1] >= theta) != z;
        if next_differs {
            segs.push(Segment {
                start,
                end: t,
                foreground: z,
            });
            start = t + 1;
        }
    }
    segs
}

/// Positions flanking a segment on both sides, truncated to the axis.
fn flank_positions(seg: &Segment, delta: f64, len: usize) -> Vec<usize> {
    let w = (delta * seg.len() as f64).ceil() as usize;
    let mut out = Vec::with_capacity(2 * w);
    out.extend(seg.start.saturating_sub(w)..seg.start);
    out.extend(seg.end + 1..(seg.end + 1 + w).min(len));
    out
}

/// Outer-inner contrast of a binarized mask: per segment, the mean
/// confidence inside minus the mean over the flanking positions (flank width
/// is `delta` times the segment length, rounded up, truncated at the axis
/// ends), averaged over segments. Background segments score `1 - m` instead
/// of `m`. Lands in [-1, 1].
pub fn oic_score(m: &[f64], segments: &[Segment], delta: f64) -> f64 {
    let (coef, c0) = oic_linear_coeffs(segments, delta, m.len());
    c0 + coef.iter().zip(m).map(|(w, v)| w * v).sum::<f64>()
}

/// The contrast score is linear in `m` once the segmentation is frozen; this
/// returns `(w, c0)` with `score = dot(w, m) + c0`. The loss graph uses the
/// linear form so gradients flow through `m` while the segmentation acts as
/// a constant.
pub fn oic_linear_coeffs(segments: &[Segment], delta: f64, len: usize) -> (Vec<f64>, f64) {
    let mut coef = vec![0.0; len];
    let mut c0 = 0.0;
    if segments.is_empty() {
        return (coef, c0);
    }
    let s_inv = 1.0 / segments.len() as f64;
    for seg in segments {
        let sign = if seg.foreground { 1.0 } else { -1.0 };
        // inside: mean of u over the segment, u = m (fg) or 1 - m (bg)
        let l_inv = 1.0 / seg.len() as f64;
        for r in seg.start..=seg.end {
            coef[r] += sign * s_inv * l_inv;
        }
        if !seg.foreground {
            c0 += s_inv;
        }
        // outside: mean of u over the in-range flanks, subtracted
        let flanks = flank_positions(seg, delta, len);
        if flanks.is_empty() {
            continue;
        }
        let v_inv = 1.0 / flanks.len() as f64;
        for r in flanks {
            coef[r] -= sign * s_inv * v_inv;
        }
        if !seg.foreground {
            c0 -= s_inv;
        }
    }
    (coef, c0)
}

/// Scans the threshold grid and returns `(index, score, segmentation)` of
/// the best contrast; ties keep the smallest threshold.
pub fn best_threshold(m: &[f64], w: &LossWeights) -> (usize, f64, Vec<Segment>) {
    let mut best: Option<(usize, f64, Vec<Segment>)> = None;
    for (j, &theta) in w.thresholds.iter().enumerate() {
        let segs = binarize_segments(m, theta);
        let score = oic_score(m, &segs, w.delta);
        if best.as_ref().map_or(true, |b| score > b.1) {
            best = Some((j, score, segs));
        }
    }
    best.expect("threshold grid is validated non-empty")
}

fn check_columns(context: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: len.to_string(),
        });
    }
    Ok(())
}

/// Per-snippet classification loss: focal term on the class distribution
/// plus a binary term on the sigmoid scores, where the `ceil(K/10)`
/// highest-scoring wrong classes are pushed down with weight `alpha`.
pub fn classification_loss(p: &[f64], r: &[f64], y: usize, w: &LossWeights) -> Result<f64> {
    let k1 = p.len();
    check_columns("classification loss scores", r.len(), k1)?;
    if k1 < 2 || y >= k1 {
        return Err(Error::InvalidConfig(format!(
            "class label {y} out of range for {k1} columns"
        )));
    }
    let clamp = |v: f64| v.clamp(w.prob_clamp, 1.0 - w.prob_clamp);
    let py = clamp(p[y]);
    let ry = clamp(r[y]);
    let focal = (1.0 - py).powf(w.gamma) * (-py.ln());
    let negatives = hard_negatives_of(r, y, w);
    let mut pushed = 0.0;
    for &c in &negatives {
        pushed += (1.0 - clamp(r[c])).ln();
    }
    let binary = -ry.ln() - (w.alpha / negatives.len() as f64) * pushed;
    Ok(w.lambda1 * focal + (1.0 - w.lambda1) * binary)
}

/// The `ceil(K/10)` classes with the highest scores, excluding the label;
/// ties prefer the lower class index.
fn hard_negatives_of(r: &[f64], y: usize, w: &LossWeights) -> Vec<usize> {
    let k1 = r.len();
    let n = w.hard_negatives(k1 - 1);
    let mut idx: Vec<usize> = (0..k1).filter(|&c| c != y).collect();
    idx.sort_by(|&a, &b| r[b].partial_cmp(&r[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(n.min(idx.len()));
    idx
}

/// Mean classification loss over all snippets of one scale.
///
/// `probs` is T x (K+1) row-stochastic, `scores` the sigmoids of the same
/// logits, `class_targets[t]` the label of snippet t (K = background).
pub fn build_classification_term(
    g: &mut Graph,
    probs: NodeId,
    scores: NodeId,
    class_targets: &[usize],
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<NodeId> {
    let (t_len, k1) = g.value(probs).dim();
    if g.value(scores).dim() != (t_len, k1) {
        return Err(Error::ShapeMismatch {
            context: "classification term scores".into(),
            expected: format!("{t_len}x{k1}"),
            found: format!("{:?}", g.value(scores).dim()),
        });
    }
    check_columns("classification term targets", class_targets.len(), t_len)?;
    if k1 < 2 {
        return Err(Error::InvalidConfig(
            "classification needs at least one foreground class".into(),
        ));
    }

    let mut onehot = Array2::zeros((t_len, k1));
    let mut negative_weight = Array2::zeros((t_len, k1));
    for (t, &y) in class_targets.iter().enumerate() {
        if y >= k1 {
            return Err(Error::InvalidConfig(format!(
                "class label {y} out of range for {k1} columns"
            )));
        }
        onehot[(t, y)] = 1.0;
        let row: Vec<f64> = g.value(scores).row(t).to_vec();
        let negatives = hard_negatives_of(&row, y, w);
        trace.push_usize(t);
        for &c in &negatives {
            negative_weight[(t, c)] = w.alpha / negatives.len() as f64;
            trace.push_usize(c);
        }
    }

    let pc = g.clamp(probs, w.prob_clamp, 1.0 - w.prob_clamp);
    let rc = g.clamp(scores, w.prob_clamp, 1.0 - w.prob_clamp);
    let y_const = g.leaf(onehot);
    let n_const = g.leaf(negative_weight);

    // focal: (1 - p_y)^gamma * (-ln p_y), gathered via the one-hot rows
    let py = {
        let picked = g.mul(pc, y_const);
        g.row_sum(picked)
    };
    let deficit = g.one_minus(py);
    let focal_w = g.pow_scalar(deficit, w.gamma);
    let ln_py = g.ln(py);
    let neg_ln_py = g.scalar_mul(ln_py, -1.0);
    let focal = g.mul(focal_w, neg_ln_py);

    // binary: -ln r_y - (alpha/|N|) * sum_neg ln(1 - r)
    let ry = {
        let picked = g.mul(rc, y_const);
        g.row_sum(picked)
    };
    let ln_ry = g.ln(ry);
    let neg_ln_ry = g.scalar_mul(ln_ry, -1.0);
    let one_m_r = g.one_minus(rc);
    let ln_1mr = g.ln(one_m_r);
    let pushed = {
        let weighted = g.mul(ln_1mr, n_const);
        let summed = g.row_sum(weighted);
        g.scalar_mul(summed, -1.0)
    };
    let binary = g.add(neg_ln_ry, pushed);

    let focal_part = g.scalar_mul(focal, w.lambda1);
    let binary_part = g.scalar_mul(binary, 1.0 - w.lambda1);
    let per_snippet = g.add(focal_part, binary_part);
    Ok(g.mean_all(per_snippet))
}

/// Mask loss for one predicted row against a binary target: boundary IoU of
/// the eroded (or band) masks with a normalized-L2 fallback when they do not
/// overlap, plus a weighted dice complement.
pub fn mask_loss(m: &[f64], gmask: &[f64], w: &LossWeights) -> Result<f64> {
    check_columns("mask loss target", gmask.len(), m.len())?;
    let ones = gmask.iter().filter(|&&v| v != 0.0).count();
    if ones == 0 {
        return Err(Error::InvalidConfig(
            "mask loss needs a foreground target; filter background snippets first".into(),
        ));
    }
    let (a, b) = if w.boundary_band {
        let band = |v: &[f64]| {
            let e = erode(v, w.erosion_k);
            v.iter().zip(&e).map(|(x, y)| x - y).collect::<Vec<f64>>()
        };
        (band(m), band(gmask))
    } else {
        (erode(m, w.erosion_k), erode(gmask, w.erosion_k))
    };
    let cap: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let boundary = if cap > w.tau_ov {
        let cup: f64 = a.iter().zip(&b).map(|(x, y)| x + y - x * y).sum();
        1.0 - cap / (cup + w.eps)
    } else {
        let dist: f64 = m
            .iter()
            .zip(gmask)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        dist / ones as f64
    };
    let inner: f64 = m.iter().zip(gmask).map(|(x, y)| x * y).sum();
    let mm: f64 = m.iter().map(|x| x * x).sum();
    let gg: f64 = gmask.iter().map(|x| x * x).sum();
    let dice = 2.0 * inner / (mm + gg + w.eps);
    Ok(boundary + w.lambda2 * (1.0 - dice))
}

/// Graph version of [`mask_loss`] for one mask row node.
fn build_mask_loss_row(
    g: &mut Graph,
    m_row: NodeId,
    gmask: &[f64],
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<NodeId> {
    let t_len = g.value(m_row).ncols();
    check_columns("mask loss target", gmask.len(), t_len)?;
    let ones = gmask.iter().filter(|&&v| v != 0.0).count();
    if ones == 0 {
        return Err(Error::InvalidConfig(
            "mask loss needs a foreground target; filter background snippets first".into(),
        ));
    }
    let m_vals: Vec<f64> = g.value(m_row).iter().copied().collect();

    // The erosion routes its gradient to per-window argmin positions; record
    // them so a finite-difference probe that flips a tie is detectable.
    let (_, routing) = erode_with_argmin(&m_vals, w.erosion_k);
    for o in routing {
        trace.push_opt(o);
    }

    let (a, b_vals) = if w.boundary_band {
        let eroded = g.erode_rows(m_row, w.erosion_k);
        let band = g.sub(m_row, eroded);
        let ge = erode(gmask, w.erosion_k);
        let gb: Vec<f64> = gmask.iter().zip(&ge).map(|(x, y)| x - y).collect();
        (band, gb)
    } else {
        (g.erode_rows(m_row, w.erosion_k), erode(gmask, w.erosion_k))
    };
    let b_const = g.leaf(Array2::from_shape_vec((1, t_len), b_vals).expect("shape"));

    let product = g.mul(a, b_const);
    let cap = g.sum_all(product);
    let overlap = g.scalar(cap) > w.tau_ov;
    trace.push_flag(overlap);
    let boundary = if overlap {
        let summed = g.add(a, b_const);
        let union = g.sub(summed, product);
        let cup = g.sum_all(union);
        let cup_eps = g.scalar_add(cup, w.eps);
        let frac = g.div(cap, cup_eps);
        g.one_minus(frac)
    } else {
        let g_const = g.leaf(Array2::from_shape_vec((1, t_len), gmask.to_vec()).expect("shape"));
        let diff = g.sub(m_row, g_const);
        let dist = g.norm2(diff);
        g.scalar_mul(dist, 1.0 / ones as f64)
    };

    let g_const = g.leaf(Array2::from_shape_vec((1, t_len), gmask.to_vec()).expect("shape"));
    let inner = {
        let p = g.mul(m_row, g_const);
        let s = g.sum_all(p);
        g.scalar_mul(s, 2.0)
    };
    let mm = {
        let p = g.mul(m_row, m_row);
        g.sum_all(p)
    };
    let gg: f64 = gmask.iter().map(|x| x * x).sum();
    let den = g.scalar_add(mm, gg + w.eps);
    let dice = g.div(inner, den);
    let dice_term = {
        let c = g.one_minus(dice);
        g.scalar_mul(c, w.lambda2)
    };
    Ok(g.add(boundary, dice_term))
}

/// Mean mask loss over the foreground snippets of one scale. Zero when the
/// scale has no foreground.
pub fn build_mask_term(
    g: &mut Graph,
    masks: NodeId,
    targets: &ScaleTargets,
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<NodeId> {
    let (rows, cols) = g.value(masks).dim();
    if rows != cols || rows != targets.snippets() {
        return Err(Error::ShapeMismatch {
            context: "mask term".into(),
            expected: format!("{0}x{0}", targets.snippets()),
            found: format!("{rows}x{cols}"),
        });
    }
    let fg: Vec<usize> = (0..rows).filter(|&t| targets.instance[t].is_some()).collect();
    if fg.is_empty() {
        return Ok(g.scalar_leaf(0.0));
    }
    let mut acc: Option<NodeId> = None;
    for &t in &fg {
        let m_row = g.slice_rows(masks, &[t]);
        let gt: Vec<f64> = targets.mask.row(t).to_vec();
        let term = build_mask_loss_row(g, m_row, &gt, w, trace)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, term),
            None => term,
        });
    }
    Ok(g.scalar_mul(acc.expect("nonempty foreground"), 1.0 / fg.len() as f64))
}

/// Per-snippet promotion loss: mask distance scaled by the contrast deficit
/// of the best binarization over the threshold grid.
pub fn promotion_loss(m: &[f64], gmask: &[f64], w: &LossWeights) -> Result<f64> {
    check_columns("promotion loss target", gmask.len(), m.len())?;
    let (_, score, _) = best_threshold(m, w);
    let dist: f64 = m
        .iter()
        .zip(gmask)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok((1.0 - score).powf(w.beta) * dist)
}

/// Promotion loss averaged over each action instance's foreground snippets,
/// then over the instances of the video. Zero when the scale has no
/// foreground.
pub fn build_promotion_term(
    g: &mut Graph,
    masks: NodeId,
    targets: &ScaleTargets,
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<NodeId> {
    let (rows, cols) = g.value(masks).dim();
    if rows != cols || rows != targets.snippets() {
        return Err(Error::ShapeMismatch {
            context: "promotion term".into(),
            expected: format!("{0}x{0}", targets.snippets()),
            found: format!("{rows}x{cols}"),
        });
    }
    let mut by_instance: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for t in 0..rows {
        if let Some(i) = targets.instance[t] {
            by_instance.entry(i).or_default().push(t);
        }
    }
    if by_instance.is_empty() {
        return Ok(g.scalar_leaf(0.0));
    }
    let n_instances = by_instance.len();
    let mut total: Option<NodeId> = None;
    for (inst, members) in by_instance {
        trace.push_usize(inst);
        let mut inst_sum: Option<NodeId> = None;
        let weight = 1.0 / members.len() as f64;
        for &t in &members {
            let m_vals: Vec<f64> = g.value(masks).row(t).to_vec();
            let (j_star, score, segs) = best_threshold(&m_vals, w);
            trace.push_usize(j_star);
            for seg in &segs {
                trace.push_usize(seg.start);
                trace.push_usize(seg.end);
                trace.push_flag(seg.foreground);
            }
            let (coef, c0) = oic_linear_coeffs(&segs, w.delta, cols);

            let m_row = g.slice_rows(masks, &[t]);
            let w_const = g.leaf(Array2::from_shape_vec((1, cols), coef).expect("shape"));
            let contrast = {
                let p = g.mul(m_row, w_const);
                let s = g.sum_all(p);
                g.scalar_add(s, c0)
            };
            debug_assert!(
                (g.scalar(contrast) - score).abs() < 1e-9,
                "linearized contrast must reproduce the scanned score"
            );
            let deficit = g.one_minus(contrast);
            let powed = g.pow_scalar(deficit, w.beta);
            let gt: Vec<f64> = targets.mask.row(t).to_vec();
            let g_const = g.leaf(Array2::from_shape_vec((1, cols), gt).expect("shape"));
            let diff = g.sub(m_row, g_const);
            let dist = g.norm2(diff);
            let term = g.mul(powed, dist);
            inst_sum = Some(match inst_sum {
                Some(prev) => g.add(prev, term),
                None => term,
            });
        }
        let inst_mean = g.scalar_mul(inst_sum.expect("instance has members"), weight);
        total = Some(match total {
            Some(prev) => g.add(prev, inst_mean),
            None => inst_mean,
        });
    }
    Ok(g.scalar_mul(
        total.expect("nonempty instances"),
        1.0 / n_instances as f64,
    ))
}

/// Parameter nodes of the two consistency projections, shared across scales.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyNodes {
    pub wp: NodeId,
    pub bp: NodeId,
    pub wm: NodeId,
    pub bm: NodeId,
}

/// Indices of the `k` largest scores, ties to the smaller index, returned in
/// ascending index order.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx.sort_unstable();
    idx
}

/// Consistency loss of one scale: both branches pick their most confident
/// snippets (classification via gated class maxima, mask via gated
/// mask-column means), pool a projected embedding over each pick, and pay
/// one minus the cosine of the two pooled vectors. The scores only select
/// indices; gradients flow through the pooled projections.
///
/// Returns the loss node and whether a pooled vector had zero norm (the
/// cosine is then pinned to 0, i.e. loss 1, with no gradient).
pub fn build_consistency_term(
    g: &mut Graph,
    embedding: NodeId,
    probs: NodeId,
    masks: NodeId,
    proj: &ConsistencyNodes,
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<(NodeId, bool)> {
    let (t_len, _c) = g.value(embedding).dim();
    let (pt, k1) = g.value(probs).dim();
    let (mr, mc) = g.value(masks).dim();
    if pt != t_len || mr != t_len || mc != t_len {
        return Err(Error::ShapeMismatch {
            context: "consistency term".into(),
            expected: format!("{t_len} snippets in every branch"),
            found: format!("probs {pt}, masks {mr}x{mc}"),
        });
    }
    if k1 < 2 {
        return Err(Error::InvalidConfig(
            "consistency needs at least one foreground class".into(),
        ));
    }

    // Selection scores, computed on current values only.
    let pv = g.value(probs);
    let class_score: Vec<f64> = (0..t_len)
        .map(|t| {
            (0..k1 - 1)
                .map(|c| {
                    let v = pv[(t, c)];
                    if v >= w.theta_c {
                        v
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let mv = g.value(masks);
    let mask_score: Vec<f64> = (0..t_len)
        .map(|t| {
            let gated = (0..t_len)
                .map(|j| {
                    let v = mv[(t, j)];
                    if v >= w.theta_m {
                        v
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / t_len as f64;
            stable_sigmoid(gated)
        })
        .collect();

    let k = w.topk.min(t_len);
    let class_pick = top_indices(&class_score, k);
    let mask_pick = top_indices(&mask_score, k);
    for &i in &class_pick {
        trace.push_usize(i);
    }
    for &i in &mask_pick {
        trace.push_usize(i);
    }

    let e_p = g.conv1d_same(embedding, proj.wp, proj.bp, 1);
    let e_m = g.conv1d_same(embedding, proj.wm, proj.bm, 1);
    let pooled_p = {
        let rows = g.slice_rows(e_p, &class_pick);
        g.mean_rows(rows)
    };
    let pooled_m = {
        let rows = g.slice_rows(e_m, &mask_pick);
        g.mean_rows(rows)
    };
    let norm_p = g.norm2(pooled_p);
    let norm_m = g.norm2(pooled_m);
    let degenerate = g.scalar(norm_p) == 0.0 || g.scalar(norm_m) == 0.0;
    trace.push_flag(degenerate);
    if degenerate {
        return Ok((g.scalar_leaf(1.0), true));
    }
    let dot = {
        let p = g.mul(pooled_p, pooled_m);
        g.sum_all(p)
    };
    let den = g.mul(norm_p, norm_m);
    let cosine = g.div(dot, den);
    Ok((g.one_minus(cosine), false))
}

/// One scale's forward outputs plus its targets, in snippet-major
/// orientation (row = snippet).
#[derive(Debug, Clone, Copy)]
pub struct ScaleTermInputs<'a> {
    pub scale: usize,
    /// T^s x C attention embedding.
    pub embedding: NodeId,
    /// T^s x (K+1) row-stochastic class distributions.
    pub probs: NodeId,
    /// T^s x (K+1) per-logit sigmoids.
    pub scores: NodeId,
    /// T^s x T^s mask predictions, row t conditioned on snippet t.
    pub masks: NodeId,
    pub targets: &'a ScaleTargets,
}

/// Loss values of one scale, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues {
    pub classification: f64,
    pub mask: f64,
    pub promotion: f64,
    pub consistency: f64,
}

impl TermValues {
    pub fn total(&self) -> f64 {
        self.classification + self.mask + self.promotion + self.consistency
    }

    pub fn add(&mut self, other: &TermValues) {
        self.classification += other.classification;
        self.mask += other.mask;
        self.promotion += other.promotion;
        self.consistency += other.consistency;
    }

    pub fn scale_by(&mut self, f: f64) {
        self.classification *= f;
        self.mask *= f;
        self.promotion *= f;
        self.consistency *= f;
    }
}

/// Per-scale loss values plus degeneracy flags from one video's loss build.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub per_scale: Vec<(usize, TermValues)>,
    /// A consistency branch pooled a zero vector somewhere.
    pub zero_norm: bool,
}

impl LossBreakdown {
    /// Term values summed over scales; matches the total loss node.
    pub fn summed(&self) -> TermValues {
        let mut out = TermValues::default();
        for (_, terms) in &self.per_scale {
            out.add(terms);
        }
        out
    }
}

/// Builds the full objective of one video: per scale, the mean
/// classification loss plus the mean foreground mask loss plus the promotion
/// and consistency terms, summed over scales.
pub fn total_loss(
    g: &mut Graph,
    inputs: &[ScaleTermInputs],
    proj: &ConsistencyNodes,
    w: &LossWeights,
    trace: &mut BranchTrace,
) -> Result<(NodeId, LossBreakdown)> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("loss needs at least one scale".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<NodeId> = None;
    for inp in inputs {
        trace.push_usize(inp.scale);
        let l_c = build_classification_term(g, inp.probs, inp.scores, &inp.targets.class, w, trace)?;
        let l_m = build_mask_term(g, inp.masks, inp.targets, w, trace)?;
        let l_p = build_promotion_term(g, inp.masks, inp.targets, w, trace)?;
        let (l_f, degenerate) =
            build_consistency_term(g, inp.embedding, inp.probs, inp.masks, proj, w, trace)?;
        breakdown.zero_norm |= degenerate;
        breakdown.per_scale.push((
            inp.scale,
            TermValues {
                classification: g.scalar(l_c),
                mask: g.scalar(l_m),
                promotion: g.scalar(l_p),
                consistency: g.scalar(l_f),
            },
        ));
        let cm = g.add(l_c, l_m);
        let pf = g.add(l_p, l_f);
        let scale_sum = g.add(cm, pf);
        total = Some(match total {
            Some(prev) => g.add(prev, scale_sum),
            None => scale_sum,
        });
    }
    Ok((total.expect("nonempty inputs"), breakdown))
}
