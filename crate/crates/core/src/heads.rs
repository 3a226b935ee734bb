//! Classification and mask prediction heads.
//!
//! Both heads run on a scale's embedding (T^s x C, one row per snippet) and
//! use width-3, stride-1, zero-"same"-padded 1-D convolutions along time.
//!
//! * `classify`: one convolution to K + 1 channels; a per-snippet softmax
//!   gives the class distribution and a per-logit sigmoid gives the
//!   independent per-class scores used by the hard-negative loss branch.
//! * `predict_masks`: three convolutions (ReLU between, hidden width C) with
//!   T^s output channels and a sigmoid, so row t of the output is the
//!   predicted global foreground mask conditioned on snippet t. Each scale
//!   owns its mask head because the output width is tied to T^s.
//!
//! Matrices here are time-major (row = snippet). [`crate::model`] transposes
//! to the column-per-snippet orientation at its public boundary.

use crate::autodiff::{Graph, NodeId};

pub const CONV_WIDTH: usize = 3;

/// Parameter nodes of the classification head: one conv.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// Parameter nodes of the mask head: three convs.
#[derive(Debug, Clone, Copy)]
pub struct MaskNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

/// Output nodes of the classification head.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyOut {
    pub logits: NodeId,
    /// T^s x (K + 1), each row sums to 1.
    pub probs: NodeId,
    /// T^s x (K + 1), independent sigmoids of the same logits.
    pub scores: NodeId,
}

pub fn classify(g: &mut Graph, embedding: NodeId, nodes: &ClassifyNodes) -> ClassifyOut {
    let logits = g.conv1d_same(embedding, nodes.w, nodes.b, CONV_WIDTH);
    let probs = g.softmax_rows(logits);
    let scores = g.sigmoid(logits);
    ClassifyOut {
        logits,
        probs,
        scores,
    }
}

/// T^s x T^s mask predictions in (0, 1); row t is snippet t's mask.
pub fn predict_masks(g: &mut Graph, embedding: NodeId, nodes: &MaskNodes) -> NodeId {
    let h1 = g.conv1d_same(embedding, nodes.w1, nodes.b1, CONV_WIDTH);
    let h1 = g.relu(h1);
    let h2 = g.conv1d_same(h1, nodes.w2, nodes.b2, CONV_WIDTH);
    let h2 = g.relu(h2);
    let logits = g.conv1d_same(h2, nodes.w3, nodes.b3, CONV_WIDTH);
    g.sigmoid(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-0.8..0.8))
    }

    fn classify_nodes(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, k1: usize) -> ClassifyNodes {
        ClassifyNodes {
            w: g.leaf(rand_mat(rng, CONV_WIDTH * c, k1)),
            b: g.leaf(rand_mat(rng, 1, k1)),
        }
    }

    fn mask_nodes(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, t: usize) -> MaskNodes {
        MaskNodes {
            w1: g.leaf(rand_mat(rng, CONV_WIDTH * c, c)),
            b1: g.leaf(rand_mat(rng, 1, c)),
            w2: g.leaf(rand_mat(rng, CONV_WIDTH * c, c)),
            b2: g.leaf(rand_mat(rng, 1, c)),
            w3: g.leaf(rand_mat(rng, CONV_WIDTH * c, t)),
            b3: g.leaf(rand_mat(rng, 1, t)),
        }
    }

    #[test]
    fn class_rows_are_stochastic_and_scores_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut g = Graph::new();
        let e = g.leaf(rand_mat(&mut rng, 12, 6));
        let nodes = classify_nodes(&mut g, &mut rng, 6, 4);
        let out = classify(&mut g, e, &nodes);
        let p = g.value(out.probs);
        assert_eq!(p.dim(), (12, 4));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        let r = g.value(out.scores);
        assert!(r.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn mask_output_is_square_and_open_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut g = Graph::new();
        let t = 9;
        let e = g.leaf(rand_mat(&mut rng, t, 5));
        let nodes = mask_nodes(&mut g, &mut rng, 5, t);
        let m = predict_masks(&mut g, e, &nodes);
        let mv = g.value(m);
        assert_eq!(mv.dim(), (t, t));
        assert!(mv.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zero_conv_classifier_is_uniform() {
        // Zero weights and biases: logits are all zero, softmax is uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut g = Graph::new();
        let e = g.leaf(rand_mat(&mut rng, 7, 4));
        let nodes = ClassifyNodes {
            w: g.leaf(Array2::zeros((CONV_WIDTH * 4, 3))),
            b: g.leaf(Array2::zeros((1, 3))),
        };
        let out = classify(&mut g, e, &nodes);
        let p = g.value(out.probs);
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let r = g.value(out.scores);
        for v in r.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_uses_same_padding_at_borders() {
        // A single-channel identity-ish kernel: weight picks only the center
        // tap, so the conv must reproduce the input exactly, including at
        // t = 0 and t = T-1 where the window sticks out.
        let mut g = Graph::new();
        let x = Array2::from_shape_fn((5, 1), |(i, _)| i as f64 + 1.0);
        let e = g.leaf(x.clone());
        let mut w = Array2::zeros((3, 1));
        w[(1, 0)] = 1.0; // center tap
        let nodes = ClassifyNodes {
            w: g.leaf(w),
            b: g.leaf(Array2::zeros((1, 1))),
        };
        let out = classify(&mut g, e, &nodes);
        let logits = g.value(out.logits);
        for i in 0..5 {
            assert!((logits[(i, 0)] - x[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // Random linear functional of (probs, scores, masks) against every
        // head parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let t = 6;
        let c = 4;
        let k1 = 3;
        let e0 = rand_mat(&mut rng, t, c);
        let probe_p = rand_mat(&mut rng, t, k1);
        let probe_m = rand_mat(&mut rng, t, t);

        let mut params: Vec<Array2<f64>> = vec![
            rand_mat(&mut rng, CONV_WIDTH * c, k1), // cls w
            rand_mat(&mut rng, 1, k1),              // cls b
            rand_mat(&mut rng, CONV_WIDTH * c, c),  // mask w1
            rand_mat(&mut rng, 1, c),
            rand_mat(&mut rng, CONV_WIDTH * c, c), // mask w2
            rand_mat(&mut rng, 1, c),
            rand_mat(&mut rng, CONV_WIDTH * c, t), // mask w3
            rand_mat(&mut rng, 1, t),
        ];

        let eval = |params: &[Array2<f64>]| {
            let mut g = Graph::new();
            let e = g.leaf(e0.clone());
            let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
            let cls = ClassifyNodes { w: ids[0], b: ids[1] };
            let msk = MaskNodes {
                w1: ids[2],
                b1: ids[3],
                w2: ids[4],
                b2: ids[5],
                w3: ids[6],
                b3: ids[7],
            };
            let out = classify(&mut g, e, &cls);
            let m = predict_masks(&mut g, e, &msk);
            let pp = g.leaf(probe_p.clone());
            let pm = g.leaf(probe_m.clone());
            let a = g.mul(out.probs, pp);
            let b = g.mul(m, pm);
            let sa = g.sum_all(a);
            let sb = g.sum_all(b);
            let loss = g.add(sa, sb);
            let val = g.scalar(loss);
            let grads = g.backward(loss).unwrap();
            (val, grads, ids)
        };

        let (_, grads, ids) = eval(&params);
        let h = 1e-6;
        for (pi, id) in ids.iter().enumerate() {
            let (rows, cols) = params[pi].dim();
            for i in 0..rows {
                for j in 0..cols {
                    let orig = params[pi][(i, j)];
                    params[pi][(i, j)] = orig + h;
                    let (lp, _, _) = eval(&params);
                    params[pi][(i, j)] = orig - h;
                    let (lm, _, _) = eval(&params);
                    params[pi][(i, j)] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = grads.get(*id)[(i, j)];
                    let denom: f64 = a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (a - fd).abs() / denom < 1e-5,
                        "param {pi} ({i},{j}): analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }
}
