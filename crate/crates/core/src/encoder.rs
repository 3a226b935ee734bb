//! Multi-scale self-attentive snippet encoder.
//!
//! Per scale s the input features are average-pooled from T to
//! ceil(T / s) snippets, layer-normed, run through n_h attention heads whose
//! query/key/value streams all live at the pooled length, concatenated with
//! a residual, then passed through a single-layer MLP block with its own
//! pre-norm and residual. With one head the attention block reduces exactly
//! to [`attention_head`] applied to the normalized pooled input.
//!
//! The residual requires the concatenated head width to equal the feature
//! width, so `channels == dim` and `d_head = channels / n_heads` are
//! enforced at model construction.

use ndarray::Array2;

use crate::autodiff::{avg_pool_value, Graph, NodeId};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pooling configuration of one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    /// Window and stride equal the scale; padding is the minimum that makes
    /// the output length ceil(t / scale) (zero whenever the scale divides t).
    pub fn for_scale(scale: usize, t: usize) -> Self {
        assert!(scale >= 1 && t >= 1);
        let rem = t % scale;
        let pad = if rem == 0 { 0 } else { (scale - rem + 1) / 2 };
        Self {
            k: scale,
            stride: scale,
            pad,
        }
    }

    pub fn output_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Average pooling along time with zero padding; pad frames count toward the
/// divisor. Pure-value counterpart of the graph op.
pub fn temporal_pool(x: &Array2<f64>, k: usize, stride: usize, pad: usize) -> Result<Array2<f64>> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidConfig(
            "pooling window and stride must be >= 1".into(),
        ));
    }
    if x.nrows() + 2 * pad < k {
        return Err(Error::ShapeMismatch {
            context: "temporal_pool".into(),
            expected: format!("padded length >= window {k}"),
            found: format!("{} + 2*{pad}", x.nrows()),
        });
    }
    Ok(avg_pool_value(x, k, stride, pad))
}

/// Parameter node ids of one attention head.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

/// Parameter node ids of one scale of the encoder.
#[derive(Debug, Clone)]
pub struct ScaleNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub heads: Vec<HeadNodes>,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub mlp_w: NodeId,
    pub mlp_b: NodeId,
}

/// Raw attention output of one head (no residual): softmax(QK^T / sqrt(d)) V.
fn head_attention(g: &mut Graph, f: NodeId, head: &HeadNodes) -> NodeId {
    let q = g.matmul(f, head.w_q);
    let k = g.matmul(f, head.w_k);
    let v = g.matmul(f, head.w_v);
    let d = g.value(q).ncols() as f64;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scalar_mul(scores, 1.0 / d.sqrt());
    let attn = g.softmax_rows(scaled);
    g.matmul(attn, v)
}

/// Single self-attention head with residual: F + softmax(QK^T / sqrt(d)) V.
/// The projections must be square (d_head == feature width) for the residual
/// to typecheck.
pub fn attention_head(g: &mut Graph, f: NodeId, head: &HeadNodes) -> Result<NodeId> {
    let dim = g.value(f).ncols();
    let proj = g.value(head.w_q).dim();
    if proj != (dim, dim) {
        return Err(Error::ShapeMismatch {
            context: "attention_head residual".into(),
            expected: format!("square {dim}x{dim} projections"),
            found: format!("{proj:?}"),
        });
    }
    let out = head_attention(g, f, head);
    Ok(g.add(f, out))
}

/// Everything [`embed_scale`] produces besides the embedding itself; the
/// attention matrices are exposed for invariant checks (each row of each
/// attention matrix sums to one).
pub struct ScaleEmbedding {
    pub embedding: NodeId,
    pub pooled_input: NodeId,
    pub attention: Vec<NodeId>,
}

/// Embeds features at one scale. `f` is the base-resolution T x dim input.
pub fn embed_scale(
    g: &mut Graph,
    f: NodeId,
    scale: usize,
    nodes: &ScaleNodes,
) -> Result<ScaleEmbedding> {
    let t = g.value(f).nrows();
    let dim = g.value(f).ncols();
    let d_head = g.value(nodes.heads[0].w_q).ncols();
    if d_head * nodes.heads.len() != dim {
        return Err(Error::ShapeMismatch {
            context: format!("scale {scale} attention width"),
            expected: format!("n_heads * d_head == {dim}"),
            found: format!("{} * {d_head}", nodes.heads.len()),
        });
    }

    let spec = PoolSpec::for_scale(scale, t);
    let pooled = if spec.k == 1 && spec.stride == 1 && spec.pad == 0 {
        f
    } else {
        g.avg_pool1d(f, spec.k, spec.stride, spec.pad)
    };

    let u = g.layer_norm_rows(pooled, nodes.ln1_gain, nodes.ln1_bias, LAYER_NORM_EPS);

    let mut attention = Vec::with_capacity(nodes.heads.len());
    let mut head_outputs = Vec::with_capacity(nodes.heads.len());
    for head in &nodes.heads {
        let q = g.matmul(u, head.w_q);
        let k = g.matmul(u, head.w_k);
        let v = g.matmul(u, head.w_v);
        let d = g.value(q).ncols() as f64;
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scaled = g.scalar_mul(scores, 1.0 / d.sqrt());
        let attn = g.softmax_rows(scaled);
        attention.push(attn);
        head_outputs.push(g.matmul(attn, v));
    }
    let concat = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)
    };
    let attended = g.add(u, concat);

    let ln2 = g.layer_norm_rows(attended, nodes.ln2_gain, nodes.ln2_bias, LAYER_NORM_EPS);
    let mlp = g.matmul(ln2, nodes.mlp_w);
    let mlp = g.add_row_vec(mlp, nodes.mlp_b);
    let embedding = g.add(attended, mlp);

    Ok(ScaleEmbedding {
        embedding,
        pooled_input: pooled,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    /// Naive double-loop pooling, the independent oracle for temporal_pool.
    fn pool_oracle(x: &Array2<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
        let (t, c) = x.dim();
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut out = Array2::zeros((t_out, c));
        for o in 0..t_out {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let pos = o as isize * stride as isize + j as isize - pad as isize;
                    if pos >= 0 && pos < t as isize {
                        acc += x[(pos as usize, ch)];
                    }
                }
                out[(o, ch)] = acc / k as f64;
            }
        }
        out
    }

    /// Naive three-loop attention with residual, the oracle for
    /// attention_head.
    fn attention_oracle(
        f: &Array2<f64>,
        wq: &Array2<f64>,
        wk: &Array2<f64>,
        wv: &Array2<f64>,
    ) -> Array2<f64> {
        let q = f.dot(wq);
        let k = f.dot(wk);
        let v = f.dot(wv);
        let (t, d) = q.dim();
        let mut out = f.clone();
        for i in 0..t {
            // Softmax over keys for query i.
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[(i, c)] * k[(j, c)];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                let w = exps[j] / sum;
                for c in 0..v.ncols() {
                    out[(i, c)] += w * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn pool_matches_worked_example() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(
            temporal_pool(&x, 2, 2, 0).unwrap(),
            array![[1.5], [3.5]]
        );
    }

    #[test]
    fn pool_matches_naive_oracle_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_mat(&mut rng, 17, 5);
        let ours = temporal_pool(&x, 3, 2, 1).unwrap();
        let oracle = pool_oracle(&x, 3, 2, 1);
        assert_eq!(ours.dim(), oracle.dim());
        for (a, b) in ours.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_rejects_oversized_window() {
        let x = array![[1.0], [2.0]];
        assert!(temporal_pool(&x, 5, 1, 0).is_err());
        assert!(temporal_pool(&x, 0, 1, 0).is_err());
    }

    #[test]
    fn pool_config_reaches_ceil_lengths() {
        for t in 1..50 {
            for s in [1usize, 2, 4] {
                let spec = PoolSpec::for_scale(s, t);
                let want = (t + s - 1) / s;
                assert_eq!(spec.output_len(t), want, "t={t} s={s}");
                if t % s == 0 {
                    assert_eq!(spec.pad, 0);
                }
            }
        }
    }

    #[test]
    fn single_snippet_identity_projection_doubles_features() {
        let mut g = Graph::new();
        let f = g.leaf(array![[0.5, -1.0, 2.0]]);
        let eye = Array2::eye(3);
        let head = HeadNodes {
            w_q: g.leaf(eye.clone()),
            w_k: g.leaf(eye.clone()),
            w_v: g.leaf(eye),
        };
        let out = attention_head(&mut g, f, &head).unwrap();
        let expect = array![[1.0, -2.0, 4.0]];
        for (a, b) in g.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_snippets_average_to_double() {
        // Two identical rows: attention weights are 0.5/0.5 so the attended
        // value equals the row itself and the residual doubles it.
        let mut g = Graph::new();
        let row = [0.3, 0.7];
        let f = g.leaf(array![[row[0], row[1]], [row[0], row[1]]]);
        let eye = Array2::eye(2);
        let head = HeadNodes {
            w_q: g.leaf(eye.clone()),
            w_k: g.leaf(eye.clone()),
            w_v: g.leaf(eye),
        };
        let out = attention_head(&mut g, f, &head).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.value(out)[(i, j)] - 2.0 * row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_three_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f0 = rand_mat(&mut rng, 6, 4);
        let wq = rand_mat(&mut rng, 4, 4);
        let wk = rand_mat(&mut rng, 4, 4);
        let wv = rand_mat(&mut rng, 4, 4);
        let mut g = Graph::new();
        let f = g.leaf(f0.clone());
        let head = HeadNodes {
            w_q: g.leaf(wq.clone()),
            w_k: g.leaf(wk.clone()),
            w_v: g.leaf(wv.clone()),
        };
        let out = attention_head(&mut g, f, &head).unwrap();
        let oracle = attention_oracle(&f0, &wq, &wk, &wv);
        for (a, b) in g.value(out).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_head_rejects_non_square_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut g = Graph::new();
        let f0 = rand_mat(&mut rng, 3, 4);
        let f = g.leaf(f0);
        let w = rand_mat(&mut rng, 4, 2);
        let head = HeadNodes {
            w_q: g.leaf(w.clone()),
            w_k: g.leaf(w.clone()),
            w_v: g.leaf(w),
        };
        assert!(attention_head(&mut g, f, &head).is_err());
    }

    fn fresh_scale_nodes(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        dim: usize,
        n_heads: usize,
    ) -> ScaleNodes {
        let d_head = dim / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadNodes {
                w_q: g.leaf(rand_mat(rng, dim, d_head)),
                w_k: g.leaf(rand_mat(rng, dim, d_head)),
                w_v: g.leaf(rand_mat(rng, dim, d_head)),
            })
            .collect();
        ScaleNodes {
            ln1_gain: g.leaf(Array2::ones((1, dim))),
            ln1_bias: g.leaf(Array2::zeros((1, dim))),
            heads,
            ln2_gain: g.leaf(Array2::ones((1, dim))),
            ln2_bias: g.leaf(Array2::zeros((1, dim))),
            mlp_w: g.leaf(rand_mat(rng, dim, dim)),
            mlp_b: g.leaf(rand_mat(rng, 1, dim)),
        }
    }

    #[test]
    fn scale_lengths_follow_the_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f0 = rand_mat(&mut rng, 100, 4);
        let mut g = Graph::new();
        let f = g.leaf(f0);
        for (scale, want) in [(1usize, 100usize), (2, 50)] {
            let nodes = fresh_scale_nodes(&mut g, &mut rng, 4, 2);
            let out = embed_scale(&mut g, f, scale, &nodes).unwrap();
            assert_eq!(g.value(out.embedding).dim(), (want, 4));
        }
    }

    #[test]
    fn single_head_embed_composes_from_attention_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let f0 = rand_mat(&mut rng, 5, 4);

        let mut g = Graph::new();
        let f = g.leaf(f0.clone());
        let nodes = fresh_scale_nodes(&mut g, &mut rng, 4, 1);
        let out = embed_scale(&mut g, f, 1, &nodes).unwrap();

        // Rebuild by hand: attention_head over the normalized input, then
        // the MLP block.
        let u = g.layer_norm_rows(f, nodes.ln1_gain, nodes.ln1_bias, LAYER_NORM_EPS);
        let a = attention_head(&mut g, u, &nodes.heads[0]).unwrap();
        let ln2 = g.layer_norm_rows(a, nodes.ln2_gain, nodes.ln2_bias, LAYER_NORM_EPS);
        let mlp = g.matmul(ln2, nodes.mlp_w);
        let mlp = g.add_row_vec(mlp, nodes.mlp_b);
        let manual = g.add(a, mlp);

        for (x, y) in g.value(out.embedding).iter().zip(g.value(manual).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mlp_returns_the_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let f0 = rand_mat(&mut rng, 6, 4);
        let mut g = Graph::new();
        let f = g.leaf(f0);
        let mut nodes = fresh_scale_nodes(&mut g, &mut rng, 4, 2);
        nodes.mlp_w = g.leaf(Array2::zeros((4, 4)));
        nodes.mlp_b = g.leaf(Array2::zeros((1, 4)));
        let out = embed_scale(&mut g, f, 1, &nodes).unwrap();

        // E must equal the attended residual path: u + concat(heads).
        let u = g.layer_norm_rows(f, nodes.ln1_gain, nodes.ln1_bias, LAYER_NORM_EPS);
        let h0 = head_attention(&mut g, u, &nodes.heads[0]);
        let h1 = head_attention(&mut g, u, &nodes.heads[1]);
        let cat = g.concat_cols(&[h0, h1]);
        let manual = g.add(u, cat);
        for (x, y) in g.value(out.embedding).iter().zip(g.value(manual).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let f0 = rand_mat(&mut rng, 9, 4);
        let mut g = Graph::new();
        let f = g.leaf(f0);
        let nodes = fresh_scale_nodes(&mut g, &mut rng, 4, 2);
        let out = embed_scale(&mut g, f, 2, &nodes).unwrap();
        assert_eq!(out.attention.len(), 2);
        for attn in &out.attention {
            let a = g.value(*attn);
            assert_eq!(a.dim(), (5, 5)); // ceil(9 / 2)
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embed_gradients_match_finite_differences() {
        // Differentiate a random linear functional of the embedding with
        // respect to every encoder parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let f0 = rand_mat(&mut rng, 5, 4);
        let probe = rand_mat(&mut rng, 5, 4);

        // Parameter values, mutated by the finite-difference loop.
        let mut params: Vec<Array2<f64>> = vec![
            Array2::ones((1, 4)),          // ln1 gain
            Array2::zeros((1, 4)),         // ln1 bias
            rand_mat(&mut rng, 4, 2),      // h0 wq
            rand_mat(&mut rng, 4, 2),      // h0 wk
            rand_mat(&mut rng, 4, 2),      // h0 wv
            rand_mat(&mut rng, 4, 2),      // h1 wq
            rand_mat(&mut rng, 4, 2),      // h1 wk
            rand_mat(&mut rng, 4, 2),      // h1 wv
            Array2::ones((1, 4)),          // ln2 gain
            Array2::zeros((1, 4)),         // ln2 bias
            rand_mat(&mut rng, 4, 4),      // mlp w
            rand_mat(&mut rng, 1, 4),      // mlp b
        ];

        let eval = |params: &[Array2<f64>]| -> (f64, crate::autodiff::Gradients, Vec<NodeId>) {
            let mut g = Graph::new();
            let f = g.leaf(f0.clone());
            let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
            let nodes = ScaleNodes {
                ln1_gain: ids[0],
                ln1_bias: ids[1],
                heads: vec![
                    HeadNodes { w_q: ids[2], w_k: ids[3], w_v: ids[4] },
                    HeadNodes { w_q: ids[5], w_k: ids[6], w_v: ids[7] },
                ],
                ln2_gain: ids[8],
                ln2_bias: ids[9],
                mlp_w: ids[10],
                mlp_b: ids[11],
            };
            let out = embed_scale(&mut g, f, 2, &nodes).unwrap();
            let pooled_probe = avg_pool_value(&probe, 2, 2, 1);
            let pr = g.leaf(pooled_probe);
            let prod = g.mul(out.embedding, pr);
            let loss = g.sum_all(prod);
            let val = g.scalar(loss);
            let grads = g.backward(loss).unwrap();
            (val, grads, ids)
        };

        let (_, grads, ids) = eval(&params);
        let h = 1e-6;
        for (pi, id) in ids.iter().enumerate() {
            let shape = params[pi].dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = params[pi][(i, j)];
                    params[pi][(i, j)] = orig + h;
                    let (lp, _, _) = eval(&params);
                    params[pi][(i, j)] = orig - h;
                    let (lm, _, _) = eval(&params);
                    params[pi][(i, j)] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = grads.get(*id)[(i, j)];
                    let denom = a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (a - fd).abs() / denom < 1e-5,
                        "param {pi} ({i},{j}): analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }
}
