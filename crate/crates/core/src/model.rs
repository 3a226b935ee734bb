//! Model assembly: the named parameter table, its initialization, and the
//! forward pass that turns features into per-scale outputs.
//!
//! Parameters live in a `BTreeMap<String, Array2<f64>>` so every traversal
//! (initialization, optimizer steps, checkpointing) sees the same order.
//! Names encode the role: `enc.s{s}.*` for the per-scale encoder,
//! `head.s{s}.cls.*` and `head.s{s}.mask.*` for the two heads, and `fc.*`
//! for the two consistency projections shared across scales.
//!
//! Weight matrices initialize uniform in (-a, a) with
//! a = sqrt(6 / (fan_in + fan_out)); biases start at zero and layer-norm
//! gains at one. All random draws come from one seeded stream, consumed in
//! sorted name order, so a seed pins the whole table bitwise.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::{EncoderConfig, TrainConfig};
use crate::encoder::{embed_scale, HeadNodes, PoolSpec, ScaleNodes};
use crate::error::{Error, Result};
use crate::heads::{classify, predict_masks, ClassifyNodes, MaskNodes, CONV_WIDTH};
use crate::losses::ConsistencyNodes;

/// Structural hyperparameters that fix every tensor's shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    /// Temporal scales, strictly increasing.
    pub scales: Vec<usize>,
    /// Base-resolution snippet count T.
    pub snippets: usize,
    /// Feature and embedding width C.
    pub dim: usize,
    /// Foreground classes K; the heads emit K+1 channels.
    pub num_classes: usize,
    pub n_heads: usize,
}

impl ModelShape {
    pub fn new(train: &TrainConfig, encoder: &EncoderConfig, num_classes: usize) -> Result<Self> {
        let shape = Self {
            scales: train.scales.clone(),
            snippets: train.snippets,
            dim: encoder.channels,
            num_classes,
            n_heads: encoder.n_heads,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.scales.is_empty() {
            return bad("at least one temporal scale is required".into());
        }
        for pair in self.scales.windows(2) {
            if pair[0] >= pair[1] {
                return bad("scales must be strictly increasing".into());
            }
        }
        if self.scales[0] == 0 {
            return bad("scales must be >= 1".into());
        }
        if self.snippets == 0 || self.dim == 0 || self.num_classes == 0 {
            return bad("snippets, dim and num_classes must be >= 1".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return bad(format!(
                "attention width {} must divide into {} heads",
                self.dim, self.n_heads
            ));
        }
        Ok(())
    }

    /// Snippet count at one scale: ceil(T / s).
    pub fn scale_len(&self, scale: usize) -> usize {
        PoolSpec::for_scale(scale, self.snippets).output_len(self.snippets)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Every tensor's name and shape, plus how it initializes.
    fn tensor_specs(&self) -> Vec<(String, (usize, usize), Init)> {
        let c = self.dim;
        let k1 = self.num_classes + 1;
        let d = self.head_dim();
        let mut specs = Vec::new();
        for &s in &self.scales {
            let p = |suffix: &str| format!("enc.s{s}.{suffix}");
            specs.push((p("ln1.gain"), (1, c), Init::One));
            specs.push((p("ln1.bias"), (1, c), Init::Zero));
            for i in 0..self.n_heads {
                specs.push((p(&format!("h{i}.wq")), (c, d), Init::Xavier));
                specs.push((p(&format!("h{i}.wk")), (c, d), Init::Xavier));
                specs.push((p(&format!("h{i}.wv")), (c, d), Init::Xavier));
            }
            specs.push((p("ln2.gain"), (1, c), Init::One));
            specs.push((p("ln2.bias"), (1, c), Init::Zero));
            specs.push((p("mlp.w"), (c, c), Init::Xavier));
            specs.push((p("mlp.b"), (1, c), Init::Zero));

            let t_s = self.scale_len(s);
            let h = |suffix: &str| format!("head.s{s}.{suffix}");
            specs.push((h("cls.w"), (CONV_WIDTH * c, k1), Init::Xavier));
            specs.push((h("cls.b"), (1, k1), Init::Zero));
            specs.push((h("mask.c1.w"), (CONV_WIDTH * c, c), Init::Xavier));
            specs.push((h("mask.c1.b"), (1, c), Init::Zero));
            specs.push((h("mask.c2.w"), (CONV_WIDTH * c, c), Init::Xavier));
            specs.push((h("mask.c2.b"), (1, c), Init::Zero));
            specs.push((h("mask.c3.w"), (CONV_WIDTH * c, t_s), Init::Xavier));
            specs.push((h("mask.c3.b"), (1, t_s), Init::Zero));
        }
        specs.push(("fc.p.w".into(), (c, c), Init::Xavier));
        specs.push(("fc.p.b".into(), (1, c), Init::Zero));
        specs.push(("fc.m.w".into(), (c, c), Init::Xavier));
        specs.push(("fc.m.b".into(), (1, c), Init::Zero));
        specs
    }

    /// Recovers the shape from a loaded tensor table plus the TrainConfig
    /// stored beside it, cross-checking every dimension.
    pub fn infer(tensors: &BTreeMap<String, Array2<f64>>, train: &TrainConfig) -> Result<Self> {
        let missing = |name: &str| Error::ShapeMismatch {
            context: "checkpoint".into(),
            expected: format!("tensor {name}"),
            found: "missing".into(),
        };
        let first_scale = *train
            .scales
            .first()
            .ok_or_else(|| Error::InvalidConfig("checkpoint config has no scales".into()))?;
        let ln1 = tensors
            .get(&format!("enc.s{first_scale}.ln1.gain"))
            .ok_or_else(|| missing("enc ln1.gain"))?;
        let dim = ln1.ncols();
        let n_heads = (0..)
            .take_while(|i| tensors.contains_key(&format!("enc.s{first_scale}.h{i}.wq")))
            .count();
        if n_heads == 0 {
            return Err(missing("enc h0.wq"));
        }
        let cls = tensors
            .get(&format!("head.s{first_scale}.cls.w"))
            .ok_or_else(|| missing("head cls.w"))?;
        if cls.ncols() < 2 {
            return Err(Error::InvalidConfig(
                "classification head needs at least two channels".into(),
            ));
        }
        let shape = Self {
            scales: train.scales.clone(),
            snippets: train.snippets,
            dim,
            num_classes: cls.ncols() - 1,
            n_heads,
        };
        shape.validate()?;
        // Cross-check the full table against the recomputed spec list.
        let specs = shape.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::ShapeMismatch {
                context: "checkpoint tensor table".into(),
                expected: format!("{} tensors", specs.len()),
                found: format!("{}", tensors.len()),
            });
        }
        for (name, dims, _) in specs {
            let t = tensors.get(&name).ok_or_else(|| missing(&name))?;
            if t.dim() != dims {
                return Err(Error::ShapeMismatch {
                    context: format!("checkpoint tensor {name}"),
                    expected: format!("{dims:?}"),
                    found: format!("{:?}", t.dim()),
                });
            }
        }
        Ok(shape)
    }
}

enum Init {
    Xavier,
    Zero,
    One,
}

/// The learned tensors, keyed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// Fresh parameters for `shape`, drawn from a single seeded stream in
    /// sorted name order (deterministic per seed).
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut dims = BTreeMap::new();
        for (name, shape_wh, init) in shape.tensor_specs() {
            if dims.insert(name.clone(), (shape_wh, init)).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate tensor name {name}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, ((rows, cols), init)) in dims {
            let value = match init {
                Init::Zero => Array2::zeros((rows, cols)),
                Init::One => Array2::ones((rows, cols)),
                Init::Xavier => {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    let mut v = Array2::zeros((rows, cols));
                    for i in 0..rows {
                        for j in 0..cols {
                            v[(i, j)] = rng.gen_range(-a..a);
                        }
                    }
                    v
                }
            };
            tensors.insert(name, value);
        }
        Ok(Self { tensors })
    }

    /// Wraps a loaded tensor table (checkpoint path).
    pub fn from_tensors(tensors: BTreeMap<String, Array2<f64>>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Array2<f64>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors.get(name).ok_or_else(|| Error::ShapeMismatch {
            context: "parameter table".into(),
            expected: format!("tensor {name}"),
            found: "missing".into(),
        })
    }

    /// Name of the first tensor containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }
}

/// One scale's forward nodes, snippet-major (row = snippet).
#[derive(Debug, Clone)]
pub struct ScaleForward {
    pub scale: usize,
    pub embedding: NodeId,
    pub probs: NodeId,
    pub scores: NodeId,
    pub masks: NodeId,
    /// Per-head attention matrices, rows summing to one.
    pub attention: Vec<NodeId>,
}

/// A recorded forward pass: per-scale output nodes plus the graph ids of
/// every parameter, for routing gradients back to names.
pub struct ForwardPass {
    pub scales: Vec<ScaleForward>,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub consistency: ConsistencyNodes,
}

/// Records the full forward pass for one video onto `g`.
pub fn forward(
    g: &mut Graph,
    features: &Array2<f64>,
    params: &ModelParams,
    shape: &ModelShape,
) -> Result<ForwardPass> {
    if features.dim() != (shape.snippets, shape.dim) {
        return Err(Error::ShapeMismatch {
            context: "forward features".into(),
            expected: format!("{}x{}", shape.snippets, shape.dim),
            found: format!("{:?}", features.dim()),
        });
    }
    let mut param_nodes = BTreeMap::new();
    for (name, value) in params.tensors() {
        param_nodes.insert(name.clone(), g.leaf(value.clone()));
    }
    // Shape errors surface before any node is read back.
    for (name, dims, _) in shape.tensor_specs() {
        let got = params.get(&name)?.dim();
        if got != dims {
            return Err(Error::ShapeMismatch {
                context: format!("parameter {name}"),
                expected: format!("{dims:?}"),
                found: format!("{got:?}"),
            });
        }
    }
    let node = |names: &BTreeMap<String, NodeId>, name: String| names[&name];

    let f = g.leaf(features.clone());
    let mut scales = Vec::with_capacity(shape.scales.len());
    for &s in &shape.scales {
        let e = |suffix: &str| node(&param_nodes, format!("enc.s{s}.{suffix}"));
        let h = |suffix: &str| node(&param_nodes, format!("head.s{s}.{suffix}"));
        let heads = (0..shape.n_heads)
            .map(|i| HeadNodes {
                w_q: e(&format!("h{i}.wq")),
                w_k: e(&format!("h{i}.wk")),
                w_v: e(&format!("h{i}.wv")),
            })
            .collect();
        let enc_nodes = ScaleNodes {
            ln1_gain: e("ln1.gain"),
            ln1_bias: e("ln1.bias"),
            heads,
            ln2_gain: e("ln2.gain"),
            ln2_bias: e("ln2.bias"),
            mlp_w: e("mlp.w"),
            mlp_b: e("mlp.b"),
        };
        let embedded = embed_scale(g, f, s, &enc_nodes)?;
        let cls = classify(
            g,
            embedded.embedding,
            &ClassifyNodes {
                w: h("cls.w"),
                b: h("cls.b"),
            },
        );
        let masks = predict_masks(
            g,
            embedded.embedding,
            &MaskNodes {
                w1: h("mask.c1.w"),
                b1: h("mask.c1.b"),
                w2: h("mask.c2.w"),
                b2: h("mask.c2.b"),
                w3: h("mask.c3.w"),
                b3: h("mask.c3.b"),
            },
        );
        scales.push(ScaleForward {
            scale: s,
            embedding: embedded.embedding,
            probs: cls.probs,
            scores: cls.scores,
            masks,
            attention: embedded.attention,
        });
    }
    let consistency = ConsistencyNodes {
        wp: node(&param_nodes, "fc.p.w".into()),
        bp: node(&param_nodes, "fc.p.b".into()),
        wm: node(&param_nodes, "fc.m.w".into()),
        bm: node(&param_nodes, "fc.m.b".into()),
    };
    Ok(ForwardPass {
        scales,
        param_nodes,
        consistency,
    })
}

/// One scale's outputs as plain values, in the column-per-snippet
/// orientation the decoder consumes.
#[derive(Debug, Clone)]
pub struct ScaleOutputs {
    pub scale: usize,
    /// (K+1) x T^s; each column is the class distribution of one snippet,
    /// row K = background.
    pub probs: Array2<f64>,
    /// T^s x T^s; column t is the predicted mask conditioned on snippet t.
    pub masks: Array2<f64>,
    /// T^s x C attention embedding, row per snippet (similarity dumps).
    pub embedding: Array2<f64>,
}

/// Runs the forward pass on a throwaway graph and returns plain outputs.
pub fn forward_outputs(
    features: &Array2<f64>,
    params: &ModelParams,
    shape: &ModelShape,
) -> Result<Vec<ScaleOutputs>> {
    let mut g = Graph::new();
    let pass = forward(&mut g, features, params, shape)?;
    let mut out = Vec::with_capacity(pass.scales.len());
    for sf in &pass.scales {
        out.push(ScaleOutputs {
            scale: sf.scale,
            probs: g.value(sf.probs).t().to_owned(),
            masks: g.value(sf.masks).t().to_owned(),
            embedding: g.value(sf.embedding).clone(),
        });
    }
    Ok(out)
}
