//! Adam optimization, the training loop, and checkpoint serialization.
//!
//! Training is deterministic end to end: parameter init, epoch shuffling
//! and every forward/backward run from seeded generators and fixed
//! reduction orders, so one seed pins the final checkpoint bitwise, with or
//! without worker threads. A non-finite loss, gradient or parameter aborts
//! the run; the last good parameters are written out before the error
//! surfaces so the failure leaves a usable checkpoint behind.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{AnnotationSet, FeatureSequence};
use crate::error::{Error, Result};
use crate::labels::{assign_targets, ScaleTargets};
use crate::losses::{total_loss, BranchTrace, LossBreakdown, ScaleTermInputs, TermValues};
use crate::model::{forward, ModelParams, ModelShape};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TAGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First and second moment accumulators, keyed like the parameter table.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. `grads` must cover exactly the parameter
/// names; moments initialize lazily at zero.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let names: Vec<&String> = params.tensors().keys().collect();
    if grads.len() != names.len() || !names.iter().all(|n| grads.contains_key(*n)) {
        return Err(Error::ShapeMismatch {
            context: "adam_step".into(),
            expected: format!("{} gradient tensors matching the parameters", names.len()),
            found: format!("{}", grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let m_corr = 1.0 - config.beta1.powi(t);
    let v_corr = 1.0 - config.beta2.powi(t);
    for (name, value) in params.tensors_mut().iter_mut() {
        let g = &grads[name];
        if g.dim() != value.dim() {
            return Err(Error::ShapeMismatch {
                context: format!("adam_step gradient {name}"),
                expected: format!("{:?}", value.dim()),
                found: format!("{:?}", g.dim()),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        for ((mij, vij), (pij, gij)) in m.iter_mut().zip(v.iter_mut()).zip(value.iter_mut().zip(g))
        {
            *mij = config.beta1 * *mij + (1.0 - config.beta1) * gij;
            *vij = config.beta2 * *vij + (1.0 - config.beta2) * gij * gij;
            let m_hat = *mij / m_corr;
            let v_hat = *vij / v_corr;
            *pij -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// One video ready for the loop: features as f64 plus per-scale targets,
/// aligned with the shape's scale order.
#[derive(Debug, Clone)]
pub struct TrainVideo {
    pub video_id: String,
    pub features: Array2<f64>,
    pub targets: Vec<ScaleTargets>,
}

/// Joins one feature sequence with its annotations: validates the snippet
/// count and width against the model shape, takes the duration from the
/// annotations (the feature file's is a placeholder), and assigns targets
/// at every scale.
pub fn prepare_video(
    seq: &FeatureSequence,
    ann: &AnnotationSet,
    shape: &ModelShape,
) -> Result<TrainVideo> {
    let video = ann
        .videos
        .get(&seq.video_id)
        .ok_or_else(|| Error::InvalidAnnotation {
            video: seq.video_id.clone(),
            reason: "no annotation entry for this feature file".into(),
        })?;
    if seq.snippets() != shape.snippets || seq.dim() != shape.dim {
        return Err(Error::ShapeMismatch {
            context: format!("features of {}", seq.video_id),
            expected: format!("{}x{}", shape.snippets, shape.dim),
            found: format!("{}x{}", seq.snippets(), seq.dim()),
        });
    }
    let targets = shape
        .scales
        .iter()
        .map(|&s| assign_targets(&seq.video_id, video, &ann.classes, shape.snippets, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainVideo {
        video_id: seq.video_id.clone(),
        features: seq.values.mapv(f64::from),
        targets,
    })
}

/// Mean per-term losses of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub terms: TermValues,
}

pub const METRICS_HEADER: &str = "epoch,L_c,L_m,L_pp,L_fc,total";

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch,
            m.terms.classification,
            m.terms.mask,
            m.terms.promotion,
            m.terms.consistency,
            m.terms.total()
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Forward plus backward for one video; returns the loss, its breakdown and
/// gradients keyed by parameter name.
fn video_backward(
    video: &TrainVideo,
    params: &ModelParams,
    shape: &ModelShape,
    config: &TrainConfig,
) -> Result<(f64, LossBreakdown, BTreeMap<String, Array2<f64>>)> {
    let mut g = Graph::new();
    let pass = forward(&mut g, &video.features, params, shape)?;
    if video.targets.len() != pass.scales.len() {
        return Err(Error::ShapeMismatch {
            context: format!("targets of {}", video.video_id),
            expected: format!("{} scales", pass.scales.len()),
            found: format!("{}", video.targets.len()),
        });
    }
    let inputs: Vec<ScaleTermInputs> = pass
        .scales
        .iter()
        .zip(&video.targets)
        .map(|(sf, tg)| ScaleTermInputs {
            scale: sf.scale,
            embedding: sf.embedding,
            probs: sf.probs,
            scores: sf.scores,
            masks: sf.masks,
            targets: tg,
        })
        .collect();
    let mut trace = BranchTrace::new();
    let (loss, breakdown) = total_loss(&mut g, &inputs, &pass.consistency, &config.loss, &mut trace)?;
    let loss_value = g.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss of video {}", video.video_id),
        });
    }
    let grads = g.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, node) in &pass.param_nodes {
        let grad = grads.get(*node).clone();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name} on video {}", video.video_id),
            });
        }
        by_name.insert(name.clone(), grad);
    }
    Ok((loss_value, breakdown, by_name))
}

/// Splits `items` into `workers` contiguous chunks and maps them on scoped
/// threads; results come back in input order, so reductions downstream are
/// order-stable no matter the worker count.
fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut out: Vec<Option<R>> = Vec::new();
    out.resize_with(items.len(), || None);
    let slots: Vec<(usize, &mut [Option<R>])> = {
        let mut rest = out.as_mut_slice();
        let mut slots = Vec::new();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slots.push((start, head));
            start += take;
            rest = tail;
        }
        slots
    };
    std::thread::scope(|scope| {
        for (start, slot) in slots {
            let f = &f;
            scope.spawn(move || {
                for (offset, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(&items[start + offset]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Final parameters plus the per-epoch loss log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs the full training loop. Every epoch shuffles the video order
/// (seeded), batches it, averages per-video gradients per batch and takes
/// one Adam step. When `checkpoint` is given, the final parameters land
/// there; on a non-finite abort the last good parameters are written
/// instead and the error is returned. `metrics_csv` gets one row per epoch.
pub fn train(
    videos: &[TrainVideo],
    shape: &ModelShape,
    config: &TrainConfig,
    workers: usize,
    checkpoint: Option<&Path>,
    metrics_csv: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    shape.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one video".into()));
    }

    let mut params = ModelParams::init(shape, config.seed)?;
    let mut adam = AdamState::new();
    // Separate stream from the init draw so the two never alias.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);

    let save = |params: &ModelParams, metrics: &[EpochMetrics]| -> Result<()> {
        if let Some(path) = checkpoint {
            write_checkpoint(path, params, config)?;
        }
        if let Some(path) = metrics_csv {
            write_metrics_csv(path, metrics)?;
        }
        Ok(())
    };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_terms = TermValues::default();
        for batch in order.chunks(config.batch_size.max(1)) {
            let members: Vec<&TrainVideo> = batch.iter().map(|&i| &videos[i]).collect();
            let results = map_ordered(&members, workers, |video| {
                video_backward(video, &params, shape, config)
            });

            let mut grad_acc: BTreeMap<String, Array2<f64>> = params
                .tensors()
                .iter()
                .map(|(n, v)| (n.clone(), Array2::zeros(v.dim())))
                .collect();
            let batch_weight = 1.0 / batch.len() as f64;
            for result in results {
                let (_, breakdown, grads) = match result {
                    Ok(r) => r,
                    Err(e) => {
                        // Leave the last good parameters on disk, then fail.
                        save(&params, &metrics)?;
                        return Err(Error::TrainingAborted(e.to_string()));
                    }
                };
                epoch_terms.add(&breakdown.summed());
                for (name, grad) in grads {
                    grad_acc
                        .get_mut(&name)
                        .expect("gradient names match parameters")
                        .scaled_add(batch_weight, &grad);
                }
            }

            let snapshot = params.clone();
            adam_step(&mut params, &grad_acc, &mut adam, config)?;
            if let Some(name) = params.first_non_finite() {
                let name = name.to_string();
                params = snapshot;
                save(&params, &metrics)?;
                return Err(Error::TrainingAborted(format!(
                    "parameter {name} became non-finite at step {}",
                    adam.step_count()
                )));
            }
        }

        epoch_terms.scale_by(1.0 / videos.len() as f64);
        metrics.push(EpochMetrics {
            epoch,
            terms: epoch_terms,
        });
    }

    save(&params, &metrics)?;
    Ok(TrainOutcome { params, metrics })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.display().to_string(),
                context: context.into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path, context: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, context)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes the parameter table plus its TrainConfig: magic, version, tensor
/// count, then per tensor (in name order) the name, rank-2 dims and f64
/// little-endian payload, then the config as a length-prefixed JSON blob.
pub fn write_checkpoint(path: &Path, params: &ModelParams, config: &TrainConfig) -> Result<()> {
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite {
            context: format!("checkpoint tensor {name}"),
        });
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, tensor) in params.tensors() {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[2u8])?;
        out.write_all(&(tensor.nrows() as u32).to_le_bytes())?;
        out.write_all(&(tensor.ncols() as u32).to_le_bytes())?;
        for v in tensor.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    let blob = serde_json::to_vec(config).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    out.write_all(&(blob.len() as u32).to_le_bytes())?;
    out.write_all(&blob)?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; the tensor table is validated finite and the
/// trailing JSON blob parsed into a TrainConfig.
pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = read_u32(&mut r, path, "tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let mut len_buf = [0u8; 2];
        read_exact(&mut r, &mut len_buf, path, "tensor name length")?;
        let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
        read_exact(&mut r, &mut name_buf, path, "tensor name")?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::Truncated {
            path: path.display().to_string(),
            context: format!("tensor {i} name is not utf-8"),
        })?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, path, "tensor rank")?;
        if rank[0] != 2 {
            return Err(Error::ShapeMismatch {
                context: format!("checkpoint tensor {name}"),
                expected: "rank 2".into(),
                found: format!("rank {}", rank[0]),
            });
        }
        let rows = read_u32(&mut r, path, "tensor rows")? as usize;
        let cols = read_u32(&mut r, path, "tensor cols")? as usize;
        let mut payload = vec![0u8; rows * cols * 8];
        read_exact(&mut r, &mut payload, path, "tensor payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("checkpoint tensor {name}"),
            });
        }
        let tensor = Array2::from_shape_vec((rows, cols), values).map_err(|_| Error::Truncated {
            path: path.display().to_string(),
            context: format!("tensor {name} payload shape"),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                context: format!("duplicate tensor {name}"),
            });
        }
    }
    let blob_len = read_u32(&mut r, path, "config length")? as usize;
    let mut blob = vec![0u8; blob_len];
    read_exact(&mut r, &mut blob, path, "config blob")?;
    let config: TrainConfig = serde_json::from_slice(&blob).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    Ok((ModelParams::from_tensors(tensors), config))
}
