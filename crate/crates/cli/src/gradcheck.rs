//! Finite-difference verification of every loss term's gradients.
//!
//! For a batch of seeded random configurations, each loss term (and the
//! total) is rebuilt from scratch around perturbed parameter coordinates
//! and compared against the analytic gradient. Coordinates whose
//! perturbation flips a discrete choice (erosion tie, threshold selection,
//! hard-negative pick, top-k membership) are excluded: the loss is only
//! piecewise differentiable there, so both sides of the kink disagree by
//! construction. The branch digest recorded during each rebuild detects
//! exactly those flips.

use tags_core::autodiff::Graph;
use tags_core::config::{EncoderConfig, TrainConfig};
use tags_core::data::{generate_synthetic, SyntheticSpec};
use tags_core::losses::{
    build_classification_term, build_consistency_term, build_mask_term, build_promotion_term,
    total_loss, BranchTrace, ScaleTermInputs,
};
use tags_core::model::{forward, ModelParams, ModelShape};
use tags_core::train::{prepare_video, TrainVideo};
use tags_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    Classification,
    Mask,
    Promotion,
    Consistency,
    Total,
}

const TERMS: [(Term, &str); 5] = [
    (Term::Classification, "L_c"),
    (Term::Mask, "L_m"),
    (Term::Promotion, "L_pp"),
    (Term::Consistency, "L_fc"),
    (Term::Total, "total"),
];

/// Worst relative error observed for one loss term across all
/// configurations, with probe counts.
#[derive(Debug, Clone)]
pub struct TermReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Builds the chosen term summed over scales, mirroring how the total loss
/// aggregates them. Returns the objective node and the branch digest of the
/// build.
fn objective(
    g: &mut Graph,
    video: &TrainVideo,
    params: &ModelParams,
    shape: &ModelShape,
    config: &TrainConfig,
    term: Term,
) -> Result<(tags_core::autodiff::NodeId, u64, std::collections::BTreeMap<String, tags_core::autodiff::NodeId>)>
{
    let pass = forward(g, &video.features, params, shape)?;
    let mut trace = BranchTrace::new();
    let w = &config.loss;
    let node = match term {
        Term::Total => {
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
            total_loss(g, &inputs, &pass.consistency, w, &mut trace)?.0
        }
        _ => {
            let mut acc = None;
            for (sf, tg) in pass.scales.iter().zip(&video.targets) {
                trace.push(sf.scale as u64);
                let node = match term {
                    Term::Classification => {
                        build_classification_term(g, sf.probs, sf.scores, &tg.class, w, &mut trace)?
                    }
                    Term::Mask => build_mask_term(g, sf.masks, tg, w, &mut trace)?,
                    Term::Promotion => build_promotion_term(g, sf.masks, tg, w, &mut trace)?,
                    Term::Consistency => {
                        build_consistency_term(
                            g,
                            sf.embedding,
                            sf.probs,
                            sf.masks,
                            &pass.consistency,
                            w,
                            &mut trace,
                        )?
                        .0
                    }
                    Term::Total => unreachable!(),
                };
                acc = Some(match acc {
                    None => node,
                    Some(a) => g.add(a, node),
                });
            }
            acc.expect("at least one scale")
        }
    };
    Ok((node, trace.digest(), pass.param_nodes))
}

fn one_video(seed: u64, shape: &ModelShape) -> Result<TrainVideo> {
    let spec = SyntheticSpec {
        num_videos: 1,
        num_classes: shape.num_classes,
        snippets: shape.snippets,
        dim: shape.dim,
        noise_sigma: 0.25,
        min_len: 3,
        max_len: 6,
        max_instances: 2,
        min_gap: 2,
        seed,
    };
    let (features, anns) = generate_synthetic(&spec)?;
    prepare_video(&features[0], &anns, shape)
}

/// Checks every term on `configs` random setups (16 snippets, 3 classes,
/// scales 1 and 2). Probes the first and middle coordinate of every
/// parameter tensor with central differences at h = 1e-5.
pub fn run_gradcheck(seed: u64, configs: usize) -> Result<Vec<TermReport>> {
    let mut reports: Vec<TermReport> = TERMS
        .iter()
        .map(|&(_, name)| TermReport {
            name,
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        })
        .collect();

    let config = TrainConfig {
        snippets: 16,
        scales: vec![1, 2],
        ..TrainConfig::default()
    };
    let encoder = EncoderConfig {
        n_heads: 2,
        channels: 8,
    };
    let shape = ModelShape::new(&config, &encoder, 3)?;
    let h = 1e-5;

    for idx in 0..configs {
        let video = one_video(seed.wrapping_add(7919 * idx as u64), &shape)?;
        let mut params = ModelParams::init(&shape, seed.wrapping_add(31 * idx as u64 + 1))?;
        let names: Vec<String> = params.tensors().keys().cloned().collect();

        for (ti, &(term, _)) in TERMS.iter().enumerate() {
            let mut g = Graph::new();
            let (node, base_digest, param_nodes) =
                objective(&mut g, &video, &params, &shape, &config, term)?;
            let grads = g.backward(node)?;

            let eval = |params: &ModelParams| -> Result<(f64, u64)> {
                let mut g = Graph::new();
                let (node, digest, _) = objective(&mut g, &video, params, &shape, &config, term)?;
                Ok((g.scalar(node), digest))
            };

            for name in &names {
                let dims = params.get(name)?.dim();
                let mut probes = vec![(0, 0)];
                if dims.0 > 1 && dims.1 > 1 {
                    probes.push((dims.0 / 2, dims.1 / 2));
                }
                for (i, j) in probes {
                    let orig = params.get(name)?[(i, j)];
                    params.tensors_mut().get_mut(name).expect("known name")[(i, j)] = orig + h;
                    let (plus, digest_plus) = eval(&params)?;
                    params.tensors_mut().get_mut(name).expect("known name")[(i, j)] = orig - h;
                    let (minus, digest_minus) = eval(&params)?;
                    params.tensors_mut().get_mut(name).expect("known name")[(i, j)] = orig;
                    if digest_plus != base_digest || digest_minus != base_digest {
                        reports[ti].skipped += 1;
                        continue;
                    }
                    let fd = (plus - minus) / (2.0 * h);
                    let analytic = grads.get(param_nodes[name])[(i, j)];
                    let denom = analytic.abs().max(fd.abs()).max(1e-4);
                    let rel = (analytic - fd).abs() / denom;
                    if rel > reports[ti].max_rel_err {
                        reports[ti].max_rel_err = rel;
                    }
                    reports[ti].checked += 1;
                }
            }
        }
    }

    for r in &reports {
        if r.checked == 0 {
            return Err(Error::SpecInfeasible(format!(
                "gradcheck probed no coordinates for {}",
                r.name
            )));
        }
        // Discrete flips must stay rare or the check loses its teeth.
        if r.skipped * 5 > r.checked {
            return Err(Error::SpecInfeasible(format!(
                "gradcheck skipped {} of {} probes for {}",
                r.skipped,
                r.checked + r.skipped,
                r.name
            )));
        }
    }
    Ok(reports)
}
