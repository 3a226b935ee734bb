//! Seeded synthetic corpus for end-to-end testing.
//!
//! Each class (plus background) gets a fixed unit prototype vector; every
//! snippet emits its prototype plus isotropic Gaussian noise. Instances are
//! snippet-aligned, non-overlapping, and separated by a minimum gap, so the
//! ground truth is exactly representable on the snippet grid (one second per
//! snippet). Generation is a pure function of `SyntheticSpec`, seed included.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use std::collections::BTreeMap;

use crate::data::{AnnotationSet, FeatureSequence, Instance, Subset, VideoAnnotations};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    /// Number of action classes (background is implicit).
    pub num_classes: usize,
    /// Snippets per video; every video has the same length.
    pub snippets: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Instance length bounds, in snippets.
    pub min_len: usize,
    pub max_len: usize,
    pub max_instances: usize,
    /// Minimum background gap between consecutive instances, in snippets.
    pub min_gap: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            num_classes: 3,
            snippets: 64,
            dim: 16,
            noise_sigma: 0.1,
            min_len: 10,
            max_len: 22,
            max_instances: 2,
            min_gap: 6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::SpecInfeasible(msg));
        if self.num_videos == 0 || self.num_classes == 0 || self.dim == 0 || self.snippets == 0 {
            return bad("num_videos, num_classes, snippets and dim must all be >= 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "instance length bounds [{}, {}] must satisfy 1 <= min <= max",
                self.min_len, self.max_len
            ));
        }
        if self.max_instances == 0 {
            return bad("max_instances must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let worst = self.max_instances * self.max_len + (self.max_instances - 1) * self.min_gap;
        if worst > self.snippets {
            return bad(format!(
                "{} instances of up to {} snippets with gaps of {} need {} snippets, video has {}",
                self.max_instances, self.max_len, self.min_gap, worst, self.snippets
            ));
        }
        Ok(())
    }
}

/// Draws the corpus. Class labels are `action_<i>`; video ids are
/// `synth_<n>`; all videos land in the train subset (callers relabel for
/// held-out splits). Durations equal the snippet count, one second each.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<FeatureSequence>, AnnotationSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One unit prototype per class, plus a background prototype last.
    let prototypes: Vec<Vec<f64>> = (0..=spec.num_classes)
        .map(|_| random_unit_vector(&mut rng, spec.dim))
        .collect();

    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("action_{c}")).collect();
    let mut features = Vec::with_capacity(spec.num_videos);
    let mut videos = BTreeMap::new();

    for v in 0..spec.num_videos {
        let video_id = format!("synth_{v:04}");
        let placements = place_instances(spec, &mut rng);

        let mut class_of_snippet = vec![spec.num_classes; spec.snippets]; // background
        let mut instances = Vec::new();
        for &(start, len, class) in &placements {
            for t in start..start + len {
                class_of_snippet[t] = class;
            }
            instances.push(Instance {
                start_s: start as f64,
                end_s: (start + len) as f64,
                label: classes[class].clone(),
            });
        }

        let mut values = Array2::<f32>::zeros((spec.snippets, spec.dim));
        for t in 0..spec.snippets {
            let proto = &prototypes[class_of_snippet[t]];
            for d in 0..spec.dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values[(t, d)] = (proto[d] + spec.noise_sigma * noise) as f32;
            }
        }

        features.push(FeatureSequence::new(
            video_id.clone(),
            spec.snippets as f64,
            values,
        )?);
        videos.insert(
            video_id,
            VideoAnnotations {
                duration_s: spec.snippets as f64,
                subset: Subset::Train,
                instances,
            },
        );
    }

    Ok((features, AnnotationSet { classes, videos }))
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Picks (start, len, class) triples that fit with the mandatory gaps. The
/// feasibility check guarantees any drawn combination fits, so no rejection
/// loop is needed.
fn place_instances(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let n = rng.gen_range(1..=spec.max_instances);
    let lengths: Vec<usize> = (0..n)
        .map(|_| rng.gen_range(spec.min_len..=spec.max_len))
        .collect();
    let used: usize = lengths.iter().sum::<usize>() + (n - 1) * spec.min_gap;
    let mut slack = spec.snippets - used;

    let mut placements = Vec::with_capacity(n);
    let mut cursor = 0;
    for (i, &len) in lengths.iter().enumerate() {
        let lead = rng.gen_range(0..=slack);
        slack -= lead;
        cursor += lead + if i > 0 { spec.min_gap } else { 0 };
        let class = rng.gen_range(0..spec.num_classes);
        placements.push((cursor, len, class));
        cursor += len;
    }
    placements
}
