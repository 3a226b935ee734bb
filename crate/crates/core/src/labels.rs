//! Ground-truth target assignment on the snippet grid.
//!
//! Snippet t at scale s covers the seconds interval
//! [t * s * delta, (t + 1) * s * delta) where delta = duration / T. A
//! snippet belongs to an instance when its temporal center falls inside the
//! instance's closed [start, end] interval. The per-snippet mask target for
//! a foreground snippet marks every snippet assigned to the same instance,
//! so each foreground column of the mask target is one contiguous run.

use ndarray::Array2;

use crate::data::VideoAnnotations;
use crate::error::{Error, Result};

/// Targets of one video at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub scale: usize,
    /// Per-snippet class index; `num_classes` means background.
    pub class: Vec<usize>,
    /// Per-snippet instance index into the video's annotation list, or None
    /// for background.
    pub instance: Vec<Option<usize>>,
    /// T^s x T^s binary mask targets; column t is the mask for snippet t
    /// (all zeros exactly when snippet t is background).
    pub mask: Array2<f64>,
}

impl ScaleTargets {
    pub fn snippets(&self) -> usize {
        self.class.len()
    }

    pub fn num_foreground(&self) -> usize {
        self.instance.iter().filter(|i| i.is_some()).count()
    }
}

/// Assigns classification and mask targets for one video at one scale.
///
/// `base_snippets` is the video's full-resolution snippet count T; the scale
/// works on ceil(T / s) snippets. Instances must not overlap (touching
/// endpoints are fine); class labels must resolve in `classes`.
pub fn assign_targets(
    video_id: &str,
    video: &VideoAnnotations,
    classes: &[String],
    base_snippets: usize,
    scale: usize,
) -> Result<ScaleTargets> {
    if base_snippets == 0 || scale == 0 {
        return Err(Error::InvalidConfig(
            "assign_targets needs base_snippets >= 1 and scale >= 1".into(),
        ));
    }

    // Sorted copy to detect overlap; assignment itself uses original indices.
    let mut order: Vec<usize> = (0..video.instances.len()).collect();
    order.sort_by(|&a, &b| {
        video.instances[a]
            .start_s
            .total_cmp(&video.instances[b].start_s)
    });
    for pair in order.windows(2) {
        let (first, second) = (&video.instances[pair[0]], &video.instances[pair[1]]);
        if second.start_s < first.end_s {
            return Err(Error::OverlappingInstances {
                video: video_id.to_string(),
                a: pair[0],
                b: pair[1],
            });
        }
    }

    let num_classes = classes.len();
    let t_scale = (base_snippets + scale - 1) / scale;
    let delta = video.duration_s / base_snippets as f64;

    let mut class = vec![num_classes; t_scale];
    let mut instance: Vec<Option<usize>> = vec![None; t_scale];
    for t in 0..t_scale {
        let center = (t as f64 + 0.5) * scale as f64 * delta;
        // First instance containing the center wins; ties only happen when
        // a center sits exactly on a shared boundary of touching instances.
        for (idx, inst) in video.instances.iter().enumerate() {
            if center >= inst.start_s && center <= inst.end_s {
                let label = classes.iter().position(|c| c == &inst.label).ok_or_else(|| {
                    Error::InvalidAnnotation {
                        video: video_id.to_string(),
                        reason: format!("label {:?} not in the class list", inst.label),
                    }
                })?;
                class[t] = label;
                instance[t] = Some(idx);
                break;
            }
        }
    }

    let mut mask = Array2::zeros((t_scale, t_scale));
    for t in 0..t_scale {
        if let Some(own) = instance[t] {
            for r in 0..t_scale {
                if instance[r] == Some(own) {
                    mask[(r, t)] = 1.0;
                }
            }
        }
    }

    Ok(ScaleTargets {
        scale,
        class,
        instance,
        mask,
    })
}
