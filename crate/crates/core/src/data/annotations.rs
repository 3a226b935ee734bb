//! Annotation and prediction JSON, ActivityNet style.
//!
//! Annotations: `{"version": "1.0", "classes": [...], "database": {id:
//! {"duration": s, "subset": "train", "annotations": [{"segment": [a, b],
//! "label": "..."}]}}}`. Unknown fields are tolerated; missing required
//! fields fail with serde's path-naming errors. Segment times are validated
//! (0 <= start < end <= duration, label in the class list).
//!
//! Predictions: `{"results": {id: [{"label": .., "score": .., "segment":
//! [a, b]}]}}`. Empty result lists are legal.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// One ground-truth action instance, times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotations {
    pub duration_s: f64,
    pub subset: Subset,
    pub instances: Vec<Instance>,
}

/// A whole split's annotations plus the class vocabulary. The vocabulary
/// order defines class indices everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub classes: Vec<String>,
    pub videos: BTreeMap<String, VideoAnnotations>,
}

impl AnnotationSet {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Videos belonging to one subset, in id order.
    pub fn subset_videos(&self, subset: Subset) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|(_, v)| v.subset == subset)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn total_instances(&self) -> usize {
        self.videos.values().map(|v| v.instances.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        for (id, video) in &self.videos {
            if !(video.duration_s > 0.0) {
                return Err(Error::InvalidAnnotation {
                    video: id.clone(),
                    reason: format!("duration must be positive, got {}", video.duration_s),
                });
            }
            for inst in &video.instances {
                if !(inst.start_s >= 0.0 && inst.start_s < inst.end_s) {
                    return Err(Error::InvalidAnnotation {
                        video: id.clone(),
                        reason: format!(
                            "segment [{}, {}] must satisfy 0 <= start < end",
                            inst.start_s, inst.end_s
                        ),
                    });
                }
                if inst.end_s > video.duration_s {
                    return Err(Error::InvalidAnnotation {
                        video: id.clone(),
                        reason: format!(
                            "segment end {} exceeds duration {}",
                            inst.end_s, video.duration_s
                        ),
                    });
                }
                if self.class_index(&inst.label).is_none() {
                    return Err(Error::InvalidAnnotation {
                        video: id.clone(),
                        reason: format!("label {:?} not in the class list", inst.label),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One predicted instance as read from / written to predictions JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub label: String,
    pub score: f64,
    pub start_s: f64,
    pub end_s: f64,
}

// Wire-format mirror structs. Serialization goes through these so field
// names and nesting stay byte-compatible with the ActivityNet layout.

#[derive(Serialize, Deserialize)]
struct FileRoot {
    version: String,
    classes: Vec<String>,
    database: BTreeMap<String, FileVideo>,
}

#[derive(Serialize, Deserialize)]
struct FileVideo {
    duration: f64,
    subset: Subset,
    annotations: Vec<FileInstance>,
}

#[derive(Serialize, Deserialize)]
struct FileInstance {
    segment: [f64; 2],
    label: String,
}

#[derive(Serialize, Deserialize)]
struct PredRoot {
    results: BTreeMap<String, Vec<PredEntry>>,
}

#[derive(Serialize, Deserialize)]
struct PredEntry {
    label: String,
    score: f64,
    segment: [f64; 2],
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let root: FileRoot = serde_json::from_reader(reader).map_err(|source| Error::Json {
        path: display,
        source,
    })?;
    let videos = root
        .database
        .into_iter()
        .map(|(id, v)| {
            let instances = v
                .annotations
                .into_iter()
                .map(|a| Instance {
                    start_s: a.segment[0],
                    end_s: a.segment[1],
                    label: a.label,
                })
                .collect();
            (
                id,
                VideoAnnotations {
                    duration_s: v.duration,
                    subset: v.subset,
                    instances,
                },
            )
        })
        .collect();
    let set = AnnotationSet {
        classes: root.classes,
        videos,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    set.validate()?;
    let root = FileRoot {
        version: "1.0".into(),
        classes: set.classes.clone(),
        database: set
            .videos
            .iter()
            .map(|(id, v)| {
                (
                    id.clone(),
                    FileVideo {
                        duration: v.duration_s,
                        subset: v.subset,
                        annotations: v
                            .instances
                            .iter()
                            .map(|i| FileInstance {
                                segment: [i.start_s, i.end_s],
                                label: i.label.clone(),
                            })
                            .collect(),
                    },
                )
            })
            .collect(),
    };
    let writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(writer, &root).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let root: PredRoot = serde_json::from_reader(reader).map_err(|source| Error::Json {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (video_id, entries) in root.results {
        for e in entries {
            if !(e.segment[0] < e.segment[1]) {
                return Err(Error::InvalidAnnotation {
                    video: video_id.clone(),
                    reason: format!("prediction segment {:?} must have start < end", e.segment),
                });
            }
            if !e.score.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("prediction score in {display}"),
                });
            }
            out.push(Prediction {
                video_id: video_id.clone(),
                label: e.label,
                score: e.score,
                start_s: e.segment[0],
                end_s: e.segment[1],
            });
        }
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut results: BTreeMap<String, Vec<PredEntry>> = BTreeMap::new();
    for p in preds {
        results.entry(p.video_id.clone()).or_default().push(PredEntry {
            label: p.label.clone(),
            score: p.score,
            segment: [p.start_s, p.end_s],
        });
    }
    let writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(writer, &PredRoot { results }).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_minimal_file_and_tolerates_unknown_fields() {
        let (_d, path) = write_tmp(
            r#"{
              "version": "1.0",
              "classes": ["jump", "run"],
              "extra_top_level": 42,
              "database": {
                "v1": {
                  "duration": 10.0,
                  "subset": "train",
                  "fps": 30,
                  "annotations": [
                    {"segment": [1.0, 3.0], "label": "jump", "confidence": 0.9}
                  ]
                }
              }
            }"#,
        );
        let set = read_annotations(&path).unwrap();
        assert_eq!(set.classes, vec!["jump", "run"]);
        assert_eq!(set.videos["v1"].instances.len(), 1);
        assert_eq!(set.videos["v1"].subset, Subset::Train);
    }

    #[test]
    fn missing_required_field_names_it() {
        let (_d, path) = write_tmp(
            r#"{"version": "1.0", "classes": [], "database": {"v": {"subset": "train", "annotations": []}}}"#,
        );
        let err = read_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("duration"), "error should name the field: {err}");
    }

    #[test]
    fn rejects_inverted_segment() {
        let (_d, path) = write_tmp(
            r#"{"version": "1.0", "classes": ["a"], "database": {"v": {
                "duration": 5.0, "subset": "train",
                "annotations": [{"segment": [4.0, 2.0], "label": "a"}]}}}"#,
        );
        assert!(matches!(
            read_annotations(&path),
            Err(Error::InvalidAnnotation { .. })
        ));
    }

    #[test]
    fn rejects_unknown_label() {
        let (_d, path) = write_tmp(
            r#"{"version": "1.0", "classes": ["a"], "database": {"v": {
                "duration": 5.0, "subset": "train",
                "annotations": [{"segment": [1.0, 2.0], "label": "zzz"}]}}}"#,
        );
        assert!(matches!(
            read_annotations(&path),
            Err(Error::InvalidAnnotation { .. })
        ));
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        let mut videos = BTreeMap::new();
        videos.insert(
            "vid_b".to_string(),
            VideoAnnotations {
                duration_s: 8.0,
                subset: Subset::Val,
                instances: vec![Instance {
                    start_s: 0.5,
                    end_s: 2.5,
                    label: "swim".into(),
                }],
            },
        );
        let set = AnnotationSet {
            classes: vec!["swim".into()],
            videos,
        };
        write_annotations(&path, &set).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), set);
    }

    #[test]
    fn predictions_round_trip_and_allow_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.json");
        let preds = vec![Prediction {
            video_id: "v1".into(),
            label: "jump".into(),
            score: 0.72,
            start_s: 1.0,
            end_s: 2.0,
        }];
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);

        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, r#"{"results": {"v": []}}"#).unwrap();
        assert!(read_predictions(&empty).unwrap().is_empty());
    }
}
