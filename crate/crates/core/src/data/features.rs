//! Binary snippet-feature files.
//!
//! Layout: magic `TAGF`, u32 version (currently 1), u32 snippet count T,
//! u32 feature width, then T * width little-endian f32 values, row major
//! (one row per snippet). The format carries no timing, so `read_features`
//! defaults the duration to one second per snippet; pipelines that know the
//! real duration (from the annotation JSON) override it with
//! [`FeatureSequence::with_duration`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TAGF";
pub const VERSION: u32 = 1;

/// One video's precomputed snippet features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// Seconds; strictly positive.
    pub duration_s: f64,
    /// T x dim, one row per snippet, finite values only.
    pub values: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, duration_s: f64, values: Array2<f32>) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            duration_s,
            values,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn snippets(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_duration(mut self, duration_s: f64) -> Self {
        self.duration_s = duration_s;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidAnnotation {
                video: self.video_id.clone(),
                reason: format!("duration must be positive, got {}", self.duration_s),
            });
        }
        if self.values.nrows() == 0 || self.values.ncols() == 0 {
            return Err(Error::ShapeMismatch {
                context: format!("features for {}", self.video_id),
                expected: "T >= 1 and dim >= 1".into(),
                found: format!("{:?}", self.values.dim()),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("features for {}", self.video_id),
            });
        }
        Ok(())
    }
}

/// Writes a feature matrix; the video id and duration are not stored (id
/// comes from the filename, timing from the annotations).
pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    seq.validate()?;
    write_matrix(path, &seq.values)
}

/// Raw matrix writer, also used for debug dumps of probabilities, masks and
/// similarity matrices (anything shaped rows x cols of finite floats).
pub fn write_matrix(path: &Path, values: &Array2<f32>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("matrix written to {}", path.display()),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(values.nrows() as u32).to_le_bytes())?;
    w.write_all(&(values.ncols() as u32).to_le_bytes())?;
    for v in values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, &display, "version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            expected: VERSION,
            found: version,
        });
    }
    let t = read_u32(&mut r, &display, "snippet count")? as usize;
    let dim = read_u32(&mut r, &display, "feature width")? as usize;
    if t == 0 || dim == 0 {
        return Err(Error::ShapeMismatch {
            context: display,
            expected: "T >= 1 and dim >= 1".into(),
            found: format!("({t}, {dim})"),
        });
    }

    let mut payload = vec![0u8; t * dim * 4];
    read_exact(&mut r, &mut payload, &display, "feature payload")?;
    let mut values = Array2::zeros((t, dim));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite { context: display });
        }
        values[(i / dim, i % dim)] = v;
    }

    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(video_id, t as f64, values)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_string(),
                context: format!("while reading {what}"),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}
