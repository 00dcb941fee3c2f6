use rayon::prelude::*;

use super::{DatasetManifest, Payload, RecordError};
use crate::error::{Error, Result};

/// Raster width, in bytes, before the byte image is downsampled.
pub const RASTER_WIDTH: usize = 256;
/// Side of the downsampled byte image.
pub const IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ByteImage32,
    ByteHistogram256,
    /// Vectors produced by the synthetic generator; any fixed width.
    Synthetic { dim: usize },
}

impl Scheme {
    pub fn dim(self) -> usize {
        match self {
            Scheme::ByteImage32 => IMAGE_SIDE * IMAGE_SIDE,
            Scheme::ByteHistogram256 => 256,
            Scheme::Synthetic { dim } => dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::ByteImage32 => "byte_image_32x32",
            Scheme::ByteHistogram256 => "byte_histogram_256",
            Scheme::Synthetic { .. } => "synthetic",
        }
    }

    /// Parses a scheme name; `dim` is only consulted for `synthetic`.
    pub fn parse(name: &str, dim: usize) -> Option<Self> {
        match name {
            "byte_image_32x32" => Some(Scheme::ByteImage32),
            "byte_histogram_256" => Some(Scheme::ByteHistogram256),
            "synthetic" if dim >= 1 => Some(Scheme::Synthetic { dim }),
            _ => None,
        }
    }
}

/// Fixed-length feature vector with every entry finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    scheme: Scheme,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, scheme: Scheme) -> Result<Self> {
        if values.len() != scheme.dim() {
            return Err(Error::DimensionMismatch {
                stage: "feature vector",
                expected: scheme.dim(),
                found: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("feature value {v} outside [0, 1]")));
        }
        Ok(Self { values, scheme })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Turns raw bytes into a feature vector.
///
/// `ByteHistogram256` is the byte-value frequency distribution.
/// `ByteImage32` lays the bytes out as a 256-wide grayscale raster (the last
/// row zero-padded), area-averages it to 32×32 and scales by 1/255. The area
/// weights are integers, so the average is computed exactly before the final
/// division.
pub fn featurize_bytes(payload: &[u8], scheme: Scheme) -> Result<FeatureVector> {
    if payload.is_empty() {
        return Err(Error::invalid("empty payload"));
    }
    let values = match scheme {
        Scheme::ByteHistogram256 => {
            let mut counts = [0u64; 256];
            for &b in payload {
                counts[usize::from(b)] += 1;
            }
            let n = payload.len() as f64;
            counts.iter().map(|&c| c as f64 / n).collect()
        }
        Scheme::ByteImage32 => byte_image(payload),
        Scheme::Synthetic { .. } => {
            return Err(Error::invalid("synthetic scheme cannot featurize bytes"))
        }
    };
    FeatureVector::new(values, scheme)
}

fn byte_image(payload: &[u8]) -> Vec<f64> {
    let height = payload.len().div_ceil(RASTER_WIDTH);
    let col_group = RASTER_WIDTH / IMAGE_SIDE;

    // Column pass: each raster row collapses to IMAGE_SIDE sums of col_group bytes.
    let mut row_sums = vec![[0u64; IMAGE_SIDE]; height];
    for (i, &b) in payload.iter().enumerate() {
        row_sums[i / RASTER_WIDTH][(i % RASTER_WIDTH) / col_group] += u64::from(b);
    }

    // Row pass in units of 1/IMAGE_SIDE raster rows: target row t spans
    // [t*height, (t+1)*height), source row r spans [r*SIDE, (r+1)*SIDE).
    let side = IMAGE_SIDE as u64;
    let h = height as u64;
    let denom = (h * col_group as u64 * 255) as f64;
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for t in 0..side {
        let lo = t * h;
        let hi = (t + 1) * h;
        let r_first = lo / side;
        let r_last = (hi - 1) / side;
        let mut acc = [0u64; IMAGE_SIDE];
        for r in r_first..=r_last {
            let overlap = hi.min((r + 1) * side) - lo.max(r * side);
            for (a, s) in acc.iter_mut().zip(&row_sums[r as usize]) {
                *a += overlap * s;
            }
        }
        for (c, a) in acc.iter().enumerate() {
            out[t as usize * IMAGE_SIDE + c] = *a as f64 / denom;
        }
    }
    out
}

/// Featurizes every sample in parallel. Output is aligned with
/// `manifest.samples`; failures become `None` plus a collected error.
pub fn featurize_manifest(
    manifest: &DatasetManifest,
    scheme: Scheme,
) -> (Vec<Option<FeatureVector>>, Vec<RecordError>) {
    let results: Vec<Result<FeatureVector>> = manifest
        .samples
        .par_iter()
        .map(|s| match &s.payload {
            Payload::Bytes(b) => featurize_bytes(b, scheme),
            Payload::Path(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                featurize_bytes(&bytes, scheme)
            }
            Payload::Features(f) if f.scheme() == scheme => Ok(f.clone()),
            Payload::Inline => Err(Error::invalid("inline sample has no attached features")),
            Payload::Features(f) => Err(Error::invalid(format!(
                "stored features use scheme {}, requested {}",
                f.scheme().name(),
                scheme.name()
            ))),
        })
        .collect();
    let mut errors = Vec::new();
    let features = results
        .into_iter()
        .zip(&manifest.samples)
        .map(|(r, s)| match r {
            Ok(f) => Some(f),
            Err(e) => {
                errors.push(RecordError {
                    id: s.id.clone(),
                    message: e.to_string(),
                });
                None
            }
        })
        .collect();
    (features, errors)
}
