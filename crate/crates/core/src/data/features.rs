use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Default frame hop: 50 frames per second.
pub const DEFAULT_HOP_S: f64 = 0.02;

/// Frame-level emotion features of one utterance, `T × D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatures")]
pub struct EmotionFeatureSequence {
    hop_s: f64,
    dim: usize,
    frames: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawFeatures {
    hop_s: f64,
    dim: usize,
    frames: Vec<Vec<f64>>,
}

impl TryFrom<RawFeatures> for EmotionFeatureSequence {
    type Error = Error;

    fn try_from(raw: RawFeatures) -> Result<Self> {
        Self::new(raw.hop_s, raw.dim, raw.frames)
    }
}

impl EmotionFeatureSequence {
    pub fn new(hop_s: f64, dim: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        let violations = Self::violations(hop_s, dim, &frames);
        if let Some(first) = violations.into_iter().next() {
            return Err(Error::InvalidConfig(first));
        }
        Ok(Self { hop_s, dim, frames })
    }

    pub(crate) fn violations(hop_s: f64, dim: usize, frames: &[Vec<f64>]) -> Vec<String> {
        let mut out = Vec::new();
        if !(hop_s > 0.0 && hop_s.is_finite()) {
            out.push(format!("hop_s must be positive, got {hop_s}"));
        }
        if dim == 0 {
            out.push("feature dim must be positive".to_string());
        }
        if frames.is_empty() {
            out.push("feature sequence has no frames".to_string());
        }
        for (i, row) in frames.iter().enumerate() {
            if row.len() != dim {
                out.push(format!("frame {i} has {} values, expected {dim}", row.len()));
            } else if row.iter().any(|v| !v.is_finite()) {
                out.push(format!("frame {i} has a non-finite value"));
            }
        }
        out
    }

    pub fn hop_s(&self) -> f64 {
        self.hop_s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.frames.len(), self.dim);
        for (r, row) in self.frames.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m.set(r, c, T::lit(v));
            }
        }
        m
    }
}

/// Arithmetic mean of the rows of `seq` inside `span`.
pub fn masked_average_pool(seq: &EmotionFeatureSequence, span: Range<usize>) -> Result<Vec<f64>> {
    if span.is_empty() || span.end > seq.len() {
        return Err(Error::EmptySpan { start: span.start, end: span.end, frames: seq.len() });
    }
    let n = span.len() as f64;
    let mut out = vec![0.0; seq.dim()];
    for row in &seq.frames[span] {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}
