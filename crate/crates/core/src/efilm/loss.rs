//! Multi-task generator objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::smoothed_cross_entropy_row;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label smoothing `epsilon` of the speech-token loss and the weight
/// `lambda_emo` of the step-wise emotion loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenLossConfig {
    pub epsilon: f64,
    pub lambda_emo: f64,
}

impl Default for GenLossConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, lambda_emo: 0.3 }
    }
}

impl GenLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("label smoothing must lie in [0, 1), got {}", self.epsilon)));
        }
        if !(self.lambda_emo >= 0.0 && self.lambda_emo.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_emo must be non-negative, got {}", self.lambda_emo)));
        }
        Ok(())
    }
}

/// Targets of a batch of `B` sequences. Sequence `i` has `L_i` speech-token
/// targets and as many per-step emotion labels; any extra logit rows beyond
/// `L_i` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TtsBatch {
    pub targets: Vec<Vec<usize>>,
    pub emotion_labels: Vec<Vec<usize>>,
    /// Size of the speech-token output space.
    pub vocab: usize,
    pub categories: usize,
}

impl TtsBatch {
    /// `M`: number of non-padded speech-token targets.
    pub fn token_count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    /// `N`: number of non-padded emotion-labelled steps.
    pub fn step_count(&self) -> usize {
        self.emotion_labels.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.len() != self.emotion_labels.len() {
            return Err(Error::LengthMismatch {
                what: "emotion label sequences vs target sequences",
                expected: self.targets.len(),
                found: self.emotion_labels.len(),
            });
        }
        if let Some(&bad) = self.targets.iter().flatten().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidConfig(format!("target {bad} outside vocabulary of {}", self.vocab)));
        }
        if let Some(&bad) = self.emotion_labels.iter().flatten().find(|&&c| c >= self.categories) {
            return Err(Error::InvalidConfig(format!("emotion label {bad} outside {} categories", self.categories)));
        }
        Ok(())
    }
}

fn check_logits<T: Scalar>(logits: &[Matrix<T>], lens: &[Vec<usize>], width: usize, what: &'static str) -> Result<()> {
    if logits.len() != lens.len() {
        return Err(Error::LengthMismatch { what, expected: lens.len(), found: logits.len() });
    }
    for (m, seq) in logits.iter().zip(lens) {
        if m.cols() != width {
            return Err(Error::Dimension(format!("{what}: logits have width {}, expected {width}", m.cols())));
        }
        if m.rows() < seq.len() {
            return Err(Error::LengthMismatch { what, expected: seq.len(), found: m.rows() });
        }
    }
    Ok(())
}

/// Label-smoothed next-token cross-entropy averaged over the `M` real targets:
/// `-(1/M) Σ_i Σ_t Σ_k q(y, k) log p(k)` with `q(y, k) = (1-ε)[k = y] + ε/V`.
pub fn tts_loss<T: Scalar>(logits: &[Matrix<T>], batch: &TtsBatch, epsilon: T) -> Result<T> {
    batch.validate()?;
    check_logits(logits, &batch.targets, batch.vocab, "speech-token logits")?;
    let m = batch.token_count();
    if m == 0 {
        return Err(Error::EmptyBatch("speech-token loss"));
    }
    let mut total = T::zero();
    for (l, targets) in logits.iter().zip(&batch.targets) {
        for (t, &y) in targets.iter().enumerate() {
            total += smoothed_cross_entropy_row(l.row(t), y, epsilon);
        }
    }
    Ok(total / T::lit(m as f64))
}

/// Step-wise emotion cross-entropy averaged over the `N` labelled steps.
pub fn emo_loss<T: Scalar>(step_logits: &[Matrix<T>], batch: &TtsBatch) -> Result<T> {
    batch.validate()?;
    check_logits(step_logits, &batch.emotion_labels, batch.categories, "emotion logits")?;
    let n = batch.step_count();
    if n == 0 {
        return Err(Error::EmptyBatch("emotion loss"));
    }
    let mut total = T::zero();
    for (l, labels) in step_logits.iter().zip(&batch.emotion_labels) {
        for (t, &y) in labels.iter().enumerate() {
            total += smoothed_cross_entropy_row(l.row(t), y, T::zero());
        }
    }
    Ok(total / T::lit(n as f64))
}

/// `L_TTS + λ · L_emo`.
pub fn total_loss<T: Scalar>(l_tts: T, l_emo: T, cfg: &GenLossConfig) -> T {
    l_tts + T::lit(cfg.lambda_emo) * l_emo
}
