//! Corpus domain types and their file formats.
//!
//! * alignment files: JSON lines, one `{"word", "start_s", "end_s"}` per word
//! * feature files: one `{"hop_s", "dim", "frames"}` object
//! * utterance manifests: ids plus relative paths to the two files above and
//!   optional annotations, tokens and labels

mod alignment;
mod features;
mod utterance;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use alignment::{frames_for_word, parse_alignment, serialize_alignment, WordAlignment};
pub use features::{masked_average_pool, EmotionFeatureSequence, DEFAULT_HOP_S};
pub use utterance::{
    load_utterance, validate_utterance, write_utterance, TransitionKind, Utterance, UtteranceManifest, ValidationReport,
};

use crate::error::{Error, Result};

/// Number of emotion categories.
pub const NUM_CATEGORIES: usize = 5;

/// The fixed emotion label set with stable integer codes 0–4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmotionCategory {
    Angry,
    Happy,
    Sad,
    Surprise,
    Neutral,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; NUM_CATEGORIES] =
        [Self::Angry, Self::Happy, Self::Sad, Self::Surprise, Self::Neutral];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Angry => "Angry",
            Self::Happy => "Happy",
            Self::Sad => "Sad",
            Self::Surprise => "Surprise",
            Self::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-word emotion label: category plus intensity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordEmotionAnnotation {
    pub category: EmotionCategory,
    pub intensity: f64,
}

impl WordEmotionAnnotation {
    pub fn new(category: EmotionCategory, intensity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::InvalidConfig(format!("intensity {intensity} outside [0, 1]")));
        }
        Ok(Self { category, intensity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_codes_are_stable() {
        let codes: Vec<usize> = EmotionCategory::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![0, 1, 2, 3, 4]);
        assert_eq!(EmotionCategory::from_code(3), Some(EmotionCategory::Surprise));
        assert_eq!(EmotionCategory::from_code(5), None);
        assert_eq!(serde_json::to_string(&EmotionCategory::Sad).unwrap(), "\"Sad\"");
    }

    #[test]
    fn intensity_range_enforced() {
        assert!(WordEmotionAnnotation::new(EmotionCategory::Happy, 1.0).is_ok());
        assert!(WordEmotionAnnotation::new(EmotionCategory::Happy, 1.2).is_err());
        assert!(WordEmotionAnnotation::new(EmotionCategory::Happy, f64::NAN).is_err());
    }
}
