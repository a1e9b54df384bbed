use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::alignment::{check_order, frames_for_word, parse_alignment, serialize_alignment, WordAlignment};
use super::features::EmotionFeatureSequence;
use super::{EmotionCategory, WordEmotionAnnotation};
use crate::error::{Error, Result};

/// How emotion evolves across the words of a synthetic utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    None,
    Mild,
    Strong,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub words: Vec<WordAlignment>,
    pub features: EmotionFeatureSequence,
    /// One per word when present.
    pub annotations: Option<Vec<WordEmotionAnnotation>>,
    /// Text token ids, possibly several per word.
    pub text_tokens: Option<Vec<usize>>,
    /// Word index of each text token; same length as `text_tokens`.
    pub word_of_token: Option<Vec<usize>>,
    /// Target speech tokens, one per text token.
    pub speech_tokens: Option<Vec<usize>>,
    pub global_label: Option<EmotionCategory>,
    pub transition_kind: Option<TransitionKind>,
    /// Strong: last word before the category switch. Mild: first word of the ramp.
    pub transition_word: Option<usize>,
}

impl Utterance {
    /// Frame range of every word.
    pub fn word_spans(&self) -> Result<Vec<std::ops::Range<usize>>> {
        self.words
            .iter()
            .map(|w| frames_for_word(w, self.features.hop_s(), self.features.len()))
            .collect()
    }
}

/// Outcome of [`validate_utterance`]; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collects every invariant violation of `u`. `speech_vocab` is the speech
/// token vocabulary size, when known.
pub fn validate_utterance(u: &Utterance, speech_vocab: Option<usize>) -> ValidationReport {
    let mut v = EmotionFeatureSequence::violations(u.features.hop_s(), u.features.dim(), u.features.frames());

    if u.words.is_empty() {
        v.push("utterance has no words".to_string());
    }
    for w in &u.words {
        if let Err(e) = w.check_span() {
            v.push(e.to_string());
        }
    }
    if let Err(e) = check_order(&u.words) {
        v.push(e.to_string());
    }
    for w in &u.words {
        match frames_for_word(w, u.features.hop_s(), u.features.len()) {
            Ok(r) if r.end <= u.features.len() => {}
            Ok(r) => v.push(format!("word {:?} frame span {r:?} exceeds {} frames", w.word, u.features.len())),
            Err(Error::DegenerateSpan { .. }) => v.push(format!(
                "word {:?} span [{}, {}) lies beyond the {} feature frames",
                w.word,
                w.start_s,
                w.end_s,
                u.features.len()
            )),
            Err(_) => {}
        }
    }

    if let Some(ann) = &u.annotations {
        if ann.len() != u.words.len() {
            v.push(format!("annotation count mismatch: {} annotations for {} words", ann.len(), u.words.len()));
        }
        for (i, a) in ann.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.intensity) {
                v.push(format!("annotation {i} intensity {} outside [0, 1]", a.intensity));
            }
        }
    }

    match (&u.text_tokens, &u.word_of_token) {
        (Some(tokens), Some(map)) => {
            if tokens.len() != map.len() {
                v.push(format!("word_of_token has {} entries for {} text tokens", map.len(), tokens.len()));
            }
            if let Some(bad) = map.iter().find(|&&w| w >= u.words.len()) {
                v.push(format!("word_of_token refers to word {bad}, utterance has {}", u.words.len()));
            }
            if map.windows(2).any(|p| p[1] < p[0]) {
                v.push("word_of_token is not monotone".to_string());
            }
        }
        (None, None) => {}
        _ => v.push("text_tokens and word_of_token must be given together".to_string()),
    }

    if let Some(speech) = &u.speech_tokens {
        if let Some(tokens) = &u.text_tokens {
            if speech.len() != tokens.len() {
                v.push(format!("{} speech tokens for {} text tokens", speech.len(), tokens.len()));
            }
        }
        if let Some(vocab) = speech_vocab {
            if let Some(bad) = speech.iter().find(|&&t| t >= vocab) {
                v.push(format!("speech token {bad} outside vocabulary of {vocab}"));
            }
        }
    }

    if let Some(k) = u.transition_word {
        if k >= u.words.len() {
            v.push(format!("transition word {k} outside {} words", u.words.len()));
        }
    }

    ValidationReport { violations: v }
}

/// On-disk utterance manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceManifest {
    pub utterance_id: String,
    pub speaker_id: String,
    pub alignment_path: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<WordEmotionAnnotation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_of_token: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech_tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_label: Option<EmotionCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_kind: Option<TransitionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_word: Option<usize>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the feature file, alignment file and manifest of `u` into `dir`.
/// Returns the manifest path.
pub fn write_utterance(dir: &Path, u: &Utterance) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feature_name = format!("{}.features.json", u.utterance_id);
    let alignment_name = format!("{}.align.jsonl", u.utterance_id);
    let manifest_path = dir.join(format!("{}.json", u.utterance_id));

    let features = serde_json::to_string(&u.features).map_err(|e| Error::json(dir.join(&feature_name), e))?;
    write_file(&dir.join(&feature_name), &features)?;
    write_file(&dir.join(&alignment_name), &serialize_alignment(&u.words))?;

    let manifest = UtteranceManifest {
        utterance_id: u.utterance_id.clone(),
        speaker_id: u.speaker_id.clone(),
        alignment_path: alignment_name,
        feature_path: feature_name,
        annotations: u.annotations.clone(),
        text_tokens: u.text_tokens.clone(),
        word_of_token: u.word_of_token.clone(),
        speech_tokens: u.speech_tokens.clone(),
        global_label: u.global_label,
        transition_kind: u.transition_kind,
        transition_word: u.transition_word,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    write_file(&manifest_path, &text)?;
    Ok(manifest_path)
}

pub fn load_utterance(manifest_path: &Path) -> Result<Utterance> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: UtteranceManifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let align_path = base.join(&m.alignment_path);
    let doc = fs::read_to_string(&align_path).map_err(|e| Error::io(&align_path, e))?;
    let words = parse_alignment(&doc)?;

    let feature_path = base.join(&m.feature_path);
    let ftext = fs::read_to_string(&feature_path).map_err(|e| Error::io(&feature_path, e))?;
    let features: EmotionFeatureSequence = serde_json::from_str(&ftext).map_err(|e| Error::json(&feature_path, e))?;

    Ok(Utterance {
        utterance_id: m.utterance_id,
        speaker_id: m.speaker_id,
        words,
        features,
        annotations: m.annotations,
        text_tokens: m.text_tokens,
        word_of_token: m.word_of_token,
        speech_tokens: m.speech_tokens,
        global_label: m.global_label,
        transition_kind: m.transition_kind,
        transition_word: m.transition_word,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_HOP_S;

    fn sample() -> Utterance {
        let frames = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
        Utterance {
            utterance_id: "u0".into(),
            speaker_id: "spk".into(),
            words: vec![WordAlignment::new("a", 0.0, 0.08), WordAlignment::new("b", 0.08, 0.2)],
            features: EmotionFeatureSequence::new(DEFAULT_HOP_S, 2, frames).unwrap(),
            annotations: Some(vec![
                WordEmotionAnnotation { category: EmotionCategory::Happy, intensity: 0.5 },
                WordEmotionAnnotation { category: EmotionCategory::Sad, intensity: 1.0 },
            ]),
            text_tokens: Some(vec![3, 1, 4]),
            word_of_token: Some(vec![0, 1, 1]),
            speech_tokens: Some(vec![16, 7, 22]),
            global_label: Some(EmotionCategory::Sad),
            transition_kind: Some(TransitionKind::Strong),
            transition_word: Some(0),
        }
    }

    #[test]
    fn consistent_utterance_is_ok() {
        let report = validate_utterance(&sample(), Some(25));
        assert!(report.is_ok(), "{:?}", report.violations);
    }

    #[test]
    fn collects_every_violation() {
        let mut u = sample();
        u.annotations.as_mut().unwrap().pop();
        u.words.push(WordAlignment::new("far", 0.5, 0.6));
        u.speech_tokens = Some(vec![16, 7, 99]);
        let report = validate_utterance(&u, Some(25));
        let text = report.violations.join("\n");
        assert!(text.contains("annotation count mismatch"), "{text}");
        assert!(text.contains("\"far\""), "{text}");
        assert!(text.contains("speech token 99"), "{text}");
        assert!(report.violations.len() >= 3);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let u = sample();
        let path = write_utterance(dir.path(), &u).unwrap();
        assert_eq!(load_utterance(&path).unwrap(), u);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_utterance(Path::new("/nonexistent/x.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.json"));
    }
}
