use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One word with its time span in seconds, as produced by a forced aligner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl WordAlignment {
    pub fn new(word: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self { word: word.into(), start_s, end_s }
    }

    pub(crate) fn check_span(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) {
            return Err(Error::InvalidSpan { word: self.word.clone(), message: "non-finite time".into() });
        }
        if self.start_s < 0.0 {
            return Err(Error::InvalidSpan { word: self.word.clone(), message: format!("negative start {}", self.start_s) });
        }
        if !(self.start_s < self.end_s) {
            return Err(Error::InvalidSpan {
                word: self.word.clone(),
                message: format!("start {} is not before end {}", self.start_s, self.end_s),
            });
        }
        Ok(())
    }
}

/// Checks that spans are sorted and pairwise non-overlapping.
pub(crate) fn check_order(words: &[WordAlignment]) -> Result<()> {
    for pair in words.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            return Err(Error::Overlap { first: pair[0].word.clone(), second: pair[1].word.clone() });
        }
    }
    Ok(())
}

/// Parses a JSON-lines alignment document. Blank lines are skipped.
pub fn parse_alignment(document: &str) -> Result<Vec<WordAlignment>> {
    let mut words = Vec::new();
    for (i, line) in document.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let word: WordAlignment =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        word.check_span().map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        words.push(word);
    }
    check_order(&words)?;
    Ok(words)
}

pub fn serialize_alignment(words: &[WordAlignment]) -> String {
    let mut out = String::new();
    for w in words {
        out.push_str(&serde_json::to_string(w).expect("alignment records always serialize"));
        out.push('\n');
    }
    out
}

/// Snaps a frame position onto an integer when it is within rounding noise of one,
/// so spans on exact hop multiples map exactly.
fn snap(x: f64) -> Option<f64> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * r.abs().max(1.0)).then_some(r)
}

/// Half-open frame range covering a word: `floor(start/hop)..min(T, ceil(end/hop))`.
pub fn frames_for_word(word: &WordAlignment, hop_s: f64, frames: usize) -> Result<Range<usize>> {
    if !(hop_s > 0.0) {
        return Err(Error::InvalidConfig(format!("hop_s must be positive, got {hop_s}")));
    }
    word.check_span()?;
    let start = word.start_s / hop_s;
    let end = word.end_s / hop_s;
    let lo = snap(start).unwrap_or_else(|| start.floor());
    let hi = snap(end).unwrap_or_else(|| end.ceil());
    let lo = lo as usize;
    let hi = (hi as usize).min(frames);
    if hi <= lo {
        return Err(Error::DegenerateSpan { word: word.word.clone(), start_s: word.start_s, end_s: word.end_s, frames });
    }
    Ok(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record() {
        let words = parse_alignment(r#"{"word":"hello","start_s":0.0,"end_s":0.4}"#).unwrap();
        assert_eq!(words, vec![WordAlignment::new("hello", 0.0, 0.4)]);
    }

    #[test]
    fn touching_spans_are_legal() {
        let doc = "{\"word\":\"a\",\"start_s\":0.0,\"end_s\":0.4}\n\n{\"word\":\"b\",\"start_s\":0.4,\"end_s\":0.9}\n";
        let words = parse_alignment(doc).unwrap();
        assert_eq!(words.len(), 2);
        assert_eq!(words[1].word, "b");
    }

    #[test]
    fn overlap_names_both_words() {
        let doc = "{\"word\":\"a\",\"start_s\":0.0,\"end_s\":0.5}\n{\"word\":\"b\",\"start_s\":0.3,\"end_s\":0.9}";
        match parse_alignment(doc) {
            Err(Error::Overlap { first, second }) => assert_eq!((first.as_str(), second.as_str()), ("a", "b")),
            other => panic!("expected overlap, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let doc = "{\"word\":\"a\",\"start_s\":0.0,\"end_s\":0.5}\n{\"word\":\"b\",\"start_s\":";
        assert!(matches!(parse_alignment(doc), Err(Error::Parse { line: 2, .. })));
        let reversed = "{\"word\":\"a\",\"start_s\":0.5,\"end_s\":0.1}";
        assert!(matches!(parse_alignment(reversed), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn frame_mapping_examples() {
        let f = |s, e| frames_for_word(&WordAlignment::new("w", s, e), 0.01, 100);
        assert_eq!(f(0.10, 0.20).unwrap(), 10..20);
        assert_eq!(f(0.105, 0.119).unwrap(), 10..12);
        assert_eq!(f(0.98, 1.20).unwrap(), 98..100);
        assert!(matches!(f(1.5, 1.7), Err(Error::DegenerateSpan { .. })));
    }

    #[test]
    fn hop_multiples_map_exactly() {
        // 0.06 / 0.02 is 2.9999999999999996 in binary floating point.
        let w = WordAlignment::new("w", 0.06, 0.14);
        assert_eq!(frames_for_word(&w, 0.02, 50).unwrap(), 3..7);
    }

    proptest! {
        #[test]
        fn aligned_neighbours_never_share_frames(
            hop in prop::sample::select(vec![0.01, 0.02, 0.0125, 0.04]),
            lens in prop::collection::vec(1usize..9, 2..8),
        ) {
            let mut offset = 0usize;
            let mut words = Vec::new();
            for (i, len) in lens.iter().enumerate() {
                words.push(WordAlignment::new(format!("w{i}"), offset as f64 * hop, (offset + len) as f64 * hop));
                offset += len;
            }
            let ranges: Vec<_> = words.iter().map(|w| frames_for_word(w, hop, offset).unwrap()).collect();
            for (r, len) in ranges.iter().zip(&lens) {
                prop_assert_eq!(r.len(), *len);
            }
            for pair in ranges.windows(2) {
                prop_assert!(pair[0].end <= pair[1].start);
            }
        }

        #[test]
        fn parse_serialize_parse_is_identity(
            spans in prop::collection::vec((0.0f64..2.0, 0.001f64..1.0, 0.0f64..0.5), 1..10),
        ) {
            let mut t = 0.0;
            let mut words = Vec::new();
            for (i, (_, len, gap)) in spans.iter().enumerate() {
                let start = t + gap;
                words.push(WordAlignment::new(format!("w{i}"), start, start + len));
                t = start + len;
            }
            let doc = serialize_alignment(&words);
            let parsed = parse_alignment(&doc).unwrap();
            prop_assert_eq!(&parsed, &words);
            prop_assert_eq!(parse_alignment(&serialize_alignment(&parsed)).unwrap(), parsed);
        }
    }
}
