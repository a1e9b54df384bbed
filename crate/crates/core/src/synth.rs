//! Deterministic synthetic corpora with known word-level emotion ground truth.
//!
//! Frame features of a word with category `c` and intensity `s` are drawn
//! around `neutral + s·(mean_c − neutral)`. Speech tokens follow the toy
//! coupling `speech = text · C + code(category)`, so a generator that cannot
//! see the emotion labels cannot predict them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_utterance, write_utterance, EmotionCategory, EmotionFeatureSequence, TransitionKind, Utterance,
    WordAlignment, WordEmotionAnnotation, DEFAULT_HOP_S, NUM_CATEGORIES,
};
use crate::error::{Error, Result};

/// Per-coordinate frame noise of generated bases.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.25;
/// Distance of each emotional class mean from the neutral mean.
pub const EMOTION_RADIUS: f64 = 3.0;
const MILD_START_INTENSITY: f64 = 0.2;

/// Class mean directions of the synthetic feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionBasis {
    /// `C × D`, indexed by category code.
    pub class_means: Vec<Vec<f64>>,
    pub neutral_index: usize,
    pub noise_sigma: f64,
}

impl EmotionBasis {
    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn neutral_mean(&self) -> &[f64] {
        &self.class_means[self.neutral_index]
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.class_means.len() {
            for j in i + 1..self.class_means.len() {
                best = best.min(euclidean(&self.class_means[i], &self.class_means[j]));
            }
        }
        best
    }

    /// Expected feature vector of a word.
    pub fn word_center(&self, category: EmotionCategory, intensity: f64) -> Vec<f64> {
        let neutral = self.neutral_mean();
        self.class_means[category.code()].iter().zip(neutral).map(|(&m, &n)| n + intensity * (m - n)).collect()
    }

    /// Nearest-class-mean decision over all categories.
    pub fn nearest_category(&self, v: &[f64]) -> EmotionCategory {
        let (code, _) = self
            .class_means
            .iter()
            .enumerate()
            .map(|(i, m)| (i, euclidean(m, v)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        EmotionCategory::from_code(code).expect("basis has one mean per category")
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds a separable basis: pairwise class-mean distance ≥ 4·noise_sigma.
pub fn make_emotion_basis(categories: usize, dim: usize, seed: u64) -> Result<EmotionBasis> {
    if categories != NUM_CATEGORIES {
        return Err(Error::InvalidConfig(format!("basis needs {NUM_CATEGORIES} categories, got {categories}")));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig(format!("feature dim must be at least 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let neutral_index = EmotionCategory::Neutral.code();
    let neutral: Vec<f64> = (0..dim).map(|_| 0.5 * unit.sample(&mut rng)).collect();
    let mut radius = EMOTION_RADIUS;
    loop {
        let mut means = Vec::with_capacity(categories);
        for c in 0..categories {
            if c == neutral_index {
                means.push(neutral.clone());
                continue;
            }
            let dir: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            means.push(neutral.iter().zip(&dir).map(|(n, d)| n + radius * d / norm).collect());
        }
        let basis = EmotionBasis { class_means: means, neutral_index, noise_sigma: DEFAULT_NOISE_SIGMA };
        if basis.min_pairwise_distance() >= 4.0 * basis.noise_sigma {
            return Ok(basis);
        }
        radius *= 1.25;
    }
}

/// Recipe for one synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub words_per_utterance: [usize; 2],
    pub frames_per_word: [usize; 2],
    pub tokens_per_word: [usize; 2],
    pub transition_kind: TransitionKind,
    pub seed: u64,
    pub text_vocab_size: usize,
    pub speakers: Vec<String>,
    pub hop_s: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 500,
            words_per_utterance: [4, 8],
            frames_per_word: [3, 8],
            tokens_per_word: [1, 2],
            transition_kind: TransitionKind::Strong,
            seed: 0,
            text_vocab_size: 8,
            speakers: (0..5).map(|i| format!("spk{i}")).collect(),
            hop_s: DEFAULT_HOP_S,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if !range_ok(self.words_per_utterance) || !range_ok(self.frames_per_word) || !range_ok(self.tokens_per_word) {
            return Err(Error::InvalidConfig("corpus ranges must be non-empty with min >= 1".into()));
        }
        if self.transition_kind != TransitionKind::None && self.words_per_utterance[0] < 2 {
            return Err(Error::InvalidConfig("transitions need at least 2 words per utterance".into()));
        }
        if self.text_vocab_size < 2 {
            return Err(Error::InvalidConfig("text_vocab_size must be at least 2".into()));
        }
        if self.speakers.is_empty() {
            return Err(Error::InvalidConfig("at least one speaker is required".into()));
        }
        if !(self.hop_s > 0.0) {
            return Err(Error::InvalidConfig("hop_s must be positive".into()));
        }
        Ok(())
    }

    /// Speech token vocabulary under the toy coupling, excluding EOS.
    pub fn speech_vocab_size(&self) -> usize {
        self.text_vocab_size * NUM_CATEGORIES
    }

    pub fn utterance_id(&self, index: usize) -> String {
        let kind = match self.transition_kind {
            TransitionKind::None => "none",
            TransitionKind::Mild => "mild",
            TransitionKind::Strong => "strong",
        };
        format!("{kind}-s{}-{index:05}", self.seed)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn utterance_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

const EMOTIONAL: [EmotionCategory; 4] =
    [EmotionCategory::Angry, EmotionCategory::Happy, EmotionCategory::Sad, EmotionCategory::Surprise];

fn word_labels(kind: TransitionKind, n: usize, rng: &mut ChaCha8Rng) -> (Vec<WordEmotionAnnotation>, Option<usize>) {
    let ann = |category, intensity| WordEmotionAnnotation { category, intensity };
    match kind {
        TransitionKind::None => {
            let category = EmotionCategory::ALL[rng.gen_range(0..NUM_CATEGORIES)];
            let intensity = if category == EmotionCategory::Neutral { 0.0 } else { rng.gen_range(0.5..=1.0) };
            (vec![ann(category, intensity); n], None)
        }
        TransitionKind::Strong => {
            let pair: Vec<_> = EMOTIONAL.choose_multiple(rng, 2).copied().collect();
            let boundary = rng.gen_range(0..n - 1);
            let labels = (0..n).map(|w| ann(if w <= boundary { pair[0] } else { pair[1] }, 1.0)).collect();
            (labels, Some(boundary))
        }
        TransitionKind::Mild => {
            let category = *EMOTIONAL.choose(rng).expect("non-empty");
            let start = rng.gen_range(0..n - 1);
            let end = rng.gen_range(start + 1..n);
            let labels = (0..n)
                .map(|w| {
                    let s = if w < start {
                        MILD_START_INTENSITY
                    } else if w > end {
                        1.0
                    } else {
                        (MILD_START_INTENSITY
                            + (1.0 - MILD_START_INTENSITY) * (w - start) as f64 / (end - start) as f64)
                            .min(1.0)
                    };
                    ann(category, s)
                })
                .collect();
            (labels, Some(start))
        }
    }
}

/// Majority category over words; ties go to the lowest code.
pub fn majority_category(labels: &[WordEmotionAnnotation]) -> Option<EmotionCategory> {
    let mut counts = [0usize; NUM_CATEGORIES];
    for a in labels {
        counts[a.category.code()] += 1;
    }
    let max = *counts.iter().max()?;
    if max == 0 {
        return None;
    }
    counts.iter().position(|&c| c == max).and_then(EmotionCategory::from_code)
}

/// Generates utterance `index` of the corpus described by `spec`.
pub fn synth_utterance(spec: &CorpusSpec, basis: &EmotionBasis, index: usize) -> Result<Utterance> {
    spec.validate()?;
    if basis.class_means.len() != NUM_CATEGORIES {
        return Err(Error::InvalidConfig("basis must have one mean per category".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(spec.seed, index));
    let noise = Normal::new(0.0, basis.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let n_words = rng.gen_range(spec.words_per_utterance[0]..=spec.words_per_utterance[1]);
    let (annotations, transition_word) = word_labels(spec.transition_kind, n_words, &mut rng);

    let mut words = Vec::with_capacity(n_words);
    let mut frames = Vec::new();
    let mut text_tokens = Vec::new();
    let mut word_of_token = Vec::new();
    let mut speech_tokens = Vec::new();
    for (w, label) in annotations.iter().enumerate() {
        let n_tokens = rng.gen_range(spec.tokens_per_word[0]..=spec.tokens_per_word[1]);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(0..spec.text_vocab_size)).collect();
        let n_frames = rng.gen_range(spec.frames_per_word[0]..=spec.frames_per_word[1]);
        let start = frames.len();
        let center = basis.word_center(label.category, label.intensity);
        for _ in 0..n_frames {
            frames.push(center.iter().map(|&c| c + noise.sample(&mut rng)).collect::<Vec<f64>>());
        }
        let text = tokens.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join("_");
        words.push(WordAlignment::new(text, start as f64 * spec.hop_s, frames.len() as f64 * spec.hop_s));
        for &t in &tokens {
            text_tokens.push(t);
            word_of_token.push(w);
            speech_tokens.push(t * NUM_CATEGORIES + label.category.code());
        }
    }

    Ok(Utterance {
        utterance_id: spec.utterance_id(index),
        speaker_id: spec.speakers[index % spec.speakers.len()].clone(),
        words,
        features: EmotionFeatureSequence::new(spec.hop_s, basis.dim(), frames)?,
        global_label: majority_category(&annotations),
        annotations: Some(annotations),
        text_tokens: Some(text_tokens),
        word_of_token: Some(word_of_token),
        speech_tokens: Some(speech_tokens),
        transition_kind: Some(spec.transition_kind),
        transition_word,
    })
}

/// Index positions of the train/dev/test split (80/10/10 by hashed order).
pub fn split_indices(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(utterance_seed(seed, i) ^ 0x5_1717), i));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_dev = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut dev = order[n_train..n_train + n_dev].to_vec();
    let mut test = order[n_train + n_dev..].to_vec();
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    [train, dev, test]
}

/// An in-memory corpus split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn extend(&mut self, other: Corpus) {
        self.train.extend(other.train);
        self.dev.extend(other.dev);
        self.test.extend(other.test);
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates the whole corpus in memory, split 80/10/10.
pub fn generate_corpus(spec: &CorpusSpec, basis: &EmotionBasis) -> Result<Corpus> {
    spec.validate()?;
    let all: Vec<Utterance> =
        (0..spec.n_utterances).into_par_iter().map(|i| synth_utterance(spec, basis, i)).collect::<Result<_>>()?;
    let [train, dev, test] = split_indices(spec.n_utterances, spec.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect();
    Ok(Corpus { train: pick(&train), dev: pick(&dev), test: pick(&test) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// Corpus index file. Paths are relative to the index's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    /// One entry per `build_corpus` call that contributed to this corpus.
    pub spec: Vec<CorpusSpec>,
    pub utterances: Vec<String>,
    pub split: SplitIndex,
}

pub const INDEX_FILE: &str = "index.json";
const UTTERANCE_DIR: &str = "utterances";

pub fn read_index(path: &Path) -> Result<CorpusIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes every utterance plus `index.json` under `out_dir` and returns the
/// index path. An existing index is extended; entries already present are
/// replaced in place, so rebuilding with the same spec rewrites identical bytes.
pub fn build_corpus(spec: &CorpusSpec, basis: &EmotionBasis, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let utt_dir = out_dir.join(UTTERANCE_DIR);
    fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
    let index_path = out_dir.join(INDEX_FILE);
    let mut index = if index_path.exists() { read_index(&index_path)? } else { CorpusIndex::default() };

    let paths: Vec<String> = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| {
            let u = synth_utterance(spec, basis, i)?;
            write_utterance(&utt_dir, &u)?;
            Ok(format!("{UTTERANCE_DIR}/{}.json", u.utterance_id))
        })
        .collect::<Result<_>>()?;

    if !index.spec.contains(spec) {
        index.spec.push(spec.clone());
    }
    let [train, dev, test] = split_indices(spec.n_utterances, spec.seed);
    let add = |list: &mut Vec<String>, items: &[usize]| {
        for &i in items {
            if !list.contains(&paths[i]) {
                list.push(paths[i].clone());
            }
        }
    };
    add(&mut index.utterances, &(0..spec.n_utterances).collect::<Vec<_>>());
    add(&mut index.split.train, &train);
    add(&mut index.split.dev, &dev);
    add(&mut index.split.test, &test);

    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&index_path, e))?;
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    Ok(index_path)
}

/// Loads every split listed in a corpus index.
pub fn load_corpus(index_path: &Path) -> Result<Corpus> {
    let index = read_index(index_path)?;
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));
    let load = |list: &[String]| list.iter().map(|p| load_utterance(&base.join(p))).collect::<Result<Vec<_>>>();
    Ok(Corpus { train: load(&index.split.train)?, dev: load(&index.split.dev)?, test: load(&index.split.test)? })
}
