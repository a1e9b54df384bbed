//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use emofilm::autodiff::{Gradients, ParamStore};
use emofilm::data::{EmotionCategory, TransitionKind};
use emofilm::efilm::{TokenEmotion, TtsExample};
use emofilm::{AnnotatorConfig, Corpus, CorpusSpec, EFiLMConfig, Matrix, ModulationVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Label-smoothed cross-entropy written as three nested scalar loops.
pub fn tts_loss_oracle(logits: &[Vec<Vec<f64>>], targets: &[Vec<usize>], eps: f64) -> f64 {
    let mut total = 0.0;
    let mut m = 0usize;
    for (seq, ys) in logits.iter().zip(targets) {
        for (t, &y) in ys.iter().enumerate() {
            let row = &seq[t];
            let v = row.len() as f64;
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - mx).exp();
            }
            for (k, &x) in row.iter().enumerate() {
                let q = if k == y { 1.0 - eps + eps / v } else { eps / v };
                total -= q * ((x - mx) - z.ln());
            }
            m += 1;
        }
    }
    total / m as f64
}

/// Plain step-wise cross-entropy by scalar loops.
pub fn emo_loss_oracle(logits: &[Vec<Vec<f64>>], labels: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (seq, ys) in logits.iter().zip(labels) {
        for (t, &y) in ys.iter().enumerate() {
            let row = &seq[t];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            total -= (row[y] - mx) - z.ln();
            n += 1;
        }
    }
    total / n as f64
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).expect("rectangular")
}

/// Minimum DTW cost by enumerating every monotone warping path.
pub fn dtw_enumerate(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

#[derive(Debug)]
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub entries: usize,
}

/// Central differences with step `h` against `analytic` for every parameter
/// entry; relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> f64,
    analytic: &Gradients<f64>,
    h: f64,
) -> GradCheck {
    let names: Vec<String> = store(model).iter().map(|p| p.name.clone()).collect();
    let mut out = GradCheck { max_rel: 0.0, worst: String::new(), entries: 0 };
    for name in names {
        let id = store(model).id(&name).expect("registered");
        let n = store(model).value(id).as_slice().len();
        for k in 0..n {
            let orig = store(model).value(id).as_slice()[k];
            store(model).value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = loss(model);
            store(model).value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = loss(model);
            store(model).value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).as_slice()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{k}] analytic {a:e} numeric {numeric:e}");
            }
            out.entries += 1;
        }
    }
    out
}

/// Overwrites every parameter whose name starts with `prefix` with values in ±scale.
pub fn randomize(store: &mut ParamStore<f64>, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        for v in p.value.as_mut_slice() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn micro_efilm(variant: ModulationVariant) -> EFiLMConfig {
    EFiLMConfig {
        text_vocab_size: 4,
        embed_dim: 8,
        emotion_dim: 4,
        decoder_layers: 1,
        heads: 2,
        ff_width: 16,
        variant,
        ..EFiLMConfig::default()
    }
}

/// Single sequence with two text tokens, so `L = 3` targets including EOS.
pub fn micro_example(cfg: &EFiLMConfig) -> TtsExample {
    let emotion = vec![
        TokenEmotion { category: EmotionCategory::Sad.code(), intensity: 0.7 },
        TokenEmotion { category: EmotionCategory::Happy.code(), intensity: 0.3 },
    ];
    let text = vec![1, 3];
    let targets = vec![1 * 5 + 2, 3 * 5 + 1, cfg.eos()];
    TtsExample {
        decoder_inputs: vec![cfg.bos(), targets[0], targets[1]],
        emotion_labels: vec![2, 1, 1],
        text_tokens: text,
        emotion: Some(emotion),
        targets,
    }
}

pub fn micro_annotator(input_dim: usize) -> AnnotatorConfig {
    AnnotatorConfig { input_dim, hidden: 8, layers: 1, heads: 2, ff_width: 16, ..AnnotatorConfig::default() }
}

pub fn small_corpus(n: usize, kind: TransitionKind, dim: usize, seed: u64) -> Corpus {
    let spec = CorpusSpec { n_utterances: n, transition_kind: kind, seed, ..CorpusSpec::default() };
    emofilm::generate_corpus(&spec, &emofilm::make_emotion_basis(5, dim, seed).expect("basis")).expect("corpus")
}
