//! Teacher-forced multi-task training and held-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate, DecodeMode, EFiLMConfig, EFiLMModel, GenLossConfig, ModulationVariant, TokenEmotion};
use crate::autodiff::{Graph, Var};
use crate::data::{Utterance, WordEmotionAnnotation};
use crate::error::{Error, Result};
use crate::metrics::EmotionTrajectory;
use crate::optim::{shuffled_batches, Adam, TrainConfig};
use crate::scalar::{argmax, Scalar};
use crate::synth::{majority_category, Corpus};

/// Which emotion labels condition the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    #[default]
    GoldWordLevel,
    /// Every word gets the utterance's majority category at intensity 1.0.
    GlobalOnly,
    /// No emotion input at all.
    None,
}

/// One utterance prepared for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TtsExample {
    pub text_tokens: Vec<usize>,
    pub emotion: Option<Vec<TokenEmotion>>,
    /// `[BOS] + targets[..L-1]`
    pub decoder_inputs: Vec<usize>,
    /// Speech tokens followed by EOS.
    pub targets: Vec<usize>,
    /// Category of the word behind each target step; EOS takes the last word's.
    pub emotion_labels: Vec<usize>,
}

fn require<'a, X>(field: &'a Option<X>, what: &str, id: &str) -> Result<&'a X> {
    field.as_ref().ok_or_else(|| Error::InvalidConfig(format!("utterance {id} has no {what}")))
}

fn conditioning_labels(u: &Utterance, source: AnnotationSource) -> Result<Vec<WordEmotionAnnotation>> {
    let ann = require(&u.annotations, "annotations", &u.utterance_id)?;
    if ann.len() != u.words.len() {
        return Err(Error::LengthMismatch { what: "annotations vs words", expected: u.words.len(), found: ann.len() });
    }
    Ok(match source {
        AnnotationSource::GlobalOnly => {
            let category = majority_category(ann).ok_or(Error::EmptyBatch("annotations"))?;
            vec![WordEmotionAnnotation { category, intensity: 1.0 }; ann.len()]
        }
        _ => ann.clone(),
    })
}

/// Builds the teacher-forcing example of `u`. The word-level labels come
/// from `u.annotations`, which may hold gold or annotator-predicted values.
pub fn build_example(u: &Utterance, config: &EFiLMConfig, source: AnnotationSource) -> Result<TtsExample> {
    let id = &u.utterance_id;
    let text = require(&u.text_tokens, "text tokens", id)?;
    let word_of_token = require(&u.word_of_token, "token-to-word map", id)?;
    let speech = require(&u.speech_tokens, "speech tokens", id)?;
    if text.is_empty() {
        return Err(Error::EmptyBatch("text tokens"));
    }
    if word_of_token.len() != text.len() {
        return Err(Error::LengthMismatch { what: "word_of_token vs text tokens", expected: text.len(), found: word_of_token.len() });
    }
    if let Some(&bad) = speech.iter().find(|&&s| s >= config.speech_vocab()) {
        return Err(Error::InvalidConfig(format!("utterance {id}: speech token {bad} outside vocabulary")));
    }
    let labels = conditioning_labels(u, source)?;
    let token_emotion = super::token_emotions(&labels, word_of_token)?;

    let mut targets = speech.clone();
    targets.push(config.eos());
    let mut decoder_inputs = vec![config.bos()];
    decoder_inputs.extend_from_slice(&targets[..targets.len() - 1]);
    let mut emotion_labels: Vec<usize> = token_emotion.iter().map(|e| e.category).collect();
    emotion_labels.push(*emotion_labels.last().expect("non-empty"));
    if emotion_labels.len() != targets.len() {
        return Err(Error::LengthMismatch { what: "speech tokens vs text tokens", expected: text.len(), found: speech.len() });
    }
    Ok(TtsExample {
        text_tokens: text.clone(),
        emotion: (source != AnnotationSource::None).then_some(token_emotion),
        decoder_inputs,
        targets,
        emotion_labels,
    })
}

impl<T: Scalar> EFiLMModel<T> {
    /// Summed speech and emotion cross-entropies of one example.
    fn record_sums(&self, g: &mut Graph<'_, T>, ex: &TtsExample, epsilon: T) -> (Var, Var) {
        let memory = self.record_memory(g, &ex.text_tokens, ex.emotion.as_deref());
        let (speech, emo) = self.record_decoder(g, memory, &ex.decoder_inputs);
        let tts = g.cross_entropy_sum(speech, &ex.targets, epsilon);
        let emo = g.cross_entropy_sum(emo, &ex.emotion_labels, T::zero());
        (tts, emo)
    }

    /// `(total, L_TTS, L_emo)` nodes of a batch.
    pub fn record_batch_loss(&self, g: &mut Graph<'_, T>, batch: &[&TtsExample], cfg: &GenLossConfig) -> (Var, Var, Var) {
        let eps = T::lit(cfg.epsilon);
        let mut tts_sum: Option<Var> = None;
        let mut emo_sum: Option<Var> = None;
        let (mut m, mut n) = (0usize, 0usize);
        for ex in batch {
            let (a, b) = self.record_sums(g, ex, eps);
            tts_sum = Some(tts_sum.map_or(a, |acc| g.add(acc, a)));
            emo_sum = Some(emo_sum.map_or(b, |acc| g.add(acc, b)));
            m += ex.targets.len();
            n += ex.emotion_labels.len();
        }
        let tts = g.scale(tts_sum.expect("non-empty batch"), T::one() / T::lit(m as f64));
        let emo = g.scale(emo_sum.expect("non-empty batch"), T::one() / T::lit(n as f64));
        let weighted = g.scale(emo, T::lit(cfg.lambda_emo));
        let total = g.add(tts, weighted);
        (total, tts, emo)
    }

    /// Loss values and parameter gradients of `total_loss` on a batch.
    pub fn loss_and_gradients(
        &self,
        batch: &[&TtsExample],
        cfg: &GenLossConfig,
    ) -> Result<([T; 3], crate::autodiff::Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("generator loss"));
        }
        let mut g = Graph::new(self.params());
        let (total, tts, emo) = self.record_batch_loss(&mut g, batch, cfg);
        Ok(([g.scalar(total), g.scalar(tts), g.scalar(emo)], g.backward(total)))
    }
}

/// One JSON-lines record of generator training. Epoch 0 precedes any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EFiLMEpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
    pub dev_tts_loss: f64,
    pub dev_emo_loss: f64,
    pub dev_token_accuracy: f64,
    pub dev_emotion_accuracy: f64,
}

/// Teacher-forced held-out metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EFiLMEval {
    pub total: f64,
    pub tts_loss: f64,
    pub emo_loss: f64,
    pub token_accuracy: f64,
    pub emotion_accuracy: f64,
    pub steps: usize,
}

pub fn evaluate_efilm<T: Scalar>(
    m: &EFiLMModel<T>,
    utterances: &[Utterance],
    source: AnnotationSource,
    cfg: &GenLossConfig,
) -> Result<EFiLMEval> {
    let examples = utterances.iter().map(|u| build_example(u, m.config(), source)).collect::<Result<Vec<_>>>()?;
    evaluate_examples(m, &examples, cfg)
}

fn evaluate_examples<T: Scalar>(m: &EFiLMModel<T>, examples: &[TtsExample], cfg: &GenLossConfig) -> Result<EFiLMEval> {
    let (mut tts, mut emo, mut tok_ok, mut emo_ok, mut steps) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let eps = T::lit(cfg.epsilon);
    for ex in examples {
        let mut g = Graph::new(m.params());
        let (a, b) = m.record_sums(&mut g, ex, eps);
        tts += g.scalar(a).to_f64_lossy();
        emo += g.scalar(b).to_f64_lossy();
        let out = m.forward(&ex.text_tokens, ex.emotion.as_deref(), &ex.decoder_inputs)?;
        for t in 0..ex.targets.len() {
            tok_ok += usize::from(argmax(out.speech_logits.row(t)) == Some(ex.targets[t]));
            emo_ok += usize::from(argmax(out.emotion_logits.row(t)) == Some(ex.emotion_labels[t]));
        }
        steps += ex.targets.len();
    }
    if steps == 0 {
        return Err(Error::EmptyBatch("generator evaluation"));
    }
    let n = steps as f64;
    let (tts, emo) = (tts / n, emo / n);
    Ok(EFiLMEval {
        total: tts + cfg.lambda_emo * emo,
        tts_loss: tts,
        emo_loss: emo,
        token_accuracy: tok_ok as f64 / n,
        emotion_accuracy: emo_ok as f64 / n,
        steps,
    })
}

/// Greedy free-running speech-token accuracy: generated tokens are compared
/// position by position with the gold speech tokens; a missing position
/// counts as wrong and EOS is not scored.
pub fn free_running_accuracy<T: Scalar>(m: &EFiLMModel<T>, utterances: &[Utterance], source: AnnotationSource) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for u in utterances {
        let ex = build_example(u, m.config(), source)?;
        let gold = &ex.targets[..ex.targets.len() - 1];
        let gen = generate(m, &ex.text_tokens, ex.emotion.as_deref(), ex.targets.len(), DecodeMode::Greedy)?;
        correct += gold.iter().zip(&gen.tokens).filter(|(a, b)| a == b).count();
        total += gold.len();
    }
    if total == 0 {
        return Err(Error::EmptyBatch("free-running evaluation"));
    }
    Ok(correct as f64 / total as f64)
}

/// One-hot category trajectory of the gold speech tokens (EOS excluded).
pub fn gold_trajectory(u: &Utterance, categories: usize) -> Result<EmotionTrajectory> {
    let ann = require(&u.annotations, "annotations", &u.utterance_id)?;
    let word_of_token = require(&u.word_of_token, "token-to-word map", &u.utterance_id)?;
    let points = super::token_emotions(ann, word_of_token)?
        .iter()
        .map(|e| (0..categories).map(|k| if k == e.category { 1.0 } else { 0.0 }).collect())
        .collect();
    EmotionTrajectory::posteriors(points)
}

/// Trains on `corpus.train` with Adam and teacher forcing, keeping the
/// parameters with the lowest dev loss (train loss if dev is empty).
pub fn train_efilm<T: Scalar>(
    corpus: &Corpus,
    model_cfg: &EFiLMConfig,
    cfg: &TrainConfig,
    loss_cfg: &GenLossConfig,
    variant: ModulationVariant,
    source: AnnotationSource,
) -> Result<(EFiLMModel<T>, Vec<EFiLMEpochLog>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.variant = variant;
    let mut model = EFiLMModel::<T>::new(model_cfg, cfg.seed)?;
    let build = |us: &[Utterance]| us.iter().map(|u| build_example(u, model.config(), source)).collect::<Result<Vec<_>>>();
    let train = build(&corpus.train)?;
    if train.is_empty() {
        return Err(Error::EmptyBatch("generator training split"));
    }
    let dev = if corpus.dev.is_empty() { train.clone() } else { build(&corpus.dev)? };

    let mut adam = Adam::new(model.params(), cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xEF11_5EED);
    let clip = cfg.clip_norm.map(T::lit);

    let eval = evaluate_examples(&model, &dev, loss_cfg)?;
    let mut log = vec![epoch_record(0, None, &eval)];
    let mut best = (eval.total, model.params().clone());

    for epoch in 1..=cfg.epochs {
        let mut train_total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng).iter().enumerate() {
            let refs: Vec<&TtsExample> = batch.iter().map(|&i| &train[i]).collect();
            let ([loss, _, _], mut grads) = model.loss_and_gradients(&refs, loss_cfg)?;
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, param_norm: model.params().norm().to_f64_lossy() });
            }
            if let Some(c) = clip {
                grads.clip_norm(c);
            }
            adam.step(model.params_mut(), &grads);
            train_total += loss.to_f64_lossy();
            batches += 1;
        }
        let eval = evaluate_examples(&model, &dev, loss_cfg)?;
        log.push(epoch_record(epoch, Some(train_total / batches as f64), &eval));
        if eval.total < best.0 {
            best = (eval.total, model.params().clone());
        }
    }
    *model.params_mut() = best.1;
    Ok((model, log))
}

fn epoch_record(epoch: usize, train_loss: Option<f64>, eval: &EFiLMEval) -> EFiLMEpochLog {
    EFiLMEpochLog {
        epoch,
        train_loss,
        dev_loss: eval.total,
        dev_tts_loss: eval.tts_loss,
        dev_emo_loss: eval.emo_loss,
        dev_token_accuracy: eval.token_accuracy,
        dev_emotion_accuracy: eval.emotion_accuracy,
    }
}
