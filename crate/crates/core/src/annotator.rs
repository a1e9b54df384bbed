//! Word-level emotion annotator.
//!
//! Frames are projected to the hidden width, encoded by pre-norm transformer
//! blocks, averaged over each word's frame span and fed to a category head
//! and a sigmoid intensity head. Training minimizes
//! `λ_cls · CE + λ_reg · MSE` with mean reductions over words.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{
    frames_for_word, EmotionCategory, EmotionFeatureSequence, Utterance, WordAlignment, WordEmotionAnnotation,
    NUM_CATEGORIES,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, EncoderBlock, LayerNorm, Linear};
use crate::optim::{shuffled_batches, Adam, TrainConfig};
use crate::scalar::{argmax, Scalar};
use crate::synth::Corpus;
use crate::tensor::Matrix;

pub const MODEL_NAME: &str = "annotator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub categories: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self { input_dim: 16, hidden: 64, layers: 2, heads: 4, ff_width: 128, categories: NUM_CATEGORIES }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.ff_width == 0 {
            return Err(Error::InvalidConfig("annotator widths must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.categories != NUM_CATEGORIES {
            return Err(Error::InvalidConfig(format!("annotator needs {NUM_CATEGORIES} categories")));
        }
        Ok(())
    }
}

/// Weights of the two terms of the joint annotator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorLossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for AnnotatorLossConfig {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_reg: 1.0 }
    }
}

impl AnnotatorLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls >= 0.0 && self.lambda_reg >= 0.0 && self.lambda_cls + self.lambda_reg > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "annotator loss weights must be non-negative with a positive sum, got ({}, {})",
                self.lambda_cls, self.lambda_reg
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AnnotatorModel<T> {
    config: AnnotatorConfig,
    seed: u64,
    params: ParamStore<T>,
    input: Linear,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    cls_head: Linear,
    reg_head: Linear,
}

/// Raw outputs for one word.
#[derive(Clone, Debug, PartialEq)]
pub struct WordPrediction<T> {
    pub logits: Vec<T>,
    pub intensity: T,
}

/// Total loss and its two unweighted components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnotatorLoss<T> {
    pub total: T,
    pub cls: T,
    pub reg: T,
}

impl<T: Scalar> AnnotatorModel<T> {
    pub fn new(config: AnnotatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let input = Linear::new(&mut params, "input", config.input_dim, h, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::new(&mut params, &format!("encoder{l}"), h, config.heads, config.ff_width, &mut rng))
            .collect();
        let final_norm = LayerNorm::new(&mut params, "final_norm", h);
        let cls_head = Linear::new(&mut params, "cls_head", h, config.categories, &mut rng);
        let reg_head = Linear::new(&mut params, "reg_head", h, 1, &mut rng);
        Ok(Self { config, seed, params, input, blocks, final_norm, cls_head, reg_head })
    }

    pub fn config(&self) -> &AnnotatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the forward pass; returns `(words × C logits, words × 1 intensities)`.
    pub fn record(&self, g: &mut Graph<'_, T>, frames: &Matrix<T>, spans: &[Range<usize>]) -> (Var, Var) {
        let x = g.input(frames.clone());
        let h = self.input.forward(g, x);
        let pe = g.input(sinusoidal_positions(frames.rows(), self.config.hidden));
        let mut h = g.add(h, pe);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        let h = self.final_norm.forward(g, h);
        let pooled = g.span_mean(h, spans);
        let logits = self.cls_head.forward(g, pooled);
        let raw = self.reg_head.forward(g, pooled);
        let intensity = g.sigmoid(raw);
        (logits, intensity)
    }

    /// Records summed CE and squared error for one example.
    fn record_sums(&self, g: &mut Graph<'_, T>, ex: &Example<T>) -> (Var, Var) {
        let (logits, intensity) = self.record(g, &ex.frames, &ex.spans);
        let ce = g.cross_entropy_sum(logits, &ex.codes, T::zero());
        let se = g.squared_error_sum(intensity, &ex.intensities);
        (ce, se)
    }

    /// Records the mean-reduced joint loss of a batch; returns `(total, cls, reg)` nodes.
    fn record_batch_loss(&self, g: &mut Graph<'_, T>, batch: &[&Example<T>], cfg: &AnnotatorLossConfig) -> (Var, Var, Var) {
        let mut ce_sum = None;
        let mut se_sum = None;
        let mut words = 0usize;
        for ex in batch {
            let (ce, se) = self.record_sums(g, ex);
            ce_sum = Some(ce_sum.map_or(ce, |acc| g.add(acc, ce)));
            se_sum = Some(se_sum.map_or(se, |acc| g.add(acc, se)));
            words += ex.codes.len();
        }
        let inv = T::one() / T::lit(words as f64);
        let cls = g.scale(ce_sum.expect("non-empty batch"), inv);
        let reg = g.scale(se_sum.expect("non-empty batch"), inv);
        let wc = g.scale(cls, T::lit(cfg.lambda_cls));
        let wr = g.scale(reg, T::lit(cfg.lambda_reg));
        let total = g.add(wc, wr);
        (total, cls, reg)
    }

    /// Loss and parameter gradients of the joint objective on `utterances`.
    pub fn loss_and_gradients(
        &self,
        utterances: &[&Utterance],
        cfg: &AnnotatorLossConfig,
    ) -> Result<(AnnotatorLoss<T>, crate::autodiff::Gradients<T>)> {
        let examples = utterances.iter().map(|u| Example::from_utterance(u)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Example<T>> = examples.iter().collect();
        if refs.is_empty() {
            return Err(Error::EmptyBatch("annotator loss"));
        }
        let mut g = Graph::new(&self.params);
        let (total, cls, reg) = self.record_batch_loss(&mut g, &refs, cfg);
        let loss = AnnotatorLoss { total: g.scalar(total), cls: g.scalar(cls), reg: g.scalar(reg) };
        Ok((loss, g.backward(total)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::from_store(MODEL_NAME, config, self.seed, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != MODEL_NAME {
            return Err(Error::Checkpoint(format!("expected an {MODEL_NAME} checkpoint, found {:?}", ck.model)));
        }
        let config: AnnotatorConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut model = Self::new(config, ck.seed)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Per-word category logits and intensity for `words` over `seq`.
pub fn annotator_forward<T: Scalar>(
    m: &AnnotatorModel<T>,
    seq: &EmotionFeatureSequence,
    words: &[WordAlignment],
) -> Result<Vec<WordPrediction<T>>> {
    if seq.dim() != m.config.input_dim {
        return Err(Error::Dimension(format!("features have dim {}, model expects {}", seq.dim(), m.config.input_dim)));
    }
    let spans = words.iter().map(|w| frames_for_word(w, seq.hop_s(), seq.len())).collect::<Result<Vec<_>>>()?;
    if spans.is_empty() {
        return Ok(Vec::new());
    }
    let frames = seq.to_matrix::<T>();
    let mut g = Graph::new(&m.params);
    let (logits, intensity) = m.record(&mut g, &frames, &spans);
    let logits = g.value(logits);
    let intensity = g.value(intensity);
    Ok((0..spans.len())
        .map(|i| WordPrediction { logits: logits.row(i).to_vec(), intensity: intensity.get(i, 0) })
        .collect())
}

/// `λ_cls · mean CE + λ_reg · mean squared intensity error`.
pub fn annotator_loss<T: Scalar>(
    preds: &[WordPrediction<T>],
    golds: &[WordEmotionAnnotation],
    cfg: &AnnotatorLossConfig,
) -> Result<AnnotatorLoss<T>> {
    cfg.validate()?;
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch { what: "annotator predictions vs gold labels", expected: golds.len(), found: preds.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch("annotator loss"));
    }
    let n = T::lit(preds.len() as f64);
    let mut ce = T::zero();
    let mut se = T::zero();
    for (p, gold) in preds.iter().zip(golds) {
        ce += crate::autodiff::smoothed_cross_entropy_row(&p.logits, gold.category.code(), T::zero());
        let d = p.intensity - T::lit(gold.intensity);
        se += d * d;
    }
    let cls = ce / n;
    let reg = se / n;
    let total = T::lit(cfg.lambda_cls) * cls + T::lit(cfg.lambda_reg) * reg;
    Ok(AnnotatorLoss { total, cls, reg })
}

/// Category by argmax (ties to the lowest code) and the predicted intensity.
pub fn annotate<T: Scalar>(m: &AnnotatorModel<T>, u: &Utterance) -> Result<Vec<WordEmotionAnnotation>> {
    let preds = annotator_forward(m, &u.features, &u.words)?;
    Ok(preds.iter().map(prediction_to_annotation).collect())
}

pub fn prediction_to_annotation<T: Scalar>(p: &WordPrediction<T>) -> WordEmotionAnnotation {
    let code = argmax(&p.logits).unwrap_or(0);
    WordEmotionAnnotation {
        category: EmotionCategory::from_code(code).expect("head width equals the category count"),
        intensity: p.intensity.to_f64_lossy().clamp(0.0, 1.0),
    }
}

/// Precomputed tensors of one annotated utterance.
#[derive(Clone, Debug)]
struct Example<T> {
    frames: Matrix<T>,
    spans: Vec<Range<usize>>,
    codes: Vec<usize>,
    intensities: Vec<T>,
}

impl<T: Scalar> Example<T> {
    fn from_utterance(u: &Utterance) -> Result<Self> {
        let ann = u
            .annotations
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("utterance {} has no gold annotations", u.utterance_id)))?;
        if ann.len() != u.words.len() {
            return Err(Error::LengthMismatch { what: "annotations vs words", expected: u.words.len(), found: ann.len() });
        }
        Ok(Self {
            frames: u.features.to_matrix(),
            spans: u.word_spans()?,
            codes: ann.iter().map(|a| a.category.code()).collect(),
            intensities: ann.iter().map(|a| T::lit(a.intensity)).collect(),
        })
    }
}

/// One JSON-lines record of the annotator training log. Epoch 0 is the
/// evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorEpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
    pub dev_cls_loss: f64,
    pub dev_reg_loss: f64,
    pub dev_accuracy: f64,
    pub dev_intensity_mae: f64,
}

/// Held-out metrics of an annotator on a set of utterances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnotatorEval {
    pub loss: AnnotatorLoss<f64>,
    pub accuracy: f64,
    pub intensity_mae: f64,
    pub words: usize,
}

pub fn evaluate_annotator<T: Scalar>(
    m: &AnnotatorModel<T>,
    utterances: &[Utterance],
    cfg: &AnnotatorLossConfig,
) -> Result<AnnotatorEval> {
    let (mut ce, mut se, mut correct, mut abs, mut words) = (0.0, 0.0, 0usize, 0.0, 0usize);
    for u in utterances {
        let gold = u
            .annotations
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("utterance {} has no gold annotations", u.utterance_id)))?;
        let preds = annotator_forward(m, &u.features, &u.words)?;
        let unit = annotator_loss(&preds, gold, &AnnotatorLossConfig { lambda_cls: 1.0, lambda_reg: 1.0 })?;
        let n = preds.len() as f64;
        ce += unit.cls.to_f64_lossy() * n;
        se += unit.reg.to_f64_lossy() * n;
        for (p, g) in preds.iter().zip(gold) {
            let a = prediction_to_annotation(p);
            correct += usize::from(a.category == g.category);
            abs += (p.intensity.to_f64_lossy() - g.intensity).abs();
        }
        words += preds.len();
    }
    if words == 0 {
        return Err(Error::EmptyBatch("annotator evaluation"));
    }
    let n = words as f64;
    let (cls, reg) = (ce / n, se / n);
    Ok(AnnotatorEval {
        loss: AnnotatorLoss { total: cfg.lambda_cls * cls + cfg.lambda_reg * reg, cls, reg },
        accuracy: correct as f64 / n,
        intensity_mae: abs / n,
        words,
    })
}

/// Trains with Adam on `corpus.train`, selecting the parameters with the
/// lowest dev loss (train loss when the dev split is empty).
pub fn train_annotator<T: Scalar>(
    corpus: &Corpus,
    model_cfg: &AnnotatorConfig,
    cfg: &TrainConfig,
    loss_cfg: &AnnotatorLossConfig,
) -> Result<(AnnotatorModel<T>, Vec<AnnotatorEpochLog>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut model = AnnotatorModel::<T>::new(model_cfg.clone(), cfg.seed)?;
    let examples = corpus.train.iter().map(Example::from_utterance).collect::<Result<Vec<Example<T>>>>()?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch("annotator training split"));
    }
    let select_on = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let mut adam = Adam::new(&model.params, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA11C_E5ED);
    let clip = cfg.clip_norm.map(T::lit);

    let eval = evaluate_annotator(&model, select_on, loss_cfg)?;
    let mut log = vec![epoch_record(0, None, &eval)];
    let mut best = (eval.loss.total, model.params.clone());

    for epoch in 1..=cfg.epochs {
        let mut train_total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in shuffled_batches(examples.len(), cfg.batch_size, &mut shuffle_rng).iter().enumerate() {
            let refs: Vec<&Example<T>> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = {
                let mut g = Graph::new(&model.params);
                let (total, _, _) = model.record_batch_loss(&mut g, &refs, loss_cfg);
                (g.scalar(total), g.backward(total))
            };
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, param_norm: model.params.norm().to_f64_lossy() });
            }
            if let Some(c) = clip {
                grads.clip_norm(c);
            }
            adam.step(&mut model.params, &grads);
            train_total += loss.to_f64_lossy();
            batches += 1;
        }
        let eval = evaluate_annotator(&model, select_on, loss_cfg)?;
        log.push(epoch_record(epoch, Some(train_total / batches as f64), &eval));
        if eval.loss.total < best.0 {
            best = (eval.loss.total, model.params.clone());
        }
    }
    model.params = best.1;
    Ok((model, log))
}

fn epoch_record(epoch: usize, train_loss: Option<f64>, eval: &AnnotatorEval) -> AnnotatorEpochLog {
    AnnotatorEpochLog {
        epoch,
        train_loss,
        dev_loss: eval.loss.total,
        dev_cls_loss: eval.loss.cls,
        dev_reg_loss: eval.loss.reg,
        dev_accuracy: eval.accuracy,
        dev_intensity_mae: eval.intensity_mae,
    }
}
