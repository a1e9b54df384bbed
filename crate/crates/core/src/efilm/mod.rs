//! Emotion-modulated autoregressive speech-token generator.
//!
//! Text tokens are embedded (`h_text`), per-token emotion vectors are fused
//! with the text embeddings, and a FiLM projection of the fused features
//! yields `(γ − 1, β)` that modulate `h_text` element-wise. A small causal
//! transformer decoder cross-attends to the modulated states and predicts
//! the next speech token plus the emotion category of every step.

mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{emo_loss, total_loss, tts_loss, GenLossConfig, TtsBatch};
pub use train::{
    build_example, evaluate_efilm, free_running_accuracy, gold_trajectory, train_efilm, AnnotationSource,
    EFiLMEpochLog, EFiLMEval, TtsExample,
};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{WordEmotionAnnotation, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::nn::{normal, sinusoidal_positions, DecoderBlock, LayerNorm, Linear};
use crate::scalar::{argmax, softmax, Scalar};
use crate::tensor::Matrix;

pub const MODEL_NAME: &str = "efilm";

/// How emotion features reach the text states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationVariant {
    /// `γ ⊙ h + β`
    #[default]
    Film,
    /// `h + W·e`
    Addition,
    /// `h` unchanged.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EFiLMConfig {
    pub text_vocab_size: usize,
    pub categories: usize,
    pub embed_dim: usize,
    pub emotion_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub variant: ModulationVariant,
}

impl Default for EFiLMConfig {
    fn default() -> Self {
        Self {
            text_vocab_size: 8,
            categories: NUM_CATEGORIES,
            embed_dim: 64,
            emotion_dim: 32,
            decoder_layers: 1,
            heads: 4,
            ff_width: 128,
            variant: ModulationVariant::Film,
        }
    }
}

impl EFiLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_vocab_size < 2 {
            return Err(Error::InvalidConfig("text_vocab_size must be at least 2".into()));
        }
        if self.categories != NUM_CATEGORIES {
            return Err(Error::InvalidConfig(format!("generator needs {NUM_CATEGORIES} categories")));
        }
        if self.embed_dim == 0 || self.emotion_dim == 0 || self.ff_width == 0 {
            return Err(Error::InvalidConfig("generator widths must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// `V`: speech tokens under the toy coupling, `text_vocab_size · C`.
    pub fn speech_vocab(&self) -> usize {
        self.text_vocab_size * self.categories
    }

    /// Reserved end-of-sequence code (`V`).
    pub fn eos(&self) -> usize {
        self.speech_vocab()
    }

    /// Decoder start symbol (`V + 1`); never predicted.
    pub fn bos(&self) -> usize {
        self.speech_vocab() + 1
    }
}

/// Category code and intensity attached to one text token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenEmotion {
    pub category: usize,
    pub intensity: f64,
}

/// Expands word-level annotations onto tokens.
pub fn token_emotions(annotations: &[WordEmotionAnnotation], word_of_token: &[usize]) -> Result<Vec<TokenEmotion>> {
    word_of_token
        .iter()
        .enumerate()
        .map(|(t, &w)| {
            annotations
                .get(w)
                .map(|a| TokenEmotion { category: a.category.code(), intensity: a.intensity })
                .ok_or(Error::UnmappedToken { token: t })
        })
        .collect()
}

/// `γ ⊙ h + β` for row-aligned matrices.
pub fn apply_film<T: Scalar>(h: &Matrix<T>, gamma: &Matrix<T>, beta: &Matrix<T>) -> Result<Matrix<T>> {
    if h.shape() != gamma.shape() || h.shape() != beta.shape() {
        return Err(Error::Dimension(format!(
            "film shapes differ: h {:?}, gamma {:?}, beta {:?}",
            h.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(h.zip_map(gamma, |x, g| g * x).zip_map(beta, |x, b| x + b))
}

#[derive(Clone, Debug)]
pub struct EFiLMModel<T> {
    config: EFiLMConfig,
    seed: u64,
    params: ParamStore<T>,
    text_embedding: ParamId,
    category_embedding: ParamId,
    intensity_projection: ParamId,
    fuse: Linear,
    film: Linear,
    additive: Linear,
    token_embedding: ParamId,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    speech_head: Linear,
    emotion_head: Linear,
}

/// Decoder outputs for every teacher-forced step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutputs<T> {
    /// `steps × (V + 1)`, the last column is EOS.
    pub speech_logits: Matrix<T>,
    /// `steps × C`
    pub emotion_logits: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64 },
}

/// Generated speech tokens (EOS excluded) and the emotion posterior of each
/// emitted step.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation<T> {
    pub tokens: Vec<usize>,
    pub posteriors: Vec<Vec<T>>,
    pub stopped_on_eos: bool,
}

/// File form of a generation: `{"tokens", "posteriors", "mode", "seed"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub utterance_id: String,
    pub tokens: Vec<usize>,
    pub posteriors: Vec<Vec<f64>>,
    pub mode: String,
    pub seed: Option<u64>,
}

impl GenerationRecord {
    pub fn new<T: Scalar>(utterance_id: &str, generation: &Generation<T>, mode: DecodeMode) -> Self {
        let (mode, seed) = match mode {
            DecodeMode::Greedy => ("greedy".to_string(), None),
            DecodeMode::Sampled { seed } => ("sampled".to_string(), Some(seed)),
        };
        Self {
            utterance_id: utterance_id.to_string(),
            tokens: generation.tokens.clone(),
            posteriors: generation.posteriors.iter().map(|p| p.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
            mode,
            seed,
        }
    }
}

impl<T: Scalar> EFiLMModel<T> {
    pub fn new(config: EFiLMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = config.embed_dim;
        let ee = config.emotion_dim;
        let text_embedding = params.register("text_embedding", normal(&mut rng, config.text_vocab_size, e, 1.0));
        let category_embedding = params.register("emotion.category_embedding", normal(&mut rng, config.categories, ee, 1.0));
        let intensity_projection = params.register("emotion.intensity_projection", normal(&mut rng, 1, ee, 1.0));
        let fuse = Linear::new(&mut params, "fuse", e + ee, e, &mut rng);
        // Zero weights make both modulations the identity before training.
        let film = Linear::zeros(&mut params, "film", e, 2 * e);
        let additive = Linear::zeros(&mut params, "additive", e, e);
        let token_embedding = params.register("decoder.token_embedding", normal(&mut rng, config.speech_vocab() + 2, e, 1.0));
        let blocks = (0..config.decoder_layers)
            .map(|l| DecoderBlock::new(&mut params, &format!("decoder.block{l}"), e, config.heads, config.ff_width, &mut rng))
            .collect();
        let final_norm = LayerNorm::new(&mut params, "decoder.final_norm", e);
        let speech_head = Linear::new(&mut params, "speech_head", e, config.speech_vocab() + 1, &mut rng);
        let emotion_head = Linear::new(&mut params, "emotion_head", e, config.categories, &mut rng);
        Ok(Self {
            config,
            seed,
            params,
            text_embedding,
            category_embedding,
            intensity_projection,
            fuse,
            film,
            additive,
            token_embedding,
            blocks,
            final_norm,
            speech_head,
            emotion_head,
        })
    }

    pub fn config(&self) -> &EFiLMConfig {
        &self.config
    }

    pub fn variant(&self) -> ModulationVariant {
        self.config.variant
    }

    /// Switches the modulation path without touching any parameter.
    pub fn set_variant(&mut self, variant: ModulationVariant) {
        self.config.variant = variant;
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

    fn check_tokens(&self, text_tokens: &[usize]) -> Result<()> {
        if text_tokens.is_empty() {
            return Err(Error::EmptyBatch("text tokens"));
        }
        if let Some(&bad) = text_tokens.iter().find(|&&t| t >= self.config.text_vocab_size) {
            return Err(Error::InvalidConfig(format!("text token {bad} outside vocabulary of {}", self.config.text_vocab_size)));
        }
        Ok(())
    }

    fn check_emotion(&self, text_tokens: &[usize], emotion: Option<&[TokenEmotion]>) -> Result<()> {
        if let Some(e) = emotion {
            if e.len() != text_tokens.len() {
                return Err(Error::LengthMismatch { what: "token emotions vs text tokens", expected: text_tokens.len(), found: e.len() });
            }
            if let Some(bad) = e.iter().find(|x| x.category >= self.config.categories) {
                return Err(Error::InvalidConfig(format!("emotion category {} outside range", bad.category)));
            }
        }
        Ok(())
    }

    /// Text embeddings (`h_text`): token embedding plus sinusoidal position.
    fn record_text(&self, g: &mut Graph<'_, T>, text_tokens: &[usize]) -> (Var, Var) {
        let table = g.param(self.text_embedding);
        let x = g.gather(table, text_tokens);
        let pe = g.input(sinusoidal_positions(text_tokens.len(), self.config.embed_dim));
        let h = g.add(x, pe);
        (x, h)
    }

    /// Emotion vectors `category_embedding[c] + intensity · intensity_projection`,
    /// or zeros when no emotion is given.
    fn record_emotion(&self, g: &mut Graph<'_, T>, n: usize, emotion: Option<&[TokenEmotion]>) -> Var {
        match emotion {
            Some(e) => {
                let table = g.param(self.category_embedding);
                let codes: Vec<usize> = e.iter().map(|x| x.category).collect();
                let cat = g.gather(table, &codes);
                let s = g.input(Matrix::column_vector(e.iter().map(|x| T::lit(x.intensity)).collect()));
                let proj = g.param(self.intensity_projection);
                let scaled = g.matmul(s, proj);
                g.add(cat, scaled)
            }
            None => g.input(Matrix::zeros(n, self.config.emotion_dim)),
        }
    }

    /// Fused emotion–text features: `W [x_text ; e] + b`.
    fn record_fused(&self, g: &mut Graph<'_, T>, x_text: Var, e: Var) -> Var {
        let cat = g.concat_cols(&[x_text, e]);
        self.fuse.forward(g, cat)
    }

    fn record_modulation(&self, g: &mut Graph<'_, T>, h: Var, fused: Var) -> Var {
        let e = self.config.embed_dim;
        match self.config.variant {
            ModulationVariant::Film => {
                let gb = self.film.forward(g, fused);
                let gamma_minus_one = g.slice_cols(gb, 0..e);
                let beta = g.slice_cols(gb, e..2 * e);
                let gamma = g.add_const(gamma_minus_one, T::one());
                let scaled = g.mul(gamma, h);
                g.add(scaled, beta)
            }
            ModulationVariant::Addition => {
                let shift = self.additive.forward(g, fused);
                g.add(h, shift)
            }
            ModulationVariant::None => h,
        }
    }

    /// Modulated text states used as decoder memory.
    pub fn record_memory(&self, g: &mut Graph<'_, T>, text_tokens: &[usize], emotion: Option<&[TokenEmotion]>) -> Var {
        let (x, h) = self.record_text(g, text_tokens);
        if self.config.variant == ModulationVariant::None {
            return h;
        }
        let e = self.record_emotion(g, text_tokens.len(), emotion);
        let fused = self.record_fused(g, x, e);
        self.record_modulation(g, h, fused)
    }

    /// Decoder over `inputs` (BOS followed by previous speech tokens);
    /// returns `(speech logits, emotion logits)` nodes.
    pub fn record_decoder(&self, g: &mut Graph<'_, T>, memory: Var, inputs: &[usize]) -> (Var, Var) {
        let table = g.param(self.token_embedding);
        let d = g.gather(table, inputs);
        let pe = g.input(sinusoidal_positions(inputs.len(), self.config.embed_dim));
        let mut d = g.add(d, pe);
        for block in &self.blocks {
            d = block.forward(g, d, memory);
        }
        let d = self.final_norm.forward(g, d);
        let speech = self.speech_head.forward(g, d);
        let emotion = self.emotion_head.forward(g, d);
        (speech, emotion)
    }

    /// Teacher-forced outputs for every step of `decoder_inputs`.
    pub fn forward(
        &self,
        text_tokens: &[usize],
        emotion: Option<&[TokenEmotion]>,
        decoder_inputs: &[usize],
    ) -> Result<StepOutputs<T>> {
        self.check_tokens(text_tokens)?;
        self.check_emotion(text_tokens, emotion)?;
        if decoder_inputs.is_empty() {
            return Err(Error::EmptyBatch("decoder inputs"));
        }
        if let Some(&bad) = decoder_inputs.iter().find(|&&t| t > self.config.bos()) {
            return Err(Error::InvalidConfig(format!("decoder input {bad} outside vocabulary")));
        }
        let mut g = Graph::new(&self.params);
        let memory = self.record_memory(&mut g, text_tokens, emotion);
        let (speech, emo) = self.record_decoder(&mut g, memory, decoder_inputs);
        Ok(StepOutputs { speech_logits: g.value(speech).clone(), emotion_logits: g.value(emo).clone() })
    }

    /// Text embeddings `h_text` of `text_tokens`.
    pub fn text_states(&self, text_tokens: &[usize]) -> Result<Matrix<T>> {
        self.check_tokens(text_tokens)?;
        let mut g = Graph::new(&self.params);
        let (_, h) = self.record_text(&mut g, text_tokens);
        Ok(g.value(h).clone())
    }

    /// Fused per-token emotion features that drive the modulation.
    pub fn fused_features(&self, text_tokens: &[usize], emotion: Option<&[TokenEmotion]>) -> Result<Matrix<T>> {
        self.check_tokens(text_tokens)?;
        self.check_emotion(text_tokens, emotion)?;
        let mut g = Graph::new(&self.params);
        let (x, _) = self.record_text(&mut g, text_tokens);
        let e = self.record_emotion(&mut g, text_tokens.len(), emotion);
        let fused = self.record_fused(&mut g, x, e);
        Ok(g.value(fused).clone())
    }

    /// Applies this model's modulation variant to `h_text` given fused features.
    pub fn film(&self, h_text: &Matrix<T>, fused: &Matrix<T>) -> Result<Matrix<T>> {
        if h_text.rows() != fused.rows() {
            return Err(Error::LengthMismatch { what: "film emotion features vs text states", expected: h_text.rows(), found: fused.rows() });
        }
        if h_text.cols() != self.config.embed_dim || fused.cols() != self.config.embed_dim {
            return Err(Error::Dimension(format!("film expects width {}", self.config.embed_dim)));
        }
        let mut g = Graph::new(&self.params);
        let h = g.input(h_text.clone());
        let e = g.input(fused.clone());
        let out = self.record_modulation(&mut g, h, e);
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::from_store(MODEL_NAME, config, self.seed, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != MODEL_NAME {
            return Err(Error::Checkpoint(format!("expected an {MODEL_NAME} checkpoint, found {:?}", ck.model)));
        }
        let config: EFiLMConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut model = Self::new(config, ck.seed)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Per-token emotion vectors for word-level annotations.
pub fn encode_emotion<T: Scalar>(
    m: &EFiLMModel<T>,
    text_tokens: &[usize],
    annotations: &[WordEmotionAnnotation],
    word_of_token: &[usize],
) -> Result<Matrix<T>> {
    if word_of_token.len() != text_tokens.len() {
        return Err(Error::LengthMismatch { what: "word_of_token vs text tokens", expected: text_tokens.len(), found: word_of_token.len() });
    }
    let emotion = token_emotions(annotations, word_of_token)?;
    m.check_emotion(text_tokens, Some(&emotion))?;
    let mut g = Graph::new(&m.params);
    let e = m.record_emotion(&mut g, text_tokens.len(), Some(&emotion));
    Ok(g.value(e).clone())
}

/// Autoregressive decoding until EOS or `max_len` tokens.
pub fn generate<T: Scalar>(
    m: &EFiLMModel<T>,
    text_tokens: &[usize],
    emotion: Option<&[TokenEmotion]>,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Generation<T>> {
    if max_len < 1 {
        return Err(Error::InvalidConfig("max_len must be at least 1".into()));
    }
    m.check_tokens(text_tokens)?;
    m.check_emotion(text_tokens, emotion)?;
    let mut rng = match mode {
        DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let eos = m.config.eos();
    let mut inputs = vec![m.config.bos()];
    let mut out = Generation { tokens: Vec::new(), posteriors: Vec::new(), stopped_on_eos: false };
    while out.tokens.len() < max_len {
        let mut g = Graph::new(&m.params);
        let memory = m.record_memory(&mut g, text_tokens, emotion);
        let (speech, emo) = m.record_decoder(&mut g, memory, &inputs);
        let last = inputs.len() - 1;
        let logits = g.value(speech).row(last);
        let token = match rng.as_mut() {
            None => argmax(logits).expect("non-empty head"),
            Some(rng) => sample(&softmax(logits), rng),
        };
        if token == eos {
            out.stopped_on_eos = true;
            break;
        }
        out.posteriors.push(softmax(g.value(emo).row(last)));
        out.tokens.push(token);
        inputs.push(token);
    }
    Ok(out)
}

fn sample<T: Scalar>(probs: &[T], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p.to_f64_lossy();
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
