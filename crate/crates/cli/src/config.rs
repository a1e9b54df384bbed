use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use emofilm::efilm::{AnnotationSource, ModulationVariant};
use emofilm::{AnnotatorConfig, AnnotatorLossConfig, CorpusSpec, EFiLMConfig, GenLossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub annotation_dir: PathBuf,
    pub generated_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "out/corpus".into(),
            checkpoint_dir: "out/checkpoints".into(),
            annotation_dir: "out/annotations".into(),
            generated_dir: "out/generated".into(),
            report_dir: "out/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSection {
    pub model: AnnotatorConfig,
    pub train: TrainConfig,
    pub loss: AnnotatorLossConfig,
}

impl Default for AnnotatorSection {
    fn default() -> Self {
        Self { model: AnnotatorConfig::default(), train: TrainConfig::default(), loss: AnnotatorLossConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Greedy,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsSection {
    pub model: EFiLMConfig,
    pub train: TrainConfig,
    pub loss: GenLossConfig,
    pub variant: ModulationVariant,
    pub annotation_source: AnnotationSource,
    /// Train on annotator predictions instead of gold word labels.
    pub use_predicted_annotations: bool,
    pub mode: Mode,
    /// Extra steps allowed past the text length during generation.
    pub max_len_margin: usize,
}

impl Default for TtsSection {
    fn default() -> Self {
        Self {
            model: EFiLMConfig::default(),
            train: TrainConfig { epochs: 10, ..TrainConfig::default() },
            loss: GenLossConfig::default(),
            variant: ModulationVariant::Film,
            annotation_source: AnnotationSource::GoldWordLevel,
            use_predicted_annotations: true,
            mode: Mode::Greedy,
            max_len_margin: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Number of utterances plotted, in id order.
    pub plot_limit: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: Split::Test, plot_limit: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Dimension of the synthetic emotion feature space.
    pub feature_dim: usize,
    /// Corpus recipes; their `seed` fields are derived from `seed`.
    pub corpora: Vec<CorpusSpec>,
    pub annotator: AnnotatorSection,
    pub tts: TtsSection,
    pub evaluate: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            feature_dim: 16,
            corpora: vec![CorpusSpec::default()],
            annotator: AnnotatorSection::default(),
            tts: TtsSection::default(),
            evaluate: EvalSection::default(),
        }
    }
}

/// Effective configuration plus where relative paths are anchored.
pub struct Loaded {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Path as recorded in manifests: relative to the config directory when possible.
    pub fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.base_dir).unwrap_or(p).display().to_string()
    }
}

/// Seed of a named sub-task, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{label}:{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("override {key}: {part:?} is not an index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| anyhow!("override {key}: index {idx} out of range 0..{len}"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("override {key}: {part:?} is not inside an object"),
        };
    }
    Ok(())
}

/// Reads the config (or defaults), applies `key=json` overrides and the seed flag.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Loaded> {
    let (mut value, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
            (value, dir)
        }
        None => (serde_json::to_value(PipelineConfig::default())?, PathBuf::from(".")),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} must look like key.path=value"))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    if let Some(s) = seed {
        set_path(&mut value, "seed", Value::from(s))?;
    }
    let config: PipelineConfig = serde_json::from_value(value).context("invalid configuration")?;
    let canonical = serde_json::to_string(&config)?;
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    validate(&config)?;
    Ok(Loaded { config, base_dir, hash })
}

fn validate(c: &PipelineConfig) -> anyhow::Result<()> {
    if c.corpora.is_empty() {
        bail!("at least one corpus recipe is required");
    }
    if c.feature_dim < 2 {
        bail!("feature_dim must be at least 2");
    }
    for spec in &c.corpora {
        spec.validate()?;
        if spec.text_vocab_size != c.tts.model.text_vocab_size {
            bail!(
                "corpus text_vocab_size {} differs from tts.model.text_vocab_size {}",
                spec.text_vocab_size,
                c.tts.model.text_vocab_size
            );
        }
    }
    if c.annotator.model.input_dim != c.feature_dim {
        bail!("annotator.model.input_dim {} must equal feature_dim {}", c.annotator.model.input_dim, c.feature_dim);
    }
    c.annotator.model.validate()?;
    c.annotator.train.validate()?;
    c.annotator.loss.validate()?;
    c.tts.model.validate()?;
    c.tts.train.validate()?;
    c.tts.loss.validate()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys_and_arrays() {
        let loaded = load(None, &["tts.loss.lambda_emo=0".into(), "corpora.0.n_utterances=12".into(), "tts.variant=addition".into()], Some(3)).unwrap();
        assert_eq!(loaded.config.tts.loss.lambda_emo, 0.0);
        assert_eq!(loaded.config.corpora[0].n_utterances, 12);
        assert_eq!(loaded.config.tts.variant, ModulationVariant::Addition);
        assert_eq!(loaded.config.seed, 3);
        assert!(load(None, &["corpora.4.seed=1".into()], None).is_err());
        assert!(load(None, &["nonsense".into()], None).is_err());
        assert!(load(None, &["tts.unknown_key=1".into()], None).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = load(None, &[], Some(1)).unwrap();
        let b = load(None, &[], Some(1)).unwrap();
        let c = load(None, &[], Some(2)).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert_ne!(derive_seed(1, "tts"), derive_seed(1, "annotator"));
    }
}
