use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use emofilm::annotator::{evaluate_annotator, train_annotator, AnnotatorModel};
use emofilm::data::{TransitionKind, Utterance, WordEmotionAnnotation, NUM_CATEGORIES};
use emofilm::efilm::{build_example, generate, gold_trajectory, train_efilm, DecodeMode, EFiLMModel, GenerationRecord};
use emofilm::metrics::{evaluate_corpus, trajectory_svg, transition_localized, word_categories, MetricReport, UtteranceEmotion};
use emofilm::synth::{build_corpus, load_corpus, INDEX_FILE};
use emofilm::{annotate, make_emotion_basis, Checkpoint, Corpus, EmotionTrajectory};
use serde::{Deserialize, Serialize};

use crate::config::{self, derive_seed, Loaded, Mode, Split};
use crate::{Cli, Command};

/// Marks failures caused by bad input rather than by the run itself.
#[derive(Debug)]
struct InvalidInput;

impl fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let invalid = e.downcast_ref::<InvalidInput>().is_some()
        || e.chain().any(|c| {
            matches!(
                c.downcast_ref::<emofilm::Error>(),
                Some(emofilm::Error::InvalidConfig(_) | emofilm::Error::Incompatible { .. })
            )
        });
    if invalid {
        1
    } else {
        2
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    produced: Vec<String>,
}

const ANNOTATOR_CHECKPOINT: &str = "annotator.json";
const EFILM_CHECKPOINT: &str = "efilm.json";

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Describe { checkpoint } = &cli.command {
        return describe(checkpoint);
    }
    let loaded = config::load(cli.config.as_deref(), &cli.overrides, cli.seed).context(InvalidInput)?;
    let (name, produced) = match &cli.command {
        Command::GenData => ("gen-data", gen_data(&loaded)?),
        Command::TrainAnnotator => ("train-annotator", train_annotator_cmd(&loaded)?),
        Command::Annotate => ("annotate", annotate_cmd(&loaded)?),
        Command::TrainTts => ("train-tts", train_tts(&loaded)?),
        Command::Synthesize => ("synthesize", synthesize(&loaded)?),
        Command::Evaluate { generated } => ("evaluate", evaluate(&loaded, generated.as_deref())?),
        Command::Plot { generated } => ("plot", plot(&loaded, generated.as_deref())?),
        Command::Pipeline => {
            let mut all = Vec::new();
            for (step, f) in [
                ("gen-data", gen_data as fn(&Loaded) -> anyhow::Result<Vec<PathBuf>>),
                ("train-annotator", train_annotator_cmd),
                ("annotate", annotate_cmd),
                ("train-tts", train_tts),
                ("synthesize", synthesize),
                ("evaluate", |l| evaluate(l, None)),
                ("plot", |l| plot(l, None)),
            ] {
                eprintln!("[{step}]");
                let produced = f(&loaded).with_context(|| format!("pipeline step {step}"))?;
                all.extend(write_manifest(&loaded, step, produced)?);
            }
            ("pipeline", all)
        }
        Command::Describe { .. } => unreachable!("handled above"),
    };
    let manifest = write_manifest(&loaded, name, produced)?;
    eprintln!("wrote {}", manifest.last().map(|p| p.display().to_string()).unwrap_or_default());
    Ok(())
}

/// Writes `run_manifest_<command>.json` and returns the produced files plus the manifest.
fn write_manifest(l: &Loaded, command: &str, mut produced: Vec<PathBuf>) -> anyhow::Result<Vec<PathBuf>> {
    let path = l.path(&l.config.paths.report_dir).join(format!("run_manifest_{command}.json"));
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: l.hash.clone(),
        seed: l.config.seed,
        produced: produced.iter().map(|p| l.display(p)).collect(),
    };
    write_json(&path, &manifest)?;
    produced.push(path);
    Ok(produced)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn corpus(l: &Loaded) -> anyhow::Result<Corpus> {
    let index = l.path(&l.config.paths.corpus_dir).join(INDEX_FILE);
    load_corpus(&index).with_context(|| format!("loading corpus {} (run gen-data first)", index.display()))
}

fn split<'a>(l: &Loaded, c: &'a Corpus) -> &'a [Utterance] {
    match l.config.evaluate.split {
        Split::Train => &c.train,
        Split::Dev => &c.dev,
        Split::Test => &c.test,
    }
}

fn checkpoint_path(l: &Loaded, file: &str) -> PathBuf {
    l.path(&l.config.paths.checkpoint_dir).join(file)
}

fn report_path(l: &Loaded, file: &str) -> PathBuf {
    l.path(&l.config.paths.report_dir).join(file)
}

fn gen_data(l: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let c = &l.config;
    let out = l.path(&c.paths.corpus_dir);
    let index = out.join(INDEX_FILE);
    if index.exists() {
        fs::remove_file(&index).with_context(|| format!("replacing {}", index.display()))?;
    }
    let basis = make_emotion_basis(NUM_CATEGORIES, c.feature_dim, derive_seed(c.seed, "basis"))?;
    let mut produced = Vec::new();
    for (i, spec) in c.corpora.iter().enumerate() {
        let mut spec = spec.clone();
        spec.seed = c.seed.wrapping_mul(1000).wrapping_add(i as u64);
        build_corpus(&spec, &basis, &out)?;
        for k in 0..spec.n_utterances {
            let id = spec.utterance_id(k);
            for ext in ["json", "features.json", "align.jsonl"] {
                produced.push(out.join("utterances").join(format!("{id}.{ext}")));
            }
        }
    }
    produced.push(index);
    Ok(produced)
}

fn train_annotator_cmd(l: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let c = &l.config.annotator;
    let data = corpus(l)?;
    let train = emofilm::TrainConfig { seed: derive_seed(l.config.seed, "annotator"), ..c.train.clone() };
    let (model, log) = train_annotator::<f64>(&data, &c.model, &train, &c.loss)?;
    let ck = checkpoint_path(l, ANNOTATOR_CHECKPOINT);
    model.to_checkpoint().save(&ck)?;
    let log_path = report_path(l, "annotator_log.jsonl");
    write_jsonl(&log_path, &log)?;
    if let Some(last) = log.iter().min_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss)) {
        eprintln!("annotator: best dev accuracy {:.4}, intensity MAE {:.4}", last.dev_accuracy, last.dev_intensity_mae);
    }
    Ok(vec![ck, log_path])
}

#[derive(Serialize)]
struct AnnotateReport {
    utterances: usize,
    test_words: usize,
    test_accuracy: f64,
    test_intensity_mae: f64,
}

fn annotate_cmd(l: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(&checkpoint_path(l, ANNOTATOR_CHECKPOINT))?;
    let model = AnnotatorModel::<f64>::from_checkpoint(&ck)?;
    let data = corpus(l)?;
    let dir = l.path(&l.config.paths.annotation_dir);
    let mut produced = Vec::new();
    let all: Vec<&Utterance> = data.train.iter().chain(&data.dev).chain(&data.test).collect();
    for u in &all {
        let path = dir.join(format!("{}.json", u.utterance_id));
        write_json(&path, &annotate(&model, u)?)?;
        produced.push(path);
    }
    let eval = evaluate_annotator(&model, &data.test, &l.config.annotator.loss)?;
    let report = AnnotateReport {
        utterances: all.len(),
        test_words: eval.words,
        test_accuracy: eval.accuracy,
        test_intensity_mae: eval.intensity_mae,
    };
    let path = report_path(l, "annotate_report.json");
    write_json(&path, &report)?;
    produced.push(path);
    Ok(produced)
}

fn with_predicted(l: &Loaded, utterances: &mut [Utterance]) -> anyhow::Result<()> {
    let dir = l.path(&l.config.paths.annotation_dir);
    for u in utterances {
        let path = dir.join(format!("{}.json", u.utterance_id));
        let ann: Vec<WordEmotionAnnotation> = read_json(&path).context("predicted annotations missing (run annotate first)")?;
        u.annotations = Some(ann);
    }
    Ok(())
}

fn train_tts(l: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let t = &l.config.tts;
    let mut data = corpus(l)?;
    if t.use_predicted_annotations {
        with_predicted(l, &mut data.train)?;
        with_predicted(l, &mut data.dev)?;
    }
    let train = emofilm::TrainConfig { seed: derive_seed(l.config.seed, "tts"), ..t.train.clone() };
    let (model, log) = train_efilm::<f64>(&data, &t.model, &train, &t.loss, t.variant, t.annotation_source)?;
    let ck = checkpoint_path(l, EFILM_CHECKPOINT);
    model.to_checkpoint().save(&ck)?;
    let log_path = report_path(l, "efilm_log.jsonl");
    write_jsonl(&log_path, &log)?;
    Ok(vec![ck, log_path])
}

fn synthesize(l: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let t = &l.config.tts;
    let model = EFiLMModel::<f64>::from_checkpoint(&Checkpoint::load(&checkpoint_path(l, EFILM_CHECKPOINT))?)?;
    let data = corpus(l)?;
    let dir = l.path(&l.config.paths.generated_dir);
    let mut produced = Vec::new();
    for u in split(l, &data) {
        let ex = build_example(u, model.config(), t.annotation_source)?;
        let mode = match t.mode {
            Mode::Greedy => DecodeMode::Greedy,
            Mode::Sampled => DecodeMode::Sampled { seed: derive_seed(l.config.seed, &format!("sample:{}", u.utterance_id)) },
        };
        let max_len = ex.text_tokens.len() + t.max_len_margin;
        let g = generate(&model, &ex.text_tokens, ex.emotion.as_deref(), max_len, mode)?;
        let path = dir.join(format!("{}.json", u.utterance_id));
        write_json(&path, &GenerationRecord::new(&u.utterance_id, &g, mode))?;
        produced.push(path);
    }
    Ok(produced)
}

fn generated_records(dir: &Path) -> anyhow::Result<Vec<GenerationRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading generated directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    files.iter().map(|p| read_json(p)).collect()
}

fn generated_dir(l: &Loaded, arg: Option<&Path>) -> PathBuf {
    arg.map(Path::to_path_buf).unwrap_or_else(|| l.path(&l.config.paths.generated_dir))
}

fn gold_emotion(u: &Utterance) -> anyhow::Result<UtteranceEmotion> {
    let annotations = u.annotations.as_ref().with_context(|| format!("utterance {} has no gold annotations", u.utterance_id))?;
    Ok(UtteranceEmotion {
        utterance_id: u.utterance_id.clone(),
        trajectory: gold_trajectory(u, NUM_CATEGORIES)?,
        categories: annotations.iter().map(|a| a.category).collect(),
    })
}

fn generated_emotion(r: &GenerationRecord, gold: &Utterance) -> anyhow::Result<UtteranceEmotion> {
    // An immediate EOS leaves nothing to score; it is treated as one uniform posterior.
    let points = if r.posteriors.is_empty() {
        vec![vec![1.0 / NUM_CATEGORIES as f64; NUM_CATEGORIES]]
    } else {
        r.posteriors.clone()
    };
    let trajectory = EmotionTrajectory::posteriors(points)?;
    let word_of_token = gold.word_of_token.as_ref().with_context(|| format!("utterance {} has no token map", gold.utterance_id))?;
    Ok(UtteranceEmotion {
        utterance_id: r.utterance_id.clone(),
        categories: word_categories(&trajectory, word_of_token)?,
        trajectory,
    })
}

/// First token step of the second emotion segment.
fn boundary_step(u: &Utterance) -> Option<usize> {
    let w = u.transition_word?;
    u.word_of_token.as_ref()?.iter().position(|&x| x > w)
}

#[derive(Serialize)]
struct EvaluationReport {
    split: Split,
    #[serde(flatten)]
    metrics: MetricReport,
    /// Generations that stopped before emitting any speech token.
    empty_generations: usize,
    strong_transition_utterances: usize,
    /// Fraction of strong-transition utterances whose posterior argmax
    /// switches exactly once within two steps of the gold boundary.
    transition_localized_fraction: Option<f64>,
}

fn evaluate(l: &Loaded, generated: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    let data = corpus(l)?;
    let gold_utts = split(l, &data);
    let records = generated_records(&generated_dir(l, generated))?;
    let by_id: std::collections::BTreeMap<&str, &Utterance> = gold_utts.iter().map(|u| (u.utterance_id.as_str(), u)).collect();
    let mut generated_items = Vec::new();
    for r in &records {
        let gold = by_id
            .get(r.utterance_id.as_str())
            .with_context(|| format!("generated utterance {} is not in the gold split", r.utterance_id))?;
        generated_items.push(generated_emotion(r, gold)?);
    }
    let gold_items = gold_utts.iter().map(gold_emotion).collect::<anyhow::Result<Vec<_>>>()?;
    let metrics = evaluate_corpus(&generated_items, &gold_items)?;

    let mut strong = 0usize;
    let mut localized = 0usize;
    for g in &generated_items {
        let u = by_id[g.utterance_id.as_str()];
        if u.transition_kind == Some(TransitionKind::Strong) {
            strong += 1;
            if let Some(b) = boundary_step(u) {
                localized += usize::from(transition_localized(&g.trajectory, b, 2));
            }
        }
    }
    let report = EvaluationReport {
        split: l.config.evaluate.split,
        metrics,
        empty_generations: records.iter().filter(|r| r.tokens.is_empty()).count(),
        strong_transition_utterances: strong,
        transition_localized_fraction: (strong > 0).then(|| localized as f64 / strong as f64),
    };
    eprintln!(
        "emo_sim {:.4}%  dtw {:.4}  accuracy {:.4}",
        report.metrics.emo_sim_percent, report.metrics.dtw_cost, report.metrics.overall_accuracy
    );
    let path = report_path(l, "metrics.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

fn plot(l: &Loaded, generated: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    let data = corpus(l)?;
    let gold_utts = split(l, &data);
    let records = generated_records(&generated_dir(l, generated))?;
    let dir = report_path(l, "plots");
    let mut produced = Vec::new();
    for r in records.iter().take(l.config.evaluate.plot_limit) {
        let Some(u) = gold_utts.iter().find(|u| u.utterance_id == r.utterance_id) else {
            bail!("generated utterance {} is not in the gold split", r.utterance_id);
        };
        let gold = gold_trajectory(u, NUM_CATEGORIES)?;
        let generated = generated_emotion(r, u)?.trajectory;
        let title = format!("{} (dashed: gold, solid: generated)", r.utterance_id);
        let path = dir.join(format!("{}.svg", r.utterance_id));
        fs::create_dir_all(&dir)?;
        fs::write(&path, trajectory_svg(&title, &gold, &generated))?;
        produced.push(path);
    }
    Ok(produced)
}

fn describe(path: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(path)?;
    println!("checkpoint: {}", path.display());
    println!("schema_version: {}", ck.schema_version);
    println!("model: {}", ck.model);
    println!("seed: {}", ck.seed);
    println!("config: {}", serde_json::to_string_pretty(&ck.config)?);
    println!("parameter groups:");
    let groups = ck.group_counts();
    for (g, n) in &groups {
        println!("  {g:<24} {n:>8}");
    }
    println!("  {:<24} {:>8}", "total", groups.values().sum::<usize>());
    println!("parameters:");
    for (name, (r, c)) in ck.shapes() {
        println!("  {name:<48} {r} x {c}");
    }
    Ok(())
}
