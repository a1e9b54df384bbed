//! Trajectory metrics, per-emotion accuracy and report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionCategory, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::scalar::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Category posteriors, one dimension per emotion.
    Posterior,
    /// Raw frame-level emotion features.
    Feature,
}

/// Time-ordered emotion vectors of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionTrajectory {
    pub kind: TrajectoryKind,
    pub points: Vec<Vec<f64>>,
}

impl EmotionTrajectory {
    pub fn new(kind: TrajectoryKind, points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().ok_or(Error::EmptyBatch("trajectory"))?.len();
        if dim == 0 {
            return Err(Error::Dimension("trajectory points must have at least one dimension".into()));
        }
        if let Some((t, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::Dimension(format!("trajectory point {t} has dimension {}, expected {dim}", p.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("trajectory contains non-finite values".into()));
        }
        Ok(Self { kind, points })
    }

    pub fn posteriors(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(TrajectoryKind::Posterior, points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for p in &self.points {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Argmax category code per point.
    pub fn argmax_path(&self) -> Vec<usize> {
        self.points.iter().map(|p| argmax(p).expect("non-empty point")).collect()
    }
}

fn check_dims(a: &EmotionTrajectory, b: &EmotionTrajectory) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("trajectories have dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unnormalized DTW cost with Euclidean local distance and steps
/// (1,0), (0,1), (1,1).
pub fn dtw(a: &EmotionTrajectory, b: &EmotionTrajectory) -> Result<f64> {
    check_dims(a, b)?;
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let d = euclidean(&a.points[i - 1], &b.points[j - 1]);
            cur[j] = d + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `100 · cos(mean(a), mean(b))`.
pub fn emo_sim(a: &EmotionTrajectory, b: &EmotionTrajectory) -> Result<f64> {
    check_dims(a, b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ma), norm(&mb));
    if na == 0.0 {
        return Err(Error::ZeroMean("first"));
    }
    if nb == 0.0 {
        return Err(Error::ZeroMean("second"));
    }
    let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    Ok(100.0 * dot / (na * nb))
}

/// Fraction correct per gold category; absent categories are omitted.
pub fn per_emotion_accuracy(
    pred: &[EmotionCategory],
    gold: &[EmotionCategory],
) -> Result<BTreeMap<EmotionCategory, f64>> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch { what: "predicted vs gold categories", expected: gold.len(), found: pred.len() });
    }
    if gold.is_empty() {
        return Err(Error::EmptyBatch("per-emotion accuracy"));
    }
    let counts = category_counts(gold);
    let mut hits: BTreeMap<EmotionCategory, usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        if p == g {
            *hits.entry(*g).or_default() += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|(c, &n)| (*c, hits.get(c).copied().unwrap_or(0) as f64 / n as f64))
        .collect())
}

fn category_counts(gold: &[EmotionCategory]) -> BTreeMap<EmotionCategory, usize> {
    let mut counts = BTreeMap::new();
    for g in gold {
        *counts.entry(*g).or_default() += 1;
    }
    counts
}

/// Word categories from a posterior trajectory: argmax of the mean posterior
/// over each word's steps. Words past the end of a short trajectory reuse
/// its last point.
pub fn word_categories(traj: &EmotionTrajectory, word_of_token: &[usize]) -> Result<Vec<EmotionCategory>> {
    if traj.dim() != NUM_CATEGORIES {
        return Err(Error::Dimension(format!("posterior trajectory has dimension {}, expected {NUM_CATEGORIES}", traj.dim())));
    }
    let n_words = word_of_token.iter().max().map_or(0, |w| w + 1);
    let mut sums = vec![vec![0.0; NUM_CATEGORIES]; n_words];
    let mut seen = vec![0usize; n_words];
    for (t, &w) in word_of_token.iter().enumerate() {
        let p = &traj.points[t.min(traj.len() - 1)];
        sums[w].iter_mut().zip(p).for_each(|(a, b)| *a += b);
        seen[w] += 1;
    }
    if let Some(w) = seen.iter().position(|&n| n == 0) {
        return Err(Error::UnmappedToken { token: w });
    }
    Ok(sums
        .iter()
        .map(|s| EmotionCategory::from_code(argmax(s).expect("non-empty")).expect("valid code"))
        .collect())
}

/// Indices `t ≥ 1` where the argmax category differs from step `t − 1`.
pub fn switch_points(traj: &EmotionTrajectory) -> Vec<usize> {
    let path = traj.argmax_path();
    (1..path.len()).filter(|&t| path[t] != path[t - 1]).collect()
}

/// True when the argmax category switches exactly once, within `tolerance`
/// steps of `boundary`.
pub fn transition_localized(traj: &EmotionTrajectory, boundary: usize, tolerance: usize) -> bool {
    match switch_points(traj).as_slice() {
        [t] => t.abs_diff(boundary) <= tolerance,
        _ => false,
    }
}

/// Trajectory and per-word categories of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEmotion {
    pub utterance_id: String,
    pub trajectory: EmotionTrajectory,
    pub categories: Vec<EmotionCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub emo_sim_percent: f64,
    pub dtw_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub trajectory_kind: TrajectoryKind,
    pub utterances: usize,
    pub words: usize,
    /// Macro average over utterances.
    pub emo_sim_percent: f64,
    /// Macro average over utterances.
    pub dtw_cost: f64,
    pub overall_accuracy: f64,
    pub per_category_accuracy: BTreeMap<EmotionCategory, f64>,
    /// Gold word count per category.
    pub counts: BTreeMap<EmotionCategory, usize>,
    pub per_utterance: Vec<UtteranceScore>,
}

/// Compares generated and gold utterances matched by id.
pub fn evaluate_corpus(generated: &[UtteranceEmotion], gold: &[UtteranceEmotion]) -> Result<MetricReport> {
    let gen_ids: BTreeMap<&str, &UtteranceEmotion> = generated.iter().map(|u| (u.utterance_id.as_str(), u)).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|u| u.utterance_id.as_str()).collect();
    let missing = |from: &BTreeSet<&str>, side| {
        let ids: Vec<String> = from.iter().filter(|id| !gen_ids.contains_key(**id)).map(|s| s.to_string()).collect();
        (!ids.is_empty()).then_some(Error::MissingIds { side, ids })
    };
    if let Some(e) = missing(&gold_ids, "generated") {
        return Err(e);
    }
    let extra: Vec<String> = gen_ids.keys().filter(|id| !gold_ids.contains(**id)).map(|s| s.to_string()).collect();
    if !extra.is_empty() {
        return Err(Error::MissingIds { side: "gold", ids: extra });
    }
    if gold.is_empty() {
        return Err(Error::EmptyBatch("corpus evaluation"));
    }
    let kind = gold[0].trajectory.kind;
    let pairs: Vec<(&UtteranceEmotion, &UtteranceEmotion)> =
        gold.iter().map(|g| (gen_ids[g.utterance_id.as_str()], g)).collect();
    if let Some((p, _)) = pairs.iter().find(|(p, g)| p.trajectory.kind != kind || g.trajectory.kind != kind) {
        return Err(Error::InvalidConfig(format!("utterance {}: trajectory kinds differ", p.utterance_id)));
    }
    let per_utterance = pairs
        .par_iter()
        .map(|(p, g)| {
            if p.categories.len() != g.categories.len() {
                return Err(Error::LengthMismatch { what: "word categories", expected: g.categories.len(), found: p.categories.len() });
            }
            Ok(UtteranceScore {
                utterance_id: g.utterance_id.clone(),
                emo_sim_percent: emo_sim(&p.trajectory, &g.trajectory)?,
                dtw_cost: dtw(&p.trajectory, &g.trajectory)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pred: Vec<EmotionCategory> = pairs.iter().flat_map(|(p, _)| p.categories.iter().copied()).collect();
    let gold_cats: Vec<EmotionCategory> = pairs.iter().flat_map(|(_, g)| g.categories.iter().copied()).collect();
    let per_category_accuracy = per_emotion_accuracy(&pred, &gold_cats)?;
    let correct = pred.iter().zip(&gold_cats).filter(|(a, b)| a == b).count();
    let n = per_utterance.len() as f64;
    Ok(MetricReport {
        trajectory_kind: kind,
        utterances: per_utterance.len(),
        words: gold_cats.len(),
        emo_sim_percent: per_utterance.iter().map(|s| s.emo_sim_percent).sum::<f64>() / n,
        dtw_cost: per_utterance.iter().map(|s| s.dtw_cost).sum::<f64>() / n,
        overall_accuracy: correct as f64 / gold_cats.len() as f64,
        per_category_accuracy,
        counts: category_counts(&gold_cats),
        per_utterance,
    })
}

const PALETTE: [&str; NUM_CATEGORIES] = ["#d62728", "#ff7f0e", "#1f77b4", "#9467bd", "#7f7f7f"];

/// SVG overlay of gold (dashed) and generated (solid) category posteriors.
pub fn trajectory_svg(title: &str, gold: &EmotionTrajectory, generated: &EmotionTrajectory) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let steps = gold.len().max(generated.len()).max(2) - 1;
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / steps as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{pad},{} {pad},{} {},{}" fill="none" stroke="black"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    for (traj, dash) in [(gold, r#" stroke-dasharray="6 4""#), (generated, "")] {
        for (k, colour) in PALETTE.iter().enumerate().take(traj.dim()) {
            let pts: Vec<String> = traj.points.iter().enumerate().map(|(t, p)| format!("{:.2},{:.2}", x(t), y(p[k]))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#, pts.join(" "));
        }
    }
    for (k, c) in EmotionCategory::ALL.iter().enumerate() {
        let ly = 40.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{}">{c}</text>"#, w - 90.0, PALETTE[k]);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EmotionCategory::*;

    fn scalar(v: &[f64]) -> EmotionTrajectory {
        EmotionTrajectory::new(TrajectoryKind::Feature, v.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    fn vectors(v: &[[f64; 2]]) -> EmotionTrajectory {
        EmotionTrajectory::new(TrajectoryKind::Feature, v.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&scalar(&[1.0, 2.0, 3.0]), &scalar(&[1.0, 3.0])).unwrap(), 1.0);
        assert_eq!(dtw(&scalar(&[2.5]), &scalar(&[-1.0])).unwrap(), 3.5);
        assert_eq!(dtw(&vectors(&[[0.0, 0.0]]), &vectors(&[[3.0, 4.0]])).unwrap(), 5.0);
        assert!(matches!(dtw(&scalar(&[1.0]), &vectors(&[[1.0, 1.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn emo_sim_examples() {
        let a = vectors(&[[1.0, 0.0]]);
        let b = vectors(&[[1.0, 1.0]]);
        assert!((emo_sim(&a, &b).unwrap() - 70.71068).abs() < 1e-5);
        assert_eq!(emo_sim(&a, &vectors(&[[0.0, 2.0]])).unwrap(), 0.0);
        let zero = vectors(&[[1.0, -1.0], [-1.0, 1.0]]);
        assert!(matches!(emo_sim(&a, &zero), Err(Error::ZeroMean(_))));
    }

    #[test]
    fn accuracy_examples() {
        let acc = per_emotion_accuracy(&[Happy, Sad], &[Happy, Happy]).unwrap();
        assert_eq!(acc, BTreeMap::from([(Happy, 0.5)]));
        assert!(per_emotion_accuracy(&[], &[]).is_err());
        assert!(per_emotion_accuracy(&[Happy], &[Happy, Sad]).is_err());
    }

    fn utt(id: &str, points: &[f64], cats: &[EmotionCategory]) -> UtteranceEmotion {
        UtteranceEmotion { utterance_id: id.into(), trajectory: scalar(points), categories: cats.to_vec() }
    }

    #[test]
    fn corpus_report() {
        let gold = vec![utt("a", &[0.5, 2.0], &[Sad]), utt("b", &[1.0], &[Angry, Happy])];
        let report = evaluate_corpus(&gold, &gold).unwrap();
        assert_eq!((report.emo_sim_percent, report.dtw_cost), (100.0, 0.0));
        assert!(report.per_category_accuracy.values().all(|&v| v == 1.0));

        let gold = vec![utt("a", &[1.0], &[Sad]), utt("b", &[1.0], &[Sad])];
        let generated = vec![utt("a", &[3.0], &[Sad]), utt("b", &[5.0], &[Happy])];
        let report = evaluate_corpus(&generated, &gold).unwrap();
        assert_eq!(report.dtw_cost, 3.0);
        assert_eq!(report.per_category_accuracy[&Sad], 0.5);

        match evaluate_corpus(&generated[..1], &gold) {
            Err(Error::MissingIds { ids, .. }) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn localization() {
        let onehot = |cs: &[usize]| {
            EmotionTrajectory::posteriors(cs.iter().map(|&c| (0..5).map(|k| f64::from(u8::from(k == c))).collect()).collect())
                .unwrap()
        };
        assert!(transition_localized(&onehot(&[0, 0, 0, 2, 2]), 3, 0));
        assert!(transition_localized(&onehot(&[0, 0, 0, 0, 0, 2]), 3, 2));
        assert!(!transition_localized(&onehot(&[0, 0, 2, 0, 2]), 2, 2));
        assert!(!transition_localized(&onehot(&[1, 1, 1]), 1, 2));
        let words = word_categories(&onehot(&[0, 0, 2]), &[0, 0, 1, 1]).unwrap();
        assert_eq!(words, vec![Angry, Sad]);
    }

    #[test]
    fn svg_mentions_every_category() {
        let t = EmotionTrajectory::posteriors(vec![vec![0.2; 5], vec![0.2; 5]]).unwrap();
        let svg = trajectory_svg("u<1>", &t, &t);
        assert!(svg.starts_with("<svg") && svg.contains("u&lt;1&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 11);
    }

    proptest! {
        #[test]
        fn dtw_symmetric_and_self_zero(a in prop::collection::vec(-5.0f64..5.0, 1..8), b in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let (ta, tb) = (scalar(&a), scalar(&b));
            prop_assert_eq!(dtw(&ta, &tb).unwrap(), dtw(&tb, &ta).unwrap());
            prop_assert_eq!(dtw(&ta, &ta).unwrap(), 0.0);
        }

        #[test]
        fn dtw_ignores_adjacent_duplicates(a in prop::collection::vec(-5.0f64..5.0, 1..8), dup in 0usize..8) {
            let mut b = a.clone();
            let i = dup % a.len();
            b.insert(i, a[i]);
            prop_assert_eq!(dtw(&scalar(&a), &scalar(&b)).unwrap(), 0.0);
        }

        #[test]
        fn emo_sim_symmetric_and_scale_free(
            a in prop::collection::vec(prop::array::uniform2(0.1f64..3.0), 1..6),
            b in prop::collection::vec(prop::array::uniform2(0.1f64..3.0), 1..6),
            s in 0.01f64..100.0,
        ) {
            let (ta, tb) = (vectors(&a), vectors(&b));
            prop_assert!((emo_sim(&ta, &tb).unwrap() - emo_sim(&tb, &ta).unwrap()).abs() < 1e-12);
            let scaled: Vec<[f64; 2]> = a.iter().map(|p| [p[0] * s, p[1] * s]).collect();
            prop_assert!((emo_sim(&ta, &vectors(&scaled)).unwrap() - 100.0).abs() < 1e-9);
        }

        #[test]
        fn accuracies_weight_to_overall(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40)) {
            let pred: Vec<_> = pairs.iter().map(|p| EmotionCategory::ALL[p.0]).collect();
            let gold: Vec<_> = pairs.iter().map(|p| EmotionCategory::ALL[p.1]).collect();
            let acc = per_emotion_accuracy(&pred, &gold).unwrap();
            let counts = category_counts(&gold);
            let weighted: f64 = acc.iter().map(|(c, a)| a * counts[c] as f64).sum::<f64>() / gold.len() as f64;
            let overall = pred.iter().zip(&gold).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64;
            prop_assert!((weighted - overall).abs() < 1e-12);
            prop_assert!(acc.values().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
