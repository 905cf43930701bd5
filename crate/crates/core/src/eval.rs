//! Scoring on held-out scenes, MCA decoding strategies, paired comparison of
//! regression-head and digit decoding, and CSV emission.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use geode_tensor::{ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::arms::Arm;
use crate::dataset::{Record, Scales};
use crate::drh::{self, Answer};
use crate::lm;
use crate::nn::Dims;
use crate::qa::{AnswerKind, QaSample, TaskKind, LETTERS};
use crate::registry::Registry;
use crate::stats::{self, SignTest};
use crate::trainer::{build_prefix, parallel_map, PrefixFeatures};
use crate::vocab::Vocab;
use crate::{GeodeError, Result};

/// Confidence thresholds 0.50, 0.55, …, 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Threshold-averaged relative accuracy; `None` when `target <= 0`.
pub fn score_na(pred: f64, target: f64) -> Option<f64> {
    if target <= 0.0 || !target.is_finite() {
        return None;
    }
    if !pred.is_finite() {
        return Some(0.0);
    }
    let rel = (pred - target).abs() / target;
    let hits = thresholds().iter().filter(|&&t| rel < 1.0 - t).count();
    Some(hits as f64 / 10.0)
}

pub fn score_mca(pred: Option<usize>, target: usize) -> f64 {
    if pred == Some(target) {
        1.0
    } else {
        0.0
    }
}

/// Mean NA score over the six positive box components (center and size).
pub fn score_box(pred: &[f64; 7], target: &[f64; 7]) -> Option<f64> {
    let scores: Vec<f64> = (0..6).filter_map(|i| score_na(pred[i], target[i])).collect();
    (!scores.is_empty()).then(|| stats::mean(&scores))
}

/// Inputs shared by every prediction of one model.
pub struct Predictor<'a> {
    pub store: &'a ParamStore,
    pub arm: Arm,
    pub vocab: &'a Vocab,
    pub scales: &'a Scales,
    pub dims: &'a Dims,
    pub features: &'a BTreeMap<u64, PrefixFeatures>,
    pub max_tokens: usize,
}

impl Predictor<'_> {
    pub fn prefix(&self, scene: u64) -> Result<Tensor> {
        let feats = self
            .features
            .get(&scene)
            .ok_or_else(|| GeodeError::Dataset(format!("no prefix features for scene {scene}")))?;
        let mut tape = Tape::inference();
        let p = build_prefix(&mut tape, self.store, feats)?;
        Ok(tape.value(p).clone())
    }

    pub fn prompt(&self, sample: &QaSample) -> Result<Vec<usize>> {
        let mut ids = vec![self.vocab.bos()];
        ids.extend(self.vocab.tokenize(&sample.question)?);
        Ok(ids)
    }

    /// Greedy generation followed by routing of any control tokens.
    pub fn generate(&self, sample: &QaSample, prefix: &Tensor) -> Result<(Answer, Vec<String>)> {
        let prompt = self.prompt(sample)?;
        let generated = lm::generate(
            self.store,
            Some(prefix),
            &prompt,
            self.max_tokens,
            self.vocab.eos(),
            self.dims,
        )?;
        let uses_heads = self.arm.uses_drh();
        let records = if uses_heads && generated.iter().any(|&t| self.vocab.is_control(t)) {
            let mut seq = prompt.clone();
            seq.extend(&generated);
            seq.truncate(self.dims.context - prefix.rows());
            let (_, hidden) = lm::next_logits(self.store, Some(prefix), &seq, self.dims)?;
            let start = prefix.rows() + prompt.len();
            let rows = seq.len() - prompt.len();
            let d = hidden.cols();
            let gen_hidden = Tensor::new([rows, d], hidden.data()[start * d..(start + rows) * d].to_vec())?;
            drh::route(&gen_hidden, &generated[..rows], self.vocab)?
        } else {
            Vec::new()
        };
        drh::decode_answer(
            sample,
            &generated,
            &records,
            uses_heads.then_some(self.store),
            self.vocab,
            self.scales,
            self.dims,
        )
    }
}

/// How an MCA answer is read from the model.
pub trait McaDecoder: Send + Sync {
    fn name(&self) -> &'static str;
    fn decode(&self, p: &Predictor, sample: &QaSample, prefix: &Tensor) -> Result<Answer>;
}

/// Argmax of the next-token logits restricted to the valid choice letters.
pub struct ConstrainedMca;

impl McaDecoder for ConstrainedMca {
    fn name(&self) -> &'static str {
        "constrained"
    }

    fn decode(&self, p: &Predictor, sample: &QaSample, prefix: &Tensor) -> Result<Answer> {
        let n = sample.choices.as_ref().map_or(0, Vec::len).min(LETTERS.len());
        let prompt = p.prompt(sample)?;
        let (logits, _) = lm::next_logits(p.store, Some(prefix), &prompt, p.dims)?;
        let mut best: Option<(usize, f32)> = None;
        for (i, l) in LETTERS[..n].iter().enumerate() {
            let id = p
                .vocab
                .id(&l.to_string())
                .ok_or_else(|| GeodeError::Vocab(vec![l.to_string()]))?;
            if best.is_none_or(|(_, b)| logits[id] > b) {
                best = Some((i, logits[id]));
            }
        }
        Ok(best.map_or(Answer::Unparseable(String::new()), |(i, _)| Answer::Choice(i)))
    }
}

/// Greedy free-form generation, parsed as a choice letter.
pub struct FreeMca;

impl McaDecoder for FreeMca {
    fn name(&self) -> &'static str {
        "free"
    }

    fn decode(&self, p: &Predictor, sample: &QaSample, prefix: &Tensor) -> Result<Answer> {
        Ok(p.generate(sample, prefix)?.0)
    }
}

pub fn mca_registry() -> &'static Registry<dyn McaDecoder> {
    static REGISTRY: OnceLock<Registry<dyn McaDecoder>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn McaDecoder> = Registry::new("MCA decoding");
        r.register("constrained", Arc::new(ConstrainedMca));
        r.register("free", Arc::new(FreeMca));
        r
    })
}

/// Score of one held-out sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub task: TaskKind,
    /// `None` when the sample is excluded (non-positive numeric target).
    pub score: Option<f64>,
    pub unparseable: bool,
    pub answer: Answer,
}

pub fn score_answer(sample: &QaSample, answer: &Answer) -> (Option<f64>, bool) {
    match (sample.answer_kind, answer) {
        (_, Answer::Unparseable(_)) => (
            match sample.answer_kind {
                AnswerKind::Scalar => sample.target_scalar.filter(|&t| t > 0.0).map(|_| 0.0),
                _ => Some(0.0),
            },
            true,
        ),
        (AnswerKind::Mca, Answer::Choice(i)) => {
            (sample.answer_index().map(|t| score_mca(Some(*i), t)), false)
        }
        (AnswerKind::Scalar, Answer::Scalar(v)) => {
            let target = sample.target_scalar.unwrap_or(f64::NAN);
            let s = score_na(*v, target);
            if s.is_none() {
                log::warn!("sample with non-positive target {target} excluded");
            }
            (s, false)
        }
        (AnswerKind::Box7, Answer::Box(b)) => (sample.target_box.and_then(|t| score_box(b, &t)), false),
        _ => (Some(0.0), true),
    }
}

pub fn predict(p: &Predictor, mca: &dyn McaDecoder, sample: &QaSample) -> Result<Answer> {
    let prefix = p.prefix(sample.scene_id)?;
    if sample.answer_kind == AnswerKind::Mca {
        mca.decode(p, sample, &prefix)
    } else {
        Ok(p.generate(sample, &prefix)?.0)
    }
}

pub fn evaluate(p: &Predictor, mca: &dyn McaDecoder, records: &[Record]) -> Result<Vec<SampleOutcome>> {
    let idx: Vec<usize> = (0..records.len()).collect();
    parallel_map(&idx, |&i| {
        let sample = &records[i].sample;
        let answer = predict(p, mca, sample)?;
        let (score, unparseable) = score_answer(sample, &answer);
        Ok(SampleOutcome {
            index: i,
            task: sample.task,
            score,
            unparseable,
            answer,
        })
    })
    .into_iter()
    .collect()
}

pub const CSV_COLUMNS: [&str; 13] = [
    "arm",
    "seed",
    "overall",
    "obj_count",
    "abs_dist",
    "obj_size",
    "room_size",
    "rel_dist",
    "rel_dir",
    "appear_order",
    "na_mean",
    "mca_mean",
    "unparseable_rate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub seed: u64,
    /// Mean score per scored task, in [0, 1].
    pub tasks: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub na_mean: f64,
    pub mca_mean: f64,
    /// Mean of the per-task scores.
    pub overall: f64,
    pub unparseable_rate: f64,
    pub samples: usize,
    /// Box localization score, reported apart from `overall`.
    pub locate: Option<f64>,
}

impl EvalReport {
    pub fn from_outcomes(arm: &str, seed: u64, outcomes: &[SampleOutcome]) -> Self {
        let mut by_task: BTreeMap<TaskKind, Vec<f64>> = BTreeMap::new();
        for o in outcomes {
            if let Some(s) = o.score {
                by_task.entry(o.task).or_default().push(s);
            }
        }
        let mut tasks = BTreeMap::new();
        let mut counts = BTreeMap::new();
        let (mut na, mut mca) = (Vec::new(), Vec::new());
        for t in TaskKind::SCORED {
            if let Some(v) = by_task.get(&t) {
                let m = stats::mean(v);
                tasks.insert(t.name().to_string(), m);
                counts.insert(t.name().to_string(), v.len());
                if t.answer_kind() == AnswerKind::Mca {
                    mca.push(m);
                } else {
                    na.push(m);
                }
            }
        }
        let scores: Vec<f64> = tasks.values().copied().collect();
        let unparseable = outcomes.iter().filter(|o| o.unparseable).count();
        EvalReport {
            arm: arm.to_string(),
            seed,
            overall: if scores.is_empty() { 0.0 } else { stats::mean(&scores) },
            na_mean: if na.is_empty() { 0.0 } else { stats::mean(&na) },
            mca_mean: if mca.is_empty() { 0.0 } else { stats::mean(&mca) },
            tasks,
            counts,
            unparseable_rate: unparseable as f64 / outcomes.len().max(1) as f64,
            samples: outcomes.len(),
            locate: by_task.get(&TaskKind::Locate).map(|v| stats::mean(v)),
        }
    }

    /// Recomputes `overall` from the per-task scores.
    pub fn check(&self) -> Result<()> {
        let scores: Vec<f64> = self.tasks.values().copied().collect();
        let expect = if scores.is_empty() { 0.0 } else { stats::mean(&scores) };
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if (expect - self.overall).abs() > 1e-12 || !scores.iter().all(|&s| in_unit(s)) || !in_unit(self.overall) {
            return Err(GeodeError::Dataset(format!("inconsistent report for arm {}", self.arm)));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> Vec<String> {
        let task = |t: &str| self.tasks.get(t).map_or(String::new(), |v| format!("{v:.6}"));
        vec![
            self.arm.clone(),
            self.seed.to_string(),
            format!("{:.6}", self.overall),
            task("obj_count"),
            task("abs_dist"),
            task("obj_size"),
            task("room_size"),
            task("rel_dist"),
            task("rel_dir"),
            task("appear_order"),
            format!("{:.6}", self.na_mean),
            format!("{:.6}", self.mca_mean),
            format!("{:.6}", self.unparseable_rate),
        ]
    }
}

pub fn write_csv(path: &std::path::Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row().join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GeodeError::io(path, e))
}

/// Paired NA comparison of two runs over the same held-out samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedReport {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `a − b`.
    pub mean_diff: f64,
    pub sign: SignTest,
}

/// Pairs numeric scalar-task outcomes by sample index.
pub fn compare_paired(a: &[SampleOutcome], b: &[SampleOutcome]) -> PairedReport {
    let bmap: BTreeMap<usize, &SampleOutcome> = b.iter().map(|o| (o.index, o)).collect();
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    for o in a.iter().filter(|o| o.task.answer_kind() == AnswerKind::Scalar) {
        if let (Some(x), Some(Some(y))) = (o.score, bmap.get(&o.index).map(|p| p.score)) {
            sa.push(x);
            sb.push(y);
        }
    }
    let diffs: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
    PairedReport {
        n: diffs.len(),
        mean_a: if sa.is_empty() { 0.0 } else { stats::mean(&sa) },
        mean_b: if sb.is_empty() { 0.0 } else { stats::mean(&sb) },
        mean_diff: if diffs.is_empty() { 0.0 } else { stats::mean(&diffs) },
        sign: stats::sign_test(&diffs),
    }
}

/// Expected MCA accuracy of uniform guessing over the given samples.
pub fn chance_level(samples: &[&QaSample]) -> f64 {
    let inv: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.choices.as_ref().map(|c| 1.0 / c.len() as f64))
        .collect();
    stats::mean(&inv)
}
