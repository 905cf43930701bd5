//! On-disk run layout and the commands built on it: data generation, LM
//! pretraining, both training stages, evaluation and the ablation grid.
//!
//! ```text
//! <out>/data_n{N}/                      train/eval splits, manifests, vocab.txt
//! <out>/lm/                             pretrained LM
//! <out>/stage1/m{M}_n{N}/seed{s}/       encoders + rationale module
//! <out>/stage2/{arm}_m{M}_n{N}/seed{s}/ finetuned model, eval.json, outcomes.jsonl
//! <out>/ablation.csv, <out>/reports.jsonl
//! ```
//!
//! Every output directory holds a resolved `config.json`, a deterministic
//! `metrics.jsonl` and a separate `timings.jsonl` with wall-clock times.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use geode_tensor::{checkpoint, ParamStore, TensorError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arms::Arm;
use crate::dataset::{self, build_split, emit_dataset, read_records, Manifest, Scales, Split};
use crate::drh::codec_registry;
use crate::eval::{self, EvalReport, Predictor, SampleOutcome};
use crate::nn::Dims;
use crate::optim::AdamW;
use crate::trainer::{self, MetricRecord, TrainState, STAGE1_TRAINABLE, STAGE2_TRAINABLE};
use crate::vocab::Vocab;
use crate::{GeodeError, LabConfig, Result};

pub const CHECKPOINT: &str = "checkpoint.geod";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMINGS: &str = "timings.jsonl";
pub const CONFIG: &str = "config.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const OUTCOMES: &str = "outcomes.jsonl";
pub const HELDOUT: &str = "heldout.json";
const VOCAB: &str = "vocab.txt";
const STATE: &str = "state.geod";
const OPTIM: &str = "optim.geod";
const PROGRESS: &str = "progress.json";

/// Paths of every artifact under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, frames: usize) -> PathBuf {
        self.root.join(format!("data_n{frames}"))
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm")
    }

    pub fn stage1(&self, m: usize, n: usize, seed: u64) -> PathBuf {
        self.root.join("stage1").join(format!("m{m}_n{n}")).join(format!("seed{seed}"))
    }

    pub fn stage2(&self, arm: &str, m: usize, n: usize, seed: u64) -> PathBuf {
        self.root
            .join("stage2")
            .join(format!("{arm}_m{m}_n{n}"))
            .join(format!("seed{seed}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports.jsonl")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeodeError::io(dir, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| GeodeError::Json { path: path.into(), source: e })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| GeodeError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| GeodeError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| GeodeError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| GeodeError::Json { path: path.into(), source: e })?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GeodeError::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| GeodeError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GeodeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GeodeError::Json { path: path.into(), source: e })
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: &'a str,
    seconds: f64,
}

fn record_timing(dir: &Path, stage: &str, start: Instant) -> Result<()> {
    let path = dir.join(TIMINGS);
    let line = serde_json::to_string(&Timing {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    })
    .expect("timing serializes");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| GeodeError::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| GeodeError::io(&path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(GeodeError::MissingCheckpoint(path.into()));
    }
    Ok(checkpoint::load(path)?)
}

/// Held-out teacher-forced rationale loss with and without the rationale prefix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heldout {
    pub with_prefix: f64,
    pub without_prefix: f64,
    pub samples: usize,
}

impl Heldout {
    /// Relative loss reduction of the prefix over the no-prefix baseline.
    pub fn reduction(&self) -> f64 {
        1.0 - self.with_prefix / self.without_prefix
    }
}

#[derive(Serialize, Deserialize)]
struct Progress {
    epoch: usize,
    step: u64,
}

/// Training state resumed from the last epoch checkpoint in `dir`, or a fresh one.
fn resume_or_fresh(
    dir: &Path,
    resume: bool,
    trainable: &[&str],
    fresh: impl FnOnce() -> Result<ParamStore>,
    mut opt: AdamW,
) -> Result<(TrainState, Vec<MetricRecord>)> {
    let progress = dir.join(PROGRESS);
    if resume && progress.exists() {
        let p: Progress = read_json(&progress)?;
        let mut store = load_checkpoint(&dir.join(STATE))?;
        store.apply_freeze_mask(trainable);
        opt.load_state(&load_checkpoint(&dir.join(OPTIM))?)?;
        let metrics = read_jsonl(&dir.join(METRICS))?;
        log::info!("resuming {} at epoch {}", dir.display(), p.epoch);
        return Ok((
            TrainState {
                store,
                opt,
                epoch: p.epoch,
                step: p.step,
            },
            metrics,
        ));
    }
    Ok((
        TrainState {
            store: fresh()?,
            opt,
            epoch: 0,
            step: 0,
        },
        Vec::new(),
    ))
}

/// Writes the epoch checkpoint and the metrics so far.
fn save_epoch(dir: &Path, state: &TrainState, prior: &[MetricRecord], metrics: &[MetricRecord]) -> Result<()> {
    checkpoint::save(dir.join(STATE), &state.store)?;
    checkpoint::save(dir.join(OPTIM), &state.opt.state())?;
    let all: Vec<&MetricRecord> = prior.iter().chain(metrics).collect();
    write_jsonl(&dir.join(METRICS), &all)?;
    write_json(
        &dir.join(PROGRESS),
        &Progress {
            epoch: state.epoch,
            step: state.step,
        },
    )
}

fn clear_epoch_state(dir: &Path) {
    for f in [STATE, OPTIM, PROGRESS] {
        let _ = fs::remove_file(dir.join(f));
    }
}

fn check_bytes_equal(a: &ParamStore, b: &ParamStore, prefix: &str, what: &str) -> Result<()> {
    if a.to_bytes_prefix(prefix) != b.to_bytes_prefix(prefix) {
        return Err(TensorError::Contract(format!("{what} changed `{prefix}*`")).into());
    }
    Ok(())
}

/// One configuration of the lab bound to an output root.
#[derive(Clone, Debug)]
pub struct Lab {
    pub cfg: LabConfig,
    pub layout: Layout,
}

/// One cell of the ablation grid.
#[derive(Clone, Debug)]
pub struct GridEntry {
    pub label: String,
    pub cfg: LabConfig,
}

/// Evaluated grid cells plus labels skipped for want of a checkpoint.
#[derive(Debug, Default)]
pub struct Ablation {
    pub runs: Vec<(EvalReport, Vec<SampleOutcome>)>,
    pub skipped: Vec<String>,
}

impl Lab {
    pub fn new(cfg: LabConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            layout: Layout::new(root),
        })
    }

    pub fn arm(&self) -> Result<Arm> {
        Arm::from_name(&self.cfg.train.arm)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.layout.data(self.cfg.data.frames)
    }

    pub fn stage1_dir(&self) -> PathBuf {
        self.layout.stage1(self.cfg.model.m_tokens, self.cfg.data.frames, self.cfg.seed)
    }

    pub fn stage2_dir(&self) -> PathBuf {
        self.layout.stage2(&self.cfg.train.arm, self.cfg.model.m_tokens, self.cfg.data.frames, self.cfg.seed)
    }

    fn dims(&self) -> Dims {
        Dims::from_config(&self.cfg)
    }

    fn prepare(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.cfg.save(dir.join(CONFIG))
    }

    fn vocab(&self) -> Result<Vocab> {
        Vocab::load(self.data_dir().join(VOCAB))
    }

    fn split(&self, name: &str) -> Result<Split> {
        let dir = self.data_dir();
        if !Manifest::path(&dir, name).exists() {
            return Err(GeodeError::MissingCheckpoint(Manifest::path(&dir, name)));
        }
        Split::load(&dir, name)
    }

    /// Generates the train and held-out splits for the configured frame count.
    pub fn gen_data(&self) -> Result<(Manifest, Manifest)> {
        let start = Instant::now();
        let dir = self.data_dir();
        self.prepare(&dir)?;
        let scales = Scales::from_config(&self.cfg.scene);
        let (samples, scenes) = build_split(dataset::train_seeds(&self.cfg.data), &self.cfg.scene, &self.cfg.data)?;
        let train = emit_dataset(&dir, "train", &samples, &scenes, &scales)?;
        let (samples, scenes) = build_split(dataset::eval_seeds(&self.cfg.data), &self.cfg.scene, &self.cfg.data)?;
        let heldout = emit_dataset(&dir, "eval", &samples, &scenes, &scales)?;
        Vocab::base().save(dir.join(VOCAB))?;
        record_timing(&dir, "gen-data", start)?;
        Ok((train, heldout))
    }

    /// Next-token pretraining of the language model on the training split's text.
    pub fn pretrain_lm(&self) -> Result<ParamStore> {
        let start = Instant::now();
        let dir = self.layout.lm();
        self.prepare(&dir)?;
        let data = self.data_dir();
        if !Manifest::path(&data, "train").exists() {
            return Err(GeodeError::MissingCheckpoint(Manifest::path(&data, "train")));
        }
        let records = read_records(&data, "train")?;
        let vocab = self.vocab()?;
        let corpus = trainer::lm_corpus(&records, &vocab, self.cfg.data.lm_corpus, self.cfg.seed)?;
        let metrics_path = dir.join(METRICS);
        let (store, metrics) = trainer::pretrain_lm(&self.cfg, &corpus, vocab.len(), &mut |_, m| {
            write_jsonl(&metrics_path, m)
        })?;
        write_jsonl(&metrics_path, &metrics)?;
        checkpoint::save(dir.join(CHECKPOINT), &store)?;
        record_timing(&dir, "pretrain-lm", start)?;
        Ok(store)
    }

    /// Trains encoders and rationale module against the frozen LM, then scores
    /// held-out rationale reconstruction with and without the prefix.
    /// With `resume`, a finished run is reused and an interrupted one continues
    /// from its last epoch.
    pub fn train_stage1(&self, resume: bool) -> Result<Heldout> {
        let dir = self.stage1_dir();
        if resume && dir.join(CHECKPOINT).exists() && dir.join(HELDOUT).exists() {
            return read_json(&dir.join(HELDOUT));
        }
        let start = Instant::now();
        self.prepare(&dir)?;
        let lm = load_checkpoint(&self.layout.lm().join(CHECKPOINT))?;
        let train = self.split("train")?;
        let heldout = self.split("eval")?;
        let vocab = self.vocab()?;
        let dims = self.dims();
        let patch = self.cfg.data.patch;
        let inputs = trainer::scene_inputs(&train, patch)?;
        let items = trainer::rationale_items(&train.records, &vocab, self.cfg.train.stage1_samples)?;
        let opt = trainer::optimizer(&self.cfg, self.cfg.train.lr, items.len(), self.cfg.train.stage1_epochs);
        let (state, prior) = resume_or_fresh(&dir, resume, &STAGE1_TRAINABLE, || Ok(trainer::init_stage1(&self.cfg, &lm)), opt)?;
        let out = trainer::run_stage1(&self.cfg, state, &items, &inputs, &mut |s, m| save_epoch(&dir, s, &prior, m))?;
        check_bytes_equal(&out.store, &lm, "lm.", "stage 1")?;

        let heldout_inputs = trainer::scene_inputs(&heldout, patch)?;
        let heldout_items = trainer::rationale_items(&heldout.records, &vocab, self.cfg.eval.max_samples)?;
        let result = Heldout {
            with_prefix: trainer::reconstruction_loss(&out.store, &heldout_items, &heldout_inputs, &dims, true)?,
            without_prefix: trainer::reconstruction_loss(&out.store, &heldout_items, &heldout_inputs, &dims, false)?,
            samples: heldout_items.len(),
        };
        let mut metrics = prior;
        metrics.extend(out.metrics);
        let last = metrics.last().map_or(0, |m| m.step);
        for (split, loss) in [("heldout_prefix", result.with_prefix), ("heldout_none", result.without_prefix)] {
            metrics.push(MetricRecord {
                step: last,
                epoch: self.cfg.train.stage1_epochs,
                split: split.into(),
                loss,
                l_ce: Some(loss),
                l_drh: None,
            });
        }
        write_jsonl(&dir.join(METRICS), &metrics)?;
        let mut keep = ParamStore::new();
        for p in STAGE1_TRAINABLE {
            keep.merge(&out.store.subset(p));
        }
        checkpoint::save(dir.join(CHECKPOINT), &keep)?;
        write_json(&dir.join(HELDOUT), &result)?;
        clear_epoch_state(&dir);
        record_timing(&dir, "train-stage1", start)?;
        log::info!(
            "stage 1 held-out loss {:.4} vs {:.4} without prefix",
            result.with_prefix,
            result.without_prefix
        );
        Ok(result)
    }

    /// Finetunes LM, projector and (per arm) regression heads with the stage-1
    /// modules frozen. With `resume`, a finished run is left as is.
    pub fn train_stage2(&self, resume: bool) -> Result<()> {
        let dir = self.stage2_dir();
        if resume && dir.join(CHECKPOINT).exists() {
            return Ok(());
        }
        let start = Instant::now();
        self.prepare(&dir)?;
        let arm = self.arm()?;
        let lm = load_checkpoint(&self.layout.lm().join(CHECKPOINT))?;
        let stage1 = load_checkpoint(&self.stage1_dir().join(CHECKPOINT))?;
        let train = self.split("train")?;
        let vocab = self.vocab()?.with_control_tokens();
        let dims = self.dims();
        let codec = codec_registry().get(arm.codec())?;
        let items = trainer::qa_items(
            &train.records,
            &vocab,
            codec.as_ref(),
            &train.manifest.scales,
            self.cfg.train.stage2_samples,
        )?;
        let fresh = trainer::init_stage2(&self.cfg, arm, &lm, &stage1, vocab.len())?;
        let inputs = trainer::scene_inputs(&train, self.cfg.data.patch)?;
        let features = trainer::all_prefix_features(&fresh, &inputs, arm, &dims)?;
        drop(inputs);
        let opt = trainer::optimizer(&self.cfg, self.cfg.train.lr, items.len(), self.cfg.train.stage2_epochs);
        let (state, prior) = resume_or_fresh(&dir, resume, &STAGE2_TRAINABLE, || Ok(fresh), opt)?;
        let out = trainer::run_stage2(&self.cfg, state, &items, &features, &vocab, &mut |s, m| {
            save_epoch(&dir, s, &prior, m)
        })?;
        for p in STAGE1_TRAINABLE {
            check_bytes_equal(&out.store, &stage1, p, "stage 2")?;
        }
        let mut metrics = prior;
        metrics.extend(out.metrics);
        write_jsonl(&dir.join(METRICS), &metrics)?;
        checkpoint::save(dir.join(CHECKPOINT), &out.store)?;
        clear_epoch_state(&dir);
        record_timing(&dir, "train-stage2", start)?;
        Ok(())
    }

    /// Scores the stage-2 model on the held-out split under `label`.
    pub fn evaluate(&self, label: &str) -> Result<(EvalReport, Vec<SampleOutcome>)> {
        let start = Instant::now();
        let dir = self.stage2_dir();
        let store = load_checkpoint(&dir.join(CHECKPOINT))?;
        let arm = self.arm()?;
        let heldout = self.split("eval")?;
        let vocab = self.vocab()?.with_control_tokens();
        let dims = self.dims();
        let inputs = trainer::scene_inputs(&heldout, self.cfg.data.patch)?;
        let features = trainer::all_prefix_features(&store, &inputs, arm, &dims)?;
        drop(inputs);
        let predictor = Predictor {
            store: &store,
            arm,
            vocab: &vocab,
            scales: &heldout.manifest.scales,
            dims: &dims,
            features: &features,
            max_tokens: self.cfg.eval.max_answer_tokens,
        };
        let mca = eval::mca_registry().get(&self.cfg.eval.mca_decoding)?;
        let n = heldout.records.len().min(self.cfg.eval.max_samples);
        let outcomes = eval::evaluate(&predictor, mca.as_ref(), &heldout.records[..n])?;
        let report = EvalReport::from_outcomes(label, self.cfg.seed, &outcomes);
        report.check()?;
        write_jsonl(&dir.join(EVAL_REPORT), std::slice::from_ref(&report))?;
        write_jsonl(&dir.join(OUTCOMES), &outcomes)?;
        record_timing(&dir, "eval", start)?;
        Ok((report, outcomes))
    }

    /// Generates data, pretrains the LM and trains both stages wherever the
    /// corresponding output is missing.
    pub fn ensure_trained(&self) -> Result<()> {
        if !Manifest::path(&self.data_dir(), "eval").exists() {
            self.gen_data()?;
        }
        if !self.layout.lm().join(CHECKPOINT).exists() {
            self.pretrain_lm()?;
        }
        self.train_stage1(true)?;
        self.train_stage2(true)
    }

    /// Arms × seeds at the configured token and frame counts, plus the full
    /// arm at every other frame count and token count of the grid.
    pub fn grid(&self) -> Vec<GridEntry> {
        let base = &self.cfg;
        let mut out = Vec::new();
        let mut push = |label: String, f: &dyn Fn(&mut LabConfig)| {
            for &seed in &base.eval.seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                f(&mut cfg);
                out.push(GridEntry {
                    label: label.clone(),
                    cfg,
                });
            }
        };
        for arm in &base.eval.arms {
            push(arm.clone(), &|c| c.train.arm = arm.clone());
        }
        for &n in base.eval.frames_grid.iter().filter(|&&n| n != base.data.frames) {
            push(format!("full_n{n}"), &|c| {
                c.train.arm = "full".into();
                c.data.frames = n;
            });
        }
        for &m in base.eval.m_grid.iter().filter(|&&m| m != base.model.m_tokens) {
            push(format!("full_m{m}"), &|c| {
                c.train.arm = "full".into();
                c.model.m_tokens = m;
            });
        }
        out
    }

    /// Evaluates every grid cell and writes `ablation.csv` and `reports.jsonl`.
    /// Cells without a stage-2 checkpoint are skipped with a notice unless
    /// `train_missing` is set.
    pub fn ablate(&self, train_missing: bool) -> Result<Ablation> {
        create_dir(&self.layout.root)?;
        self.cfg.save(self.layout.root.join(CONFIG))?;
        let mut result = Ablation::default();
        for entry in self.grid() {
            let lab = Lab::new(entry.cfg, self.layout.root.clone())?;
            if !lab.stage2_dir().join(CHECKPOINT).exists() {
                if train_missing {
                    lab.ensure_trained()?;
                } else {
                    log::warn!(
                        "skipping {} seed {}: no checkpoint at {}",
                        entry.label,
                        lab.cfg.seed,
                        lab.stage2_dir().display()
                    );
                    result.skipped.push(format!("{} seed {}", entry.label, lab.cfg.seed));
                    continue;
                }
            }
            result.runs.push(lab.evaluate(&entry.label)?);
        }
        let reports: Vec<EvalReport> = result.runs.iter().map(|(r, _)| r.clone()).collect();
        eval::write_csv(&self.layout.ablation_csv(), &reports)?;
        write_jsonl(&self.layout.reports(), &reports)?;
        Ok(result)
    }
}
