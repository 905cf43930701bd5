//! LM pretraining and the two training stages: rationale-module training
//! against a frozen LM, then joint LM/projector/head finetuning with the
//! rationale module frozen.

use std::collections::BTreeMap;

use geode_tensor::{GradMap, ParamStore, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arms::Arm;
use crate::dataset::{Record, Scales, Split};
use crate::drh::{self, AnswerCodec, EncodedAnswer};
use crate::encoders::{self, SceneInputs};
use crate::lm;
use crate::nn::{self, Dims};
use crate::optim::{AdamConfig, AdamW, Schedule, StepOutcome};
use crate::qa::TaskKind;
use crate::vocab::Vocab;
use crate::{derive_seed, drm, GeodeError, LabConfig, Result};

pub const STAGE1_TRAINABLE: [&str; 3] = ["drm.", "enc2d.", "enc3d."];
pub const STAGE2_TRAINABLE: [&str; 3] = ["lm.", "proj2d.", "drh."];

const SALT_LM: u64 = 10;
const SALT_STAGE1: u64 = 20;
const SALT_STAGE2: u64 = 30;

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_drh: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub ce: f64,
    pub drh: Option<f64>,
}

impl LossParts {
    fn add(&mut self, o: LossParts) {
        self.loss += o.loss;
        self.ce += o.ce;
        self.drh = match (self.drh, o.drh) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
    }
}

/// Order-preserving parallel map; results come back in input order so
/// reductions over them are independent of the worker count.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
    items.par_iter().map(f).collect()
}

fn accumulate(acc: &mut GradMap, grads: GradMap) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Sums per-unit gradients and losses in unit order.
fn reduce(results: Vec<Result<(GradMap, LossParts)>>) -> Result<(GradMap, LossParts)> {
    let mut grads = GradMap::new();
    let mut parts = LossParts::default();
    for r in results {
        let (g, p) = r?;
        accumulate(&mut grads, g);
        parts.add(p);
    }
    Ok((grads, parts))
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item() as f64
}

pub fn steps_per_epoch(items: usize, batch: usize) -> u64 {
    items.div_ceil(batch.max(1)) as u64
}

pub fn optimizer(cfg: &LabConfig, lr: f64, items: usize, epochs: usize) -> AdamW {
    let total = steps_per_epoch(items, cfg.train.batch) * epochs as u64;
    AdamW::new(AdamConfig::new(
        lr,
        cfg.train.weight_decay,
        cfg.train.clip,
        Schedule::warmup_cosine(total, cfg.train.warmup),
    ))
}

/// Shuffled batch index lists of one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, salt: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, salt * 1_000_003 + epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mutable training state: parameters, optimizer and the next epoch to run.
pub struct TrainState {
    pub store: ParamStore,
    pub opt: AdamW,
    pub epoch: usize,
    pub step: u64,
}

type EpochHook<'a> = dyn FnMut(&TrainState, &[MetricRecord]) -> Result<()> + 'a;

/// Runs epochs `state.epoch..epochs`, calling `grad_fn` per batch and `hook`
/// after every epoch. Returns the mean training loss of each epoch run.
fn run_epochs(
    state: &mut TrainState,
    n_items: usize,
    epochs: usize,
    batch: usize,
    seed: u64,
    salt: u64,
    metrics: &mut Vec<MetricRecord>,
    grad_fn: &(dyn Fn(&ParamStore, &[usize]) -> Result<(GradMap, LossParts)> + Sync),
    hook: &mut EpochHook<'_>,
) -> Result<Vec<f64>> {
    let mut epoch_losses = Vec::new();
    while state.epoch < epochs {
        let epoch = state.epoch;
        let mut total = 0.0;
        let batches = epoch_batches(n_items, batch, seed, salt, epoch);
        for idx in &batches {
            let (grads, parts) = grad_fn(&state.store, idx)?;
            if !parts.loss.is_finite() {
                log::warn!("non-finite loss at step {}", state.step);
            }
            if let StepOutcome::Skipped { .. } = state.opt.step(&mut state.store, grads)? {
                continue;
            }
            total += parts.loss;
            metrics.push(MetricRecord {
                step: state.step,
                epoch,
                split: "train".into(),
                loss: parts.loss,
                l_ce: Some(parts.ce),
                l_drh: parts.drh,
            });
            state.step += 1;
        }
        let mean = total / batches.len().max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
        state.epoch += 1;
        hook(state, metrics)?;
    }
    Ok(epoch_losses)
}

/// `[bos] text [eos]`.
pub fn wrap(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.tokenize(text)?);
    ids.push(vocab.eos());
    Ok(ids)
}

/// One pretraining sequence; `prefix` holds `(token, position)` pairs fed as
/// prefix rows (token plus position embedding) instead of as text.
#[derive(Clone, Debug, PartialEq)]
pub struct LmSequence {
    pub prefix: Vec<(usize, usize)>,
    pub ids: Vec<usize>,
}

/// Probability of keeping each inventory token in a text-as-prefix sequence.
pub const PREFIX_KEEP: f64 = 1.0;

/// Leading inventory clauses of a rationale (room and object counts).
pub fn inventory_part(rationale: &str) -> &str {
    match rationale.match_indices(';').nth(1) {
        Some((i, _)) => &rationale[..=i],
        None => rationale,
    }
}

/// Per record: the rationale, the rationale with a random subset of its
/// inventory given as prefix rows, and question + answer; cycled to at least
/// `min_len` sequences.
pub fn lm_corpus(records: &[Record], vocab: &Vocab, min_len: usize, seed: u64) -> Result<Vec<LmSequence>> {
    let mut base = Vec::with_capacity(3 * records.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_LM));
    for r in records {
        let rationale = wrap(vocab, &r.sample.rationale)?;
        base.push(LmSequence {
            prefix: Vec::new(),
            ids: rationale.clone(),
        });
        base.push(LmSequence {
            prefix: vocab
                .tokenize(inventory_part(&r.sample.rationale))?
                .into_iter()
                .enumerate()
                .filter(|_| rng.gen_bool(PREFIX_KEEP))
                .map(|(j, t)| (t, j))
                .collect(),
            ids: rationale,
        });
        base.push(LmSequence {
            prefix: Vec::new(),
            ids: wrap(vocab, &format!("{} {}", r.sample.question, r.sample.answer_text))?,
        });
    }
    if base.is_empty() {
        return Err(GeodeError::Dataset("empty LM corpus".into()));
    }
    let n = min_len.max(base.len());
    Ok(base.iter().cycle().take(n).cloned().collect())
}

/// Prefix rows `tok[id] + pos[j]` of a text-as-prefix sequence.
pub fn text_prefix(tape: &mut Tape, store: &ParamStore, prefix: &[(usize, usize)]) -> Result<Var> {
    let (ids, positions): (Vec<usize>, Vec<usize>) = prefix.iter().copied().unzip();
    let tok = tape.param(store, "lm.tok")?;
    let x = tape.embedding(tok, &ids)?;
    let pos = tape.param(store, "lm.pos")?;
    let p = tape.embedding(pos, &positions)?;
    Ok(tape.add(x, p)?)
}

pub fn init_lm_store(cfg: &LabConfig, vocab_len: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_LM));
    lm::init_lm(&mut store, &Dims::from_config(cfg), vocab_len, &mut rng);
    store
}

/// Next-token pretraining of the LM on `corpus`.
pub fn pretrain_lm(
    cfg: &LabConfig,
    corpus: &[LmSequence],
    vocab_len: usize,
    hook: &mut EpochHook<'_>,
) -> Result<(ParamStore, Vec<MetricRecord>)> {
    let dims = Dims::from_config(cfg);
    let mut state = TrainState {
        store: init_lm_store(cfg, vocab_len),
        opt: optimizer(cfg, cfg.train.lm_lr, corpus.len(), cfg.train.lm_epochs),
        epoch: 0,
        step: 0,
    };
    let mut metrics = Vec::new();
    let grad_fn = |store: &ParamStore, idx: &[usize]| {
        let b = idx.len() as f64;
        reduce(parallel_map(idx, |&i| {
            let seq = &corpus[i];
            let mut tape = Tape::new();
            let prefix = if seq.prefix.is_empty() {
                None
            } else {
                Some(text_prefix(&mut tape, store, &seq.prefix)?)
            };
            let l = lm::text_loss(&mut tape, store, prefix, &seq.ids, &dims)?;
            let l = tape.scale(l, 1.0 / b)?;
            let v = scalar(&tape, l);
            Ok((tape.backward(l)?.params(), LossParts { loss: v, ce: v, drh: None }))
        }))
    };
    run_epochs(
        &mut state,
        corpus.len(),
        cfg.train.lm_epochs,
        cfg.train.batch,
        cfg.seed,
        SALT_LM,
        &mut metrics,
        &grad_fn,
        hook,
    )?;
    Ok((state.store, metrics))
}

/// Encoder inputs of every scene in a split.
pub fn scene_inputs(split: &Split, patch: usize) -> Result<BTreeMap<u64, SceneInputs>> {
    let scenes: Vec<_> = split.scenes.values().collect();
    parallel_map(&scenes, |s| SceneInputs::new(s, patch).map(|i| (s.scene_id, i)))
        .into_iter()
        .collect()
}

/// `[bos] R [eos]` per record, keyed by scene, at most `cap` items.
pub fn rationale_items(records: &[Record], vocab: &Vocab, cap: usize) -> Result<Vec<(u64, Vec<usize>)>> {
    records
        .iter()
        .take(cap)
        .map(|r| Ok((r.sample.scene_id, wrap(vocab, &r.sample.rationale)?)))
        .collect()
}

/// Pretrained LM plus freshly initialized encoders and rationale module,
/// with only the stage-1 namespaces trainable.
pub fn init_stage1(cfg: &LabConfig, lm_store: &ParamStore) -> ParamStore {
    let dims = Dims::from_config(cfg);
    let mut store = lm_store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_STAGE1));
    encoders::init_enc2d(&mut store, &dims, &mut rng);
    encoders::init_enc3d(&mut store, &dims, &mut rng);
    drm::init_drm(&mut store, &dims, &mut rng);
    store.apply_freeze_mask(&STAGE1_TRAINABLE);
    store
}

fn missing_scene(id: u64) -> GeodeError {
    GeodeError::Dataset(format!("no encoder inputs for scene {id}"))
}

/// Groups item indices by scene, keeping first-appearance order.
fn group_by_scene(items: &[(u64, Vec<usize>)], idx: &[usize]) -> Vec<(u64, Vec<usize>)> {
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for &i in idx {
        let scene = items[i].0;
        match groups.iter_mut().find(|(s, _)| *s == scene) {
            Some((_, v)) => v.push(i),
            None => groups.push((scene, vec![i])),
        }
    }
    groups
}

pub struct StageOutcome {
    pub store: ParamStore,
    pub metrics: Vec<MetricRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the reconstruction loss of the rationales with the rationale
/// tokens as LM prefix. The LM namespace must come out bit-identical.
pub fn run_stage1(
    cfg: &LabConfig,
    mut state: TrainState,
    items: &[(u64, Vec<usize>)],
    inputs: &BTreeMap<u64, SceneInputs>,
    hook: &mut EpochHook<'_>,
) -> Result<StageOutcome> {
    let dims = Dims::from_config(cfg);
    let lm_hash = state.store.hash_prefix("lm.");
    let mut metrics = Vec::new();
    let grad_fn = |store: &ParamStore, idx: &[usize]| {
        let b = idx.len() as f64;
        let groups = group_by_scene(items, idx);
        reduce(parallel_map(&groups, |(scene, members)| {
            let inp = inputs.get(scene).ok_or_else(|| missing_scene(*scene))?;
            let mut tape = Tape::new();
            let tokens = drm::rationale_tokens(&mut tape, store, inp, &dims)?;
            let mut total: Option<Var> = None;
            for &i in members {
                let l = drm::stage1_loss(&mut tape, store, Some(tokens), &items[i].1, &dims)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = tape.scale(total.expect("non-empty group"), 1.0 / b)?;
            let v = scalar(&tape, total);
            Ok((tape.backward(total)?.params(), LossParts { loss: v, ce: v, drh: None }))
        }))
    };
    let epoch_losses = run_epochs(
        &mut state,
        items.len(),
        cfg.train.stage1_epochs,
        cfg.train.batch,
        cfg.seed,
        SALT_STAGE1,
        &mut metrics,
        &grad_fn,
        hook,
    )?;
    if state.store.hash_prefix("lm.") != lm_hash {
        return Err(TensorError::Contract("stage 1 modified the frozen LM".into()).into());
    }
    Ok(StageOutcome {
        store: state.store,
        metrics,
        epoch_losses,
    })
}

/// Mean per-rationale teacher-forced loss, with the rationale-token prefix or
/// with no prefix at all.
pub fn reconstruction_loss(
    store: &ParamStore,
    items: &[(u64, Vec<usize>)],
    inputs: &BTreeMap<u64, SceneInputs>,
    dims: &Dims,
    with_prefix: bool,
) -> Result<f64> {
    if items.is_empty() {
        return Err(GeodeError::Dataset("no rationales to score".into()));
    }
    let idx: Vec<usize> = (0..items.len()).collect();
    let groups = group_by_scene(items, &idx);
    let sums = parallel_map(&groups, |(scene, members)| -> Result<f64> {
        let mut tape = Tape::inference();
        let tokens = if with_prefix {
            let inp = inputs.get(scene).ok_or_else(|| missing_scene(*scene))?;
            Some(drm::rationale_tokens(&mut tape, store, inp, dims)?)
        } else {
            None
        };
        let mut s = 0.0;
        for &i in members {
            let l = drm::stage1_loss(&mut tape, store, tokens, &items[i].1, dims)?;
            s += scalar(&tape, l);
        }
        Ok(s)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / items.len() as f64)
}

/// Frozen per-scene inputs of the stage-2 prefix.
#[derive(Clone, Debug)]
pub struct PrefixFeatures {
    /// 2D encoder tokens `[T × d]`.
    pub visual: Tensor,
    /// Rationale tokens `[M × d]`, present when the arm uses the rationale module.
    pub spatio: Option<Tensor>,
}

pub fn prefix_features(store: &ParamStore, inputs: &SceneInputs, arm: Arm, dims: &Dims) -> Result<PrefixFeatures> {
    let mut tape = Tape::inference();
    let f2d = encoders::encode_2d(&mut tape, store, &inputs.patches, dims)?;
    let visual = tape.value(f2d).clone();
    let spatio = if arm.uses_drm() {
        let mut tape = Tape::inference();
        let t = drm::rationale_tokens(&mut tape, store, inputs, dims)?;
        Some(tape.value(t).clone())
    } else {
        None
    };
    Ok(PrefixFeatures { visual, spatio })
}

pub fn all_prefix_features(
    store: &ParamStore,
    inputs: &BTreeMap<u64, SceneInputs>,
    arm: Arm,
    dims: &Dims,
) -> Result<BTreeMap<u64, PrefixFeatures>> {
    let scenes: Vec<_> = inputs.iter().collect();
    parallel_map(&scenes, |(id, inp)| prefix_features(store, inp, arm, dims).map(|f| (**id, f)))
        .into_iter()
        .collect()
}

/// `proj2d(visual)` followed by the rationale tokens, if any.
pub fn build_prefix(tape: &mut Tape, store: &ParamStore, feats: &PrefixFeatures) -> Result<Var> {
    let visual = tape.constant(feats.visual.clone());
    let p = nn::linear(tape, store, visual, "proj2d")?;
    match &feats.spatio {
        Some(s) => {
            let s = tape.constant(s.clone());
            Ok(tape.concat_rows(&[p, s])?)
        }
        None => Ok(p),
    }
}

/// Pretrained LM (vocabulary extended with the control tokens), the frozen
/// encoders and rationale module of stage 1, a fresh 2D projector and, for
/// arms that use them, fresh regression heads.
pub fn init_stage2(cfg: &LabConfig, arm: Arm, lm_store: &ParamStore, stage1: &ParamStore, vocab_len: usize) -> Result<ParamStore> {
    let dims = Dims::from_config(cfg);
    let mut store = lm_store.subset("lm.");
    lm::extend_vocab(&mut store, vocab_len)?;
    for prefix in ["enc2d.", "enc3d.", "drm."] {
        store.merge(&stage1.subset(prefix));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_STAGE2));
    nn::init_linear(&mut store, "proj2d", dims.d, dims.d, true, &mut rng);
    if arm.uses_drh() {
        drh::init_drh(&mut store, &dims, &mut rng);
    }
    store.apply_freeze_mask(&STAGE2_TRAINABLE);
    Ok(store)
}

/// One stage-2 example: prompt `[bos] question`, encoded answer.
#[derive(Clone, Debug)]
pub struct QaItem {
    pub scene: u64,
    pub task: TaskKind,
    pub prompt: Vec<usize>,
    pub answer: EncodedAnswer,
}

pub fn qa_items(records: &[Record], vocab: &Vocab, codec: &dyn AnswerCodec, scales: &Scales, cap: usize) -> Result<Vec<QaItem>> {
    records
        .iter()
        .take(cap)
        .map(|r| {
            let mut prompt = vec![vocab.bos()];
            prompt.extend(vocab.tokenize(&r.sample.question)?);
            Ok(QaItem {
                scene: r.sample.scene_id,
                task: r.sample.task,
                prompt,
                answer: codec.encode(&r.sample, vocab, scales)?,
            })
        })
        .collect()
}

/// Cross-entropy over the answer tokens and, when the answer carries a numeric
/// target, the regression prediction read at its control token.
pub struct SampleLoss {
    pub ce: Var,
    pub regression: Option<(Var, Vec<f64>)>,
}

pub fn sample_loss(
    tape: &mut Tape,
    store: &ParamStore,
    feats: &PrefixFeatures,
    item: &QaItem,
    vocab: &Vocab,
    dims: &Dims,
) -> Result<SampleLoss> {
    let prefix = build_prefix(tape, store, feats)?;
    let mut seq = item.prompt.clone();
    seq.extend(&item.answer.ids);
    let p = item.prompt.len();
    let supervise: Vec<bool> = (0..seq.len() - 1).map(|i| i + 1 >= p).collect();
    let (ce, out) = lm::sequence_loss(tape, store, Some(prefix), &seq, &supervise, dims)?;
    let regression = match &item.answer.target {
        Some((kind, target)) => {
            let inputs = &seq[..seq.len() - 1];
            let pos = drh::route_positions(inputs, vocab)
                .into_iter()
                .find(|(_, k)| k == kind)
                .ok_or_else(|| GeodeError::Dataset("numeric target without its control token".into()))?
                .0;
            let h = tape.slice_rows(out.hidden, out.prefix_len + pos, 1)?;
            let pred = drh::regress(tape, store, h, *kind, item.task, dims)?;
            Some((pred, target.clone()))
        }
        None => None,
    };
    Ok(SampleLoss { ce, regression })
}

/// Gradient of the batch objective `mean CE + λ · mean MSE` over the numeric
/// items of `idx`, summed over samples in input order.
pub fn stage2_grads(
    store: &ParamStore,
    items: &[QaItem],
    idx: &[usize],
    features: &BTreeMap<u64, PrefixFeatures>,
    vocab: &Vocab,
    dims: &Dims,
    lambda: f64,
) -> Result<(GradMap, LossParts)> {
    let b = idx.len() as f64;
    let n_num = idx.iter().filter(|&&i| items[i].answer.target.is_some()).count().max(1) as f64;
    reduce(parallel_map(idx, |&i| {
        let item = &items[i];
        let feats = features.get(&item.scene).ok_or_else(|| missing_scene(item.scene))?;
        let mut tape = Tape::new();
        let s = sample_loss(&mut tape, store, feats, item, vocab, dims)?;
        let ce = scalar(&tape, s.ce);
        let mut total = tape.scale(s.ce, 1.0 / b)?;
        let mut mse = None;
        if let Some((pred, target)) = &s.regression {
            let t = nn::constant(&mut tape, 1, target.len(), target)?;
            let m = tape.mse(*pred, t)?;
            mse = Some(scalar(&tape, m) / n_num);
            let w = tape.scale(m, lambda / n_num)?;
            total = tape.add(total, w)?;
        }
        let parts = LossParts {
            loss: scalar(&tape, total),
            ce: ce / b,
            drh: mse,
        };
        Ok((tape.backward(total)?.params(), parts))
    }))
}

/// Trains LM, projector and heads on `L_CE + λ·L_DRH`; the frozen encoders and
/// rationale module must come out bit-identical.
pub fn run_stage2(
    cfg: &LabConfig,
    mut state: TrainState,
    items: &[QaItem],
    features: &BTreeMap<u64, PrefixFeatures>,
    vocab: &Vocab,
    hook: &mut EpochHook<'_>,
) -> Result<StageOutcome> {
    let dims = Dims::from_config(cfg);
    let lambda = cfg.train.lambda;
    let frozen_hash: Vec<String> = ["drm.", "enc2d.", "enc3d."]
        .iter()
        .map(|p| state.store.hash_prefix(p))
        .collect();
    let mut metrics = Vec::new();
    let grad_fn = |store: &ParamStore, idx: &[usize]| stage2_grads(store, items, idx, features, vocab, &dims, lambda);
    let epoch_losses = run_epochs(
        &mut state,
        items.len(),
        cfg.train.stage2_epochs,
        cfg.train.batch,
        cfg.seed,
        SALT_STAGE2,
        &mut metrics,
        &grad_fn,
        hook,
    )?;
    for (p, h) in ["drm.", "enc2d.", "enc3d."].iter().zip(&frozen_hash) {
        if &state.store.hash_prefix(p) != h {
            return Err(TensorError::Contract(format!("stage 2 modified frozen `{p}*`")).into());
        }
    }
    Ok(StageOutcome {
        store: state.store,
        metrics,
        epoch_losses,
    })
}
