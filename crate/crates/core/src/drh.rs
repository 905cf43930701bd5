//! Regression heads fed by control-token hidden states, the mixed loss and
//! answer codecs.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use geode_tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Scales;
use crate::nn::{self, Dims};
use crate::qa::{AnswerKind, QaSample, TaskKind, LETTERS};
use crate::registry::Registry;
use crate::render::wrap_angle;
use crate::vocab::{parse_number, Vocab};
use crate::{GeodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlKind {
    Reg,
    Bbox,
}

impl ControlKind {
    pub fn out_dim(self) -> usize {
        match self {
            ControlKind::Reg => 1,
            ControlKind::Bbox => 7,
        }
    }

    pub fn for_task(task: TaskKind) -> Option<Self> {
        match task.answer_kind() {
            AnswerKind::Scalar => Some(ControlKind::Reg),
            AnswerKind::Box7 => Some(ControlKind::Bbox),
            _ => None,
        }
    }

    fn of_token(id: usize, vocab: &Vocab) -> Option<Self> {
        if Some(id) == vocab.reg() {
            Some(ControlKind::Reg)
        } else if Some(id) == vocab.bbox() {
            Some(ControlKind::Bbox)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord<T = f32> {
    pub position: usize,
    pub kind: ControlKind,
    pub hidden: Tensor<T>,
}

/// Control-token positions of `ids`, in order.
pub fn route_positions(ids: &[usize], vocab: &Vocab) -> Vec<(usize, ControlKind)> {
    ids.iter()
        .enumerate()
        .filter_map(|(i, &id)| ControlKind::of_token(id, vocab).map(|k| (i, k)))
        .collect()
}

/// One record per control token in `ids`, carrying the aligned hidden row.
pub fn route<T: Real>(hidden: &Tensor<T>, ids: &[usize], vocab: &Vocab) -> Result<Vec<RoutingRecord<T>>> {
    if hidden.shape().len() != 2 || hidden.rows() != ids.len() {
        return Err(TensorError::Shape {
            op: "route",
            lhs: hidden.shape().to_vec(),
            rhs: vec![ids.len()],
        }
        .into());
    }
    route_positions(ids, vocab)
        .into_iter()
        .map(|(position, kind)| {
            Ok(RoutingRecord {
                position,
                kind,
                hidden: Tensor::vector(hidden.row(position).to_vec()),
            })
        })
        .collect()
}

pub fn head_name(kind: ControlKind, task: TaskKind, per_task: bool) -> String {
    match kind {
        ControlKind::Reg if per_task => format!("drh.reg.{}", task.name()),
        ControlKind::Reg => "drh.reg".into(),
        ControlKind::Bbox => "drh.box".into(),
    }
}

pub fn init_drh(store: &mut ParamStore, dims: &Dims, rng: &mut impl Rng) {
    let mut heads = vec![(head_name(ControlKind::Bbox, TaskKind::Locate, false), 7)];
    if dims.per_task_heads {
        for t in TaskKind::ALL.into_iter().filter(|t| t.answer_kind() == AnswerKind::Scalar) {
            heads.push((head_name(ControlKind::Reg, t, true), 1));
        }
    } else {
        heads.push(("drh.reg".into(), 1));
    }
    for (name, out) in heads {
        nn::init_linear(store, &format!("{name}.fc1"), dims.d, dims.drh_hidden, true, rng);
        nn::init_linear_scaled(store, &format!("{name}.fc2"), dims.drh_hidden, out, true, 0.1, rng);
    }
}

/// Normalized prediction `[1 × out_dim]` from a `[1 × d]` hidden row.
/// Scalars and box sizes pass through softplus.
pub fn regress<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    hidden: Var,
    kind: ControlKind,
    task: TaskKind,
    dims: &Dims,
) -> Result<Var> {
    let name = head_name(kind, task, dims.per_task_heads);
    if !store.contains(&format!("{name}.fc1.w")) {
        return Err(GeodeError::Routing(format!("no regression head `{name}`")));
    }
    let h = nn::linear(tape, store, hidden, &format!("{name}.fc1"))?;
    let h = tape.gelu(h)?;
    let out = nn::linear(tape, store, h, &format!("{name}.fc2"))?;
    match kind {
        ControlKind::Reg => Ok(tape.softplus(out)?),
        ControlKind::Bbox => {
            let center = tape.slice_cols(out, 0, 3)?;
            let size = tape.slice_cols(out, 3, 3)?;
            let size = tape.softplus(size)?;
            let yaw = tape.slice_cols(out, 6, 1)?;
            Ok(tape.concat_cols(&[center, size, yaw])?)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegressionOutput {
    Scalar(f64),
    Box([f64; 7]),
}

/// Runs the head of `record.kind` and denormalizes; box yaw is wrapped to [−π, π).
pub fn regress_record(
    store: &ParamStore,
    record: &RoutingRecord,
    task: TaskKind,
    scales: &Scales,
    dims: &Dims,
) -> Result<RegressionOutput> {
    let mut tape = Tape::inference();
    let h = tape.constant(record.hidden.clone().reshape([1, record.hidden.numel()])?);
    let out = regress(&mut tape, store, h, record.kind, task, dims)?;
    let v: Vec<f64> = tape.value(out).data().iter().map(|&x| x as f64).collect();
    match record.kind {
        ControlKind::Reg => {
            let scale = scales.scalar(task).unwrap_or(1.0);
            Ok(RegressionOutput::Scalar(v[0] * scale))
        }
        ControlKind::Bbox => {
            let mut b = scales.denormalize_box(&std::array::from_fn(|i| v[i]));
            b[6] = wrap_angle(b[6]);
            Ok(RegressionOutput::Box(b))
        }
    }
}

pub struct MixedLoss {
    pub total: Var,
    pub ce: Var,
    /// `None` when the batch has no numeric target.
    pub drh: Option<Var>,
}

/// `L_CE + λ · L_DRH`, where `L_DRH` averages per-target MSE; a batch without
/// numeric targets contributes no regression term.
pub fn mixed_loss<T: Real>(tape: &mut Tape<T>, ce: Var, regressions: &[(Var, Vec<f64>)], lambda: f64) -> Result<MixedLoss> {
    if regressions.is_empty() {
        return Ok(MixedLoss {
            total: ce,
            ce,
            drh: None,
        });
    }
    let mut terms = Vec::with_capacity(regressions.len());
    for (pred, target) in regressions {
        let t = nn::constant(tape, 1, target.len(), target)?;
        terms.push(tape.mse(*pred, t)?);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let drh = tape.scale(sum, 1.0 / terms.len() as f64)?;
    let weighted = tape.scale(drh, lambda)?;
    let total = tape.add(ce, weighted)?;
    Ok(MixedLoss {
        total,
        ce,
        drh: Some(drh),
    })
}

/// Answer token ids (ending with `<eos>`) and the normalized numeric target.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedAnswer {
    pub ids: Vec<usize>,
    pub target: Option<(ControlKind, Vec<f64>)>,
}

impl EncodedAnswer {
    /// A numeric target must be announced by its control token.
    pub fn check(&self, vocab: &Vocab) -> Result<()> {
        if let Some((kind, _)) = &self.target {
            if !route_positions(&self.ids, vocab).iter().any(|(_, k)| k == kind) {
                return Err(GeodeError::Dataset(format!(
                    "numeric target of kind {kind:?} without its control token"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Choice(usize),
    Scalar(f64),
    Box([f64; 7]),
    Text(String),
    Unparseable(String),
}

/// How numeric answers are spelled in training targets and read back.
pub trait AnswerCodec: Send + Sync {
    fn name(&self) -> &'static str;
    fn uses_heads(&self) -> bool;
    fn encode(&self, sample: &QaSample, vocab: &Vocab, scales: &Scales) -> Result<EncodedAnswer>;
}

fn text_answer(sample: &QaSample, vocab: &Vocab) -> Result<EncodedAnswer> {
    let mut ids = vocab.tokenize(&sample.answer_text)?;
    ids.push(vocab.eos());
    Ok(EncodedAnswer { ids, target: None })
}

/// Numeric answers become a control token whose hidden state is regressed.
pub struct DrhCodec;

impl AnswerCodec for DrhCodec {
    fn name(&self) -> &'static str {
        "drh"
    }

    fn uses_heads(&self) -> bool {
        true
    }

    fn encode(&self, sample: &QaSample, vocab: &Vocab, scales: &Scales) -> Result<EncodedAnswer> {
        let (kind, values) = match (sample.target_scalar, sample.target_box) {
            (Some(y), None) => (ControlKind::Reg, vec![scales.normalize(sample.task, y)?]),
            (None, Some(b)) => (ControlKind::Bbox, scales.normalize_box(&b).to_vec()),
            _ => return text_answer(sample, vocab),
        };
        let token = match kind {
            ControlKind::Reg => vocab.reg(),
            ControlKind::Bbox => vocab.bbox(),
        }
        .ok_or_else(|| GeodeError::Dataset("vocabulary lacks control tokens".into()))?;
        let enc = EncodedAnswer {
            ids: vec![token, vocab.eos()],
            target: Some((kind, values)),
        };
        enc.check(vocab)?;
        Ok(enc)
    }
}

/// Numeric answers are spelled digit by digit.
pub struct DigitsCodec;

impl AnswerCodec for DigitsCodec {
    fn name(&self) -> &'static str {
        "digits"
    }

    fn uses_heads(&self) -> bool {
        false
    }

    fn encode(&self, sample: &QaSample, vocab: &Vocab, _scales: &Scales) -> Result<EncodedAnswer> {
        text_answer(sample, vocab)
    }
}

pub fn codec_registry() -> &'static Registry<dyn AnswerCodec> {
    static REGISTRY: OnceLock<Registry<dyn AnswerCodec>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn AnswerCodec> = Registry::new("answer codec");
        r.register("drh", Arc::new(DrhCodec));
        r.register("digits", Arc::new(DigitsCodec));
        r
    })
}

/// Parses generated answer text for a task, ignoring any control tokens.
pub fn parse_text_answer(sample: &QaSample, text: &str) -> Answer {
    let text = text.trim();
    match sample.answer_kind {
        AnswerKind::Mca => {
            let n = sample.choices.as_ref().map_or(0, |c| c.len());
            let mut words = text.split_whitespace();
            match (words.next(), words.next()) {
                (Some(w), None) if w.len() == 1 => {
                    let c = w.chars().next().expect("non-empty");
                    match LETTERS[..n.min(LETTERS.len())].iter().position(|&l| l == c) {
                        Some(i) => Answer::Choice(i),
                        None => Answer::Unparseable(text.into()),
                    }
                }
                _ => Answer::Unparseable(text.into()),
            }
        }
        AnswerKind::Scalar => match parse_number(text) {
            Some(v) => Answer::Scalar(v),
            None => Answer::Unparseable(text.into()),
        },
        AnswerKind::Box7 => {
            let parts: Vec<Option<f64>> = text.split(',').map(parse_number).collect();
            if parts.len() == 7 && parts.iter().all(Option::is_some) {
                Answer::Box(std::array::from_fn(|i| parts[i].expect("checked")))
            } else {
                Answer::Unparseable(text.into())
            }
        }
        AnswerKind::Text => Answer::Text(text.into()),
    }
}

/// Final answer from generated ids: the first routed regression output when a
/// control token was emitted and heads are enabled, otherwise the parsed text.
/// Returns warnings alongside.
pub fn decode_answer(
    sample: &QaSample,
    generated: &[usize],
    records: &[RoutingRecord],
    heads: Option<&ParamStore>,
    vocab: &Vocab,
    scales: &Scales,
    dims: &Dims,
) -> Result<(Answer, Vec<String>)> {
    let mut warnings = Vec::new();
    if let (Some(store), Some(first)) = (heads, records.first()) {
        if records.len() > 1 {
            warnings.push(format!(
                "{} control tokens in one answer; using the first",
                records.len()
            ));
        }
        let answer = match regress_record(store, first, sample.task, scales, dims)? {
            RegressionOutput::Scalar(v) if sample.task == TaskKind::ObjCount => Answer::Scalar(v.round()),
            RegressionOutput::Scalar(v) => Answer::Scalar(v),
            RegressionOutput::Box(b) => Answer::Box(b),
        };
        return Ok((answer, warnings));
    }
    let end = generated.iter().position(|&t| t == vocab.eos()).unwrap_or(generated.len());
    let text: Vec<usize> = generated[..end].iter().copied().filter(|&t| !vocab.is_control(t)).collect();
    Ok((parse_text_answer(sample, &vocab.detokenize(&text)), warnings))
}

/// Box yaw range used in normalization.
pub const YAW_SCALE: f64 = PI;
