//! Small causal transformer language model with an optional embedding prefix.

use geode_tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::nn::{self, Dims};
use crate::Result;

/// Initial output bias of tokens added by [`extend_vocab`].
pub const NEW_TOKEN_BIAS: f32 = -4.0;

pub fn init_lm(store: &mut ParamStore, dims: &Dims, vocab: usize, rng: &mut impl Rng) {
    let d = dims.d;
    store.insert("lm.tok", nn::normal(&[vocab, d], 0.1, rng));
    store.insert("lm.pos", nn::normal(&[dims.context, d], 0.1, rng));
    store.insert("lm.seg", nn::normal(&[d], 0.1, rng));
    let gain = 1.0 / (2.0 * dims.lm_layers.max(1) as f64).sqrt();
    for l in 0..dims.lm_layers {
        nn::init_block(store, &format!("lm.blk{l}"), d, dims.lm_mlp, gain, rng);
    }
    nn::init_layer_norm(store, "lm.lnf", d);
    nn::init_linear(store, "lm.head", d, vocab, true, rng);
}

pub fn vocab_size<T: Real>(store: &ParamStore<T>) -> Result<usize> {
    Ok(store.get("lm.tok")?.rows())
}

/// Appends zero embedding rows and zero output columns with bias
/// [`NEW_TOKEN_BIAS`] until the vocabulary has `new_size` entries.
pub fn extend_vocab(store: &mut ParamStore, new_size: usize) -> Result<()> {
    let tok = store.get("lm.tok")?.clone();
    let (old, d) = (tok.rows(), tok.cols());
    if new_size <= old {
        return Ok(());
    }
    let mut data = tok.into_data();
    data.resize(new_size * d, 0.0);
    store.insert("lm.tok", Tensor::new([new_size, d], data)?);

    let w = store.get("lm.head.w")?.clone();
    let mut wd = Vec::with_capacity(d * new_size);
    for r in 0..d {
        wd.extend_from_slice(w.row(r));
        wd.extend(std::iter::repeat_n(0.0, new_size - old));
    }
    store.insert("lm.head.w", Tensor::new([d, new_size], wd)?);
    let mut b = store.get("lm.head.b")?.clone().into_data();
    b.resize(new_size, NEW_TOKEN_BIAS);
    store.insert("lm.head.b", Tensor::vector(b));
    Ok(())
}

pub struct LmOutput {
    /// `[(M + L) × V]`
    pub logits: Var,
    /// Final-norm hidden states `[(M + L) × d]`.
    pub hidden: Var,
    pub prefix_len: usize,
}

/// Prefix rows carry the segment embedding; token rows use positions `0..L`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: Option<Var>,
    ids: &[usize],
    dims: &Dims,
) -> Result<LmOutput> {
    let m = prefix.map_or(0, |p| tape.value(p).rows());
    if m + ids.len() > dims.context || ids.is_empty() {
        return Err(TensorError::Contract(format!(
            "sequence of {} prefix rows and {} tokens does not fit context {} (or is empty)",
            m,
            ids.len(),
            dims.context
        ))
        .into());
    }
    let tok = tape.param(store, "lm.tok")?;
    let x = tape.embedding(tok, ids)?;
    let pos = tape.param(store, "lm.pos")?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = tape.embedding(pos, &positions)?;
    let mut x = tape.add(x, p)?;
    if let Some(pre) = prefix {
        let seg = tape.param(store, "lm.seg")?;
        let pre = tape.add_bias(pre, seg)?;
        x = tape.concat_rows(&[pre, x])?;
    }
    for l in 0..dims.lm_layers {
        x = nn::block(tape, store, x, &format!("lm.blk{l}"), dims.lm_heads, true)?;
    }
    let hidden = nn::layer_norm(tape, store, x, "lm.lnf")?;
    let logits = nn::linear(tape, store, hidden, "lm.head")?;
    Ok(LmOutput {
        logits,
        hidden,
        prefix_len: m,
    })
}

/// Teacher-forced next-token loss over `seq`, supervising target position
/// `i + 1` only where `supervise[i]` holds (`supervise.len() == seq.len() - 1`).
pub fn sequence_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: Option<Var>,
    seq: &[usize],
    supervise: &[bool],
    dims: &Dims,
) -> Result<(Var, LmOutput)> {
    if seq.len() < 2 || supervise.len() != seq.len() - 1 {
        return Err(TensorError::Contract(format!(
            "sequence of {} tokens with {} supervision flags",
            seq.len(),
            supervise.len()
        ))
        .into());
    }
    let inputs = &seq[..seq.len() - 1];
    let out = forward(tape, store, prefix, inputs, dims)?;
    let m = out.prefix_len;
    let mut targets = vec![0; m];
    targets.extend_from_slice(&seq[1..]);
    let mut mask = vec![false; m];
    mask.extend_from_slice(supervise);
    let loss = tape.cross_entropy(out.logits, &targets, &mask)?;
    Ok((loss, out))
}

/// Mean next-token loss over the whole sequence after its first token.
pub fn text_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: Option<Var>,
    seq: &[usize],
    dims: &Dims,
) -> Result<Var> {
    let supervise = vec![true; seq.len().saturating_sub(1)];
    Ok(sequence_loss(tape, store, prefix, seq, &supervise, dims)?.0)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` until `eos` (included) or `max_len` tokens.
pub fn generate(
    store: &ParamStore,
    prefix: Option<&Tensor>,
    prompt: &[usize],
    max_len: usize,
    eos: usize,
    dims: &Dims,
) -> Result<Vec<usize>> {
    let m = prefix.map_or(0, |p| p.rows());
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && m + seq.len() < dims.context {
        let mut tape = Tape::inference();
        let pre = prefix.map(|p| tape.constant(p.clone()));
        let o = forward(&mut tape, store, pre, &seq, dims)?;
        let logits = tape.value(o.logits);
        let next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        seq.push(next);
        if next == eos {
            break;
        }
    }
    Ok(out)
}

/// Logits of the next token after `seq` and the final hidden states.
pub fn next_logits(store: &ParamStore, prefix: Option<&Tensor>, seq: &[usize], dims: &Dims) -> Result<(Vec<f32>, Tensor)> {
    let mut tape = Tape::inference();
    let pre = prefix.map(|p| tape.constant(p.clone()));
    let o = forward(&mut tape, store, pre, seq, dims)?;
    let logits = tape.value(o.logits);
    Ok((logits.row(logits.rows() - 1).to_vec(), tape.value(o.hidden).clone()))
}
