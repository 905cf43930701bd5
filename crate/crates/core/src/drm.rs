//! Rationale module: 2D/3D cross-attention fusion, gated temporal scan and
//! rationale-token readout, plus the frozen-LM reconstruction loss.

use geode_tensor::{ParamStore, Real, Tape, Var};
use rand::Rng;

use crate::encoders::{self, SceneInputs};
use crate::lm;
use crate::nn::{self, Dims};
use crate::Result;

pub fn init_drm(store: &mut ParamStore, dims: &Dims, rng: &mut impl Rng) {
    let (d, s) = (dims.d, dims.scan);
    nn::init_linear(store, "drm.fuse.q", d, d, false, rng);
    nn::init_linear(store, "drm.fuse.k", dims.d3, d, false, rng);
    nn::init_linear(store, "drm.fuse.v", dims.d3, d, false, rng);
    nn::init_linear_scaled(store, "drm.fuse.o", d, d, false, 0.5, rng);
    nn::init_linear(store, "drm.scan.a", d, s, true, rng);
    nn::init_linear(store, "drm.scan.b", d, s, true, rng);
    nn::init_linear(store, "drm.scan.c", d, s, true, rng);
    nn::init_linear_scaled(store, "drm.scan.y", s, d, false, 0.5, rng);
    store.insert("drm.read.query", nn::normal(&[dims.m, d], 1.0, rng));
    nn::init_linear(store, "drm.read.k", d, d, false, rng);
    nn::init_linear(store, "drm.read.v", d, d, false, rng);
    nn::init_linear(store, "drm.proj1", d, d, true, rng);
    nn::init_linear(store, "drm.proj2", d, d, true, rng);
}

/// `F2D + softmax(Q Kᵀ / √d_h) V W_o` with `Q = F2D W_q`, `K = F3D W_k`, `V = F3D W_v`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, f2d: Var, f3d: Var, heads: usize) -> Result<Var> {
    let q = nn::linear(tape, store, f2d, "drm.fuse.q")?;
    let k = nn::linear(tape, store, f3d, "drm.fuse.k")?;
    let v = nn::linear(tape, store, f3d, "drm.fuse.v")?;
    let a = nn::attention(tape, q, k, v, heads, false)?;
    let o = nn::linear(tape, store, a, "drm.fuse.o")?;
    Ok(tape.add(f2d, o)?)
}

/// Per channel `h_t = σ(a_t) ⊙ h_{t−1} + σ(b_t) ⊙ c_t`, output `h W_y + x`.
pub fn temporal_mix<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let a = nn::linear(tape, store, x, "drm.scan.a")?;
    let forget = tape.sigmoid(a)?;
    let b = nn::linear(tape, store, x, "drm.scan.b")?;
    let gate = tape.sigmoid(b)?;
    let c = nn::linear(tape, store, x, "drm.scan.c")?;
    let input = tape.mul(gate, c)?;
    let h = tape.gated_scan(forget, input)?;
    let y = nn::linear(tape, store, h, "drm.scan.y")?;
    Ok(tape.add(y, x)?)
}

/// `M` learned queries attend over the scan output; the result passes a
/// two-layer projection into the LM embedding space.
pub fn emit_rationale_tokens<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, st: Var) -> Result<Var> {
    let q = tape.param(store, "drm.read.query")?;
    let k = nn::linear(tape, store, st, "drm.read.k")?;
    let v = nn::linear(tape, store, st, "drm.read.v")?;
    let a = nn::attention(tape, q, k, v, 1, false)?;
    let r = tape.add(q, a)?;
    let h = nn::linear(tape, store, r, "drm.proj1")?;
    let h = tape.gelu(h)?;
    nn::linear(tape, store, h, "drm.proj2")
}

/// Encoders and rationale module end to end: `[M × d]` rationale tokens.
pub fn rationale_tokens<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    inputs: &SceneInputs,
    dims: &Dims,
) -> Result<Var> {
    let f2d = encoders::encode_2d(tape, store, &inputs.patches, dims)?;
    let f3d = encoders::encode_3d(tape, store, &inputs.points, dims)?;
    let fused = fuse(tape, store, f2d, f3d, dims.fuse_heads)?;
    let st = temporal_mix(tape, store, fused)?;
    emit_rationale_tokens(tape, store, st)
}

/// Teacher-forced reconstruction loss of `[bos] R [eos]` given the rationale
/// tokens as prefix (`None` for the no-prefix baseline).
pub fn stage1_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    tokens: Option<Var>,
    rationale: &[usize],
    dims: &Dims,
) -> Result<Var> {
    lm::text_loss(tape, store, tokens, rationale, dims)
}
