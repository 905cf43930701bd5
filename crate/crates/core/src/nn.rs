//! Parameter initialization and the layers shared by every model component.

use geode_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

/// Samples `N(0, std²)` entries.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
    init_linear_scaled(store, name, fan_in, fan_out, bias, 1.0, rng);
}

/// Linear layer with weights `N(0, gain² / fan_in)`.
pub fn init_linear_scaled(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    gain: f64,
    rng: &mut impl Rng,
) {
    store.insert(
        format!("{name}.w"),
        normal(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
    );
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
    }
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full([d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros([d]));
}

pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    let bname = format!("{name}.b");
    if store.contains(&bname) {
        let b = tape.param(store, &bname)?;
        Ok(tape.add_bias(y, b)?)
    } else {
        Ok(y)
    }
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

/// Multi-head scaled dot-product attention over already projected `q`, `k`, `v`.
pub fn attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_t(qh, kh)?;
        let mut s = tape.scale(s, scale)?;
        if causal {
            s = tape.causal_mask(s)?;
        }
        let p = tape.softmax(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Ok(tape.concat_cols(&outs)?)
    }
}

pub fn init_block(store: &mut ParamStore, name: &str, d: usize, mlp: usize, depth_gain: f64, rng: &mut impl Rng) {
    init_layer_norm(store, &format!("{name}.ln1"), d);
    init_linear(store, &format!("{name}.qkv"), d, 3 * d, true, rng);
    init_linear_scaled(store, &format!("{name}.out"), d, d, true, depth_gain, rng);
    init_layer_norm(store, &format!("{name}.ln2"), d);
    init_linear(store, &format!("{name}.fc1"), d, mlp, true, rng);
    init_linear_scaled(store, &format!("{name}.fc2"), mlp, d, true, depth_gain, rng);
}

/// Pre-norm transformer block with fused qkv projection.
pub fn block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    name: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let h = layer_norm(tape, store, x, &format!("{name}.ln1"))?;
    let qkv = linear(tape, store, h, &format!("{name}.qkv"))?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let a = attention(tape, q, k, v, heads, causal)?;
    let a = linear(tape, store, a, &format!("{name}.out"))?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, store, x, &format!("{name}.ln2"))?;
    let h = linear(tape, store, h, &format!("{name}.fc1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, store, h, &format!("{name}.fc2"))?;
    Ok(tape.add(x, h)?)
}

/// Row-major `[rows × cols]` constant from f64 values.
pub fn constant<T: Real>(tape: &mut Tape<T>, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
    let t = Tensor::new([rows, cols], data.iter().map(|&v| T::of(v)).collect())?;
    Ok(tape.constant(t))
}

/// Architecture sizes shared by all components, resolved from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Dims {
    pub d: usize,
    pub d3: usize,
    pub k: usize,
    pub m: usize,
    pub enc_heads: usize,
    pub enc2d_blocks: usize,
    pub point_hidden: usize,
    pub fuse_heads: usize,
    pub scan: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_mlp: usize,
    pub context: usize,
    pub drh_hidden: usize,
    pub per_task_heads: bool,
    pub grid: usize,
    pub patch: usize,
    pub max_frames: usize,
}

impl Dims {
    pub fn from_config(c: &crate::LabConfig) -> Self {
        let m = &c.model;
        Self {
            d: m.d_model,
            d3: m.d_3d,
            k: m.k_tokens,
            m: m.m_tokens,
            enc_heads: m.enc_heads,
            enc2d_blocks: m.enc2d_blocks,
            point_hidden: m.point_hidden,
            fuse_heads: m.fuse_heads,
            scan: m.scan_width,
            lm_layers: m.lm_layers,
            lm_heads: m.lm_heads,
            lm_mlp: m.lm_mlp_ratio * m.d_model,
            context: m.context,
            drh_hidden: m.drh_hidden,
            per_task_heads: m.per_task_heads,
            grid: c.data.grid,
            patch: c.data.patch,
            max_frames: m.max_frames,
        }
    }

    /// Patches per frame.
    pub fn patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }
}
