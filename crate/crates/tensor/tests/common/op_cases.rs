//! Random finite-difference instances for every differentiable tape operation.

use geode_tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use geode_tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;

pub const OPS: [&str; 29] = [
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "sigmoid",
    "tanh",
    "gelu",
    "softplus",
    "softmax",
    "mask_fill",
    "causal_mask",
    "layer_norm",
    "embedding",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "repeat_rows",
    "reshape",
    "mean_lastdim",
    "mean_rows",
    "sum",
    "cross_entropy",
    "mse",
    "gated_scan",
];

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `Σ w ⊙ x` with fixed random weights, so no output direction is degenerate.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn unary(inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        inputs,
        build: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed)
        }),
    }
}

/// Instance `seed` of operation `op`, reduced to a scalar.
pub fn case(op: &str, seed: u64) -> OpCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(op.len() as u64));
    let m = rng.gen_range(1..5);
    let n = rng.gen_range(2..6);
    let k = rng.gen_range(1..5);
    let x = rand_tensor(&mut rng, &[m, n]);
    let y = rand_tensor(&mut rng, &[m, n]);
    match op {
        "matmul" => unary(vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])], seed, |t, v| t.matmul(v[0], v[1])),
        "matmul_t" => unary(vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[n, k])], seed, |t, v| t.matmul_t(v[0], v[1])),
        "transpose" => unary(vec![x], seed, |t, v| t.transpose(v[0])),
        "add" => unary(vec![x, y], seed, |t, v| t.add(v[0], v[1])),
        "sub" => unary(vec![x, y], seed, |t, v| t.sub(v[0], v[1])),
        "mul" => unary(vec![x, y], seed, |t, v| t.mul(v[0], v[1])),
        "add_bias" => unary(vec![x, rand_tensor(&mut rng, &[n])], seed, |t, v| t.add_bias(v[0], v[1])),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            unary(vec![x], seed, move |t, v| t.scale(v[0], s))
        }
        "sigmoid" => unary(vec![x], seed, |t, v| t.sigmoid(v[0])),
        "tanh" => unary(vec![x], seed, |t, v| t.tanh(v[0])),
        "gelu" => unary(vec![x], seed, |t, v| t.gelu(v[0])),
        "softplus" => unary(vec![x], seed, |t, v| t.softplus(v[0])),
        "softmax" => unary(vec![x.clone().reshape([m, n]).unwrap()], seed, |t, v| t.softmax(v[0])),
        "mask_fill" => {
            let mask: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.3)).collect();
            unary(vec![x], seed, move |t, v| t.mask_fill(v[0], mask.clone(), 0.25))
        }
        "causal_mask" => {
            let c = m + rng.gen_range(0..3);
            let s = rand_tensor(&mut rng, &[m, c]);
            unary(vec![s], seed, |t, v| {
                let masked = t.causal_mask(v[0])?;
                t.softmax(masked)
            })
        }
        "layer_norm" => unary(
            vec![x, rand_tensor(&mut rng, &[n]), rand_tensor(&mut rng, &[n])],
            seed,
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        "embedding" => {
            let vocab = rng.gen_range(2..6);
            let ids: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..vocab)).collect();
            unary(vec![rand_tensor(&mut rng, &[vocab, n])], seed, move |t, v| t.embedding(v[0], &ids))
        }
        "concat_rows" => unary(vec![x, rand_tensor(&mut rng, &[k, n])], seed, |t, v| t.concat_rows(&[v[0], v[1]])),
        "concat_cols" => unary(vec![x, rand_tensor(&mut rng, &[m, k])], seed, |t, v| t.concat_cols(&[v[0], v[1]])),
        "slice_rows" => {
            let start = rng.gen_range(0..m);
            let len = rng.gen_range(1..=m - start);
            unary(vec![x], seed, move |t, v| t.slice_rows(v[0], start, len))
        }
        "slice_cols" => {
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..=n - start);
            unary(vec![x], seed, move |t, v| t.slice_cols(v[0], start, len))
        }
        "repeat_rows" => unary(vec![rand_tensor(&mut rng, &[1, n])], seed, move |t, v| t.repeat_rows(v[0], k + 1)),
        "reshape" => unary(vec![x], seed, move |t, v| t.reshape(v[0], &[n, m])),
        "mean_lastdim" => unary(vec![x], seed, |t, v| t.mean_lastdim(v[0])),
        "mean_rows" => unary(vec![x], seed, |t, v| t.mean_rows(v[0])),
        "sum" => unary(vec![x], seed, |t, v| {
            let s = t.sum(v[0])?;
            t.tanh(s)
        }),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            OpCase {
                inputs: vec![x],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &targets, &mask)),
            }
        }
        "mse" => OpCase {
            inputs: vec![x, y],
            build: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        "gated_scan" => {
            let f = Tensor::new([m, n], (0..m * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            unary(vec![f, y], seed, |t, v| t.gated_scan(v[0], v[1]))
        }
        other => panic!("no gradient case for `{other}`"),
    }
}

/// Largest relative gradient error of `op` over `instances` random instances.
pub fn max_error(op: &str, instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let c = case(op, seed);
            check_gradients(|t, v| (c.build)(t, v), &c.inputs, DEFAULT_STEP)
                .unwrap_or_else(|e| panic!("{op} instance {seed}: {e}"))
                .max_error()
        })
        .fold(0.0, f64::max)
}
