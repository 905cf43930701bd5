//! Central finite-difference checks against the tape's analytic gradients.

use crate::{ParamStore, Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm difference when both are tiny.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation `O(h²)`.
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation `O(h⁴)`.
    Central4,
}

impl Stencil {
    fn derivative(self, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        match self {
            Stencil::Central => Ok((f(h)? - f(-h)?) / (2.0 * h)),
            Stencil::Central4 => {
                let d1 = f(h)? - f(-h)?;
                let d2 = f(2.0 * h)? - f(-2.0 * h)?;
                Ok((8.0 * d1 - d2) / (12.0 * h))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Relative error per checked tensor, in input order.
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares autodiff gradients of `build(inputs)` with central differences
/// for every element of every input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..numeric.len() {
            let orig = work[i].data()[j];
            numeric[j] = Stencil::Central.derivative(step, |d| {
                work[i].data_mut()[j] = orig + d;
                eval(&work)
            })?;
            work[i].data_mut()[j] = orig;
        }
        errors.push(rel_error(&analytic, &numeric));
    }
    Ok(GradCheck { errors })
}

/// Same as [`check_gradients`] but perturbs the named entries of a parameter
/// store. Every named entry must be trainable in `store`.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    build: F,
    step: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_param_gradients_with(store, names, build, step, Stencil::Central)
}

/// [`check_param_gradients`] with an explicit stencil.
pub fn check_param_gradients_with<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    build: F,
    step: f64,
    stencil: Stencil,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, s)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out)?.params();

    let mut work = store.clone();
    let mut errors = Vec::with_capacity(names.len());
    for &name in names {
        if !store.is_trainable(name) {
            return Err(TensorError::Contract(format!("`{name}` is not trainable")));
        }
        let n = store.get(name)?.numel();
        let analytic = grads
            .get(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(name)?.data()[j];
            numeric[j] = stencil.derivative(step, |d| {
                work.get_mut(name)?.data_mut()[j] = orig + d;
                eval(&work)
            })?;
            work.get_mut(name)?.data_mut()[j] = orig;
        }
        errors.push(rel_error(&analytic, &numeric));
    }
    Ok(GradCheck { errors })
}
