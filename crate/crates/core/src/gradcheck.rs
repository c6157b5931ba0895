//! Central finite-difference gradient checking for float64 graphs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Mode, Module, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Entries probed per input; inputs with at most this many entries are probed fully.
    pub probes_per_input: usize,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            probes_per_input: 16,
            floor: 1e-3,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], mode: Mode) -> Result<f64>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut s = Session::frozen(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    scalar_of(&s, out)
}

fn scalar_of(s: &Session<f64>, out: Var) -> Result<f64> {
    let v = s.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central differences.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut s = Session::new(opts.mode);
    let vars: Vec<Var> = inputs.iter().map(|t| s.input_with_grad(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    scalar_of(&s, out)?;
    s.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| s.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(s);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries_checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= opts.probes_per_input {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.probes_per_input).into_vec();
            v.sort_unstable();
            v
        };
        for j in picks {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&f, &work, opts.mode)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&f, &work, opts.mode)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, opts.floor));
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of `loss(model, input)` with respect to every parameter of `model`.
/// Parameters are rebound to probe leaves, so the model itself is never mutated.
pub fn check_module<M, F>(
    name: &str,
    model: &M,
    opts: &GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&mut Session<f64>, &M) -> Result<Var>,
{
    let params = model.params();
    let values: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    check(name, &values, opts, |s, vars| {
        for (p, &v) in params.iter().zip(vars) {
            s.bind(p, v);
        }
        loss(s, model)
    })
}
