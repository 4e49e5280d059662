//! Central finite-difference checks of tape gradients (f64 only).

use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, ParamStore};
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub mod suite;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Relative step: `h = step * max(|x|, STEP_FLOOR)`.
    pub step: f64,
    /// Upper bound on perturbed coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// Input names (parameter names for store checks, `input{k}` otherwise).
    pub labels: Vec<String>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// Label and error of the worst input.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.labels
            .iter()
            .zip(&self.per_input)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(l, &e)| (l.as_str(), e))
    }
}

/// Smallest coordinate scale used to size the difference step.
pub const STEP_FLOOR: f64 = 0.3;

/// Gradients smaller than this in magnitude are compared absolutely: an
/// exactly-zero gradient (a key bias under softmax, a bias feeding batch
/// norm) has a finite-difference estimate made of rounding noise only.
pub const ABS_FLOOR: f64 = 1e-6;

/// Relative error between two gradient samples:
/// `max|a-n| / max(max|a|, max|n|, ABS_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(ABS_FLOOR)
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            // Evenly spread, always including both ends.
            let mut v: Vec<usize> = (0..m)
                .map(|i| if m == 1 { 0 } else { i * (len - 1) / (m - 1) })
                .collect();
            v.dedup();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Fourth-order central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`; the truncation error
/// is O(h^4), which keeps strongly curved layers (batch norm over a handful
/// of values) well inside tolerance at `h = 1e-4`.
fn central_difference(x0: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let p1 = f(x0 + h)?;
    let m1 = f(x0 - h)?;
    let p2 = f(x0 + 2.0 * h)?;
    let m2 = f(x0 - 2.0 * h)?;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (k, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic_full = tape.grad(*var).unwrap_or(&zero).to_f64_vec();
        let picks = coords(inputs[k].len(), opts.max_coords);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let x0 = inputs[k].data()[i];
            let h = opts.step * x0.abs().max(STEP_FLOOR);
            let numeric_i = central_difference(x0, h, |v| {
                work[k].data_mut()[i] = v;
                eval(&work)
            })?;
            work[k].data_mut()[i] = x0;
            analytic.push(analytic_full[i]);
            numeric.push(numeric_i);
        }
        checked += picks.len();
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        labels: (0..per_input.len()).map(|k| format!("input{k}")).collect(),
        per_input,
        coords_checked: checked,
        tolerance: opts.tolerance,
    })
}

/// Same check over every learnable tensor of a parameter store: `f` builds
/// the scalar loss inside a [`Forward`] pass run with `mode` (use a fixed
/// seed so dropout masks repeat between evaluations).
pub fn check_store_gradients<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<'_, f64>) -> Result<Var>,
{
    let mode = Mode { grad: true, ..mode };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut fw = Forward::new(s, Mode { grad: false, ..mode });
        let out = f(&mut fw)?;
        fw.tape.value(out).item()
    };

    let mut fw = Forward::new(store, mode);
    let loss = f(&mut fw)?;
    fw.tape.backward(loss)?;

    let mut work = store.clone();
    let mut per_input = Vec::new();
    let mut labels = Vec::new();
    let mut checked = 0;
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let x = store.get(&name)?;
        let analytic_full = match fw.param_vars().get(&name) {
            Some(&v) => fw.tape.grad(v).map(|g| g.to_f64_vec()),
            None => None,
        }
        .unwrap_or_else(|| vec![0.0; x.len()]);
        let picks = coords(x.len(), opts.max_coords);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let x0 = x.data()[i];
            let h = opts.step * x0.abs().max(STEP_FLOOR);
            let numeric_i = central_difference(x0, h, |v| {
                work.get_mut(&name)?.data_mut()[i] = v;
                eval(&work)
            })?;
            work.get_mut(&name)?.data_mut()[i] = x0;
            analytic.push(analytic_full[i]);
            numeric.push(numeric_i);
        }
        checked += picks.len();
        per_input.push(relative_error(&analytic, &numeric));
        labels.push(name);
    }
    Ok(GradCheckReport {
        per_input,
        labels,
        coords_checked: checked,
        tolerance: opts.tolerance,
    })
}

/// Reduces `out` to a scalar as `sum(out * R)` with a fixed pseudo-random
/// `R`, so every output element carries a distinct weight (a plain sum
/// would hide errors in ops whose outputs sum to a constant, like softmax).
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = CounterRng::new(seed);
    let weights = Tensor::from_fn(&shape, |_| rng.next_f64() * 2.0 - 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Random tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed);
    Tensor::from_fn(shape, |_| (rng.next_f64() * 2.0 - 1.0) * scale)
}

pub fn ensure_passed(name: &str, report: &GradCheckReport) -> Result<()> {
    if report.passed() {
        Ok(())
    } else {
        let (worst, _) = report.worst().unwrap_or(("?", 0.0));
        Err(Error::Internal(format!(
            "gradient check `{name}` failed: relative error {:.3e} > {:.1e} (worst input `{worst}`)",
            report.max_rel_err(),
            report.tolerance
        )))
    }
}
