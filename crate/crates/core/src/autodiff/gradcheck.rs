//! Central finite-difference gradient checking.
//!
//! The function under test is rebuilt on a fresh tape for every perturbed
//! evaluation. Stop-gradient values are frozen at their unperturbed values
//! during those evaluations (see [`Tape::with_frozen_detaches`]), so only
//! paths declared differentiable contribute to the numeric derivative.
//! A gradient-reversal junction is not a stop-gradient and will disagree
//! with the numeric derivative by its factor `-scale`.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: Option<usize>,
    /// Added to every analytic gradient; lets tests confirm failures are caught.
    pub fault_offset: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            rel_tol: 1e-3,
            max_coords: None,
            fault_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel && m > 0 => (0..m).map(|i| i * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::InvalidShape(format!(
            "gradcheck function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::Evaluation(format!("function value is {s}")));
    }
    Ok(s)
}

/// Generic driver: `eval(tape, inputs)` builds the graph, `grads` reads the
/// analytic gradient for each tensor slot after backward.
fn check<S, B, G>(
    state: &mut S,
    slots: usize,
    slot_mut: impl Fn(&mut S, usize) -> &mut Tensor<f64>,
    build: B,
    grads: G,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    B: Fn(&mut Tape<f64>, &S) -> Result<Var>,
    G: Fn(&Tape<f64>, usize) -> Option<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, state)?;
    scalar_of(&tape, loss)?;
    tape.backward(loss)?;
    let frozen = tape.detached_values().to_vec();
    let analytic: Vec<Option<Tensor<f64>>> = (0..slots).map(|s| grads(&tape, s)).collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for slot in 0..slots {
        let numel = slot_mut(state, slot).numel();
        for c in coords(numel, opts.max_coords) {
            let orig = slot_mut(state, slot).data()[c];
            let eval_at = |v: f64, state: &mut S| -> Result<f64> {
                slot_mut(state, slot).data_mut()[c] = v;
                let mut t = Tape::with_frozen_detaches(frozen.clone());
                let l = build(&mut t, state)?;
                scalar_of(&t, l)
            };
            let plus = eval_at(orig + opts.eps, state);
            let minus = eval_at(orig - opts.eps, state);
            slot_mut(state, slot).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[slot].as_ref().map_or(0.0, |g| g.data()[c]) + opts.fault_offset;
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((slot, c));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.rel_tol;
    Ok(report)
}

/// Checks `∂f/∂x` for a function of a single input tensor.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64, rel_tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradcheckOptions {
        eps,
        rel_tol,
        ..Default::default()
    };
    gradcheck_inputs(|t, xs| f(t, xs[0]), std::slice::from_ref(x), &opts)
}

/// Checks gradients with respect to several input tensors at once.
pub fn gradcheck_inputs<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut state: Vec<Tensor<f64>> = inputs.to_vec();
    let n = state.len();
    // Input leaves are the first `n` nodes of every tape built here.
    check(
        &mut state,
        n,
        |s, i| &mut s[i],
        |tape, s| {
            let vars: Vec<Var> = s.iter().map(|t| tape.input(t.clone(), true)).collect();
            f(tape, &vars)
        },
        |tape, i| tape.grad(Var::from_index(i)),
        opts,
    )
}

/// Checks `∂f/∂θ` for the listed parameters of a store.
pub fn gradcheck_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check(
        store,
        ids.len(),
        |s, i| s.get_mut(ids[i]),
        |tape, s| f(tape, s),
        |tape, i| tape.param_grad(ids[i]),
        opts,
    )
}
