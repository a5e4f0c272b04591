//! Central-difference gradient checking against the tape's analytic grads.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const MIN_EPSILON: f64 = 1e-7;
pub const MAX_EPSILON: f64 = 1e-3;

/// `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// The element of one parameter with the largest relative error.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElementError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

/// Compares `store.grad(name)` against `(f(θ+ε) − f(θ−ε)) / 2ε`, element by
/// element, and returns the largest relative error.
///
/// The analytic gradient must already be in the store (run a backward pass of
/// the same `f` first). Values are restored exactly afterwards.
pub fn finite_difference_check<F>(store: &mut ParamStore, name: &str, epsilon: f64, f: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    Ok(finite_difference_worst(store, name, epsilon, f)?.relative)
}

/// Like [`finite_difference_check`], but reports which element was worst.
pub fn finite_difference_worst<F>(store: &mut ParamStore, name: &str, epsilon: f64, mut f: F) -> Result<ElementError>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(MIN_EPSILON..=MAX_EPSILON).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [{MIN_EPSILON}, {MAX_EPSILON}]"
        )));
    }
    let analytic = store.grad(name)?.clone();
    let mut worst = ElementError::default();
    for i in 0..analytic.numel() {
        let original = store.value(name)?.data()[i];
        let (up, down) = (original + epsilon, original - epsilon);
        store.value_mut(name)?.data_mut()[i] = up;
        let plus = f(store);
        store.value_mut(name)?.data_mut()[i] = down;
        let minus = f(store);
        store.value_mut(name)?.data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite while perturbing {name}[{i}]"
            )));
        }
        // Divide by the step actually taken, not the nominal 2ε.
        let numeric = (plus - minus) / (up - down);
        let a = analytic.data()[i];
        let relative = relative_error(a, numeric);
        if relative > worst.relative || i == 0 {
            worst = ElementError {
                index: i,
                analytic: a,
                numeric,
                relative,
            };
        }
    }
    Ok(worst)
}

/// Worst relative error per checked parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<(String, ElementError)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|(_, e)| e.relative).fold(0.0, f64::max)
    }

    /// Names whose error is not below `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.relative.is_nan() || e.relative >= tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Builds the scalar objective on a fresh tape and evaluates it.
pub fn evaluate<B>(store: &ParamStore, build: &B) -> Result<f64>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    tape.value(out).item()
}

/// Runs one analytic backward pass of `build`, then checks every parameter
/// in the store (or only those in `only`, when given).
pub fn check_all<B>(store: &mut ParamStore, epsilon: f64, only: Option<&[&str]>, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    tape.backward_scalar(out, store)?;
    drop(tape);

    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(str::to_string).collect(),
    };
    let mut report = GradCheckReport::default();
    for name in names {
        let err = finite_difference_worst(store, &name, epsilon, |s| evaluate(s, &build))?;
        report.entries.push((name, err));
    }
    Ok(report)
}
