//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step for (f(p + h) − f(p − h)) / 2h.
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    f(&tape, &bound)?.item()
}

/// Compares the reverse-mode gradient of the scalar `f` with respect to every
/// parameter of `store` against central differences.
///
/// `f` must be deterministic; two identical forward passes that disagree
/// produce [`TensorError::Determinism`]. The parameter values are restored
/// before returning and their grad slots are left untouched.
pub fn finite_diff_check<F>(f: F, store: &mut ParamStore<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(opts.h > 0.0) {
        return Err(TensorError::Shape(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = f(&tape, &bound)?;
        let first = loss.item()?;
        let second = eval(&f, store)?;
        if first.to_bits() != second.to_bits() {
            return Err(TensorError::Determinism(format!(
                "two forward passes gave {first:e} and {second:e}"
            )));
        }
        let grads = tape.backward(loss)?;
        bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect::<Result<_>>()?
    };

    let mut report = GradCheckReport {
        params: Vec::with_capacity(store.len()),
        tol: opts.tol,
    };
    for p in 0..store.len() {
        let id = crate::params::ParamId(p);
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n && m > 0 => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(&f, store);
            store.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(&f, store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            let a = analytic[p][i];
            let err = relative_error(a, numeric, opts.floor);
            if err > check.max_rel_error || coords.len() == 1 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
