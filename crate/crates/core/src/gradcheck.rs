//! Central-difference gradient oracle.
//!
//! The analytic gradient from one reverse sweep is compared element by element
//! against `(f(θ+h) − f(θ−h)) / 2h`. Perturbations that move the computation
//! across a non-differentiable point (a ReLU sign flip, a change of pooling
//! winner, a log clamp engaging) are detected through the tape's kink
//! fingerprint and excluded, since the two-sided difference is meaningless
//! there.
//!
//! The difference quotient carries rounding noise of roughly
//! `N = 32·ε·max(|f|, 1) / h`, so a relative error of `τ` is only resolvable
//! for gradients of magnitude at least `N / τ`. Elements whose analytic and
//! numeric gradients both fall below that (exact zeros such as a bias feeding
//! a softmax, or tiny entries deep in a network) are counted as unresolved
//! instead of scored.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many (seeded, randomly chosen) elements per parameter.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
    /// Relative error the caller wants to resolve; sets the unresolved floor
    /// to `N / τ`. Without it the floor is `N`.
    pub resolve: Option<f64>,
    /// Test hook: perturbs the analytic gradient so the detector must fire.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_param: None,
            seed: 0,
            resolve: None,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Elements with both gradients under the resolution floor.
    pub unresolved: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    /// Parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, params: &Params<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", format!("function output shape {:?}", v.shape())));
    }
    Ok((v.data()[0], tape.kink_fingerprint()))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every parameter element (or a seeded subset).
pub fn grad_check<F>(params: &Params<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.step) {
        return Err(Error::Config(format!("finite-difference step {} outside [1e-7, 1e-4]", opts.step)));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if let Some(idx) = tape.first_non_finite() {
        return Err(Error::NonFinite(format!("forward value #{idx} of the checked function")));
    }
    let base_fp = tape.kink_fingerprint();
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, var) in tape.param_vars() {
        if let Some(g) = grads.get(var) {
            analytic[id.index()] = g.to_f64_vec();
        }
    }
    if opts.corrupt_analytic {
        for a in analytic.iter_mut().flatten() {
            *a = *a * 1.01 + 1e-3;
        }
    }

    let rng = Rng::new(opts.seed);
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let name = params.get(id).name.clone();
        let n = params.value(id).len();
        let elements: Vec<usize> = match opts.max_elements_per_param {
            Some(cap) if cap < n => rng.fork(id.index() as u64).choose_distinct(n, cap),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            unresolved: 0,
            max_rel_error: 0.0,
        };
        for e in elements {
            let original = work.value(id).data()[e];
            work.get_mut(id).value.data_mut()[e] = original + opts.step;
            let plus = evaluate(&f, &work);
            work.get_mut(id).value.data_mut()[e] = original - opts.step;
            let minus = evaluate(&f, &work);
            work.get_mut(id).value.data_mut()[e] = original;
            let ((lp, fp), (lm, fm)) = (plus?, minus?);
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing `{name}`[{e}]")));
            }
            if fp != base_fp || fm != base_fp {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic[id.index()][e];
            let noise = 32.0 * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / opts.step;
            let floor = noise / opts.resolve.unwrap_or(1.0);
            if a.abs() < floor && numeric.abs() < floor {
                check.unresolved += 1;
                continue;
            }
            let err = relative_error(a, numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
