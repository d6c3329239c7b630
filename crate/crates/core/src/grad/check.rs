use super::params::{Bound, GradRecord, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates a block graph built by `build` against `params`.
pub fn forward<F>(build: F, params: &ParamStore) -> Result<Tensor>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = build(&mut tape, &bound)?;
    Ok(tape.value(out).clone())
}

/// Gradient of the scalar produced by `build` with respect to every parameter.
pub fn backward<F>(build: F, params: &ParamStore) -> Result<GradRecord>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = build(&mut tape, &bound)?;
    tape.gradients(out, &bound)
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Central-difference check of [`backward`].
///
/// Relative error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// A forward failure at a perturbed point is reported as an infinite error.
pub fn finite_diff_check<F>(build: F, params: &ParamStore, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::invalid(format!("step h={h} outside (0, 1e-3]")));
    }
    let analytic = backward(&build, params)?;
    let eval = |p: &ParamStore| -> f64 {
        forward(&build, p)
            .ok()
            .and_then(|t| t.item())
            .unwrap_or(f64::NAN)
    };

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic.grads[&name].values().to_vec();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = params.get(&name)?.values()[k];
            work.get_mut(&name)?.values_mut()[k] = orig + h;
            let up = eval(&work);
            work.get_mut(&name)?.values_mut()[k] = orig - h;
            let down = eval(&work);
            work.get_mut(&name)?.values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad[k] - numeric).abs() / grad[k].abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        per_param.push(ParamError {
            name,
            max_rel_err: worst,
        });
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        per_param,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}
