//! Zero-inflated lognormal distribution.
//!
//! A point mass `π` at zero mixed with a lognormal(`μ`, `σ²`) over positive
//! values. Heads emit unconstrained `(p_raw, μ, σ_raw)`; `π = sigmoid(p_raw)` and
//! `σ = softplus(σ_raw) + 1e-6`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

pub const SIGMA_FLOOR: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZilnParams {
    pub p_raw: f64,
    pub mu: f64,
    pub sigma_raw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZilnPrediction {
    pub expected_value: f64,
    pub purchase_prob: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of `softplus(x) + SIGMA_FLOOR`, for initialising heads at a given σ.
pub fn sigma_raw_for(sigma: f64) -> f64 {
    let s = (sigma - SIGMA_FLOOR).max(1e-12);
    // ln(e^s - 1), stable for large s
    s + (-(-s).exp()).ln_1p()
}

impl ZilnParams {
    pub fn new(p_raw: f64, mu: f64, sigma_raw: f64) -> Self {
        Self {
            p_raw,
            mu,
            sigma_raw,
        }
    }

    /// Zero-inflation probability.
    pub fn pi(&self) -> f64 {
        sigmoid(self.p_raw)
    }

    pub fn sigma(&self) -> f64 {
        softplus(self.sigma_raw) + SIGMA_FLOOR
    }
}

fn check_y(y: f64) -> Result<()> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::invalid(format!("ZILN target must be finite and >= 0, got {y}")));
    }
    Ok(())
}

/// Probability mass at `y = 0`, density for `y > 0`.
pub fn ziln_pdf(params: &ZilnParams, y: f64) -> Result<f64> {
    check_y(y)?;
    let pi = params.pi();
    if y == 0.0 {
        return Ok(pi);
    }
    let sigma = params.sigma();
    let z = (y.ln() - params.mu) / sigma;
    Ok((1.0 - pi) * (-0.5 * z * z).exp() / (y * sigma * (2.0 * std::f64::consts::PI).sqrt()))
}

/// Negative log of [`ziln_pdf`], evaluated in log space.
pub fn ziln_nll(params: &ZilnParams, y: f64) -> Result<f64> {
    check_y(y)?;
    if y == 0.0 {
        // -ln sigmoid(p) = softplus(-p)
        return Ok(softplus(-params.p_raw));
    }
    let sigma = params.sigma();
    let ly = y.ln();
    let z = (ly - params.mu) / sigma;
    Ok(softplus(params.p_raw) + ly + sigma.ln() + HALF_LN_2PI + 0.5 * z * z)
}

pub fn ziln_predict(params: &ZilnParams) -> ZilnPrediction {
    let purchase_prob = 1.0 - params.pi();
    let sigma = params.sigma();
    ZilnPrediction {
        expected_value: purchase_prob * (params.mu + 0.5 * sigma * sigma).exp(),
        purchase_prob,
    }
}

/// Mean ZILN negative log-likelihood over a batch, recorded on `tape`.
///
/// `p_raw`, `mu` and `sigma_raw` are vectors with one entry per target.
pub fn ziln_nll_batch(tape: &mut Tape, p_raw: Var, mu: Var, sigma_raw: Var, y: &[f64]) -> Result<Var> {
    let n = y.len();
    for v in [p_raw, mu, sigma_raw] {
        if tape.value(v).shape() != [n] {
            return Err(Error::shape(
                "ziln_nll",
                format!("head output {:?} vs {n} targets", tape.value(v).shape()),
            ));
        }
    }
    for &t in y {
        check_y(t)?;
    }
    let zero: Vec<f64> = y.iter().map(|&t| if t == 0.0 { 1.0 } else { 0.0 }).collect();
    let pos: Vec<f64> = zero.iter().map(|z| 1.0 - z).collect();
    let log_y: Vec<f64> = y.iter().map(|&t| if t > 0.0 { t.ln() } else { 0.0 }).collect();
    let const_term: Vec<f64> = log_y
        .iter()
        .zip(&pos)
        .map(|(l, p)| p * (l + HALF_LN_2PI))
        .collect();

    let zero_v = tape.constant(Tensor::raw(vec![n], zero));
    let pos_v = tape.constant(Tensor::raw(vec![n], pos));
    let log_y_v = tape.constant(Tensor::raw(vec![n], log_y));
    let const_v = tape.constant(Tensor::raw(vec![n], const_term));

    let neg_p = tape.neg(p_raw);
    let zero_part = tape.softplus(neg_p);
    let zero_part = tape.mul(zero_part, zero_v)?;

    let sigma = tape.softplus(sigma_raw);
    let sigma = tape.add_scalar(sigma, SIGMA_FLOOR);
    let log_sigma = tape.log(sigma)?;
    let resid = tape.sub(log_y_v, mu)?;
    let z = tape.div(resid, sigma)?;
    let z2 = tape.square(z);
    let half_z2 = tape.scale(z2, 0.5);
    let not_zero = tape.softplus(p_raw);
    let pos_part = tape.add(not_zero, log_sigma)?;
    let pos_part = tape.add(pos_part, half_z2)?;
    let pos_part = tape.mul(pos_part, pos_v)?;
    let pos_part = tape.add(pos_part, const_v)?;

    let total = tape.add(zero_part, pos_part)?;
    tape.mean(total)
}

/// Expected value `(1 - π)·exp(μ + σ²/2)` per target, recorded on `tape`.
pub fn expected_value_batch(tape: &mut Tape, p_raw: Var, mu: Var, sigma_raw: Var) -> Result<Var> {
    let sigma = tape.softplus(sigma_raw);
    let sigma = tape.add_scalar(sigma, SIGMA_FLOOR);
    let s2 = tape.square(sigma);
    let half = tape.scale(s2, 0.5);
    let arg = tape.add(mu, half)?;
    let lognormal_mean = tape.exp(arg)?;
    let neg_p = tape.neg(p_raw);
    let buy = tape.sigmoid(neg_p);
    tape.mul(buy, lognormal_mean)
}

/// Mean squared error between targets and the ZILN expected value.
pub fn squared_error_batch(tape: &mut Tape, p_raw: Var, mu: Var, sigma_raw: Var, y: &[f64]) -> Result<Var> {
    let pred = expected_value_batch(tape, p_raw, mu, sigma_raw)?;
    if tape.value(pred).len() != y.len() {
        return Err(Error::shape(
            "squared_error",
            format!("{} predictions vs {} targets", tape.value(pred).len(), y.len()),
        ));
    }
    let target = tape.constant(Tensor::raw(vec![y.len()], y.to_vec()));
    let r = tape.sub(pred, target)?;
    let r2 = tape.square(r);
    tape.mean(r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check, ParamStore};
    use crate::rng;
    use rand::Rng;

    fn with_sigma(pi: f64, mu: f64, sigma: f64) -> ZilnParams {
        let p_raw = (pi / (1.0 - pi)).ln();
        ZilnParams::new(p_raw, mu, sigma_raw_for(sigma))
    }

    #[test]
    fn zero_target_returns_pi() {
        let p = ZilnParams::new(0.3, 1.0, 0.2);
        assert_eq!(ziln_pdf(&p, 0.0).unwrap(), p.pi());
    }

    #[test]
    fn standard_lognormal_at_one() {
        // π → 0 by a very negative logit; σ = 1.
        let p = ZilnParams::new(-800.0, 0.0, sigma_raw_for(1.0));
        let v = ziln_pdf(&p, 1.0).unwrap();
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn negative_target_is_an_error() {
        let p = ZilnParams::new(0.0, 0.0, 0.0);
        assert!(ziln_pdf(&p, -1.0).is_err());
        assert!(ziln_nll(&p, -0.5).is_err());
        assert!(ziln_nll(&p, f64::NAN).is_err());
    }

    #[test]
    fn nll_at_zero_with_even_odds_is_ln2() {
        let p = ZilnParams::new(0.0, 3.0, 1.0);
        assert!((ziln_nll(&p, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_is_negative_log_pdf() {
        let mut r = rng::stream(11, "ziln-grid");
        for _ in 0..2000 {
            let p = ZilnParams::new(
                r.random_range(-4.0..4.0),
                r.random_range(-2.0..3.0),
                r.random_range(-2.0..2.0),
            );
            let y = if r.random_bool(0.3) { 0.0 } else { r.random_range(0.01..40.0) };
            let pdf = ziln_pdf(&p, y).unwrap();
            let nll = ziln_nll(&p, y).unwrap();
            assert!(((-nll).exp() - pdf).abs() <= 1e-12, "y={y} pdf={pdf} nll={nll}");
            if pdf > 1e-200 {
                assert!(((-nll).exp() / pdf - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predict_matches_closed_form() {
        let p = with_sigma(0.3, 0.0, 1.0);
        let pred = ziln_predict(&p);
        assert!((pred.expected_value - 0.7 * 0.5f64.exp()).abs() < 1e-9);
        assert!((pred.purchase_prob - 0.7).abs() < 1e-12);
        assert!((pred.expected_value - 1.154_104_9).abs() < 1e-6);
    }

    #[test]
    fn all_mass_at_zero_gives_zero_expectation() {
        let p = ZilnParams::new(1e3, 2.0, 0.5);
        assert_eq!(ziln_predict(&p).expected_value, 0.0);
    }

    #[test]
    fn expected_value_increases_with_mu() {
        let mut prev = -1.0;
        for k in 0..50 {
            let v = ziln_predict(&ZilnParams::new(0.2, -3.0 + 0.15 * k as f64, 0.4)).expected_value;
            assert!(v > prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn batch_nll_matches_scalar_and_finite_differences() {
        for seed in 0..20u64 {
            let mut r = rng::stream(seed, "ziln-fd");
            let n = 6;
            let y: Vec<f64> = (0..n)
                .map(|_| if r.random_bool(0.4) { 0.0 } else { r.random_range(0.05..20.0) })
                .collect();
            let mut p = ParamStore::new();
            for name in ["p", "mu", "s"] {
                let v = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
                p.insert(name, Tensor::vector(v).unwrap());
            }
            let build = |t: &mut Tape, b: &crate::grad::Bound| {
                ziln_nll_batch(t, b.get("p")?, b.get("mu")?, b.get("s")?, &y)
            };
            let batch = crate::grad::forward(build, &p).unwrap().item().unwrap();
            let scalar: f64 = (0..n)
                .map(|i| {
                    let zp = ZilnParams::new(
                        p.get("p").unwrap().values()[i],
                        p.get("mu").unwrap().values()[i],
                        p.get("s").unwrap().values()[i],
                    );
                    ziln_nll(&zp, y[i]).unwrap()
                })
                .sum::<f64>()
                / n as f64;
            assert!((batch - scalar).abs() < 1e-12);
            let report = finite_diff_check(build, &p, 1e-6, 1e-4).unwrap();
            assert!(report.passed, "{:?}", report.worst());
        }
    }

    #[test]
    fn squared_error_vanishes_on_perfect_prediction() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![-1.0, 0.5]).unwrap());
        let mu = t.constant(Tensor::vector(vec![0.2, 1.0]).unwrap());
        let s = t.constant(Tensor::vector(vec![0.1, -0.3]).unwrap());
        let ev = expected_value_batch(&mut t, p, mu, s).unwrap();
        let y = t.value(ev).values().to_vec();
        let l = squared_error_batch(&mut t, p, mu, s, &y).unwrap();
        assert_eq!(t.value(l).item(), Some(0.0));
    }
}
