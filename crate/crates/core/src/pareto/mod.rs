//! Pareto co-training of the horizon tasks.
//!
//! Each step combines the task gradients `G = [g_1..g_m]` into a direction
//! `d = Gβ` chosen by an anchored quadratic program: when the λ-weighted losses
//! are far from uniform (measured by a KL divergence) the anchor pushes towards
//! balance, otherwise it asks for joint descent. The outer search samples
//! preference vectors λ on the positive octant of the unit sphere and keeps the
//! best-balanced run.

pub mod conflict;
pub mod qp;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use qp::{gram, solve_qp, QpSolution};

const CHAT_CLAMP: f64 = 1e-12;

/// Preference vector over tasks, unit length with positive entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct WeightVector([f64; 3]);

impl WeightVector {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid(format!("weights must be positive, got {v:?}")));
        }
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights must have unit norm, got {norm}")));
        }
        Ok(Self(v))
    }

    /// Rescales any positive vector onto the unit sphere.
    pub fn normalized(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::invalid("zero weight vector"));
        }
        Self::new(v.map(|x| x / norm))
    }

    pub fn uniform() -> Self {
        let c = 1.0 / 3f64.sqrt();
        Self([c, c, c])
    }

    /// Spherical parametrization: `θ = (π/2)·u`, `φ = arccos(v)`.
    pub fn from_uv(u: f64, v: f64) -> Result<Self> {
        let theta = std::f64::consts::FRAC_PI_2 * u;
        let phi = v.acos();
        Self::new([phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()])
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<[f64; 3]> for WeightVector {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for [f64; 3] {
    fn from(w: WeightVector) -> [f64; 3] {
        w.0
    }
}

/// Draws `u, v ~ U[1/3, 2/3]` and maps them through [`WeightVector::from_uv`].
pub fn sample_weight_vector<R: Rng + ?Sized>(rng: &mut R) -> (WeightVector, f64, f64) {
    let u = rng.random_range(1.0 / 3.0..=2.0 / 3.0);
    let v = rng.random_range(1.0 / 3.0..=2.0 / 3.0);
    let w = WeightVector::from_uv(u, v).expect("angles in the open first octant");
    (w, u, v)
}

fn weighted(losses: &[f64], lambda: &[f64]) -> Vec<f64> {
    losses.iter().zip(lambda).map(|(l, w)| l * w).collect()
}

/// KL divergence of the normalized weighted losses `ĉ = λ⊙L / Σ λ⊙L` from
/// uniform. Returns 0 when every weighted loss is 0.
pub fn uniformity_kl(losses: &[f64], lambda: &[f64]) -> Result<f64> {
    if losses.len() != lambda.len() || losses.is_empty() {
        return Err(Error::invalid("losses and weights differ in length"));
    }
    if losses.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!("losses must be finite and >= 0: {losses:?}")));
    }
    let c = weighted(losses, lambda);
    let total: f64 = c.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let m = c.len() as f64;
    Ok(c.iter()
        .map(|x| {
            let ch = (x / total).max(CHAT_CLAMP);
            ch * (m * ch).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Weighted losses are far from uniform; steer towards balance.
    Balance,
    /// Weighted losses are near uniform; descend jointly.
    Descent,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Balance => "balance",
            Mode::Descent => "descent",
        }
    }
}

pub fn mode_for(mu_kl: f64, epsilon: f64) -> Mode {
    if mu_kl > epsilon {
        Mode::Balance
    } else {
        Mode::Descent
    }
}

/// Anchor in loss space. Balance: `c_j (ln(m ĉ_j) - μ_kl)`. Descent: `c_j`.
pub fn anchor_direction(losses: &[f64], lambda: &[f64], mu_kl: f64, epsilon: f64) -> Vec<f64> {
    let c = weighted(losses, lambda);
    match mode_for(mu_kl, epsilon) {
        Mode::Descent => c,
        Mode::Balance => {
            let total: f64 = c.iter().sum();
            let m = c.len() as f64;
            c.iter()
                .map(|x| {
                    let ch = (x / total).max(CHAT_CLAMP);
                    x * ((m * ch).ln() - mu_kl)
                })
                .collect()
        }
    }
}

/// Indices of the largest weighted loss (all ties included).
pub fn argmax_weighted(losses: &[f64], lambda: &[f64]) -> Vec<usize> {
    let c = weighted(losses, lambda);
    let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * max.abs().max(1e-300);
    (0..c.len()).filter(|&j| (max - c[j]).abs() <= tol).collect()
}

/// Tasks whose non-increase is enforced.
///
/// The default gating constrains only the worst weighted task in descent mode
/// and every task in balance mode; `epo_convention` swaps the two branches.
pub fn constraint_set(losses: &[f64], lambda: &[f64], mode: Mode, epo_convention: bool) -> Vec<usize> {
    let all: Vec<usize> = (0..losses.len()).collect();
    let worst = argmax_weighted(losses, lambda);
    match (mode, epo_convention) {
        (Mode::Descent, false) | (Mode::Balance, true) => worst,
        (Mode::Balance, false) | (Mode::Descent, true) => all,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionConfig {
    pub epsilon: f64,
    pub epo_convention: bool,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            epo_convention: false,
        }
    }
}

/// Everything decided for one non-dominating step.
#[derive(Clone, Debug)]
pub struct Direction {
    pub mu_kl: f64,
    pub mode: Mode,
    pub anchor: Vec<f64>,
    pub task_set: Vec<usize>,
    pub qp: QpSolution,
    pub d: Vec<f64>,
    pub d_norm: f64,
    pub cosines: Vec<f64>,
    pub zero_norm: bool,
}

/// Pairwise cosines in (1,2), (1,3), (2,3) order; zero-norm pairs give 0.
pub fn pairwise_cosines(grads: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = Vec::new();
    let mut zero = false;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                zero = true;
                out.push(0.0);
            } else {
                let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                out.push((dot / (norms[i] * norms[j])).clamp(-1.0, 1.0));
            }
        }
    }
    (out, zero)
}

/// Computes `d_nd = Gβ*` for the given losses and task gradients.
pub fn nondominating_direction(
    losses: &[f64],
    grads: &[Vec<f64>],
    lambda: &[f64],
    cfg: &DirectionConfig,
) -> Result<Direction> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    if grads.len() != losses.len() {
        return Err(Error::invalid("one gradient row per task required"));
    }
    let mu_kl = uniformity_kl(losses, lambda)?;
    let mode = mode_for(mu_kl, cfg.epsilon);
    let anchor = anchor_direction(losses, lambda, mu_kl, cfg.epsilon);
    let task_set = constraint_set(losses, lambda, mode, cfg.epo_convention);
    let k = gram(grads)?;
    let qp = solve_qp(&k, &anchor, &task_set)?;
    let n = grads[0].len();
    let mut d = vec![0.0; n];
    for (g, b) in grads.iter().zip(&qp.beta) {
        if *b != 0.0 {
            for (di, gi) in d.iter_mut().zip(g) {
                *di += b * gi;
            }
        }
    }
    let d_norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (cosines, zero_norm) = pairwise_cosines(grads);
    Ok(Direction {
        mu_kl,
        mode,
        anchor,
        task_set,
        qp,
        d,
        d_norm,
        cosines,
        zero_norm,
    })
}

/// One row of `step_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: [f64; 3],
    pub mu_kl: f64,
    pub mode: Mode,
    pub beta: [f64; 3],
    pub dnd_norm: f64,
    pub cos: [f64; 3],
    pub relaxed: bool,
    #[serde(default)]
    pub zero_norm: bool,
}

impl StepLog {
    pub fn from_direction(step: usize, losses: [f64; 3], dir: &Direction) -> Self {
        let arr = |v: &[f64]| [v[0], v[1], v[2]];
        StepLog {
            step,
            losses,
            mu_kl: dir.mu_kl,
            mode: dir.mode,
            beta: arr(&dir.qp.beta),
            dnd_norm: dir.d_norm,
            cos: arr(&dir.cosines),
            relaxed: dir.qp.relaxed,
            zero_norm: dir.zero_norm,
        }
    }
}

pub const STEP_LOG_HEADER: &str =
    "step,l3,l7,l30,mu_kl,mode,beta1,beta2,beta3,dnd_norm,cos12,cos13,cos23,relaxed";

pub fn step_log_csv(logs: &[StepLog], header_comment: &str) -> String {
    use crate::io_util::fmt_f64 as f;
    let mut out = String::from(header_comment);
    out.push_str(STEP_LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            l.step,
            f(l.losses[0]),
            f(l.losses[1]),
            f(l.losses[2]),
            f(l.mu_kl),
            l.mode.as_str(),
            f(l.beta[0]),
            f(l.beta[1]),
            f(l.beta[2]),
            f(l.dnd_norm),
            f(l.cos[0]),
            f(l.cos[1]),
            f(l.cos[2]),
            l.relaxed
        ));
    }
    out
}

pub fn parse_step_log_csv(content: &str) -> Result<Vec<StepLog>> {
    let mut lines = crate::io_util::csv_lines(content);
    match lines.next() {
        Some(h) if h == STEP_LOG_HEADER => {}
        other => return Err(Error::invalid(format!("unexpected step log header {other:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| Error::Parse {
            path: "step_log.csv".into(),
            line: i + 2,
            msg,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 14 {
            return Err(bad(format!("expected 14 columns, got {}", cols.len())));
        }
        let num = |k: usize| cols[k].parse::<f64>().map_err(|e| bad(format!("column {k}: {e}")));
        let mode = match cols[5] {
            "balance" => Mode::Balance,
            "descent" => Mode::Descent,
            m => return Err(bad(format!("unknown mode {m}"))),
        };
        let cos = [num(10)?, num(11)?, num(12)?];
        out.push(StepLog {
            step: cols[0].parse().map_err(|e| bad(format!("step: {e}")))?,
            losses: [num(1)?, num(2)?, num(3)?],
            mu_kl: num(4)?,
            mode,
            beta: [num(6)?, num(7)?, num(8)?],
            dnd_norm: num(9)?,
            cos,
            relaxed: cols[13].parse().map_err(|e| bad(format!("relaxed: {e}")))?,
            // an exact zero cosine only arises from a zero-norm gradient
            zero_norm: cos.contains(&0.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn weight_vector_examples() {
        let w = WeightVector::from_uv(0.5, 0.5).unwrap().as_array();
        for (a, b) in w.iter().zip([0.61237, 0.61237, 0.5]) {
            assert!((a - b).abs() < 1e-5, "{w:?}");
        }
        let w = WeightVector::from_uv(1.0 / 3.0, 1.0 / 3.0).unwrap().as_array();
        for (a, b) in w.iter().zip([0.81650, 0.47140, 0.33333]) {
            assert!((a - b).abs() < 1e-5, "{w:?}");
        }
    }

    #[test]
    fn sampled_weights_are_positive_unit_vectors() {
        let mut r = rng::stream(1, "weights");
        for _ in 0..100_000 {
            let (w, u, v) = sample_weight_vector(&mut r);
            assert!((1.0 / 3.0..=2.0 / 3.0).contains(&u) && (1.0 / 3.0..=2.0 / 3.0).contains(&v));
            let a = w.as_array();
            assert!(a.iter().all(|&x| x > 0.0));
            assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_examples() {
        let lam = WeightVector::uniform();
        assert!(uniformity_kl(&[2.0, 2.0, 2.0], lam.as_slice()).unwrap().abs() < 1e-15);
        let limit = uniformity_kl(&[1.0, 0.0, 0.0], lam.as_slice()).unwrap();
        assert!((limit - 3f64.ln()).abs() < 1e-9, "{limit}");
        assert_eq!(uniformity_kl(&[0.0; 3], lam.as_slice()).unwrap(), 0.0);
        let a = uniformity_kl(&[0.3, 1.0, 2.0], &[0.2, 0.5, 0.84]).unwrap();
        let b = uniformity_kl(&[3.0, 10.0, 20.0], &[0.2, 0.5, 0.84]).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(uniformity_kl(&[-1.0, 1.0, 1.0], lam.as_slice()).is_err());
    }

    #[test]
    fn anchor_examples() {
        let lam = WeightVector::uniform();
        let a = anchor_direction(&[1.0; 3], lam.as_slice(), 0.0, 1e-2);
        assert!(a.iter().all(|&x| (x - lam.as_array()[0]).abs() < 1e-15));
        // uniform ĉ: μ_kl = 0 so descent mode applies
        assert_eq!(mode_for(0.0, 1e-2), Mode::Descent);
        // c = (2,1,1) with unit weights
        let l = [2.0, 1.0, 1.0];
        let w = [1.0, 1.0, 1.0];
        let mu = uniformity_kl(&l, &w).unwrap();
        assert!(mu > 1e-2);
        let a = anchor_direction(&l, &w, mu, 1e-2);
        assert!(a[0] > 0.0 && a[1] < 0.0 && a[2] < 0.0, "{a:?}");
    }

    #[test]
    fn constraint_gating() {
        let l = [1.0, 3.0, 2.0];
        let w = [1.0; 3];
        assert_eq!(constraint_set(&l, &w, Mode::Descent, false), vec![1]);
        assert_eq!(constraint_set(&l, &w, Mode::Balance, false), vec![0, 1, 2]);
        assert_eq!(constraint_set(&l, &w, Mode::Descent, true), vec![0, 1, 2]);
        assert_eq!(constraint_set(&l, &w, Mode::Balance, true), vec![1]);
    }

    #[test]
    fn identical_gradients_give_aligned_direction() {
        let g = vec![0.3, -1.2, 0.7, 0.05];
        let grads = vec![g.clone(), g.clone(), g.clone()];
        let lam = WeightVector::uniform();
        let dir = nondominating_direction(&[1.0; 3], &grads, lam.as_slice(), &DirectionConfig::default()).unwrap();
        assert_eq!(dir.mode, Mode::Descent);
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dir.d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (dir.d_norm * gn);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposing_gradients_are_pareto_stationary() {
        let g = vec![0.5, -1.0, 2.0];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let grads = vec![g.clone(), neg, g];
        // unbalanced losses put every task in the constraint set
        let dir = nondominating_direction(&[1.0, 4.0, 9.0], &grads, &[1.0; 3], &DirectionConfig::default()).unwrap();
        assert_eq!(dir.mode, Mode::Balance);
        assert_eq!(dir.task_set, vec![0, 1, 2]);
        assert!(dir.d_norm <= 1e-6, "{}", dir.d_norm);
    }

    #[test]
    fn step_log_csv_round_trip() {
        let logs = vec![StepLog {
            step: 3,
            losses: [0.1, 0.2, 1.0 / 3.0],
            mu_kl: 0.01,
            mode: Mode::Balance,
            beta: [0.2, 0.0, 0.8],
            dnd_norm: 2.5,
            cos: [0.5, -0.25, 1.0],
            relaxed: false,
            zero_norm: false,
        }];
        let text = step_log_csv(&logs, "# x\n");
        assert_eq!(parse_step_log_csv(&text).unwrap(), logs);
    }
}
