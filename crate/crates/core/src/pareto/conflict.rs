//! Gradient-conflict statistics over logged training steps.

use serde::Serialize;

use super::StepLog;
use crate::error::{Error, Result};
use crate::io_util::fmt_f64;

pub const PAIRS: [&str; 3] = ["12", "13", "23"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConflictSummary {
    pub steps: usize,
    /// Fraction of steps with at least one negative pairwise cosine.
    pub conflict_fraction: f64,
    /// Mean angle in radians per pair, (1,2), (1,3), (2,3).
    pub mean_angle: [f64; 3],
    pub zero_norm_steps: usize,
}

pub fn is_conflicting(log: &StepLog) -> bool {
    log.cos.iter().any(|&c| c < 0.0)
}

pub fn conflict_summary(logs: &[StepLog]) -> Result<ConflictSummary> {
    if logs.is_empty() {
        return Err(Error::invalid("conflict report needs at least one step"));
    }
    let n = logs.len() as f64;
    let conflicts = logs.iter().filter(|l| is_conflicting(l)).count();
    let mut mean_angle = [0.0; 3];
    for l in logs {
        for (m, c) in mean_angle.iter_mut().zip(l.cos) {
            *m += c.clamp(-1.0, 1.0).acos() / n;
        }
    }
    Ok(ConflictSummary {
        steps: logs.len(),
        conflict_fraction: conflicts as f64 / n,
        mean_angle,
        zero_norm_steps: logs.iter().filter(|l| l.zero_norm).count(),
    })
}

/// Per-step cosines followed by summary rows keyed in the `step` column.
pub fn conflict_report_csv(logs: &[StepLog], header_comment: &str) -> Result<String> {
    let s = conflict_summary(logs)?;
    let mut out = String::from(header_comment);
    out.push_str("step,cos12,cos13,cos23,conflict,zero_norm\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.step,
            fmt_f64(l.cos[0]),
            fmt_f64(l.cos[1]),
            fmt_f64(l.cos[2]),
            is_conflicting(l),
            l.zero_norm
        ));
    }
    out.push_str(&format!("# conflict_fraction={}\n", fmt_f64(s.conflict_fraction)));
    for (p, a) in PAIRS.iter().zip(s.mean_angle) {
        out.push_str(&format!("# mean_angle_{p}={}\n", fmt_f64(a)));
    }
    out.push_str(&format!("# zero_norm_steps={}\n", s.zero_norm_steps));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pareto::{pairwise_cosines, Mode};

    fn log_with(grads: &[Vec<f64>]) -> StepLog {
        let (cos, zero_norm) = pairwise_cosines(grads);
        StepLog {
            step: 0,
            losses: [1.0; 3],
            mu_kl: 0.0,
            mode: Mode::Descent,
            beta: [0.0; 3],
            dnd_norm: 0.0,
            cos: [cos[0], cos[1], cos[2]],
            relaxed: false,
            zero_norm,
        }
    }

    #[test]
    fn equal_gradients_do_not_conflict() {
        let g = vec![1.0, 2.0];
        let s = conflict_summary(&[log_with(&[g.clone(), g.clone(), g])]).unwrap();
        assert_eq!(s.conflict_fraction, 0.0);
        assert!(s.mean_angle.iter().all(|a| a.abs() < 1e-7));
    }

    #[test]
    fn antipodal_gradients_conflict() {
        let l = log_with(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(l.cos[0], -1.0);
        assert_eq!(conflict_summary(&[l]).unwrap().conflict_fraction, 1.0);
    }

    #[test]
    fn zero_norm_is_flagged() {
        let l = log_with(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(l.zero_norm);
        assert_eq!(l.cos[0], 0.0);
        let csv = conflict_report_csv(&[l], "").unwrap();
        assert!(csv.contains("zero_norm_steps=1"));
    }

    #[test]
    fn empty_log_is_rejected() {
        assert!(conflict_summary(&[]).is_err());
    }
}
