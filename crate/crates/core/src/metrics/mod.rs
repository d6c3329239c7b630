//! Evaluation metrics: NMAE, AUC, normalized Gini, and day-over-day stability.

pub mod experiments;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horizon::Horizon;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub y_true: f64,
    /// ZILN expected value.
    pub y_pred: f64,
    pub p_buy: f64,
    pub horizon: Horizon,
}

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: Horizon,
    pub nmae: f64,
    pub auc: f64,
    pub n_gini: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `Σ|pred - true| / Σ true`.
pub fn nmae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    let denom: f64 = y_true.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("degenerate truth: sum of y_true is 0"));
    }
    let num: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (p - t).abs()).sum();
    Ok(num / denom)
}

/// Average 1-based ranks, ties sharing the mean of their positions.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// ROC AUC via the Mann–Whitney U statistic; tied scores count one half.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes present"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Gini of the value-capture curve when samples are visited by descending
/// `order_key`. Tied keys share the mean value of their group.
fn capture_gini(y_true: &[f64], order_key: &[f64], total: f64) -> f64 {
    let n = y_true.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| order_key[b].total_cmp(&order_key[a]));
    // area = Σ_i y_(i) (n - i + 1/2) / (n·S), positions i 1-based
    let mut weighted = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && order_key[order[j]] == order_key[order[i]] {
            j += 1;
        }
        let group_sum: f64 = order[i..j].iter().map(|&k| y_true[k]).sum();
        let group_mean = group_sum / (j - i) as f64;
        for pos in i..j {
            weighted += group_mean * (n as f64 - (pos + 1) as f64 + 0.5);
        }
        i = j;
    }
    let area = weighted / (n as f64 * total);
    2.0 * area - 1.0
}

/// Normalized Gini: model capture-curve Gini over the truth-ordered Gini.
pub fn n_gini(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    let total: f64 = y_true.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("degenerate truth: sum of y_true is 0"));
    }
    let oracle = capture_gini(y_true, y_true, total);
    if oracle.abs() < 1e-15 {
        return Err(Error::invalid("undefined normalizer: all y_true equal"));
    }
    Ok(capture_gini(y_true, y_pred, total) / oracle)
}

/// `|Σ day1 - Σ day2| / Σ day1`. Not symmetric in its arguments.
pub fn stability_diff(day1: &[f64], day2: &[f64]) -> Result<f64> {
    check_lengths(day1.len(), day2.len())?;
    let s1: f64 = day1.iter().sum();
    let s2: f64 = day2.iter().sum();
    if s1 == 0.0 {
        return Err(Error::invalid("sum of day-1 predictions is 0"));
    }
    Ok((s1 - s2).abs() / s1)
}

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    // constant input: rounding in the mean must not fake a tiny variance
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn split_records(records: &[EvalRecord]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if records.iter().any(|r| !(r.y_true.is_finite() && r.y_pred.is_finite() && r.p_buy.is_finite())) {
        return Err(Error::NonFinite("evaluation record".into()));
    }
    Ok((
        records.iter().map(|r| r.y_true).collect(),
        records.iter().map(|r| r.y_pred).collect(),
        records.iter().map(|r| r.p_buy).collect(),
    ))
}

/// NMAE, AUC (scored by purchase probability) and N-GINI (scored by expected
/// value) for one horizon's records.
pub fn evaluate_horizon(horizon: Horizon, records: &[EvalRecord]) -> Result<HorizonMetrics> {
    let (t, p, b) = split_records(records)?;
    let labels: Vec<bool> = t.iter().map(|&y| y > 0.0).collect();
    Ok(HorizonMetrics {
        horizon,
        nmae: nmae(&t, &p)?,
        auc: auc(&labels, &b)?,
        n_gini: n_gini(&t, &p)?,
    })
}

pub fn metrics_csv(rows: &[HorizonMetrics], header_comment: &str) -> String {
    let mut out = String::new();
    out.push_str(header_comment);
    out.push_str("horizon,nmae,auc,n_gini\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.horizon,
            crate::io_util::fmt_f64(r.nmae),
            crate::io_util::fmt_f64(r.auc),
            crate::io_util::fmt_f64(r.n_gini)
        ));
    }
    out
}
