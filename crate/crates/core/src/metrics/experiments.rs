//! Robustness and seed-correlation experiment drivers.
//!
//! Training is injected by the caller; this module owns subset selection,
//! aggregation and the CSV layouts.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{pearson, HorizonMetrics};
use crate::error::{Error, Result};
use crate::io_util::fmt_f64;
use crate::rng;

/// Ratio list with the no-drop baseline first, deduplicated, ascending.
pub fn with_baseline(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::invalid(format!("drop ratios must lie in [0,1): {ratios:?}")));
    }
    let mut out = vec![0.0];
    out.extend_from_slice(ratios);
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Kept training indices at drop ratio `ratio`: the first `n − ⌊ratio·n⌋`
/// entries of one seeded permutation, so every variant sees the same subset
/// and larger ratios keep nested subsets.
pub fn kept_indices(train: &[usize], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("drop ratio {ratio} outside [0,1)")));
    }
    let mut perm = train.to_vec();
    perm.shuffle(&mut rng::stream(seed, "label-drop"));
    let keep = train.len() - (ratio * train.len() as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::invalid(format!("drop ratio {ratio} leaves no training samples")));
    }
    let mut kept = perm[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropVariant {
    Full,
    NoGrl,
}

impl DropVariant {
    pub const ALL: [DropVariant; 2] = [DropVariant::Full, DropVariant::NoGrl];

    pub fn as_str(self) -> &'static str {
        match self {
            DropVariant::Full => "full",
            DropVariant::NoGrl => "no_grl",
        }
    }
}

/// Test metrics of one (ratio, variant) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DropCell {
    pub ratio: f64,
    pub variant: DropVariant,
    pub metrics: Vec<HorizonMetrics>,
}

impl DropCell {
    pub fn mean_n_gini(&self) -> f64 {
        self.metrics.iter().map(|m| m.n_gini).sum::<f64>() / self.metrics.len() as f64
    }
}

/// Mean N-GINI at ratio 0 minus mean N-GINI at each ratio, per variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Degradation {
    pub ratio: f64,
    pub variant: DropVariant,
    pub mean_n_gini: f64,
    pub degradation: f64,
}

pub fn degradations(cells: &[DropCell]) -> Result<Vec<Degradation>> {
    let mut out = Vec::new();
    for v in DropVariant::ALL {
        let base = cells
            .iter()
            .find(|c| c.variant == v && c.ratio == 0.0)
            .ok_or_else(|| Error::invalid(format!("no ratio-0 baseline for {}", v.as_str())))?
            .mean_n_gini();
        for c in cells.iter().filter(|c| c.variant == v) {
            out.push(Degradation {
                ratio: c.ratio,
                variant: v,
                mean_n_gini: c.mean_n_gini(),
                degradation: base - c.mean_n_gini(),
            });
        }
    }
    Ok(out)
}

/// Ratios (> 0) where the GRL variant degrades no more than the no-GRL one.
pub fn grl_degrades_less(deg: &[Degradation]) -> Vec<(f64, bool)> {
    let of = |v: DropVariant, r: f64| deg.iter().find(|d| d.variant == v && d.ratio == r).map(|d| d.degradation);
    let mut ratios: Vec<f64> = deg.iter().map(|d| d.ratio).filter(|&r| r > 0.0).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    ratios
        .into_iter()
        .filter_map(|r| Some((r, of(DropVariant::Full, r)? <= of(DropVariant::NoGrl, r)?)))
        .collect()
}

/// One row per (ratio, variant, horizon).
pub fn label_drop_csv(cells: &[DropCell], header_comment: &str) -> String {
    let mut out = String::from(header_comment);
    out.push_str("ratio,variant,horizon,nmae,auc,n_gini\n");
    for c in cells {
        for m in &c.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(c.ratio),
                c.variant.as_str(),
                m.horizon,
                fmt_f64(m.nmae),
                fmt_f64(m.auc),
                fmt_f64(m.n_gini)
            ));
        }
    }
    out
}

pub fn degradation_csv(deg: &[Degradation], header_comment: &str) -> String {
    let mut out = String::from(header_comment);
    out.push_str("ratio,variant,mean_n_gini,degradation\n");
    for d in deg {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(d.ratio),
            d.variant.as_str(),
            fmt_f64(d.mean_n_gini),
            fmt_f64(d.degradation)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrVariant {
    Pareto,
    NoPareto,
}

impl CorrVariant {
    pub const ALL: [CorrVariant; 2] = [CorrVariant::Pareto, CorrVariant::NoPareto];

    pub fn as_str(self) -> &'static str {
        match self {
            CorrVariant::Pareto => "pareto",
            CorrVariant::NoPareto => "no_pareto",
        }
    }
}

/// Test-AUC 3-vector of one retrain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRun {
    pub variant: CorrVariant,
    pub run: usize,
    pub seed: u64,
    pub auc: [f64; 3],
}

/// Pearson matrix over runs; undefined entries are 0 and flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub zero_variance: Vec<Vec<bool>>,
}

pub fn correlation_matrix(runs: &[AucRun]) -> CorrelationMatrix {
    let n = runs.len();
    let mut values = vec![vec![0.0; n]; n];
    let mut flags = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i..n {
            let (v, f) = match pearson(&runs[i].auc, &runs[j].auc) {
                Some(r) => (r, false),
                None => (0.0, true),
            };
            values[i][j] = v;
            values[j][i] = v;
            flags[i][j] = f;
            flags[j][i] = f;
        }
    }
    CorrelationMatrix {
        labels: runs.iter().map(|r| format!("{}-{}", r.variant.as_str(), r.run)).collect(),
        values,
        zero_variance: flags,
    }
}

/// Mean of off-diagonal entries among runs of one variant.
pub fn mean_intra_correlation(runs: &[AucRun], m: &CorrelationMatrix, variant: CorrVariant) -> Option<f64> {
    let idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].variant == variant).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in &idx {
        for &j in &idx {
            if i != j {
                sum += m.values[i][j];
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn auc_vectors_csv(runs: &[AucRun], header_comment: &str) -> String {
    let mut out = String::from(header_comment);
    out.push_str("variant,run,seed,auc3,auc7,auc30\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.as_str(),
            r.run,
            r.seed,
            fmt_f64(r.auc[0]),
            fmt_f64(r.auc[1]),
            fmt_f64(r.auc[2])
        ));
    }
    out
}

/// Square matrix with a label column, then summary comment lines.
pub fn correlation_csv(runs: &[AucRun], m: &CorrelationMatrix, header_comment: &str) -> String {
    let mut out = String::from(header_comment);
    out.push_str("run");
    for l in &m.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, row) in m.values.iter().enumerate() {
        out.push_str(&m.labels[i]);
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    let flagged: Vec<String> = (0..m.labels.len())
        .flat_map(|i| (i..m.labels.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| m.zero_variance[i][j])
        .map(|(i, j)| format!("{}:{}", m.labels[i], m.labels[j]))
        .collect();
    out.push_str(&format!("# zero_variance={}\n", flagged.join(";")));
    for v in CorrVariant::ALL {
        if let Some(c) = mean_intra_correlation(runs, m, v) {
            out.push_str(&format!("# mean_intra_{}={}\n", v.as_str(), fmt_f64(c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::horizon::Horizon;

    #[test]
    fn baseline_is_prepended_once() {
        assert_eq!(with_baseline(&[0.7, 0.5]).unwrap(), vec![0.0, 0.5, 0.7]);
        assert_eq!(with_baseline(&[0.0, 0.9]).unwrap(), vec![0.0, 0.9]);
        assert!(with_baseline(&[1.0]).is_err());
    }

    #[test]
    fn kept_subsets_are_shared_and_nested() {
        let train: Vec<usize> = (0..100).map(|i| 3 * i).collect();
        assert_eq!(kept_indices(&train, 0.0, 1).unwrap(), train);
        let half = kept_indices(&train, 0.5, 1).unwrap();
        let tenth = kept_indices(&train, 0.9, 1).unwrap();
        assert_eq!((half.len(), tenth.len()), (50, 10));
        assert!(tenth.iter().all(|i| half.contains(i)));
        assert_eq!(half, kept_indices(&train, 0.5, 1).unwrap());
    }

    fn cell(ratio: f64, variant: DropVariant, g: f64) -> DropCell {
        DropCell {
            ratio,
            variant,
            metrics: Horizon::ALL
                .iter()
                .map(|&h| HorizonMetrics {
                    horizon: h,
                    nmae: 1.0,
                    auc: 0.5,
                    n_gini: g,
                })
                .collect(),
        }
    }

    #[test]
    fn degradation_and_row_count() {
        let cells = vec![
            cell(0.0, DropVariant::Full, 0.8),
            cell(0.5, DropVariant::Full, 0.7),
            cell(0.0, DropVariant::NoGrl, 0.6),
            cell(0.5, DropVariant::NoGrl, 0.4),
        ];
        let d = degradations(&cells).unwrap();
        assert!((d[1].degradation - 0.1).abs() < 1e-12 && (d[3].degradation - 0.2).abs() < 1e-12);
        assert_eq!(grl_degrades_less(&d), vec![(0.5, true)]);
        let csv = label_drop_csv(&cells, "# h\n");
        assert_eq!(csv.lines().count(), 2 + 2 * 2 * 3);
        assert!(degradations(&cells[1..2]).is_err());
    }

    #[test]
    fn correlation_matrix_properties() {
        let runs = vec![
            AucRun { variant: CorrVariant::Pareto, run: 0, seed: 1, auc: [0.6, 0.7, 0.8] },
            AucRun { variant: CorrVariant::Pareto, run: 1, seed: 2, auc: [0.61, 0.69, 0.85] },
            AucRun { variant: CorrVariant::NoPareto, run: 0, seed: 3, auc: [0.7, 0.7, 0.7] },
            AucRun { variant: CorrVariant::NoPareto, run: 1, seed: 4, auc: [0.8, 0.6, 0.7] },
        ];
        let m = correlation_matrix(&runs);
        for i in 0..4 {
            for j in 0..4 {
                assert!((m.values[i][j] - m.values[j][i]).abs() <= 1e-12);
            }
        }
        assert!((m.values[0][0] - 1.0).abs() < 1e-12);
        assert!(m.zero_variance[2][2] && m.values[2][2] == 0.0 && m.zero_variance[2][3]);
        let p = mean_intra_correlation(&runs, &m, CorrVariant::Pareto).unwrap();
        assert!((p - m.values[0][1]).abs() < 1e-15);
        let csv = correlation_csv(&runs, &m, "");
        let flagged = csv.lines().find(|l| l.starts_with("# zero_variance=")).unwrap();
        assert!(flagged.split(['=', ';']).any(|p| p == "no_pareto-0:no_pareto-0"), "{flagged}");
        assert!(!flagged.contains("pareto-0:pareto-1"));
        assert!(csv.contains("# mean_intra_pareto="));
    }
}
