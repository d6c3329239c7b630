//! Anchored quadratic program for the non-dominating direction.
//!
//! Minimizes `‖Kβ - a‖²` where `K = GᵀG` is the task-gradient Gram matrix,
//! over `β ≥ 0`, `Σβ ≤ 1`, and `(Kβ)_j ≥ 0` for every `j` in the active set.
//! With at most a handful of tasks the feasible region has few enough faces
//! that every candidate active set can be solved exactly through its KKT
//! system; the best feasible candidate is the global optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-10;
const MAX_TASKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub beta: Vec<f64>,
    pub objective_value: f64,
    /// Indices into the constraint list: `0..m` are `β_i ≥ 0`, `m` is
    /// `Σβ ≤ 1`, `m+1+j` is `(Kβ)_j ≥ 0`.
    pub active_constraints: Vec<usize>,
    pub kkt_residual: f64,
    /// Set when the task constraints had to be dropped.
    pub relaxed: bool,
}

/// Gram matrix `K_ij = g_i · g_j` of task gradients (one row per task).
pub fn gram(grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = grads.len();
    if m == 0 {
        return Err(Error::invalid("no task gradients"));
    }
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::shape("gram", "task gradients differ in length"));
    }
    let mut k = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let d: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
            k[i][j] = d;
            k[j][i] = d;
        }
    }
    Ok(k)
}

/// Constraint `cᵀβ ≥ d`.
#[derive(Clone, Debug)]
struct Constraint {
    c: Vec<f64>,
    d: f64,
}

fn constraints(k: &[Vec<f64>], task_set: &[usize]) -> Vec<(usize, Constraint)> {
    let m = k.len();
    let mut out = Vec::new();
    for i in 0..m {
        let mut c = vec![0.0; m];
        c[i] = 1.0;
        out.push((i, Constraint { c, d: 0.0 }));
    }
    out.push((m, Constraint { c: vec![-1.0; m], d: -1.0 }));
    for &j in task_set {
        out.push((m + 1 + j, Constraint { c: k[j].clone(), d: 0.0 }));
    }
    out
}

/// Gaussian elimination with partial pivoting; `None` if numerically singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-11 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn objective(k: &[Vec<f64>], a: &[f64], beta: &[f64]) -> f64 {
    k.iter()
        .zip(a)
        .map(|(row, ai)| {
            let r: f64 = row.iter().zip(beta).map(|(x, y)| x * y).sum::<f64>() - ai;
            r * r
        })
        .sum()
}

fn gradient(k: &[Vec<f64>], a: &[f64], beta: &[f64]) -> Vec<f64> {
    let m = a.len();
    let resid: Vec<f64> = (0..m)
        .map(|i| k[i].iter().zip(beta).map(|(x, y)| x * y).sum::<f64>() - a[i])
        .collect();
    (0..m)
        .map(|j| 2.0 * (0..m).map(|i| k[i][j] * resid[i]).sum::<f64>())
        .collect()
}

/// Minimizer of the objective on `{cᵀβ = d : c ∈ S}`, if unique.
fn solve_on_face(k: &[Vec<f64>], a: &[f64], face: &[&Constraint]) -> Option<Vec<f64>> {
    let m = a.len();
    let s = face.len();
    let dim = m + s;
    let mut mat = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    // 2KᵀK β + Σ ν_i c_i = 2Kᵀa
    for i in 0..m {
        for j in 0..m {
            mat[i][j] = 2.0 * (0..m).map(|r| k[r][i] * k[r][j]).sum::<f64>();
        }
        rhs[i] = 2.0 * (0..m).map(|r| k[r][i] * a[r]).sum::<f64>();
    }
    for (t, con) in face.iter().enumerate() {
        for j in 0..m {
            mat[m + t][j] = con.c[j];
            mat[j][m + t] = con.c[j];
        }
        rhs[m + t] = con.d;
    }
    let x = solve_dense(mat, rhs)?;
    Some(x[..m].to_vec())
}

fn subsets(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n) {
        if (mask.count_ones() as usize) <= max_size {
            out.push((0..n).filter(|&i| mask & (1 << i) != 0).collect());
        }
    }
    out.sort_by_key(|s: &Vec<usize>| s.len());
    out
}

/// Smallest `‖grad - Σ μ_i c_i‖∞` over `μ ≥ 0` supported on the active set.
fn stationarity_residual(grad: &[f64], active: &[&Constraint]) -> f64 {
    let m = grad.len();
    let mut best = grad.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for support in subsets(active.len(), m) {
        if support.is_empty() {
            continue;
        }
        let p = support.len();
        // normal equations (CᵀC) μ = Cᵀ grad over the support
        let mut mat = vec![vec![0.0; p]; p];
        let mut rhs = vec![0.0; p];
        for (u, &i) in support.iter().enumerate() {
            for (v, &j) in support.iter().enumerate() {
                mat[u][v] = (0..m).map(|r| active[i].c[r] * active[j].c[r]).sum();
            }
            rhs[u] = (0..m).map(|r| active[i].c[r] * grad[r]).sum();
        }
        let Some(mu) = solve_dense(mat, rhs) else { continue };
        if mu.iter().any(|&x| x < -1e-12) {
            continue;
        }
        let res = (0..m)
            .map(|r| {
                let fit: f64 = support.iter().zip(&mu).map(|(&i, x)| x * active[i].c[r]).sum();
                (grad[r] - fit).abs()
            })
            .fold(0.0, f64::max);
        best = best.min(res);
    }
    best
}

fn solve_scaled(k: &[Vec<f64>], a: &[f64], task_set: &[usize]) -> Option<(Vec<f64>, f64)> {
    let m = a.len();
    let cons = constraints(k, task_set);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for face in subsets(cons.len(), m) {
        let rows: Vec<&Constraint> = face.iter().map(|&i| &cons[i].1).collect();
        let Some(beta) = solve_on_face(k, a, &rows) else { continue };
        let feasible = cons
            .iter()
            .all(|(_, c)| c.c.iter().zip(&beta).map(|(x, y)| x * y).sum::<f64>() >= c.d - FEAS_TOL);
        if !feasible {
            continue;
        }
        let obj = objective(k, a, &beta);
        let better = match &best {
            None => true,
            Some((_, b)) => obj < b - 1e-15 * b.abs().max(1.0),
        };
        if better {
            best = Some((beta, obj));
        }
    }
    best
}

fn clean(beta: &mut [f64]) {
    for b in beta.iter_mut() {
        // also maps -0.0 to +0.0
        if *b <= 0.0 {
            *b = 0.0;
        }
    }
    let s: f64 = beta.iter().sum();
    if s > 1.0 {
        for b in beta.iter_mut() {
            *b /= s;
        }
    }
}

/// Solves the anchored QP with task constraints on `task_set`.
///
/// `β = 0` always satisfies the task constraints, so the full problem is
/// feasible in exact arithmetic; `relaxed` is only set if no candidate
/// survives the numerical feasibility test.
pub fn solve_qp(k: &[Vec<f64>], anchor: &[f64], task_set: &[usize]) -> Result<QpSolution> {
    let m = anchor.len();
    if m == 0 || m > MAX_TASKS {
        return Err(Error::invalid(format!("QP supports 1..={MAX_TASKS} tasks, got {m}")));
    }
    if k.len() != m || k.iter().any(|r| r.len() != m) {
        return Err(Error::shape("solve_qp", format!("Gram matrix is not {m}×{m}")));
    }
    if task_set.iter().any(|&j| j >= m) {
        return Err(Error::invalid("task constraint index out of range"));
    }
    if k.iter().flatten().chain(anchor).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QP input".into()));
    }
    let scale = k
        .iter()
        .flatten()
        .chain(anchor)
        .fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return Ok(QpSolution {
            beta: vec![0.0; m],
            objective_value: 0.0,
            active_constraints: (0..m).collect(),
            kkt_residual: 0.0,
            relaxed: false,
        });
    }
    let ks: Vec<Vec<f64>> = k.iter().map(|r| r.iter().map(|v| v / scale).collect()).collect();
    let a_s: Vec<f64> = anchor.iter().map(|v| v / scale).collect();

    let (mut beta, relaxed, used_set) = match solve_scaled(&ks, &a_s, task_set) {
        Some((b, _)) => (b, false, task_set.to_vec()),
        None => match solve_scaled(&ks, &a_s, &[]) {
            Some((b, _)) => (b, true, Vec::new()),
            None => (vec![0.0; m], true, Vec::new()),
        },
    };
    clean(&mut beta);

    let cons = constraints(&ks, &used_set);
    let mut active_constraints = Vec::new();
    let mut active_rows = Vec::new();
    let mut infeasibility: f64 = 0.0;
    for (id, c) in &cons {
        let slack = c.c.iter().zip(&beta).map(|(x, y)| x * y).sum::<f64>() - c.d;
        infeasibility = infeasibility.max(-slack);
        if slack.abs() <= 1e-9 {
            active_constraints.push(*id);
            active_rows.push(c);
        }
    }
    let grad = gradient(&ks, &a_s, &beta);
    let kkt_residual = stationarity_residual(&grad, &active_rows).max(infeasibility.max(0.0));

    Ok(QpSolution {
        objective_value: objective(k, anchor, &beta),
        beta,
        active_constraints,
        kkt_residual,
        relaxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn orthonormal_gradients_recover_anchor() {
        let g = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let k = gram(&g).unwrap();
        let s = solve_qp(&k, &[0.5, 0.5, 0.0], &[0, 1, 2]).unwrap();
        for (b, e) in s.beta.iter().zip([0.5, 0.5, 0.0]) {
            assert!((b - e).abs() < 1e-12);
        }
        assert!(s.objective_value < 1e-20);
        assert!(s.kkt_residual <= 1e-6);
        assert!(!s.relaxed);
    }

    #[test]
    fn zero_gram_gives_zero_direction() {
        let k = vec![vec![0.0; 3]; 3];
        let s = solve_qp(&k, &[0.0; 3], &[0, 1, 2]).unwrap();
        assert_eq!(s.beta, vec![0.0; 3]);
    }

    #[test]
    fn solution_respects_constraints_on_random_instances() {
        let mut r = rng::stream(5, "qp-unit");
        for _ in 0..200 {
            let n = r.random_range(1..=6);
            let g: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let k = gram(&g).unwrap();
            let s = solve_qp(&k, &a, &[0, 1, 2]).unwrap();
            assert!(s.beta.iter().all(|&b| b >= 0.0));
            assert!(s.beta.iter().sum::<f64>() <= 1.0 + 1e-9);
            if !s.relaxed {
                for j in 0..3 {
                    let kb: f64 = k[j].iter().zip(&s.beta).map(|(x, y)| x * y).sum();
                    assert!(kb >= -1e-9, "{kb}");
                }
                assert!(s.kkt_residual <= 1e-6, "{}", s.kkt_residual);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(solve_qp(&[vec![1.0]], &[1.0, 2.0], &[]).is_err());
        assert!(solve_qp(&[vec![f64::NAN]], &[1.0], &[]).is_err());
        assert!(solve_qp(&[vec![1.0]], &[1.0], &[3]).is_err());
    }
}
