//! Backbone building blocks expressed over tape primitives, batched by rows.

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

pub const PN_EPS: f64 = 1e-5;
/// Additive score for padded behavior slots; underflows to zero weight.
const PAD_SCORE: f64 = -1e30;

/// Number of field pairs `i < j` among `c` fields.
pub fn pair_count(c: usize) -> usize {
    c * c.saturating_sub(1) / 2
}

/// Field-weighted pair scores `r_ij · ⟨v_i, v_j⟩`, `i < j` in row-major
/// order; `fields[k]` is `B × d`, `r` holds the upper triangle.
pub fn fwfm(tape: &mut Tape, fields: &[Var], r: Var) -> Result<Var> {
    let c = fields.len();
    if tape.value(r).len() != pair_count(c) {
        return Err(Error::shape(
            "fwfm",
            format!("{} pair weights for {c} fields", tape.value(r).len()),
        ));
    }
    let b = tape.value(fields[0]).rows();
    let mut cols = Vec::with_capacity(pair_count(c));
    for i in 0..c {
        for j in i + 1..c {
            let d = tape.row_dot(fields[i], fields[j])?;
            cols.push(tape.reshape(d, &[b, 1])?);
        }
    }
    let dots = tape.concat(&cols, 1)?;
    tape.mul_row(dots, r)
}

/// EPNet gate `a = 2·sigmoid(W₂ relu(W₁ x_dom + b₁) + b₂)`, `B × d`.
pub fn epnet_gate(tape: &mut Tape, x_dom: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.affine(x_dom, w1, b1)?;
    let h = tape.relu(h);
    let o = tape.affine(h, w2, b2)?;
    let s = tape.sigmoid(o);
    Ok(tape.scale(s, 2.0))
}

/// `z = flatten(a ⊗ x_feat)`: every field row scaled elementwise by `a`.
/// `x_feat` is `B × (c·d)` with field `i` at columns `i·d..(i+1)·d`.
pub fn epnet_modulate(tape: &mut Tape, x_feat: Var, gate: Var) -> Result<Var> {
    let d = tape.value(gate).cols();
    let cd = tape.value(x_feat).cols();
    if d == 0 || cd % d != 0 {
        return Err(Error::shape("epnet_modulate", format!("feature width {cd} vs gate width {d}")));
    }
    let tiled = tape.concat(&vec![gate; cd / d], 1)?;
    tape.mul(x_feat, tiled)
}

/// Running per-domain statistics of Partitioned Norm.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PnState {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub momentum: f64,
}

impl PnState {
    pub fn new(domains: usize, width: usize, momentum: f64) -> Self {
        Self {
            mean: vec![vec![0.0; width]; domains],
            var: vec![vec![1.0; width]; domains],
            momentum,
        }
    }

    /// Exponential moving average toward observed batch statistics.
    pub fn update(&mut self, batch: &[Option<(Vec<f64>, Vec<f64>)>]) {
        let m = self.momentum;
        for (k, stats) in batch.iter().enumerate() {
            if let Some((mu, var)) = stats {
                for (r, b) in self.mean[k].iter_mut().zip(mu) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in self.var[k].iter_mut().zip(var) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct PnParams {
    pub gamma: Var,
    pub beta: Var,
    pub gamma_k: Var,
    pub beta_k: Var,
}

pub struct PnOutput {
    pub z: Var,
    /// Batch `(mean, biased var)` per domain used in train mode.
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Domains that fell back to running statistics in train mode.
    pub fallback_domains: Vec<usize>,
}

fn normalize_with(tape: &mut Tape, x: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
    let neg_mu = tape.constant(Tensor::raw(vec![mean.len()], mean.iter().map(|m| -m).collect()));
    let inv = tape.constant(Tensor::raw(
        vec![var.len()],
        var.iter().map(|v| 1.0 / (v + PN_EPS).sqrt()).collect(),
    ));
    let c = tape.add_row(x, neg_mu)?;
    tape.mul_row(c, inv)
}

/// `γ·γ_k (z − μ_k)/√(σ_k² + ε) + β + β_k` with per-domain statistics.
///
/// Train mode normalizes each domain's rows by their own batch statistics;
/// domains with fewer than two rows use the running statistics instead.
pub fn partitioned_norm(
    tape: &mut Tape,
    z: Var,
    domains: &[usize],
    p: &PnParams,
    state: &PnState,
    mode: Mode,
) -> Result<PnOutput> {
    let rows = tape.value(z).rows();
    let width = tape.value(z).cols();
    if domains.len() != rows {
        return Err(Error::shape("partitioned_norm", format!("{rows} rows vs {} domain ids", domains.len())));
    }
    let nd = state.mean.len();
    if domains.iter().any(|&k| k >= nd) {
        return Err(Error::invalid("domain id out of range in partitioned_norm"));
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(rows);
    let mut batch_stats = vec![None; nd];
    let mut fallback = Vec::new();
    for k in 0..nd {
        let idx: Vec<usize> = (0..rows).filter(|&i| domains[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let xk = tape.gather_rows(z, &idx)?;
        let normed = if mode == Mode::Train && idx.len() >= 2 {
            let mu = tape.col_mean(xk)?;
            let neg = tape.neg(mu);
            let centered = tape.add_row(xk, neg)?;
            let sq = tape.square(centered);
            let var = tape.col_mean(sq)?;
            let shifted = tape.add_scalar(var, PN_EPS);
            let sd = tape.sqrt(shifted)?;
            let ones = tape.constant(Tensor::filled(&[width], 1.0));
            let inv = tape.div(ones, sd)?;
            batch_stats[k] = Some((tape.value(mu).values().to_vec(), tape.value(var).values().to_vec()));
            tape.mul_row(centered, inv)?
        } else {
            if mode == Mode::Train {
                fallback.push(k);
            }
            normalize_with(tape, xk, &state.mean[k], &state.var[k])?
        };
        parts.push(normed);
        order.extend(idx);
    }
    let stacked = tape.concat(&parts, 0)?;
    let mut inverse = vec![0; rows];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let normed = tape.gather_rows(stacked, &inverse)?;
    let gk = tape.gather_rows(p.gamma_k, domains)?;
    let bk = tape.gather_rows(p.beta_k, domains)?;
    let scaled = tape.mul_row(normed, p.gamma)?;
    let scaled = tape.mul(scaled, gk)?;
    let shifted = tape.add_row(scaled, p.beta)?;
    let out = tape.add(shifted, bk)?;
    Ok(PnOutput {
        z: out,
        batch_stats,
        fallback_domains: fallback,
    })
}

/// Padded behavior sequences of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorBatch {
    pub len: usize,
    /// `B·L` game rows; padding points at `pad_game`.
    pub games: Vec<usize>,
    /// `B·L` zero-based recency buckets; padding uses bucket 0.
    pub ranks: Vec<usize>,
    /// `B·L`, 1 for real items.
    pub mask: Vec<bool>,
}

impl BehaviorBatch {
    pub fn new(seqs: &[&[(usize, usize)]], len: usize, pad_game: usize) -> Result<Self> {
        let mut games = Vec::with_capacity(seqs.len() * len);
        let mut ranks = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() > len {
                return Err(Error::invalid(format!("behavior of length {} exceeds {len}", s.len())));
            }
            for k in 0..len {
                match s.get(k) {
                    Some(&(g, rank)) => {
                        if rank == 0 || rank > len {
                            return Err(Error::invalid(format!("recency rank {rank} outside 1..={len}")));
                        }
                        games.push(g);
                        ranks.push(rank - 1);
                        mask.push(true);
                    }
                    None => {
                        games.push(pad_game);
                        ranks.push(0);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self { len, games, ranks, mask })
    }

    pub fn rows(&self) -> usize {
        self.games.len() / self.len.max(1)
    }
}

pub struct TinOutput {
    pub rep: Var,
    /// `B × L` attention weights (zero on padding and for empty sequences).
    pub attention: Var,
}

/// TIN-lite: `h_i = b_i + p_rank(i)`, `α = softmax(⟨h_i, t⟩/√d)`,
/// `rep = Σ α_i (h_i ⊙ t) + W u + c`.
pub fn tin_encode(
    tape: &mut Tape,
    game_table: Var,
    rank_table: Var,
    target_games: &[usize],
    user_emb: Var,
    user_w: Var,
    user_b: Var,
    beh: &BehaviorBatch,
) -> Result<TinOutput> {
    let b = target_games.len();
    let l = beh.len;
    let d = tape.value(game_table).cols();
    if beh.rows() != b {
        return Err(Error::shape("tin_encode", format!("{} behavior rows vs {b} targets", beh.rows())));
    }
    let items = tape.gather_rows(game_table, &beh.games)?;
    let pos = tape.gather_rows(rank_table, &beh.ranks)?;
    let h = tape.add(items, pos)?;
    let rep_targets: Vec<usize> = target_games.iter().flat_map(|&g| std::iter::repeat_n(g, l)).collect();
    let t = tape.gather_rows(game_table, &rep_targets)?;
    let s = tape.row_dot(h, t)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let pad = tape.constant(Tensor::raw(
        vec![b * l],
        beh.mask.iter().map(|&m| if m { 0.0 } else { PAD_SCORE }).collect(),
    ));
    let s = tape.add(s, pad)?;
    let s = tape.reshape(s, &[b, l])?;
    let alpha = tape.softmax(s)?;
    let nonempty = tape.constant(Tensor::raw(
        vec![b],
        beh.mask.chunks(l.max(1)).map(|m| if m.iter().any(|&x| x) { 1.0 } else { 0.0 }).collect(),
    ));
    let alpha = tape.mul_col(alpha, nonempty)?;
    let flat_alpha = tape.reshape(alpha, &[b * l])?;
    let ht = tape.mul(h, t)?;
    let weighted = tape.mul_col(ht, flat_alpha)?;
    let wide = tape.reshape(weighted, &[b, l * d])?;
    let mut stack = vec![0.0; l * d * d];
    for k in 0..l {
        for j in 0..d {
            stack[(k * d + j) * d + j] = 1.0;
        }
    }
    let stack = tape.constant(Tensor::raw(vec![l * d, d], stack));
    let pooled = tape.matmul(wide, stack)?;
    let user = tape.affine(user_emb, user_w, user_b)?;
    Ok(TinOutput {
        rep: tape.add(pooled, user)?,
        attention: alpha,
    })
}

/// Gate override for tests of the tower.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOverride {
    Learned,
    Fixed(f64),
}

pub struct TowerLayer {
    pub w: Var,
    pub b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

pub struct TowerOutput {
    pub hidden: Var,
    /// `Σ` of gate activations divided by batch rows, over all layers.
    pub gate_l1: Var,
    /// Fraction of gate entries below the threshold.
    pub sparsity: f64,
}

/// AdaSparse tower: each hidden layer's ReLU output is multiplied by a
/// domain gate `sigmoid(W x_dom + b)`; in infer mode entries below `tau`
/// are zeroed.
pub fn tower_forward(
    tape: &mut Tape,
    input: Var,
    x_dom: Var,
    layers: &[TowerLayer],
    tau: f64,
    mode: Mode,
    gate: GateOverride,
) -> Result<TowerOutput> {
    let rows = tape.value(input).rows() as f64;
    let mut h = input;
    let mut l1 = tape.scalar(0.0);
    let (mut below, mut total) = (0usize, 0usize);
    for layer in layers {
        let a = tape.affine(h, layer.w, layer.b)?;
        let a = tape.relu(a);
        let g = match gate {
            GateOverride::Learned => {
                let g = tape.affine(x_dom, layer.gate_w, layer.gate_b)?;
                tape.sigmoid(g)
            }
            GateOverride::Fixed(v) => {
                let shape = tape.value(a).shape().to_vec();
                tape.constant(Tensor::filled(&shape, v))
            }
        };
        let gv = tape.value(g).values().to_vec();
        below += gv.iter().filter(|&&x| x < tau).count();
        total += gv.len();
        let s = tape.sum(g);
        let s = tape.scale(s, 1.0 / rows);
        l1 = tape.add(l1, s)?;
        let g_eff = if mode == Mode::Infer {
            let keep: Vec<f64> = gv.iter().map(|&x| if x < tau { 0.0 } else { 1.0 }).collect();
            let keep = tape.constant(Tensor::raw(tape.value(g).shape().to_vec(), keep));
            tape.mul(g, keep)?
        } else {
            g
        };
        h = tape.mul(a, g_eff)?;
    }
    Ok(TowerOutput {
        hidden: h,
        gate_l1: l1,
        sparsity: if total == 0 { 0.0 } else { below as f64 / total as f64 },
    })
}
