use serde::Serialize;

use super::{apply_mask, Embeddings, MaskPlan, MetaPathGraph};
use crate::config::GrlConfig;
use crate::error::{Error, Result};
use crate::grad::{uniform_tensor, Bound, ParamStore, Tape, Tensor, Var};
use crate::rng;

fn pname(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}

fn glorot(r: &mut rng::StreamRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    uniform_tensor(r, &[rows, cols], scale * (3.0 / cols as f64).sqrt())
}

/// Encoder and attribute decoder parameters for each graph, keyed by the
/// meta-path prefix. Biases start small but nonzero so that no reconstructed
/// row sits exactly at the zero-norm boundary.
pub fn init_graph_params(graphs: &[MetaPathGraph], cfg: &GrlConfig, seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, "grl-init");
    let mut p = ParamStore::new();
    for g in graphs {
        let pre = g.meta_path.prefix();
        let d = g.d_attr();
        p.insert(pname(pre, "enc1.w"), glorot(&mut r, cfg.hidden, 2 * d, cfg.init_scale));
        p.insert(pname(pre, "enc1.b"), uniform_tensor(&mut r, &[cfg.hidden], 0.1 * cfg.init_scale));
        p.insert(pname(pre, "enc2.w"), glorot(&mut r, cfg.d_emb, 2 * cfg.hidden, cfg.init_scale));
        p.insert(pname(pre, "enc2.b"), uniform_tensor(&mut r, &[cfg.d_emb], 0.1 * cfg.init_scale));
        p.insert(pname(pre, "dec.w"), glorot(&mut r, d, cfg.d_emb, cfg.init_scale));
        p.insert(pname(pre, "dec.b"), uniform_tensor(&mut r, &[d], 0.1 * cfg.init_scale));
    }
    p
}

/// Row-normalized adjacency `D⁻¹A`; isolated nodes get a zero row.
fn mean_operator(g: &MetaPathGraph) -> Tensor {
    let n = g.n;
    let mut v = g.adjacency.clone();
    for row in v.chunks_mut(n.max(1)) {
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|x| *x /= deg);
        }
    }
    Tensor::raw(vec![n, n], v)
}

#[derive(Clone, Copy, Debug)]
pub struct GrlOutput {
    pub embeddings: Var,
    pub a_hat: Var,
    pub x_hat: Var,
}

/// Encodes `graph` and decodes adjacency (`HHᵀ`, zero diagonal) and attributes.
pub fn grl_forward(tape: &mut Tape, b: &Bound, graph: &MetaPathGraph) -> Result<GrlOutput> {
    let pre = graph.meta_path.prefix();
    let n = graph.n;
    let x = tape.constant(graph.attributes.clone());
    let p = tape.constant(mean_operator(graph));
    let px = tape.matmul(p, x)?;
    let in1 = tape.concat(&[x, px], 1)?;
    let h1 = tape.affine(in1, b.get(&pname(pre, "enc1.w"))?, b.get(&pname(pre, "enc1.b"))?)?;
    let h1 = tape.tanh(h1);
    let ph1 = tape.matmul(p, h1)?;
    let in2 = tape.concat(&[h1, ph1], 1)?;
    let h = tape.affine(in2, b.get(&pname(pre, "enc2.w"))?, b.get(&pname(pre, "enc2.b"))?)?;
    let gram = tape.matmul_nt(h, h)?;
    let mut off = vec![1.0; n * n];
    for i in 0..n {
        off[i * n + i] = 0.0;
    }
    let off = tape.constant(Tensor::raw(vec![n, n], off));
    let a_hat = tape.mul(gram, off)?;
    let x_hat = tape.affine(h, b.get(&pname(pre, "dec.w"))?, b.get(&pname(pre, "dec.b"))?)?;
    Ok(GrlOutput {
        embeddings: h,
        a_hat,
        x_hat,
    })
}

/// Reconstruction targets and outputs for one meta path.
pub struct PathTerms<'a> {
    /// Unmasked adjacency rows.
    pub truth_adj: &'a Tensor,
    pub a_hat: Var,
    /// Unmasked attribute rows.
    pub truth_attr: &'a Tensor,
    pub x_hat: Var,
    pub masked_nodes: &'a [usize],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GrlDiagnostics {
    pub l_e: f64,
    pub l_a: f64,
    /// Compared row pairs where either side had zero norm.
    pub zero_norm_rows: usize,
}

fn norms(t: &Tensor, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// `Σ_v (1 − cos(truth_v, pred_v))^ξ` over `rows`. Zero-norm pairs count 1.
fn cosine_penalty(
    tape: &mut Tape,
    truth: &Tensor,
    pred: Var,
    rows: &[usize],
    xi: f64,
    zero: &mut usize,
) -> Result<Option<Var>> {
    if truth.shape() != tape.value(pred).shape() {
        return Err(Error::shape(
            "grl_loss",
            format!("truth {:?} vs reconstruction {:?}", truth.shape(), tape.value(pred).shape()),
        ));
    }
    let tn = norms(truth, rows);
    let pn = norms(tape.value(pred), rows);
    let mut good = Vec::new();
    let mut good_norm = Vec::new();
    for (k, &v) in rows.iter().enumerate() {
        if tn[k] > 0.0 && pn[k] > 0.0 {
            good.push(v);
            good_norm.push(tn[k]);
        } else {
            *zero += 1;
        }
    }
    let bad = (rows.len() - good.len()) as f64;
    if good.is_empty() {
        return Ok(if bad > 0.0 { Some(tape.scalar(bad)) } else { None });
    }
    let c = truth.cols();
    let mut tv = Vec::with_capacity(good.len() * c);
    for &v in &good {
        tv.extend_from_slice(truth.row(v));
    }
    let t = tape.constant(Tensor::raw(vec![good.len(), c], tv));
    let tnorm = tape.constant(Tensor::raw(vec![good.len()], good_norm));
    let p = tape.gather_rows(pred, &good)?;
    let dot = tape.row_dot(p, t)?;
    let sq = tape.square(p);
    let sq = tape.row_sum(sq)?;
    let pnorm = tape.sqrt(sq)?;
    let denom = tape.mul(pnorm, tnorm)?;
    let cos = tape.div(dot, denom)?;
    let dist = tape.neg(cos);
    let dist = tape.add_scalar(dist, 1.0);
    let pen = tape.powf(dist, xi)?;
    let s = tape.sum(pen);
    Ok(Some(tape.add_scalar(s, bad)))
}

/// `L = l_a + ζ·l_e`: `l_e` averages each path's mean-over-nodes adjacency
/// penalty, `l_a` is the mean penalty over all masked attribute rows.
pub fn grl_loss(
    tape: &mut Tape,
    paths: &[PathTerms<'_>],
    xi_e: f64,
    xi_a: f64,
    zeta: f64,
) -> Result<(Var, GrlDiagnostics)> {
    if !(xi_e >= 1.0 && xi_a >= 1.0 && zeta >= 0.0) {
        return Err(Error::invalid("need xi_e, xi_a >= 1 and zeta >= 0"));
    }
    if paths.is_empty() {
        return Err(Error::invalid("no meta paths"));
    }
    let mut zero = 0;
    let mut edge_terms = Vec::new();
    for p in paths {
        let rows: Vec<usize> = (0..p.truth_adj.rows()).collect();
        if let Some(s) = cosine_penalty(tape, p.truth_adj, p.a_hat, &rows, xi_e, &mut zero)? {
            edge_terms.push(tape.scale(s, 1.0 / (rows.len() as f64 * paths.len() as f64)));
        }
    }
    let masked: usize = paths.iter().map(|p| p.masked_nodes.len()).sum();
    let mut attr_terms = Vec::new();
    for p in paths {
        if let Some(s) = cosine_penalty(tape, p.truth_attr, p.x_hat, p.masked_nodes, xi_a, &mut zero)? {
            attr_terms.push(tape.scale(s, 1.0 / masked as f64));
        }
    }
    let total = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
        let mut acc = tape.scalar(0.0);
        for &t in terms {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    };
    let l_e = total(tape, &edge_terms)?;
    let l_a = total(tape, &attr_terms)?;
    let weighted = tape.scale(l_e, zeta);
    let loss = tape.add(l_a, weighted)?;
    let diag = GrlDiagnostics {
        l_e: tape.value(l_e).values()[0],
        l_a: tape.value(l_a).values()[0],
        zero_norm_rows: zero,
    };
    Ok((loss, diag))
}

/// Result of pretraining.
#[derive(Clone, Debug)]
pub struct GrlTraining {
    pub params: ParamStore,
    /// Loss before each update, then the final loss.
    pub trace: Vec<f64>,
    pub final_diagnostics: GrlDiagnostics,
}

fn masked_loss(
    params: &ParamStore,
    graphs: &[MetaPathGraph],
    masked: &[(MetaPathGraph, MaskPlan)],
    truths: &[Tensor],
    cfg: &GrlConfig,
) -> Result<(Tape, Var, crate::grad::Bound, GrlDiagnostics)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let mut outs = Vec::new();
    for (m, _) in masked {
        outs.push(grl_forward(&mut tape, &b, m)?);
    }
    let terms: Vec<PathTerms> = graphs
        .iter()
        .zip(masked)
        .zip(&outs)
        .zip(truths)
        .map(|(((g, (_, plan)), o), t)| PathTerms {
            truth_adj: t,
            a_hat: o.a_hat,
            truth_attr: &g.attributes,
            x_hat: o.x_hat,
            masked_nodes: &plan.masked_nodes,
        })
        .collect();
    let (loss, diag) = grl_loss(&mut tape, &terms, cfg.xi_e, cfg.xi_a, cfg.zeta)?;
    Ok((tape, loss, b, diag))
}

/// Full-batch gradient descent on the reconstruction loss of one fixed mask.
pub fn train_grl(graphs: &[MetaPathGraph], cfg: &GrlConfig, seed: u64) -> Result<GrlTraining> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("grl.epochs must be >= 1"));
    }
    let mut params = init_graph_params(graphs, cfg, seed);
    let mut r = rng::stream(seed, "grl-mask");
    let masked: Vec<(MetaPathGraph, MaskPlan)> = graphs
        .iter()
        .map(|g| apply_mask(g, cfg.attr_mask_rate, cfg.edge_mask_rate, &mut r))
        .collect::<Result<_>>()?;
    let truths: Vec<Tensor> = graphs
        .iter()
        .map(|g| Tensor::raw(vec![g.n, g.n], g.adjacency.clone()))
        .collect();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (tape, loss, b, diag) = masked_loss(&params, graphs, &masked, &truths, cfg)?;
        let rec = tape.gradients(loss, &b)?;
        if !rec.loss.is_finite() || !rec.is_finite() {
            return Err(Error::Numeric(format!(
                "graph pretraining diverged at epoch {epoch}: loss {}, l_e {}, l_a {}",
                rec.loss, diag.l_e, diag.l_a
            )));
        }
        trace.push(rec.loss);
        if epoch == cfg.epochs {
            return Ok(GrlTraining {
                params,
                trace,
                final_diagnostics: diag,
            });
        }
        if cfg.learning_rate > 0.0 {
            for (name, g) in &rec.grads {
                let p = params.get_mut(name)?;
                for (x, d) in p.values_mut().iter_mut().zip(g.values()) {
                    *x -= cfg.learning_rate * d;
                }
            }
        }
    }
    unreachable!("loop returns on the last epoch")
}

/// Embeddings of every node from the unmasked graphs, user graph first.
pub fn embed_all(params: &ParamStore, user_graph: &MetaPathGraph, game_graph: &MetaPathGraph) -> Result<Embeddings> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let u = grl_forward(&mut tape, &b, user_graph)?;
    let g = grl_forward(&mut tape, &b, game_graph)?;
    Ok(Embeddings {
        user: tape.value(u.embeddings).clone(),
        game: tape.value(g.embeddings).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cardinalities, GameRecord, InteractionEvent, UserRecord};
    use crate::grad::finite_diff_check;
    use crate::graph::build_meta_path_graphs;

    fn const_terms<'a>(
        tape: &mut Tape,
        a: &'a Tensor,
        ah: &Tensor,
        x: &'a Tensor,
        xh: &Tensor,
        masked: &'a [usize],
    ) -> PathTerms<'a> {
        PathTerms {
            truth_adj: a,
            a_hat: tape.constant(ah.clone()),
            truth_attr: x,
            x_hat: tape.constant(xh.clone()),
            masked_nodes: masked,
        }
    }

    fn loss_of(a: &Tensor, ah: &Tensor, x: &Tensor, xh: &Tensor, masked: &[usize], xi: f64, zeta: f64) -> (f64, GrlDiagnostics) {
        let mut t = Tape::new();
        let terms = const_terms(&mut t, a, ah, x, xh, masked);
        let (l, d) = grl_loss(&mut t, &[terms], xi, xi, zeta).unwrap();
        (t.value(l).values()[0], d)
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let a = Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let (l, _) = loss_of(&a, &a, &x, &x, &[0, 1], 2.0, 0.5);
        assert!(l < 1e-15, "{l}");
    }

    #[test]
    fn half_cosine_gives_quarter() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ah = Tensor::matrix(1, 2, vec![1.0, 3f64.sqrt()]).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (l, _) = loss_of(&a, &ah, &x, &x, &[], 2.0, 1.0);
        assert!((l - 0.25).abs() < 1e-15, "{l}");
    }

    #[test]
    fn orthogonal_reconstruction_gives_two() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ah = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, _) = loss_of(&a, &ah, &a, &ah, &[0, 1], 1.0, 1.0);
        assert!((l - 2.0).abs() < 1e-15, "{l}");
    }

    #[test]
    fn zero_norm_rows_are_counted_at_max_penalty() {
        let a = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let ah = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (l, d) = loss_of(&a, &ah, &x, &x, &[], 2.0, 1.0);
        assert_eq!(d.zero_norm_rows, 2);
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_is_invariant_to_row_rescaling() {
        let mut r = rng::stream(4, "scale");
        let a = uniform_tensor(&mut r, &[4, 4], 1.0);
        let ah = uniform_tensor(&mut r, &[4, 4], 1.0);
        let x = uniform_tensor(&mut r, &[4, 3], 1.0);
        let xh = uniform_tensor(&mut r, &[4, 3], 1.0);
        let base = loss_of(&a, &ah, &x, &xh, &[1, 3], 2.0, 0.5).0;
        let mut scaled = ah.clone();
        for (i, row) in scaled.values_mut().chunks_mut(4).enumerate() {
            row.iter_mut().for_each(|v| *v *= 0.5 + i as f64 * 3.0);
        }
        let after = loss_of(&a, &scaled, &x, &xh, &[1, 3], 2.0, 0.5).0;
        assert!((base - after).abs() < 1e-12);
    }

    pub(crate) fn toy_graphs(n: usize, seed: u64) -> Vec<MetaPathGraph> {
        let mut r = rng::stream(seed, "toy");
        use rand::Rng;
        let users: Vec<UserRecord> = (0..n)
            .map(|i| UserRecord {
                user_id: i,
                age_bucket: r.random_range(0..3),
                gender: r.random_range(0..2),
                city_tier: 0,
                pay_count_bucket: i % 2,
                latent_value: None,
            })
            .collect();
        let games: Vec<GameRecord> = (0..n / 2)
            .map(|i| GameRecord {
                game_id: i,
                category: i % 3,
                battle_type: r.random_range(0..2),
                market_type: 0,
                theme: 0,
                monetization: None,
            })
            .collect();
        let events: Vec<InteractionEvent> = (0..n * 3)
            .map(|k| {
                let u = k % n;
                InteractionEvent {
                    user_id: u,
                    game_id: (u % 2 + 2 * r.random_range(0..n / 4)) % (n / 2),
                    day_index: 0,
                    spend: 1.0,
                }
            })
            .collect();
        let card = Cardinalities {
            user: [3, 2, 1, 2],
            game: [3, 2, 1, 1],
            n_users: n,
            n_games: n / 2,
            n_domains: 1,
        };
        let (a, b) = build_meta_path_graphs(&events, &users, &games, &card).unwrap();
        vec![a, b]
    }

    #[test]
    fn zero_parameters_give_zero_adjacency() {
        let graphs = toy_graphs(8, 0);
        let cfg = GrlConfig::default();
        let mut p = init_graph_params(&graphs, &cfg, 0);
        let zeros = vec![0.0; p.size()];
        p.set_flat(&zeros).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let o = grl_forward(&mut t, &b, &graphs[0]).unwrap();
        assert!(t.value(o.a_hat).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let graphs = toy_graphs(10, seed);
            let cfg = GrlConfig {
                hidden: 4,
                d_emb: 3,
                ..GrlConfig::default()
            };
            let params = init_graph_params(&graphs, &cfg, seed);
            let mut r = rng::stream(seed, "fd-mask");
            let masked: Vec<_> = graphs.iter().map(|g| apply_mask(g, 0.3, 0.3, &mut r).unwrap()).collect();
            let truths: Vec<Tensor> = graphs.iter().map(|g| Tensor::raw(vec![g.n, g.n], g.adjacency.clone())).collect();
            let report = finite_diff_check(
                |tape, b| {
                    let outs: Vec<GrlOutput> = masked.iter().map(|(m, _)| grl_forward(tape, b, m)).collect::<Result<_>>()?;
                    let terms: Vec<PathTerms> = (0..2)
                        .map(|k| PathTerms {
                            truth_adj: &truths[k],
                            a_hat: outs[k].a_hat,
                            truth_attr: &graphs[k].attributes,
                            x_hat: outs[k].x_hat,
                            masked_nodes: &masked[k].1.masked_nodes,
                        })
                        .collect();
                    Ok(grl_loss(tape, &terms, 2.0, 2.0, 0.5)?.0)
                },
                &params,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst());
        }
    }

    #[test]
    fn training_halves_the_loss_and_is_deterministic() {
        let graphs = toy_graphs(20, 1);
        let cfg = GrlConfig::default();
        let a = train_grl(&graphs, &cfg, 3).unwrap();
        let first = a.trace[0];
        let last = *a.trace.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        let b = train_grl(&graphs, &cfg, 3).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let graphs = toy_graphs(12, 2);
        let cfg = GrlConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..GrlConfig::default()
        };
        let t = train_grl(&graphs, &cfg, 5).unwrap();
        assert_eq!(t.params, init_graph_params(&graphs, &cfg, 5));
    }
}
