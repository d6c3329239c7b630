//! Property tests of the invariants each module promises.

use proptest::prelude::*;
use rand::Rng;

use ltv_core::config::DataConfig;
use ltv_core::data::{generate_dataset, simulate_funnel, Dataset, FunnelRates, USERS_FILE};
use ltv_core::grad::{backward, uniform_tensor, ParamStore, Tape, Tensor};
use ltv_core::graph::{apply_mask, grl_loss, recover, MetaPath, MetaPathGraph, PathTerms};
use ltv_core::io_util::ArtifactMeta;
use ltv_core::metrics;
use ltv_core::model::blocks::{
    epnet_gate, epnet_modulate, fwfm, tin_encode, tower_forward, BehaviorBatch, GateOverride, Mode, TowerLayer,
};
use ltv_core::pareto::train::{inner_loop, Combiner, InnerConfig, MultiTaskProblem, TaskState};
use ltv_core::pareto::{gram, solve_qp, uniformity_kl, DirectionConfig, WeightVector};
use ltv_core::rng;
use ltv_core::ziln::{self, ZilnParams};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        n_users: 300,
        n_games: 20,
        exposures_per_user: 20,
        ..DataConfig::default()
    }
}

// ------------------------------------------------------------- grad engine

fn mlp_params(seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, "prop-mlp");
    let mut p = ParamStore::new();
    p.insert("x", uniform_tensor(&mut r, &[4, 3], 1.0));
    p.insert("w", uniform_tensor(&mut r, &[5, 3], 1.0));
    p.insert("b", uniform_tensor(&mut r, &[5], 1.0));
    p
}

fn loss_f(t: &mut Tape, b: &ltv_core::grad::Bound) -> ltv_core::Result<ltv_core::grad::Var> {
    let h = t.affine(b.get("x")?, b.get("w")?, b.get("b")?)?;
    let s = t.sigmoid(h);
    Ok(t.sum(s))
}

fn loss_g(t: &mut Tape, b: &ltv_core::grad::Bound) -> ltv_core::Result<ltv_core::grad::Var> {
    let h = t.affine(b.get("x")?, b.get("w")?, b.get("b")?)?;
    let h = t.tanh(h);
    let s = t.square(h);
    t.mean(s)
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn gradient_is_linear(seed in any::<u64>()) {
        let p = mlp_params(seed);
        let gf = backward(loss_f, &p).unwrap();
        let gg = backward(loss_g, &p).unwrap();
        let gs = backward(|t, b| { let f = loss_f(t, b)?; let g = loss_g(t, b)?; t.add(f, g) }, &p).unwrap();
        for (name, s) in &gs.grads {
            for ((a, b), c) in gf.grads[name].values().iter().zip(gg.grads[name].values()).zip(s.values()) {
                prop_assert!((a + b - c).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let p = mlp_params(seed);
        let a = backward(loss_g, &p).unwrap();
        let b = backward(loss_g, &p).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (name, t) in &a.grads {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(t), bits(&b.grads[name]));
        }
    }
}

// ------------------------------------------------------------- synthetic data

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn labels_are_monotone(seed in any::<u64>()) {
        let ds = generate_dataset(&small_data(), seed).unwrap();
        for s in &ds.samples {
            prop_assert!(0.0 <= s.y3 && s.y3 <= s.y7 && s.y7 <= s.y30);
        }
    }

    #[test]
    fn funnel_is_a_subset_chain(
        seed in any::<u64>(),
        click in 0.01f64..=1.0,
        register in 0.01f64..=1.0,
        purchase in 0.01f64..=1.0,
    ) {
        let rates = FunnelRates { click, register, purchase, domain_click_mult: vec![1.0, 3.0] };
        for t in simulate_funnel(50, 5, 2, &rates, 20, seed).unwrap() {
            prop_assert!(!t.purchased || t.registered);
            prop_assert!(!t.registered || t.clicked);
        }
    }

    #[test]
    fn files_are_deterministic_and_hide_latents(seed in any::<u64>(), export in any::<bool>()) {
        let cfg = small_data();
        let meta = ArtifactMeta::new(seed, "h");
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            generate_dataset(&cfg, seed).unwrap().write(d.path(), &meta, export).unwrap();
        }
        for f in ["users.jsonl", "games.jsonl", "events.jsonl", "samples.jsonl"] {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap();
            prop_assert!(a == b, "{} differs", f);
        }
        let users = std::fs::read_to_string(dirs[0].path().join(USERS_FILE)).unwrap();
        let games = std::fs::read_to_string(dirs[0].path().join("games.jsonl")).unwrap();
        prop_assert_eq!(users.contains("latent_value"), export);
        prop_assert_eq!(games.contains("monetization"), export);
        let (_, back) = Dataset::read(dirs[0].path()).unwrap();
        prop_assert_eq!(back.samples.len(), generate_dataset(&cfg, seed).unwrap().samples.len());
    }
}

// ------------------------------------------------------------- graph pretraining

fn random_graph(seed: u64, n: usize) -> MetaPathGraph {
    let mut r = rng::stream(seed, "prop-graph");
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(0.4) {
                let w = r.random_range(1..4) as f64;
                adj[i * n + j] = w;
                adj[j * n + i] = w;
            }
        }
    }
    let attrs: Vec<f64> = (0..n * 4).map(|k| if r.random_range(0..4) == k % 4 { 1.0 } else { 0.0 }).collect();
    MetaPathGraph {
        meta_path: MetaPath::UserGameUser,
        n,
        adjacency: adj,
        attributes: Tensor::new(vec![n, 4], attrs).unwrap(),
    }
}

/// `L_GRL` with both terms over every row, truths and predictions fixed.
fn loss_of(truth_adj: &Tensor, pred_adj: &Tensor, truth_attr: &Tensor, pred_attr: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(pred_adj.clone());
    let x = tape.constant(pred_attr.clone());
    let rows: Vec<usize> = (0..truth_attr.rows()).collect();
    let terms = [PathTerms {
        truth_adj,
        a_hat: a,
        truth_attr,
        x_hat: x,
        masked_nodes: &rows,
    }];
    let (l, _) = grl_loss(&mut tape, &terms, 2.0, 3.0, 0.7).unwrap();
    tape.value(l).values()[0]
}

fn scale_rows(t: &Tensor, s: &[f64]) -> Tensor {
    let c = t.cols();
    let v = t.values().iter().enumerate().map(|(k, x)| x * s[k / c]).collect();
    Tensor::new(t.shape().to_vec(), v).unwrap()
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn grl_loss_is_nonnegative_and_scale_invariant(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng::stream(seed, "prop-grl");
        // strictly positive rows keep every norm nonzero
        let pos = |r: &mut rng::StreamRng, shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| r.random_range(0.1..1.0)).collect()).unwrap()
        };
        let ta = pos(&mut r, &[n, n]);
        let tx = pos(&mut r, &[n, 4]);
        let pa = uniform_tensor(&mut r, &[n, n], 1.0);
        let px = uniform_tensor(&mut r, &[n, 4], 1.0);
        let l = loss_of(&ta, &pa, &tx, &px);
        prop_assert!(l >= 0.0);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let l2 = loss_of(&ta, &scale_rows(&pa, &s), &tx, &scale_rows(&px, &s));
        prop_assert!((l - l2).abs() <= 1e-10 * (1.0 + l.abs()), "{} vs {}", l, l2);
        // positively proportional reconstructions cost nothing
        let l0 = loss_of(&ta, &scale_rows(&ta, &s), &tx, &scale_rows(&tx, &s));
        prop_assert!(l0.abs() <= 1e-12, "{}", l0);
    }

    #[test]
    fn masking_is_recoverable(seed in any::<u64>(), n in 2usize..12, ar in 0.0f64..1.0, er in 0.0f64..1.0) {
        let g = random_graph(seed, n);
        let mut r = rng::stream(seed, "prop-mask");
        let (masked, plan) = apply_mask(&g, ar, er, &mut r).unwrap();
        prop_assert_eq!(recover(&masked, &plan), g);
    }
}

// ------------------------------------------------------------- backbone

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn epnet_gate_range_and_flattening(seed in any::<u64>(), scale in 0.1f64..3.0) {
        let mut r = rng::stream(seed, "prop-epnet");
        let mut t = Tape::new();
        let dom = t.constant(uniform_tensor(&mut r, &[5, 3], scale));
        let w1 = t.constant(uniform_tensor(&mut r, &[4, 3], scale));
        let b1 = t.constant(uniform_tensor(&mut r, &[4], scale));
        let w2 = t.constant(uniform_tensor(&mut r, &[2, 4], scale));
        let b2 = t.constant(uniform_tensor(&mut r, &[2], scale));
        let x = t.constant(uniform_tensor(&mut r, &[5, 6], 1.0));
        let a = epnet_gate(&mut t, dom, w1, b1, w2, b2).unwrap();
        prop_assert!(t.value(a).values().iter().all(|&v| v > 0.0 && v < 2.0));
        let z = epnet_modulate(&mut t, x, a).unwrap();
        let (xv, av, zv) = (t.value(x).clone(), t.value(a).clone(), t.value(z).clone());
        for row in 0..5 {
            for i in 0..3 {
                for j in 0..2 {
                    prop_assert_eq!(zv.get2(row, i * 2 + j), xv.get2(row, i * 2 + j) * av.get2(row, j));
                }
            }
        }
    }

    #[test]
    fn tin_attention_is_a_distribution(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop-tin");
        let l = 4;
        let seqs: Vec<Vec<(usize, usize)>> = (0..6)
            .map(|_| {
                let k = r.random_range(0..=l);
                (0..k).map(|i| (r.random_range(0..5), i + 1)).collect()
            })
            .collect();
        let refs: Vec<&[(usize, usize)]> = seqs.iter().map(|s| s.as_slice()).collect();
        let beh = BehaviorBatch::new(&refs, l, 5).unwrap();
        let mut t = Tape::new();
        let game = t.constant(uniform_tensor(&mut r, &[6, 3], 2.0));
        let rank = t.constant(uniform_tensor(&mut r, &[l, 3], 1.0));
        let user = t.constant(uniform_tensor(&mut r, &[6, 3], 1.0));
        let w = t.constant(uniform_tensor(&mut r, &[3, 3], 1.0));
        let b = t.constant(uniform_tensor(&mut r, &[3], 1.0));
        let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
        let out = tin_encode(&mut t, game, rank, &targets, user, w, b, &beh).unwrap();
        let att = t.value(out.attention).clone();
        for (row, s) in seqs.iter().enumerate() {
            let w: Vec<f64> = (0..l).map(|k| att.get2(row, k)).collect();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let total: f64 = w.iter().sum();
            if s.is_empty() {
                prop_assert_eq!(total, 0.0);
            } else {
                prop_assert!((total - 1.0).abs() < 1e-12, "{}", total);
            }
        }
    }

    #[test]
    fn sparsity_is_monotone_in_threshold(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop-tower");
        let mut p = ParamStore::new();
        p.insert("x", uniform_tensor(&mut r, &[8, 4], 1.0));
        p.insert("dom", uniform_tensor(&mut r, &[8, 2], 1.0));
        for i in 0..2 {
            p.insert(format!("l{i}.w"), uniform_tensor(&mut r, &[4, 4], 1.0));
            p.insert(format!("l{i}.b"), uniform_tensor(&mut r, &[4], 0.5));
            p.insert(format!("g{i}.w"), uniform_tensor(&mut r, &[4, 2], 3.0));
            p.insert(format!("g{i}.b"), uniform_tensor(&mut r, &[4], 3.0));
        }
        let mut last = -1.0;
        for tau in [0.0, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let layers: Vec<TowerLayer> = (0..2)
                .map(|i| TowerLayer {
                    w: b.get(&format!("l{i}.w")).unwrap(),
                    b: b.get(&format!("l{i}.b")).unwrap(),
                    gate_w: b.get(&format!("g{i}.w")).unwrap(),
                    gate_b: b.get(&format!("g{i}.b")).unwrap(),
                })
                .collect();
            let out = tower_forward(&mut t, b.get("x").unwrap(), b.get("dom").unwrap(), &layers, tau, Mode::Infer, GateOverride::Learned).unwrap();
            prop_assert!(out.sparsity >= last);
            last = out.sparsity;
        }
    }

    #[test]
    fn fwfm_is_permutation_invariant(seed in any::<u64>(), perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut r = rng::stream(seed, "prop-fwfm");
        let c = 4;
        let fields: Vec<Tensor> = (0..c).map(|_| uniform_tensor(&mut r, &[3, 2], 1.0)).collect();
        let full: Vec<Vec<f64>> = {
            let mut m = vec![vec![0.0; c]; c];
            for i in 0..c {
                for j in i + 1..c {
                    let v = r.random_range(-1.0..1.0);
                    m[i][j] = v;
                    m[j][i] = v;
                }
            }
            m
        };
        let upper = |m: &Vec<Vec<f64>>| {
            let mut v = Vec::new();
            for i in 0..c {
                for j in i + 1..c {
                    v.push(m[i][j]);
                }
            }
            Tensor::vector(v).unwrap()
        };
        let score = |fs: &[Tensor], rv: Tensor| {
            let mut t = Tape::new();
            let vs: Vec<_> = fs.iter().map(|f| t.constant(f.clone())).collect();
            let rr = t.constant(rv);
            let s = fwfm(&mut t, &vs, rr).unwrap();
            let total = t.row_sum(s).unwrap();
            t.value(total).values().to_vec()
        };
        let base = score(&fields, upper(&full));
        let pf: Vec<Tensor> = perm.iter().map(|&k| fields[k].clone()).collect();
        let pm: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| full[perm[i]][perm[j]]).collect()).collect();
        let permuted = score(&pf, upper(&pm));
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------- ZILN

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn expected_value_increases_in_mu(p in -4.0f64..4.0, mu in -3.0f64..3.0, step in 1e-3f64..1.0, s in -2.0f64..2.0) {
        let a = ziln::ziln_predict(&ZilnParams::new(p, mu, s)).expected_value;
        let b = ziln::ziln_predict(&ZilnParams::new(p, mu + step, s)).expected_value;
        prop_assert!(b > a);
    }

    #[test]
    fn nll_is_negative_log_pdf(p in -4.0f64..4.0, mu in -3.0f64..3.0, s in -2.0f64..2.0, y in prop_oneof![Just(0.0), 1e-3f64..50.0]) {
        let z = ZilnParams::new(p, mu, s);
        let pdf = ziln::ziln_pdf(&z, y).unwrap();
        let nll = ziln::ziln_nll(&z, y).unwrap();
        prop_assume!(pdf > 1e-250);
        prop_assert!((nll + pdf.ln()).abs() <= 1e-9 * (1.0 + nll.abs()), "{} vs {}", nll, -pdf.ln());
    }
}

// ------------------------------------------------------------- Pareto

struct Quad {
    x: Vec<f64>,
    centres: [Vec<f64>; 3],
}

impl MultiTaskProblem for Quad {
    fn task_state(&mut self, _step: usize) -> ltv_core::Result<TaskState> {
        let l = [0, 1, 2].map(|j| self.x.iter().zip(&self.centres[j]).map(|(x, c)| (x - c) * (x - c)).sum::<f64>());
        let g = (0..3)
            .map(|j| self.x.iter().zip(&self.centres[j]).map(|(x, c)| 2.0 * (x - c)).collect())
            .collect();
        TaskState::new(l, g)
    }

    fn apply_step(&mut self, d: &[f64], eta: f64) -> ltv_core::Result<()> {
        for (x, d) in self.x.iter_mut().zip(d) {
            *x -= eta * d;
        }
        Ok(())
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn qp_solution_is_feasible(seed in any::<u64>(), n in 1usize..=10, tasks in proptest::sample::subsequence(vec![0usize, 1, 2], 0..=3)) {
        let mut r = rng::stream(seed, "prop-qp");
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let k = gram(&g).unwrap();
        let s = solve_qp(&k, &a, &tasks).unwrap();
        prop_assert!(s.beta.iter().all(|&b| b >= 0.0));
        prop_assert!(s.beta.iter().sum::<f64>() <= 1.0 + 1e-9);
        if !s.relaxed {
            for &j in &tasks {
                let kb: f64 = k[j].iter().zip(&s.beta).map(|(x, y)| x * y).sum();
                prop_assert!(kb >= -1e-9, "{}", kb);
            }
        }
    }

    #[test]
    fn kl_is_zero_iff_uniform_and_scale_free(l in proptest::array::uniform3(0.01f64..10.0), c in 0.01f64..100.0) {
        let w = WeightVector::uniform();
        let lambda = w.as_slice();
        let mu = uniformity_kl(&l, lambda).unwrap();
        let scaled = l.map(|x| x * c);
        prop_assert!((mu - uniformity_kl(&scaled, lambda).unwrap()).abs() <= 1e-12);
        let uniform = l[0] == l[1] && l[1] == l[2];
        prop_assert_eq!(mu == 0.0 || mu < 1e-15, uniform || mu < 1e-15);
        prop_assert!(uniformity_kl(&[l[0]; 3], lambda).unwrap() < 1e-15);
        if !uniform {
            prop_assert!(mu > 0.0);
        }
    }

    #[test]
    fn inner_loop_is_reproducible(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop-loop");
        let mk = |r: &mut rng::StreamRng| -> Vec<f64> { (0..3).map(|_| r.random_range(-1.0..1.0)).collect() };
        let x = mk(&mut r);
        let centres = [mk(&mut r), mk(&mut r), mk(&mut r)];
        let cfg = InnerConfig { steps: 30, eta: 0.05, direction: DirectionConfig::default(), combiner: Combiner::Pareto };
        let w = WeightVector::uniform();
        let a = inner_loop(&mut Quad { x: x.clone(), centres: centres.clone() }, &w, &cfg).unwrap();
        let b = inner_loop(&mut Quad { x, centres }, &w, &cfg).unwrap();
        let bits = |v: &[ltv_core::pareto::StepLog]| ltv_core::pareto::step_log_csv(v, "");
        prop_assert_eq!(bits(&a), bits(&b));
    }
}

// ------------------------------------------------------------- metrics

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn n_gini_depends_only_on_order(seed in any::<u64>(), n in 2usize..40) {
        let mut r = rng::stream(seed, "prop-gini");
        let t: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else if r.random_bool(0.5) { 0.0 } else { r.random_range(0.0..5.0) }).collect();
        prop_assume!(t.iter().any(|&v| v != t[0]));
        let p: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..5.0f64) * 4.0).round() / 4.0).collect();
        let warped: Vec<f64> = p.iter().map(|x| (3.0 * x).exp() + x).collect();
        let a = metrics::n_gini(&t, &p).unwrap();
        let b = metrics::n_gini(&t, &warped).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((metrics::n_gini(&t, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmae_is_scale_free(seed in any::<u64>(), n in 1usize..40, c in 1e-3f64..1e3) {
        let mut r = rng::stream(seed, "prop-nmae");
        let t: Vec<f64> = (0..n).map(|_| r.random_range(0.1..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let a = metrics::nmae(&t, &p).unwrap();
        let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
        let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
        prop_assert!((a - metrics::nmae(&ts, &ps).unwrap()).abs() <= 1e-12 * (1.0 + a));
    }
}
