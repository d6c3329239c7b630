//! Subcommand implementations over the on-disk artifact layout.
//!
//! Every stage reads its prerequisites from `output_dir`, writes new files
//! under its own subdirectory, and stamps them with seed and config hash.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, Cardinalities, Dataset, Splits};
use crate::error::{Error, Result};
use crate::graph::{self, encoder, Embeddings};
use crate::horizon::Horizon;
use crate::io_util::{self, fmt_f64, ArtifactMeta};
use crate::metrics::experiments::{self, AucRun, CorrVariant, DropCell, DropVariant};
use crate::metrics::{self, HorizonMetrics};
use crate::model::{self, FieldSchema, Model};
use crate::pareto::train::{plan_runs, select_best, selection_score, Combiner, RunPlan};
use crate::pareto::{conflict, step_log_csv, StepLog, WeightVector};
use crate::rng;

pub const DATA_DIR: &str = "data";
pub const GRL_DIR: &str = "grl";
pub const TRAIN_DIR: &str = "train";
pub const SEARCH_DIR: &str = "search";
pub const EVAL_DIR: &str = "eval";
pub const LABEL_DROP_DIR: &str = "label_drop";
pub const SEED_CORR_DIR: &str = "seed_correlation";
pub const CONFLICT_DIR: &str = "conflict";
pub const STABILITY_DIR: &str = "stability";

pub const STEP_LOG_FILE: &str = "step_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const SELECTION_FILE: &str = "selection.json";
pub const SELECTOR: &str = "mean_minus_std_valid_n_gini";

/// Resolved configuration plus execution settings.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub workers: usize,
}

impl Context {
    pub fn new(cfg: RunConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            workers: workers.max(1),
        })
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.cfg.seed, self.cfg.hash())
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.cfg.output_dir.join(sub)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))
    }

    fn write(&self, sub: &str, file: &str, content: &str) -> Result<PathBuf> {
        let p = self.dir(sub).join(file);
        io_util::write_text(&p, content)?;
        Ok(p)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn generate_data(ctx: &Context) -> Result<Dataset> {
    let ds = data::generate_dataset(&ctx.cfg.data, ctx.cfg.seed)?;
    ds.write(&ctx.dir(DATA_DIR), &ctx.meta(), ctx.cfg.data.export_oracle)?;
    Ok(ds)
}

/// Dataset from `data/` with its seeded split.
pub fn load_data(ctx: &Context) -> Result<(Dataset, Splits)> {
    let dir = ctx.dir(DATA_DIR);
    for f in [data::USERS_FILE, data::GAMES_FILE, data::EVENTS_FILE, data::SAMPLES_FILE] {
        require(&dir.join(f))?;
    }
    let (_, ds) = Dataset::read(&dir)?;
    let d = &ctx.cfg.data;
    if ds.users.len() != d.n_users || ds.games.len() != d.n_games {
        return Err(Error::Config(format!(
            "data.n_users/n_games = {}/{} but {} holds {}/{}",
            d.n_users,
            d.n_games,
            dir.display(),
            ds.users.len(),
            ds.games.len()
        )));
    }
    let splits = data::split_dataset(&ds.samples, d.split_ratios, ctx.cfg.seed)?;
    Ok((ds, splits))
}

fn cardinalities(ctx: &Context) -> Cardinalities {
    Cardinalities::from_config(&ctx.cfg.data)
}

/// Masked-autoencoder pretraining; returns embeddings and the loss trace.
pub fn compute_embeddings(ctx: &Context, ds: &Dataset) -> Result<(Embeddings, encoder::GrlTraining)> {
    let card = cardinalities(ctx);
    let (ug, gg) = graph::build_meta_path_graphs(&ds.events, &ds.users, &ds.games, &card)?;
    let trained = encoder::train_grl(&[ug.clone(), gg.clone()], &ctx.cfg.grl, ctx.cfg.seed)?;
    let emb = encoder::embed_all(&trained.params, &ug, &gg)?;
    Ok((emb, trained))
}

pub fn pretrain_graph(ctx: &Context) -> Result<Embeddings> {
    let (ds, _) = load_data(ctx)?;
    let (emb, trained) = compute_embeddings(ctx, &ds)?;
    let meta = ctx.meta();
    graph::export_embeddings(&emb, &ctx.dir(GRL_DIR).join(graph::EMBEDDINGS_FILE), &meta)?;
    let mut trace = meta.csv_comment();
    trace.push_str("epoch,loss\n");
    for (e, l) in trained.trace.iter().enumerate() {
        trace.push_str(&format!("{e},{}\n", fmt_f64(*l)));
    }
    let d = &trained.final_diagnostics;
    trace.push_str(&format!(
        "# l_e={},l_a={},zero_norm_rows={}\n",
        fmt_f64(d.l_e),
        fmt_f64(d.l_a),
        d.zero_norm_rows
    ));
    ctx.write(GRL_DIR, "trace.csv", &trace)?;
    Ok(emb)
}

/// Pretrained embeddings from `grl/`, computed inline when absent.
pub fn embeddings_for(ctx: &Context, ds: &Dataset) -> Result<Option<Embeddings>> {
    if !ctx.cfg.model.use_grl {
        return Ok(None);
    }
    let p = ctx.dir(GRL_DIR).join(graph::EMBEDDINGS_FILE);
    if p.exists() {
        Ok(Some(graph::read_embeddings(&p)?))
    } else {
        Ok(Some(compute_embeddings(ctx, ds)?.0))
    }
}

/// Model initialized from `seed` with heads fit to the `train` labels.
pub fn initial_model(ctx: &Context, ds: &Dataset, train: &[usize], emb: Option<&Embeddings>, seed: u64) -> Result<Model> {
    let m = &ctx.cfg.model;
    let schema = FieldSchema::new(&cardinalities(ctx), m.embed_dim, ctx.cfg.data.behavior_len)?;
    let mut model = Model::init(schema, m, if m.use_grl { emb } else { None }, seed)?;
    let labels: Vec<[f64; 3]> = train.iter().map(|&i| ds.samples[i].labels()).collect();
    model.init_heads_from_labels(&labels)?;
    Ok(model)
}

/// Output of one inner loop.
pub struct RunOutcome {
    pub model: Model,
    pub logs: Vec<StepLog>,
    pub valid: Vec<HorizonMetrics>,
}

pub fn run_inner(
    ctx: &Context,
    ds: &Dataset,
    splits: &Splits,
    init: Model,
    train: &[usize],
    lambda: &WeightVector,
    combiner: Combiner,
    seed: u64,
) -> Result<RunOutcome> {
    let mut pcfg = ctx.cfg.pareto.clone();
    pcfg.combiner = combiner;
    let out = model::train_model(init, ds, train, &pcfg, lambda, seed)?;
    let valid = model::evaluate_split(&out.model, ds, &splits.valid)?;
    Ok(RunOutcome {
        model: out.model,
        logs: out.logs,
        valid,
    })
}

/// Single-λ training at the uniform preference.
pub fn train(ctx: &Context) -> Result<RunOutcome> {
    let (ds, splits) = load_data(ctx)?;
    let emb = embeddings_for(ctx, &ds)?;
    let init = initial_model(ctx, &ds, &splits.train, emb.as_ref(), ctx.cfg.seed)?;
    let out = run_inner(
        ctx,
        &ds,
        &splits,
        init,
        &splits.train,
        &WeightVector::uniform(),
        ctx.cfg.pareto.combiner,
        rng::stream_seed(ctx.cfg.seed, "train"),
    )?;
    let meta = ctx.meta();
    model::save_model(&out.model, &ctx.dir(TRAIN_DIR).join(model::MODEL_FILE), &meta)?;
    ctx.write(TRAIN_DIR, STEP_LOG_FILE, &step_log_csv(&out.logs, &meta.csv_comment()))?;
    ctx.write(TRAIN_DIR, METRICS_FILE, &metrics::metrics_csv(&out.valid, &meta.csv_comment()))?;
    Ok(out)
}

/// One outer-loop record of `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoRunResult {
    pub run: usize,
    pub seed: u64,
    pub u: f64,
    pub v: f64,
    pub lambda: WeightVector,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub valid_metrics: Vec<HorizonMetrics>,
    pub score: Option<f64>,
    /// Relative to `output_dir`.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub selector: String,
    pub best_run: usize,
    pub score: f64,
    pub checkpoint: String,
}

/// Replays F* selection from persisted run records.
pub fn select_from_runs(runs: &[ParetoRunResult]) -> Option<usize> {
    let scores: Vec<Option<f64>> = runs.iter().map(|r| r.score).collect();
    select_best(&scores).map(|i| runs[i].run)
}

fn run_dir(k: usize) -> String {
    format!("{SEARCH_DIR}/run-{k}")
}

/// Full outer loop: K preference vectors from one shared initialization.
pub fn search(ctx: &Context) -> Result<(Vec<ParetoRunResult>, Selection)> {
    let (ds, splits) = load_data(ctx)?;
    let emb = embeddings_for(ctx, &ds)?;
    let init = initial_model(ctx, &ds, &splits.train, emb.as_ref(), ctx.cfg.seed)?;
    let plans = plan_runs(ctx.cfg.pareto.runs, ctx.cfg.seed)?;
    let meta = ctx.meta();
    let one = |p: &RunPlan| -> Result<ParetoRunResult> {
        let out = run_inner(ctx, &ds, &splits, init.clone(), &splits.train, &p.lambda, ctx.cfg.pareto.combiner, p.seed)?;
        let dir = run_dir(p.run);
        let ck = format!("{dir}/{}", model::MODEL_FILE);
        model::save_model(&out.model, &ctx.cfg.output_dir.join(&ck), &meta)?;
        ctx.write(&dir, STEP_LOG_FILE, &step_log_csv(&out.logs, &meta.csv_comment()))?;
        ctx.write(&dir, METRICS_FILE, &metrics::metrics_csv(&out.valid, &meta.csv_comment()))?;
        let ng: Vec<f64> = out.valid.iter().map(|m| m.n_gini).collect();
        Ok(ParetoRunResult {
            run: p.run,
            seed: p.seed,
            u: p.u,
            v: p.v,
            lambda: p.lambda,
            status: "ok".into(),
            error: None,
            valid_metrics: out.valid,
            score: Some(selection_score(&ng)),
            checkpoint: Some(ck),
        })
    };
    let results: Vec<ParetoRunResult> = ctx.pool()?.install(|| {
        plans
            .par_iter()
            .map(|p| {
                one(p).unwrap_or_else(|e| ParetoRunResult {
                    run: p.run,
                    seed: p.seed,
                    u: p.u,
                    v: p.v,
                    lambda: p.lambda,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    valid_metrics: Vec::new(),
                    score: None,
                    checkpoint: None,
                })
            })
            .collect()
    });
    io_util::write_jsonl(&ctx.dir(SEARCH_DIR).join(RUNS_FILE), Some(&meta), &results)?;
    let best = select_from_runs(&results).ok_or_else(|| {
        let errs: Vec<String> = results.iter().filter_map(|r| r.error.clone()).collect();
        Error::Numeric(format!("every search run failed: {}", errs.join("; ")))
    })?;
    let r = &results[best];
    let sel = Selection {
        selector: SELECTOR.into(),
        best_run: best,
        score: r.score.unwrap_or(f64::NAN),
        checkpoint: r.checkpoint.clone().unwrap_or_default(),
    };
    io_util::write_json(&ctx.dir(SEARCH_DIR).join(SELECTION_FILE), &sel)?;
    let best_log = io_util::read_text(&ctx.dir(&run_dir(best)).join(STEP_LOG_FILE))?;
    ctx.write(SEARCH_DIR, STEP_LOG_FILE, &best_log)?;
    Ok((results, sel))
}

/// Checkpoint chosen by `search`, else the `train` checkpoint.
pub fn selected_checkpoint(ctx: &Context) -> Result<PathBuf> {
    let sel = ctx.dir(SEARCH_DIR).join(SELECTION_FILE);
    if sel.exists() {
        let s: Selection = io_util::read_json(&sel)?;
        let p = ctx.cfg.output_dir.join(&s.checkpoint);
        require(&p)?;
        return Ok(p);
    }
    let p = ctx.dir(TRAIN_DIR).join(model::MODEL_FILE);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(sel))
    }
}

/// Test-split metrics and per-sample predictions of the selected model.
pub fn evaluate(ctx: &Context) -> Result<Vec<HorizonMetrics>> {
    let ck = selected_checkpoint(ctx)?;
    let (ds, splits) = load_data(ctx)?;
    let m = model::load_model(&ck)?.model;
    let recs = model::eval_records(&m, &ds, &splits.test)?;
    let rows: Vec<HorizonMetrics> = Horizon::ALL
        .iter()
        .map(|&h| metrics::evaluate_horizon(h, &recs[h.index()]))
        .collect::<Result<_>>()?;
    let meta = ctx.meta();
    ctx.write(EVAL_DIR, METRICS_FILE, &metrics::metrics_csv(&rows, &meta.csv_comment()))?;
    let mut pred = meta.csv_comment();
    pred.push_str("sample,user_id,game_id,domain_id,y3,y7,y30,pred3,pred7,pred30,p_buy3,p_buy7,p_buy30\n");
    for (k, &i) in splits.test.iter().enumerate() {
        let s = &ds.samples[i];
        let col = |f: &dyn Fn(&metrics::EvalRecord) -> f64| {
            (0..3).map(|h| fmt_f64(f(&recs[h][k]))).collect::<Vec<_>>().join(",")
        };
        pred.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            s.user_id,
            s.game_id,
            s.domain_id,
            col(&|r| r.y_true),
            col(&|r| r.y_pred),
            col(&|r| r.p_buy)
        ));
    }
    ctx.write(EVAL_DIR, "predictions.csv", &pred)?;
    Ok(rows)
}

/// Label-drop robustness: retrain with and without GRL on shared subsets.
pub fn label_drop(ctx: &Context) -> Result<(Vec<DropCell>, Vec<experiments::Degradation>)> {
    let (ds, splits) = load_data(ctx)?;
    let emb = match embeddings_for(&variant_ctx(ctx, true), &ds)? {
        Some(e) => e,
        None => unreachable!("GRL variant always loads embeddings"),
    };
    let ratios = experiments::with_baseline(&ctx.cfg.eval.label_drop_ratios)?;
    let cells: Vec<(f64, DropVariant)> = ratios
        .iter()
        .flat_map(|&r| DropVariant::ALL.into_iter().map(move |v| (r, v)))
        .collect();
    let seed = ctx.cfg.seed;
    let results: Vec<Result<DropCell>> = ctx.pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(ratio, variant)| {
                let vctx = variant_ctx(ctx, variant == DropVariant::Full);
                let kept = experiments::kept_indices(&splits.train, ratio, seed)?;
                let init = initial_model(&vctx, &ds, &kept, Some(&emb), seed)?;
                let out = model::train_model(
                    init,
                    &ds,
                    &kept,
                    &vctx.cfg.pareto,
                    &WeightVector::uniform(),
                    rng::stream_seed(seed, "train"),
                )?;
                Ok(DropCell {
                    ratio,
                    variant,
                    metrics: model::evaluate_split(&out.model, &ds, &splits.test)?,
                })
            })
            .collect()
    });
    let cells: Vec<DropCell> = results.into_iter().collect::<Result<_>>()?;
    let deg = experiments::degradations(&cells)?;
    let meta = ctx.meta();
    ctx.write(LABEL_DROP_DIR, "label_drop.csv", &experiments::label_drop_csv(&cells, &meta.csv_comment()))?;
    ctx.write(LABEL_DROP_DIR, "degradation.csv", &experiments::degradation_csv(&deg, &meta.csv_comment()))?;
    Ok((cells, deg))
}

fn variant_ctx(ctx: &Context, use_grl: bool) -> Context {
    let mut c = ctx.clone();
    c.cfg.model.use_grl = use_grl;
    c
}

/// Seed correlation of test-AUC vectors with and without Pareto combination.
pub fn seed_correlation(ctx: &Context) -> Result<(Vec<AucRun>, experiments::CorrelationMatrix)> {
    let (ds, splits) = load_data(ctx)?;
    let emb = embeddings_for(ctx, &ds)?;
    let n = ctx.cfg.eval.seed_runs;
    if n < 2 {
        return Err(Error::Config("eval.seed_runs: must be >= 2".into()));
    }
    let cells: Vec<(CorrVariant, usize)> = CorrVariant::ALL
        .into_iter()
        .flat_map(|v| (0..n).map(move |r| (v, r)))
        .collect();
    let results: Vec<Result<AucRun>> = ctx.pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(variant, run)| {
                let seed = rng::stream_seed(ctx.cfg.seed, &format!("seed-run-{run}"));
                let combiner = match variant {
                    CorrVariant::Pareto => Combiner::Pareto,
                    CorrVariant::NoPareto => Combiner::Equal,
                };
                let init = initial_model(ctx, &ds, &splits.train, emb.as_ref(), seed)?;
                let mut pcfg = ctx.cfg.pareto.clone();
                pcfg.combiner = combiner;
                let out = model::train_model(init, &ds, &splits.train, &pcfg, &WeightVector::uniform(), seed)?;
                let m = model::evaluate_split(&out.model, &ds, &splits.test)?;
                Ok(AucRun {
                    variant,
                    run,
                    seed,
                    auc: [m[0].auc, m[1].auc, m[2].auc],
                })
            })
            .collect()
    });
    let runs: Vec<AucRun> = results.into_iter().collect::<Result<_>>()?;
    let m = experiments::correlation_matrix(&runs);
    let meta = ctx.meta();
    ctx.write(SEED_CORR_DIR, "auc_vectors.csv", &experiments::auc_vectors_csv(&runs, &meta.csv_comment()))?;
    ctx.write(SEED_CORR_DIR, "correlation.csv", &experiments::correlation_csv(&runs, &m, &meta.csv_comment()))?;
    Ok((runs, m))
}

/// Step log of the selected search run, else of `train`.
pub fn latest_step_log(ctx: &Context) -> Result<PathBuf> {
    let s = ctx.dir(SEARCH_DIR).join(STEP_LOG_FILE);
    if s.exists() {
        return Ok(s);
    }
    let t = ctx.dir(TRAIN_DIR).join(STEP_LOG_FILE);
    if t.exists() {
        Ok(t)
    } else {
        Err(Error::MissingArtifact(t))
    }
}

pub fn conflict_report(ctx: &Context, step_log: Option<&Path>) -> Result<conflict::ConflictSummary> {
    let path = match step_log {
        Some(p) => {
            require(p)?;
            p.to_path_buf()
        }
        None => latest_step_log(ctx)?,
    };
    let logs = crate::pareto::parse_step_log_csv(&io_util::read_text(&path)?)?;
    let summary = conflict::conflict_summary(&logs)?;
    let meta = ctx.meta();
    ctx.write(CONFLICT_DIR, "conflict_report.csv", &conflict::conflict_report_csv(&logs, &meta.csv_comment())?)?;
    Ok(summary)
}

/// Day-over-day stability of summed predictions between two checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub horizon: Horizon,
    pub sum_day1: f64,
    pub sum_day2: f64,
    pub diff: f64,
}

/// Compares two checkpoints on one sample file (default: the test split).
pub fn stability(ctx: &Context, day1: &Path, day2: &Path, samples: Option<&Path>) -> Result<Vec<StabilityRow>> {
    require(day1)?;
    require(day2)?;
    let (ds, splits) = load_data(ctx)?;
    let (ds, idx) = match samples {
        Some(p) => {
            require(p)?;
            let (_, s) = io_util::read_jsonl::<data::LtvSample>(p)?;
            let n = s.len();
            (
                Dataset {
                    samples: s,
                    ..ds
                },
                (0..n).collect::<Vec<_>>(),
            )
        }
        None => (ds, splits.test.clone()),
    };
    let m1 = model::load_model(day1)?.model;
    let m2 = model::load_model(day2)?.model;
    let r1 = model::eval_records(&m1, &ds, &idx)?;
    let r2 = model::eval_records(&m2, &ds, &idx)?;
    let mut rows = Vec::new();
    for h in Horizon::ALL {
        let p1: Vec<f64> = r1[h.index()].iter().map(|r| r.y_pred).collect();
        let p2: Vec<f64> = r2[h.index()].iter().map(|r| r.y_pred).collect();
        rows.push(StabilityRow {
            horizon: h,
            sum_day1: p1.iter().sum(),
            sum_day2: p2.iter().sum(),
            diff: metrics::stability_diff(&p1, &p2)?,
        });
    }
    let mut out = ctx.meta().csv_comment();
    out.push_str("horizon,sum_day1,sum_day2,diff\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.horizon,
            fmt_f64(r.sum_day1),
            fmt_f64(r.sum_day2),
            fmt_f64(r.diff)
        ));
    }
    ctx.write(STABILITY_DIR, "stability.csv", &out)?;
    Ok(rows)
}
