//! The value model: field embeddings with FwFM pair scores, EPNet gating,
//! Partitioned Norm, TIN-lite behavior encoding, and an AdaSparse tower
//! feeding three zero-inflated lognormal heads (3, 7 and 30 days).

pub mod blocks;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Cardinalities, GameRecord, LtvSample, UserRecord};
use crate::error::{Error, Result};
use crate::grad::{uniform_tensor, Bound, ParamStore, Tape, Tensor, Var};
use crate::graph::Embeddings;
use crate::horizon::Horizon;
use crate::io_util::{self, ArtifactMeta};
use crate::rng;
use crate::ziln::{self, ZilnParams};

pub use blocks::{BehaviorBatch, GateOverride, Mode, PnState};
pub use train::{eval_records, evaluate_split, inner_config, predict_samples, train_model, ModelProblem, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub cardinality: usize,
}

/// Embedded feature columns plus the separate domain field.
///
/// `user_id` and `game_id` reserve their last row for unseen ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<Field>,
    pub domain: Field,
    pub embed_dim: usize,
    pub behavior_len: usize,
}

pub const USER_FIELD: usize = 0;
pub const GAME_FIELD: usize = 1;

impl FieldSchema {
    pub fn new(card: &Cardinalities, embed_dim: usize, behavior_len: usize) -> Result<Self> {
        let f = |name: &str, cardinality: usize| Field {
            name: name.to_string(),
            cardinality,
        };
        let s = Self {
            fields: vec![
                f("user_id", card.n_users + 1),
                f("game_id", card.n_games + 1),
                f("age_bucket", card.user[0]),
                f("gender", card.user[1]),
                f("city_tier", card.user[2]),
                f("pay_count_bucket", card.user[3]),
                f("category", card.game[0]),
                f("battle_type", card.game[1]),
                f("market_type", card.game[2]),
                f("theme", card.game[3]),
            ],
            domain: f("domain_id", card.n_domains),
            embed_dim,
            behavior_len,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.behavior_len == 0 {
            return Err(Error::invalid("embedding width and behavior length must be > 0"));
        }
        if self.fields.iter().chain([&self.domain]).any(|f| f.cardinality == 0) {
            return Err(Error::invalid("field cardinalities must be > 0"));
        }
        Ok(())
    }

    /// Number of embedded feature columns.
    pub fn c(&self) -> usize {
        self.fields.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain.cardinality
    }

    fn table(&self, k: usize) -> String {
        format!("emb.{}", self.fields[k].name)
    }
}

/// Field codes of a batch, one column per field.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub codes: Vec<Vec<usize>>,
    pub domains: Vec<usize>,
    pub behavior: BehaviorBatch,
    pub labels: Vec<[f64; 3]>,
    /// Rows whose user or game id fell back to the default row.
    pub unseen: Vec<bool>,
}

impl EncodedBatch {
    pub fn rows(&self) -> usize {
        self.domains.len()
    }

    pub fn label_column(&self, h: Horizon) -> Vec<f64> {
        self.labels.iter().map(|l| l[h.index()]).collect()
    }
}

pub fn encode_batch(
    schema: &FieldSchema,
    users: &[UserRecord],
    games: &[GameRecord],
    samples: &[&LtvSample],
) -> Result<EncodedBatch> {
    let c = schema.c();
    let default_user = schema.fields[USER_FIELD].cardinality - 1;
    let default_game = schema.fields[GAME_FIELD].cardinality - 1;
    let mut codes = vec![Vec::with_capacity(samples.len()); c];
    let mut domains = Vec::with_capacity(samples.len());
    let mut unseen = Vec::with_capacity(samples.len());
    let mut seqs = Vec::with_capacity(samples.len());
    for s in samples {
        let user = users.get(s.user_id);
        let game = games.get(s.game_id);
        if user.is_none() && s.user_id < default_user || game.is_none() && s.game_id < default_game {
            return Err(Error::invalid(format!("catalog is missing ids of sample {s:?}")));
        }
        let u = if s.user_id < default_user { s.user_id } else { default_user };
        let g = if s.game_id < default_game { s.game_id } else { default_game };
        unseen.push(u == default_user || g == default_game);
        let uc = user.map(|u| u.codes()).unwrap_or([0; 4]);
        let gc = game.map(|g| g.codes()).unwrap_or([0; 4]);
        let row = [u, g, uc[0], uc[1], uc[2], uc[3], gc[0], gc[1], gc[2], gc[3]];
        for (k, &v) in row.iter().enumerate() {
            if v >= schema.fields[k].cardinality {
                return Err(Error::invalid(format!(
                    "code {v} of field {} exceeds cardinality {}",
                    schema.fields[k].name, schema.fields[k].cardinality
                )));
            }
            codes[k].push(v);
        }
        if s.domain_id >= schema.n_domains() {
            return Err(Error::invalid(format!("domain {} out of range", s.domain_id)));
        }
        domains.push(s.domain_id);
        seqs.push(s.behavior.as_slice());
    }
    let clipped: Vec<Vec<(usize, usize)>> = seqs
        .iter()
        .map(|b| b.iter().map(|&(g, r)| (g.min(default_game), r)).collect())
        .collect();
    let refs: Vec<&[(usize, usize)]> = clipped.iter().map(|v| v.as_slice()).collect();
    Ok(EncodedBatch {
        codes,
        domains,
        behavior: BehaviorBatch::new(&refs, schema.behavior_len, default_game)?,
        labels: samples.iter().map(|s| s.labels()).collect(),
        unseen,
    })
}

/// Parameters, running statistics and schema of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub schema: FieldSchema,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub pn: PnState,
}

/// Names of the per-horizon head parameters.
pub fn head_names(h: Horizon) -> [String; 2] {
    [format!("head.{}.w", h.days()), format!("head.{}.b", h.days())]
}

impl Model {
    /// Random initialization; user and game tables come from `grl` when given.
    pub fn init(schema: FieldSchema, config: &ModelConfig, grl: Option<&Embeddings>, seed: u64) -> Result<Self> {
        schema.validate()?;
        let d = schema.embed_dim;
        let c = schema.c();
        let s = config.init_scale;
        let mut r = rng::stream(seed, "model-init");
        let mut p = ParamStore::new();
        for k in 0..c {
            p.insert(schema.table(k), uniform_tensor(&mut r, &[schema.fields[k].cardinality, d], s));
        }
        p.insert("emb.domain_id", uniform_tensor(&mut r, &[schema.n_domains(), d], 1.0));
        p.insert("fwfm.r", uniform_tensor(&mut r, &[blocks::pair_count(c)], s));
        p.insert("gate.w1", uniform_tensor(&mut r, &[d, d], (3.0 / d as f64).sqrt()));
        p.insert("gate.b1", Tensor::zeros(&[d]));
        p.insert("gate.w2", uniform_tensor(&mut r, &[d, d], s));
        p.insert("gate.b2", Tensor::zeros(&[d]));
        let cd = c * d;
        let nd = schema.n_domains();
        p.insert("pn.gamma", Tensor::filled(&[cd], 1.0));
        p.insert("pn.beta", Tensor::zeros(&[cd]));
        p.insert("pn.gamma_k", Tensor::filled(&[nd, cd], 1.0));
        p.insert("pn.beta_k", Tensor::zeros(&[nd, cd]));
        p.insert("tin.rank", uniform_tensor(&mut r, &[schema.behavior_len, d], s));
        p.insert("tin.user_w", uniform_tensor(&mut r, &[d, d], (3.0 / d as f64).sqrt()));
        p.insert("tin.user_b", Tensor::zeros(&[d]));
        let mut width = cd + blocks::pair_count(c) + d;
        for (i, &h) in config.hidden.iter().enumerate() {
            p.insert(format!("tower.l{i}.w"), uniform_tensor(&mut r, &[h, width], (3.0 / width as f64).sqrt()));
            p.insert(format!("tower.l{i}.b"), uniform_tensor(&mut r, &[h], 0.1));
            p.insert(format!("tower.g{i}.w"), uniform_tensor(&mut r, &[h, d], s));
            // gates start mostly open
            p.insert(format!("tower.g{i}.b"), Tensor::filled(&[h], 2.0));
            width = h;
        }
        for h in Horizon::ALL {
            let [w, b] = head_names(h);
            p.insert(w, uniform_tensor(&mut r, &[3, width], s * (3.0 / width as f64).sqrt()));
            p.insert(b, Tensor::zeros(&[3]));
        }
        if let Some(e) = grl {
            for (k, table, n) in [
                (USER_FIELD, &e.user, schema.fields[USER_FIELD].cardinality - 1),
                (GAME_FIELD, &e.game, schema.fields[GAME_FIELD].cardinality - 1),
            ] {
                if table.rows() != n || table.cols() != d {
                    return Err(Error::shape(
                        "model_init",
                        format!("pretrained table {:?} vs expected {n}×{d}", table.shape()),
                    ));
                }
                let mut v = table.values().to_vec();
                // default row: mean of known rows
                for j in 0..d {
                    v.push((0..n).map(|i| table.values()[i * d + j]).sum::<f64>() / n.max(1) as f64);
                }
                p.insert(schema.table(k), Tensor::new(vec![n + 1, d], v)?);
            }
        }
        Ok(Self {
            pn: PnState::new(nd, cd, config.pn_momentum),
            schema,
            config: config.clone(),
            params: p,
        })
    }

    /// Sets head biases to the marginal label fit: zero share, log-mean and
    /// log-spread of positive labels per horizon.
    pub fn init_heads_from_labels(&mut self, labels: &[[f64; 3]]) -> Result<()> {
        for h in Horizon::ALL {
            let y: Vec<f64> = labels.iter().map(|l| l[h.index()]).collect();
            let pos: Vec<f64> = y.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).collect();
            if pos.is_empty() || pos.len() == y.len() {
                continue;
            }
            let pi = 1.0 - pos.len() as f64 / y.len() as f64;
            let mu = pos.iter().sum::<f64>() / pos.len() as f64;
            let sd = (pos.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / pos.len() as f64).sqrt().max(0.1);
            let [_, b] = head_names(h);
            let t = self.params.get_mut(&b)?;
            t.values_mut().copy_from_slice(&[(pi / (1.0 - pi)).ln(), mu, ziln::sigma_raw_for(sd)]);
        }
        Ok(())
    }

    /// Parameter names updated by training.
    pub fn trainable_names(&self) -> Vec<String> {
        let frozen = [self.schema.table(USER_FIELD), self.schema.table(GAME_FIELD)];
        self.params
            .names()
            .filter(|n| !(self.config.freeze_grl && self.config.use_grl && frozen.iter().any(|f| f == n)))
            .map(str::to_string)
            .collect()
    }
}

/// Tape handles of one horizon head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub p_raw: Var,
    pub mu: Var,
    pub sigma_raw: Var,
}

/// Outputs of a batched forward pass.
pub struct ModelOutput {
    pub heads: [HeadVars; 3],
    pub gate_l1: Var,
    pub sparsity: f64,
    pub epnet_gate: Var,
    pub tin_attention: Var,
    pub pn_batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub pn_fallback_domains: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub epnet: GateOverride,
    pub tower: GateOverride,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            epnet: GateOverride::Learned,
            tower: GateOverride::Learned,
        }
    }
}

/// Embed → {FwFM, EPNet} → PN → concat TIN → tower → three heads.
pub fn forward_full(
    tape: &mut Tape,
    b: &Bound,
    model: &Model,
    batch: &EncodedBatch,
    opts: ForwardOptions,
) -> Result<ModelOutput> {
    let schema = &model.schema;
    let c = schema.c();
    let mut fields = Vec::with_capacity(c);
    for k in 0..c {
        let t = b.get(&schema.table(k))?;
        fields.push(tape.gather_rows(t, &batch.codes[k])?);
    }
    let dom_table = b.get("emb.domain_id")?;
    let x_dom = tape.gather_rows(dom_table, &batch.domains)?;
    let pairs = blocks::fwfm(tape, &fields, b.get("fwfm.r")?)?;
    let x_feat = tape.concat(&fields, 1)?;
    let gate = match opts.epnet {
        GateOverride::Learned => blocks::epnet_gate(
            tape,
            x_dom,
            b.get("gate.w1")?,
            b.get("gate.b1")?,
            b.get("gate.w2")?,
            b.get("gate.b2")?,
        )?,
        GateOverride::Fixed(v) => tape.constant(Tensor::filled(&[batch.rows(), schema.embed_dim], v)),
    };
    let z = blocks::epnet_modulate(tape, x_feat, gate)?;
    let pn = blocks::partitioned_norm(
        tape,
        z,
        &batch.domains,
        &blocks::PnParams {
            gamma: b.get("pn.gamma")?,
            beta: b.get("pn.beta")?,
            gamma_k: b.get("pn.gamma_k")?,
            beta_k: b.get("pn.beta_k")?,
        },
        &model.pn,
        opts.mode,
    )?;
    let tin = blocks::tin_encode(
        tape,
        b.get(&schema.table(GAME_FIELD))?,
        b.get("tin.rank")?,
        &batch.codes[GAME_FIELD],
        fields[USER_FIELD],
        b.get("tin.user_w")?,
        b.get("tin.user_b")?,
        &batch.behavior,
    )?;
    let trunk = tape.concat(&[pn.z, pairs, tin.rep], 1)?;
    let mut layers = Vec::new();
    for i in 0..model.config.hidden.len() {
        layers.push(blocks::TowerLayer {
            w: b.get(&format!("tower.l{i}.w"))?,
            b: b.get(&format!("tower.l{i}.b"))?,
            gate_w: b.get(&format!("tower.g{i}.w"))?,
            gate_b: b.get(&format!("tower.g{i}.b"))?,
        });
    }
    let tower = blocks::tower_forward(
        tape,
        trunk,
        x_dom,
        &layers,
        model.config.sparsity_threshold,
        opts.mode,
        opts.tower,
    )?;
    let mut heads = Vec::with_capacity(3);
    for h in Horizon::ALL {
        let [w, bias] = head_names(h);
        let out = tape.affine(tower.hidden, b.get(&w)?, b.get(&bias)?)?;
        heads.push(HeadVars {
            p_raw: tape.column(out, 0)?,
            mu: tape.column(out, 1)?,
            sigma_raw: tape.column(out, 2)?,
        });
    }
    Ok(ModelOutput {
        heads: [heads[0], heads[1], heads[2]],
        gate_l1: tower.gate_l1,
        sparsity: tower.sparsity,
        epnet_gate: gate,
        tin_attention: tin.attention,
        pn_batch_stats: pn.batch_stats,
        pn_fallback_domains: pn.fallback_domains,
    })
}

/// Per-sample head parameters in infer mode.
pub fn predict_batch(model: &Model, batch: &EncodedBatch) -> Result<Vec<[ZilnParams; 3]>> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let out = forward_full(&mut tape, &b, model, batch, ForwardOptions::new(Mode::Infer))?;
    let col = |v: Var| tape.value(v).values().to_vec();
    let per_head: Vec<[Vec<f64>; 3]> = out
        .heads
        .iter()
        .map(|h| [col(h.p_raw), col(h.mu), col(h.sigma_raw)])
        .collect();
    let preds: Vec<[ZilnParams; 3]> = (0..batch.rows())
        .map(|i| {
            let p = |k: usize| ZilnParams::new(per_head[k][0][i], per_head[k][1][i], per_head[k][2][i]);
            [p(0), p(1), p(2)]
        })
        .collect();
    Ok(preds)
}

/// On-disk checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub meta: ArtifactMeta,
    pub model: Model,
}

pub const MODEL_FILE: &str = "model.json";

pub fn save_model(model: &Model, path: &Path, meta: &ArtifactMeta) -> Result<()> {
    io_util::write_json(
        path,
        &Checkpoint {
            meta: meta.clone(),
            model: model.clone(),
        },
    )
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = io_util::read_json(path)?;
    ck.model.schema.validate()?;
    if !ck.model.params.all_finite() {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    Ok(ck)
}
