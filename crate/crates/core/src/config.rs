//! Run configuration: a TOML file with `[data]`, `[grl]`, `[model]`,
//! `[pareto]` and `[eval]` sections plus global `seed` and `output_dir`.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration re-serializes to text that parses back to the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;
use crate::pareto::train::Combiner;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_users: usize,
    pub n_games: usize,
    pub n_domains: usize,
    pub age_buckets: usize,
    pub genders: usize,
    pub city_tiers: usize,
    pub pay_buckets: usize,
    pub categories: usize,
    pub battle_types: usize,
    pub market_types: usize,
    pub themes: usize,
    /// Hidden taste segments driving which games a user pays for.
    pub taste_segments: usize,
    pub user_mu: f64,
    pub user_sigma: f64,
    pub game_mu: f64,
    pub game_sigma: f64,
    pub history_days: u32,
    pub history_events_mean: f64,
    pub exposures_per_user: usize,
    pub click_rate: f64,
    pub register_rate: f64,
    pub purchase_rate: f64,
    pub domain_click_mult: Vec<f64>,
    pub domain_spend_scale: Vec<f64>,
    pub domain_buy_logit: Vec<f64>,
    /// Purchase probability for an average user, game and domain.
    pub purchase_base: f64,
    pub buy_value_coef: f64,
    pub buy_monetization_coef: f64,
    pub spend_sigma: f64,
    /// Probability a buyer is active on day `t` is `retention · t^(−decay)`.
    pub retention: f64,
    pub retention_decay: f64,
    pub behavior_len: usize,
    pub split_ratios: [f64; 3],
    pub export_oracle: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_users: 1200,
            n_games: 60,
            n_domains: 3,
            age_buckets: 8,
            genders: 2,
            city_tiers: 5,
            pay_buckets: 5,
            categories: 6,
            battle_types: 3,
            market_types: 3,
            themes: 5,
            taste_segments: 4,
            user_mu: 0.0,
            user_sigma: 0.8,
            game_mu: 0.0,
            game_sigma: 0.5,
            history_days: 180,
            history_events_mean: 6.0,
            exposures_per_user: 40,
            click_rate: 0.2,
            register_rate: 0.5,
            purchase_rate: 0.3,
            domain_click_mult: vec![1.0, 0.6, 1.4],
            domain_spend_scale: vec![1.0, 2.0, 0.5],
            domain_buy_logit: vec![0.0, -0.5, 0.5],
            purchase_base: 0.15,
            buy_value_coef: 0.8,
            buy_monetization_coef: 0.5,
            spend_sigma: 0.6,
            retention: 0.6,
            retention_decay: 0.5,
            behavior_len: 20,
            split_ratios: [0.7, 0.2, 0.1],
            export_oracle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrlConfig {
    pub d_emb: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub xi_e: f64,
    pub xi_a: f64,
    pub zeta: f64,
    pub attr_mask_rate: f64,
    pub edge_mask_rate: f64,
    pub init_scale: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self {
            d_emb: 8,
            hidden: 16,
            epochs: 200,
            learning_rate: 0.5,
            xi_e: 2.0,
            xi_a: 2.0,
            zeta: 0.5,
            attr_mask_rate: 0.3,
            edge_mask_rate: 0.3,
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ZilnNll,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub sparsity_threshold: f64,
    pub sparsity_weight: f64,
    pub pn_momentum: f64,
    pub init_scale: f64,
    pub use_grl: bool,
    pub freeze_grl: bool,
    pub loss_kind: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: vec![32, 16],
            sparsity_threshold: 0.05,
            sparsity_weight: 1e-4,
            pn_momentum: 0.9,
            init_scale: 0.1,
            use_grl: true,
            freeze_grl: false,
            loss_kind: LossKind::ZilnNll,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub epsilon: f64,
    pub epo_convention: bool,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub combiner: Combiner,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            epo_convention: false,
            learning_rate: 0.2,
            steps: 300,
            batch_size: 256,
            runs: 4,
            combiner: Combiner::Pareto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub label_drop_ratios: Vec<f64>,
    pub seed_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_drop_ratios: vec![0.5, 0.7, 0.9],
            seed_runs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub grl: GrlConfig,
    pub model: ModelConfig,
    pub pareto: ParetoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            grl: GrlConfig::default(),
            model: ModelConfig::default(),
            pareto: ParetoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const RESOLVED_FILE: &str = "config.resolved";

fn check(ok: bool, key: &str, rule: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {rule}")))
    }
}

fn unit_open(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = io_util::read_text(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the resolved configuration; `output_dir` is excluded so the
    /// same run written to two places stamps identical artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        io_util::digest_hex(c.to_toml().as_bytes())
    }

    /// Writes `config.resolved` under `output_dir` unless it already exists.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let p = self.output_dir.join(RESOLVED_FILE);
        if !p.exists() {
            io_util::write_text(&p, &self.to_toml())?;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (k, v) in [
            ("data.n_users", d.n_users),
            ("data.n_games", d.n_games),
            ("data.n_domains", d.n_domains),
            ("data.age_buckets", d.age_buckets),
            ("data.genders", d.genders),
            ("data.city_tiers", d.city_tiers),
            ("data.pay_buckets", d.pay_buckets),
            ("data.categories", d.categories),
            ("data.battle_types", d.battle_types),
            ("data.market_types", d.market_types),
            ("data.themes", d.themes),
            ("data.taste_segments", d.taste_segments),
            ("data.exposures_per_user", d.exposures_per_user),
            ("data.behavior_len", d.behavior_len),
        ] {
            check(v > 0, k, "must be > 0")?;
        }
        check(d.history_days > 0, "data.history_days", "must be > 0")?;
        check(d.user_sigma > 0.0 && d.game_sigma > 0.0, "data.user_sigma/game_sigma", "must be > 0")?;
        check(d.spend_sigma > 0.0, "data.spend_sigma", "must be > 0")?;
        check(d.history_events_mean > 0.0, "data.history_events_mean", "must be > 0")?;
        check(unit_open(d.click_rate), "data.click_rate", "must be in (0,1]")?;
        check(unit_open(d.register_rate), "data.register_rate", "must be in (0,1]")?;
        check(unit_open(d.purchase_rate), "data.purchase_rate", "must be in (0,1]")?;
        check(
            d.purchase_base > 0.0 && d.purchase_base < 1.0,
            "data.purchase_base",
            "must be in (0,1)",
        )?;
        check(unit_open(d.retention), "data.retention", "must be in (0,1]")?;
        check(d.retention_decay >= 0.0, "data.retention_decay", "must be >= 0")?;
        for (k, v) in [
            ("data.domain_click_mult", &d.domain_click_mult),
            ("data.domain_spend_scale", &d.domain_spend_scale),
            ("data.domain_buy_logit", &d.domain_buy_logit),
        ] {
            check(v.len() == d.n_domains, k, "needs one entry per domain")?;
            check(v.iter().all(|x| x.is_finite()), k, "must be finite")?;
        }
        check(
            d.domain_click_mult.iter().chain(&d.domain_spend_scale).all(|&x| x > 0.0),
            "data.domain_click_mult/domain_spend_scale",
            "must be > 0",
        )?;
        check(
            d.split_ratios.iter().all(|&r| r > 0.0) && (d.split_ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "data.split_ratios",
            "must be positive and sum to 1",
        )?;

        let g = &self.grl;
        check(g.d_emb > 0 && g.hidden > 0, "grl.d_emb/hidden", "must be > 0")?;
        check(g.epochs > 0, "grl.epochs", "must be >= 1")?;
        check(g.learning_rate >= 0.0, "grl.learning_rate", "must be >= 0")?;
        check(g.xi_e >= 1.0 && g.xi_a >= 1.0, "grl.xi_e/xi_a", "must be >= 1")?;
        check(g.zeta >= 0.0, "grl.zeta", "must be >= 0")?;
        for (k, r) in [("grl.attr_mask_rate", g.attr_mask_rate), ("grl.edge_mask_rate", g.edge_mask_rate)] {
            check((0.0..1.0).contains(&r), k, "must be in [0,1)")?;
        }
        check(g.init_scale > 0.0, "grl.init_scale", "must be > 0")?;

        let m = &self.model;
        check(m.embed_dim > 0, "model.embed_dim", "must be > 0")?;
        check(!m.hidden.is_empty() && m.hidden.iter().all(|&h| h > 0), "model.hidden", "must be non-empty and positive")?;
        check((0.0..1.0).contains(&m.sparsity_threshold), "model.sparsity_threshold", "must be in [0,1)")?;
        check(m.sparsity_weight >= 0.0, "model.sparsity_weight", "must be >= 0")?;
        check((0.0..1.0).contains(&m.pn_momentum), "model.pn_momentum", "must be in [0,1)")?;
        check(m.init_scale > 0.0, "model.init_scale", "must be > 0")?;
        check(
            !m.use_grl || m.embed_dim == g.d_emb,
            "model.embed_dim",
            "must equal grl.d_emb when use_grl = true",
        )?;

        let p = &self.pareto;
        check(p.epsilon > 0.0, "pareto.epsilon", "must be > 0")?;
        check(p.learning_rate > 0.0, "pareto.learning_rate", "must be > 0")?;
        check(p.steps >= 1, "pareto.steps", "must be >= 1")?;
        check(p.batch_size >= 1, "pareto.batch_size", "must be >= 1")?;
        check(p.runs >= 1, "pareto.runs", "must be >= 1")?;

        let e = &self.eval;
        check(
            e.label_drop_ratios.iter().all(|r| (0.0..1.0).contains(r)),
            "eval.label_drop_ratios",
            "must be in [0,1)",
        )?;
        check(e.seed_runs >= 2, "eval.seed_runs", "must be >= 2")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let e = RunConfig::from_toml_str("[pareto]\nepsilon = -1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("pareto.epsilon")), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml_str("[grl]\nepochz = 3\n").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = RunConfig::from_toml_str("sed = 3\n").unwrap_err();
        assert!(e.to_string().contains("sed"), "{e}");
    }

    #[test]
    fn type_mismatch_names_line() {
        let e = RunConfig::from_toml_str("seed = 1\n[model]\nhidden = \"wide\"\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.pareto.learning_rate = 0.1 + 0.2;
        c.model.loss_kind = LossKind::SquaredError;
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut moved = c.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn missing_file_is_config_error() {
        assert!(matches!(RunConfig::load(Path::new("/nonexistent/x.toml")), Err(Error::Config(_))));
    }
}
