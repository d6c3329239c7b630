//! Synthetic mini-game dataset: catalogs, payment history, conversion funnel,
//! multi-horizon value labels, stratified splits, and the JSON Lines formats.

mod generate;
mod split;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generate::{
    generate_catalog, generate_dataset, generate_history, generate_labels, purchase_probability, simulate_funnel,
    FunnelRates, FunnelTrial,
};
pub use split::{split_dataset, Splits};

use crate::error::{Error, Result};
use crate::io_util::{self, ArtifactMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub user_id: usize,
    pub age_bucket: usize,
    pub gender: usize,
    pub city_tier: usize,
    pub pay_count_bucket: usize,
    /// Hidden value scale; present in files only when oracle export is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameRecord {
    pub game_id: usize,
    pub category: usize,
    pub battle_type: usize,
    pub market_type: usize,
    pub theme: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monetization: Option<f64>,
}

/// Historical payment of a user in a game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionEvent {
    pub user_id: usize,
    pub game_id: usize,
    pub day_index: u32,
    pub spend: f64,
}

/// One registration with its behavior sequence and cumulative value labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtvSample {
    pub user_id: usize,
    pub game_id: usize,
    pub domain_id: usize,
    /// `(game_id, recency_rank)`, most recent first, ranks from 1.
    pub behavior: Vec<(usize, usize)>,
    pub y3: f64,
    pub y7: f64,
    pub y30: f64,
}

impl LtvSample {
    pub fn labels(&self) -> [f64; 3] {
        [self.y3, self.y7, self.y30]
    }

    pub fn is_buyer(&self) -> bool {
        self.y30 > 0.0
    }
}

/// Declared categorical cardinalities, in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cardinalities {
    pub user: [usize; 4],
    pub game: [usize; 4],
    pub n_users: usize,
    pub n_games: usize,
    pub n_domains: usize,
}

impl Cardinalities {
    pub fn from_config(c: &crate::config::DataConfig) -> Self {
        Self {
            user: [c.age_buckets, c.genders, c.city_tiers, c.pay_buckets],
            game: [c.categories, c.battle_types, c.market_types, c.themes],
            n_users: c.n_users,
            n_games: c.n_games,
            n_domains: c.n_domains,
        }
    }
}

impl UserRecord {
    pub fn codes(&self) -> [usize; 4] {
        [self.age_bucket, self.gender, self.city_tier, self.pay_count_bucket]
    }
}

impl GameRecord {
    pub fn codes(&self) -> [usize; 4] {
        [self.category, self.battle_type, self.market_type, self.theme]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserRecord>,
    pub games: Vec<GameRecord>,
    pub events: Vec<InteractionEvent>,
    pub samples: Vec<LtvSample>,
}

pub const USERS_FILE: &str = "users.jsonl";
pub const GAMES_FILE: &str = "games.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";

impl Dataset {
    /// Writes the four JSON Lines files. Hidden latents are dropped unless
    /// `export_oracle` is set.
    pub fn write(&self, dir: &Path, meta: &ArtifactMeta, export_oracle: bool) -> Result<()> {
        let users: Vec<UserRecord> = self
            .users
            .iter()
            .map(|u| UserRecord {
                latent_value: u.latent_value.filter(|_| export_oracle),
                ..u.clone()
            })
            .collect();
        let games: Vec<GameRecord> = self
            .games
            .iter()
            .map(|g| GameRecord {
                monetization: g.monetization.filter(|_| export_oracle),
                ..g.clone()
            })
            .collect();
        io_util::write_jsonl(&dir.join(USERS_FILE), Some(meta), &users)?;
        io_util::write_jsonl(&dir.join(GAMES_FILE), Some(meta), &games)?;
        io_util::write_jsonl(&dir.join(EVENTS_FILE), Some(meta), &self.events)?;
        io_util::write_jsonl(&dir.join(SAMPLES_FILE), Some(meta), &self.samples)
    }

    pub fn read(dir: &Path) -> Result<(Option<ArtifactMeta>, Self)> {
        let (meta, users) = io_util::read_jsonl(&dir.join(USERS_FILE))?;
        let (_, games) = io_util::read_jsonl(&dir.join(GAMES_FILE))?;
        let (_, events) = io_util::read_jsonl(&dir.join(EVENTS_FILE))?;
        let (_, samples) = io_util::read_jsonl(&dir.join(SAMPLES_FILE))?;
        let ds = Self {
            users,
            games,
            events,
            samples,
        };
        ds.validate()?;
        Ok((meta, ds))
    }

    /// Structural checks: dense ids, in-range references, ordered labels.
    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.users.iter().enumerate() {
            if u.user_id != i {
                return Err(Error::invalid(format!("user ids must be dense, found {} at {i}", u.user_id)));
            }
        }
        for (i, g) in self.games.iter().enumerate() {
            if g.game_id != i {
                return Err(Error::invalid(format!("game ids must be dense, found {} at {i}", g.game_id)));
            }
        }
        let (nu, ng) = (self.users.len(), self.games.len());
        for e in &self.events {
            if e.user_id >= nu || e.game_id >= ng || !(e.spend >= 0.0) {
                return Err(Error::invalid(format!("invalid event {e:?}")));
            }
        }
        for s in &self.samples {
            if s.user_id >= nu || s.game_id >= ng || s.behavior.iter().any(|(g, _)| *g >= ng) {
                return Err(Error::invalid(format!("sample references unknown ids: {s:?}")));
            }
            if !(0.0 <= s.y3 && s.y3 <= s.y7 && s.y7 <= s.y30 && s.y30.is_finite()) {
                return Err(Error::invalid(format!("labels must satisfy 0 <= y3 <= y7 <= y30: {s:?}")));
            }
        }
        Ok(())
    }
}
