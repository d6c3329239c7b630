use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

use super::{Dataset, GameRecord, InteractionEvent, LtvSample, UserRecord};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

const LABEL_DAYS: u32 = 30;

fn categorical(r: &mut StreamRng, n: usize) -> usize {
    r.random_range(0..n)
}

/// Equal-size buckets by rank of `scores`; ties broken by index.
fn rank_buckets(scores: &[f64], buckets: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = vec![0; scores.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * buckets / scores.len();
    }
    out
}

/// Hidden per-user state that never leaves the generator.
struct UserLatents {
    /// Standardized log value.
    z: Vec<f64>,
    taste: Vec<usize>,
}

fn build_catalog(cfg: &DataConfig, seed: u64) -> Result<(Vec<UserRecord>, Vec<GameRecord>, UserLatents)> {
    if cfg.n_users == 0 || cfg.n_games == 0 {
        return Err(Error::invalid("catalog needs at least one user and one game"));
    }
    let mut r = rng::stream(seed, "catalog-users");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let z: Vec<f64> = (0..cfg.n_users).map(|_| std.sample(&mut r)).collect();
    let taste_score: Vec<f64> = z.iter().map(|z| z + 0.7 * std.sample(&mut r)).collect();
    let pay_score: Vec<f64> = z.iter().map(|z| z + std.sample(&mut r)).collect();
    let taste = rank_buckets(&taste_score, cfg.taste_segments);
    let pay = rank_buckets(&pay_score, cfg.pay_buckets);
    let users = (0..cfg.n_users)
        .map(|i| UserRecord {
            user_id: i,
            age_bucket: categorical(&mut r, cfg.age_buckets),
            gender: categorical(&mut r, cfg.genders),
            city_tier: categorical(&mut r, cfg.city_tiers),
            pay_count_bucket: pay[i],
            latent_value: Some((cfg.user_mu + cfg.user_sigma * z[i]).exp()),
        })
        .collect();

    let mut r = rng::stream(seed, "catalog-games");
    let monet = LogNormal::new(cfg.game_mu, cfg.game_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let games = (0..cfg.n_games)
        .map(|i| GameRecord {
            game_id: i,
            category: categorical(&mut r, cfg.categories),
            battle_type: categorical(&mut r, cfg.battle_types),
            market_type: categorical(&mut r, cfg.market_types),
            theme: categorical(&mut r, cfg.themes),
            monetization: Some(monet.sample(&mut r)),
        })
        .collect();
    Ok((users, games, UserLatents { z, taste }))
}

/// Users and games with hidden latents filled in.
pub fn generate_catalog(cfg: &DataConfig, seed: u64) -> Result<(Vec<UserRecord>, Vec<GameRecord>)> {
    build_catalog(cfg, seed).map(|(u, g, _)| (u, g))
}

fn latent(u: &UserRecord) -> Result<f64> {
    u.latent_value
        .ok_or_else(|| Error::invalid(format!("user {} has no latent value", u.user_id)))
}

fn monetization(g: &GameRecord) -> Result<f64> {
    g.monetization
        .ok_or_else(|| Error::invalid(format!("game {} has no monetization", g.game_id)))
}

fn z_game(cfg: &DataConfig, g: &GameRecord) -> Result<f64> {
    Ok((monetization(g)?.ln() - cfg.game_mu) / cfg.game_sigma)
}

fn history_from(
    cfg: &DataConfig,
    users: &[UserRecord],
    games: &[GameRecord],
    latents: &UserLatents,
    seed: u64,
) -> Result<Vec<InteractionEvent>> {
    let zg: Vec<f64> = games.iter().map(|g| z_game(cfg, g)).collect::<Result<_>>()?;
    let count = Poisson::new(cfg.history_events_mean).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.spend_sigma).expect("positive sigma");
    let mut r = rng::stream(seed, "history");
    let mut events = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let zu = latents.z[u];
        let seg = latents.taste[u];
        let weights: Vec<f64> = games
            .iter()
            .zip(&zg)
            .map(|(g, zg)| {
                let affinity = if g.category % cfg.taste_segments == seg { 2.0 } else { 0.0 };
                (affinity + zu * zg).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let n = count.sample(&mut r) as usize;
        let value = latent(user)?;
        for _ in 0..n {
            let mut pick = r.random::<f64>() * total;
            let mut game = games.len() - 1;
            for (g, w) in weights.iter().enumerate() {
                if pick < *w {
                    game = g;
                    break;
                }
                pick -= w;
            }
            let loc = (value * monetization(&games[game])?).ln();
            events.push(InteractionEvent {
                user_id: u,
                game_id: game,
                day_index: r.random_range(0..cfg.history_days),
                spend: (loc + noise.sample(&mut r)).exp(),
            });
        }
    }
    Ok(events)
}

/// Historical payment events (these feed the meta-path graphs and behavior).
pub fn generate_history(cfg: &DataConfig, seed: u64) -> Result<Vec<InteractionEvent>> {
    let (users, games, latents) = build_catalog(cfg, seed)?;
    history_from(cfg, &users, &games, &latents, seed)
}

/// Stage rates of the exposure → click → register → purchase funnel.
#[derive(Clone, Debug, PartialEq)]
pub struct FunnelRates {
    pub click: f64,
    pub register: f64,
    pub purchase: f64,
    /// Multiplier on the click rate per domain, capped so the rate stays ≤ 1.
    pub domain_click_mult: Vec<f64>,
}

impl FunnelRates {
    pub fn from_config(cfg: &DataConfig) -> Self {
        Self {
            click: cfg.click_rate,
            register: cfg.register_rate,
            purchase: cfg.purchase_rate,
            domain_click_mult: cfg.domain_click_mult.clone(),
        }
    }

    fn validate(&self, n_domains: usize) -> Result<()> {
        for (name, r) in [("click", self.click), ("register", self.register), ("purchase", self.purchase)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("{name} rate must be in (0,1], got {r}")));
            }
        }
        if self.domain_click_mult.len() != n_domains || self.domain_click_mult.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("one positive click multiplier per domain required"));
        }
        Ok(())
    }
}

/// One exposure and how far down the funnel it got.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FunnelTrial {
    pub user_id: usize,
    pub game_id: usize,
    pub domain_id: usize,
    pub clicked: bool,
    pub registered: bool,
    pub purchased: bool,
}

/// Bernoulli thinning of `exposures_per_user` exposures per user.
pub fn simulate_funnel(
    n_users: usize,
    n_games: usize,
    n_domains: usize,
    rates: &FunnelRates,
    exposures_per_user: usize,
    seed: u64,
) -> Result<Vec<FunnelTrial>> {
    rates.validate(n_domains)?;
    if n_users == 0 || n_games == 0 || n_domains == 0 {
        return Err(Error::invalid("funnel needs users, games and domains"));
    }
    let mut r = rng::stream(seed, "funnel");
    let mut out = Vec::with_capacity(n_users * exposures_per_user);
    for u in 0..n_users {
        for _ in 0..exposures_per_user {
            let game_id = r.random_range(0..n_games);
            let domain_id = r.random_range(0..n_domains);
            let click = (rates.click * rates.domain_click_mult[domain_id]).min(1.0);
            // every stage consumes one draw so the stream layout is fixed
            let (a, b, c): (f64, f64, f64) = (r.random(), r.random(), r.random());
            let clicked = a < click;
            let registered = clicked && b < rates.register;
            let purchased = registered && c < rates.purchase;
            out.push(FunnelTrial {
                user_id: u,
                game_id,
                domain_id,
                clicked,
                registered,
                purchased,
            });
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Purchase probability of a registrant.
pub fn purchase_probability(cfg: &DataConfig, user: &UserRecord, game: &GameRecord, domain: usize) -> Result<f64> {
    let zu = (latent(user)?.ln() - cfg.user_mu) / cfg.user_sigma;
    let zg = z_game(cfg, game)?;
    let base = (cfg.purchase_base / (1.0 - cfg.purchase_base)).ln();
    Ok(sigmoid(
        base + cfg.buy_value_coef * zu + cfg.buy_monetization_coef * zg + cfg.domain_buy_logit[domain],
    ))
}

/// Most recent distinct games per user, newest first.
fn behaviors(events: &[InteractionEvent], n_users: usize, len: usize) -> Vec<Vec<(usize, usize)>> {
    let mut per_user: Vec<Vec<&InteractionEvent>> = vec![Vec::new(); n_users];
    for e in events {
        per_user[e.user_id].push(e);
    }
    per_user
        .into_iter()
        .map(|mut evs| {
            evs.sort_by(|a, b| b.day_index.cmp(&a.day_index).then(a.game_id.cmp(&b.game_id)));
            let mut seen = HashSet::new();
            evs.iter()
                .filter(|e| seen.insert(e.game_id))
                .take(len)
                .enumerate()
                .map(|(i, e)| (e.game_id, i + 1))
                .collect()
        })
        .collect()
}

/// One sample per registrant: purchase draw, then daily lognormal spend gated
/// by a decaying activity probability, summed at days 3, 7 and 30.
pub fn generate_labels(
    registrants: &[FunnelTrial],
    users: &[UserRecord],
    games: &[GameRecord],
    events: &[InteractionEvent],
    cfg: &DataConfig,
    seed: u64,
) -> Result<Vec<LtvSample>> {
    if registrants.is_empty() {
        return Err(Error::invalid("no registrants to label"));
    }
    let beh = behaviors(events, users.len(), cfg.behavior_len);
    let noise = Normal::new(0.0, cfg.spend_sigma).expect("positive sigma");
    let mut r = rng::stream(seed, "labels");
    let mut out = Vec::with_capacity(registrants.len());
    for t in registrants {
        let (user, game) = (&users[t.user_id], &games[t.game_id]);
        let p = purchase_probability(cfg, user, game, t.domain_id)?;
        let buyer = r.random::<f64>() < p;
        let (mut y3, mut y7, mut y30) = (0.0, 0.0, 0.0);
        if buyer {
            let loc = (latent(user)? * monetization(game)? * cfg.domain_spend_scale[t.domain_id]).ln();
            let mut total = 0.0;
            for day in 1..=LABEL_DAYS {
                let active = day == 1 || r.random::<f64>() < (cfg.retention * (day as f64).powf(-cfg.retention_decay));
                let spend = (loc + noise.sample(&mut r)).exp();
                if active {
                    total += spend;
                }
                match day {
                    3 => y3 = total,
                    7 => y7 = total,
                    30 => y30 = total,
                    _ => {}
                }
            }
        }
        out.push(LtvSample {
            user_id: t.user_id,
            game_id: t.game_id,
            domain_id: t.domain_id,
            behavior: beh[t.user_id].clone(),
            y3,
            y7,
            y30,
        });
    }
    Ok(out)
}

/// Full generator: catalog, history, funnel, and one labeled sample per
/// distinct (user, game) registration.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let (users, games, latents) = build_catalog(cfg, seed)?;
    let events = history_from(cfg, &users, &games, &latents, seed)?;
    let trials = simulate_funnel(
        cfg.n_users,
        cfg.n_games,
        cfg.n_domains,
        &FunnelRates::from_config(cfg),
        cfg.exposures_per_user,
        seed,
    )?;
    let mut seen = HashMap::new();
    let registrants: Vec<FunnelTrial> = trials
        .into_iter()
        .filter(|t| t.registered && seen.insert((t.user_id, t.game_id), ()).is_none())
        .collect();
    let samples = generate_labels(&registrants, &users, &games, &events, cfg, seed)?;
    Ok(Dataset {
        users,
        games,
        events,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            n_users: 1000,
            n_games: 50,
            ..DataConfig::default()
        }
    }

    #[test]
    fn catalog_is_deterministic_and_seed_sensitive() {
        let a = generate_catalog(&cfg(), 7).unwrap();
        assert_eq!(a, generate_catalog(&cfg(), 7).unwrap());
        let b = generate_catalog(&cfg(), 8).unwrap();
        assert_ne!(
            a.0.iter().map(|u| u.latent_value).collect::<Vec<_>>(),
            b.0.iter().map(|u| u.latent_value).collect::<Vec<_>>()
        );
    }

    #[test]
    fn codes_within_cardinalities() {
        let c = cfg();
        let (users, games) = generate_catalog(&c, 7).unwrap();
        assert!(users.iter().all(|u| u.age_bucket < 8 && u.gender < c.genders && u.city_tier < c.city_tiers
            && u.pay_count_bucket < c.pay_buckets));
        assert!(games.iter().all(|g| g.category < c.categories && g.theme < c.themes));
    }

    #[test]
    fn zero_users_is_an_error() {
        let c = DataConfig { n_users: 0, ..cfg() };
        assert!(generate_catalog(&c, 1).is_err());
    }

    #[test]
    fn funnel_is_a_subset_chain() {
        let rates = FunnelRates {
            click: 0.3,
            register: 0.5,
            purchase: 0.4,
            domain_click_mult: vec![1.0, 2.0, 5.0],
        };
        let t = simulate_funnel(100, 10, 3, &rates, 50, 1).unwrap();
        assert!(t.iter().all(|t| (!t.purchased || t.registered) && (!t.registered || t.clicked)));
    }

    #[test]
    fn unit_rate_passes_everyone() {
        let rates = FunnelRates {
            click: 1.0,
            register: 1.0,
            purchase: 0.5,
            domain_click_mult: vec![1.0],
        };
        let t = simulate_funnel(10, 3, 1, &rates, 10, 2).unwrap();
        assert!(t.iter().all(|t| t.clicked && t.registered));
    }

    #[test]
    fn bad_rate_is_rejected() {
        let mut rates = FunnelRates {
            click: 0.0,
            register: 1.0,
            purchase: 1.0,
            domain_click_mult: vec![1.0],
        };
        assert!(simulate_funnel(1, 1, 1, &rates, 1, 0).is_err());
        rates.click = 1.5;
        assert!(simulate_funnel(1, 1, 1, &rates, 1, 0).is_err());
    }

    #[test]
    fn labels_are_monotone_and_zero_inflated() {
        let ds = generate_dataset(&cfg(), 11).unwrap();
        assert!(!ds.samples.is_empty());
        for s in &ds.samples {
            assert!(0.0 <= s.y3 && s.y3 <= s.y7 && s.y7 <= s.y30);
            if s.y30 == 0.0 {
                assert_eq!(s.labels(), [0.0; 3]);
            }
            assert!(s.behavior.len() <= 20);
        }
        let share = ds.samples.iter().filter(|s| s.is_buyer()).count() as f64 / ds.samples.len() as f64;
        assert!(share > 0.05 && share < 0.4, "{share}");
        // horizons actually differ for buyers
        assert!(ds.samples.iter().any(|s| s.y3 < s.y30));
    }

    #[test]
    fn behavior_is_distinct_and_recency_ranked() {
        let ds = generate_dataset(&cfg(), 5).unwrap();
        for s in &ds.samples {
            let ids: HashSet<usize> = s.behavior.iter().map(|b| b.0).collect();
            assert_eq!(ids.len(), s.behavior.len());
            for (i, (_, rank)) in s.behavior.iter().enumerate() {
                assert_eq!(*rank, i + 1);
            }
        }
    }
}
