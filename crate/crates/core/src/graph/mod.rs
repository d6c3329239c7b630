//! Meta-path graphs and masked-autoencoder pretraining of node embeddings.
//!
//! Two projections of the user–game payment graph are built: users linked by
//! the number of games both paid for, and games linked by the number of users
//! paying for both. A two-layer mean-aggregation encoder embeds each graph;
//! training reconstructs adjacency rows (inner-product decoder) and masked
//! node attributes (affine decoder), both scored by cosine distance.

pub mod encoder;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Cardinalities, GameRecord, InteractionEvent, UserRecord};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::io_util::{self, ArtifactMeta};
use crate::rng::StreamRng;

pub use encoder::{
    embed_all, grl_forward, grl_loss, init_graph_params, train_grl, GrlDiagnostics, GrlOutput, GrlTraining,
    PathTerms,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaPath {
    #[serde(rename = "user-game-user")]
    UserGameUser,
    #[serde(rename = "game-user-game")]
    GameUserGame,
}

impl MetaPath {
    pub fn prefix(self) -> &'static str {
        match self {
            MetaPath::UserGameUser => "ugu",
            MetaPath::GameUserGame => "gug",
        }
    }

    pub fn node_kind(self) -> NodeKind {
        match self {
            MetaPath::UserGameUser => NodeKind::User,
            MetaPath::GameUserGame => NodeKind::Game,
        }
    }
}

/// Dense weighted projection graph with node attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPathGraph {
    pub meta_path: MetaPath,
    pub n: usize,
    /// Row-major `n × n`, symmetric, zero diagonal, common-neighbor counts.
    pub adjacency: Vec<f64>,
    /// `n × d_attr` concatenated one-hot codes.
    pub attributes: Tensor,
}

impl MetaPathGraph {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        let mut c = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.weight(i, j) > 0.0 {
                    c += 1;
                }
            }
        }
        c
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.cols()
    }
}

fn one_hot_rows(codes: &[[usize; 4]], card: &[usize; 4]) -> Result<Tensor> {
    let d: usize = card.iter().sum();
    let mut v = vec![0.0; codes.len() * d];
    for (i, row) in codes.iter().enumerate() {
        let mut off = 0;
        for (k, (&c, &n)) in row.iter().zip(card).enumerate() {
            if c >= n {
                return Err(Error::invalid(format!("code {c} of field {k} exceeds cardinality {n}")));
            }
            v[i * d + off + c] = 1.0;
            off += n;
        }
    }
    Tensor::new(vec![codes.len(), d], v)
}

/// Weight between two nodes is the number of distinct shared neighbors.
fn projection(groups: &[BTreeSet<usize>], n: usize) -> Vec<f64> {
    let mut adj = vec![0.0; n * n];
    for members in groups {
        let m: Vec<usize> = members.iter().copied().collect();
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                adj[m[a] * n + m[b]] += 1.0;
                adj[m[b] * n + m[a]] += 1.0;
            }
        }
    }
    adj
}

pub fn build_meta_path_graphs(
    events: &[InteractionEvent],
    users: &[UserRecord],
    games: &[GameRecord],
    card: &Cardinalities,
) -> Result<(MetaPathGraph, MetaPathGraph)> {
    if events.is_empty() {
        return Err(Error::invalid("no interaction events to build graphs from"));
    }
    let (nu, ng) = (users.len(), games.len());
    let mut users_of_game = vec![BTreeSet::new(); ng];
    let mut games_of_user = vec![BTreeSet::new(); nu];
    for e in events {
        if e.user_id >= nu || e.game_id >= ng {
            return Err(Error::invalid(format!("event references unknown node: {e:?}")));
        }
        users_of_game[e.game_id].insert(e.user_id);
        games_of_user[e.user_id].insert(e.game_id);
    }
    let user_codes: Vec<[usize; 4]> = users.iter().map(|u| u.codes()).collect();
    let game_codes: Vec<[usize; 4]> = games.iter().map(|g| g.codes()).collect();
    Ok((
        MetaPathGraph {
            meta_path: MetaPath::UserGameUser,
            n: nu,
            adjacency: projection(&users_of_game, nu),
            attributes: one_hot_rows(&user_codes, &card.user)?,
        },
        MetaPathGraph {
            meta_path: MetaPath::GameUserGame,
            n: ng,
            adjacency: projection(&games_of_user, ng),
            attributes: one_hot_rows(&game_codes, &card.game)?,
        },
    ))
}

/// What was hidden, with the original values for recovery.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked_nodes: Vec<usize>,
    pub masked_edges: Vec<(usize, usize)>,
    pub node_values: Vec<Vec<f64>>,
    pub edge_weights: Vec<f64>,
}

/// Masks `floor(rate·n)` node attribute rows and `floor(rate·|E|)` edges,
/// both drawn without replacement. Masked rows become the zero token.
pub fn apply_mask(
    graph: &MetaPathGraph,
    attr_rate: f64,
    edge_rate: f64,
    rng: &mut StreamRng,
) -> Result<(MetaPathGraph, MaskPlan)> {
    for r in [attr_rate, edge_rate] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::invalid(format!("mask rate must be in [0,1), got {r}")));
        }
    }
    let n = graph.n;
    let d = graph.d_attr();
    let mut masked = graph.clone();
    let k = (attr_rate * n as f64).floor() as usize;
    let mut nodes = index::sample(rng, n, k).into_vec();
    nodes.sort_unstable();
    let mut node_values = Vec::with_capacity(k);
    {
        let attrs = masked.attributes.values_mut();
        for &v in &nodes {
            node_values.push(attrs[v * d..(v + 1) * d].to_vec());
            attrs[v * d..(v + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if graph.weight(i, j) > 0.0 {
                edges.push((i, j));
            }
        }
    }
    let ke = (edge_rate * edges.len() as f64).floor() as usize;
    let mut picked = index::sample(rng, edges.len(), ke).into_vec();
    picked.sort_unstable();
    let masked_edges: Vec<(usize, usize)> = picked.iter().map(|&p| edges[p]).collect();
    let mut edge_weights = Vec::with_capacity(ke);
    for &(i, j) in &masked_edges {
        edge_weights.push(graph.weight(i, j));
        masked.adjacency[i * n + j] = 0.0;
        masked.adjacency[j * n + i] = 0.0;
    }
    Ok((
        masked,
        MaskPlan {
            masked_nodes: nodes,
            masked_edges,
            node_values,
            edge_weights,
        },
    ))
}

/// Inverse of [`apply_mask`].
pub fn recover(masked: &MetaPathGraph, plan: &MaskPlan) -> MetaPathGraph {
    let mut g = masked.clone();
    let n = g.n;
    let d = g.d_attr();
    let attrs = g.attributes.values_mut();
    for (&v, vals) in plan.masked_nodes.iter().zip(&plan.node_values) {
        attrs[v * d..(v + 1) * d].copy_from_slice(vals);
    }
    for (&(i, j), &w) in plan.masked_edges.iter().zip(&plan.edge_weights) {
        g.adjacency[i * n + j] = w;
        g.adjacency[j * n + i] = w;
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Game,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub node_kind: NodeKind,
    pub node_id: usize,
    pub vector: Vec<f64>,
}

/// Pretrained user and game embedding tables (`n × d_emb`).
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub user: Tensor,
    pub game: Tensor,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

pub fn export_embeddings(emb: &Embeddings, path: &Path, meta: &ArtifactMeta) -> Result<()> {
    let mut recs = Vec::with_capacity(emb.user.rows() + emb.game.rows());
    for (kind, t) in [(NodeKind::User, &emb.user), (NodeKind::Game, &emb.game)] {
        for i in 0..t.rows() {
            recs.push(EmbeddingRecord {
                node_kind: kind,
                node_id: i,
                vector: t.row(i).to_vec(),
            });
        }
    }
    io_util::write_jsonl(path, Some(meta), &recs)
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let (_, recs): (_, Vec<EmbeddingRecord>) = io_util::read_jsonl(path)?;
    let mut tables: [Vec<&EmbeddingRecord>; 2] = [Vec::new(), Vec::new()];
    for r in &recs {
        tables[(r.node_kind == NodeKind::Game) as usize].push(r);
    }
    let build = |rows: &[&EmbeddingRecord], kind: &str| -> Result<Tensor> {
        let d = rows.first().map_or(0, |r| r.vector.len());
        let mut v = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.node_id != i || r.vector.len() != d {
                return Err(Error::invalid(format!("{kind} embeddings must be dense with equal width")));
            }
            v.extend_from_slice(&r.vector);
        }
        Tensor::new(vec![rows.len(), d], v)
    };
    Ok(Embeddings {
        user: build(&tables[0], "user")?,
        game: build(&tables[1], "game")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ev(u: usize, g: usize) -> InteractionEvent {
        InteractionEvent {
            user_id: u,
            game_id: g,
            day_index: 0,
            spend: 1.0,
        }
    }

    fn catalog(nu: usize, ng: usize) -> (Vec<UserRecord>, Vec<GameRecord>, Cardinalities) {
        let users = (0..nu)
            .map(|i| UserRecord {
                user_id: i,
                age_bucket: i % 2,
                gender: 0,
                city_tier: 0,
                pay_count_bucket: 0,
                latent_value: None,
            })
            .collect();
        let games = (0..ng)
            .map(|i| GameRecord {
                game_id: i,
                category: i % 2,
                battle_type: 0,
                market_type: 0,
                theme: 0,
                monetization: None,
            })
            .collect();
        let card = Cardinalities {
            user: [2, 1, 1, 1],
            game: [2, 1, 1, 1],
            n_users: nu,
            n_games: ng,
            n_domains: 1,
        };
        (users, games, card)
    }

    #[test]
    fn two_users_sharing_a_game() {
        let (u, g, c) = catalog(2, 1);
        let (ug, gg) = build_meta_path_graphs(&[ev(0, 0), ev(1, 0)], &u, &g, &c).unwrap();
        assert_eq!(ug.weight(0, 1), 1.0);
        assert_eq!(ug.weight(1, 0), 1.0);
        assert_eq!(gg.edge_count(), 0);
    }

    #[test]
    fn one_user_many_games_is_a_game_clique() {
        let (u, g, c) = catalog(1, 4);
        let evs: Vec<_> = (0..4).map(|j| ev(0, j)).collect();
        let (ug, gg) = build_meta_path_graphs(&evs, &u, &g, &c).unwrap();
        assert_eq!(ug.edge_count(), 0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(gg.weight(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn disjoint_users_have_no_edge_and_counts_accumulate() {
        let (u, g, c) = catalog(3, 3);
        let evs = [ev(0, 0), ev(1, 1), ev(0, 2), ev(2, 2), ev(0, 1), ev(2, 1), ev(2, 1)];
        let (ug, _) = build_meta_path_graphs(&evs, &u, &g, &c).unwrap();
        assert_eq!(ug.weight(0, 2), 2.0);
        assert_eq!(ug.weight(0, 1), 1.0);
        assert_eq!(ug.weight(1, 2), 1.0);
        let (ug, _) = build_meta_path_graphs(&[ev(0, 0), ev(1, 1)], &u, &g, &c).unwrap();
        assert_eq!(ug.weight(0, 1), 0.0);
    }

    fn ring(n: usize) -> MetaPathGraph {
        let (u, g, c) = catalog(n, n);
        let evs: Vec<_> = (0..n).flat_map(|i| [ev(i, i), ev((i + 1) % n, i)]).collect();
        build_meta_path_graphs(&evs, &u, &g, &c).unwrap().0
    }

    #[test]
    fn zero_rate_mask_is_identity() {
        let g = ring(10);
        let (m, plan) = apply_mask(&g, 0.0, 0.0, &mut rng::stream(0, "m")).unwrap();
        assert_eq!(m, g);
        assert!(plan.masked_nodes.is_empty() && plan.masked_edges.is_empty());
    }

    #[test]
    fn mask_counts_symmetry_and_recovery() {
        let g = ring(10);
        let (m, plan) = apply_mask(&g, 0.5, 0.5, &mut rng::stream(1, "m")).unwrap();
        assert_eq!(plan.masked_nodes.len(), 5);
        assert_eq!(plan.masked_edges.len(), g.edge_count() / 2);
        for &(i, j) in &plan.masked_edges {
            assert_eq!(m.weight(i, j), 0.0);
            assert_eq!(m.weight(j, i), 0.0);
        }
        for &v in &plan.masked_nodes {
            assert!(m.attributes.row(v).iter().all(|&x| x == 0.0));
        }
        assert_eq!(recover(&m, &plan), g);
        assert!(apply_mask(&g, 1.0, 0.0, &mut rng::stream(1, "m")).is_err());
    }

    #[test]
    fn embeddings_round_trip() {
        let emb = Embeddings {
            user: Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 1.0 / 3.0, -5.0, 1e-9]).unwrap(),
            game: Tensor::matrix(1, 2, vec![7.0, 8.0]).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(EMBEDDINGS_FILE);
        export_embeddings(&emb, &p, &ArtifactMeta::new(0, "x")).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), emb);
        let (_, recs): (_, Vec<EmbeddingRecord>) = io_util::read_jsonl(&p).unwrap();
        assert_eq!(recs.len(), 4);
    }
}
