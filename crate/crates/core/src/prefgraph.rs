//! Bipartite user-attribute preference graph with similarity weights.
//!
//! Users connect to preference attributes through like/dislike edges. The
//! similarity between two users is their shared one-hop neighbor count
//! (matching polarity), normalized by the maximum shared count over all
//! distinct user pairs. The index is maintained incrementally as edges are
//! inserted and always equals a from-scratch recomputation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Width of attribute feature vectors (and of learnable user features).
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown user id '{0}'")]
    UnknownUser(String),
    #[error("unknown attribute id '{0}'")]
    UnknownAttribute(String),
    #[error("duplicate id '{0}'")]
    DuplicateId(String),
    #[error("duplicate edge between user '{user}' and attribute '{attribute}'")]
    DuplicateEdge { user: String, attribute: String },
    #[error("attribute '{0}' appears in both likes and dislikes")]
    LikeDislikeOverlap(String),
    #[error("attribute text must be non-empty")]
    EmptyAttributeText,
    #[error("need at least {need} edges to split, have {have}")]
    TooFewEdges { need: usize, have: usize },
    #[error("invalid graph file: {0}")]
    InvalidFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type GraphResult<T> = Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Like,
    Dislike,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Like => write!(f, "like"),
            Polarity::Dislike => write!(f, "dislike"),
        }
    }
}

/// How a user node's input features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Row in the GNN's trainable user-feature table.
    Learnable,
    /// Zero vector; used for users added after pretraining.
    Zero,
}

#[derive(Debug, Clone)]
pub struct UserNode {
    pub id: String,
    pub feature_mode: FeatureMode,
}

#[derive(Debug, Clone)]
pub struct AttributeNode {
    pub id: String,
    pub text: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefEdge {
    pub user: usize,
    pub attribute: usize,
    pub polarity: Polarity,
}

/// Deterministic unit-norm embedding of an attribute phrase: a hashed bag of
/// character trigrams projected onto `FEATURE_DIM` signed buckets.
pub fn embed_attribute(text: &str) -> GraphResult<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(GraphError::EmptyAttributeText);
    }
    let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    let mut feature = vec![0.0f64; FEATURE_DIM];
    for window in padded.windows(3) {
        let h = fnv1a(window);
        let bucket = (h % FEATURE_DIM as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        feature[bucket] += sign;
    }
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in feature.iter_mut() {
            *v /= norm;
        }
    } else {
        // Degenerate hash collision pattern; fall back to a fixed unit vector.
        feature[0] = 1.0;
    }
    Ok(feature)
}

fn fnv1a(chars: &[char]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &ch in chars {
        let mut buf = [0u8; 4];
        for byte in ch.encode_utf8(&mut buf).as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Shared-neighbor counts between user pairs plus the global maximum that
/// normalizes them. Counts only matching-polarity attributes.
#[derive(Debug, Clone, Default)]
pub struct SimilarityIndex {
    /// Per-user map: other user -> shared matching-polarity attribute count.
    shared: Vec<BTreeMap<usize, u32>>,
    /// Maximum shared count over distinct user pairs.
    max_shared: u32,
}

impl SimilarityIndex {
    fn add_user(&mut self) {
        self.shared.push(BTreeMap::new());
    }

    fn record_shared(&mut self, u: usize, v: usize) {
        let c = self.shared[u].entry(v).or_insert(0);
        *c += 1;
        let c = *c;
        *self.shared[v].entry(u).or_insert(0) = c;
        if c > self.max_shared {
            self.max_shared = c;
        }
    }

    pub fn shared_count(&self, u: usize, v: usize) -> u32 {
        self.shared[u].get(&v).copied().unwrap_or(0)
    }

    pub fn max_shared(&self) -> u32 {
        self.max_shared
    }
}

/// Edge index partition from [`PreferenceGraph::split_edges`].
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

// --- JSON file schema ---

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    users: Vec<GraphFileUser>,
    attributes: Vec<GraphFileAttribute>,
    edges: Vec<GraphFileEdge>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFileUser {
    id: String,
    feature_mode: FeatureMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFileAttribute {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFileEdge {
    user: String,
    attribute: String,
    polarity: Polarity,
}

/// The heterogeneous bipartite user-preference graph.
#[derive(Debug, Clone, Default)]
pub struct PreferenceGraph {
    users: Vec<UserNode>,
    attributes: Vec<AttributeNode>,
    edges: Vec<PrefEdge>,
    user_index: HashMap<String, usize>,
    attr_index: HashMap<String, usize>,
    user_adj: Vec<Vec<(usize, Polarity)>>,
    attr_adj: Vec<Vec<(usize, Polarity)>>,
    sim: SimilarityIndex,
}

impl PreferenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn users(&self) -> &[UserNode] {
        &self.users
    }

    pub fn attributes(&self) -> &[AttributeNode] {
        &self.attributes
    }

    pub fn edges(&self) -> &[PrefEdge] {
        &self.edges
    }

    pub fn user_id(&self, idx: usize) -> &str {
        &self.users[idx].id
    }

    pub fn user_idx(&self, id: &str) -> GraphResult<usize> {
        self.user_index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownUser(id.to_string()))
    }

    pub fn attr_idx(&self, id: &str) -> GraphResult<usize> {
        self.attr_index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownAttribute(id.to_string()))
    }

    /// Attributes adjacent to a user, with edge polarity.
    pub fn user_adjacency(&self, user: usize) -> &[(usize, Polarity)] {
        &self.user_adj[user]
    }

    /// Users adjacent to an attribute, with edge polarity.
    pub fn attr_adjacency(&self, attr: usize) -> &[(usize, Polarity)] {
        &self.attr_adj[attr]
    }

    pub fn similarity_index(&self) -> &SimilarityIndex {
        &self.sim
    }

    pub fn add_attribute(&mut self, id: &str, text: &str) -> GraphResult<usize> {
        if self.attr_index.contains_key(id) {
            return Err(GraphError::DuplicateId(id.to_string()));
        }
        let feature = embed_attribute(text)?;
        let idx = self.attributes.len();
        self.attributes.push(AttributeNode {
            id: id.to_string(),
            text: text.to_string(),
            feature,
        });
        self.attr_index.insert(id.to_string(), idx);
        self.attr_adj.push(Vec::new());
        Ok(idx)
    }

    /// Add a user whose input features come from the GNN's trainable table.
    pub fn add_training_user(&mut self, id: &str) -> GraphResult<usize> {
        self.push_user(id, FeatureMode::Learnable)
    }

    fn push_user(&mut self, id: &str, mode: FeatureMode) -> GraphResult<usize> {
        if self.user_index.contains_key(id) {
            return Err(GraphError::DuplicateId(id.to_string()));
        }
        let idx = self.users.len();
        self.users.push(UserNode {
            id: id.to_string(),
            feature_mode: mode,
        });
        self.user_index.insert(id.to_string(), idx);
        self.user_adj.push(Vec::new());
        self.sim.add_user();
        Ok(idx)
    }

    /// Insert a like/dislike edge and update the similarity index
    /// incrementally. At most one edge may exist per (user, attribute) pair.
    pub fn add_edge(&mut self, user_id: &str, attr_id: &str, polarity: Polarity) -> GraphResult<()> {
        let u = self.user_idx(user_id)?;
        let a = self.attr_idx(attr_id)?;
        if self.user_adj[u].iter().any(|&(attr, _)| attr == a) {
            return Err(GraphError::DuplicateEdge {
                user: user_id.to_string(),
                attribute: attr_id.to_string(),
            });
        }
        // Every existing matching-polarity neighbor of the attribute now
        // shares one more attribute with this user.
        let peers: Vec<usize> = self.attr_adj[a]
            .iter()
            .filter(|&&(v, pol)| pol == polarity && v != u)
            .map(|&(v, _)| v)
            .collect();
        for v in peers {
            self.sim.record_shared(u, v);
        }
        self.edges.push(PrefEdge {
            user: u,
            attribute: a,
            polarity,
        });
        self.user_adj[u].push((a, polarity));
        self.attr_adj[a].push((u, polarity));
        Ok(())
    }

    /// Add a new zero-feature user connected to existing attributes.
    /// Returns the generated user id.
    pub fn add_user(&mut self, likes: &[String], dislikes: &[String]) -> GraphResult<String> {
        let mut n = self.users.len();
        let id = loop {
            let candidate = format!("new-user-{n:04}");
            if !self.user_index.contains_key(&candidate) {
                break candidate;
            }
            n += 1;
        };
        self.add_user_with_id(&id, likes, dislikes)?;
        Ok(id)
    }

    /// [`PreferenceGraph::add_user`] with a caller-chosen id.
    pub fn add_user_with_id(
        &mut self,
        id: &str,
        likes: &[String],
        dislikes: &[String],
    ) -> GraphResult<usize> {
        for l in likes {
            if dislikes.contains(l) {
                return Err(GraphError::LikeDislikeOverlap(l.clone()));
            }
        }
        // Validate attribute ids before mutating anything.
        for a in likes.iter().chain(dislikes) {
            self.attr_idx(a)?;
        }
        let idx = self.push_user(id, FeatureMode::Zero)?;
        for a in likes {
            self.add_edge(id, a, Polarity::Like)?;
        }
        for a in dislikes {
            self.add_edge(id, a, Polarity::Dislike)?;
        }
        Ok(idx)
    }

    /// Normalized shared-neighbor similarity between two distinct users.
    pub fn similarity(&self, u_id: &str, v_id: &str) -> GraphResult<f64> {
        let u = self.user_idx(u_id)?;
        let v = self.user_idx(v_id)?;
        Ok(self.similarity_by_idx(u, v))
    }

    pub fn similarity_by_idx(&self, u: usize, v: usize) -> f64 {
        if u == v || self.sim.max_shared == 0 {
            return 0.0;
        }
        f64::from(self.sim.shared_count(u, v)) / f64::from(self.sim.max_shared)
    }

    /// Top-K users by similarity weight, descending, ties broken by
    /// ascending user id. Zero-weight users are excluded.
    pub fn k_nearest(&self, user_id: &str, k: usize) -> GraphResult<Vec<(String, f64)>> {
        let u = self.user_idx(user_id)?;
        Ok(self
            .k_nearest_by_idx(u, k)
            .into_iter()
            .map(|(v, w)| (self.users[v].id.clone(), w))
            .collect())
    }

    pub fn k_nearest_by_idx(&self, u: usize, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.sim.max_shared == 0 {
            return Vec::new();
        }
        let mut neighbors: Vec<(usize, u32)> = self.sim.shared[u]
            .iter()
            .filter(|&(_, &c)| c > 0)
            .map(|(&v, &c)| (v, c))
            .collect();
        neighbors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| self.users[a.0].id.cmp(&self.users[b.0].id)));
        neighbors.truncate(k);
        neighbors
            .into_iter()
            .map(|(v, c)| (v, f64::from(c) / f64::from(self.sim.max_shared)))
            .collect()
    }

    /// Deterministic 60/20/20 partition of edge indices.
    pub fn split_edges(&self, seed: u64) -> GraphResult<EdgeSplit> {
        let n = self.edges.len();
        if n < 5 {
            return Err(GraphError::TooFewEdges { need: 5, have: n });
        }
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let n_train = n * 60 / 100;
        let n_val = n * 20 / 100;
        Ok(EdgeSplit {
            train: indices[..n_train].to_vec(),
            val: indices[n_train..n_train + n_val].to_vec(),
            test: indices[n_train + n_val..].to_vec(),
        })
    }

    /// Liked attribute ids of a user.
    pub fn liked_attributes(&self, user: usize) -> Vec<String> {
        self.user_adj[user]
            .iter()
            .filter(|&&(_, p)| p == Polarity::Like)
            .map(|&(a, _)| self.attributes[a].id.clone())
            .collect()
    }

    pub fn disliked_attributes(&self, user: usize) -> Vec<String> {
        self.user_adj[user]
            .iter()
            .filter(|&&(_, p)| p == Polarity::Dislike)
            .map(|&(a, _)| self.attributes[a].id.clone())
            .collect()
    }

    // --- persistence ---

    pub fn to_json(&self) -> GraphResult<String> {
        let file = GraphFile {
            users: self
                .users
                .iter()
                .map(|u| GraphFileUser {
                    id: u.id.clone(),
                    feature_mode: u.feature_mode,
                })
                .collect(),
            attributes: self
                .attributes
                .iter()
                .map(|a| GraphFileAttribute {
                    id: a.id.clone(),
                    text: a.text.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| GraphFileEdge {
                    user: self.users[e.user].id.clone(),
                    attribute: self.attributes[e.attribute].id.clone(),
                    polarity: e.polarity,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> GraphResult<Self> {
        let file: GraphFile =
            serde_json::from_str(json).map_err(|e| GraphError::InvalidFile(e.to_string()))?;
        let mut graph = PreferenceGraph::new();
        for a in &file.attributes {
            graph.add_attribute(&a.id, &a.text)?;
        }
        for u in &file.users {
            graph.push_user(&u.id, u.feature_mode)?;
        }
        for e in &file.edges {
            graph.add_edge(&e.user, &e.attribute, e.polarity)?;
        }
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> GraphResult<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> GraphResult<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent oracle: recompute every pairwise weight from raw edge
    /// lists with set intersections.
    pub(crate) fn oracle_weights(graph: &PreferenceGraph) -> Vec<Vec<f64>> {
        let n = graph.num_users();
        let sets: Vec<std::collections::HashSet<(usize, Polarity)>> = (0..n)
            .map(|u| graph.user_adjacency(u).iter().copied().collect())
            .collect();
        let mut counts = vec![vec![0u32; n]; n];
        let mut max = 0u32;
        for u in 0..n {
            for v in (u + 1)..n {
                let c = sets[u].intersection(&sets[v]).count() as u32;
                counts[u][v] = c;
                counts[v][u] = c;
                max = max.max(c);
            }
        }
        let mut w = vec![vec![0.0; n]; n];
        if max > 0 {
            for u in 0..n {
                for v in 0..n {
                    if u != v {
                        w[u][v] = f64::from(counts[u][v]) / f64::from(max);
                    }
                }
            }
        }
        w
    }

    fn toy_graph() -> PreferenceGraph {
        let mut g = PreferenceGraph::new();
        for (id, text) in [("a1", "neon colors"), ("a2", "rustic"), ("a3", "pastel"), ("a4", "gothic")] {
            g.add_attribute(id, text).unwrap();
        }
        for u in ["alice", "bob", "carol"] {
            g.add_training_user(u).unwrap();
        }
        g
    }

    #[test]
    fn embed_attribute_is_deterministic_and_unit_norm() {
        let a = embed_attribute("rustic").unwrap();
        let b = embed_attribute("rustic").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embed_attribute("").is_err());
        assert!(embed_attribute("   ").is_err());
    }

    #[test]
    fn embed_attribute_separates_distinct_phrases() {
        let a = embed_attribute("neon colors").unwrap();
        let b = embed_attribute("muted tones").unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.99, "cosine {cos}");
    }

    #[test]
    fn empty_intersection_gives_zero() {
        let mut g = toy_graph();
        g.add_edge("alice", "a1", Polarity::Like).unwrap();
        g.add_edge("bob", "a2", Polarity::Like).unwrap();
        assert_eq!(g.similarity("alice", "bob").unwrap(), 0.0);
    }

    #[test]
    fn three_user_weights_match_hand_enumeration() {
        // |P(A) cap P(B)| = 2, |P(A) cap P(C)| = 1, |P(B) cap P(C)| = 1
        let mut g = toy_graph();
        g.add_edge("alice", "a1", Polarity::Like).unwrap();
        g.add_edge("alice", "a2", Polarity::Like).unwrap();
        g.add_edge("bob", "a1", Polarity::Like).unwrap();
        g.add_edge("bob", "a2", Polarity::Like).unwrap();
        g.add_edge("carol", "a2", Polarity::Like).unwrap();
        g.add_edge("carol", "a4", Polarity::Dislike).unwrap();
        assert_eq!(g.similarity("alice", "bob").unwrap(), 1.0);
        assert_eq!(g.similarity("alice", "carol").unwrap(), 0.5);
        assert_eq!(g.similarity("bob", "carol").unwrap(), 0.5);
    }

    #[test]
    fn opposite_polarity_overlap_contributes_nothing() {
        let mut g = toy_graph();
        g.add_edge("alice", "a1", Polarity::Like).unwrap();
        g.add_edge("bob", "a1", Polarity::Dislike).unwrap();
        assert_eq!(g.similarity("alice", "bob").unwrap(), 0.0);
        // Matching dislikes do count.
        g.add_edge("alice", "a4", Polarity::Dislike).unwrap();
        g.add_edge("bob", "a4", Polarity::Dislike).unwrap();
        assert_eq!(g.similarity("alice", "bob").unwrap(), 1.0);
    }

    fn random_graph(seed: u64, n_users: usize, n_attrs: usize) -> PreferenceGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PreferenceGraph::new();
        for a in 0..n_attrs {
            g.add_attribute(&format!("attr-{a:02}"), &format!("attribute {a}"))
                .unwrap();
        }
        for u in 0..n_users {
            let id = format!("user-{u:02}");
            g.add_training_user(&id).unwrap();
            for a in 0..n_attrs {
                if rng.gen_bool(0.3) {
                    let pol = if rng.gen_bool(0.5) {
                        Polarity::Like
                    } else {
                        Polarity::Dislike
                    };
                    g.add_edge(&id, &format!("attr-{a:02}"), pol).unwrap();
                }
            }
        }
        g
    }

    #[test]
    fn random_graphs_match_set_intersection_oracle() {
        for seed in 0..10 {
            let g = random_graph(seed, 20, 12);
            let oracle = oracle_weights(&g);
            for u in 0..20 {
                for v in 0..20 {
                    if u != v {
                        assert_eq!(
                            g.similarity_by_idx(u, v),
                            oracle[u][v],
                            "seed {seed} pair ({u},{v})"
                        );
                        assert_eq!(g.similarity_by_idx(u, v), g.similarity_by_idx(v, u));
                        assert!((0.0..=1.0).contains(&g.similarity_by_idx(u, v)));
                    }
                }
            }
        }
    }

    #[test]
    fn some_pair_attains_the_bound_when_any_pair_shares() {
        let g = random_graph(3, 12, 8);
        if g.similarity_index().max_shared() > 0 {
            let mut found = false;
            for u in 0..g.num_users() {
                for v in 0..g.num_users() {
                    if u != v && g.similarity_by_idx(u, v) == 1.0 {
                        found = true;
                    }
                }
            }
            assert!(found);
        }
    }

    #[test]
    fn k_nearest_ordering_and_bounds() {
        let mut g = toy_graph();
        g.add_training_user("dave").unwrap();
        g.add_edge("alice", "a1", Polarity::Like).unwrap();
        g.add_edge("alice", "a2", Polarity::Like).unwrap();
        g.add_edge("bob", "a1", Polarity::Like).unwrap();
        g.add_edge("bob", "a2", Polarity::Like).unwrap();
        g.add_edge("carol", "a1", Polarity::Like).unwrap();
        // dave has no edges: zero weight, excluded everywhere.

        assert!(g.k_nearest("alice", 0).unwrap().is_empty());
        let nn = g.k_nearest("alice", 10).unwrap();
        assert_eq!(nn.len(), 2); // dave excluded
        assert_eq!(nn[0].0, "bob");
        assert_eq!(nn[0].1, 1.0);
        assert_eq!(nn[1].0, "carol");
        assert_eq!(nn[1].1, 0.5);
        assert!(g.k_nearest("dave", 5).unwrap().is_empty());
        assert!(g.k_nearest("nobody", 3).is_err());
    }

    #[test]
    fn k_nearest_breaks_ties_by_ascending_id() {
        let mut g = PreferenceGraph::new();
        g.add_attribute("x", "shared thing").unwrap();
        for u in ["u-anchor", "u-zeta", "u-alpha", "u-mid"] {
            g.add_training_user(u).unwrap();
            g.add_edge(u, "x", Polarity::Like).unwrap();
        }
        let nn = g.k_nearest("u-anchor", 2).unwrap();
        assert_eq!(nn[0].0, "u-alpha");
        assert_eq!(nn[1].0, "u-mid");
    }

    #[test]
    fn split_edges_is_a_deterministic_partition() {
        let g = random_graph(11, 10, 20);
        let n = g.num_edges();
        let s1 = g.split_edges(42).unwrap();
        let s2 = g.split_edges(42).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.val, s2.val);
        assert_eq!(s1.test, s2.test);

        let mut all: Vec<usize> = s1
            .train
            .iter()
            .chain(&s1.val)
            .chain(&s1.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());

        let s3 = g.split_edges(43).unwrap();
        assert_ne!(s1.train, s3.train);
    }

    #[test]
    fn split_ratios_are_sixty_twenty_twenty() {
        let mut g = PreferenceGraph::new();
        for a in 0..10 {
            g.add_attribute(&format!("a{a}"), &format!("thing {a}")).unwrap();
        }
        for u in 0..10 {
            let id = format!("u{u}");
            g.add_training_user(&id).unwrap();
            for a in 0..10 {
                g.add_edge(&id, &format!("a{a}"), Polarity::Like).unwrap();
            }
        }
        assert_eq!(g.num_edges(), 100);
        let s = g.split_edges(0).unwrap();
        assert_eq!(s.train.len(), 60);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn split_requires_five_edges() {
        let mut g = toy_graph();
        g.add_edge("alice", "a1", Polarity::Like).unwrap();
        assert!(matches!(
            g.split_edges(0),
            Err(GraphError::TooFewEdges { .. })
        ));
    }

    #[test]
    fn add_user_validates_and_matches_oracle() {
        let mut g = random_graph(5, 8, 10);
        let err = g.add_user(
            &["attr-01".into(), "attr-02".into()],
            &["attr-02".into()],
        );
        assert!(matches!(err, Err(GraphError::LikeDislikeOverlap(_))));
        assert!(g
            .add_user(&["no-such-attr".into()], &[])
            .is_err());

        let before = g.num_users();
        let id = g
            .add_user(&["attr-01".into(), "attr-03".into()], &["attr-05".into()])
            .unwrap();
        assert_eq!(g.num_users(), before + 1);
        let idx = g.user_idx(&id).unwrap();
        assert_eq!(g.users()[idx].feature_mode, FeatureMode::Zero);

        let oracle = oracle_weights(&g);
        for u in 0..g.num_users() {
            for v in 0..g.num_users() {
                if u != v {
                    assert_eq!(g.similarity_by_idx(u, v), oracle[u][v]);
                }
            }
        }
    }

    #[test]
    fn add_user_with_no_edges_has_zero_weights() {
        let mut g = random_graph(6, 6, 8);
        let id = g.add_user(&[], &[]).unwrap();
        for v in 0..g.num_users() - 1 {
            assert_eq!(g.similarity(&id, &g.users()[v].id.clone()).unwrap(), 0.0);
        }
        assert!(g.k_nearest(&id, 3).unwrap().is_empty());
    }

    #[test]
    fn incremental_index_equals_recomputation_after_random_insertions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = PreferenceGraph::new();
        for a in 0..15 {
            g.add_attribute(&format!("a{a:02}"), &format!("attr {a}")).unwrap();
        }
        for step in 0..25 {
            let n_likes = rng.gen_range(0..5);
            let n_dislikes = rng.gen_range(0..4);
            let mut pool: Vec<String> = (0..15).map(|a| format!("a{a:02}")).collect();
            pool.shuffle(&mut rng);
            let likes: Vec<String> = pool[..n_likes].to_vec();
            let dislikes: Vec<String> = pool[n_likes..n_likes + n_dislikes].to_vec();
            g.add_user(&likes, &dislikes).unwrap();

            let oracle = oracle_weights(&g);
            for u in 0..g.num_users() {
                for v in 0..g.num_users() {
                    if u != v {
                        assert_eq!(
                            g.similarity_by_idx(u, v),
                            oracle[u][v],
                            "step {step} pair ({u},{v})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let g = random_graph(8, 6, 9);
        let json = g.to_json().unwrap();
        let g2 = PreferenceGraph::from_json(&json).unwrap();
        assert_eq!(g.num_users(), g2.num_users());
        assert_eq!(g.num_edges(), g2.num_edges());
        assert_eq!(g2.to_json().unwrap(), json);
        for u in 0..g.num_users() {
            for v in 0..g.num_users() {
                if u != v {
                    assert_eq!(g.similarity_by_idx(u, v), g2.similarity_by_idx(u, v));
                }
            }
        }
    }

    #[test]
    fn loader_rejects_duplicate_edges_and_unknown_refs() {
        let json = r#"{
            "users": [{"id": "u1", "feature_mode": "learnable"}],
            "attributes": [{"id": "a1", "text": "neon"}],
            "edges": [
                {"user": "u1", "attribute": "a1", "polarity": "like"},
                {"user": "u1", "attribute": "a1", "polarity": "dislike"}
            ]
        }"#;
        assert!(matches!(
            PreferenceGraph::from_json(json),
            Err(GraphError::DuplicateEdge { .. })
        ));

        let json2 = r#"{
            "users": [{"id": "u1", "feature_mode": "zero"}],
            "attributes": [],
            "edges": [{"user": "u1", "attribute": "ghost", "polarity": "like"}]
        }"#;
        assert!(matches!(
            PreferenceGraph::from_json(json2),
            Err(GraphError::UnknownAttribute(_))
        ));

        assert!(matches!(
            PreferenceGraph::from_json("{\"bogus\": []}"),
            Err(GraphError::InvalidFile(_))
        ));
    }
}
