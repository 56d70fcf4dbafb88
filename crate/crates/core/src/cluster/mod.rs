//! Per-graph clustering: element-type grouping, K-means++ / Lloyd, and the
//! random baselines used for ablation.

mod kmeans;
mod random;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_cluster, kmeans_graph, kmeanspp_seed, lloyd_objective, LloydTrace, StopReason};
pub use random::{random_clusters, random_graph};

use crate::error::{Error, Result};
use crate::moldata::Batch;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "kmeanspp")]
    KMeansPP,
    Random,
    RandomBalanced,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeanspp" => Ok(Strategy::KMeansPP),
            "random" => Ok(Strategy::Random),
            "random_balanced" => Ok(Strategy::RandomBalanced),
            _ => Err(Error::Config(format!("unknown clustering strategy {s:?}"))),
        }
    }
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::KMeansPP => "kmeanspp",
            Strategy::Random => "random",
            Strategy::RandomBalanced => "random_balanced",
        }
    }
}

/// How the per-graph cluster count is derived from the node count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountRule {
    /// `max(1, ceil(n / r))`
    #[default]
    Ceil,
    /// `max(1, floor(n / r))`
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub reduction_ratio: usize,
    pub tolerance: f64,
    pub max_iters: usize,
    pub strategy: Strategy,
    pub rng_seed: u64,
    pub count_rule: CountRule,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            reduction_ratio: 2,
            tolerance: 1e-4,
            max_iters: 10,
            strategy: Strategy::KMeansPP,
            rng_seed: 0,
            count_rule: CountRule::Ceil,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio < 2 {
            return Err(Error::Config("reduction_ratio must be at least 2".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn target_count(&self, n: usize) -> usize {
        match self.count_rule {
            CountRule::Ceil => target_cluster_count(n, self.reduction_ratio),
            CountRule::Floor => (n / self.reduction_ratio).max(1),
        }
    }
}

/// `max(1, ceil(n / r))`.
pub fn target_cluster_count(n_nodes: usize, r: usize) -> usize {
    n_nodes.div_ceil(r).max(1)
}

/// Counter-based stream keyed by `(seed, epoch, graph_ordinal)`.
pub fn cluster_rng(seed: u64, epoch: u64, graph_ordinal: u64) -> ChaCha8Rng {
    let mut z = seed ^ epoch.rotate_left(32) ^ 0x6a09e667f3bcc909;
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(graph_ordinal);
    rng
}

/// Hard assignment of nodes to clusters at one hierarchy level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assign: Vec<usize>,
    pub k: usize,
    /// Mean position of each cluster's members (Å).
    pub centroid_pos: Vec<[f64; 3]>,
    pub graph_of_cluster: Vec<usize>,
}

impl ClusterAssignment {
    /// Validates `assign` and derives centroids and cluster graph ids.
    pub fn from_parts(assign: Vec<usize>, k: usize, graph_of_node: &[usize], positions: &[[f64; 3]]) -> Result<Self> {
        if assign.len() != graph_of_node.len() || assign.len() != positions.len() {
            return Err(Error::contract(
                "assignment, graph index and positions differ in length",
            ));
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        let mut graph_of_cluster: Vec<Option<usize>> = vec![None; k];
        for (i, &c) in assign.iter().enumerate() {
            if c >= k {
                return Err(Error::Index {
                    what: "cluster id",
                    index: c,
                    bound: k,
                });
            }
            counts[c] += 1;
            for d in 0..3 {
                sums[c][d] += positions[i][d];
            }
            match graph_of_cluster[c] {
                None => graph_of_cluster[c] = Some(graph_of_node[i]),
                Some(g) if g != graph_of_node[i] => {
                    return Err(Error::contract(format!(
                        "cluster {c} spans graphs {g} and {}",
                        graph_of_node[i]
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::contract(format!("cluster {c} is empty")));
        }
        let centroid_pos = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.map(|v| v / n as f64))
            .collect();
        Ok(ClusterAssignment {
            assign,
            k,
            centroid_pos,
            graph_of_cluster: graph_of_cluster.into_iter().map(|g| g.expect("non-empty")).collect(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.assign {
            s[c] += 1;
        }
        s
    }
}

/// Nodes of each graph, in ascending node order, keyed by graph id.
pub(crate) fn nodes_by_graph(graph_of_node: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in graph_of_node.iter().enumerate() {
        m.entry(g).or_default().push(i);
    }
    m
}

/// One cluster per distinct element in each graph; ids are graph-major, then by ascending Z.
pub fn element_clusters(batch: &Batch) -> Result<ClusterAssignment> {
    let mut assign = vec![0; batch.n_atoms()];
    let mut k = 0;
    for g in 0..batch.n_graphs {
        let atoms = batch.atoms_of(g);
        let mut elems: Vec<u32> = batch.z[atoms.clone()].to_vec();
        elems.sort_unstable();
        elems.dedup();
        for i in atoms {
            assign[i] = k + elems.binary_search(&batch.z[i]).expect("present");
        }
        k += elems.len();
    }
    ClusterAssignment::from_parts(assign, k, &batch.graph_index, &batch.positions)
}

/// Local assignment for one graph under the configured strategy.
pub fn cluster_graph(x: &Tensor, cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let k = cfg.target_count(x.rows());
    match cfg.strategy {
        Strategy::KMeansPP => kmeans_graph(x, k, cfg, rng).map(|t| t.assign),
        Strategy::Random => Ok(random_graph(x.rows(), k, false, rng)),
        Strategy::RandomBalanced => Ok(random_graph(x.rows(), k, true, rng)),
    }
}

pub(crate) fn rows_of(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("consistent")
}

/// Runs `per_graph` on every graph's rows and stitches graph-major cluster ids.
pub(crate) fn assemble<F>(
    graph_of_node: &[usize],
    positions: &[[f64; 3]],
    mut per_graph: F,
) -> Result<ClusterAssignment>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<usize>>,
{
    let mut assign = vec![0; graph_of_node.len()];
    let mut k = 0;
    for (g, nodes) in nodes_by_graph(graph_of_node) {
        let local = per_graph(g, &nodes)?;
        let kg = local.iter().max().map_or(0, |m| m + 1);
        for (&i, &c) in nodes.iter().zip(&local) {
            assign[i] = k + c;
        }
        k += kg;
    }
    ClusterAssignment::from_parts(assign, k, graph_of_node, positions)
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use super::*;
    use crate::moldata::{batch, Molecule};

    #[test]
    fn target_counts() {
        assert_eq!(target_cluster_count(8, 2), 4);
        assert_eq!(target_cluster_count(1, 2), 1);
        assert_eq!(target_cluster_count(7, 2), 4);
        let floor = ClusterConfig {
            count_rule: CountRule::Floor,
            ..Default::default()
        };
        assert_eq!(floor.target_count(7), 3);
        assert_eq!(floor.target_count(1), 1);
    }

    fn mol(z: &[u32]) -> Molecule {
        Molecule::new(
            z.to_vec(),
            (0..z.len()).map(|i| [i as f64, 0.5 * i as f64, 0.0]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn water_elements() {
        let b = batch(&[mol(&[1, 1, 8])]).unwrap();
        let c = element_clusters(&b).unwrap();
        assert_eq!(c.assign, vec![0, 0, 1]);
        assert_eq!(c.k, 2);
        assert_eq!(c.centroid_pos[0], [0.5, 0.25, 0.0]);
    }

    #[test]
    fn single_element_single_cluster() {
        let b = batch(&[mol(&[6, 6, 6, 6])]).unwrap();
        let c = element_clusters(&b).unwrap();
        assert_eq!(c.k, 1);
        assert!(c.assign.iter().all(|a| *a == 0));
    }

    #[test]
    fn two_graphs_match_set_oracle() {
        let b = batch(&[mol(&[8, 1, 1, 8, 1]), mol(&[6, 6])]).unwrap();
        let c = element_clusters(&b).unwrap();
        assert_eq!(c.k, 3);
        // oracle: (graph, Z) pairs form the clusters
        let mut key_of: HashMap<usize, (usize, u32)> = HashMap::new();
        for i in 0..b.n_atoms() {
            let key = (b.graph_index[i], b.z[i]);
            if let Some(prev) = key_of.insert(c.assign[i], key) {
                assert_eq!(prev, key);
            }
        }
        let expected: HashSet<(usize, u32)> = (0..b.n_atoms()).map(|i| (b.graph_index[i], b.z[i])).collect();
        assert_eq!(key_of.values().copied().collect::<HashSet<_>>(), expected);
        assert_eq!(c.graph_of_cluster, vec![0, 0, 1]);
    }

    #[test]
    fn from_parts_rejects_bad_assignments() {
        let pos = [[0.0; 3]; 3];
        assert!(ClusterAssignment::from_parts(vec![0, 0, 2], 3, &[0, 0, 0], &pos).is_err());
        assert!(ClusterAssignment::from_parts(vec![0, 0, 1], 2, &[0, 1, 1], &pos).is_err());
        assert!(ClusterAssignment::from_parts(vec![0, 3, 1], 2, &[0, 0, 0], &pos).is_err());
    }

    #[test]
    fn rng_streams_are_distinct_and_reproducible() {
        use rand::Rng;
        let a: u64 = cluster_rng(1, 2, 3).random();
        assert_eq!(a, cluster_rng(1, 2, 3).random::<u64>());
        assert_ne!(a, cluster_rng(1, 2, 4).random::<u64>());
        assert_ne!(a, cluster_rng(1, 3, 3).random::<u64>());
        assert_ne!(a, cluster_rng(2, 2, 3).random::<u64>());
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(ClusterConfig::default().validate().is_ok());
        let bad = ClusterConfig {
            reduction_ratio: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("random_balanced".parse::<Strategy>().unwrap(), Strategy::RandomBalanced);
        assert!("spectral".parse::<Strategy>().is_err());
        let cfg: ClusterConfig = serde_json::from_str(r#"{"strategy":"random"}"#).unwrap();
        assert_eq!(cfg.strategy, Strategy::Random);
        assert!(serde_json::from_str::<ClusterConfig>(r#"{"bogus":1}"#).is_err());
    }
}
