use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{assemble, cluster_rng, ClusterAssignment};
use crate::error::{Error, Result};

/// Random assignment of `n` nodes to `k` clusters.
///
/// Balanced mode shuffles and cuts into contiguous chunks whose sizes differ by
/// at most one. Unbalanced mode draws each id uniformly, then fills empty ids by
/// moving random nodes out of clusters that can spare one.
pub fn random_graph(n: usize, k: usize, balanced: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = k.clamp(1, n.max(1));
    if balanced {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let (base, extra) = (n / k, n % k);
        let mut assign = vec![0; n];
        let mut pos = 0;
        for c in 0..k {
            let size = base + usize::from(c < extra);
            for &i in &perm[pos..pos + size] {
                assign[i] = c;
            }
            pos += size;
        }
        return assign;
    }
    let mut assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut counts = vec![0usize; k];
    for &c in &assign {
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let donors: Vec<usize> = (0..n).filter(|&i| counts[assign[i]] > 1).collect();
        let i = donors[rng.random_range(0..donors.len())];
        counts[assign[i]] -= 1;
        assign[i] = c;
        counts[c] = 1;
    }
    assign
}

/// Random clustering of every graph with per-graph RNG streams.
pub fn random_clusters(
    graph_of_node: &[usize],
    graph_ids: &[u64],
    positions: &[[f64; 3]],
    r: usize,
    seed: u64,
    epoch: u64,
    balanced: bool,
) -> Result<ClusterAssignment> {
    if r < 2 {
        return Err(Error::Config("reduction_ratio must be at least 2".into()));
    }
    assemble(graph_of_node, positions, |g, nodes| {
        let id = *graph_ids.get(g).ok_or(Error::Index {
            what: "graph id",
            index: g,
            bound: graph_ids.len(),
        })?;
        let mut rng = cluster_rng(seed, epoch, id);
        Ok(random_graph(
            nodes.len(),
            super::target_cluster_count(nodes.len(), r),
            balanced,
            &mut rng,
        ))
    })
}
