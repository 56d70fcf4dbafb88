use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{assemble, cluster_rng, rows_of, ClusterAssignment, ClusterConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Converged,
    AllSingletons,
}

/// Outcome of Lloyd's algorithm on one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LloydTrace {
    pub assign: Vec<usize>,
    pub centroids: Tensor,
    pub iterations: usize,
    pub stop: StopReason,
    /// Objective after each iteration's centroid update.
    pub objectives: Vec<f64>,
    /// Objective of the returned assignment (after any final repair).
    pub final_objective: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// D²-weighted seeding. Falls back to a uniform draw if every point already
/// coincides with a chosen centroid.
pub fn kmeanspp_seed(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = x.rows();
    let d = x.cols();
    if k == 0 || k > n {
        return Err(Error::contract(format!("cannot seed {k} centroids from {n} rows")));
    }
    let mut chosen = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    chosen.extend_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave u at the very top of the range
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
        chosen.extend_from_slice(x.row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    Tensor::matrix(k, d, chosen)
}

fn nearest(row: &[f64], centroids: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let dd = sq_dist(row, centroids.row(c));
        if dd < best_d {
            best = c;
            best_d = dd;
        }
    }
    best
}

fn update_centroids(x: &Tensor, assign: &[usize], centroids: &mut Tensor) -> Vec<usize> {
    let k = centroids.rows();
    let d = x.cols();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = s / inv;
            }
        }
    }
    counts
}

/// `Σ_i ‖x_i − c_{assign(i)}‖²`
pub fn lloyd_objective(x: &Tensor, assign: &[usize], centroids: &Tensor) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), centroids.row(c)))
        .sum()
}

/// Moves the member of the largest cluster farthest from its centroid into each
/// still-empty cluster.
fn repair_empty(x: &Tensor, assign: &mut [usize], centroids: &mut Tensor) {
    loop {
        let mut counts = update_centroids(x, assign, centroids);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &c) in assign.iter().enumerate() {
            if c == largest {
                let dd = sq_dist(x.row(i), centroids.row(c));
                if dd > far_d {
                    far = Some(i);
                    far_d = dd;
                }
            }
        }
        let i = far.expect("largest cluster has members");
        assign[i] = empty;
        counts[largest] -= 1;
    }
}

/// Lloyd iterations from K-means++ seeds on the rows of one graph.
pub fn kmeans_graph(x: &Tensor, k: usize, cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> Result<LloydTrace> {
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite clustering features".into()));
    }
    let n = x.rows();
    let mut centroids = kmeanspp_seed(x, k, rng)?;
    let mut assign = vec![0; n];
    let mut objectives = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let old = centroids.clone();
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(x.row(i), &centroids);
        }
        let counts = update_centroids(x, &assign, &mut centroids);
        objectives.push(lloyd_objective(x, &assign, &centroids));
        for c in 0..k {
            if counts[c] == 0 {
                let r = rng.random_range(0..n);
                centroids.row_mut(c).copy_from_slice(x.row(r));
            }
        }
        if k == 1 {
            stop = StopReason::Converged;
            break;
        }
        if counts.iter().all(|&c| c == 1) {
            stop = StopReason::AllSingletons;
            break;
        }
        let moved: f64 = sq_dist(centroids.data(), old.data()).sqrt();
        if moved <= cfg.tolerance {
            stop = StopReason::Converged;
            break;
        }
    }
    repair_empty(x, &mut assign, &mut centroids);
    let final_objective = lloyd_objective(x, &assign, &centroids);
    Ok(LloydTrace {
        assign,
        centroids,
        iterations,
        stop,
        objectives,
        final_objective,
    })
}

/// K-means++ / Lloyd clustering of every graph, with one RNG stream per graph
/// keyed by `graph_ids[g]`.
pub fn kmeans_cluster(
    x: &Tensor,
    graph_of_node: &[usize],
    graph_ids: &[u64],
    positions: &[[f64; 3]],
    cfg: &ClusterConfig,
    epoch: u64,
) -> Result<(ClusterAssignment, Vec<LloydTrace>)> {
    cfg.validate()?;
    if x.rows() != graph_of_node.len() {
        return Err(Error::Dimension {
            op: "kmeans_cluster",
            lhs: x.shape().to_vec(),
            rhs: vec![graph_of_node.len()],
        });
    }
    let mut traces = Vec::new();
    let assignment = assemble(graph_of_node, positions, |g, nodes| {
        let id = *graph_ids.get(g).ok_or(Error::Index {
            what: "graph id",
            index: g,
            bound: graph_ids.len(),
        })?;
        let mut rng = cluster_rng(cfg.rng_seed, epoch, id);
        let trace = kmeans_graph(&rows_of(x, nodes), cfg.target_count(nodes.len()), cfg, &mut rng)?;
        let a = trace.assign.clone();
        traces.push(trace);
        Ok(a)
    })?;
    Ok((assignment, traces))
}
