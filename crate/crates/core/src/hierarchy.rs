//! Multi-level cluster hierarchy over star topologies, with the aggregation and
//! dissemination operators that move features between levels.
//!
//! Depth is decided per graph: a graph stops contributing nodes once one of its
//! levels has a single cluster. Each level therefore records which nodes of the
//! level below take part (`members`).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::{element_clusters, kmeans_cluster, random_clusters, ClusterAssignment, ClusterConfig, Strategy};
use crate::error::{Error, Result};
use crate::geometry::{rbf_expand, RbfSpec};
use crate::moldata::Batch;
use crate::numcore::{Tape, Tensor, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    /// Nodes of the level below that belong to this level's stars, ascending.
    pub members: Arc<[usize]>,
    /// Cluster of each member; `assign[m]` is the cluster of `members[m]`.
    pub assignment: ClusterAssignment,
}

impl Level {
    pub fn k(&self) -> usize {
        self.assignment.k
    }

    pub fn seg(&self) -> Arc<[usize]> {
        self.assignment.assign.as_slice().into()
    }

    /// One star edge per member.
    pub fn star_edge_count(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub n_atoms: usize,
    pub n_graphs: usize,
}

fn mean_rows(x: &Tensor, rows: &[usize], seg: &[usize], k: usize) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; k * c];
    let mut n = vec![0usize; k];
    for (&r, &s) in rows.iter().zip(seg) {
        n[s] += 1;
        for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    for s in 0..k {
        let inv = 1.0 / n[s].max(1) as f64;
        out[s * c..(s + 1) * c].iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::matrix(k, c, out).expect("consistent")
}

/// Element clusters at level 1, then adaptive levels clustered on pooled
/// member features until `n_levels` or every graph is down to one cluster.
pub fn build_hierarchy(
    batch: &Batch,
    features: &Tensor,
    n_levels: usize,
    cfg: &ClusterConfig,
    epoch: u64,
) -> Result<Hierarchy> {
    if n_levels == 0 {
        return Err(Error::contract("hierarchy needs at least one level"));
    }
    if features.rows() != batch.n_atoms() {
        return Err(Error::Dimension {
            op: "build_hierarchy",
            lhs: features.shape().to_vec(),
            rhs: vec![batch.n_atoms()],
        });
    }
    cfg.validate()?;
    let first = element_clusters(batch)?;
    let all: Vec<usize> = (0..batch.n_atoms()).collect();
    let mut feats = mean_rows(features, &all, &first.assign, first.k);
    let mut levels = vec![Level {
        members: all.into(),
        assignment: first,
    }];
    while levels.len() < n_levels {
        let prev = &levels.last().expect("non-empty").assignment;
        let mut per_graph = vec![0usize; batch.n_graphs];
        for &g in &prev.graph_of_cluster {
            per_graph[g] += 1;
        }
        let members: Vec<usize> = (0..prev.k)
            .filter(|&c| per_graph[prev.graph_of_cluster[c]] > 1)
            .collect();
        if members.is_empty() {
            break;
        }
        let graph_of: Vec<usize> = members.iter().map(|&c| prev.graph_of_cluster[c]).collect();
        let pos: Vec<[f64; 3]> = members.iter().map(|&c| prev.centroid_pos[c]).collect();
        let assignment = match cfg.strategy {
            Strategy::KMeansPP => {
                let x = crate::cluster::rows_of(&feats, &members);
                kmeans_cluster(&x, &graph_of, &batch.graph_ids, &pos, cfg, epoch)?.0
            }
            Strategy::Random | Strategy::RandomBalanced => random_clusters(
                &graph_of,
                &batch.graph_ids,
                &pos,
                cfg.reduction_ratio,
                cfg.rng_seed,
                epoch,
                cfg.strategy == Strategy::RandomBalanced,
            )?,
        };
        feats = mean_rows(&feats, &members, &assignment.assign, assignment.k);
        levels.push(Level {
            members: members.into(),
            assignment,
        });
    }
    Ok(Hierarchy {
        levels,
        n_atoms: batch.n_atoms(),
        n_graphs: batch.n_graphs,
    })
}

/// Element-type level only; the bootstrap hierarchy before any learned features exist.
pub fn element_hierarchy(batch: &Batch) -> Result<Hierarchy> {
    let first = element_clusters(batch)?;
    Ok(Hierarchy {
        levels: vec![Level {
            members: (0..batch.n_atoms()).collect::<Vec<_>>().into(),
            assignment: first,
        }],
        n_atoms: batch.n_atoms(),
        n_graphs: batch.n_graphs,
    })
}

impl Hierarchy {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Node count of level `l` (0 = atoms).
    pub fn node_count(&self, l: usize) -> usize {
        if l == 0 {
            self.n_atoms
        } else {
            self.levels[l - 1].k()
        }
    }

    /// Clusters each graph ends on: `(level index, cluster ids)` for every
    /// level holding at least one final cluster, in level order.
    pub fn coarsest(&self) -> Vec<(usize, Arc<[usize]>)> {
        let mut out = Vec::new();
        for (li, level) in self.levels.iter().enumerate() {
            let k = level.k();
            let ids: Vec<usize> = match self.levels.get(li + 1) {
                None => (0..k).collect(),
                Some(next) => {
                    let mut used = vec![false; k];
                    next.members.iter().for_each(|&m| used[m] = true);
                    (0..k).filter(|&c| !used[c]).collect()
                }
            };
            if !ids.is_empty() {
                out.push((li, ids.into()));
            }
        }
        out
    }

    /// Cluster count per level for graph `g`.
    pub fn level_sizes(&self, g: usize) -> Vec<usize> {
        self.levels
            .iter()
            .map(|l| l.assignment.graph_of_cluster.iter().filter(|&&x| x == g).count())
            .take_while(|&n| n > 0)
            .collect()
    }

    /// One line `graph_id node_id level cluster_id` per node and level, with
    /// node and cluster ids local to their graph. Level 1 nodes are atoms.
    pub fn dump(&self, graph_ids: &[u64]) -> Result<String> {
        use std::fmt::Write as _;
        if graph_ids.len() != self.n_graphs {
            return Err(Error::contract("one graph id per graph required"));
        }
        let Some(first) = self.levels.first() else {
            return Ok(String::new());
        };
        let local = |graph_of: &[usize]| {
            let mut next = vec![0usize; self.n_graphs];
            graph_of
                .iter()
                .map(|&g| {
                    next[g] += 1;
                    next[g] - 1
                })
                .collect::<Vec<_>>()
        };
        let mut graph_below: Vec<usize> = first
            .assignment
            .assign
            .iter()
            .map(|&c| first.assignment.graph_of_cluster[c])
            .collect();
        let mut local_below = local(&graph_below);
        let mut s = String::new();
        for (li, level) in self.levels.iter().enumerate() {
            let gof = &level.assignment.graph_of_cluster;
            let local_here = local(gof);
            for (&m, &c) in level.members.iter().zip(&level.assignment.assign) {
                let _ = writeln!(
                    s,
                    "{} {} {} {}",
                    graph_ids[graph_below[m]],
                    local_below[m],
                    li + 1,
                    local_here[c]
                );
            }
            graph_below = gof.clone();
            local_below = local_here;
        }
        Ok(s)
    }

    /// Stacks hierarchies of consecutive batches into one.
    pub fn concat(parts: &[Hierarchy]) -> Hierarchy {
        let depth = parts.iter().map(|p| p.n_levels()).max().unwrap_or(0);
        let mut levels = Vec::with_capacity(depth);
        for li in 0..depth {
            let (mut members, mut assign, mut pos, mut gof) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let (mut node_off, mut k_off, mut g_off) = (0, 0, 0);
            for p in parts {
                if let Some(level) = p.levels.get(li) {
                    members.extend(level.members.iter().map(|m| m + node_off));
                    assign.extend(level.assignment.assign.iter().map(|c| c + k_off));
                    pos.extend_from_slice(&level.assignment.centroid_pos);
                    gof.extend(level.assignment.graph_of_cluster.iter().map(|g| g + g_off));
                    k_off += level.k();
                }
                if li <= p.n_levels() {
                    node_off += p.node_count(li);
                }
                g_off += p.n_graphs;
            }
            levels.push(Level {
                members: members.into(),
                assignment: ClusterAssignment {
                    assign,
                    k: k_off,
                    centroid_pos: pos,
                    graph_of_cluster: gof,
                },
            });
        }
        Hierarchy {
            levels,
            n_atoms: parts.iter().map(|p| p.n_atoms).sum(),
            n_graphs: parts.iter().map(|p| p.n_graphs).sum(),
        }
    }

    /// Hierarchy for atoms reordered so that new atom `j` is old atom `perm[j]`.
    pub fn permute_atoms(&self, perm: &[usize]) -> Result<Hierarchy> {
        if perm.len() != self.n_atoms {
            return Err(Error::contract("permutation length differs from atom count"));
        }
        let mut out = self.clone();
        if let Some(first) = out.levels.first_mut() {
            let old = &self.levels[0].assignment.assign;
            first.assignment.assign = perm.iter().map(|&p| old[p]).collect();
        }
        Ok(out)
    }

    /// Fixed per-level positions after atoms move; assignments unchanged.
    pub fn with_positions(&self, positions: &[[f64; 3]]) -> Result<Hierarchy> {
        if positions.len() != self.n_atoms {
            return Err(Error::contract("position count differs from atom count"));
        }
        let mut out = self.clone();
        let mut prev = positions.to_vec();
        for level in &mut out.levels {
            let k = level.k();
            let mut sums = vec![[0.0; 3]; k];
            let mut n = vec![0usize; k];
            for (&m, &c) in level.members.iter().zip(&level.assignment.assign) {
                n[c] += 1;
                (0..3).for_each(|d| sums[c][d] += prev[m][d]);
            }
            level.assignment.centroid_pos = sums.iter().zip(&n).map(|(s, &n)| s.map(|v| v / n as f64)).collect();
            prev = level.assignment.centroid_pos.clone();
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let mut below = self.n_atoms;
        for (li, level) in self.levels.iter().enumerate() {
            if level.members.len() != level.assignment.assign.len() {
                return Err(Error::contract(format!("level {} member/assignment mismatch", li + 1)));
            }
            if level.members.iter().any(|&m| m >= below) || level.members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!(
                    "level {} members out of range or unsorted",
                    li + 1
                )));
            }
            if level.assignment.graph_of_cluster.len() != level.k() || level.assignment.centroid_pos.len() != level.k()
            {
                return Err(Error::contract(format!("level {} cluster tables mismatch", li + 1)));
            }
            let mut n = vec![0usize; level.k()];
            for &c in &level.assignment.assign {
                if c >= level.k() {
                    return Err(Error::contract(format!("level {} cluster id {c} out of range", li + 1)));
                }
                n[c] += 1;
            }
            if n.contains(&0) {
                return Err(Error::contract(format!("level {} has an empty cluster", li + 1)));
            }
            below = level.k();
        }
        Ok(())
    }
}

/// Differentiable star geometry of one level: member positions, cluster
/// centroids, and the RBF of member-to-centroid distances.
#[derive(Clone, Copy, Debug)]
pub struct StarGeometry {
    pub centroids: Value,
    pub rbf: Value,
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: Value,
    pub b: Value,
}

pub fn star_geometry(tape: &mut Tape, below: Value, level: &Level, spec: &RbfSpec) -> Result<StarGeometry> {
    let seg = level.seg();
    let p_m = tape.gather(below, level.members.clone())?;
    let centroids = tape.segment_mean(p_m, seg.clone(), level.k())?;
    let p_c = tape.gather(centroids, seg)?;
    let diff = tape.sub(p_m, p_c)?;
    let d = tape.row_norm(diff);
    let rbf = rbf_expand(tape, d, spec)?;
    Ok(StarGeometry { centroids, rbf })
}

/// Pools `[h_i ‖ φ(d_iC)]` over each cluster's members, then applies the affine map.
pub fn aggregate(tape: &mut Tape, below: Value, geo: &StarGeometry, level: &Level, w: Affine) -> Result<Value> {
    let h = tape.gather(below, level.members.clone())?;
    let z = tape.concat(h, geo.rbf)?;
    let pooled = tape.segment_mean(z, level.seg(), level.k())?;
    tape.linear(pooled, w.w, Some(w.b))
}

/// `W [F_C ‖ φ(d_iC)] + b` for every member, one row per member.
pub fn disseminate(tape: &mut Tape, clusters: Value, geo: &StarGeometry, level: &Level, w: Affine) -> Result<Value> {
    let f = tape.gather(clusters, level.seg())?;
    let z = tape.concat(f, geo.rbf)?;
    tape.linear(z, w.w, Some(w.b))
}

/// `h0 + h̃`
pub fn residual_fuse(tape: &mut Tape, h0: Value, h_tilde: Value) -> Result<Value> {
    tape.add(h0, h_tilde)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::moldata::{batch, Molecule};
    use crate::numcore::grad_check_report;

    fn molecule(z: &[u32], rng: &mut ChaCha8Rng) -> Molecule {
        let pos = (0..z.len())
            .map(|_| {
                [
                    rng.random_range(0.0..6.0),
                    rng.random_range(0.0..6.0),
                    rng.random_range(0.0..6.0),
                ]
            })
            .collect();
        Molecule::new(z.to_vec(), pos).unwrap()
    }

    fn random_features(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn water_single_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch(&[molecule(&[1, 1, 8], &mut rng)]).unwrap();
        let h = build_hierarchy(&b, &random_features(3, 4, &mut rng), 1, &ClusterConfig::default(), 0).unwrap();
        assert_eq!(h.n_levels(), 1);
        assert_eq!(h.levels[0].k(), 2);
        assert_eq!(h.levels[0].star_edge_count(), 3);
    }

    #[test]
    fn single_element_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&[molecule(&[6; 8], &mut rng)]).unwrap();
        let h = build_hierarchy(&b, &random_features(8, 4, &mut rng), 2, &ClusterConfig::default(), 0).unwrap();
        assert_eq!(h.n_levels(), 1);
        assert_eq!(h.levels[0].k(), 1);
    }

    #[test]
    fn sixteen_atoms_four_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<u32> = (0..16).map(|i| [1, 6, 7, 8][i % 4]).collect();
        let b = batch(&[molecule(&z, &mut rng)]).unwrap();
        for strategy in [Strategy::KMeansPP, Strategy::Random, Strategy::RandomBalanced] {
            let cfg = ClusterConfig {
                strategy,
                ..Default::default()
            };
            let h = build_hierarchy(&b, &random_features(16, 5, &mut rng), 3, &cfg, 0).unwrap();
            h.validate().unwrap();
            // ceil chain: 4 elements, then ceil(4/2), then ceil(2/2)
            let expected = [4, crate::cluster::target_cluster_count(4, 2), 1];
            assert_eq!(h.level_sizes(0), expected);
            for l in 1..h.n_levels() {
                assert_eq!(h.levels[l].star_edge_count(), h.node_count(l));
            }
        }
    }

    #[test]
    fn per_graph_depth_and_coarsest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = batch(&[molecule(&[1, 6, 7, 8, 1, 6], &mut rng), molecule(&[8, 8, 8], &mut rng)]).unwrap();
        let h = build_hierarchy(&b, &random_features(9, 3, &mut rng), 4, &ClusterConfig::default(), 0).unwrap();
        h.validate().unwrap();
        assert_eq!(h.level_sizes(0), vec![4, 2, 1]);
        assert_eq!(h.level_sizes(1), vec![1]);
        let coarse = h.coarsest();
        // graph 1 ends at level 1 (cluster 4), graph 0 at level 3
        assert_eq!(coarse.len(), 2);
        assert_eq!((coarse[0].0, &coarse[0].1[..]), (0, &[4][..]));
        assert_eq!((coarse[1].0, &coarse[1].1[..]), (2, &[0][..]));
    }

    #[test]
    fn dump_uses_local_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batch(&[molecule(&[8, 1, 1], &mut rng), molecule(&[6, 1], &mut rng)])
            .unwrap()
            .with_graph_ids(vec![7, 9])
            .unwrap();
        let h = build_hierarchy(&b, &random_features(5, 3, &mut rng), 3, &ClusterConfig::default(), 0).unwrap();
        let text = h.dump(&b.graph_ids).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            ["7 0 1 1", "7 1 1 0", "7 2 1 0", "9 0 1 1", "9 1 1 0", "7 0 2 0", "7 1 2 0", "9 0 2 0", "9 1 2 0"]
        );
        assert!(h.dump(&[1]).is_err());
    }

    #[test]
    fn batch_build_equals_concat_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mols: Vec<Molecule> = (0..4)
            .map(|i| {
                let n = 5 + 3 * i;
                let z: Vec<u32> = (0..n).map(|_| [1, 6, 7, 8][rng.random_range(0..4)]).collect();
                molecule(&z, &mut rng)
            })
            .collect();
        let ids = vec![7, 3, 11, 0];
        let b = batch(&mols).unwrap().with_graph_ids(ids.clone()).unwrap();
        let x = random_features(b.n_atoms(), 4, &mut rng);
        let cfg = ClusterConfig::default();
        let whole = build_hierarchy(&b, &x, 3, &cfg, 5).unwrap();
        let parts: Vec<Hierarchy> = (0..4)
            .map(|g| {
                let bg = batch(&mols[g..g + 1]).unwrap().with_graph_ids(vec![ids[g]]).unwrap();
                let r = b.atoms_of(g);
                let xg = Tensor::matrix(r.len(), 4, x.data()[r.start * 4..r.end * 4].to_vec()).unwrap();
                build_hierarchy(&bg, &xg, 3, &cfg, 5).unwrap()
            })
            .collect();
        assert_eq!(Hierarchy::concat(&parts), whole);
    }

    struct Setup {
        tape: Tape,
        f: Value,
        p: Value,
        wa: Affine,
        wd: Affine,
    }

    fn setup(n: usize, d: usize, spec: &RbfSpec, rng: &mut ChaCha8Rng) -> (Setup, Tensor, Tensor) {
        let mut tape = Tape::new();
        let ft = random_features(n, d, rng);
        let pt = random_features(n, 3, rng);
        let f = tape.leaf(ft.clone(), true);
        let p = tape.leaf(pt.clone(), true);
        let win = d + spec.n_rbf;
        let mut aff = |tape: &mut Tape| Affine {
            w: tape.leaf(random_features(win, d, rng), true),
            b: tape.leaf(
                Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
                true,
            ),
        };
        let wa = aff(&mut tape);
        let wd = aff(&mut tape);
        (Setup { tape, f, p, wa, wd }, ft, pt)
    }

    fn level(assign: Vec<usize>, k: usize) -> Level {
        let n = assign.len();
        Level {
            members: (0..n).collect::<Vec<_>>().into(),
            assignment: ClusterAssignment::from_parts(assign, k, &vec![0; n], &vec![[0.0; 3]; n]).unwrap(),
        }
    }

    fn gauss(spec: &RbfSpec, d: f64) -> Vec<f64> {
        let s = spec.width();
        spec.centers()
            .iter()
            .map(|m| (-(d - m).powi(2) / (2.0 * s * s)).exp())
            .collect()
    }

    fn affine_oracle(w: &Tensor, b: &Tensor, z: &[f64]) -> Vec<f64> {
        let out = w.cols();
        (0..out)
            .map(|j| b.data()[j] + z.iter().enumerate().map(|(i, v)| v * w.row(i)[j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn aggregate_and_disseminate_match_loop_oracle() {
        let spec = RbfSpec::new(4.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut s, ft, pt) = setup(6, 3, &spec, &mut rng);
        let lv = level(vec![1, 0, 1, 1, 0, 1], 2);
        let geo = star_geometry(&mut s.tape, s.p, &lv, &spec).unwrap();
        let fc = aggregate(&mut s.tape, s.f, &geo, &lv, s.wa).unwrap();
        let dis = disseminate(&mut s.tape, fc, &geo, &lv, s.wd).unwrap();
        let (wa, ba) = (s.tape.value(s.wa.w).clone(), s.tape.value(s.wa.b).clone());
        let (wd, bd) = (s.tape.value(s.wd.w).clone(), s.tape.value(s.wd.b).clone());
        let assign = &lv.assignment.assign;
        let mut fc_oracle = Vec::new();
        let mut cent = Vec::new();
        for k in 0..2 {
            let members: Vec<usize> = (0..6).filter(|&i| assign[i] == k).collect();
            let mut c = [0.0; 3];
            for &i in &members {
                (0..3).for_each(|d| c[d] += pt.row(i)[d] / members.len() as f64);
            }
            let mut pooled = vec![0.0; 3 + spec.n_rbf];
            for &i in &members {
                let dist = (0..3).map(|d| (pt.row(i)[d] - c[d]).powi(2)).sum::<f64>().sqrt();
                let z: Vec<f64> = ft.row(i).iter().copied().chain(gauss(&spec, dist)).collect();
                pooled
                    .iter_mut()
                    .zip(&z)
                    .for_each(|(p, v)| *p += v / members.len() as f64);
            }
            fc_oracle.push(affine_oracle(&wa, &ba, &pooled));
            cent.push(c);
        }
        let got = s.tape.value(fc);
        for k in 0..2 {
            for j in 0..3 {
                assert!((got.row(k)[j] - fc_oracle[k][j]).abs() <= 1e-12);
            }
        }
        let got = s.tape.value(dis);
        for i in 0..6 {
            let k = assign[i];
            let dist = (0..3).map(|d| (pt.row(i)[d] - cent[k][d]).powi(2)).sum::<f64>().sqrt();
            let z: Vec<f64> = fc_oracle[k].iter().copied().chain(gauss(&spec, dist)).collect();
            let want = affine_oracle(&wd, &bd, &z);
            for j in 0..3 {
                assert!((got.row(i)[j] - want[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_member_and_symmetric_pair() {
        let spec = RbfSpec::new(4.0, 4).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]), false);
        let p = tape.leaf(
            Tensor::from_rows(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [9.0, 9.0, 9.0]]),
            false,
        );
        let w = Affine {
            w: tape.leaf(
                Tensor::matrix(6, 1, vec![1.0, 10.0, 100.0, 1000.0, 1e4, 1e5]).unwrap(),
                false,
            ),
            b: tape.leaf(Tensor::vector(vec![0.25]), false),
        };
        let lv = level(vec![0, 0, 1], 2);
        let geo = star_geometry(&mut tape, p, &lv, &spec).unwrap();
        let fc = aggregate(&mut tape, f, &geo, &lv, w).unwrap();
        // pair symmetric about x=1: both members at distance 1
        let phi1 = gauss(&spec, 1.0);
        let phi0 = gauss(&spec, 0.0);
        let want0 = affine_oracle(
            &tape.value(w.w).clone(),
            &Tensor::vector(vec![0.25]),
            &[[2.0, 0.5].as_slice(), &phi1].concat(),
        );
        let want1 = affine_oracle(
            &tape.value(w.w).clone(),
            &Tensor::vector(vec![0.25]),
            &[[0.5, 0.5].as_slice(), &phi0].concat(),
        );
        assert!((tape.value(fc).data()[0] - want0[0]).abs() < 1e-9);
        assert!((tape.value(fc).data()[1] - want1[0]).abs() < 1e-9);
        let rbf = tape.value(geo.rbf).clone();
        assert_eq!(rbf.row(0), rbf.row(1));
    }

    #[test]
    fn dissemination_degenerate_cases() {
        let spec = RbfSpec::new(4.0, 3).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[[1.0, 1.0, 1.0]; 4]), false);
        let fc = tape.leaf(Tensor::from_rows(&[[0.3, -0.7]]), false);
        let lv = level(vec![0; 4], 1);
        let geo = star_geometry(&mut tape, p, &lv, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Affine {
            w: tape.leaf(random_features(5, 2, &mut rng), false),
            b: tape.leaf(Tensor::vector(vec![0.1, 0.2]), false),
        };
        let out = disseminate(&mut tape, fc, &geo, &lv, w).unwrap();
        let o = tape.value(out).clone();
        assert!((1..4).all(|i| o.row(i) == o.row(0)));
        let zero = Affine {
            w: tape.leaf(Tensor::zeros(vec![5, 2]), false),
            b: tape.leaf(Tensor::zeros(vec![2]), false),
        };
        let out = disseminate(&mut tape, fc, &geo, &lv, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
        // residual fuse identities
        let h0 = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]; 4]), false);
        let fused = residual_fuse(&mut tape, h0, out).unwrap();
        assert_eq!(tape.value(fused), tape.value(h0));
        let fused = residual_fuse(&mut tape, out, h0).unwrap();
        assert_eq!(tape.value(fused), tape.value(h0));
    }

    #[test]
    fn residual_gradient_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_features(3, 2, &mut rng);
        let y = random_features(3, 2, &mut rng);
        let yc = y.clone();
        let err = grad_check_report(
            |t, v| {
                let other = t.constant(yc.clone());
                let s = residual_fuse(t, v, other)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_err < 1e-6);
        let mut tape = Tape::new();
        let a = tape.leaf(x, true);
        let b = tape.leaf(y, true);
        let s = residual_fuse(&mut tape, a, b).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a), tape.grad(b));
    }

    fn rotate(p: &Tensor, q: [[f64; 3]; 3], t: [f64; 3]) -> Tensor {
        let rows: Vec<[f64; 3]> = p
            .to_rows3()
            .iter()
            .map(|r| std::array::from_fn(|i| (0..3).map(|j| q[i][j] * r[j]).sum::<f64>() + t[i]))
            .collect();
        Tensor::from_rows(&rows)
    }

    #[test]
    fn rigid_motion_and_position_gradients() {
        let spec = RbfSpec::new(4.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, ft, pt) = setup(7, 3, &spec, &mut rng);
        let (wa, ba) = (s.tape.value(s.wa.w).clone(), s.tape.value(s.wa.b).clone());
        let (wd, bd) = (s.tape.value(s.wd.w).clone(), s.tape.value(s.wd.b).clone());
        let lv = level(vec![0, 1, 2, 0, 1, 2, 0], 3);
        let eval = |t: &mut Tape, p: Value| -> Result<Value> {
            let f = t.constant(ft.clone());
            let wa = Affine {
                w: t.constant(wa.clone()),
                b: t.constant(ba.clone()),
            };
            let wd = Affine {
                w: t.constant(wd.clone()),
                b: t.constant(bd.clone()),
            };
            let geo = star_geometry(t, p, &lv, &spec)?;
            let fc = aggregate(t, f, &geo, &lv, wa)?;
            let dis = disseminate(t, fc, &geo, &lv, wd)?;
            let sq = t.mul(dis, dis)?;
            let a = t.sum(sq);
            let b = t.sum(fc);
            t.add(a, b)
        };
        let value = |p: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone(), false);
            let out = eval(&mut t, v).unwrap();
            t.value(out).item()
        };
        let base = value(&pt);
        // 90° about z then 90° about x, plus translation
        let q = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let moved = value(&rotate(&pt, q, [3.0, -2.0, 0.5]));
        assert!((moved - base).abs() <= 1e-10 * base.abs().max(1.0));
        let rep = grad_check_report(eval, &pt, 1e-5).unwrap();
        let scale = rep.finite_diff.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let worst = rep
            .autodiff
            .iter()
            .zip(&rep.finite_diff)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(scale > 0.0 && worst <= 1e-6 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn permutation_equivariance() {
        let spec = RbfSpec::new(4.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut s, ft, pt) = setup(6, 2, &spec, &mut rng);
        let assign = vec![0, 1, 1, 0, 2, 2];
        let lv = level(assign.clone(), 3);
        let geo = star_geometry(&mut s.tape, s.p, &lv, &spec).unwrap();
        let fc = aggregate(&mut s.tape, s.f, &geo, &lv, s.wa).unwrap();
        let dis = disseminate(&mut s.tape, fc, &geo, &lv, s.wd).unwrap();

        let perm = [4, 2, 0, 5, 1, 3];
        let pf = Tensor::matrix(6, 2, perm.iter().flat_map(|&i| ft.row(i).to_vec()).collect()).unwrap();
        let pp = Tensor::matrix(6, 3, perm.iter().flat_map(|&i| pt.row(i).to_vec()).collect()).unwrap();
        let f2 = s.tape.leaf(pf, false);
        let p2 = s.tape.leaf(pp, false);
        let lv2 = level(perm.iter().map(|&i| assign[i]).collect(), 3);
        let geo2 = star_geometry(&mut s.tape, p2, &lv2, &spec).unwrap();
        let fc2 = aggregate(&mut s.tape, f2, &geo2, &lv2, s.wa).unwrap();
        let dis2 = disseminate(&mut s.tape, fc2, &geo2, &lv2, s.wd).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
        assert!(close(s.tape.value(fc).data(), s.tape.value(fc2).data()));
        let (d1, d2) = (s.tape.value(dis).clone(), s.tape.value(dis2).clone());
        for (j, &i) in perm.iter().enumerate() {
            assert!(close(d2.row(j), d1.row(i)));
        }
    }

    #[test]
    fn permute_and_reposition_hierarchy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = molecule(&[1, 6, 1, 8, 6, 7], &mut rng);
        let b = batch(&[m.clone()]).unwrap();
        let x = random_features(6, 3, &mut rng);
        let h = build_hierarchy(&b, &x, 3, &ClusterConfig::default(), 0).unwrap();
        let perm = [5, 3, 1, 0, 2, 4];
        let hp = h.permute_atoms(&perm).unwrap();
        hp.validate().unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(hp.levels[0].assignment.assign[j], h.levels[0].assignment.assign[i]);
        }
        let same = h.with_positions(&m.positions).unwrap();
        for (a, b) in same.levels.iter().zip(&h.levels) {
            for (p, q) in a.assignment.centroid_pos.iter().zip(&b.assignment.centroid_pos) {
                assert!((0..3).all(|d| (p[d] - q[d]).abs() <= 1e-12));
            }
        }
    }
}
