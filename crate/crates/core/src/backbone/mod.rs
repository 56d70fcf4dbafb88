//! Continuous-filter message passing with optional hierarchical cluster
//! exchange after every layer.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use crate::error::{Error, Result};
use crate::geometry::{edge_distances, neighbor_list, rbf_expand, EdgeList, RbfSpec};
use crate::hierarchy::{aggregate, disseminate, residual_fuse, star_geometry, Affine, Hierarchy, StarGeometry};
use crate::moldata::Batch;
use crate::numcore::{Bindings, ParamStore, Tape, Tensor, Value};

/// Prefix shared by every parameter that belongs to the cluster module.
pub const MCGM_PREFIX: &str = "mcgm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Å
    pub atom_cutoff: f64,
    /// Å; also the RBF range for member-to-centroid distances.
    pub cluster_cutoff: f64,
    pub n_rbf_atom: usize,
    pub n_rbf_cluster: usize,
    pub n_levels: usize,
    pub max_z: usize,
    /// Hidden width of both energy heads; `None` means `hidden_dim / 2`.
    pub head_hidden: Option<usize>,
    /// When false the cluster module is skipped entirely (plain backbone).
    pub mcgm: bool,
    /// Start the weights that write cluster context back into atoms (and the
    /// cluster energy head's output layer) at zero, so an untrained model
    /// predicts exactly what the plain backbone does.
    pub zero_init_outputs: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 32,
            n_layers: 3,
            atom_cutoff: 6.0,
            cluster_cutoff: 4.0,
            n_rbf_atom: 32,
            n_rbf_cluster: 16,
            n_levels: 3,
            max_z: 10,
            head_hidden: None,
            mcgm: true,
            zero_init_outputs: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if !(self.atom_cutoff > 0.0) || !(self.cluster_cutoff > 0.0) {
            return bad("cutoffs must be positive");
        }
        if self.n_rbf_atom == 0 || self.n_rbf_cluster == 0 {
            return bad("RBF sizes must be at least 1");
        }
        if self.n_levels == 0 {
            return bad("n_levels must be at least 1");
        }
        if self.max_z == 0 {
            return bad("max_z must be at least 1");
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be at least 1");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or(self.hidden_dim / 2).max(1)
    }

    pub fn atom_rbf(&self) -> RbfSpec {
        RbfSpec {
            gamma: self.atom_cutoff,
            n_rbf: self.n_rbf_atom,
        }
    }

    pub fn cluster_rbf(&self) -> RbfSpec {
        RbfSpec {
            gamma: self.cluster_cutoff,
            n_rbf: self.n_rbf_cluster,
        }
    }
}

/// Affine map from output units to meV: `E = scale * raw + shift * n_atoms`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub shift: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { scale: 1.0, shift: 0.0 }
    }
}

impl Normalization {
    /// Per-atom mean and mean absolute deviation of per-atom energies.
    pub fn fit(energies: &[f64], counts: &[usize]) -> Result<Self> {
        if energies.is_empty() || energies.len() != counts.len() {
            return Err(Error::contract("normalization needs one energy per molecule"));
        }
        let per_atom: Vec<f64> = energies.iter().zip(counts).map(|(e, &n)| e / n as f64).collect();
        let shift = per_atom.iter().sum::<f64>() / per_atom.len() as f64;
        let resid: f64 = energies
            .iter()
            .zip(counts)
            .map(|(e, &n)| (e - shift * n as f64).abs())
            .sum::<f64>()
            / energies.len() as f64;
        let scale = if resid > 0.0 { resid } else { 1.0 };
        Ok(Normalization { scale, shift })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub norm: Normalization,
}

fn linear_layer(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
    bias: bool,
) -> Result<()> {
    store.insert_glorot(&format!("{name}.w"), fan_in, fan_out, seed)?;
    if bias {
        store.insert_zeros(&format!("{name}.b"), vec![fan_out])?;
    }
    Ok(())
}

/// Everything the energy heads need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub h_atoms: Value,
    /// Atom features after the message-passing layers, before the final
    /// cascade; the snapshot used for re-clustering.
    pub h_layers: Value,
    /// Features of each graph's coarsest clusters, stacked level by level.
    pub h_clusters: Option<Value>,
    pub cluster_graph: Arc<[usize]>,
}

impl Model {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.head_width();
        let nra = config.n_rbf_atom;
        let nrc = config.n_rbf_cluster;
        let mut p = ParamStore::new();
        p.insert_glorot("embedding", config.max_z, d, seed)?;
        for l in 0..config.n_layers {
            let pre = format!("interaction{l}");
            linear_layer(&mut p, &format!("{pre}.wv"), d, d, seed, false)?;
            linear_layer(&mut p, &format!("{pre}.filter1"), nra, d, seed, true)?;
            linear_layer(&mut p, &format!("{pre}.filter2"), d, d, seed, true)?;
            linear_layer(&mut p, &format!("{pre}.update1"), d, d, seed, true)?;
            linear_layer(&mut p, &format!("{pre}.update2"), d, d, seed, true)?;
        }
        linear_layer(&mut p, "head.atom.l1", d, h, seed, true)?;
        linear_layer(&mut p, "head.atom.l2", h, 1, seed, true)?;
        if config.mcgm {
            for lv in 1..=config.n_levels {
                linear_layer(&mut p, &format!("mcgm.init.agg{lv}"), d + nrc, d, seed, true)?;
                linear_layer(&mut p, &format!("mcgm.cascade.dis{lv}"), d + nrc, d, seed, true)?;
            }
            for l in 0..config.n_layers {
                linear_layer(&mut p, &format!("mcgm.layer{l}.dis"), d + nrc, d, seed, true)?;
                for lv in 1..=config.n_levels {
                    linear_layer(&mut p, &format!("mcgm.layer{l}.agg{lv}"), d + nrc, d, seed, true)?;
                }
            }
            linear_layer(&mut p, "mcgm.head.cluster.l1", d, h, seed, true)?;
            linear_layer(&mut p, "mcgm.head.cluster.l2", h, 1, seed, true)?;
            if config.zero_init_outputs {
                let outputs = (0..config.n_layers)
                    .map(|l| format!("mcgm.layer{l}.dis.w"))
                    .chain(["mcgm.cascade.dis1.w".to_string(), "mcgm.head.cluster.l2.w".to_string()]);
                for name in outputs {
                    if let Some(w) = p.by_name_mut(&name) {
                        w.value.data_mut().fill(0.0);
                    }
                }
            }
        }
        Ok(Model {
            config,
            params: p,
            norm: Normalization::default(),
        })
    }

    pub fn uses_mcgm(&self) -> bool {
        self.config.mcgm
    }

    fn affine(&self, tape: &mut Tape, bind: &mut Bindings, name: &str) -> Result<Affine> {
        Ok(Affine {
            w: bind.named(tape, &format!("{name}.w"))?,
            b: bind.named(tape, &format!("{name}.b"))?,
        })
    }

    /// Two-layer MLP `l2(ssp(l1(x)))`.
    pub(crate) fn mlp(&self, tape: &mut Tape, bind: &mut Bindings, name: &str, x: Value) -> Result<Value> {
        let l1 = self.affine(tape, bind, &format!("{name}.l1"))?;
        let l2 = self.affine(tape, bind, &format!("{name}.l2"))?;
        let a = tape.linear(x, l1.w, Some(l1.b))?;
        let a = tape.shifted_softplus(a);
        tape.linear(a, l2.w, Some(l2.b))
    }

    /// Row lookup of `Z - 1` in the embedding table.
    pub fn embed(&self, tape: &mut Tape, bind: &mut Bindings, z: &[u32]) -> Result<Value> {
        let idx = z
            .iter()
            .map(|&z| {
                if z == 0 || z as usize > self.config.max_z {
                    Err(Error::contract(format!(
                        "atomic number {z} outside embedding table (max_z = {})",
                        self.config.max_z
                    )))
                } else {
                    Ok(z as usize - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let table = bind.named(tape, "embedding")?;
        tape.gather(table, idx.into())
    }

    /// `update(Σ_j (h_j W_v) ⊙ filter(e_ij) C(d_ij))` summed at each destination,
    /// where `C` is the cosine envelope carried in `envelope`.
    #[allow(clippy::too_many_arguments)]
    pub fn interaction(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        layer: usize,
        h: Value,
        edges: &EdgeList,
        e_rbf: Value,
        envelope: Value,
    ) -> Result<Value> {
        let pre = format!("interaction{layer}");
        let wv = bind.named(tape, &format!("{pre}.wv.w"))?;
        let f1 = self.affine(tape, bind, &format!("{pre}.filter1"))?;
        let f2 = self.affine(tape, bind, &format!("{pre}.filter2"))?;
        let u1 = self.affine(tape, bind, &format!("{pre}.update1"))?;
        let u2 = self.affine(tape, bind, &format!("{pre}.update2"))?;
        let n = tape.value(h).rows();
        let x = tape.linear(h, wv, None)?;
        let xj = tape.gather(x, edges.src.clone())?;
        let w = tape.linear(e_rbf, f1.w, Some(f1.b))?;
        let w = tape.shifted_softplus(w);
        let w = tape.linear(w, f2.w, Some(f2.b))?;
        let w = tape.mul_rows(w, envelope)?;
        let m = tape.mul(xj, w)?;
        let agg = tape.segment_sum(m, edges.dst.clone(), n)?;
        let u = tape.linear(agg, u1.w, Some(u1.b))?;
        let u = tape.shifted_softplus(u);
        tape.linear(u, u2.w, Some(u2.b))
    }

    /// Full forward pass. `positions` must hold the batch coordinates; the
    /// hierarchy is ignored when the cluster module is disabled. `edges`
    /// defaults to the neighbor list of `batch.positions`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        batch: &Batch,
        hierarchy: Option<&Hierarchy>,
        positions: Value,
        edges: Option<&EdgeList>,
    ) -> Result<ForwardOutput> {
        if tape.shape(positions) != [batch.n_atoms(), 3] {
            return Err(Error::Dimension {
                op: "forward positions",
                lhs: tape.shape(positions).to_vec(),
                rhs: vec![batch.n_atoms(), 3],
            });
        }
        let edges = match edges {
            Some(e) => e.clone(),
            None => neighbor_list(batch, self.config.atom_cutoff)?,
        };
        let dist = edge_distances(tape, positions, &edges)?;
        let e_rbf = rbf_expand(tape, dist, &self.config.atom_rbf())?;
        let env = tape.cosine_cutoff(dist, self.config.atom_cutoff)?;
        let mut h = self.embed(tape, bind, &batch.z)?;

        let hier = match (self.config.mcgm, hierarchy) {
            (false, _) => None,
            (true, None) => return Err(Error::contract("cluster module enabled but no hierarchy given")),
            (true, Some(hh)) => {
                if hh.n_atoms != batch.n_atoms() || hh.n_graphs != batch.n_graphs {
                    return Err(Error::contract(format!(
                        "hierarchy built for {} atoms / {} graphs, batch has {} / {}",
                        hh.n_atoms,
                        hh.n_graphs,
                        batch.n_atoms(),
                        batch.n_graphs
                    )));
                }
                if hh.n_levels() > self.config.n_levels {
                    return Err(Error::contract("hierarchy deeper than the configured level count"));
                }
                Some(hh)
            }
        };

        let Some(hier) = hier else {
            for l in 0..self.config.n_layers {
                let dh = self.interaction(tape, bind, l, h, &edges, e_rbf, env)?;
                h = tape.add(h, dh)?;
            }
            return Ok(ForwardOutput {
                h_atoms: h,
                h_layers: h,
                h_clusters: None,
                cluster_graph: Arc::from(Vec::new()),
            });
        };

        let spec = self.config.cluster_rbf();
        let mut geo: Vec<StarGeometry> = Vec::with_capacity(hier.n_levels());
        let mut below = positions;
        for level in &hier.levels {
            let g = star_geometry(tape, below, level, &spec)?;
            below = g.centroids;
            geo.push(g);
        }

        // bottom-up initialization of every level
        let mut hc: Vec<Value> = Vec::with_capacity(hier.n_levels());
        let mut src = h;
        for (li, level) in hier.levels.iter().enumerate() {
            let w = self.affine(tape, bind, &format!("mcgm.init.agg{}", li + 1))?;
            let f = aggregate(tape, src, &geo[li], level, w)?;
            hc.push(f);
            src = f;
        }

        for l in 0..self.config.n_layers {
            let dh = self.interaction(tape, bind, l, h, &edges, e_rbf, env)?;
            let wd = self.affine(tape, bind, &format!("mcgm.layer{l}.dis"))?;
            let dis = disseminate(tape, hc[0], &geo[0], &hier.levels[0], wd)?;
            let mut new_hc = Vec::with_capacity(hc.len());
            for (li, level) in hier.levels.iter().enumerate() {
                let below = if li == 0 { h } else { hc[li - 1] };
                let w = self.affine(tape, bind, &format!("mcgm.layer{l}.agg{}", li + 1))?;
                let a = aggregate(tape, below, &geo[li], level, w)?;
                new_hc.push(tape.add(hc[li], a)?);
            }
            let hn = tape.add(h, dh)?;
            h = tape.add(hn, dis)?;
            hc = new_hc;
        }
        let h_layers = h;

        let coarse = hier.coarsest();
        let total: usize = coarse.iter().map(|(_, ids)| ids.len()).sum();
        let mut cluster_graph = Vec::with_capacity(total);
        let d = self.config.hidden_dim;
        let mut stacked = tape.constant(Tensor::zeros(vec![total, d]));
        let mut offset = 0;
        for (li, ids) in &coarse {
            let rows = tape.gather(hc[*li], ids.clone())?;
            let at: Vec<usize> = (offset..offset + ids.len()).collect();
            stacked = tape.scatter_rows(stacked, rows, at.into())?;
            offset += ids.len();
            cluster_graph.extend(ids.iter().map(|&c| hier.levels[*li].assignment.graph_of_cluster[c]));
        }

        // top-down cascade; intermediate levels take the disseminated features
        for li in (1..hier.n_levels()).rev() {
            let w = self.affine(tape, bind, &format!("mcgm.cascade.dis{}", li + 1))?;
            let down = disseminate(tape, hc[li], &geo[li], &hier.levels[li], w)?;
            hc[li - 1] = tape.scatter_rows(hc[li - 1], down, hier.levels[li].members.clone())?;
        }
        let w = self.affine(tape, bind, "mcgm.cascade.dis1")?;
        let h_tilde = disseminate(tape, hc[0], &geo[0], &hier.levels[0], w)?;
        let h_atoms = residual_fuse(tape, h, h_tilde)?;

        Ok(ForwardOutput {
            h_atoms,
            h_layers,
            h_clusters: Some(stacked),
            cluster_graph: cluster_graph.into(),
        })
    }

    /// Atom features after the message-passing layers, used to re-cluster.
    pub fn feature_snapshot(&self, batch: &Batch, hierarchy: Option<&Hierarchy>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&self.params, false);
        let pos = tape.constant(Tensor::from_rows(&batch.positions));
        let out = self.forward(&mut tape, &mut bind, batch, hierarchy, pos, None)?;
        Ok(tape.value(out.h_layers).clone())
    }
}
