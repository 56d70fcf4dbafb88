use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::optim::{clip_grad_norm, optimizer_step, OptimizerState};
use super::{lr_at, selection_metric, EpochMetrics, TrainConfig, IMPROVEMENT_EPS};
use crate::backbone::{read_checkpoint, write_checkpoint, Checkpoint, Model, Normalization};
use crate::cluster::ClusterConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, element_hierarchy, Hierarchy};
use crate::moldata::{batch, Batch, Molecule};
use crate::numcore::Tensor;
use crate::readout::{loss_and_grad, predict, Prediction};

/// Molecules per forward pass when taking snapshots or evaluating.
const EVAL_CHUNK: usize = 64;

/// Training and validation molecules with the dataset ids that key their clustering.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Molecule>,
    pub val: Vec<Molecule>,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

impl TrainData {
    /// Ids `0..n_train` for training molecules, then consecutive ids for validation.
    pub fn new(train: Vec<Molecule>, val: Vec<Molecule>) -> Self {
        let nt = train.len() as u64;
        let train_ids = (0..nt).collect();
        let val_ids = (nt..nt + val.len() as u64).collect();
        TrainData {
            train,
            val,
            train_ids,
            val_ids,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::contract("training needs non-empty train and validation sets"));
        }
        if self.train.len() != self.train_ids.len() || self.val.len() != self.val_ids.len() {
            return Err(Error::contract("one dataset id per molecule required"));
        }
        if self.train.iter().chain(&self.val).any(|m| m.energy.is_none()) {
            return Err(Error::Data(
                "every training and validation molecule needs an energy".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `best.ckpt`, `last.ckpt` and `metrics.jsonl` go.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt`.
    pub resume: bool,
    /// Stop after this many epochs in this call (the run stays resumable).
    pub epoch_budget: Option<usize>,
    /// Keep the model's normalization instead of fitting it on the training set.
    pub keep_normalization: bool,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mae_e: f64,
    pub mae_f: Option<f64>,
    pub n_molecules: usize,
    pub predictions: Vec<Prediction>,
}

fn batch_with_ids(mols: &[&Molecule], ids: &[u64]) -> Result<Batch> {
    batch(mols)?.with_graph_ids(ids.to_vec())
}

fn rows(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::matrix(range.len(), c, t.data()[range.start * c..range.end * c].to_vec()).expect("row slice")
}

/// Fresh clustering for inference: element bootstrap, one snapshot, then the
/// full build with epoch key 0. `None` for models without the cluster module.
pub fn eval_hierarchy(model: &Model, b: &Batch, cluster: &ClusterConfig) -> Result<Option<Hierarchy>> {
    if !model.uses_mcgm() {
        return Ok(None);
    }
    cluster_hierarchy(model, b, cluster).map(Some)
}

/// The hierarchy `eval_hierarchy` would use, built even for models that do
/// not consume it (their backbone features drive the clustering).
pub fn cluster_hierarchy(model: &Model, b: &Batch, cluster: &ClusterConfig) -> Result<Hierarchy> {
    let boot = if model.uses_mcgm() {
        Some(element_hierarchy(b)?)
    } else {
        None
    };
    let snap = model.feature_snapshot(b, boot.as_ref())?;
    build_hierarchy(b, &snap, model.config.n_levels, cluster, 0)
}

/// Per-molecule hierarchies for one epoch. Epoch 0 uses element clusters only;
/// later epochs cluster a feature snapshot taken with the previous hierarchies.
fn epoch_hierarchies(
    model: &Model,
    mols: &[Molecule],
    ids: &[u64],
    prev: &[Hierarchy],
    cluster: &ClusterConfig,
    epoch: usize,
) -> Result<Vec<Hierarchy>> {
    if !model.uses_mcgm() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(mols.len());
    for start in (0..mols.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(mols.len());
        let refs: Vec<&Molecule> = mols[start..end].iter().collect();
        let b = batch_with_ids(&refs, &ids[start..end])?;
        if epoch == 0 {
            for g in 0..b.n_graphs {
                out.push(element_hierarchy(&batch_with_ids(
                    &refs[g..g + 1],
                    &ids[start + g..start + g + 1],
                )?)?);
            }
            continue;
        }
        let h = Hierarchy::concat(&prev[start..end]);
        let snap = model.feature_snapshot(&b, Some(&h))?;
        for g in 0..b.n_graphs {
            let single = batch_with_ids(&refs[g..g + 1], &ids[start + g..start + g + 1])?;
            let feats = rows(&snap, b.atoms_of(g));
            out.push(build_hierarchy(
                &single,
                &feats,
                model.config.n_levels,
                cluster,
                epoch as u64,
            )?);
        }
    }
    Ok(out)
}

/// Energy MAE and, when asked and available, per-component force MAE.
pub fn evaluate(
    model: &Model,
    mols: &[Molecule],
    ids: &[u64],
    cluster: &ClusterConfig,
    with_forces: bool,
) -> Result<EvalMetrics> {
    if mols.is_empty() || mols.len() != ids.len() {
        return Err(Error::contract("evaluation needs molecules with one id each"));
    }
    if let Some(z) = mols
        .iter()
        .flat_map(|m| &m.z)
        .find(|&&z| z as usize > model.config.max_z)
    {
        return Err(Error::contract(format!(
            "element Z={z} is outside the model's embedding table (max_z {})",
            model.config.max_z
        )));
    }
    let forces = with_forces && mols.iter().all(|m| m.forces.is_some());
    let (mut err_e, mut err_f, mut n_f) = (0.0, 0.0, 0usize);
    let mut predictions = Vec::with_capacity(mols.len().div_ceil(EVAL_CHUNK));
    for start in (0..mols.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(mols.len());
        let refs: Vec<&Molecule> = mols[start..end].iter().collect();
        let b = batch_with_ids(&refs, &ids[start..end])?;
        let h = eval_hierarchy(model, &b, cluster)?;
        let p = predict(model, &b, h.as_ref(), forces)?;
        let target = b
            .energies
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation molecules need reference energies".into()))?;
        err_e += p.energy.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>();
        if let (Some(pf), Some(tf)) = (&p.forces, &b.forces) {
            err_f += pf
                .iter()
                .flatten()
                .zip(tf.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            n_f += 3 * b.n_atoms();
        }
        predictions.push(p);
    }
    let mae_e = err_e / mols.len() as f64;
    if !mae_e.is_finite() {
        return Err(Error::Numeric("non-finite energy predictions during evaluation".into()));
    }
    Ok(EvalMetrics {
        mae_e,
        mae_f: forces.then(|| err_f / n_f as f64),
        n_molecules: mols.len(),
        predictions,
    })
}

/// Evaluates a checkpoint, clustering with the settings it was trained with.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    mols: &[Molecule],
    ids: &[u64],
    with_forces: bool,
) -> Result<EvalMetrics> {
    let cluster = match ckpt.meta.get("train_config") {
        Some(c) => serde_json::from_value::<TrainConfig>(c.clone())?.cluster,
        None => ClusterConfig::default(),
    };
    evaluate(&ckpt.model, mols, ids, &cluster, with_forces)
}

fn at(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + epoch as u64);
    r
}

struct RunState {
    model: Model,
    opt: OptimizerState,
    history: Vec<EpochMetrics>,
    best_metric: f64,
    best_epoch: usize,
    bad_epochs: usize,
    hierarchies: Vec<Hierarchy>,
    best: Checkpoint,
}

fn moment_name(kind: &str, param: &str) -> String {
    format!("adam.{kind}.{param}")
}

impl RunState {
    fn last_checkpoint(&self, cfg: &TrainConfig, seed: u64, stopped: bool) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.model.clone());
        for (i, p) in self.model.params.iter().enumerate() {
            ck.extra.push((moment_name("m", &p.name), self.opt.m[i].clone()));
            ck.extra.push((moment_name("v", &p.name), self.opt.v[i].clone()));
        }
        ck.meta = json!({
            "kind": "last",
            "seed": seed,
            "epochs_done": self.history.len(),
            "step": self.opt.step,
            "history": self.history,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "stopped_early": stopped,
            "hierarchies": self.hierarchies,
            "train_config": cfg,
        });
        Ok(ck)
    }

    fn from_last(ck: Checkpoint, best: Checkpoint, cfg: &TrainConfig, seed: u64) -> Result<(Self, bool)> {
        let meta = &ck.meta;
        let bad = |m: &str| Error::Checkpoint(format!("cannot resume: {m}"));
        let saved: TrainConfig = serde_json::from_value(meta["train_config"].clone())?;
        if &saved != cfg {
            return Err(Error::Config(
                "cannot resume: training config differs from the interrupted run".into(),
            ));
        }
        if meta["seed"].as_u64() != Some(seed) {
            return Err(Error::Config(
                "cannot resume: seed differs from the interrupted run".into(),
            ));
        }
        let mut opt = OptimizerState::new(&ck.model.params);
        for (i, p) in ck.model.params.iter().enumerate() {
            let get = |k: &str| {
                ck.extra_tensor(&moment_name(k, &p.name))
                    .cloned()
                    .ok_or_else(|| bad("missing optimizer moments"))
            };
            opt.m[i] = get("m")?;
            opt.v[i] = get("v")?;
        }
        opt.step = meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
        opt.check(&ck.model.params)?;
        let state = RunState {
            opt,
            history: serde_json::from_value(meta["history"].clone())?,
            best_metric: meta["best_metric"].as_f64().ok_or_else(|| bad("missing best metric"))?,
            best_epoch: meta["best_epoch"].as_u64().ok_or_else(|| bad("missing best epoch"))? as usize,
            bad_epochs: meta["bad_epochs"]
                .as_u64()
                .ok_or_else(|| bad("missing bad epoch count"))? as usize,
            hierarchies: serde_json::from_value(meta["hierarchies"].clone())?,
            model: ck.model,
            best,
        };
        Ok((state, meta["stopped_early"].as_bool().unwrap_or(false)))
    }
}

fn write_metrics(path: &Path, history: &[EpochMetrics], append: bool) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for m in history {
        let line = serde_json::to_string(m)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains one seed. Each epoch re-clusters, runs shuffled mini-batches,
/// validates, updates the schedule and keeps the best checkpoint.
pub fn train(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let paths = opts
        .out_dir
        .as_ref()
        .map(|d| (d.join("best.ckpt"), d.join("last.ckpt"), d.join("metrics.jsonl")));
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let start = Instant::now();
    let (mut st, already_stopped) = match (&paths, opts.resume) {
        (Some((best, last, metrics)), true) => {
            let (st, stopped) = RunState::from_last(read_checkpoint(last)?, read_checkpoint(best)?, cfg, seed)?;
            write_metrics(metrics, &st.history, false)?;
            (st, stopped)
        }
        (None, true) => return Err(Error::Config("resuming needs an output directory".into())),
        (_, false) => {
            let mut model = model;
            if !opts.keep_normalization {
                let e: Vec<f64> = data.train.iter().map(|m| m.energy.unwrap_or_default()).collect();
                let n: Vec<usize> = data.train.iter().map(Molecule::len).collect();
                model.norm = Normalization::fit(&e, &n)?;
            }
            if let Some((_, _, metrics)) = &paths {
                write_metrics(metrics, &[], false)?;
            }
            let opt = OptimizerState::new(&model.params);
            let best = Checkpoint::new(model.clone());
            (
                RunState {
                    model,
                    opt,
                    history: Vec::new(),
                    best_metric: f64::INFINITY,
                    best_epoch: 0,
                    bad_epochs: 0,
                    hierarchies: Vec::new(),
                    best,
                },
                false,
            )
        }
    };
    let time_offset = st.history.last().map_or(0.0, |m| m.wall_time_s);
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.max_epochs;
    let with_val_forces = cfg.loss.needs_forces();
    let mut stopped = already_stopped;
    let mut ran = 0;
    let mut val_hist: Vec<f64> = st
        .history
        .iter()
        .map(|m| selection_metric(cfg.loss, m.val_mae_e, m.val_mae_f))
        .collect();

    while !stopped && st.history.len() < cfg.max_epochs && opts.epoch_budget.is_none_or(|b| ran < b) {
        let epoch = st.history.len();
        st.hierarchies = epoch_hierarchies(
            &st.model,
            &data.train,
            &data.train_ids,
            &st.hierarchies,
            &cfg.cluster,
            epoch,
        )?;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng(seed, epoch));
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Molecule> = chunk.iter().map(|&i| &data.train[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| data.train_ids[i]).collect();
            let b = batch_with_ids(&refs, &ids)?;
            let h = (!st.hierarchies.is_empty())
                .then(|| Hierarchy::concat(&chunk.iter().map(|&i| st.hierarchies[i].clone()).collect::<Vec<_>>()));
            lr = lr_at(st.opt.step as usize, &val_hist, cfg, total_steps);
            let mut lg = loss_and_grad(&st.model, &b, h.as_ref(), cfg.loss).map_err(|e| at(epoch, bi, e))?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&st.model.params, &mut lg.grads, c);
            }
            optimizer_step(&mut st.opt, &mut st.model.params, &lg.grads, lr, cfg.weight_decay)
                .map_err(|e| at(epoch, bi, e))?;
            loss_sum += lg.loss * chunk.len() as f64;
        }
        let val = evaluate(&st.model, &data.val, &data.val_ids, &cfg.cluster, with_val_forces)?;
        let metric = selection_metric(cfg.loss, val.mae_e, val.mae_f);
        val_hist.push(metric);
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_mae_e: val.mae_e,
            val_mae_f: val.mae_f,
            wall_time_s: time_offset + start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "seed {seed} epoch {epoch}: lr {:.3e} train_loss {:.6} val_mae_e {:.6}{}",
                m.lr,
                m.train_loss,
                m.val_mae_e,
                m.val_mae_f.map_or(String::new(), |f| format!(" val_mae_f {f:.6}"))
            );
        }
        st.history.push(m.clone());
        if metric < st.best_metric - IMPROVEMENT_EPS {
            st.best_metric = metric;
            st.best_epoch = epoch;
            st.bad_epochs = 0;
            let mut best = Checkpoint::new(st.model.clone());
            best.meta = json!({
                "kind": "best",
                "seed": seed,
                "epoch": epoch,
                "val_metric": metric,
                "val_mae_e": val.mae_e,
                "val_mae_f": val.mae_f,
                "train_config": cfg,
            });
            if let Some((bp, _, _)) = &paths {
                write_checkpoint(bp, &best)?;
            }
            st.best = best;
        } else {
            st.bad_epochs += 1;
        }
        stopped = st.bad_epochs >= cfg.early_stop_patience;
        if let Some((_, lp, mp)) = &paths {
            write_checkpoint(lp, &st.last_checkpoint(cfg, seed, stopped)?)?;
            write_metrics(mp, std::slice::from_ref(&m), true)?;
        }
        ran += 1;
    }
    let last = st.last_checkpoint(cfg, seed, stopped)?;
    Ok(TrainOutcome {
        best: st.best,
        last,
        history: st.history,
        best_epoch: st.best_epoch,
        stopped_early: stopped,
    })
}
