//! `mcgm <gen|train|eval|inspect>`: dataset generation, training, evaluation
//! and hierarchy inspection.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use config::{RunConfig, Variant};

use crate::backbone::{read_checkpoint, Checkpoint};
use crate::cluster::Strategy;
use crate::error::{Error, Result};
use crate::moldata::{batch, make_synthetic, parse_xyz, read_manifest, split, write_manifest, write_xyz, Molecule};
use crate::readout::LossMode;
use crate::trainer::{cluster_hierarchy, evaluate_checkpoint, mean_std, train, TrainConfig, TrainData, TrainOptions};

pub const DATASET_FILE: &str = "dataset.xyz";
pub const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

#[derive(Parser, Debug)]
#[command(
    name = "mcgm",
    version,
    about = "Hierarchical clustered long-range modeling for message-passing potentials"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic long-range dataset and its train/val/test manifests.
    Gen(GenArgs),
    /// Train one model per seed and report validation/test MAE.
    Train(TrainArgs),
    /// Report energy (and force) MAE of a checkpoint.
    Eval(EvalArgs),
    /// Dump the cluster hierarchy a checkpoint builds for some molecules.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub min_atoms: usize,
    #[arg(long, default_value_t = 16)]
    pub max_atoms: usize,
    /// Fractions for train/val/test.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliVariant {
    Mcgm,
    Baseline,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliStrategy {
    Kmeanspp,
    Random,
    RandomBalanced,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `gen` (dataset.xyz plus manifests).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<CliVariant>,
    #[arg(long, value_enum)]
    pub clustering: Option<CliStrategy>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// energy_l1 or energy_force_mse
    #[arg(long)]
    pub loss: Option<String>,
    /// Continue each seed from its last checkpoint (seeds without one start fresh).
    #[arg(long)]
    pub resume: bool,
    /// Stop each seed after this many epochs in this invocation; continue later with --resume.
    #[arg(long)]
    pub epoch_budget: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "xyz")]
    pub data: Option<PathBuf>,
    /// train, val, test or all (with --data)
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub xyz: Option<PathBuf>,
    /// Also compute forces and the force MAE.
    #[arg(long)]
    pub forces: bool,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-molecule predictions here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "data")]
    pub xyz: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset indices to inspect (with --data); default all.
    #[arg(long, value_delimiter = ',')]
    pub index: Option<Vec<usize>>,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error: 1 usage/config, 2 IO or bad input files, 3 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Generation(_) => 1,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Json(_) => 2,
        Error::Numeric(_) | Error::Dimension { .. } | Error::Index { .. } => 3,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(a: &GenArgs) -> Result<String> {
    if a.n < 3 {
        return Err(Error::Config(format!(
            "--n must be at least 3 to allow a split, got {}",
            a.n
        )));
    }
    if a.min_atoms < 2 || a.max_atoms < a.min_atoms {
        return Err(Error::Config(format!(
            "invalid atom range [{}, {}]",
            a.min_atoms, a.max_atoms
        )));
    }
    let fr: [f64; 3] = a
        .fractions
        .clone()
        .try_into()
        .map_err(|_| Error::Config("--fractions needs 3 values".into()))?;
    let s = split(a.n, fr, a.seed).map_err(|e| Error::Config(e.to_string()))?;
    let mols = make_synthetic(a.n, [a.min_atoms, a.max_atoms], a.seed)?;
    write_file(&a.out.join(DATASET_FILE), &write_xyz(&mols))?;
    for (name, idx) in SPLIT_FILES.iter().zip([&s.train, &s.val, &s.test]) {
        write_manifest(&a.out.join(name), idx)?;
    }
    Ok(format!(
        "wrote {} molecules to {} (train {}, val {}, test {})\n",
        a.n,
        a.out.join(DATASET_FILE).display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    ))
}

fn read_xyz_file(path: &Path) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text)
}

/// Dataset molecules and ids for one split name (`train`, `val`, `test` or `all`).
fn load_split(dir: &Path, which: &str) -> Result<(Vec<Molecule>, Vec<u64>)> {
    let all = read_xyz_file(&dir.join(DATASET_FILE))?;
    let idx: Vec<usize> = match which {
        "all" => (0..all.len()).collect(),
        "train" => read_manifest(&dir.join(SPLIT_FILES[0]))?,
        "val" => read_manifest(&dir.join(SPLIT_FILES[1]))?,
        "test" => read_manifest(&dir.join(SPLIT_FILES[2]))?,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    pick(&all, &idx)
}

fn pick(all: &[Molecule], idx: &[usize]) -> Result<(Vec<Molecule>, Vec<u64>)> {
    let mols = idx
        .iter()
        .map(|&i| {
            all.get(i)
                .cloned()
                .ok_or_else(|| Error::Data(format!("manifest index {i} beyond {} molecules", all.len())))
        })
        .collect::<Result<_>>()?;
    Ok((mols, idx.iter().map(|&i| i as u64).collect()))
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(v) = a.variant {
        cfg.variant = match v {
            CliVariant::Mcgm => Variant::Mcgm,
            CliVariant::Baseline => Variant::Baseline,
            CliVariant::Frozen => Variant::Frozen,
        };
    }
    if let Some(s) = a.clustering {
        cfg.train.cluster.strategy = match s {
            CliStrategy::Kmeanspp => Strategy::KMeansPP,
            CliStrategy::Random => Strategy::Random,
            CliStrategy::RandomBalanced => Strategy::RandomBalanced,
        };
    }
    if let Some(s) = &a.seeds {
        cfg.train.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(l) = &a.loss {
        cfg.train.loss = l.parse::<LossMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let cfg = resolve_config(a)?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory (--data)".into()))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (--out)".into()))?;
    let all = read_xyz_file(&data_dir.join(DATASET_FILE))?;
    let manifest = |i: usize| read_manifest(&data_dir.join(SPLIT_FILES[i]));
    let (train_m, train_ids) = pick(&all, &manifest(0)?)?;
    let (val_m, val_ids) = pick(&all, &manifest(1)?)?;
    let (test_m, test_ids) = pick(&all, &manifest(2)?)?;
    let data = TrainData {
        train: train_m,
        val: val_m,
        train_ids: train_ids.clone(),
        val_ids: val_ids.clone(),
    };
    let with_forces = cfg.train.loss.needs_forces();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_file(&out_dir.join("run_config.json"), &serde_json::to_string_pretty(&cfg)?)?;

    let mut rows = Vec::new();
    for &seed in &cfg.train.seeds {
        let model = cfg.model_for(seed)?;
        let seed_dir = out_dir.join(format!("seed{seed}"));
        let opts = TrainOptions {
            resume: a.resume && seed_dir.join("last.ckpt").exists(),
            out_dir: Some(seed_dir),
            epoch_budget: a.epoch_budget,
            verbose: !a.quiet,
            ..Default::default()
        };
        let outcome = train(model, &data, &cfg.train, seed, &opts)?;
        let val = evaluate_checkpoint(&outcome.best, &data.val, &val_ids, with_forces)?;
        let test = if test_m.is_empty() {
            None
        } else {
            Some(evaluate_checkpoint(&outcome.best, &test_m, &test_ids, with_forces)?)
        };
        rows.push((seed, outcome.best_epoch, outcome.history.len(), val, test));
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "variant {} clustering {}",
        cfg.variant.name(),
        cfg.train.cluster.strategy.name()
    );
    let _ = writeln!(
        s,
        "seed  best_epoch  epochs  val_mae_e  val_mae_f  test_mae_e  test_mae_f  (meV, meV/Å)"
    );
    for (seed, be, ne, val, test) in &rows {
        let _ = writeln!(
            s,
            "{seed:<5} {be:<11} {ne:<7} {:<10} {:<10} {:<11} {}",
            format!("{:.4}", val.mae_e),
            fmt_opt(val.mae_f),
            fmt_opt(test.as_ref().map(|t| t.mae_e)),
            fmt_opt(test.as_ref().and_then(|t| t.mae_f)),
        );
    }
    let col = |f: &dyn Fn(
        &(
            u64,
            usize,
            usize,
            crate::trainer::EvalMetrics,
            Option<crate::trainer::EvalMetrics>,
        ),
    ) -> Option<f64>| { rows.iter().map(f).collect::<Option<Vec<f64>>>() };
    let stats = [
        ("val_mae_e", col(&|r| Some(r.3.mae_e))),
        ("val_mae_f", col(&|r| r.3.mae_f)),
        ("test_mae_e", col(&|r| r.4.as_ref().map(|t| t.mae_e))),
        ("test_mae_f", col(&|r| r.4.as_ref().and_then(|t| t.mae_f))),
    ];
    let mut summary = serde_json::Map::new();
    for (name, vals) in stats {
        if let Some(v) = vals {
            let (m, sd) = mean_std(&v)?;
            let _ = writeln!(s, "{name}: {m:.4} ± {sd:.4}");
            summary.insert(name.into(), json!({"values": v, "mean": m, "std": sd}));
        }
    }
    summary.insert("seeds".into(), json!(cfg.train.seeds));
    summary.insert("variant".into(), json!(cfg.variant.name()));
    write_file(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(s)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    read_checkpoint(path)
}

fn molecules_for(data: Option<&Path>, xyz: Option<&Path>, which: &str) -> Result<(Vec<Molecule>, Vec<u64>)> {
    match (data, xyz) {
        (Some(d), None) => load_split(d, which),
        (None, Some(x)) => {
            let mols = read_xyz_file(x)?;
            let ids = (0..mols.len() as u64).collect();
            Ok((mols, ids))
        }
        _ => Err(Error::Config("give exactly one of --data or --xyz".into())),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (mols, ids) = molecules_for(a.data.as_deref(), a.xyz.as_deref(), &a.split)?;
    let m = evaluate_checkpoint(&ckpt, &mols, &ids, a.forces)?;
    let report = json!({
        "checkpoint": a.checkpoint,
        "split": if a.data.is_some() { a.split.as_str() } else { "xyz" },
        "n_molecules": m.n_molecules,
        "mae_e_meV": m.mae_e,
        "mae_f_meV_per_A": m.mae_f,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(p) = &a.report {
        write_file(p, &text)?;
    }
    if let Some(p) = &a.dump {
        let mut dump = String::new();
        let mut start = 0;
        for pred in &m.predictions {
            let n = pred.energy.len();
            let refs: Vec<&Molecule> = mols[start..start + n].iter().collect();
            let b = batch(&refs)?.with_graph_ids(ids[start..start + n].to_vec())?;
            dump.push_str(&pred.dump(&b));
            start += n;
        }
        write_file(p, &dump)?;
    }
    Ok(text)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (mols, ids) = match (&a.data, &a.index) {
        (Some(d), Some(idx)) => pick(&read_xyz_file(&d.join(DATASET_FILE))?, idx)?,
        _ => molecules_for(a.data.as_deref(), a.xyz.as_deref(), "all")?,
    };
    let cluster = match ckpt.meta.get("train_config") {
        Some(c) => serde_json::from_value::<TrainConfig>(c.clone())?.cluster,
        None => Default::default(),
    };
    let b = batch(&mols)?.with_graph_ids(ids.clone())?;
    let h = cluster_hierarchy(&ckpt.model, &b, &cluster)?;
    let dump = h.dump(&ids)?;
    for (g, id) in ids.iter().enumerate() {
        let sizes: Vec<String> = h.level_sizes(g).iter().map(|n| n.to_string()).collect();
        eprintln!(
            "graph {id}: {} atoms, level sizes {}",
            b.counts()[g],
            sizes.join(" -> ")
        );
    }
    match &a.out {
        Some(p) => {
            write_file(p, &dump)?;
            Ok(String::new())
        }
        None => Ok(dump),
    }
}
