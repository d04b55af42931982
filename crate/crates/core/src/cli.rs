//! Command-line entry point. Data goes to `out`, logs and summaries to `err`.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 check failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bilevel::{alternating_train, hypergradient, InnerRates, ScalarToy};
use crate::ccnn::{init_params, CcnnConfig, PreparedGraph};
use crate::complex_lift::lift_graph;
use crate::config::{BilevelMode, FeatureChoice, TrainConfig};
use crate::contrastive::{pipeline_gradcheck, Trainer};
use crate::diffcore::{read_checkpoint, write_checkpoint, ParameterStore};
use crate::eval_probe::{
    embed_dataset, format_probe_tsv, format_study_tsv, linear_probe_cv, random_trim_study, retain_probabilities,
    semi_supervised_probe, ProbeConfig, ReadoutMask,
};
use crate::graph_io::{parse_tu_dataset, read_edge_list, Dataset, Graph};
use crate::trim_scheduler::{format_mask_dump, init_scheduler};
use crate::wl_refine::compare_pair;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const META_LOG: &str = "meta.log";
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "cellclat", version, about = "Cellular complex contrastive learning with adaptive trimming")]
pub struct Cli {
    /// Worker threads for data-parallel sections (1 = bit-exact reruns).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift graphs to cellular complexes and print cell counts.
    Lift {
        /// Edge-list file or TU dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// TU dataset name (defaults to the directory name).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 6)]
        ring_size: usize,
        /// Print every cell after the counts.
        #[arg(long)]
        dump: bool,
    },
    /// Run WL and CWL on graph pairs and report which distinguishes them.
    WlCompare {
        /// Lines `id path_a path_b` or `path_a path_b`; paths relative to the file.
        #[arg(long)]
        pairs_file: PathBuf,
        #[arg(long, default_value_t = 6)]
        ring_size: usize,
    },
    /// Contrastive pretraining; writes config, checkpoint and logs to --out.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Graph embeddings from a pretrained run.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run: PathBuf,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-2-cell retain probabilities here.
        #[arg(long)]
        mask_dump: Option<PathBuf>,
    },
    /// Linear-probe evaluation of a pretrained run.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Unsupervised)]
        protocol: Protocol,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Probe accuracy under random trimming of 2-cell readout terms.
    TrimStudy {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Hypergradient check against the closed form of a scalar problem.
    BilevelCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Unsupervised,
    SemiSupervised,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// TU dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset name (defaults to the directory name).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value config file applied before any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ring_size: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bilevel_mode: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Check(_) => EXIT_CHECK,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Check(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let (result, data, logs) = pool.install(|| {
        let (mut data, mut logs) = (Vec::new(), Vec::new());
        let r = dispatch(cli.command, &mut data, &mut logs);
        (r, data, logs)
    });
    let _ = out.write_all(&data);
    let _ = err.write_all(&logs);
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Lift {
            input,
            name,
            ring_size,
            dump,
        } => lift(&input, name.as_deref(), ring_size, dump, out, err),
        Command::WlCompare { pairs_file, ring_size } => wl_compare(&pairs_file, ring_size, out),
        Command::Pretrain { data, train, out: dir } => pretrain(&data, &train, &dir, err),
        Command::Embed {
            data,
            run,
            out: file,
            mask_dump,
        } => embed(&data, &run, file.as_deref(), mask_dump.as_deref(), out),
        Command::Probe {
            data,
            run,
            protocol,
            out: file,
            overrides,
        } => probe(&data, &run, protocol, file.as_deref(), &overrides, out, err),
        Command::TrimStudy {
            data,
            run,
            ratios,
            trials,
            out: file,
            overrides,
        } => trim_study(&data, &run, &ratios, trials, file.as_deref(), &overrides, out, err),
        Command::Gradcheck { samples, seed, tol, step } => gradcheck(samples, seed, tol, step, out),
        Command::BilevelCheck { instances, seed, tol } => bilevel_check(instances, seed, tol, out),
    }
}

fn dataset_name(dir: &Path, name: Option<&str>) -> Result<String, CliError> {
    match name {
        Some(n) => Ok(n.to_string()),
        None => dir
            .file_name()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| usage_err(format!("cannot infer a dataset name from {}", dir.display()))),
    }
}

fn load_dataset(args: &DataArgs) -> Result<Dataset, CliError> {
    let name = dataset_name(&args.dataset, args.name.as_deref())?;
    parse_tu_dataset(&args.dataset, &name).map_err(data_err)
}

fn lift(input: &Path, name: Option<&str>, m: usize, dump: bool, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let graphs: Vec<Graph> = if input.is_dir() {
        let name = dataset_name(input, name)?;
        parse_tu_dataset(input, &name).map_err(data_err)?.graphs
    } else {
        vec![read_edge_list(input).map_err(data_err)?]
    };
    let complexes = graphs
        .par_iter()
        .map(|g| lift_graph(g, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    let mut total = [0usize; 3];
    for (i, x) in complexes.iter().enumerate() {
        let [n0, n1, n2] = x.counts();
        total = [total[0] + n0, total[1] + n1, total[2] + n2];
        writeln!(out, "graph={i} N0={n0} N1={n1} N2={n2}").map_err(data_err)?;
        if dump {
            write!(out, "{}", x.dump()).map_err(data_err)?;
        }
    }
    writeln!(err, "total graphs={} N0={} N1={} N2={}", complexes.len(), total[0], total[1], total[2]).map_err(data_err)?;
    Ok(())
}

/// Pair file lines: `id path_a path_b` or `path_a path_b`; `#` starts a comment.
pub fn parse_pairs_file(text: &str, base: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, String> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let (id, a, b) = match f.as_slice() {
            [a, b] => (pairs.len().to_string(), *a, *b),
            [id, a, b] => (id.to_string(), *a, *b),
            _ => return Err(format!("pairs file line {}: expected 2 or 3 fields, got {}", i + 1, f.len())),
        };
        pairs.push((id, base.join(a), base.join(b)));
    }
    Ok(pairs)
}

fn wl_compare(pairs_file: &Path, m: usize, out: &mut dyn Write) -> CliResult {
    let text = fs::read_to_string(pairs_file).map_err(|e| data_err(format!("{}: {e}", pairs_file.display())))?;
    let base = pairs_file.parent().unwrap_or(Path::new("."));
    let pairs = parse_pairs_file(&text, base).map_err(CliError::Data)?;
    let reports = pairs
        .par_iter()
        .map(|(_, a, b)| {
            let ga = read_edge_list(a).map_err(data_err)?;
            let gb = read_edge_list(b).map_err(data_err)?;
            compare_pair(&ga, &gb, m).map_err(data_err)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    writeln!(out, "pair_id\twl_distinguishes\tcwl_distinguishes\titerations").map_err(data_err)?;
    for ((id, _, _), r) in pairs.iter().zip(&reports) {
        writeln!(
            out,
            "{id}\t{}\t{}\t{}",
            u8::from(r.wl_distinguishes),
            u8::from(r.cwl_distinguishes),
            r.iterations
        )
        .map_err(data_err)?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then named flags.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| e.to_string())?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv).map_err(|e| e.to_string())?;
    }
    let named: [(&str, Option<String>); 10] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("ring_size", args.ring_size.map(|v| v.to_string())),
        ("eta", args.eta.map(|v| v.to_string())),
        ("rho", args.rho.map(|v| v.to_string())),
        ("zeta", args.zeta.map(|v| v.to_string())),
        ("num_layers", args.layers.map(|v| v.to_string())),
        ("hidden", args.hidden.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("bilevel_mode", args.bilevel_mode.clone()),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| e.to_string())?;
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Lifts every graph with the configured feature scheme.
pub fn prepare_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<PreparedGraph>, String> {
    let scheme = match cfg.features {
        FeatureChoice::Auto => ds.default_feature_scheme(),
        FeatureChoice::Fixed(s) => s,
    };
    let feats = ds.node_features(scheme).map_err(|e| e.to_string())?;
    ds.graphs
        .par_iter()
        .zip(feats.par_iter())
        .map(|(g, f)| PreparedGraph::new(g, f, cfg.ring_size))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())
}

fn input_dim(data: &[PreparedGraph]) -> Result<usize, CliError> {
    data.first()
        .map(|p| p.feats[0].cols())
        .ok_or_else(|| CliError::Data("dataset has no graphs".into()))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn pretrain(data_args: &DataArgs, train: &TrainArgs, dir: &Path, err: &mut dyn Write) -> CliResult {
    let cfg = resolve_config(train).map_err(CliError::Usage)?;
    let ds = load_dataset(data_args)?;
    let data = prepare_dataset(&ds, &cfg).map_err(CliError::Data)?;
    let in_dim = input_dim(&data)?;
    fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_string()).map_err(data_err)?;
    let mut trainer = Trainer::new(&cfg, in_dim).map_err(data_err)?;
    let mut train_log = create_file(&dir.join(TRAIN_LOG))?;
    let mut meta_log = create_file(&dir.join(META_LOG))?;
    alternating_train(&mut trainer, &data, cfg.epochs, &mut train_log, &mut meta_log).map_err(data_err)?;
    train_log.flush().map_err(data_err)?;
    meta_log.flush().map_err(data_err)?;
    let ckpt = create_file(&dir.join(CHECKPOINT_FILE))?;
    write_checkpoint(&trainer.store, ckpt).map_err(data_err)?;
    writeln!(
        err,
        "trained {} graphs for {} epochs ({} steps) into {}",
        data.len(),
        cfg.epochs,
        trainer.step,
        dir.display()
    )
    .map_err(data_err)?;
    Ok(())
}

/// Config and parameters of a pretraining run, checked against the shapes
/// the config implies for input width `in_dim`.
pub fn load_run(run: &Path, in_dim: usize) -> Result<(TrainConfig, CcnnConfig, ParameterStore), String> {
    let cfg_path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| format!("{}: {e}", cfg_path.display()))?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&text).map_err(|e| e.to_string())?;
    let ckpt_path = run.join(CHECKPOINT_FILE);
    let file = fs::File::open(&ckpt_path).map_err(|e| format!("missing checkpoint {}: {e}", ckpt_path.display()))?;
    let store = read_checkpoint(std::io::BufReader::new(file)).map_err(|e| e.to_string())?;
    let ccnn = cfg.ccnn(in_dim);
    let mut expected = init_params(&ccnn, 0).map_err(|e| e.to_string())?;
    init_scheduler(&mut expected, ccnn.jump_width()).map_err(|e| e.to_string())?;
    for (name, p) in expected.iter() {
        match store.get(name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            Some(q) => {
                return Err(format!(
                    "checkpoint shape mismatch for {name}: {:?} vs config {:?}",
                    q.value.shape(),
                    p.value.shape()
                ))
            }
            None => return Err(format!("checkpoint lacks parameter {name}")),
        }
    }
    if store.len() != expected.len() {
        return Err(format!("checkpoint has {} parameters, config implies {}", store.len(), expected.len()));
    }
    Ok((cfg, ccnn, store))
}

fn load_for_eval(data_args: &DataArgs, run: &Path, overrides: &[String]) -> Result<(Dataset, Vec<PreparedGraph>, TrainConfig, CcnnConfig, ParameterStore), CliError> {
    let cfg_path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| data_err(format!("{}: {e}", cfg_path.display())))?;
    let mut base = TrainConfig::default();
    base.apply_text(&text).map_err(data_err)?;
    let ds = load_dataset(data_args)?;
    let data = prepare_dataset(&ds, &base).map_err(CliError::Data)?;
    let (mut cfg, ccnn, store) = load_run(run, input_dim(&data)?).map_err(CliError::Data)?;
    for kv in overrides {
        cfg.apply_override(kv).map_err(usage_err)?;
    }
    Ok((ds, data, cfg, ccnn, store))
}

fn eval_mask(cfg: &TrainConfig) -> ReadoutMask {
    if cfg.trimming {
        ReadoutMask::Scheduler
    } else {
        ReadoutMask::Full
    }
}

fn write_output(file: Option<&Path>, text: &str, out: &mut dyn Write) -> CliResult {
    match file {
        Some(p) => fs::write(p, text).map_err(|e| data_err(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(data_err),
    }
}

fn embed(data_args: &DataArgs, run: &Path, file: Option<&Path>, mask_dump: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let (ds, data, cfg, ccnn, store) = load_for_eval(data_args, run, &[])?;
    let x = embed_dataset(&store, &ccnn, &data, &eval_mask(&cfg), EMBED_CHUNK).map_err(data_err)?;
    let labels = ds.labels();
    let mut text = String::new();
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<String> = x.row_slice(i).iter().map(f64::to_string).collect();
        text.push_str(&format!("{i}\t{label}\t{}\n", row.join("\t")));
    }
    write_output(file, &text, out)?;
    if let Some(path) = mask_dump {
        let mut dump = String::new();
        for (i, p) in data.iter().enumerate() {
            let batch = crate::ccnn::ComplexBatch::new(&[p]).map_err(data_err)?;
            let r = retain_probabilities(&store, &ccnn, &batch).map_err(data_err)?;
            let x = &p.lifted.complex;
            dump.push_str(&format_mask_dump(i, x.offset(2), &x.two_cell_vertex_sets(), &r));
        }
        fs::write(path, dump).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn probe(
    data_args: &DataArgs,
    run: &Path,
    protocol: Protocol,
    file: Option<&Path>,
    overrides: &[String],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let (ds, data, cfg, ccnn, store) = load_for_eval(data_args, run, overrides)?;
    let pcfg = ProbeConfig::from_train(&cfg);
    pcfg.validate().map_err(usage_err)?;
    let x = embed_dataset(&store, &ccnn, &data, &eval_mask(&cfg), EMBED_CHUNK).map_err(data_err)?;
    let labels = ds.labels();
    let (name, report) = match protocol {
        Protocol::Unsupervised => ("unsupervised", linear_probe_cv(&x, &labels, &pcfg, cfg.seed)),
        Protocol::SemiSupervised => ("semi-supervised", semi_supervised_probe(&x, &labels, &pcfg, cfg.seed)),
    };
    let report = report.map_err(data_err)?;
    write_output(file, &format_probe_tsv(&ds.name, name, &report), out)?;
    writeln!(err, "{} {name} accuracy {:.4} +/- {:.4}", ds.name, report.mean, report.std).map_err(data_err)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn trim_study(
    data_args: &DataArgs,
    run: &Path,
    ratios: &[f64],
    trials: usize,
    file: Option<&Path>,
    overrides: &[String],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Usage(format!("trim ratio {r} outside [0, 1]")));
    }
    let (ds, data, cfg, ccnn, store) = load_for_eval(data_args, run, overrides)?;
    let pcfg = ProbeConfig::from_train(&cfg);
    pcfg.validate().map_err(usage_err)?;
    let result = random_trim_study(&store, &ccnn, &data, &ds.labels(), ratios, trials, &pcfg, cfg.seed, EMBED_CHUNK)
        .map_err(data_err)?;
    write_output(file, &format_study_tsv(&result), out)?;
    let better = result.rows.iter().filter(|r| r.accuracy > result.baseline).count();
    writeln!(
        err,
        "baseline {:.4} skeleton {:.4}; {better} of {} trials beat the baseline",
        result.baseline,
        result.skeleton,
        result.rows.len()
    )
    .map_err(data_err)?;
    Ok(())
}

fn gradcheck(samples: usize, seed: u64, tol: f64, step: f64, out: &mut dyn Write) -> CliResult {
    writeln!(out, "sample\tmax_rel_err\tchecked\tskipped_kinks").map_err(data_err)?;
    let mut worst: f64 = 0.0;
    for s in 0..samples as u64 {
        let r = pipeline_gradcheck(seed.wrapping_add(s), step).map_err(data_err)?;
        writeln!(out, "{s}\t{:e}\t{}\t{}", r.max_rel_err, r.checked, r.skipped_kinks).map_err(data_err)?;
        worst = worst.max(r.max_rel_err);
    }
    writeln!(out, "max_rel_err {worst:e}").map_err(data_err)?;
    if worst < tol {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {worst:e} exceeds {tol:e}")))
    }
}

fn bilevel_check(instances: usize, seed: u64, tol: f64, out: &mut dyn Write) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut collapse = true;
    writeln!(out, "theta\tupsilon\talpha\tsecond_order\texact\tdelta").map_err(data_err)?;
    for _ in 0..instances {
        let t: f64 = rng.random_range(-3.0..3.0);
        let u: f64 = rng.random_range(-3.0..3.0);
        let a: f64 = rng.random_range(1e-3..0.4);
        let store = ScalarToy::store(t, u);
        let run = |alpha: f64, mode| {
            hypergradient(&mut ScalarToy, &store, InnerRates { alpha, beta: alpha }, mode).map(|h| h.grads["upsilon"].item())
        };
        let second = run(a, BilevelMode::SecondOrder).map_err(data_err)?;
        let exact = ScalarToy::exact(t, u, a);
        let delta = (second - exact).abs();
        worst = worst.max(delta);
        collapse &= run(0.0, BilevelMode::SecondOrder).map_err(data_err)? == run(0.0, BilevelMode::FirstOrder).map_err(data_err)?;
        writeln!(out, "{t}\t{u}\t{a}\t{second}\t{exact}\t{delta:e}").map_err(data_err)?;
    }
    writeln!(out, "max_delta {worst:e} alpha0_modes_equal {collapse}").map_err(data_err)?;
    if worst < tol && collapse {
        Ok(())
    } else {
        Err(CliError::Check(format!("max delta {worst:e} (tolerance {tol:e}), alpha=0 modes equal: {collapse}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("cellclat").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["no-such-command"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["lift"]).0, EXIT_USAGE);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("wl-compare"));
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let (code, _, err) = run_args(&["lift", "--input", "/nonexistent/graph.txt"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn pairs_file_forms() {
        let p = parse_pairs_file("# c\nx a.txt b.txt\nc.txt d.txt # tail\n\n", Path::new("/d")).unwrap();
        assert_eq!(p[0], ("x".into(), PathBuf::from("/d/a.txt"), PathBuf::from("/d/b.txt")));
        assert_eq!(p[1].0, "1");
        assert!(parse_pairs_file("a b c d\n", Path::new(".")).is_err());
    }

    #[test]
    fn flags_override_config_layers() {
        let args = TrainArgs {
            config: None,
            overrides: vec!["epochs=7".into(), "rho=0.5".into()],
            seed: Some(9),
            ring_size: None,
            eta: None,
            rho: Some(0.3),
            zeta: None,
            layers: None,
            hidden: None,
            epochs: None,
            batch_size: None,
            bilevel_mode: Some("first-order".into()),
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.rho), (9, 7, 0.3));
        assert_eq!(cfg.bilevel_mode, BilevelMode::FirstOrder);
    }

    #[test]
    fn bilevel_check_passes() {
        let (code, out, _) = run_args(&["bilevel-check", "--instances", "20"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("alpha0_modes_equal true"));
    }
}
