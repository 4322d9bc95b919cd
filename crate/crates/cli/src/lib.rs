//! `dgg` command-line driver.
//!
//! Commands that take a configuration print it first, as TOML that can
//! be fed back through `--config` to reproduce the run.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dgg_core::autodiff::with_adjoint_fault;
use dgg_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dgg_core::data::{generate_sbm, inject_edge_noise, load_dataset, save_dataset, GraphDataset, SbmSpec};
use dgg_core::nn::ParamStore;
use dgg_core::train::{ablate, evaluate, train, Model, TrainConfig};
use dgg_core::verify::{fault_kind, run_suite, SuiteOptions};
use dgg_core::{Error, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // Bad arguments are the caller's fault; everything else is a data,
        // numeric or I/O failure.
        let code = if matches!(e, Error::Argument(_)) { EXIT_USAGE } else { EXIT_FAILURE };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "dgg", version, about = "Differentiable graph generator for node classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a stochastic block model dataset.
    GenData(GenDataArgs),
    /// Train the generator and GCN on a dataset.
    Train(TrainArgs),
    /// Fixed-k and noise ablations over several seeds.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and the composite loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML (or `.json`) file with configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mode=straight_through`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset file to write; `.gz` compresses. Metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nodes_per_class: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    p_intra: Option<f64>,
    #[arg(long)]
    p_inter: Option<f64>,
    /// Comma-separated per-class intra-block probabilities.
    #[arg(long, value_delimiter = ',')]
    p_intra_per_class: Option<Vec<f64>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Add this fraction of extra random edges after generation.
    #[arg(long, default_value_t = 0.0)]
    edge_noise: f64,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    w0: Option<f64>,
    #[arg(long)]
    fixed_k: Option<usize>,
    /// `soft` or `straight_through`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    symmetric: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for the report, epoch CSV, adjacency dump and checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,30")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Noise step to evaluate at; defaults to the one stored in the checkpoint.
    #[arg(long)]
    step: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    #[arg(long, default_value_t = 6)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 5)]
    graphs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the adjoint of one primitive (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

/// `defaults`, overlaid with the config file, then `--set` pairs, then
/// the dedicated flags in `flags`.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    cfg: &ConfigArgs,
    flags: Vec<(&str, toml::Value)>,
) -> CliResult<T> {
    let mut table = toml::Table::try_from(defaults).map_err(|e| CliError::failure(e.to_string()))?;
    if let Some(path) = &cfg.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: toml::Table = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        };
        table.extend(file);
    }
    for pair in &cfg.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        table.insert(key.trim().to_string(), parse_value(value.trim()));
    }
    if let Some(seed) = cfg.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    for (key, value) in flags {
        table.insert(key.to_string(), value);
    }
    T::deserialize(table).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn echo<T: Serialize>(out: &mut dyn Write, title: &str, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).map_err(|e| CliError::failure(e.to_string()))?;
    writeln!(out, "# effective {title} configuration")?;
    write!(out, "{text}")?;
    writeln!(out)?;
    Ok(())
}

fn float(v: f64) -> toml::Value {
    toml::Value::Float(v)
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> CliResult<GraphDataset> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct DatasetMeta<'a> {
    spec: &'a SbmSpec,
    seed: u64,
    edge_noise: f64,
    num_nodes: usize,
    num_edges: usize,
}

fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut flags = Vec::new();
    let opt = |flags: &mut Vec<(&'static str, toml::Value)>, k, v: Option<toml::Value>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    opt(&mut flags, "nodes_per_class", a.nodes_per_class.map(int));
    opt(&mut flags, "num_classes", a.num_classes.map(int));
    opt(&mut flags, "p_intra", a.p_intra.map(float));
    opt(&mut flags, "p_inter", a.p_inter.map(float));
    opt(
        &mut flags,
        "p_intra_per_class",
        a.p_intra_per_class.as_ref().map(|ps| toml::Value::Array(ps.iter().map(|&p| float(p)).collect())),
    );
    opt(&mut flags, "feature_dim", a.feature_dim.map(int));
    opt(&mut flags, "separation", a.separation.map(float));
    opt(&mut flags, "noise_std", a.noise_std.map(float));
    let spec: SbmSpec = resolve(&SbmSpec::default(), &a.cfg, flags)?;
    echo(out, "dataset", &spec)?;

    let mut data = generate_sbm(&spec)?;
    if a.edge_noise > 0.0 {
        data = inject_edge_noise(&data, a.edge_noise, spec.seed)?;
    }
    save_dataset(&data, &a.out)?;
    let meta = DatasetMeta {
        spec: &spec,
        seed: spec.seed,
        edge_noise: a.edge_noise,
        num_nodes: data.num_nodes(),
        num_edges: data.edges.len(),
    };
    let meta_text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::failure(e.to_string()))?;
    write_file(&meta_path(&a.out), &(meta_text + "\n"))?;
    writeln!(
        out,
        "wrote {} ({} nodes, {} directed edges)",
        a.out.display(),
        data.num_nodes(),
        data.edges.len()
    )?;
    Ok(EXIT_OK)
}

fn train_config(f: &TrainFlags) -> CliResult<TrainConfig> {
    let mut flags = Vec::new();
    if let Some(e) = f.epochs {
        flags.push(("epochs", int(e)));
    }
    if let Some(w) = f.w0 {
        flags.push(("w0", float(w)));
    }
    if let Some(k) = f.fixed_k {
        flags.push(("fixed_k", int(k)));
    }
    if let Some(m) = &f.mode {
        flags.push(("mode", toml::Value::String(m.clone())));
    }
    if f.symmetric {
        flags.push(("symmetric", toml::Value::Boolean(true)));
    }
    let config: TrainConfig = resolve(&TrainConfig::default(), &f.cfg, flags)?;
    config.validate()?;
    Ok(config)
}

/// Dense adjacency, one row per line, shortest round-trip floats.
pub fn adjacency_csv(a: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..a.rows() {
        let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let data = load(&a.data)?;
    let config = train_config(&a.flags)?.resolved(&data);
    echo(out, "training", &config)?;
    std::fs::create_dir_all(&a.out)?;

    let outcome = train(&data, &config)?;
    let report = &outcome.report;
    let step = report.best_epoch.unwrap_or(0) as u64;
    let eval = evaluate(&outcome.model, &outcome.best_params, &data, step)?;

    write_file(&a.out.join("config.toml"), &toml::to_string(&report.config).map_err(|e| CliError::failure(e.to_string()))?)?;
    write_file(&a.out.join("report.json"), &(report.to_json() + "\n"))?;
    write_file(&a.out.join("epochs.csv"), &report.to_csv())?;
    if let Some(adj) = &eval.adjacency {
        write_file(&a.out.join("adjacency.csv"), &adjacency_csv(adj))?;
    }
    save_checkpoint(
        a.out.join("model.ckpt"),
        &Checkpoint {
            config: config.clone(),
            step,
            params: outcome.best_params.clone(),
        },
    )?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    writeln!(
        out,
        "best epoch {} val_acc {} test_acc {} k_mean {:.3} k_std {:.3} ({:.1}s)",
        report.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        fmt(report.best_val_acc),
        fmt(report.test_acc),
        eval.k_mean,
        eval.k_std,
        report.wall_clock_secs
    )?;
    writeln!(out, "outputs in {}", a.out.display())?;
    Ok(EXIT_OK)
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CliResult<i32> {
    if a.ks.is_empty() || a.seeds.is_empty() {
        return Err(CliError::usage("--ks and --seeds must be non-empty"));
    }
    let data = load(&a.data)?;
    let config = train_config(&a.flags)?.resolved(&data);
    echo(out, "ablation base", &config)?;
    writeln!(out, "# ks = {:?}, seeds = {:?}\n", a.ks, a.seeds)?;
    std::fs::create_dir_all(&a.out)?;
    let table = ablate(&data, &config, &a.ks, &a.seeds)?;
    write_file(&a.out.join("ablation.csv"), &table.rows_csv())?;
    write_file(&a.out.join("ablation_summary.csv"), &table.summary_csv())?;
    write!(out, "{}", table.summary_csv())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalOutput {
    step: u64,
    train_acc: f64,
    val_acc: f64,
    test_acc: f64,
    k_mean: f64,
    k_std: f64,
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    let ck = load_checkpoint(&a.checkpoint)?;
    echo(out, "checkpoint", &ck.config)?;
    let data = load(&a.data)?;
    data.validate()?;
    let mut params = ParamStore::new();
    let model = Model::new(&ck.config, data.feature_dim(), data.num_classes, &mut params)?;
    params.load_from(&ck.params)?;
    let step = a.step.unwrap_or(ck.step);
    let ev = evaluate(&model, &params, &data, step)?;
    let shown = EvalOutput {
        step,
        train_acc: ev.train_acc,
        val_acc: ev.val_acc,
        test_acc: ev.test_acc,
        k_mean: ev.k_mean,
        k_std: ev.k_std,
    };
    writeln!(out, "{}", serde_json::to_string(&shown).map_err(|e| CliError::failure(e.to_string()))?)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<i32> {
    if a.nodes == 0 || a.nodes > 12 || a.feature_dim == 0 || a.latent_dim == 0 {
        return Err(CliError::usage("gradcheck needs 1 <= nodes <= 12 and positive dimensions"));
    }
    let opts = SuiteOptions {
        nodes: a.nodes,
        feature_dim: a.feature_dim,
        latent_dim: a.latent_dim,
        graphs: a.graphs,
        seed: a.seed,
    };
    echo(
        out,
        "gradcheck",
        &toml::toml! {
            nodes = (a.nodes as i64)
            feature_dim = (a.feature_dim as i64)
            latent_dim = (a.latent_dim as i64)
            graphs = (a.graphs as i64)
            seed = (a.seed as i64)
        },
    )?;
    let lines = match &a.inject_fault {
        Some(name) => {
            let kind = fault_kind(name).ok_or_else(|| CliError::usage(format!("unknown operation `{name}`")))?;
            with_adjoint_fault(kind, || run_suite(&opts))?
        }
        None => run_suite(&opts)?,
    };
    let mut failed = Vec::new();
    for l in &lines {
        let verdict = if l.passed { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<24} max_rel_err {:.3e}  tol {:.0e}  coords {:>5}  {verdict}",
            l.name, l.max_rel_error, l.tolerance, l.checked
        )?;
        if !l.passed {
            failed.push(l.name.clone());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", lines.len())?;
        Ok(EXIT_OK)
    } else {
        Err(CliError::failure(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
