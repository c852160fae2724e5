//! `mcl-forge` command-line driver.
//!
//! Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mcl_forge::data::{self, SeparabilityProfile};
use mcl_forge::eval::{self, parse_subsets};
use mcl_forge::net::DEFAULT_HIDDEN;
use mcl_forge::{
    Ensemble, EvalReport, EvalSchedule, MultimodalDataset, Subset, TrainConfig, Variant,
};

const THREADS_ENV: &str = "MCL_FORGE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mcl-forge", version, about = "Multimodal MCL ensembles with online distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    Gen(GenArgs),
    /// Write a freshly initialised, untrained checkpoint.
    Init(InitArgs),
    /// Train an ensemble.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// kNN probe on penultimate features.
    Probe(ProbeArgs),
    /// Convert a training log into plotting curves.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Flat key=value file supplying defaults for any flag below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["complementary", "fast-modality"], conflicts_with_all = ["m", "c", "n_per_class", "dim", "separation", "noise", "radius"])]
    preset: Option<String>,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    c: usize,
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
    /// Feature dimension of every modality, or one value per modality.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    dim: Vec<usize>,
    /// Uniform separability in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    separation: f64,
    #[arg(long, default_value_t = data::PRESET_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = data::PRESET_RADIUS)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct NetArgs {
    #[arg(long)]
    data: PathBuf,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_HIDDEN])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "dmcl", value_parser = parse_variant)]
    variant: Variant,
    /// Distillation temperature.
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.75)]
    beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Multiply the distillation term by t².
    #[arg(long)]
    t2_scaling: bool,
    /// Steps between evaluations; 0 evaluates only at the end.
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long, value_parser = parse_subset_list)]
    subsets: Option<SubsetList>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_subset_list)]
    subsets: Option<SubsetList>,
    /// Report file (key=value).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probe this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,50")]
    k: Vec<usize>,
    /// CSV table output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trailing-mean window; bare flag means 50.
    #[arg(long, num_args = 0..=1, default_missing_value = "50")]
    smoothing: Option<usize>,
}

#[derive(Debug, Clone)]
struct SubsetList(Vec<Subset>);

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mcl_forge::Error| e.to_string())
}

fn parse_subset_list(s: &str) -> Result<SubsetList, String> {
    parse_subsets(s).map(SubsetList).map_err(|e| e.to_string())
}

/// Runtime failure that is really the user's fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Splices `--key=value` pairs from the `--config` file into `args` for
/// every key not already given on the command line.
fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(pos) = args
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| usage("--config needs a path"))?,
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let given: Vec<&str> = args
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key == "config" {
            return Err(usage(format!("{path}:{}: nested config", n + 1)));
        }
        if !given.contains(&key.as_str()) {
            let value = value.trim();
            // Boolean switches are written `key=true`.
            match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => extra.push(format!("--{key}={value}")),
            }
        }
    }
    let mut out = args;
    out.extend(extra);
    Ok(out)
}

fn init_threads() -> anyhow::Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("building thread pool")
}

fn load_data(path: &Path) -> anyhow::Result<MultimodalDataset> {
    MultimodalDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Ensemble> {
    // Inference does not depend on the training variant.
    Ensemble::load(path, Variant::Independent)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fresh_ensemble(net: &NetArgs, dataset: &MultimodalDataset, variant: Variant) -> anyhow::Result<Ensemble> {
    Ok(Ensemble::init(
        dataset.dims(),
        &net.hidden,
        dataset.num_classes(),
        variant,
        net.seed,
    )?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn summarize(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "test samples: {}", report.num_test_samples);
    for (m, a) in report.per_modality_accuracy.iter().enumerate() {
        let _ = writeln!(s, "modality {m}: {a:.4}");
    }
    let _ = writeln!(s, "sum: {:.4}", report.sum_accuracy);
    let _ = writeln!(s, "oracle: {:.4}", report.oracle_accuracy);
    for (subset, a) in &report.subset_accuracies {
        let _ = writeln!(s, "subset {{{subset}}}: {a:.4}");
    }
    if let Some(wf) = &report.winner_fraction {
        let wf: Vec<String> = wf.iter().map(|w| format!("{w:.3}")).collect();
        let _ = writeln!(s, "winner fraction: {}", wf.join(" "));
    }
    s
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let dataset = match a.preset.as_deref() {
        Some("complementary") => data::complementary_preset(a.seed)?,
        Some("fast-modality") => data::fast_modality_preset(a.seed)?,
        Some(other) => return Err(usage(format!("unknown preset {other:?}"))),
        None => {
            let dims = match a.dim.as_slice() {
                [d] => vec![*d; a.m],
                ds if ds.len() == a.m => ds.to_vec(),
                ds => {
                    return Err(usage(format!(
                        "--dim has {} entries for {} modalities",
                        ds.len(),
                        a.m
                    )))
                }
            };
            let profile = SeparabilityProfile::uniform(a.m, a.c, a.separation, a.noise, a.radius);
            data::generate(a.m, a.c, &dims, a.n_per_class, &profile, a.seed)?
        }
    };
    dataset
        .save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    let dims: Vec<String> = dataset.dims().iter().map(usize::to_string).collect();
    println!(
        "M={} C={} N={} dims={} seed={}",
        dataset.num_modalities(),
        dataset.num_classes(),
        dataset.len(),
        dims.join(","),
        a.seed
    );
    Ok(())
}

fn cmd_init(a: InitArgs) -> anyhow::Result<()> {
    let dataset = load_data(&a.net.data)?;
    let ensemble = fresh_ensemble(&a.net, &dataset, Variant::Independent)?;
    ensemble
        .save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote untrained checkpoint {}", a.output.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let config = TrainConfig {
        variant: a.variant,
        temperature: a.t,
        lambda: a.lambda,
        beta: a.beta,
        lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        steps: a.steps,
        seed: a.net.seed,
        scale_distill_by_t2: a.t2_scaling,
        ..TrainConfig::default()
    };
    config.validate()?;
    let dataset = load_data(&a.net.data)?;
    let mut ensemble = fresh_ensemble(&a.net, &dataset, a.variant)?;
    let schedule = EvalSchedule {
        every: a.eval_every,
        subsets: a.subsets.map(|s| s.0).unwrap_or_default(),
        ..EvalSchedule::default()
    };
    let run = mcl_forge::train(&mut ensemble, &dataset, &config, &schedule)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    ensemble
        .save(a.out.join("checkpoint.mclf"))
        .context("writing checkpoint")?;
    write(&a.out.join("metrics.csv"), run.log.to_csv_string())?;

    let last = run.final_report();
    let mut table = format!("step,{}\n", last.csv_header());
    for (step, report) in &run.reports {
        let _ = writeln!(table, "{step},{}", report.csv_row());
    }
    write(&a.out.join("reports.csv"), table)?;
    write(&a.out.join("report.txt"), last.to_kv())?;

    println!("variant {} seed {} steps {}", a.variant, a.net.seed, a.steps);
    print!("{}", summarize(last));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ensemble = load_checkpoint(&a.checkpoint)?;
    let dataset = load_data(&a.data)?;
    let subsets = a.subsets.map(|s| s.0).unwrap_or_default();
    let report = eval::evaluate(&ensemble, &dataset, &subsets, None)?;
    if let Some(out) = &a.out {
        write(out, report.to_kv())?;
    }
    print!("{}", summarize(&report));
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> anyhow::Result<()> {
    let dataset = load_data(&a.net.data)?;
    let ensemble = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => fresh_ensemble(&a.net, &dataset, Variant::Independent)?,
    };
    let table = eval::knn_probe(&ensemble, &dataset, &a.k)?;
    let csv = table.to_csv();
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_curves(a: CurvesArgs) -> anyhow::Result<()> {
    eval::export_curves(&a.log, &a.out, a.smoothing)
        .with_context(|| format!("exporting curves from {}", a.log.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run(args: Vec<String>) -> anyhow::Result<()> {
    let args = expand_config(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0.
            if !e.use_stderr() {
                e.exit();
            }
            return Err(usage(e.to_string()));
        }
    };
    init_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Curves(a) => cmd_curves(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let bad_input = err.chain().any(|e| {
        e.is::<Usage>() || matches!(e.downcast_ref(), Some(mcl_forge::Error::Config(_)))
    });
    if bad_input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {}", msg.trim_end());
            ExitCode::from(exit_code(&e))
        }
    }
}
