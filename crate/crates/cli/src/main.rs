use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tally_core::checkpoint;
use tally_core::evaluation::{
    check_protocol, collect_logits, invariance_acc, invariance_kl, metrics_from_samples, LogRegSettings, Protocol,
    RunReport,
};
use tally_core::experiment::report::{find_reports, write_report};
use tally_core::experiment::{sweep, DatasetSource, ExperimentConfig, Method};
use tally_core::sampling::SamplerStrategy;
use tally_core::synthdata::{generate, load_dataset, save_dataset, CorrelationMode, DatasetSpec, DomainMode};
use tally_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tally", version, about = "Multi-domain long-tailed classification with feature-statistics augmentation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train (and evaluate) the configured method for every seed.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a method x seed grid.
    Sweep(SweepArgs),
    /// Aggregate run reports into CSV tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct SpecArgs {
    /// Dataset spec JSON; the flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    domains: Option<usize>,
    /// Per-domain imbalance ratio.
    #[arg(long)]
    rho: Option<f64>,
    /// Examples in each domain's largest class.
    #[arg(long)]
    head_count: Option<usize>,
    #[arg(long)]
    image_side: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// cyclic_shift or independent.
    #[arg(long)]
    correlation: Option<String>,
    /// affine or warp.
    #[arg(long)]
    domain_mode: Option<String>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl SpecArgs {
    fn any_flag(&self) -> bool {
        self.spec.is_some()
            || self.classes.is_some()
            || self.domains.is_some()
            || self.rho.is_some()
            || self.head_count.is_some()
            || self.image_side.is_some()
            || self.channels.is_some()
            || self.noise.is_some()
            || self.correlation.is_some()
            || self.domain_mode.is_some()
            || self.data_seed.is_some()
    }

    /// The spec from `--spec` (or `base`, or the defaults) with flag overrides.
    fn resolve(&self, base: Option<DatasetSpec>) -> Result<DatasetSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => base.unwrap_or_else(|| DatasetSpec::new(10, 4)),
        };
        if let Some(c) = self.classes {
            spec.num_classes = c;
        }
        if let Some(d) = self.domains {
            spec.num_domains = d;
        }
        if let Some(r) = self.rho {
            spec.imbalance_ratio = r;
        }
        if let Some(h) = self.head_count {
            spec.head_count = h;
        }
        if let Some(s) = self.image_side {
            spec.image_side = s;
        }
        if let Some(c) = self.channels {
            spec.channels = c;
        }
        if let Some(n) = self.noise {
            spec.noise_std = n;
        }
        if let Some(c) = &self.correlation {
            spec.correlation_mode = match c.as_str() {
                "cyclic_shift" => CorrelationMode::CyclicShift,
                "independent" => CorrelationMode::Independent,
                other => return Err(Error::Config(format!("unknown correlation mode '{other}'"))),
            };
        }
        if let Some(m) = &self.domain_mode {
            spec.domain_mode = match m.as_str() {
                "affine" => DomainMode::Affine,
                "warp" => DomainMode::Warp,
                other => return Err(Error::Config(format!("unknown domain mode '{other}'"))),
            };
        }
        if let Some(s) = self.data_seed {
            spec.seed = s;
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    /// Dataset directory written by `generate` (instead of a spec).
    #[arg(long, conflicts_with = "spec")]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// selective, group_balanced, empirical or algorithm1_uniform.
    #[arg(long)]
    sampler: Option<String>,
    /// subpop or domainshift.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma list and/or inclusive ranges, e.g. `0..4` or `1,3,7`.
    #[arg(long)]
    seeds: Option<String>,
    /// Warm-start epochs.
    #[arg(long)]
    warm_start: Option<usize>,
    #[arg(long)]
    alpha_c: Option<f64>,
    #[arg(long)]
    alpha_d: Option<f64>,
    /// Prototype momentum.
    #[arg(long)]
    gamma: Option<f64>,
    /// Conv blocks before the augmentation layer.
    #[arg(long)]
    layer_r: Option<usize>,
    #[arg(long)]
    detach_nuisance: bool,
    /// Probability of keeping a pair's original representation.
    #[arg(long)]
    mix_original: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated methods (default: the config's method).
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// subpop or domainshift.
    #[arg(long, default_value = "subpop")]
    protocol: String,
    /// Under domainshift, the held-out domain to evaluate on (default: all).
    #[arg(long)]
    held_out: Option<usize>,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, sweep roots or report files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list '{text}'"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| bad())?;
            let b: u64 = b.trim_start_matches('=').parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if args.spec.any_flag() || args.data.is_some() => ExperimentConfig::new(DatasetSource::Spec(DatasetSpec::new(10, 4))),
        None => return Err(Error::Config("need --config, --spec/--classes/... or --data".into())),
    };
    if let Some(dir) = &args.data {
        cfg.dataset = DatasetSource::Dir(dir.clone());
    } else if args.spec.any_flag() {
        let base = match &cfg.dataset {
            DatasetSource::Spec(s) => Some(s.clone()),
            DatasetSource::Dir(_) => None,
        };
        cfg.dataset = DatasetSource::Spec(args.spec.resolve(base)?);
    }
    if let Some(m) = &args.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(s) = &args.sampler {
        cfg.train.sampler = SamplerStrategy::parse(s).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(p) = &args.protocol {
        cfg.protocol = p.parse()?;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.warm_start {
        t.warm_start_epochs = v;
    }
    if let Some(v) = args.alpha_c {
        t.alpha_c = v;
    }
    if let Some(v) = args.alpha_d {
        t.alpha_d = v;
    }
    if let Some(v) = args.gamma {
        t.gamma = v;
    }
    if args.detach_nuisance {
        t.detach_nuisance = true;
    }
    if let Some(v) = args.mix_original {
        t.mix_original = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.layer_r {
        cfg.network.conv_blocks_before_r = v;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_grid(cfg: &ExperimentConfig, methods: &[Method]) -> Result<()> {
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (--out or output_dir)".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    let path = out.join("experiment.json");
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    let reports = sweep(cfg, methods, Some(&out))?;
    println!("method\tprotocol\tseed\taverage\tworst\tmacro_f1");
    for r in &reports {
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            r.method, r.protocol, r.seed, r.metrics.average_accuracy, r.metrics.worst_domain_accuracy, r.metrics.macro_f1
        );
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = args.spec.resolve(None)?;
    let splits = generate(&spec)?;
    let manifest = save_dataset(&splits, &args.out)?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        manifest.train.size,
        manifest.val.size,
        manifest.test.size,
        args.out.display()
    );
    for (d, rho) in manifest.measured_imbalance.iter().enumerate() {
        match rho {
            Some(r) => println!("domain {d}: measured imbalance {r:.3}"),
            None => println!("domain {d}: no training data"),
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let protocol: Protocol = args.protocol.parse()?;
    let state = checkpoint::load(&args.checkpoint, None)?;
    let splits = load_dataset(&args.data)?;
    let spec = &splits.spec;
    let net = state.network.config();
    if net.num_classes != spec.num_classes || net.input_shape() != splits.test.example_shape() {
        return Err(Error::Config("checkpoint network does not match the dataset".into()));
    }
    let test = match (protocol, args.held_out) {
        (Protocol::DomainShift, Some(d)) => splits.test.filter(|e| e.d == d),
        (Protocol::Subpopulation, Some(_)) => {
            return Err(Error::Config("--held-out only applies to the domainshift protocol".into()))
        }
        _ => splits.test.clone(),
    };
    check_protocol(&test, protocol)?;
    let samples = collect_logits(&state.network, &test)?;
    let metrics = metrics_from_samples(&samples, spec.num_classes, spec.num_domains, &splits.train.class_totals())?;
    let (i_acc, i_kl) = match protocol {
        Protocol::Subpopulation => (
            invariance_acc(&samples, spec.num_domains, &LogRegSettings::default()).ok(),
            invariance_kl(&samples, spec.num_classes, spec.num_domains).ok().map(|r| r.value),
        ),
        Protocol::DomainShift => (None, None),
    };
    let config = serde_json::json!({
        "checkpoint_network": net,
        "checkpoint_train": state.config,
        "dataset": spec,
        "protocol": protocol,
        "held_out": args.held_out,
    });
    let report = RunReport::new("checkpoint", protocol, state.config.seed, config, metrics, i_acc, i_kl);
    let text = report.to_json()?;
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let reports = find_reports(&args.runs)?;
    info!("aggregating {} reports", reports.len());
    let rows = write_report(&reports, &args.out)?;
    println!("protocol\tmethod\truns\taverage_mean\taverage_std");
    for row in rows {
        let avg = row.get("average_accuracy").expect("summary has average accuracy");
        println!(
            "{}\t{}\t{}\t{}\t{}",
            row.protocol,
            row.method,
            row.runs,
            avg.mean.map(|v| format!("{v:.4}")).unwrap_or_default(),
            avg.std.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn methods_from(list: Option<&str>, cfg: &ExperimentConfig) -> Result<Vec<Method>> {
    match list {
        None => Ok(vec![cfg.method]),
        Some(text) => text.split(',').map(|m| Method::parse(m.trim())).collect(),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => {
            let cfg = build_config(args)?;
            run_grid(&cfg, &[cfg.method])
        }
        Command::Sweep(args) => {
            let cfg = build_config(&args.run)?;
            let methods = methods_from(args.methods.as_deref(), &cfg)?;
            run_grid(&cfg, &methods)
        }
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("1,3, 7").unwrap(), vec![1, 3, 7]);
        assert_eq!(parse_seeds("0..=1,5").unwrap(), vec![0, 1, 5]);
        assert!(parse_seeds("4..1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }
}
