use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Serialize;

use drglm::estimators::{
    aipw_ate, fit_bundle, iptw_glm_from_bundle, AipwMode, AteEstimate, EstimatorConfig,
    InferenceKind,
};
use drglm::formula::parse;
use drglm::glm::{Family, Link};
use drglm::inference::{bootstrap_ci, influence_se, BootstrapOptions, InfluenceMode};
use drglm::propensity::{weight_diagnostics, Clamp, WeightDiagnostics};
use drglm::simlab::{
    efficiency_table, run_config, se_comparison_table, summary_table, SimConfig, SimReport, Table,
};
use drglm::tabular::read_csv_path;
use drglm::{Error, Execution};

/// Doubly robust average causal effects with IPTW GLMs.
#[derive(Debug, Parser)]
#[command(name = "drglm", version)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "DRGLM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the working models on a CSV and estimate the average causal effect.
    Estimate(EstimateArgs),
    /// Run a simulation study described by a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Debug, clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// e.g. `y ~ x * (z1 + z2)`; must involve the exposure.
    #[arg(long)]
    outcome_formula: String,
    /// Propensity formula; its response is the 0/1 exposure.
    #[arg(long)]
    ps_formula: String,
    #[arg(long, default_value = "gaussian")]
    family: String,
    /// Defaults to the family's canonical link.
    #[arg(long)]
    link: Option<String>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::IptwGlm)]
    estimator: EstimatorArg,
    /// `none`, `boot:B`, or `if:supplement_compatible|weighted_consistent`.
    #[arg(long, default_value = "none")]
    inference: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Clamp propensity scores to `[eps, 1-eps]`, or `lo:hi`.
    #[arg(long)]
    clamp: Option<String>,
    #[arg(long, value_enum, default_value_t = AipwModeArg::Stratified)]
    aipw_mode: AipwModeArg,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every scenario's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV, text and JSON tables.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EstimatorArg {
    IptwGlm,
    Aipw,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AipwModeArg {
    Stratified,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum Inference {
    None,
    Bootstrap { replicates: usize },
    Influence { mode: InfluenceMode },
}

/// Exit 2 for bad invocations and configs, 1 for failures on valid input.
enum Failure {
    Config(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            e => Failure::Run(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn parse_inference(s: &str) -> CliResult<Inference> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    match (kind, arg) {
        ("none", None) => Ok(Inference::None),
        ("boot", Some(b)) => match b.parse::<usize>() {
            Ok(b) if b >= 2 => Ok(Inference::Bootstrap { replicates: b }),
            _ => Err(config_err(format!("--inference boot:B needs an integer B >= 2, got `{b}`"))),
        },
        ("if", None) => Ok(Inference::Influence { mode: InfluenceMode::default() }),
        ("if", Some(m)) => {
            let mode = match m {
                "supplement_compatible" | "supplement" => InfluenceMode::SupplementCompatible,
                "weighted_consistent" | "weighted" => InfluenceMode::WeightedConsistent,
                _ => return Err(config_err(format!("unknown influence mode `{m}`"))),
            };
            Ok(Inference::Influence { mode })
        }
        _ => Err(config_err(format!(
            "--inference must be none, boot:B or if:MODE, got `{s}`"
        ))),
    }
}

fn parse_clamp(s: &str) -> CliResult<Clamp> {
    let num = |v: &str| {
        f64::from_str(v.trim()).map_err(|_| config_err(format!("--clamp: `{v}` is not a number")))
    };
    let c = match s.split_once(':') {
        Some((lo, hi)) => Clamp::new(num(lo)?, num(hi)?),
        None => Clamp::symmetric(num(s)?),
    };
    c.map_err(|e| config_err(format!("--clamp: {e}")))
}

fn require_file(path: &Path, flag: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{flag}: no such file `{}`", path.display())))
    }
}

fn execution(threads: Option<usize>) -> CliResult<Execution> {
    match threads {
        Some(0) => Err(config_err("--threads must be at least 1")),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| config_err(format!("thread pool: {e}")))?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

#[derive(Debug, Serialize)]
struct EstimateBanner {
    command: &'static str,
    data: String,
    outcome_formula: String,
    ps_formula: String,
    family: Family,
    link: Link,
    estimator: EstimatorArg,
    inference: Inference,
    seed: u64,
    clamp: Option<(f64, f64)>,
    aipw_mode: AipwMode,
    version: &'static str,
}

#[derive(Debug, Serialize)]
struct EstimateRecord {
    run: EstimateBanner,
    n: usize,
    weights: WeightDiagnostics,
    estimates: Vec<AteEstimate>,
}

fn cmd_estimate(args: &EstimateArgs, exec: Execution) -> CliResult<()> {
    require_file(&args.data, "--data")?;
    let family: Family = args.family.parse()?;
    let link = match &args.link {
        Some(l) => l.parse()?,
        None => family.canonical_link(),
    };
    let inference = parse_inference(&args.inference)?;
    let clamp = args.clamp.as_deref().map(parse_clamp).transpose()?;
    let aipw_mode = match args.aipw_mode {
        AipwModeArg::Stratified => AipwMode::Stratified,
        AipwModeArg::Shared => AipwMode::Shared,
    };

    let outcome = parse(&args.outcome_formula)?;
    let propensity = parse(&args.ps_formula)?;
    let mut cfg = EstimatorConfig::new(outcome, propensity, family).with_link(link);
    cfg.clamp = clamp;
    cfg.aipw_mode = aipw_mode;
    let banner = EstimateBanner {
        command: "estimate",
        data: args.data.display().to_string(),
        outcome_formula: cfg.outcome.to_string(),
        ps_formula: cfg.propensity.to_string(),
        family,
        link,
        estimator: args.estimator,
        inference,
        seed: args.seed,
        clamp: clamp.map(|c| (c.lower, c.upper)),
        aipw_mode,
        version: env!("CARGO_PKG_VERSION"),
    };
    log::info!("run: {}", serde_json::to_string(&banner).expect("serializable"));

    let ds = read_csv_path(&args.data, &HashMap::new())?;
    let exposure = cfg.exposure().to_owned();
    let bundle = fit_bundle(&cfg, &ds)?;
    let weights = weight_diagnostics(&bundle.weights, &bundle.scores, ds.binary(&exposure)?);

    let mut estimates = Vec::new();
    if args.estimator != EstimatorArg::Aipw {
        let mut est = iptw_glm_from_bundle(&bundle, &ds, &exposure)?;
        match inference {
            Inference::None => {}
            Inference::Bootstrap { replicates } => {
                let opts = BootstrapOptions { replicates, seed: args.seed, execution: exec, ..Default::default() };
                let res = bootstrap_ci(&ds, &opts, |d| {
                    let b = fit_bundle(&cfg, d)?;
                    Ok(iptw_glm_from_bundle(&b, d, &exposure)?.ate)
                })?;
                est = est.with_inference(InferenceKind::Bootstrap, res.se, res.ci);
            }
            Inference::Influence { mode } => {
                let d = influence_se(&cfg, &bundle, &ds, mode)?;
                est = est.with_inference(InferenceKind::InfluenceFunction, d.se, d.ci(1.96));
            }
        }
        estimates.push(est);
    }
    if args.estimator != EstimatorArg::IptwGlm {
        let mut est = aipw_ate(&cfg, &ds)?;
        match inference {
            Inference::None => {}
            Inference::Bootstrap { replicates } => {
                let opts = BootstrapOptions { replicates, seed: args.seed, execution: exec, ..Default::default() };
                let res = bootstrap_ci(&ds, &opts, |d| Ok(aipw_ate(&cfg, d)?.ate))?;
                est = est.with_inference(InferenceKind::Bootstrap, res.se, res.ci);
            }
            Inference::Influence { .. } => {
                warn!("influence-function SEs cover the IPTW GLM estimate only; AIPW is reported without one");
            }
        }
        estimates.push(est);
    }

    let record = EstimateRecord { run: banner, n: ds.n_rows(), weights, estimates };
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&record).expect("serializable") + "\n",
        Format::Text => estimate_table(&record).to_text(),
        Format::Csv => estimate_table(&record).to_csv(),
    };
    emit(args.out.as_deref(), &text)
}

fn estimate_table(r: &EstimateRecord) -> Table {
    let fmt = |v: Option<f64>| v.map_or("NA".to_owned(), |v| format!("{v:.6}"));
    let mut t = Table {
        headers: ["method", "ate", "psi1", "psi0", "se", "lower", "upper", "inference"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    for e in &r.estimates {
        t.rows.push(vec![
            e.method.name().to_owned(),
            format!("{:.6}", e.ate),
            format!("{:.6}", e.psi1),
            format!("{:.6}", e.psi0),
            fmt(e.se),
            fmt(e.ci.map(|c| c.0)),
            fmt(e.ci.map(|c| c.1)),
            match e.inference {
                Some(InferenceKind::Bootstrap) => "bootstrap",
                Some(InferenceKind::InfluenceFunction) => "influence",
                None => "none",
            }
            .to_owned(),
        ]);
    }
    t
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    let res = match out {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io { path: p.display().to_string(), source }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io { path: "<stdout>".into(), source }),
    };
    res.map_err(Failure::Run)
}

fn simulate_banner(cfg: &SimConfig, path: &Path) -> String {
    let mut s = format!(
        "# drglm {} simulate --config {} seed={} replicates={}\n",
        env!("CARGO_PKG_VERSION"),
        path.display(),
        cfg.seed.unwrap_or(0),
        cfg.replicates.map_or("per-scenario".to_owned(), |r| r.to_string()),
    );
    for sc in &cfg.scenarios {
        let ec = sc.estimator_config();
        let inference = match (sc.bootstrap, sc.influence) {
            (None, None) => "none".to_owned(),
            (b, i) => [b.map(|b| format!("boot:{b}")), i.map(|m| format!("if:{m:?}"))]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join("+"),
        };
        s += &format!(
            "# {}: n={} reps={} seed={} outcome `{}` ps `{}` {}/{} estimators {:?} inference {}\n",
            sc.label(),
            sc.n,
            sc.replicates,
            sc.seed,
            ec.outcome,
            ec.propensity,
            ec.family,
            ec.link,
            sc.estimators,
            inference
        );
    }
    s
}

fn report_tables(report: &SimReport) -> Vec<(&'static str, Table)> {
    let mut t = Vec::new();
    if !report.scenarios.is_empty() {
        t.push(("scenarios", summary_table(&report.scenarios)));
    }
    if !report.efficiency.is_empty() {
        t.push(("efficiency", efficiency_table(&report.efficiency)));
    }
    if !report.se_comparison.is_empty() {
        t.push(("se_comparison", se_comparison_table(&report.se_comparison)));
    }
    t
}

fn cmd_simulate(args: &SimulateArgs, exec: Execution) -> CliResult<()> {
    require_file(&args.config, "--config")?;
    let cfg = SimConfig::from_path(&args.config)?.resolve(args.replicates, args.seed);
    let banner = simulate_banner(&cfg, &args.config);
    eprint!("{banner}");
    let report = run_config(&cfg, exec)?;
    let tables = report_tables(&report);

    let mut text = banner.clone();
    for (name, t) in &tables {
        text += &format!("\n[{name}]\n{}", t.to_text());
    }
    let json = serde_json::to_string_pretty(&report).expect("serializable") + "\n";

    if let Some(dir) = &args.out {
        let io = |p: PathBuf, r: std::io::Result<()>| {
            r.map_err(|source| Failure::Run(Error::Io { path: p.display().to_string(), source }))
        };
        io(dir.clone(), fs::create_dir_all(dir))?;
        for (name, t) in &tables {
            let p = dir.join(format!("{name}.csv"));
            io(p.clone(), fs::write(&p, t.to_csv()))?;
        }
        io(dir.join("report.txt"), fs::write(dir.join("report.txt"), &text))?;
        io(dir.join("report.json"), fs::write(dir.join("report.json"), &json))?;
    }
    let out = match args.format {
        Format::Text => text,
        Format::Json => json,
        Format::Csv => tables
            .iter()
            .map(|(name, t)| format!("# {name}\n{}", t.to_csv()))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    emit(None, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = execution(cli.threads).and_then(|exec| match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, exec),
        Command::Simulate(a) => cmd_simulate(a, exec),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("drglm: config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("drglm: error: {e}");
            ExitCode::from(1)
        }
    }
}
