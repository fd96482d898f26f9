//! `lrope-lab`: scheme comparisons, localization, gradient checks and chunk
//! planning from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lrope_core::harness::{self, ExperimentConfig, MetricsReport};
use lrope_core::injection::Scheme;
use lrope_core::toy_model::ScenarioKind;

const OUT_ENV: &str = "LROPE_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "lrope-lab", version, about = "Multi-stream audio binding experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overridden by LROPE_LAB_OUT).
    #[arg(long, global = true, value_name = "DIR", default_value = "lrope-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, global = true, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long, global = true, value_name = "N")]
    steps: Option<usize>,
    #[arg(long = "theta-base", global = true, value_name = "X")]
    theta_base: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Concat,
    Add,
    Split,
    Lrope,
    All,
}

impl SchemeArg {
    fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeArg::Concat => vec![Scheme::Concat],
            SchemeArg::Add => vec![Scheme::Add],
            SchemeArg::Split => vec![Scheme::Split],
            SchemeArg::Lrope => vec![Scheme::Lrope],
            SchemeArg::All => Scheme::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    Static,
    Swap,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the requested schemes on one scenario and write metrics and heatmaps.
    SchemesCompare,
    /// Train a single scheme (lrope unless --scheme says otherwise).
    Train,
    /// Build a token label map from an attention matrix and a mask grid.
    Localize {
        /// Binary float64 matrix, video tokens × reference tokens.
        #[arg(long, value_name = "PATH")]
        attention: PathBuf,
        /// Mask grid text file.
        #[arg(long, value_name = "PATH")]
        masks: PathBuf,
    },
    /// Finite-difference check of the toy block's gradients; exits 2 on failure.
    Gradcheck {
        #[arg(long, value_name = "N")]
        dim: Option<usize>,
        #[arg(long, value_name = "N")]
        configs: Option<usize>,
        /// Offset added to every analytic gradient, to confirm failures are caught.
        #[arg(long, hide = true, default_value_t = 0.0)]
        sabotage: f64,
    },
    /// Split a long video into overlapping chunks.
    PlanChunks {
        #[arg(long, value_name = "N")]
        total: usize,
        #[arg(long = "chunk-len", value_name = "N", default_value_t = 81)]
        chunk_len: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = common.scheme {
        cfg.schemes = s.schemes();
    }
    if let Some(k) = common.scenario {
        cfg.scenario = match k {
            ScenarioArg::Static => ScenarioKind::Static,
            ScenarioArg::Swap => ScenarioKind::Swap,
        };
    }
    if let Some(n) = common.steps {
        cfg.train.steps = n;
    }
    if let Some(t) = common.theta_base {
        cfg.theta_base = t;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => common.out.clone(),
    }
}

fn print_report(r: &MetricsReport, out: &Path) {
    println!("scenario {} seed {} steps {}", r.config.scenario, r.config.seed, r.config.train.steps);
    println!("{:<8} {:>10} {:>10} {:>12}", "scheme", "before", "binding", "eval loss");
    for s in &r.schemes {
        println!("{:<8} {:>10.4} {:>10.4} {:>12.4}", s.scheme.name(), s.binding_before.mean, s.binding.mean, s.eval_loss_after);
    }
    println!(
        "gradcheck max rel error {:.3e} ({})",
        r.gradcheck.max_rel_error,
        if r.gradcheck.passed { "pass" } else { "FAIL" }
    );
    for c in &r.invariants {
        println!("invariant {:<26} {}", c.name, if c.passed { "pass" } else { "FAIL" });
    }
    println!("wrote {}", out.join(harness::METRICS_FILE).display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = out_dir(&cli.common);
    match cli.command {
        Command::SchemesCompare => {
            let cfg = load_config(&cli.common)?;
            let r = harness::cmd_schemes_compare(&cfg, &out)?;
            print_report(&r, &out);
        }
        Command::Train => {
            let mut cfg = load_config(&cli.common)?;
            if cli.common.scheme.is_none() {
                cfg.schemes = vec![Scheme::Lrope];
            }
            let r = harness::cmd_schemes_compare(&cfg, &out)?;
            print_report(&r, &out);
        }
        Command::Localize { attention, masks } => {
            let cfg = load_config(&cli.common)?;
            let map = harness::cmd_localize(&attention, &masks, &cfg.labels, &out)?;
            println!("labelled {} tokens; wrote {}", map.len(), out.join("label_map.txt").display());
        }
        Command::Gradcheck { dim, configs, sabotage } => {
            let cfg = load_config(&cli.common)?;
            let mut g = cfg.gradcheck_config();
            g.dim = dim.unwrap_or(g.dim);
            g.configs_per_scheme = configs.unwrap_or(g.configs_per_scheme);
            g.sabotage = sabotage;
            let r = harness::cmd_gradcheck(&g, &out)?;
            println!(
                "{} cases, d={}, {} tokens: max rel error {:.3e} (tolerance {:.0e})",
                r.cases.len(),
                r.dim,
                r.tokens,
                r.max_rel_error,
                r.tolerance
            );
            if !r.passed {
                eprintln!("gradient check FAILED");
                return Ok(ExitCode::from(2));
            }
            println!("gradient check passed");
        }
        Command::PlanChunks { total, chunk_len } => {
            if total == 0 {
                bail!("--total must be positive");
            }
            let plan = harness::cmd_plan_chunks(total, chunk_len, &out)?;
            print!("{}", plan.to_text());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
