use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use philab::harness::{
    cmd_budget, cmd_cost, cmd_enumerate, cmd_gap, cmd_hierarchy, cmd_report, cmd_specloop, BudgetParams,
    ExperimentConfig, Report, SamplerSpec, BUDGET_TABLE, RUN_ROOT_ENV,
};
use philab::{GrammarSpec, LmSpec};

#[derive(Parser)]
#[command(name = "philab", version, about = "Exact and sampled laws for grammar-constrained decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count (and optionally dump) the language of the configured grammar.
    Enumerate(Common),
    /// Analytic gaps, bounds and KL identity over every reachable position.
    Gap(Common),
    /// Sampled TV to the grammar-conditional law for each estimator tier.
    Hierarchy(Common),
    /// Speculative decoding against a local-mask or Doob target.
    Specloop(Common),
    /// Grouped exact TVs on budget languages.
    Budget(BudgetArgs),
    /// Throughput rows from the analytic cost model.
    Cost(Common),
    /// Print a written report and exit nonzero if any audit failed.
    Report {
        /// Run directory or report.json.
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Run root; falls back to the environment, then `runs`.
    #[arg(long, env = RUN_ROOT_ENV)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_csv: bool,
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct BudgetArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, requires_all = ["k", "p1"])]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p1: Option<f64>,
    /// All eight settings of the stress table.
    #[arg(long, conflicts_with = "n")]
    table: bool,
}

impl Common {
    fn load(&self, fallback: impl FnOnce() -> ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => fallback(),
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(n) = self.resamples {
            cfg.resamples = n;
        }
        if let Some(c) = self.cap {
            cfg.cap = Some(c);
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(o) = &self.out {
            cfg.output.run_root = Some(o.clone());
        }
        cfg.output.csv &= !self.no_csv;
        cfg.output.dump_samples |= self.dump;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dyck_default() -> ExperimentConfig {
    ExperimentConfig::new(GrammarSpec::Dyck { depth: 3, length: 12 }, LmSpec::seeded(0, 2))
}

fn run(cli: Cli) -> anyhow::Result<Report> {
    let report = match cli.command {
        Command::Enumerate(c) => cmd_enumerate(&c.load(dyck_default)?)?,
        Command::Gap(c) => cmd_gap(&c.load(dyck_default)?)?,
        Command::Hierarchy(c) => cmd_hierarchy(&c.load(dyck_default)?)?,
        Command::Specloop(c) => {
            let cfg = c.load(dyck_default)?;
            if !matches!(cfg.sampler, SamplerSpec::Speculative { .. }) {
                bail!("specloop needs a config whose sampler is Speculative");
            }
            cmd_specloop(&cfg)?
        }
        Command::Budget(b) => {
            let mut cfg = b.common.load(|| {
                let mut c = ExperimentConfig::new(GrammarSpec::BudgetDfa { n: 20, k: 10 }, LmSpec::Bernoulli { p1: 0.62 });
                c.sampler = SamplerSpec::AnalyticOnly;
                c
            })?;
            if b.table {
                cfg.budget_rows = BUDGET_TABLE.to_vec();
            } else if let (Some(n), Some(k), Some(p1)) = (b.n, b.k, b.p1) {
                cfg.budget_rows = vec![BudgetParams { n, k, p1 }];
            }
            cmd_budget(&cfg)?
        }
        Command::Cost(c) => cmd_cost(&c.load(|| {
            let mut c = dyck_default();
            c.sampler = SamplerSpec::AnalyticOnly;
            c
        })?)?,
        Command::Report { path } => return Ok(cmd_report(&path)?),
    };
    let dir = report.write()?;
    eprintln!("wrote {}", dir.display());
    Ok(report)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            for a in report.audits.iter().filter(|a| !a.passed) {
                eprintln!("audit failed: {} ({})", a.name, a.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
