use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use odeformer::config::RunConfig;
use odeformer::studies::Study;

#[derive(Parser)]
#[command(name = "odeformer", version, about = "ODE-block transformer experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Empirical convergence order of Euler, RK2 and RK4.
    OrderStudy(Common),
    /// Finite-difference checks of every primitive and block variant.
    GradcheckSuite(Common),
    /// Steps to the target copy accuracy per variant.
    CopyTask(Common),
    /// Validation perplexity of Euler / RK2 / RK4 language models.
    LmTruncation(Common),
    /// Copy and LM metrics across every block schema.
    SchemaComparison(Common),
    /// LM perplexity across RK2 coefficient schemes.
    ScalingComparison(Common),
    /// Copy-task training across encoder depths.
    DepthSweep(Common),
    /// Per-block gradient norms of a deep LM.
    GradientNormStudy(Common),
    /// Print the default config of a study.
    Defaults { study: String },
}

#[derive(Args)]
struct Common {
    /// key=value config file; unset keys keep the study defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Override one config key, e.g. `--set total_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn study_of(cmd: &Cmd) -> Option<Study> {
    Some(match cmd {
        Cmd::OrderStudy(_) => Study::OrderStudy,
        Cmd::GradcheckSuite(_) => Study::GradcheckSuite,
        Cmd::CopyTask(_) => Study::CopyTask,
        Cmd::LmTruncation(_) => Study::LmTruncation,
        Cmd::SchemaComparison(_) => Study::SchemaComparison,
        Cmd::ScalingComparison(_) => Study::ScalingComparison,
        Cmd::DepthSweep(_) => Study::DepthSweep,
        Cmd::GradientNormStudy(_) => Study::GradientNormStudy,
        Cmd::Defaults { .. } => return None,
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let Some(study) = study_of(&cli.cmd) else {
        let Cmd::Defaults { study } = cli.cmd else { unreachable!() };
        print!("{}", study.parse::<Study>()?.defaults().to_kv());
        return Ok(true);
    };
    let (Cmd::OrderStudy(c)
    | Cmd::GradcheckSuite(c)
    | Cmd::CopyTask(c)
    | Cmd::LmTruncation(c)
    | Cmd::SchemaComparison(c)
    | Cmd::ScalingComparison(c)
    | Cmd::DepthSweep(c)
    | Cmd::GradientNormStudy(c)) = cli.cmd
    else {
        unreachable!()
    };

    let mut cfg: RunConfig = study.defaults();
    if let Some(path) = &c.config {
        cfg = cfg.load(path)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seeds) = c.seeds {
        cfg.study.seeds = seeds;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    std::fs::write(c.out.join(format!("{study}.config")), cfg.to_kv())?;
    let metrics_dir = c.out.join("metrics");
    if cfg.study.metrics {
        std::fs::create_dir_all(&metrics_dir)?;
    }
    let report = study.run(&cfg, cfg.study.metrics.then_some(metrics_dir.as_path()))?;
    report.write(&c.out)?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
