use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stochdet_core::pipeline::{verify, DatasetSpec, ExperimentConfig, Pipeline, OUTPUT_DIR_ENV};
use stochdet_core::report::cycles_table;
use stochdet_core::{Error, NoiseMode};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Stochastic-inference adversarial detection experiments.
#[derive(Parser)]
#[command(name = "stochdet", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON). Without it the built-in fixture config is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,

    /// `synth:<seed>` or `idx:<images>:<labels>`.
    #[arg(long, global = true)]
    dataset: Option<String>,

    /// Pre-trained model; disables the train section.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    #[arg(long, global = true)]
    base_seed: Option<u64>,

    #[arg(long, global = true)]
    sr_lo: Option<f64>,

    #[arg(long, global = true)]
    sr_hi: Option<f64>,

    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// `sparsify` or `activation`.
    #[arg(long, global = true)]
    noise_mode: Option<String>,

    #[arg(long, global = true)]
    max_runs: Option<usize>,

    #[arg(long, global = true)]
    target_fpr: Option<f64>,

    /// Filters sharing an input stream.
    #[arg(long, global = true)]
    group_size: Option<usize>,

    /// Look-ahead window.
    #[arg(long, global = true)]
    window: Option<usize>,

    #[arg(long, global = true)]
    tiles: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the fixture model (or check a pre-trained one).
    Train,
    /// Build the per-filter threshold table.
    Profile,
    /// Generate adversarial sets for every configured attack.
    Attack,
    /// Fit detection thresholds on held-out benign inputs.
    Calibrate,
    /// Run the detector over benign and adversarial inputs.
    Detect,
    /// Aggregate verdicts into metrics.
    Eval,
    /// Run first noisy passes through the accelerator cycle model.
    Simulate,
    /// Write histograms and sweep tables.
    Report,
    /// All stages in order.
    Run,
    /// Check artifact digests and config stamps in the output directory.
    Verify,
    /// Print the effective config as JSON.
    ShowConfig,
}

fn parse_mode(s: &str) -> Result<NoiseMode, Error> {
    s.parse()
}

fn build_config(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::fixture(o.base_seed.unwrap_or(1)),
    };
    if let Some(d) = &o.dataset {
        cfg.dataset = d.parse::<DatasetSpec>()?;
    }
    if let Some(m) = &o.model {
        cfg.model = Some(m.clone());
        cfg.train = None;
    }
    if let Some(s) = o.base_seed {
        cfg.base_seed = s;
    }
    if let Some(v) = o.sr_lo {
        cfg.noise.sr_lo = v;
    }
    if let Some(v) = o.sr_hi {
        cfg.noise.sr_hi = v;
    }
    if let Some(v) = o.gamma {
        cfg.noise.gamma = v;
    }
    if let Some(m) = &o.noise_mode {
        cfg.noise.mode =
            parse_mode(m).map_err(|e| Error::Config { field: "noise.mode".into(), detail: e.to_string() })?;
    }
    if let Some(v) = o.max_runs {
        cfg.detector.max_runs = v;
    }
    if let Some(v) = o.target_fpr {
        cfg.detector.target_fpr = v;
    }
    if let Some(v) = o.group_size {
        cfg.accelerator.group_size = v;
    }
    if let Some(v) = o.window {
        cfg.accelerator.lookahead = v;
    }
    if let Some(v) = o.tiles {
        cfg.accelerator.tiles = v;
    }
    if let Some(d) = &o.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(p: &Pipeline, stage: &str) -> Result<()> {
    let out = p.output_dir();
    match stage {
        "eval" => print!("{}", std::fs::read_to_string(out.join("metrics.csv"))?),
        "simulate" => {
            let c = p.cycles()?;
            print!("{}", cycles_table(&c.report).render(None));
            println!(
                "speedup {:.3} (eligible layers {:.3}, sparsity {:.3}) over {} inputs",
                c.report.speedup, c.report.eligible_speedup, c.report.eligible_sparsity, c.inputs
            );
        }
        "calibrate" => {
            let t = p.calibration()?.thresholds;
            println!("t1_greedy {} t1_avg {} t2_avg {} t2_greedy {}", t.t1_greedy, t.t1_avg, t.t2_avg, t.t2_greedy);
        }
        _ => println!("{stage}: ok ({})", out.display()),
    }
    Ok(())
}

fn verify_dir(out: &Path, cfg: Option<&ExperimentConfig>) -> Result<ExitCode> {
    let problems = verify(out, cfg)?;
    if problems.is_empty() {
        println!("verify: ok ({})", out.display());
        return Ok(ExitCode::SUCCESS);
    }
    for p in &problems {
        println!("{p}");
    }
    Ok(ExitCode::from(EXIT_STAGE))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = build_config(&cli.opts)?;
    match cli.cmd {
        Cmd::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify => {
            let expected = cli.opts.config.is_some().then_some(&cfg);
            verify_dir(&cfg.output_dir, expected)
        }
        cmd => {
            let out = cfg.output_dir.clone();
            let p = Pipeline::with_output_dir(cfg, out)?;
            let stage = match cmd {
                Cmd::Train => "train",
                Cmd::Profile => "profile",
                Cmd::Attack => "attack",
                Cmd::Calibrate => "calibrate",
                Cmd::Detect => "detect",
                Cmd::Eval => "eval",
                Cmd::Simulate => "simulate",
                Cmd::Report => "report",
                Cmd::Run => {
                    p.run()?;
                    summarize(&p, "eval")?;
                    summarize(&p, "simulate")?;
                    return Ok(ExitCode::SUCCESS);
                }
                Cmd::Verify | Cmd::ShowConfig => unreachable!(),
            };
            p.run_stage(stage).with_context(|| format!("stage {stage}"))?;
            summarize(&p, stage)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_STAGE })
        }
    }
}
