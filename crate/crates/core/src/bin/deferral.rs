use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deferral_core::config::ExperimentConfig;
use deferral_core::pipeline::{Run, TriageStatus, RESOLVED_CONFIG};
use deferral_core::{Error, Result};

const EXIT_CONSTRAINT_BOUND: u8 = 4;

#[derive(Parser)]
#[command(name = "deferral", version, about = "Train and evaluate a screening classifier with human/machine triage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration. Defaults to the resolved config already in --out, else the standard config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = "DEFERRAL_THREADS")]
    threads: Option<usize>,
    /// Spacing of the triage cost grid.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Upper end of the triage cost grid.
    #[arg(long = "b-max", global = true)]
    b_max: Option<f64>,
    /// Exit with status 4 when no triage policy beats sending everyone to the radiologist.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the cohort and partition it.
    Generate,
    /// Train the per-view multi-task network.
    TrainMtl,
    /// Compute view outputs and train the fusion classifier.
    TrainClassifier,
    /// Grid-search the triage network and thresholds.
    TrainTriage,
    /// Score the held-out patients.
    Evaluate,
    /// Write the validation operating curve and the grid summary.
    Sweep,
    /// Write the stratified tables and figures.
    Report,
    /// All of the above in order.
    Run,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let resolved = c.out.join(RESOLVED_CONFIG);
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if resolved.exists() => ExperimentConfig::load(&resolved)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.delta {
        cfg.triage.delta = d;
    }
    if let Some(b) = c.b_max {
        cfg.triage.b_max = b;
    }
    cfg.resolved()
}

fn set_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn triage_status(status: TriageStatus, strict: bool) -> u8 {
    if status == TriageStatus::ConstraintBound {
        eprintln!("warning: no policy reduces the radiologist workload on validation; wrote the all-to-radiologist policy");
        if strict {
            return EXIT_CONSTRAINT_BOUND;
        }
    }
    0
}

fn execute(cmd: Command, common: &Common) -> Result<u8> {
    set_threads(common.threads)?;
    let run = Run::open(load_config(common)?, &common.out)?;
    let code = match cmd {
        Command::Generate => {
            run.generate()?;
            0
        }
        Command::TrainMtl => {
            let m = run.train_mtl()?;
            println!("validation diagnosis AUROC {:.4} at epoch {}", m.history.best_val_auroc, m.history.best_epoch);
            0
        }
        Command::TrainClassifier => {
            let m = run.train_classifier()?;
            println!("validation AUROC {:.4} at epoch {}", m.history.best_val_auroc, m.history.best_epoch);
            0
        }
        Command::TrainTriage => {
            let (m, status) = run.train_triage()?;
            let p = &m.policy;
            println!("alpha {:.6} beta {:.6} b_r {} b_c {}", p.alpha, p.beta, p.b_r, p.b_c);
            triage_status(status, common.strict)
        }
        Command::Evaluate => {
            let ev = run.evaluate()?;
            print_evaluation(&ev);
            0
        }
        Command::Sweep => {
            run.sweep()?;
            0
        }
        Command::Report => {
            run.report()?;
            0
        }
        Command::Run => {
            let (ev, status) = run.run_all()?;
            print_evaluation(&ev);
            triage_status(status, common.strict)
        }
    };
    Ok(code)
}

fn print_evaluation(ev: &deferral_core::pipeline::Evaluation) {
    println!(
        "{} of {} patients to the radiologist ({:.1}%)",
        ev.to_radiologist,
        ev.n,
        100.0 * ev.frac_to_radiologist
    );
    for row in &ev.comparison {
        println!("{:<18} kappa {:.4} f1 {:.4}", row.system, row.scores.kappa, row.scores.f1);
    }
}

fn report_error(e: &Error, out: &Path) -> u8 {
    eprintln!("error[{}]: {e}", e.category());
    if matches!(e, Error::Locked(_)) {
        eprintln!("another command is writing to {}; remove the lock file if it is stale", out.display());
    }
    e.exit_code() as u8
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command, &cli.common) {
        Ok(code) => ExitCode::from(code),
        Err(e) => ExitCode::from(report_error(&e, &cli.common.out)),
    }
}
