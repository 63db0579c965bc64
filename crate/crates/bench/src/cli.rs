use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "el-bench", about = "Embedding-loss distillation experiments", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $EL_OUT_DIR/<name> or runs/<name>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the score teacher and certify it against the exact score
    TrainTeacher,
    /// Distill a one-step generator and write metrics, samples and a checkpoint
    Distill,
    /// Split the distillation gradient variance by source and fit its batch scaling
    VarianceSweep,
    /// Measure DM/EL gradient correlation and the variance of their mixtures
    LambdaSweep,
    /// Evaluate a generator checkpoint
    Eval {
        /// Generator checkpoint [default: <out>/generator.elp]
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Run the same distillation with every auxiliary loss and tabulate cost
    Compare,
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    match &c.config {
        Some(p) => ExperimentConfig::read(p, c.seed),
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(s) = c.seed {
                cfg = ExperimentConfig::parse(&format!("seed = {s}"))?;
            }
            Ok(cfg)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load(&cli.common)?;
    let out = run::resolve_out_dir(cli.common.out.as_deref(), &cfg);
    match cli.command {
        Command::TrainTeacher => {
            let info = run::run_train_teacher(&cfg, &out)?;
            println!(
                "teacher saved to {} (cert error {})",
                info.path.display(),
                info.cert_error.map_or("n/a".to_string(), |e| format!("{e:.4}"))
            );
        }
        Command::Distill => {
            let s = run::run_distill(&cfg, &out)?;
            if let Some(m) = s.final_metrics {
                println!(
                    "eval_mmd {:.5}  sliced_wasserstein {:.4}  mode_coverage {:.3}",
                    m.eval_mmd, m.sliced_wasserstein, m.mode_coverage
                );
            }
            println!("artifacts in {}", s.out_dir.display());
        }
        Command::VarianceSweep => {
            let r = run::run_variance_sweep(&cfg, &out)?;
            println!(
                "B={} total {:.3e}  noise {:.3e}  time {:.3e}  batch {:.3e}  residual {:.3e}  slope {:.3}",
                r.batch, r.var_total, r.var_noise, r.var_time, r.var_batch, r.var_diffusion_residual, r.var_batch_slope
            );
        }
        Command::LambdaSweep => {
            let r = run::run_lambda_sweep(&cfg, &out)?;
            let c = &r.correlation;
            println!(
                "sigma_dm {:.4e}  sigma_embed {:.4e}  rho {:.4}  lambda* {}",
                c.sigma_dm,
                c.sigma_embed,
                c.rho,
                r.lambda_star.map_or("degenerate".to_string(), |l| format!("{l:.4}"))
            );
        }
        Command::Eval { generator } => {
            let path = generator.unwrap_or_else(|| out.join("generator.elp"));
            let m = run::run_eval(&cfg, &path, &out)?;
            println!("eval_mmd,sliced_wasserstein,mode_coverage");
            println!("{},{},{}", m.eval_mmd, m.sliced_wasserstein, m.mode_coverage);
        }
        Command::Compare => {
            let rows = run::run_compare(&cfg, &out)?;
            println!("{:<12} {:>10} {:>10} {:>9} {:>9} {:>10} {:>9}", "auxiliary", "precompute", "setup_ms", "step_ms", "rel_cost", "eval_mmd", "coverage");
            for r in rows {
                println!(
                    "{:<12} {:>10} {:>10.1} {:>9.3} {:>9.2} {:>10.5} {:>9.3}",
                    r.auxiliary.name(),
                    r.precompute,
                    r.setup_ms,
                    r.step_ms,
                    r.relative_step_cost,
                    r.final_eval_mmd,
                    r.final_mode_coverage
                );
            }
        }
    }
    Ok(())
}

/// Parse `argv` and run; returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
