use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uq_online::ensemble::Strategy;
use uq_online::runner::{cmd_gen, cmd_pretrain, cmd_report, cmd_run, ExperimentConfig};
use uq_online::{Error, Result};

/// Online uncertainty-aware ensemble experiments on shot streams.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic stream as CSV.
    Gen(Common),
    /// Train one base model per trial on the pretraining range.
    Pretrain(Common),
    /// Stream every strategy in every trial from the base models.
    Run(Common),
    /// Rebuild summary, REC and calibration files of a results directory.
    Report {
        /// Results directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (gen: output file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    /// For `gen` the seed override applies to the synthetic stream and
    /// `--out` names the output file.
    fn load(&self, gen: bool) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            match cfg.data.synthetic.as_mut() {
                Some(synth) if gen => synth.seed = s,
                _ => cfg.master_seed = s,
            }
        }
        if let Some(list) = &self.strategies {
            cfg.strategies = list.iter().map(|s| s.parse::<Strategy>()).collect::<Result<_>>()?;
        }
        if let Some(n) = self.trials {
            cfg.trials = n;
        }
        if !gen {
            if let Some(out) = &self.out {
                cfg.output_dir = out.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.load(true)?;
            let path = cmd_gen(&cfg, c.out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain(c) => {
            let cfg = c.load(false)?;
            for r in cmd_pretrain(&cfg)? {
                println!(
                    "trial {}: best epoch {}, alpha {:.4}, val MAE {}, test MAE {}",
                    r.trial,
                    r.best_epoch,
                    r.alpha,
                    fmt_opt(r.val_mae),
                    fmt_opt(r.test_mae)
                );
            }
        }
        Command::Run(c) => {
            let cfg = c.load(false)?;
            print_summary(&cmd_run(&cfg)?);
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output_dir,
                (None, None) => return Err(Error::Usage("report needs --out DIR or --config PATH".into())),
            };
            print_summary(&cmd_report(&dir)?);
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4e}"))
}

fn print_summary(summary: &uq_online::runner::Summary) {
    println!("{:<16} {:>6} {:>22} {:>22} {:>10}", "strategy", "trials", "MAE", "MSE", "vs base");
    for r in &summary.rows {
        println!(
            "{:<16} {:>6} {:>11.4e} ±{:>9.2e} {:>11.4e} ±{:>9.2e} {:>9}",
            r.strategy,
            r.trials,
            r.mae.mean,
            r.mae.std,
            r.mse.mean,
            r.mse.std,
            r.mae_improvement.map_or_else(|| "n/a".into(), |v| format!("{v:.2}%"))
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
