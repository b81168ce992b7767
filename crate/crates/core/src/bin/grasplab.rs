use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use grasplab::harness::{self, EvalPolicy, HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "grasplab", version, about = "Headless 2.5D grasping lab")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (train, evaluate) or episode seed (render-frame).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted `key=value` override, repeatable (e.g. `ppo.clip=0.1`).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to $GRASPLAB_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BuiltinPolicy {
    Oracle,
    Random,
}

#[derive(Subcommand)]
enum Verb {
    /// Train until the configured step budget.
    Train(#[command(flatten)] Common),
    /// Evaluate a checkpoint or a built-in policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "policy")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<BuiltinPolicy>,
        /// Defaults to eval.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Dump the first frame of a freshly sampled episode.
    RenderFrame(#[command(flatten)] Common),
    /// Print the curriculum table.
    DumpSchedule(#[command(flatten)] Common),
}

fn load(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut overrides = c.overrides.clone();
    if let Some(out) = &c.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.verb {
        Verb::Train(c) => {
            let mut cfg = load(&c)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let s = harness::train(&cfg)?;
            println!("steps {} episodes {} updates {} lesson {}", s.global_step, s.episodes, s.updates, s.lesson);
            println!(
                "recent success rate {:.3} mean return {:.4}{}",
                s.recent_success_rate,
                s.recent_mean_return,
                if s.stopped_early { " (stopped early)" } else { "" }
            );
            println!("metrics {}", s.metrics.display());
            println!("checkpoint {}", s.final_checkpoint.display());
        }
        Verb::Evaluate { common, checkpoint, policy, episodes } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            let p = match (checkpoint, policy) {
                (Some(path), _) => EvalPolicy::Checkpoint(path),
                (None, Some(BuiltinPolicy::Random)) => EvalPolicy::Random,
                (None, Some(BuiltinPolicy::Oracle)) => EvalPolicy::Oracle,
                (None, None) => return Err(HarnessError::Config("evaluate needs --checkpoint or --policy".into())),
            };
            let r = harness::evaluate(&cfg, &p, episodes.unwrap_or(cfg.eval.episodes))?;
            print!("{}", toml::to_string(&r).map_err(|e| HarnessError::Io(e.to_string()))?);
        }
        Verb::RenderFrame(c) => {
            let cfg = load(&c)?;
            for f in harness::render_frame(&cfg, c.seed.unwrap_or(cfg.seed), &cfg.resolved_out_dir())? {
                println!("{}", f.display());
            }
        }
        Verb::DumpSchedule(c) => print!("{}", harness::dump_schedule(&load(&c)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
