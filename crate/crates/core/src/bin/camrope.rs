use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use camrope::config::RunConfig;
use camrope::pipeline;
use camrope::{Error, Result};

#[derive(Parser)]
#[command(name = "camrope", version, about = "Camera/time rotary attention toy video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render training episodes to archives with a hash manifest.
    GenData(Common),
    /// Train the toy model; resumes from the latest checkpoint in --out.
    Train(Common),
    /// Sample held-out episodes from a checkpoint.
    Sample(Common),
    /// Score sampled episodes against their ground truth.
    Eval(Common),
    /// Train and score every attention variant.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let m = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {} episodes to {}", m.len(), cfg.out_dir.join("episodes").display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let s = pipeline::cmd_train(&cfg)?;
            match s.final_loss {
                Some(l) => println!("trained to step {} (last loss {l:.6})", s.steps),
                None => println!("nothing to do at step {}", s.steps),
            }
        }
        Command::Sample(c) => {
            let cfg = c.load()?;
            let dirs = pipeline::cmd_sample(&cfg)?;
            println!("wrote {} sampled episodes", dirs.len());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let s = pipeline::cmd_eval(&cfg)?;
            print!("{}", s.aggregate.to_text().lines().filter(|l| !l.starts_with("frame.")).map(|l| format!("{l}\n")).collect::<String>());
            if let Some(copy) = s.copy_baseline {
                println!("copy_baseline_psnr_db = {:.6}", copy.psnr);
            }
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            print!("{}", pipeline::cmd_ablate(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
