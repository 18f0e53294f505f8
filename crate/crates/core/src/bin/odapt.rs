use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odapt::harness::{self, StudyConfig};
use odapt::Result;

#[derive(Parser)]
#[command(name = "odapt", about = "Object-based video domain adaptation study runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render every configured domain's dataset.
    Generate(Common),
    /// Train the source detectors and recognizers.
    TrainSource(Common),
    /// Source-only, ODAPT and fully-supervised for every pair and seed.
    Matrix(Common),
    /// Sweep the number of annotated target frames.
    AblateFrames(Common),
    /// ODAPT with the object encoder on and off.
    AblateEncoder(Common),
    /// Render report.md from a results file.
    Report {
        /// Results file; defaults to `<out>/results.json`.
        results: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` study config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of experiment cells run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(p) => StudyConfig::load(p)?,
            None => StudyConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            for (id, status) in harness::cmd_generate(&c.resolve()?)? {
                println!("{id}: {status:?}");
            }
        }
        Command::TrainSource(c) => harness::cmd_train_source(&c.resolve()?)?,
        Command::Matrix(c) => {
            let results = harness::cmd_matrix(&c.resolve()?)?;
            print!("{}{}", harness::report::matrix_table(&results), harness::report::controls_table(&results));
        }
        Command::AblateFrames(c) => {
            let results = harness::cmd_ablate_frames(&c.resolve()?)?;
            print!("{}", harness::report::frames_table(&results));
        }
        Command::AblateEncoder(c) => {
            let results = harness::cmd_ablate_encoder(&c.resolve()?)?;
            print!("{}", harness::report::encoder_table(&results));
        }
        Command::Report { results, out } => {
            let path = results.unwrap_or_else(|| out.join("results.json"));
            print!("{}", harness::cmd_report(&path, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
