use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kem_harness::config::{parse_override, read_pairs, ExperimentConfig, KEYS};
use kem_harness::error::{HarnessError, Result};
use kem_harness::{execute, run_dir, summary, DEFAULT_OUT, OUT_ENV};

#[derive(Parser)]
#[command(name = "kem", version, about = "Slot-memory attention bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by the config (noise-toy by default).
    Run(RunArgs),
    /// Cost sweep; exits 2 if measured counts differ from the formulas.
    Sweep(RunArgs),
    /// Finite-difference gradient suite; exits 2 on any failure.
    Gradcheck(RunArgs),
    /// Aggregate report.json files under a directory into CSV tables.
    Report {
        /// Directory searched recursively for runs.
        root: PathBuf,
        /// Where the tables are written (defaults to ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every config key.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mechanism: Option<String>,
    /// Output root; the run goes into <root>/<kind>-<mechanism>-<hash>.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// key=value, repeatable; applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, forced_kind: Option<&str>) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(path) => read_pairs(path)?,
            None => Vec::new(),
        };
        let mut over = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(m) = &self.mechanism {
            over.push(("mechanism".into(), m.clone()));
        }
        if let Some(s) = self.seed {
            over.push(("seed".into(), s.to_string()));
        }
        if let Some(k) = forced_kind {
            over.push(("kind".into(), k.into()));
        }
        Ok(ExperimentConfig::resolve(&file, &over)?)
    }

    fn root(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn run(args: &RunArgs, forced_kind: Option<&str>) -> Result<()> {
    let cfg = args.resolve(forced_kind)?;
    let dir = run_dir(&args.root(), &cfg);
    let done = execute(&cfg, &dir)?;
    println!("{}", done.dir.join(kem_harness::report::REPORT_FILE).display());
    for m in &done.report.metrics {
        println!("{}\t{}\t{}", m.metric, m.task, m.value);
    }
    done.gate
}

fn report(root: &Path, out: Option<&Path>) -> Result<()> {
    for p in summary::summarize(root, out.unwrap_or(root))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // Usage errors are config errors; 2 is reserved for failed gates.
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a, None),
        Command::Sweep(a) => run(a, Some("cost-sweep")),
        Command::Gradcheck(a) => run(a, Some("gradcheck")),
        Command::Report { root, out } => report(root, out.as_deref()),
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<20} {doc}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &HarnessError) -> u8 {
    e.exit_code() as u8
}
