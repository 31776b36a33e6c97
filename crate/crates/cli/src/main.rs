//! Command-line front end: oracle runs, strategy sweeps, seed-variance
//! targets and plot-ready reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use driftrank::harness::{aggregate, run_oracle, run_sweep, seed_variance_target, write_report, ExperimentSpec, HarnessError, ResultTable};

#[derive(Parser)]
#[command(name = "driftrank", version, about = "Rank hyperparameter configurations for online learning at reduced cost")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configuration on the full stream and cache the traces.
    Oracle(Common),
    /// Run every sweep of the spec and write the result table.
    Sweep(Common),
    /// Measure the seed-variance regret target of the reference configuration.
    Target {
        #[command(flatten)]
        common: Common,
        /// Number of initialization seeds.
        #[arg(long, default_value_t = 8)]
        init_seeds: usize,
    },
    /// Aggregate a result table into cost-vs-regret curves.
    Report {
        /// Result table written by `sweep` (csv).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list overriding the spec.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

enum Failure {
    Spec(String),
    AllRowsFailed(PathBuf),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Other(e.into())
    }
}

fn load_spec(common: &Common) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(&common.spec).with_context(|| format!("reading {}", common.spec.display()))?;
    let mut spec = ExperimentSpec::from_json(&text).map_err(|e| Failure::Spec(e.to_string()))?;
    if let Some(seeds) = &common.seeds {
        spec.seeds = seeds.clone();
        spec.validate().map_err(|e| Failure::Spec(e.to_string()))?;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Failure::Spec("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(spec)
}

fn oracle_dir(out: &Path) -> PathBuf {
    out.join("oracle")
}

fn write_table(table: &ResultTable, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => table.write_csv(fs::File::create(path)?)?,
        Format::Json => fs::write(path, table.to_json())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Oracle(common) => {
            let spec = load_spec(&common)?;
            let dir = oracle_dir(&common.out);
            let mut lines = vec!["seed,rank,config,metric".to_string()];
            for &seed in &spec.seeds {
                let oracle = run_oracle(&spec, seed, Some(&dir))?;
                for (rank, id) in oracle.truth.ranking().order().iter().enumerate() {
                    let m = oracle.truth.metric(*id).unwrap_or(f64::NAN);
                    lines.push(format!("{seed},{},{id},{m}", rank + 1));
                }
                println!("seed {seed}: best {} of {}", oracle.truth.ranking().order()[0], oracle.truth.len());
            }
            let path = common.out.join("truth.csv");
            fs::write(&path, lines.join("\n") + "\n").context("writing ground truth")?;
        }
        Command::Sweep(common) => {
            let spec = load_spec(&common)?;
            let table = run_sweep(&spec, Some(&oracle_dir(&common.out)))?;
            let path = common.out.join(format!("results.{}", common.format.ext()));
            write_table(&table, &path, common.format)?;
            let failed = table.rows.iter().filter(|r| !r.is_ok()).count();
            println!("{} rows ({failed} failed) -> {}", table.rows.len(), path.display());
            if table.all_failed() {
                return Err(Failure::AllRowsFailed(path));
            }
        }
        Command::Target { common, init_seeds } => {
            let spec = load_spec(&common)?;
            let target = seed_variance_target(&spec, init_seeds)?;
            let path = common.out.join("target.txt");
            fs::write(&path, format!("{target}\n")).context("writing target")?;
            println!("{target}");
        }
        Command::Report { results, out, format } => {
            let src = results.unwrap_or_else(|| out.join("results.csv"));
            let file = fs::File::open(&src).with_context(|| format!("reading {}", src.display()))?;
            let table = ResultTable::read_csv(file)?;
            if table.rows.is_empty() {
                return Err(anyhow::anyhow!("{} has no rows", src.display()).into());
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("report.{}", format.ext()));
            write_report(fs::File::create(&path).context("writing report")?, &table.ks, &aggregate(&table), format == Format::Json)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Spec(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::AllRowsFailed(path)) => {
            eprintln!("error: every row failed, see {}", path.display());
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
