use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use milestone_forecast::evaluation::ModelKind;
use mforecast::{cmd_benchmark, cmd_inspect, cmd_predict, cmd_synth, cmd_train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mforecast", version, about = "Milestone completion-time forecasting with quantile trees")]
struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Tune by cross-validation, refit on all rows and write a model file.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: Option<ModelKind>,
        /// Model file to write.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write `lower,median,upper` for every row of a CSV.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
    },
    /// Grid-search every listed model and write text and JSON reports.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated model keys.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic project table and its ground-truth sidecar.
    Synth {
        /// Generator spec (TOML); defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
        /// Sidecar path; defaults to the output with a `.truth.json` suffix.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Print a model file's structure and parameter count.
    Inspect { model: PathBuf },
}

fn load(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(d) = &run.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(k) = run.folds {
        cfg.folds = k;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train { run, model, out } => {
            let mut cfg = load(&run)?;
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(o) = out {
                cfg.output.model = Some(o);
            }
            let t = cmd_train(&cfg)?;
            println!(
                "{}: median AE {:.4}, mean AE {:.4}, best [{}]",
                t.report.kind, t.report.median_ae, t.report.mean_ae, t.report.best
            );
            println!("wrote {} and {}", t.model_path.display(), t.report_path.display());
        }
        Command::Predict { model, input, out, delimiter } => {
            if !delimiter.is_ascii() {
                return Err(CliError::Config(format!("delimiter `{delimiter}` is not ASCII")));
            }
            let n = match &out {
                Some(p) => {
                    let f = std::fs::File::create(p).map_err(|source| CliError::Output { path: p.clone(), source })?;
                    cmd_predict(&model, &input, delimiter as u8, f)?
                }
                None => cmd_predict(&model, &input, delimiter as u8, io::stdout().lock())?,
            };
            log::info!("predicted {n} rows");
        }
        Command::Benchmark { run, models, out_dir } => {
            let mut cfg = load(&run)?;
            if let Some(m) = models {
                cfg.models = m;
            }
            if let Some(d) = out_dir {
                cfg.output.report_json = Some(d.join("report.json"));
                cfg.output.report_text = Some(d.join("report.txt"));
            }
            let b = cmd_benchmark(&cfg)?;
            print!("{}", b.report.to_text());
            println!("wrote {} and {}", b.json_path.display(), b.text_path.display());
        }
        Command::Synth { spec, n, seed, out, truth } => {
            let truth = truth.unwrap_or_else(|| out.with_extension("truth.json"));
            let rows = cmd_synth(spec.as_deref(), n, seed, &out, &truth)?;
            println!("wrote {rows} rows to {} and {}", out.display(), truth.display());
        }
        Command::Inspect { model } => print!("{}", cmd_inspect(&model)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // downstream reader closed early, e.g. `| head`
        Err(CliError::Output { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
