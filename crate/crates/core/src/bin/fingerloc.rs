use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fingerloc::kv::KvFile;
use fingerloc::pipeline::{self, RunConfig};
use fingerloc::Error;

/// Fingerprint localization with a two-stage k-NN cascade.
#[derive(Parser, Debug)]
#[command(name = "fingerloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic surveys for all four environments.
    Generate(Flags),
    /// Load datasets through manifests and re-export them.
    Ingest(Flags),
    /// Split, fit the policy and the cascade, save the model.
    Train(Flags),
    /// Produce confusion matrix, feature table, k sweep and latency report.
    Evaluate(Flags),
    /// Localize every row of an input table.
    Localize(Flags),
    /// Generate, train and evaluate in one run.
    Reproduce(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size as RxC.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long = "spacing-cm")]
    spacing_cm: Option<f64>,
    /// Iterations per grid point.
    #[arg(long)]
    iters: Option<usize>,
    /// Training fraction.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    /// scalar or sweep.
    #[arg(long)]
    repr: Option<String>,
    #[arg(long = "max-lag")]
    max_lag: Option<usize>,
    #[arg(long = "stage1-kind")]
    stage1_kind: Option<String>,
    /// e.g. "SportsHall=FCF,Lab=CTF+FCF".
    #[arg(long = "policy-override")]
    policy_override: Option<String>,
    /// raw or zscore.
    #[arg(long)]
    scaling: Option<String>,
    /// centroid or inverse-distance.
    #[arg(long)]
    aggregation: Option<String>,
    /// Largest k in the evaluation sweep.
    #[arg(long = "k-max")]
    k_max: Option<usize>,
    /// Stage-1 timing repetitions, 0 to skip.
    #[arg(long = "timing-reps")]
    timing_reps: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Saved model directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory of a previous train run.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Table to localize.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Manifest describing --input.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Where localize writes its results; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

impl Flags {
    fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let mut put = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(key, v);
            }
        };
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        put("seed", s(&self.seed));
        put("grid", self.grid.clone());
        put("spacing-cm", s(&self.spacing_cm));
        put("iters", s(&self.iters));
        put("split", s(&self.split));
        put("k1", s(&self.k1));
        put("k2", s(&self.k2));
        put("repr", self.repr.clone());
        put("max-lag", s(&self.max_lag));
        put("stage1-kind", self.stage1_kind.clone());
        put("policy-override", self.policy_override.clone());
        put("scaling", self.scaling.clone());
        put("aggregation", self.aggregation.clone());
        put("k-max", s(&self.k_max));
        put("timing-reps", s(&self.timing_reps));
        put("threads", s(&self.threads));
        put("out", p(&self.out));
        put("data", p(&self.data));
        put("model", p(&self.model));
        put("run", p(&self.run));
        put("input", p(&self.input));
        put("manifest", p(&self.manifest));
        put("output", p(&self.output));
        kv
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (flags, cmd): (&Flags, fn(&RunConfig) -> fingerloc::Result<String>) = match &cli.command {
        Command::Generate(f) => (f, pipeline::generate),
        Command::Ingest(f) => (f, pipeline::ingest),
        Command::Train(f) => (f, pipeline::train),
        Command::Evaluate(f) => (f, pipeline::evaluate),
        Command::Localize(f) => (f, pipeline::localize),
        Command::Reproduce(f) => (f, pipeline::reproduce),
    };
    let file = flags.config.as_deref().map(KvFile::read).transpose()?;
    let config = RunConfig::resolve(file.as_ref(), &flags.to_kv())?;
    let out = config.with_pool(|| cmd(&config))?;
    let to_stdout = !matches!(cli.command, Command::Localize(_)) || config.output.is_none();
    if to_stdout {
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(out.as_bytes());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fingerloc: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
