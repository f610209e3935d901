use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fscil::config::RunConfig;
use fscil::report::pct;
use fscil::{runner, Error};

#[derive(Parser)]
#[command(name = "fscil", version, about = "Training-free few-shot class-incremental learning with a frozen conditional denoiser")]
struct Cli {
    /// TOML configuration file; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "fscil-out")]
    out: PathBuf,
    /// Worker threads for prototype estimation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and condition vectors as CSV.
    GenData,
    /// Train and freeze the base models, then run every incremental session.
    Run,
    /// Run the protocol once per fusion weight over the same frozen models.
    AblateAlpha {
        /// Comma-separated fusion weights in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        alphas: Vec<f64>,
    },
    /// Print the session table of a run directory and write plot data.
    Report {
        /// Run directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> fscil::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> fscil::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli)?;
            for (path, rows) in runner::gen_data(&cfg, &cli.out)? {
                println!("{}: {rows} rows", path.display());
            }
        }
        Command::Run => {
            let cfg = load_config(&cli)?;
            let summary = runner::run(&cfg, &cli.out)?;
            println!("seed {}  encoder {}  denoiser {}", cfg.seed, summary.checksums.encoder, summary.checksums.denoiser);
            println!("{:<16} {:>7} {:>7} {:>8} {:>8}", "track", "Avg", "Last", "LastNew", "vsReal");
            for (name, t) in &summary.tracks {
                println!(
                    "{name:<16} {:>7.2} {:>7.2} {:>8} {:>8}",
                    t.avg,
                    t.last,
                    pct(t.last_new_acc()),
                    pct(t.last_improvement)
                );
            }
            println!("optimizer steps after session 0: {}", summary.optimizer_steps_since_freeze);
            println!("run directory: {}", cli.out.display());
        }
        Command::AblateAlpha { alphas } => {
            let cfg = load_config(&cli)?;
            let rows = runner::ablate_alpha(&cfg, &cli.out, alphas)?;
            print!("{}", runner::ablation_table(&rows));
        }
        Command::Report { dir } => {
            let dir = dir.as_ref().unwrap_or(&cli.out);
            let table = runner::report(dir)?;
            print!("{}", table.text);
            println!("plot data: {}", dir.join(runner::PLOT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
