use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use interflow::config::{build_experiment, parse_config};
use interflow::detcalc::{identities_csv, identities_table};
use interflow::gamma::{gamma_empirical_with_matching, EmpiricalMeasure};
use interflow::runner;
use std::path::{Path, PathBuf};

/// Simulator and estimator suite for stochastic flows with interaction:
/// particle transport, flow Jacobians, log-determinant accumulation, density
/// moments, Lyapunov exponents and the intermittency verdict.
#[derive(Parser)]
#[command(name = "interflow", version, about)]
struct Cli {
    /// Worker threads for replica parallelism (performance only, never
    /// results).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $INTERFLOW_OUT_DIR or ./out.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replica count.
    #[arg(long)]
    replicas: Option<usize>,
}

#[derive(Args)]
struct DirArgs {
    /// Output directory of a previous `simulate`; defaults to
    /// $INTERFLOW_OUT_DIR or ./out.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: simulate, moments, estimators, summary.
    Run(RunArgs),
    /// Simulate replicas and write the trajectory dumps only.
    Simulate(RunArgs),
    /// Compute moment series from an existing trajectory dump.
    Moments(DirArgs),
    /// Pointwise Lyapunov report from an existing trajectory dump.
    Lyapunov(DirArgs),
    /// Moment-Lyapunov fits and the intermittency verdict.
    Intermittency(DirArgs),
    /// Determinant identity checks; writes identities.csv.
    Identities {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Random pairs per dimension.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Exact transport distance between two CSV point lists.
    Gamma {
        file_a: PathBuf,
        file_b: PathBuf,
        /// Write the optimal matching to this CSV file.
        #[arg(long)]
        matching: Option<PathBuf>,
    },
    /// Aggregate summary.json files into one verdict table.
    Report {
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_out_dir(given: Option<PathBuf>) -> PathBuf {
    given
        .or_else(|| std::env::var_os("INTERFLOW_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_experiment(args: &RunArgs) -> Result<interflow::config::Experiment> {
    let mut config = parse_config(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }
    if let Some(replicas) = args.replicas {
        config.sim.replicas = replicas;
    }
    let exp = build_experiment(config)?;
    for warning in &exp.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(exp)
}

fn read_points_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(coords) => points.push(coords),
            Err(_) if i == 0 => continue, // header line
            Err(e) => bail!("{}: line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(EmpiricalMeasure::from_points(&points)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing the thread pool")?;
    }

    match cli.command {
        Command::Run(args) => {
            let out_dir = default_out_dir(args.out_dir.clone());
            let exp = load_experiment(&args)?;
            let manifest = runner::run_experiment(&exp, &out_dir)?;
            println!(
                "wrote {} (config {})",
                out_dir.display(),
                &manifest.config_hash[..12]
            );
            if !manifest.replica_failures.is_empty() {
                for f in &manifest.replica_failures {
                    eprintln!("replica {} failed: {}", f.replica, f.error);
                }
                std::process::exit(2);
            }
        }
        Command::Simulate(args) => {
            let out_dir = default_out_dir(args.out_dir.clone());
            let exp = load_experiment(&args)?;
            let (trajectories, failures) = runner::stage_simulate(&exp, &out_dir)?;
            println!("simulated {} replicas into {}", trajectories.len(), out_dir.display());
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("replica {} failed: {}", f.replica, f.error);
                }
                std::process::exit(2);
            }
        }
        Command::Moments(args) => {
            let out_dir = default_out_dir(args.out_dir);
            let series = runner::stage_moments(&out_dir)?;
            println!("wrote moment series for {} replicas", series.len());
        }
        Command::Lyapunov(args) => {
            let out_dir = default_out_dir(args.out_dir);
            let report = runner::stage_lyapunov(&out_dir)?;
            println!(
                "lambda_hat = {} (stderr {}, martingale share {})",
                report.lambda_hat, report.stderr, report.mart_share_max
            );
        }
        Command::Intermittency(args) => {
            let out_dir = default_out_dir(args.out_dir);
            let out = runner::stage_intermittency(&out_dir)?;
            match &out.verdict {
                Some(v) => println!(
                    "verdict: {} (min ratio increment {})",
                    if v.is_intermittent { "intermittent" } else { "not_intermittent" },
                    v.min_increment
                ),
                None => println!("verdict unavailable (needs >= 3 moment orders above 1)"),
            }
        }
        Command::Identities { out_dir, samples, seed } => {
            let rows = identities_table(samples, seed);
            let csv = identities_csv(&rows);
            let out_dir = default_out_dir(out_dir);
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("identities.csv");
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            if rows.iter().any(|r| !r.pass) {
                bail!("identity checks failed");
            }
        }
        Command::Gamma { file_a, file_b, matching } => {
            let mu = read_points_csv(&file_a)?;
            let nu = read_points_csv(&file_b)?;
            let (distance, assignment) = gamma_empirical_with_matching(&mu, &nu)?;
            println!("{distance}");
            if let Some(path) = matching {
                let mut out = String::from("index_a,index_b\n");
                for (i, j) in assignment.iter().enumerate() {
                    out.push_str(&format!("{i},{j}\n"));
                }
                std::fs::write(&path, out)?;
            }
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                bail!("report needs at least one experiment directory");
            }
            let rows = runner::report_rows(&dirs)?;
            let table = runner::render_report(&rows);
            match out {
                Some(path) => std::fs::write(&path, &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}
