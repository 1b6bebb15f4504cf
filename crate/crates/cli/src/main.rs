use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coopnav::covariance::{config_p2a, config_p2b, config_p3a, config_p3b, contradiction_check, sigma_p_bearing, sigma_p_range};
use coopnav::estimation::EstimatorKind;
use coopnav::sim::{export_traces, run_closed_loop, run_monte_carlo, seed_list, write_summary, ExportFormat, GridAxis, NoiseMode, RunConfig};
use coopnav::world::{load_scenario, RngStream, Scenario};
use coopnav::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "coopnav", version, about = "Cooperative localization and path planning for vehicle teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Mhe,
    Ekf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "mhe")]
    estimator: Estimator,
    #[arg(long, value_enum, default_value = "on")]
    cooperation: Switch,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Exact measurements, no plant noise, estimate starts at truth.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and optionally export its traces.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Monte-Carlo runs over seeds and a parameter grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// `KEY=V1,V2,...`; repeat for a multi-axis grid.
        #[arg(long)]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Writes `summary.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and report every problem.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Cross-check the path-sum covariance against the Gramian inverse.
    Oracle {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Serialize(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn read_scenario(path: &Path) -> Result<Scenario, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: path.to_path_buf(),
        source,
    })?;
    load_scenario(&text)
}

fn prepare(args: &RunArgs) -> Result<(Scenario, RunConfig), Error> {
    let mut scenario = read_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let config = RunConfig {
        estimator: match args.estimator {
            Estimator::Mhe => EstimatorKind::Mhe,
            Estimator::Ekf => EstimatorKind::Ekf,
        },
        cooperation: matches!(args.cooperation, Switch::On),
        max_steps: args.max_steps,
        noise: if args.noiseless { NoiseMode::Noiseless } else { NoiseMode::Nominal },
    };
    Ok((scenario, config))
}

fn run(args: &RunArgs, out: Option<&Path>, format: Format) -> Result<ExitCode, Error> {
    let (scenario, config) = prepare(args)?;
    let result = run_closed_loop(&scenario, &config)?;
    let m = &result.metrics;
    println!("seed {}  steps {}  digest {}", result.seed, result.steps(), result.digest());
    println!("vehicle  path_length_m  mse_m2  arrival_step");
    for v in &m.vehicles {
        let arrival = v.arrival_step.map_or("-".to_string(), |s| s.to_string());
        println!("{:>7}  {:>13.3}  {:>6.4}  {:>12}", v.vehicle, v.path_length_m, v.mse_m2, arrival);
    }
    println!(
        "total path {:.3} m  mse {:.4} m^2  last arrival {}  planner {:.4} s/iter",
        m.total_path_length_m,
        m.mse_m2,
        m.last_arrival_s.map_or("-".to_string(), |t| format!("{t:.1} s")),
        m.mean_planner_time_s
    );
    if let Some(dir) = out {
        let format = match format {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        };
        let files = export_traces(&result, scenario.step_s, dir, format)?;
        println!("wrote {} files to {}", files.len(), dir.display());
    }
    if let Some(reason) = &result.aborted {
        eprintln!("run aborted: {reason}");
        return Ok(ExitCode::from(EXIT_ABORTED));
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: &RunArgs, grid: &[String], seeds: usize, jobs: usize, out: Option<&Path>) -> Result<ExitCode, Error> {
    let (scenario, config) = prepare(args)?;
    let axes = grid.iter().map(|g| g.parse::<GridAxis>()).collect::<Result<Vec<_>, _>>()?;
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let summary = run_monte_carlo(&scenario, &seed_list(scenario.seed, seeds), &axes, &config, jobs)?;
    let show = |s: Option<coopnav::sim::Spread>| s.map_or("-".to_string(), |s| format!("{:.4} ({:.4})", s.median, s.iqr));
    println!("point  failures  mse_m2  path_m  last_arrival_s  planner_s   [median (iqr)]");
    for p in &summary.points {
        let label = if p.assignments.is_empty() {
            "base".to_string()
        } else {
            p.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        };
        println!(
            "{label}  {}  {}  {}  {}  {}",
            p.failures,
            show(p.mse_m2),
            show(p.total_path_length_m),
            show(p.last_arrival_s),
            show(p.planner_time_s)
        );
    }
    if let Some(dir) = out {
        let path = dir.join("summary.json");
        write_summary(&summary, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path) -> Result<ExitCode, Error> {
    let scenario = read_scenario(path)?;
    println!(
        "ok: {} vehicles, {} landmarks, digest {}",
        scenario.n_vehicles(),
        scenario.resolve_landmarks().len(),
        scenario.digest()
    );
    Ok(ExitCode::SUCCESS)
}

fn oracle(draws: usize, seed: u64) -> Result<ExitCode, Error> {
    const TOL: f64 = 1e-10;
    let mut rng = RngStream::new(seed).child("oracle");
    let mut ok = true;
    for name in ["a-1-2", "1-2-b", "3-a-1-2", "1-2-b-3"] {
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let mut o = || rng.uniform(0.1, 10.0);
            let cfg = match name {
                "a-1-2" => config_p2a(o(), o()),
                "1-2-b" => config_p2b(o(), o()),
                "3-a-1-2" => config_p3a(o(), o(), o()),
                _ => config_p3b(o(), o(), o()),
            };
            let g = cfg.gramian()?;
            for (i, p) in cfg.path_sums()?.iter().enumerate() {
                worst = worst.max((p - g[(i, i)]).abs() / g[(i, i)].abs());
            }
        }
        let pass = worst <= TOL;
        ok &= pass;
        println!("{} {name:<8} max relative error {worst:.3e} over {draws} draws (tol {TOL:e})", verdict(pass));
    }
    let c = contradiction_check(1.0, 1.0, 1.0)?;
    let pass = c.dropped_residual > 0.1;
    ok &= pass;
    println!(
        "{} dropped-term covariance is not the Gramian inverse: residual {:.6} (> 0.1)",
        verdict(pass),
        c.dropped_residual
    );
    let half_pi = std::f64::consts::FRAC_PI_2;
    let sb = sigma_p_bearing(1.0, half_pi, 0.0);
    let sr = sigma_p_range(1.0, half_pi, 0.0);
    let pass = (sb - 11f64.sqrt()).abs() <= 1e-12 && (sr - (5.0f64 / 3.0).sqrt()).abs() <= 1e-12;
    ok &= pass;
    println!("{} closed form at Rg=1, D=pi/2: bearing {sb:.15}  range {sr:.15}", verdict(pass));
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VALIDATION) })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { run: args, out, format } => run(args, out.as_deref(), *format),
        Command::Sweep {
            run: args,
            grid,
            seeds,
            jobs,
            out,
        } => sweep(args, grid, *seeds, *jobs, out.as_deref()),
        Command::Validate { scenario } => validate(scenario),
        Command::Oracle { draws, seed } => oracle(*draws, *seed),
    };
    outcome.unwrap_or_else(fail)
}
