use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use coagflux::config::RunConfig;
use coagflux::diagnostics::{
    constant_spread, existence_sweep, fit_tail_exponent, geometric_z_grid, isotropic_baseline,
    localization_ratio, window_constants,
};
use coagflux::flux::{default_radii, flux_identity_check};
use coagflux::kernels::{existence_predicate, KernelSpec};
use coagflux::lattice::ClusterDistribution;
use coagflux::oracle::{flux_table, OracleError, RayAnsatz, RayKernel};
use coagflux::solver::evolve_with_observer;

/// Stationary injection solutions of multicomponent coagulation.
#[derive(Debug, Parser)]
#[command(name = "coagflux", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify the configured kernel and report whether stationary solutions exist.
    Classify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Integrate to a stationary state; writes the snapshot and time series.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the flux through spheres |α| = R of a stationary snapshot.
    Flux {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
        /// Also write the table to <out>/flux.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tail exponent and localization of a snapshot, as JSON.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stationary runs over the configured (ε, M) grid, one CSV row per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flux integral of the ray solution, by quadrature.
    Oracle {
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 1.0)]
        c0: f64,
        /// Take the pair function from this config's kernel instead of (r+ρ)^γ.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Exit status 0 or 2; errors exit with 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    NotConverged,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

fn load_snapshot(path: &Path, cfg: &RunConfig) -> Result<ClusterDistribution> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (state, m, _) = ClusterDistribution::from_snapshot(&text)
        .with_context(|| format!("in {}", path.display()))?;
    if state.dim() != cfg.dimension {
        bail!(
            "snapshot has dimension {}, config has {}",
            state.dim(),
            cfg.dimension
        );
    }
    if m != cfg.truncation.m {
        log::warn!(
            "snapshot was taken at M = {m}, config has M = {}",
            cfg.truncation.m
        );
    }
    Ok(state)
}

fn threads() -> usize {
    std::env::var("COAG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn classify(config: &Path) -> Result<Status> {
    let cfg = load_config(config)?;
    match cfg.kernel.classify_seeded(cfg.seed) {
        Ok(env) => {
            let exists = if existence_predicate(&env) {
                "yes"
            } else {
                "no"
            };
            let out = json!({
                "classified": true,
                "gamma": env.gamma,
                "p": env.p,
                "c1": env.c1,
                "c2": env.c2,
                "exists": exists,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(Status::Ok)
        }
        Err(e) => {
            let out = json!({ "classified": false, "reason": e.to_string() });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Err(e.into())
        }
    }
}

fn simulate(config: &Path, out: Option<PathBuf>) -> Result<Status> {
    let cfg = load_config(config)?;
    let kernel = cfg.truncated_kernel()?;
    let src = cfg.source()?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let m = kernel.m();
    let every = cfg.output.snapshot_every;
    let mut write_err = None;
    let start = ClusterDistribution::new(cfg.dimension, 2.0 * m);
    let run = evolve_with_observer(&start, &cfg.solver, &kernel, &src, |rec, integ| {
        if every > 0 && rec.step % every == 0 && write_err.is_none() {
            let path = dir.join(format!("snapshot_{:08}.txt", rec.step));
            if let Err(e) = write_file(&path, &integ.state().to_snapshot(m, rec.t)) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let run = match run {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(Status::NotConverged);
        }
    };
    let snapshot = dir.join("steady.txt");
    write_file(&snapshot, &run.state.to_snapshot(m, run.t_final))?;
    let series = dir.join("timeseries.csv");
    write_file(&series, &run.history_csv())?;
    let bound = (2.0 * src.total_rate() / kernel.lower_bound()).sqrt();
    let summary = json!({
        "converged": run.converged,
        "t_final": run.t_final,
        "steps": run.steps,
        "rejected": run.rejected,
        "residual": run.residual,
        "total_number": run.state.total_number(),
        "max_total_number": run.max_total_number,
        "number_bound": bound,
        "support": run.state.len(),
        "snapshot": snapshot,
        "timeseries": series,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if run.converged {
        Ok(Status::Ok)
    } else {
        log::warn!(
            "stopped at t = {} with residual {:e} above {:e}",
            run.t_final,
            run.residual,
            cfg.solver.steady_tol
        );
        Ok(Status::NotConverged)
    }
}

fn flux(
    config: &Path,
    snapshot: &Path,
    radii: Option<Vec<f64>>,
    out: Option<PathBuf>,
) -> Result<Status> {
    let cfg = load_config(config)?;
    let kernel = cfg.truncated_kernel()?;
    let src = cfg.source()?;
    let state = load_snapshot(snapshot, &cfg)?;
    let radii = radii.unwrap_or_else(|| default_radii(kernel.m()));
    if radii.iter().any(|r| r.is_nan() || *r <= 0.0) {
        bail!("radii must be positive");
    }
    let report = flux_identity_check(&state, &kernel, &src, &radii)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(dir) = out {
        write_file(&dir.join("flux.csv"), &csv)?;
    }
    Ok(Status::Ok)
}

fn diagnose(config: &Path, snapshot: &Path, out: Option<PathBuf>) -> Result<Status> {
    let cfg = load_config(config)?;
    let kernel = cfg.truncated_kernel()?;
    let src = cfg.source()?;
    let state = load_snapshot(snapshot, &cfg)?;
    let d = &cfg.diagnostics;
    let (lo, hi) = cfg.fit_window()?;
    let grid = geometric_z_grid(lo, hi, 32);
    let fit = match fit_tail_exponent(&state, d.b, &grid) {
        Ok(fit) => json!(fit),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let gamma = kernel.envelope().gamma;
    let constants = window_constants(&state, d.b, &grid, gamma, src.injection_norm())?;
    let theta = src
        .direction()
        .unwrap_or_else(|| vec![1.0 / cfg.dimension as f64; cfg.dimension]);
    let localization: Vec<_> = cfg
        .localization_radii()
        .into_iter()
        .map(|r| {
            let ratio = localization_ratio(&state, r, d.zeta_band, d.eps_angle, &theta);
            let base = isotropic_baseline(cfg.dimension, r, d.zeta_band, d.eps_angle, &theta);
            json!({
                "r": r,
                "ratio": ratio.as_ref().ok(),
                "baseline": base.as_ref().ok(),
                "error": ratio.err().map(|e| e.to_string()),
            })
        })
        .collect();
    let report = json!({
        "fit": fit,
        "expected_slope": -0.5 * (3.0 + gamma),
        "window_constants": constants,
        "window_constant_spread": if constants.is_empty() { None } else { Some(constant_spread(&constants)) },
        "theta": theta,
        "localization": localization,
        "tail_radius": d.tail_radius,
        "tail_count": state.tail_count(d.tail_radius),
        "total_number": state.total_number(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = out {
        write_file(&dir.join("diagnostics.json"), &text)?;
    }
    Ok(Status::Ok)
}

fn sweep(config: &Path, out: Option<PathBuf>) -> Result<Status> {
    let cfg = load_config(config)?;
    let src = cfg.source()?;
    let result = existence_sweep(
        &cfg.kernel,
        &src,
        &cfg.sweep.epsilons,
        &cfg.sweep.ms,
        &cfg.solver,
        cfg.diagnostics.tail_radius,
        threads(),
    )?;
    let csv = result.to_csv();
    print!("{csv}");
    eprintln!(
        "verdict: {}",
        serde_json::to_string(&result.verdict)?.trim_matches('"')
    );
    if let Some(dir) = out {
        write_file(&dir.join("sweep.csv"), &csv)?;
    }
    if result.cells.iter().all(|c| c.converged) {
        Ok(Status::Ok)
    } else {
        Ok(Status::NotConverged)
    }
}

fn oracle(
    gamma: f64,
    d: usize,
    ts: &[f64],
    tol: f64,
    c0: f64,
    config: Option<PathBuf>,
) -> Result<Status> {
    if d == 0 {
        bail!("--d must be at least 1");
    }
    let theta = vec![1.0 / d as f64; d];
    let ansatz = RayAnsatz::new(gamma, c0, theta.clone())?;
    let spec = match config {
        Some(path) => {
            let cfg = load_config(&path)?;
            if cfg.dimension != d {
                bail!("config dimension {} differs from --d {d}", cfg.dimension);
            }
            cfg.kernel
        }
        None => KernelSpec::EnvelopePower {
            gamma,
            p: 0.0,
            c: 1.0,
        },
    };
    let ray = RayKernel::new(spec, theta)?;
    let rows = flux_table(&ansatz, &ray.g(), ts, tol);
    println!("t,J(t),quad_err");
    let mut status = Status::Ok;
    for (t, row) in ts.iter().zip(rows) {
        match row {
            Ok(j) => println!("{t},{:.15e},{:.3e}", j.value, j.error),
            Err(e @ OracleError::NonIntegrable { .. }) => {
                println!("{t},non-integrable,");
                eprintln!("t = {t}: {e}");
                status = Status::NotConverged;
            }
            Err(e) => {
                println!("{t},failed,");
                eprintln!("t = {t}: {e}");
                status = Status::NotConverged;
            }
        }
    }
    Ok(status)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Classify { config } => classify(&config),
        Command::Simulate { config, out } => simulate(&config, out),
        Command::Flux {
            config,
            snapshot,
            radii,
            out,
        } => flux(&config, &snapshot, radii, out),
        Command::Diagnose {
            config,
            snapshot,
            out,
        } => diagnose(&config, &snapshot, out),
        Command::Sweep { config, out } => sweep(&config, out),
        Command::Oracle {
            gamma,
            d,
            t,
            tol,
            c0,
            config,
        } => oracle(gamma, d, &t, tol, c0, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads())
        .build_global()
    {
        log::warn!("worker pool: {e}");
    }
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
