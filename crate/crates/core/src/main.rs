//! Experiment front end. Four subcommands cover the whole pipeline: one
//! closed-loop simulation, noiseless pretraining, the noise-level sweep over
//! both training criteria, and SVG plots of the sweep output. Every run
//! writes a resolved-config snapshot into the output directory so results
//! are reproducible from the directory alone. All numerics live in the
//! library; this file only wires files to library calls.

use clap::{Parser, Subcommand, ValueEnum};
use ivff::analysis::{
    consistency_sweep, median_residual_row, monitored_coeff_index, noiseless_residual_norm,
    read_sweep_csv, residual_trace, write_sweep_csv, SweepCell, SweepInputs,
};
use ivff::config::ExperimentConfig;
use ivff::nn::MlpParams;
use ivff::plant::{generate_disturbance, simulate_closed_loop, ClosedLoopDataset};
use ivff::plot::{coefficient_scatter_svg, residual_norm_svg, residual_trace_svg};
use ivff::train::{pretrain_noiseless, Criterion};
use ivff::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable overriding the output root; the --out flag wins
/// over both this and the config file.
const OUT_ENV: &str = "IVFF_OUT";

#[derive(Parser)]
#[command(
    name = "ivff",
    version,
    about = "Closed-loop feedforward training experiments",
    long_about = "Simulates a friction-afflicted motion system under feedback, trains a neural \
                  feedforward network on the recorded data with either a least-squares or an \
                  instrumental-variable criterion, and compares the two across noise levels.\n\n\
                  Output directory precedence: --out, then the IVFF_OUT environment variable, \
                  then output_dir in the config file."
)]
struct Cli {
    /// Experiment TOML file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides IVFF_OUT and the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write dataset.csv.
    Simulate {
        /// Disturbance noise level.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Disturbance seed; defaults to the sweep master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the network on noiseless data and write phi0.txt.
    Pretrain {
        /// Initialization seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train both criteria over the noise grid and write sweep.csv.
    Sweep {
        /// Master seed override for the sweep grid.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for sweep cells; defaults to the CPU count.
        #[arg(long)]
        workers: Option<usize>,
        /// Starting parameter file; defaults to phi0.txt in the output directory.
        #[arg(long, value_name = "PATH")]
        phi0: Option<PathBuf>,
    },
    /// Render an SVG from sweep.csv.
    Plot {
        /// Figure to render.
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Noise level of the cell drawn by fig6.
        #[arg(long, default_value_t = 0.005)]
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotKind {
    /// Monitored coefficient against noise level.
    Fig4,
    /// Residual norms on the noiseless data against noise level.
    Fig5,
    /// Residual time traces of the median-residual cell.
    Fig6,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    } else if let Ok(out) = std::env::var(OUT_ENV) {
        if !out.is_empty() {
            cfg.output_dir = out;
        }
    }
    match cli.command {
        Command::Simulate { sigma, seed } => cmd_simulate(cfg, sigma, seed),
        Command::Pretrain { seed } => cmd_pretrain(cfg, seed),
        Command::Sweep { seed, workers, phi0 } => cmd_sweep(cfg, seed, workers, phi0),
        Command::Plot { kind, sigma } => cmd_plot(cfg, kind, sigma),
    }
}

/// Validate, create the output directory, and snapshot the effective
/// configuration into it.
fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    cfg.save(out.join("config.resolved.toml"))?;
    Ok(out)
}

/// The noiseless closed-loop run every stage measures against.
fn simulate_noiseless(cfg: &ExperimentConfig) -> Result<ClosedLoopDataset> {
    let r = cfg.reference()?;
    let d = ivff::signals::Signal::zeros(r.len(), cfg.plant.ts)?;
    simulate_closed_loop(&cfg.plant()?, &cfg.controller()?, &r, &d, None)
}

fn cmd_simulate(cfg: ExperimentConfig, sigma: f64, seed: Option<u64>) -> Result<()> {
    let out = prepare_output(&cfg)?;
    let seed = seed.unwrap_or(cfg.sweep.master_seed);
    let r = cfg.reference()?;
    let d = generate_disturbance(&cfg.noise_filter()?, sigma, seed, r.len(), cfg.plant.ts)?;
    let mut ds = simulate_closed_loop(&cfg.plant()?, &cfg.controller()?, &r, &d, None)?;
    ds.sigma_nu = sigma;
    ds.seed = seed;
    let csv = out.join("dataset.csv");
    ds.write_csv(&csv)?;
    std::fs::write(
        out.join("dataset.meta.toml"),
        format!(
            "sigma_nu = {sigma}\nseed = {seed}\nsamples = {}\nts = {}\n",
            ds.len(),
            cfg.plant.ts
        ),
    )?;
    println!("wrote {} samples to {}", ds.len(), csv.display());
    Ok(())
}

fn cmd_pretrain(cfg: ExperimentConfig, seed: Option<u64>) -> Result<()> {
    let mut cfg = cfg;
    if let Some(s) = seed {
        cfg.pretrain.init_seed = s;
    }
    let out = prepare_output(&cfg)?;
    let (phi0, _ds0, report) = pretrain_noiseless(
        &cfg.plant()?,
        &cfg.controller()?,
        &cfg.reference()?,
        &cfg.shape()?,
        cfg.network.activation,
        cfg.network.normalize_basis,
        cfg.pretrain.init_seed,
        cfg.pretrain.restarts,
        &cfg.pretrain_opts(),
    )?;
    let path = out.join("phi0.txt");
    phi0.save(&path)?;
    std::fs::write(
        out.join("pretrain.report.toml"),
        format!(
            "iterations = {}\nconverged = {}\nfinal_cost = {}\ngrad_norm = {}\n",
            report.iterations, report.converged, report.final_cost, report.grad_norm
        ),
    )?;
    println!(
        "wrote {} ({} iterations, cost {:.3e})",
        path.display(),
        report.iterations,
        report.final_cost
    );
    Ok(())
}

/// Per-cell parameter file, keyed by the cell's disturbance seed so sweep
/// rows and files cross-reference each other.
fn cell_params_path(dir: &Path, seed: u64, criterion: Criterion) -> PathBuf {
    dir.join(format!("cell-{seed:020}-{criterion}.txt"))
}

fn cmd_sweep(
    cfg: ExperimentConfig,
    seed: Option<u64>,
    workers: Option<usize>,
    phi0: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = cfg;
    if let Some(s) = seed {
        cfg.sweep.master_seed = s;
    }
    let out = prepare_output(&cfg)?;
    let phi0_path = phi0.unwrap_or_else(|| out.join("phi0.txt"));
    if !phi0_path.exists() {
        return Err(Error::InvalidConfig(format!(
            "starting parameters not found at {}; run pretrain first",
            phi0_path.display()
        )));
    }
    let phi0 = MlpParams::load(&phi0_path)?;
    let plant = cfg.plant()?;
    let ctrl = cfg.controller()?;
    let noise = cfg.noise_filter()?;
    let ds0 = simulate_noiseless(&cfg)?;
    let inputs =
        SweepInputs { plant: &plant, ctrl: &ctrl, noise_filter: &noise, phi0: &phi0, ds0: &ds0 };
    let settings = cfg.sweep_settings();
    let cells = match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("workers: {e}")))?
            .install(|| consistency_sweep(&inputs, &settings)),
        _ => consistency_sweep(&inputs, &settings),
    }?;

    let csv = out.join("sweep.csv");
    write_sweep_csv(&csv, &cells)?;
    let params_dir = out.join("params");
    std::fs::create_dir_all(&params_dir)?;
    for cell in &cells {
        if let Ok(res) = &cell.outcome {
            let phi = phi0.with_flat(&res.phi_hat)?;
            phi.save(cell_params_path(&params_dir, cell.seed, cell.criterion))?;
        }
    }
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    println!("wrote {} rows ({failed} failed) to {}", cells.len(), csv.display());
    for cell in cells.iter().filter(|c| c.outcome.is_err()) {
        let SweepCell { sigma_nu, realization, criterion, .. } = cell;
        let msg = cell.outcome.as_ref().unwrap_err();
        eprintln!("cell sigma={sigma_nu} realization={realization} {criterion}: {msg}");
    }
    Ok(())
}

fn cmd_plot(cfg: ExperimentConfig, kind: PlotKind, sigma: f64) -> Result<()> {
    let out = prepare_output(&cfg)?;
    let rows = read_sweep_csv(&out.join("sweep.csv"))?;
    let phi0 = MlpParams::load(out.join("phi0.txt"))?;
    let (name, svg) = match kind {
        PlotKind::Fig4 => {
            let idx = monitored_coeff_index(phi0.shape())?;
            let reference = phi0.flatten()[idx];
            ("fig4.svg", coefficient_scatter_svg(&rows, reference)?)
        }
        PlotKind::Fig5 => {
            let ds0 = simulate_noiseless(&cfg)?;
            let floor = noiseless_residual_norm(&phi0, &ds0);
            ("fig5.svg", residual_norm_svg(&rows, floor)?)
        }
        PlotKind::Fig6 => {
            let ds0 = simulate_noiseless(&cfg)?;
            let median = median_residual_row(&rows, Criterion::LeastSquares, sigma)
                .ok_or_else(|| {
                    Error::EmptyResults(format!("no successful rows at noise level {sigma}"))
                })?;
            let params_dir = out.join("params");
            let mut traces = Vec::new();
            for criterion in [Criterion::LeastSquares, Criterion::InstrumentalVariable] {
                let path = cell_params_path(&params_dir, median.seed, criterion);
                let phi = MlpParams::load(&path)?;
                let (trace, _) = residual_trace(&phi, &ds0);
                let label = match criterion {
                    Criterion::LeastSquares => "least squares",
                    Criterion::InstrumentalVariable => "instrumental variables",
                };
                traces.push((label.to_string(), trace));
            }
            ("fig6.svg", residual_trace_svg(&traces)?)
        }
    };
    let path = out.join(name);
    std::fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
