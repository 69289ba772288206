//! Local closed-form parameter estimates, Monte-Carlo sweeps over noise
//! levels, and residual metrics comparing the two training criteria.
//!
//! The closed forms predict, to first order around a reference parameter
//! set, where each criterion sends its estimate when a disturbance is added
//! to the data. The sweep measures the same thing empirically: it trains
//! both criteria on freshly disturbed closed-loop datasets across a grid of
//! noise levels and records per-cell estimates, residual norms on the
//! noiseless data, and optimizer reports.

use crate::error::{Error, Result};
use crate::lti::RationalFilter;
use crate::nn::{MlpParams, MlpShape};
use crate::plant::{generate_disturbance, simulate_closed_loop, ClosedLoopDataset, StribeckPlant};
use crate::signals::Signal;
use crate::train::{build_instruments, minimize, Criterion, OptimizerOpts, TrainReport};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::path::Path;

/// Closed-form local estimate together with the condition number of the
/// square system that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub delta_phi: DVector<f64>,
    pub condition: f64,
}

/// Condition number gate: beyond this the solve result carries no digits.
const MAX_CONDITION: f64 = 1.0 / f64::EPSILON;

fn solve_square(a: DMatrix<f64>, rhs: DVector<f64>) -> (Option<DVector<f64>>, f64) {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > MAX_CONDITION {
        return (None, condition);
    }
    (a.lu().solve(&rhs), condition)
}

/// First-order shift of the least-squares estimate caused by a disturbance
/// `d`, for the prediction sensitivity matrix `f` (one row per sample, one
/// column per parameter): solves fᵀf Δφ = −fᵀd.
pub fn local_ls_estimate(f: &DMatrix<f64>, d: &DVector<f64>) -> Result<LocalEstimate> {
    if f.nrows() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "sensitivity has {} rows but disturbance has {} samples",
            f.nrows(),
            d.len()
        )));
    }
    let (sol, condition) = solve_square(f.tr_mul(f), -f.tr_mul(d));
    match sol {
        Some(delta_phi) => Ok(LocalEstimate { delta_phi, condition }),
        None => Err(Error::SingularNormalMatrix(condition)),
    }
}

/// First-order shift of the instrumental-variable estimate: solves
/// zᵀf Δφ = −zᵀd. With `z` equal to `f` this reproduces
/// [`local_ls_estimate`] exactly, bit for bit.
pub fn local_iv_estimate(
    z: &DMatrix<f64>,
    f: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<LocalEstimate> {
    if z.nrows() != f.nrows() || z.ncols() != f.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "instruments are {}x{} but sensitivity is {}x{}",
            z.nrows(),
            z.ncols(),
            f.nrows(),
            f.ncols()
        )));
    }
    if f.nrows() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "sensitivity has {} rows but disturbance has {} samples",
            f.nrows(),
            d.len()
        )));
    }
    let (sol, condition) = solve_square(z.tr_mul(f), -z.tr_mul(d));
    match sol {
        Some(delta_phi) => Ok(LocalEstimate { delta_phi, condition }),
        None => Err(Error::SingularCrossMatrix(condition)),
    }
}

/// Flat-vector index of the first-layer weight in row 3, column 1 (the
/// coefficient tracked across sweeps). Requires at least three units in the
/// first hidden layer.
pub fn monitored_coeff_index(shape: &MlpShape) -> Result<usize> {
    let sizes = shape.layer_sizes();
    if sizes[1] < 3 {
        return Err(Error::InvalidNetwork(format!(
            "monitored coefficient needs >= 3 first-layer rows, got {}",
            sizes[1]
        )));
    }
    // row-major first-layer weights head the flat vector
    Ok(2 * sizes[0])
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-cell RNG seed derived from the master seed and the
/// cell's grid coordinates.
pub fn cell_seed(master_seed: u64, sigma_index: usize, realization: usize) -> u64 {
    let a = splitmix64(master_seed);
    let b = splitmix64(a ^ (sigma_index as u64));
    splitmix64(b ^ ((realization as u64) << 32))
}

/// Grid and optimizer settings for [`consistency_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub sigma_levels: Vec<f64>,
    pub realizations: usize,
    pub master_seed: u64,
    pub opts: OptimizerOpts,
}

impl SweepSettings {
    /// Default grid: 11 noise levels linearly spaced on [0, 0.01] with 20
    /// realizations each.
    pub fn default_grid(master_seed: u64, opts: OptimizerOpts) -> Self {
        let sigma_levels = (0..11).map(|i| i as f64 * 1e-3).collect();
        SweepSettings { sigma_levels, realizations: 20, master_seed, opts }
    }
}

/// Immutable inputs shared by every sweep cell.
#[derive(Clone, Copy)]
pub struct SweepInputs<'a> {
    pub plant: &'a StribeckPlant,
    pub ctrl: &'a RationalFilter,
    pub noise_filter: &'a RationalFilter,
    pub phi0: &'a MlpParams,
    /// Noiseless closed-loop dataset; its input doubles as the target signal
    /// that residual norms are measured against.
    pub ds0: &'a ClosedLoopDataset,
}

/// One trained estimate from the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub sigma_nu: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub phi_hat: DVector<f64>,
    pub monitored_coeff: f64,
    /// ‖u₀ − F_φ̂(y₀)‖₂ on the noiseless dataset.
    pub residual_norm: f64,
    pub report: TrainReport,
}

/// One sweep cell: grid coordinates plus the outcome, which records a
/// failure message instead of aborting the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub sigma_nu: f64,
    pub sigma_index: usize,
    pub realization: usize,
    pub seed: u64,
    pub criterion: Criterion,
    pub outcome: std::result::Result<SweepResult, String>,
}

/// Residual of a parameter set against the noiseless data: ‖u₀ − F_φ(y₀)‖₂.
pub fn noiseless_residual_norm(phi: &MlpParams, ds0: &ClosedLoopDataset) -> f64 {
    let pred = phi.predictions(&ds0.y);
    (DVector::from_column_slice(ds0.u.values()) - pred).norm()
}

/// Train both criteria on freshly disturbed closed-loop data for every
/// (noise level, realization) cell of the grid.
///
/// Every cell seeds its own disturbance from the master seed and its grid
/// coordinates, so the sweep is reproducible cell by cell and its output
/// order is fixed: realizations within noise levels, least squares before
/// instrumental variables. Cells run concurrently; failures are recorded in
/// the affected cells and never abort the sweep.
pub fn consistency_sweep(inputs: &SweepInputs, settings: &SweepSettings) -> Result<Vec<SweepCell>> {
    let ds0 = inputs.ds0;
    let n = ds0.len();
    let ts = ds0.r.ts();
    let n_phi = inputs.phi0.param_count();
    let monitored = monitored_coeff_index(inputs.phi0.shape())?;
    if settings.realizations == 0 || settings.sigma_levels.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    if settings.sigma_levels.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidConfig("noise levels must be finite and nonnegative".into()));
    }
    let z = build_instruments(&ds0.r, n_phi)?;

    let coords: Vec<(usize, usize)> = (0..settings.sigma_levels.len())
        .flat_map(|si| (0..settings.realizations).map(move |ri| (si, ri)))
        .collect();

    let cells: Vec<Vec<SweepCell>> = coords
        .par_iter()
        .map(|&(sigma_index, realization)| {
            let sigma_nu = settings.sigma_levels[sigma_index];
            let seed = cell_seed(settings.master_seed, sigma_index, realization);
            let cell = |criterion, outcome| SweepCell {
                sigma_nu,
                sigma_index,
                realization,
                seed,
                criterion,
                outcome,
            };
            let ds = generate_disturbance(inputs.noise_filter, sigma_nu, seed, n, ts)
                .and_then(|d| simulate_closed_loop(inputs.plant, inputs.ctrl, &ds0.r, &d, None))
                .map(|mut ds| {
                    ds.sigma_nu = sigma_nu;
                    ds.seed = seed;
                    ds
                });
            let ds = match ds {
                Ok(ds) => ds,
                Err(e) => {
                    let msg = e.to_string();
                    return vec![
                        cell(Criterion::LeastSquares, Err(msg.clone())),
                        cell(Criterion::InstrumentalVariable, Err(msg)),
                    ];
                }
            };
            [Criterion::LeastSquares, Criterion::InstrumentalVariable]
                .into_iter()
                .map(|criterion| {
                    let z_arg = match criterion {
                        Criterion::LeastSquares => None,
                        Criterion::InstrumentalVariable => Some(&z),
                    };
                    let outcome = minimize(criterion, inputs.phi0, &ds, z_arg, &settings.opts)
                        .map(|(phi_hat, report)| SweepResult {
                            sigma_nu,
                            seed,
                            criterion,
                            monitored_coeff: phi_hat.flatten()[monitored],
                            residual_norm: noiseless_residual_norm(&phi_hat, ds0),
                            phi_hat: phi_hat.flatten(),
                            report,
                        })
                        .map_err(|e| e.to_string());
                    cell(criterion, outcome)
                })
                .collect()
        })
        .collect();

    Ok(cells.into_iter().flatten().collect())
}

/// Among the successful rows of one criterion at one noise level, the one
/// whose residual norm is the median (lower median for even counts). Failed
/// rows carry NaN residuals and are skipped.
pub fn median_residual_row<'a>(
    rows: &'a [SweepCsvRow],
    criterion: Criterion,
    sigma_nu: f64,
) -> Option<&'a SweepCsvRow> {
    let mut hits: Vec<&SweepCsvRow> = rows
        .iter()
        .filter(|r| {
            r.criterion == criterion
                && (r.sigma_nu - sigma_nu).abs() <= 1e-12 * sigma_nu.abs().max(1.0)
                && r.residual_norm.is_finite()
        })
        .collect();
    if hits.is_empty() {
        return None;
    }
    hits.sort_by(|a, b| a.residual_norm.total_cmp(&b.residual_norm).then(a.seed.cmp(&b.seed)));
    Some(hits[(hits.len() - 1) / 2])
}

/// Difference between the noiseless input and the network's reproduction of
/// it, scaled by the peak magnitude of the noiseless input. Returns the
/// trace and the normalization constant.
pub fn residual_trace(phi: &MlpParams, ds0: &ClosedLoopDataset) -> (Signal, f64) {
    let pred = phi.forward_signal(&ds0.y);
    let peak = ds0.u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let values = ds0
        .u
        .values()
        .iter()
        .zip(pred.values())
        .map(|(u, p)| (u - p) / scale)
        .collect();
    (
        Signal::new(values, ds0.r.ts()).expect("residual of a valid signal is valid"),
        scale,
    )
}

/// One row of a [`linearization_check`] table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint {
    pub scale: f64,
    pub closed_form_norm: f64,
    pub optimizer_norm: f64,
    /// ‖Δφ̂(optimizer) − Δφ̂(closed form)‖ / ‖Δφ̂(closed form)‖; zero when
    /// both vanish.
    pub ratio: f64,
}

/// Validate the closed forms as first-order predictions: for each scale `s`,
/// build an exactly-representable dataset by keeping the noiseless output
/// and injecting `s·d` into the recorded input, train from `phi0`, and
/// compare the trained shift against the closed form. The ratio column must
/// shrink with `s` when the closed form is the true first-order term.
///
/// Injecting the disturbance directly into the input channel, rather than
/// re-simulating the loop, removes the network's representation error from
/// the comparison; with it the ratio would floor at the pretraining
/// residual instead of decaying.
pub fn linearization_check(
    ds0: &ClosedLoopDataset,
    phi0: &MlpParams,
    criterion: Criterion,
    d_dir: &Signal,
    scales: &[f64],
    opts: &OptimizerOpts,
) -> Result<Vec<LinearizationPoint>> {
    if d_dir.len() != ds0.len() {
        return Err(Error::LengthMismatch { expected: ds0.len(), got: d_dir.len() });
    }
    let (pred0, jt) = phi0.predictions_and_jacobian_t(&ds0.y);
    let f = jt.transpose();
    let z = match criterion {
        Criterion::LeastSquares => None,
        Criterion::InstrumentalVariable => Some(build_instruments(&ds0.r, phi0.param_count())?),
    };
    let flat0 = phi0.flatten();
    let mut table = Vec::with_capacity(scales.len());
    for &s in scales {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidConfig(format!("disturbance scale {s} must be >= 0")));
        }
        let d: DVector<f64> = DVector::from_column_slice(d_dir.values()) * s;
        let closed = match criterion {
            Criterion::LeastSquares => local_ls_estimate(&f, &d)?,
            Criterion::InstrumentalVariable => {
                local_iv_estimate(z.as_ref().expect("built above").matrix(), &f, &d)?
            }
        };
        let u = Signal::new((&pred0 - &d).as_slice().to_vec(), ds0.r.ts())?;
        let ds = ClosedLoopDataset {
            r: ds0.r.clone(),
            u,
            y: ds0.y.clone(),
            d: Signal::new(d.as_slice().to_vec(), ds0.r.ts())?,
            f: None,
            sigma_nu: 0.0,
            seed: 0,
        };
        let (phi_hat, _) = minimize(criterion, phi0, &ds, z.as_ref(), opts)?;
        let shift = phi_hat.flatten() - &flat0;
        let closed_form_norm = closed.delta_phi.norm();
        let optimizer_norm = shift.norm();
        let diff = (shift - closed.delta_phi).norm();
        let ratio = if closed_form_norm > 0.0 {
            diff / closed_form_norm
        } else {
            optimizer_norm
        };
        table.push(LinearizationPoint { scale: s, closed_form_norm, optimizer_norm, ratio });
    }
    Ok(table)
}

/// Least-squares slope of ln(y) against ln(x); pairs with a nonpositive
/// coordinate are skipped. Returns NaN when fewer than two pairs remain.
pub fn log_log_slope(pairs: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Synthetic linear instance exhibiting the closed-loop correlation
/// structure: the regressor recursion is driven by an exogenous signal (the
/// instruments) and additively disturbed, so regressors correlate with the
/// disturbance while instruments do not.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrendInstance {
    pub f: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// Build a [`LinearTrendInstance`] with `n` samples and `p` parameters.
pub fn synthetic_closed_loop_instance(n: usize, p: usize, seed: u64) -> LinearTrendInstance {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0f64; n];
    let mut x = vec![0.0f64; n];
    let mut v_state = 0.0f64;
    let mut x_state = 0.0f64;
    let mut d = DVector::zeros(n);
    for k in 0..n {
        let wv: f64 = rng.sample(rand_distr::StandardNormal);
        let wd: f64 = rng.sample(rand_distr::StandardNormal);
        // persistent exogenous drive, white disturbance entering the loop
        v_state = 0.9 * v_state + wv;
        d[k] = 0.3 * wd;
        x_state = 0.8 * x_state + v_state + d[k];
        v[k] = v_state;
        x[k] = x_state;
    }
    let window = |src: &[f64], k: usize, j: usize| if k >= j { src[k - j] } else { 0.0 };
    let f = DMatrix::from_fn(n, p, |k, j| window(&x, k, j));
    let z = DMatrix::from_fn(n, p, |k, j| window(&v, k, j));
    LinearTrendInstance { f, z, d }
}

const SWEEP_CSV_HEADER: &str =
    "sigma_nu,seed,criterion,monitored_coeff,residual_norm,converged,iterations,final_cost";

/// Flat CSV rendering of sweep cells, one row per cell in sweep order.
/// Failed cells carry NaN metrics. The format round-trips bit-exactly
/// through [`parse_sweep_csv`].
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::with_capacity(64 * (cells.len() + 1));
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let (m, r, conv, iters, cost) = match &c.outcome {
            Ok(res) => (
                res.monitored_coeff,
                res.residual_norm,
                res.report.converged,
                res.report.iterations,
                res.report.final_cost,
            ),
            Err(_) => (f64::NAN, f64::NAN, false, 0, f64::NAN),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.sigma_nu, c.seed, c.criterion, m, r, conv, iters, cost
        ));
    }
    out
}

/// One parsed row of the sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCsvRow {
    pub sigma_nu: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub monitored_coeff: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
}

/// Parse the output of [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepCsvRow>> {
    parse_sweep_rows(text, "sweep csv")
}

/// Read and parse a sweep CSV file.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepCsvRow>> {
    parse_sweep_rows(&std::fs::read_to_string(path)?, &path.display().to_string())
}

fn parse_sweep_rows(text: &str, source: &str) -> Result<Vec<SweepCsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_CSV_HEADER => {}
        _ => {
            return Err(Error::MalformedFile {
                path: source.to_string(),
                msg: "missing sweep CSV header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::MalformedFile {
            path: source.to_string(),
            msg: format!("row {}: {what}", i + 2),
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(bad(&format!("expected 8 fields, got {}", parts.len())));
        }
        let float = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| bad(&format!("unreadable {what} {s:?}")))
        };
        let criterion = match parts[2] {
            "ls" => Criterion::LeastSquares,
            "iv" => Criterion::InstrumentalVariable,
            other => return Err(bad(&format!("unknown criterion {other:?}"))),
        };
        rows.push(SweepCsvRow {
            sigma_nu: float(parts[0], "noise level")?,
            seed: parts[1].parse().map_err(|_| bad(&format!("unreadable seed {:?}", parts[1])))?,
            criterion,
            monitored_coeff: float(parts[3], "coefficient")?,
            residual_norm: float(parts[4], "residual norm")?,
            converged: parts[5]
                .parse()
                .map_err(|_| bad(&format!("unreadable flag {:?}", parts[5])))?,
            iterations: parts[6]
                .parse()
                .map_err(|_| bad(&format!("unreadable count {:?}", parts[6])))?,
            final_cost: float(parts[7], "cost")?,
        });
    }
    Ok(rows)
}

/// Write [`sweep_csv`] output to a file.
pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    std::fs::write(path, sweep_csv(cells))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::signals::{make_fourth_order_reference, FourthOrderLimits};
    use crate::train::pretrain_noiseless;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const TS: f64 = 1e-3;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
    }

    fn random_vector(len: usize, seed: u64) -> DVector<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(len, |_, _| rng.sample(rand_distr::StandardNormal))
    }

    #[test]
    fn zero_disturbance_shifts_nothing() {
        let f = random_matrix(6, 3, 1);
        let est = local_ls_estimate(&f, &DVector::zeros(6)).unwrap();
        assert_eq!(est.delta_phi, DVector::zeros(3));
    }

    #[test]
    fn disturbance_orthogonal_to_the_sensitivity_shifts_nothing() {
        let f = random_matrix(8, 3, 2);
        let d = random_vector(8, 3);
        // project out the column space so f' d = 0
        let gram = f.tr_mul(&f);
        let coef = gram.lu().solve(&f.tr_mul(&d)).unwrap();
        let d_perp = &d - &f * coef;
        let est = local_ls_estimate(&f, &d_perp).unwrap();
        assert!(est.delta_phi.norm() < 1e-12, "shift {}", est.delta_phi.norm());
    }

    #[test]
    fn least_squares_shift_is_a_local_minimum_of_the_shifted_cost() {
        let f = random_matrix(5, 2, 4);
        let d = random_vector(5, 5);
        let est = local_ls_estimate(&f, &d).unwrap();
        let cost = |dp: &DVector<f64>| (&d + &f * dp).norm_squared();
        let best = cost(&est.delta_phi);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let probe = DVector::from_fn(2, |_, _| {
                0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            assert!(cost(&(&est.delta_phi + probe)) >= best);
        }
    }

    #[test]
    fn identical_instruments_collapse_to_least_squares_exactly() {
        let f = random_matrix(7, 3, 7);
        let d = random_vector(7, 8);
        let ls = local_ls_estimate(&f, &d).unwrap();
        let iv = local_iv_estimate(&f, &f, &d).unwrap();
        assert_eq!(ls.delta_phi, iv.delta_phi);
        assert_eq!(ls.condition, iv.condition);
    }

    #[test]
    fn instrument_estimate_satisfies_its_defining_system() {
        let z = random_matrix(9, 4, 9);
        let f = random_matrix(9, 4, 10);
        let d = random_vector(9, 11);
        let est = local_iv_estimate(&z, &f, &d).unwrap();
        let lhs = z.tr_mul(&f) * &est.delta_phi;
        let rhs = -z.tr_mul(&d);
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm().max(1.0));
    }

    #[test]
    fn rank_deficient_sensitivity_is_rejected() {
        let mut f = random_matrix(6, 3, 12);
        let dup = f.column(0).into_owned();
        f.set_column(2, &dup);
        let d = random_vector(6, 13);
        match local_ls_estimate(&f, &d) {
            Err(Error::SingularNormalMatrix(cond)) => assert!(cond > 1e15),
            other => panic!("expected a singular normal matrix, got {other:?}"),
        }
        match local_iv_estimate(&f, &f, &d) {
            Err(Error::SingularCrossMatrix(_)) => {}
            other => panic!("expected a singular cross matrix, got {other:?}"),
        }
    }

    #[test]
    fn orthogonal_instruments_ignore_the_disturbance() {
        let f = random_matrix(10, 3, 14);
        let z = random_matrix(10, 3, 15);
        let d = random_vector(10, 16);
        // project d out of the instrument columns so z' d = 0
        let coef = z.tr_mul(&z).lu().solve(&z.tr_mul(&d)).unwrap();
        let d_perp = &d - &z * coef;
        let est = local_iv_estimate(&z, &f, &d_perp).unwrap();
        assert!(est.delta_phi.norm() < 1e-12);
    }

    #[test]
    fn monitored_index_points_at_the_third_first_layer_row() {
        let shape = MlpShape::new(vec![3, 10, 10, 1]).unwrap();
        assert_eq!(monitored_coeff_index(&shape).unwrap(), 6);
        let narrow = MlpShape::new(vec![3, 2, 1]).unwrap();
        assert!(matches!(monitored_coeff_index(&narrow), Err(Error::InvalidNetwork(_))));
    }

    #[test]
    fn cell_seeds_are_deterministic_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for si in 0..11 {
            for ri in 0..20 {
                let s = cell_seed(42, si, ri);
                assert_eq!(s, cell_seed(42, si, ri));
                assert!(seen.insert(s), "duplicate seed at ({si},{ri})");
            }
        }
        assert_ne!(cell_seed(1, 0, 0), cell_seed(2, 0, 0));
    }

    #[test]
    fn log_log_slope_recovers_a_power_law() {
        let pairs: Vec<(f64, f64)> =
            [1.0, 0.5, 0.25, 0.125].iter().map(|&s| (s, 3.0 * s * s)).collect();
        assert_relative_eq!(log_log_slope(&pairs), 2.0, epsilon = 1e-12);
        assert!(log_log_slope(&[(1.0, 1.0)]).is_nan());
    }

    #[test]
    fn trend_instance_biases_least_squares_but_not_instruments() {
        // the regressors absorb the disturbance through the recursion, so
        // the LS shift persists as data grows while the IV shift decays
        let norms = |n: usize| {
            let mut ls = 0.0;
            let mut iv = 0.0;
            for seed in 0..8 {
                let inst = synthetic_closed_loop_instance(n, 3, seed);
                ls += local_ls_estimate(&inst.f, &inst.d).unwrap().delta_phi.norm();
                iv += local_iv_estimate(&inst.z, &inst.f, &inst.d).unwrap().delta_phi.norm();
            }
            (ls / 8.0, iv / 8.0)
        };
        let (ls_small, iv_small) = norms(500);
        let (ls_big, iv_big) = norms(4000);
        assert!(ls_big > 0.5 * ls_small, "LS shift decayed: {ls_small} -> {ls_big}");
        assert!(iv_big < 0.5 * iv_small, "IV shift did not decay: {iv_small} -> {iv_big}");
        assert!(ls_big > 4.0 * iv_big);
    }

    #[test]
    fn residual_trace_of_a_zero_network_is_the_normalized_input() {
        let shape = MlpShape::new(vec![3, 4, 1]).unwrap();
        let phi = MlpParams::init(shape, Activation::Tanh, 1);
        let zero = phi.with_flat(&DVector::zeros(phi.param_count())).unwrap();
        let n = 50;
        let u = Signal::new((0..n).map(|k| (k as f64 * 0.3).sin()).collect(), TS).unwrap();
        let ds0 = ClosedLoopDataset {
            r: Signal::zeros(n, TS).unwrap(),
            u: u.clone(),
            y: Signal::zeros(n, TS).unwrap(),
            d: Signal::zeros(n, TS).unwrap(),
            f: None,
            sigma_nu: 0.0,
            seed: 0,
        };
        let (trace, scale) = residual_trace(&zero, &ds0);
        let peak = u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(scale, peak);
        for (t, v) in trace.values().iter().zip(u.values()) {
            assert_eq!(*t, v / peak);
        }
    }

    #[test]
    fn sweep_csv_round_trips_including_failures() {
        let report = TrainReport {
            iterations: 3,
            converged: true,
            final_cost: 0.125,
            grad_norm: 1e-10,
            cost_history: vec![1.0, 0.125],
        };
        let ok = SweepCell {
            sigma_nu: 0.001,
            sigma_index: 1,
            realization: 0,
            seed: 99,
            criterion: Criterion::LeastSquares,
            outcome: Ok(SweepResult {
                sigma_nu: 0.001,
                seed: 99,
                criterion: Criterion::LeastSquares,
                phi_hat: DVector::zeros(2),
                monitored_coeff: -0.731264528191,
                residual_norm: 0.25,
                report,
            }),
        };
        let failed = SweepCell {
            sigma_nu: 0.002,
            sigma_index: 2,
            realization: 1,
            seed: 7,
            criterion: Criterion::InstrumentalVariable,
            outcome: Err("solver gave up".into()),
        };
        let text = sweep_csv(&[ok.clone(), failed]);
        let rows = parse_sweep_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].criterion, Criterion::LeastSquares);
        assert_eq!(rows[0].monitored_coeff, -0.731264528191);
        assert_eq!(rows[0].final_cost, 0.125);
        assert!(rows[0].converged);
        assert_eq!(rows[1].criterion, Criterion::InstrumentalVariable);
        assert!(rows[1].monitored_coeff.is_nan());
        assert!(!rows[1].converged);
        assert!(parse_sweep_csv("bogus\n1,2,3\n").is_err());
        assert!(parse_sweep_csv(&text.replace("ls", "qq")).is_err());
    }

    fn tiny_study() -> (StribeckPlant, RationalFilter, RationalFilter, MlpParams, ClosedLoopDataset)
    {
        let plant = StribeckPlant::new(5.0, 1.0, 20.0, 2.5, TS).unwrap();
        let ctrl = RationalFilter::new(&[123.38, -122.76], &[1.0, -1.908, 0.91]).unwrap();
        let noise = RationalFilter::new(&[0.8048, -1.61, 0.8048], &[1.0, -1.57, 0.65]).unwrap();
        let limits = FourthOrderLimits {
            v_max: 0.5,
            a_max: 1.0,
            j_max: 62.0,
            s_max: 4100.0,
            stroke: 0.05,
            lead_in: 0.05,
            total_duration: 1.2,
        };
        let r = make_fourth_order_reference(&limits, TS).unwrap();
        let shape = MlpShape::new(vec![3, 3, 1]).unwrap();
        let opts = OptimizerOpts { max_iters: 2000, cost_tol: 1e-2, ..Default::default() };
        let (phi0, ds0, report) =
            pretrain_noiseless(&plant, &ctrl, &r, &shape, Activation::Tanh, true, 5, 2, &opts)
                .unwrap();
        // the zero-noise sweep invariant below needs the start to sit at or
        // below the cost floor the sweep cells reuse
        assert!(report.converged && report.final_cost <= 1e-2);
        (plant, ctrl, noise, phi0, ds0)
    }

    #[test]
    fn sweep_covers_the_grid_and_repeats_bit_exactly() {
        let (plant, ctrl, noise, phi0, ds0) = tiny_study();
        let inputs = SweepInputs {
            plant: &plant,
            ctrl: &ctrl,
            noise_filter: &noise,
            phi0: &phi0,
            ds0: &ds0,
        };
        let settings = SweepSettings {
            sigma_levels: vec![0.0, 0.002],
            realizations: 2,
            master_seed: 11,
            opts: OptimizerOpts { max_iters: 40, cost_tol: 1e-2, ..Default::default() },
        };
        let cells = consistency_sweep(&inputs, &settings).unwrap();
        assert_eq!(cells.len(), 2 * 2 * 2);
        for c in &cells {
            assert!(c.outcome.is_ok(), "cell failed: {:?}", c.outcome);
        }
        // order is noise level, then realization, then criterion
        assert_eq!(cells[0].criterion, Criterion::LeastSquares);
        assert_eq!(cells[1].criterion, Criterion::InstrumentalVariable);
        assert_eq!((cells[0].sigma_index, cells[0].realization), (0, 0));
        assert_eq!((cells[2].sigma_index, cells[2].realization), (0, 1));
        assert_eq!(cells[4].sigma_index, 1);

        let again = consistency_sweep(&inputs, &settings).unwrap();
        assert_eq!(sweep_csv(&cells), sweep_csv(&again));

        // zero-noise cells keep the starting parameters
        let ls0 = cells[0].outcome.as_ref().unwrap();
        assert_eq!(ls0.phi_hat, phi0.flatten());
    }

    #[test]
    fn sweep_rejects_an_empty_grid() {
        let (plant, ctrl, noise, phi0, ds0) = tiny_study();
        let inputs = SweepInputs {
            plant: &plant,
            ctrl: &ctrl,
            noise_filter: &noise,
            phi0: &phi0,
            ds0: &ds0,
        };
        let settings = SweepSettings {
            sigma_levels: vec![],
            realizations: 2,
            master_seed: 1,
            opts: OptimizerOpts::default(),
        };
        assert!(matches!(consistency_sweep(&inputs, &settings), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn median_row_selection_picks_the_middle_residual() {
        let mk = |seed: u64, residual: f64| SweepCsvRow {
            sigma_nu: 0.005,
            seed,
            criterion: Criterion::LeastSquares,
            monitored_coeff: 0.0,
            residual_norm: residual,
            converged: true,
            iterations: 0,
            final_cost: 0.0,
        };
        let rows = vec![mk(10, 3.0), mk(11, 1.0), mk(12, 2.0), mk(13, f64::NAN)];
        let median = median_residual_row(&rows, Criterion::LeastSquares, 0.005).unwrap();
        assert_eq!(median.seed, 12);
        assert!(median_residual_row(&rows, Criterion::InstrumentalVariable, 0.005).is_none());
        assert!(median_residual_row(&rows, Criterion::LeastSquares, 0.004).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn iv_with_identical_matrices_always_collapses_to_ls(seed in 0u64..1000) {
            let f = random_matrix(6, 2, seed);
            let d = random_vector(6, seed.wrapping_add(1));
            if let (Ok(ls), Ok(iv)) =
                (local_ls_estimate(&f, &d), local_iv_estimate(&f, &f, &d))
            {
                prop_assert_eq!(ls.delta_phi, iv.delta_phi);
            }
        }

        #[test]
        fn closed_forms_satisfy_their_normal_equations(seed in 0u64..1000) {
            let f = random_matrix(8, 3, seed);
            let d = random_vector(8, seed.wrapping_add(7));
            if let Ok(est) = local_ls_estimate(&f, &d) {
                let lhs = f.tr_mul(&f) * &est.delta_phi;
                let rhs = -f.tr_mul(&d);
                prop_assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
            }
        }
    }
}
