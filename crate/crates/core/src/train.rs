//! Training criteria over closed-loop data and the damped Gauss-Newton
//! minimizer shared by both of them.
//!
//! The least-squares criterion fits the recorded input directly:
//! `||u - F(y)||^2`. The instrumental-variable criterion projects the same
//! residual onto reference-built instruments first: `||Z^T (u - F(y))||^2`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::RationalFilter;
use crate::nn::{Activation, MlpParams, MlpShape};
use crate::plant::{simulate_closed_loop, ClosedLoopDataset, StribeckPlant};
use crate::signals::{derivative_basis_matrix, scaled_derivative_basis, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    LeastSquares,
    InstrumentalVariable,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::LeastSquares => "ls",
            Criterion::InstrumentalVariable => "iv",
        })
    }
}

/// Instruments stacked row-wise: row `k` holds the reference window
/// `[r(k), r(k-1), ..., r(k-n_phi+1)]`, zero-padded before the start.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentMatrix {
    z: DMatrix<f64>,
}

impl InstrumentMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn nrows(&self) -> usize {
        self.z.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.z.ncols()
    }
}

/// Delayed copies of the reference as instruments, one column per parameter.
pub fn build_instruments(r: &Signal, n_phi: usize) -> Result<InstrumentMatrix> {
    if n_phi == 0 {
        return Err(Error::DimensionMismatch("need at least one instrument column".into()));
    }
    let n = r.len();
    let mut z = DMatrix::zeros(n, n_phi);
    for k in 0..n {
        for i in 0..n_phi {
            z[(k, i)] = r.at(k as i64 + 1 - i as i64);
        }
    }
    Ok(InstrumentMatrix { z })
}

fn check_instruments(z: &InstrumentMatrix, n: usize, n_phi: usize) -> Result<()> {
    if z.nrows() != n || z.ncols() != n_phi {
        return Err(Error::DimensionMismatch(format!(
            "instrument matrix is {}x{}, expected {}x{}",
            z.nrows(),
            z.ncols(),
            n,
            n_phi
        )));
    }
    Ok(())
}

fn residual(phi: &MlpParams, ds: &ClosedLoopDataset) -> DVector<f64> {
    let u = DVector::from_column_slice(ds.u.values());
    u - phi.predictions(&ds.y)
}

/// `||u - F(y)||^2`.
pub fn loss_ls(phi: &MlpParams, ds: &ClosedLoopDataset) -> f64 {
    residual(phi, ds).norm_squared()
}

/// `||Z^T (u - F(y))||^2`.
pub fn loss_iv(phi: &MlpParams, ds: &ClosedLoopDataset, z: &InstrumentMatrix) -> Result<f64> {
    check_instruments(z, ds.len(), phi.param_count())?;
    Ok(z.z.tr_mul(&residual(phi, ds)).norm_squared())
}

/// Gradient of [`loss_ls`]: `-2 J^T (u - F(y))`.
pub fn grad_ls(phi: &MlpParams, ds: &ClosedLoopDataset) -> DVector<f64> {
    let (pred, jt) = phi.predictions_and_jacobian_t(&ds.y);
    let res = DVector::from_column_slice(ds.u.values()) - pred;
    -2.0 * (jt * res)
}

/// Gradient of [`loss_iv`]: `-2 J^T Z Z^T (u - F(y))`.
pub fn grad_iv(phi: &MlpParams, ds: &ClosedLoopDataset, z: &InstrumentMatrix) -> Result<DVector<f64>> {
    check_instruments(z, ds.len(), phi.param_count())?;
    let (pred, jt) = phi.predictions_and_jacobian_t(&ds.y);
    let res = DVector::from_column_slice(ds.u.values()) - pred;
    let w = z.z.tr_mul(&res);
    Ok(-2.0 * (jt * (&z.z * w)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOpts {
    pub max_iters: usize,
    /// Converged when the gradient norm drops below
    /// `grad_tol * (1 + |cost|)`.
    pub grad_tol: f64,
    /// Initial damping as a fraction of the mean normal-matrix diagonal.
    pub lambda_init: f64,
    /// Absolute criterion floor: converged as soon as the cost is at or
    /// below this value, including before the first step. Zero disables it.
    /// Fitting a smooth target with a tanh network descends asymptotically
    /// without ever meeting a gradient tolerance, so runs that should stop
    /// at "residual negligible" need this floor.
    pub cost_tol: f64,
}

impl Default for OptimizerOpts {
    fn default() -> Self {
        OptimizerOpts { max_iters: 500, grad_tol: 1e-9, lambda_init: 1e-3, cost_tol: 0.0 }
    }
}

const LAMBDA_RAISE: f64 = 10.0;
const LAMBDA_DROP: f64 = 10.0;
/// Consecutive rejected trial steps before the search is declared stalled.
const MAX_REJECTS: usize = 40;
/// Damping growth beyond which a repeatedly singular solve is fatal.
const LAMBDA_BLOWUP: f64 = 1e18;

/// Outcome of a [`minimize`] run. `cost_history` records the cost at entry
/// and after every accepted step, so it is strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
    pub grad_norm: f64,
    pub cost_history: Vec<f64>,
}

/// Minimize the chosen criterion with a damped Gauss-Newton iteration
/// (Levenberg-Marquardt for the least-squares case).
///
/// The instrument matrix is required for (and only used by) the
/// instrumental-variable criterion. Accepted steps strictly decrease the
/// cost; the damping grows tenfold on every rejected trial and shrinks
/// tenfold on every accepted one.
///
/// `converged` is reported when the gradient test or the absolute cost
/// floor of [`OptimizerOpts`] passes, both checked before the first step,
/// so a start that already satisfies either is returned unchanged with
/// zero iterations.
pub fn minimize(
    criterion: Criterion,
    phi_init: &MlpParams,
    ds: &ClosedLoopDataset,
    z: Option<&InstrumentMatrix>,
    opts: &OptimizerOpts,
) -> Result<(MlpParams, TrainReport)> {
    let n_phi = phi_init.param_count();
    let z = match criterion {
        Criterion::LeastSquares => None,
        Criterion::InstrumentalVariable => {
            let z = z.ok_or_else(|| {
                Error::DimensionMismatch("instrumental-variable training needs instruments".into())
            })?;
            check_instruments(z, ds.len(), n_phi)?;
            Some(&z.z)
        }
    };
    let u = DVector::from_column_slice(ds.u.values());
    let cost_of = |res: &DVector<f64>| -> f64 {
        match z {
            None => res.norm_squared(),
            Some(z) => z.tr_mul(res).norm_squared(),
        }
    };

    let mut phi = phi_init.clone();
    let mut flat = phi.flatten();
    let mut cost = cost_of(&(&u - phi.predictions(&ds.y)));
    let mut history = vec![cost];
    let mut lambda: Option<f64> = None;
    let mut lambda_ref = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let (pred, jt) = phi.predictions_and_jacobian_t(&ds.y);
        let res = &u - pred;
        // normal matrix and right-hand side of the damped step
        let (mut normal, rhs, grad) = match z {
            None => {
                let a = &jt * jt.transpose();
                let rhs = &jt * &res;
                let grad = -2.0 * &rhs;
                (a, rhs, grad)
            }
            Some(z) => {
                let jz = &jt * z; // J^T Z
                let w = z.tr_mul(&res);
                let a = &jz * jz.transpose();
                let rhs = &jz * &w;
                let grad = -2.0 * &rhs;
                (a, rhs, grad)
            }
        };
        grad_norm = grad.norm();
        if cost <= opts.cost_tol || grad_norm < opts.grad_tol * (1.0 + cost.abs()) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }

        let lam = lambda.get_or_insert_with(|| {
            let mean_diag = normal.trace() / n_phi as f64;
            let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
            lambda_ref = opts.lambda_init * base;
            lambda_ref
        });

        let mut rejects = 0;
        let mut accepted = false;
        while rejects < MAX_REJECTS {
            for i in 0..n_phi {
                normal[(i, i)] += *lam;
            }
            let chol = normal.clone().cholesky();
            for i in 0..n_phi {
                normal[(i, i)] -= *lam;
            }
            let delta = match chol {
                Some(c) => c.solve(&rhs),
                None => {
                    *lam *= LAMBDA_RAISE;
                    if *lam > lambda_ref * LAMBDA_BLOWUP {
                        return Err(Error::LinearSolveFailure(format!(
                            "normal matrix stayed indefinite up to damping {lam:.3e}"
                        )));
                    }
                    rejects += 1;
                    continue;
                }
            };
            let trial_flat = &flat + &delta;
            let trial_phi = phi.with_flat(&trial_flat)?;
            let trial_cost = cost_of(&(&u - trial_phi.predictions(&ds.y)));
            if trial_cost.is_finite() && trial_cost < cost {
                phi = trial_phi;
                flat = trial_flat;
                cost = trial_cost;
                history.push(cost);
                *lam /= LAMBDA_DROP;
                iterations += 1;
                accepted = true;
                break;
            }
            *lam *= LAMBDA_RAISE;
            rejects += 1;
        }
        if !accepted {
            // no descent possible at any damping: numerically at a floor
            break;
        }
    }

    Ok((
        phi,
        TrainReport {
            iterations,
            converged,
            final_cost: cost,
            grad_norm,
            cost_history: history,
        },
    ))
}

/// Fit a fresh network to a noiseless closed-loop run of the plant, trying
/// `restarts` random initializations (seeds `init_seed`, `init_seed + 1`, ...)
/// and keeping the cheapest run that terminated on its own, whether at the
/// gradient tolerance or at a numerical descent floor.
///
/// Returns the fitted parameters together with the noiseless dataset they
/// were fitted on and the winning run's report. Fails with `NotConverged`
/// when every restart was cut off by the iteration budget instead.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_noiseless(
    plant: &StribeckPlant,
    ctrl: &RationalFilter,
    r: &Signal,
    shape: &MlpShape,
    activation: Activation,
    normalize_basis: bool,
    init_seed: u64,
    restarts: usize,
    opts: &OptimizerOpts,
) -> Result<(MlpParams, ClosedLoopDataset, TrainReport)> {
    if shape.input_size() != 3 {
        return Err(Error::InvalidNetwork(format!(
            "derivative-basis input expects 3 network inputs, shape has {}",
            shape.input_size()
        )));
    }
    let zeros = Signal::new(vec![0.0; r.len()], r.ts())?;
    let ds0 = simulate_closed_loop(plant, ctrl, r, &zeros, None)?;
    let basis = if normalize_basis {
        scaled_derivative_basis(r.ts(), r)
    } else {
        derivative_basis_matrix(r.ts())
    };

    let mut best: Option<(MlpParams, TrainReport)> = None;
    for attempt in 0..restarts.max(1) {
        let seed = init_seed.wrapping_add(attempt as u64);
        let phi0 =
            MlpParams::init(shape.clone(), activation, seed).with_basis(basis.clone())?;
        let (phi, report) = minimize(Criterion::LeastSquares, &phi0, &ds0, None, opts)?;
        // converged, or stalled below max_iters: either way a floor was hit
        let finished = report.converged || report.iterations < opts.max_iters;
        if !finished {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.final_cost < b.final_cost);
        if better {
            best = Some((phi, report));
        }
    }
    match best {
        Some((phi, report)) => Ok((phi, ds0, report)),
        None => Err(Error::NotConverged(format!(
            "no pretraining restart terminated within {} iterations",
            opts.max_iters
        ))),
    }
}
