// SPDX-License-Identifier: Apache-2.0

//! Energies, the scaled energy norm, order fits, strong-convergence and moment
//! studies, structure checks and local-error studies against the bridge dynamics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::fastflow::{
    assemble_propagator, modal_decompose, propagator_integral, CoupledKickTable, FastFlowError,
    ModalForm,
};
use crate::integrators::{
    integrate, step_count, IntegrateOptions, IntegratorError, Method, Noise, NoiseMode, StepNoise,
    StepPlan, Stepper,
};
use crate::linalg::spectral_norm;
use crate::model::{mass_weighted_form, CheckedSystem, ModelError, State, StiffSystem};
use crate::noise::{brownian_grid, grid_count, NoiseError, PathStream};
use crate::parallel::map_paths;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("the system has no soft potential; energy is undefined")]
    MissingPotential,
    #[error("step {h} is not an integer multiple of {unit}")]
    GridNesting { h: f64, unit: f64 },
    #[error("invalid study input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    FastFlow(#[from] FastFlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// `p^T M^-1 p / 2 + V(q) + q^T K q / (2 eps)`
pub fn hamiltonian_energy(sys: &StiffSystem, state: &State) -> Result<f64, DiagnosticsError> {
    let v = sys.soft_potential.as_ref().ok_or(DiagnosticsError::MissingPotential)?;
    let kinetic = if sys.is_unit_mass() {
        0.5 * state.p.norm_squared()
    } else {
        let minv_p = sys
            .mass
            .clone()
            .cholesky()
            .expect("validated mass is SPD")
            .solve(&state.p);
        0.5 * state.p.dot(&minv_p)
    };
    let stiff = 0.5 * state.q.dot(&(&sys.stiffness * &state.q)) / sys.eps;
    Ok(kinetic + v(state.q.as_slice()) + stiff)
}

/// `Omega = eps^-1/2 sqrt(K~)` on a unit-mass system. Free modes carry weight 1.
#[derive(Debug, Clone)]
pub struct EnergyNormContext {
    pub omega: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
}

impl EnergyNormContext {
    pub fn from_modal(modal: &ModalForm) -> Self {
        let w: Vec<f64> = modal.omega.iter().map(|&w| if w > 0.0 { w } else { 1.0 }).collect();
        let winv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
        EnergyNormContext {
            omega: modal.assemble(&w),
            omega_inv: modal.assemble(&winv),
        }
    }

    pub fn new(unit_mass: &CheckedSystem) -> Result<Self, DiagnosticsError> {
        Ok(Self::from_modal(&modal_decompose(unit_mass)?))
    }

    /// `sqrt(q^T q + |Omega^-1 p|^2)`
    pub fn norm(&self, q: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let wp = &self.omega_inv * p;
        (q.norm_squared() + wp.norm_squared()).sqrt()
    }

    /// Operator norm induced by `|| . ||_E`.
    pub fn operator_norm(&self, m: &DMatrix<f64>) -> f64 {
        let d = self.omega.nrows();
        let mut scale = DMatrix::zeros(2 * d, 2 * d);
        let mut scale_inv = DMatrix::zeros(2 * d, 2 * d);
        scale.view_mut((0, 0), (d, d)).fill_with_identity();
        scale_inv.view_mut((0, 0), (d, d)).fill_with_identity();
        scale.view_mut((d, d), (d, d)).copy_from(&self.omega);
        scale_inv.view_mut((d, d), (d, d)).copy_from(&self.omega_inv);
        spectral_norm(&(scale_inv * m * scale))
    }
}

pub fn energy_norm(ctx: &EnergyNormContext, x: &State) -> f64 {
    ctx.norm(&x.q, &x.p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the residuals (0 for two points).
    pub slope_se: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    assert!(x.len() >= 2, "need at least two points");
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if x.len() > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LinearFit {
        slope,
        intercept,
        slope_se,
    }
}

/// Least-squares slope of `log err` against `log h`.
pub fn fit_order(h: &[f64], err: &[f64]) -> LinearFit {
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// `sqrt(mean(x))` and its jackknife standard error.
pub fn rms_with_jackknife(squares: &[f64]) -> (f64, f64) {
    let n = squares.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let total: f64 = squares.iter().sum();
    let rms = (total / n as f64).sqrt();
    if n == 1 {
        return (rms, 0.0);
    }
    let loo: Vec<f64> = squares
        .iter()
        .map(|x| ((total - x) / (n - 1) as f64).max(0.0).sqrt())
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (rms, var.sqrt())
}

/// How the reference solution of a strong-error study is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceSpec {
    /// Fine symplectic Euler (deterministic) or semi-implicit Euler–Maruyama on the
    /// shared Brownian grid. The step is the largest `h <= target` dividing every
    /// macro step.
    Fine { target: f64 },
    /// A precomputed final state (deterministic systems only).
    Given(State),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub method: Method,
    /// Strictly decreasing macro steps.
    pub step_grid: Vec<f64>,
    pub t_end: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub reference: ReferenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorStats {
    pub h: f64,
    pub rms_q: f64,
    pub rms_p: f64,
    pub rms_e: f64,
    pub se_q: f64,
    pub se_p: f64,
    pub se_e: f64,
    /// Description of the first path that blew up, if any. Such steps are left out
    /// of the fits.
    pub blowup: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub omega: f64,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub method: String,
    pub errors: Vec<ErrorStats>,
    pub order_q: Option<LinearFit>,
    pub order_p: Option<LinearFit>,
    pub order_e: Option<LinearFit>,
    pub n_paths: usize,
    pub seed: u64,
    pub reference: String,
    pub reference_step: Option<f64>,
    pub eps_sweep: Vec<SweepEntry>,
}

impl ConvergenceReport {
    pub fn step_grid(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.h).collect()
    }

    /// `max / min` of the swept q-errors.
    pub fn sweep_ratio_q(&self) -> Option<f64> {
        ratio(self.eps_sweep.iter().map(|e| e.stats.rms_q))
    }

    pub fn sweep_ratio_e(&self) -> Option<f64> {
        ratio(self.eps_sweep.iter().map(|e| e.stats.rms_e))
    }
}

fn ratio(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    Some(max / min)
}

fn multiple_of(h: f64, unit: f64) -> Result<usize, DiagnosticsError> {
    grid_count(h, unit).map_err(|_| DiagnosticsError::GridNesting { h, unit })
}

/// Largest `h <= target` dividing `min_h`.
pub fn nested_fine_step(min_h: f64, target: f64) -> f64 {
    min_h / (min_h / target).ceil()
}

/// Strong errors at time `T` of `spec.method` for every step in the grid.
pub fn strong_errors(
    sys: &CheckedSystem,
    initial: &State,
    spec: &StudySpec,
) -> Result<(Vec<ErrorStats>, Option<f64>), DiagnosticsError> {
    let grid = &spec.step_grid;
    if grid.is_empty() || grid.windows(2).any(|w| w[1] >= w[0]) || grid[grid.len() - 1] <= 0.0 {
        return Err(DiagnosticsError::InvalidInput(
            "step grid must be positive and strictly decreasing".into(),
        ));
    }
    for &h in grid {
        multiple_of(spec.t_end, h)?;
    }
    let stochastic = !sys.is_deterministic();
    let min_h = grid[grid.len() - 1];

    let (ref_stepper, fine_h) = match &spec.reference {
        ReferenceSpec::Fine { target } => {
            let fine_h = nested_fine_step(min_h, *target);
            for &h in grid {
                multiple_of(h, fine_h)?;
            }
            let plan = if stochastic {
                StepPlan::new(Method::FineEulerMaruyama, fine_h, NoiseMode::PathCoupled { fine_h })
            } else {
                StepPlan::deterministic(Method::FineSymplecticEuler, fine_h)
            };
            (Some(Stepper::new(sys, plan)?), Some(fine_h))
        }
        ReferenceSpec::Given(_) => {
            if stochastic {
                return Err(DiagnosticsError::InvalidInput(
                    "a given reference needs a deterministic system".into(),
                ));
            }
            (None, None)
        }
    };

    let steppers: Vec<Stepper> = grid
        .iter()
        .map(|&h| {
            let mode = match fine_h {
                Some(fine_h) if stochastic => NoiseMode::PathCoupled { fine_h },
                _ => NoiseMode::None,
            };
            Stepper::new(sys, StepPlan::new(spec.method, h, mode))
        })
        .collect::<Result<_, _>>()?;
    let (unit, transform) = mass_weighted_form(sys)?;
    let ctx = EnergyNormContext::new(&unit)?;
    let n_paths = if stochastic { spec.n_paths.max(1) } else { 1 };
    let noise_dim = sys.noise_dim();
    let opts = IntegrateOptions::default();

    type PathErrors = Vec<Result<(f64, f64, f64), String>>;
    let per_path: Vec<Result<PathErrors, DiagnosticsError>> = map_paths(n_paths, |i| {
        let bgrid = match fine_h {
            Some(h) if stochastic => {
                let mut stream = PathStream::new(spec.seed, i as u64);
                Some(brownian_grid(&mut stream, h, spec.t_end, noise_dim)?)
            }
            _ => None,
        };
        let noise = || match &bgrid {
            Some(g) => Noise::Grid(g),
            None => Noise::None,
        };
        let reference = match (&spec.reference, &ref_stepper) {
            (ReferenceSpec::Given(s), _) => s.clone(),
            (_, Some(st)) => integrate(st, initial, spec.t_end, noise(), &mut (), &opts)?.state,
            _ => unreachable!(),
        };
        let reference = transform.to_weighted(&reference);
        Ok(steppers
            .iter()
            .map(|st| match integrate(st, initial, spec.t_end, noise(), &mut (), &opts) {
                Ok(out) => {
                    let s = transform.to_weighted(&out.state);
                    let dq = &s.q - &reference.q;
                    let dp = &s.p - &reference.p;
                    let de = ctx.norm(&dq, &dp);
                    Ok((dq.norm_squared(), dp.norm_squared(), de * de))
                }
                Err(e) => Err(format!("path {i}: {e}")),
            })
            .collect())
    });
    let per_path = per_path.into_iter().collect::<Result<Vec<_>, _>>()?;

    let stats = grid
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let mut sq = Vec::with_capacity(n_paths);
            let mut sp = Vec::with_capacity(n_paths);
            let mut se = Vec::with_capacity(n_paths);
            let mut blowup = None;
            for path in &per_path {
                match &path[k] {
                    Ok((a, b, c)) => {
                        sq.push(*a);
                        sp.push(*b);
                        se.push(*c);
                    }
                    Err(msg) => {
                        if blowup.is_none() {
                            blowup = Some(msg.clone());
                        }
                    }
                }
            }
            let (rms_q, se_q) = rms_with_jackknife(&sq);
            let (rms_p, se_p) = rms_with_jackknife(&sp);
            let (rms_e, se_e) = rms_with_jackknife(&se);
            if blowup.is_some() {
                ErrorStats {
                    h,
                    rms_q: f64::NAN,
                    rms_p: f64::NAN,
                    rms_e: f64::NAN,
                    se_q: f64::NAN,
                    se_p: f64::NAN,
                    se_e: f64::NAN,
                    blowup,
                }
            } else {
                ErrorStats {
                    h,
                    rms_q,
                    rms_p,
                    rms_e,
                    se_q,
                    se_p,
                    se_e,
                    blowup,
                }
            }
        })
        .collect();
    Ok((stats, fine_h))
}

fn fit_valid(stats: &[ErrorStats], pick: impl Fn(&ErrorStats) -> f64) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> = stats
        .iter()
        .map(|s| (s.h, pick(s)))
        .filter(|(_, e)| e.is_finite() && *e > 0.0)
        .collect();
    if pts.len() < 4 {
        return None;
    }
    let (h, e): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(fit_order(&h, &e))
}

/// Strong-error study over `spec.step_grid` with fitted orders.
pub fn strong_convergence_study(
    sys: &CheckedSystem,
    initial: &State,
    spec: &StudySpec,
) -> Result<ConvergenceReport, DiagnosticsError> {
    if spec.step_grid.len() < 4 {
        return Err(DiagnosticsError::InvalidInput(
            "order fits need at least four step sizes".into(),
        ));
    }
    let (errors, fine_h) = strong_errors(sys, initial, spec)?;
    Ok(ConvergenceReport {
        method: spec.method.to_string(),
        order_q: fit_valid(&errors, |s| s.rms_q),
        order_p: fit_valid(&errors, |s| s.rms_p),
        order_e: fit_valid(&errors, |s| s.rms_e),
        errors,
        n_paths: if sys.is_deterministic() { 1 } else { spec.n_paths },
        seed: spec.seed,
        reference: match &spec.reference {
            ReferenceSpec::Fine { .. } if sys.is_deterministic() => "fine-symplectic-euler".into(),
            ReferenceSpec::Fine { .. } => "fine-euler-maruyama".into(),
            ReferenceSpec::Given(_) => "given".into(),
        },
        reference_step: fine_h,
        eps_sweep: Vec::new(),
    })
}

/// Errors at one macro step `h` for each stiff frequency in `omegas`. `build`
/// returns the system, initial state and reference for a frequency.
pub fn epsilon_sweep<B>(
    omegas: &[f64],
    h: f64,
    base: &StudySpec,
    build: B,
) -> Result<Vec<SweepEntry>, DiagnosticsError>
where
    B: Fn(f64) -> Result<(CheckedSystem, State, ReferenceSpec), DiagnosticsError>,
{
    omegas
        .iter()
        .map(|&omega| {
            let (sys, x0, reference) = build(omega)?;
            let spec = StudySpec {
                step_grid: vec![h],
                reference,
                ..base.clone()
            };
            let (mut stats, _) = strong_errors(&sys, &x0, &spec)?;
            Ok(SweepEntry {
                omega,
                stats: stats.remove(0),
            })
        })
        .collect()
}

pub type ObservableFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// Scalar observable `f(q, p)` with a name for reports.
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    pub f: ObservableFn,
}

impl Observable {
    pub fn new(name: &str, f: impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Observable {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }

    /// Position coordinate `i`.
    pub fn position(name: &str, i: usize) -> Self {
        Observable::new(name, move |q, _| q[i])
    }
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observable({})", self.name)
    }
}

/// One side of a moment comparison.
#[derive(Debug, Clone)]
pub struct MomentRun {
    pub system: CheckedSystem,
    pub plan: StepPlan,
    pub initial: State,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub observable: String,
    pub a: MomentEstimate,
    pub b: MomentEstimate,
    pub z_mean: f64,
    pub z_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentComparison {
    pub rows: Vec<MomentRow>,
    pub n_paths: usize,
    pub max_abs_z_mean: f64,
    pub max_abs_z_var: f64,
    pub failed_paths_a: usize,
    pub failed_paths_b: usize,
}

impl MomentComparison {
    pub fn max_abs_z(&self) -> f64 {
        self.max_abs_z_mean.max(self.max_abs_z_var)
    }
}

fn estimate(values: &[f64]) -> MomentEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = if n > 1.0 { m2 * n / (n - 1.0) } else { 0.0 };
    MomentEstimate {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        se_var: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    }
}

fn z_score(a: f64, b: f64, sa: f64, sb: f64) -> f64 {
    let s = (sa * sa + sb * sb).sqrt();
    if s > 0.0 {
        (a - b) / s
    } else if a == b {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Observables sampled every `dt_out` for every path; `[path][mesh][observable]`.
fn sample_paths(
    run: &MomentRun,
    observables: &[Observable],
    dt_out: f64,
    t_end: f64,
    n_paths: usize,
) -> Result<(Vec<Option<Vec<f64>>>, usize), DiagnosticsError> {
    let stepper = Stepper::new(&run.system, run.plan.clone())?;
    let h = run.plan.h;
    let stride = multiple_of(dt_out, h)?;
    let n_mesh = step_count(t_end, dt_out) + 1;
    let n_obs = observables.len();
    let opts = IntegrateOptions::default();
    let paths = map_paths(n_paths, |i| {
        let mut stream = PathStream::new(run.seed, i as u64);
        let mut values = vec![0.0; n_mesh * n_obs];
        let mut rec = |k: usize, _t: f64, q: &DVector<f64>, p: &DVector<f64>| {
            if k.is_multiple_of(stride) && k / stride < n_mesh {
                let j = k / stride;
                for (o, obs) in observables.iter().enumerate() {
                    values[j * n_obs + o] = (obs.f)(q, p);
                }
            }
        };
        let noise = if stepper.is_noisy() {
            Noise::Stream(&mut stream)
        } else {
            Noise::None
        };
        integrate(&stepper, &run.initial, (n_mesh - 1) as f64 * dt_out, noise, &mut rec, &opts)
            .ok()
            .map(|_| values)
    });
    Ok((paths, n_mesh))
}

/// Means and variances of `observables` on the mesh `t = j dt_out` for two runs,
/// with z-scores of their differences from pooled standard errors. Paths that fail
/// are dropped and counted.
pub fn moment_comparison(
    a: &MomentRun,
    b: &MomentRun,
    observables: &[Observable],
    dt_out: f64,
    t_end: f64,
    n_paths: usize,
) -> Result<MomentComparison, DiagnosticsError> {
    let (pa, n_mesh) = sample_paths(a, observables, dt_out, t_end, n_paths)?;
    let (pb, _) = sample_paths(b, observables, dt_out, t_end, n_paths)?;
    let good_a: Vec<&Vec<f64>> = pa.iter().flatten().collect();
    let good_b: Vec<&Vec<f64>> = pb.iter().flatten().collect();
    if good_a.is_empty() || good_b.is_empty() {
        return Err(DiagnosticsError::InvalidInput("every path failed".into()));
    }
    let n_obs = observables.len();
    let mut rows = Vec::with_capacity(n_mesh * n_obs);
    let mut max_z_mean: f64 = 0.0;
    let mut max_z_var: f64 = 0.0;
    let mut col_a = vec![0.0; good_a.len()];
    let mut col_b = vec![0.0; good_b.len()];
    for j in 0..n_mesh {
        for (o, obs) in observables.iter().enumerate() {
            for (c, v) in col_a.iter_mut().zip(&good_a) {
                *c = v[j * n_obs + o];
            }
            for (c, v) in col_b.iter_mut().zip(&good_b) {
                *c = v[j * n_obs + o];
            }
            let ea = estimate(&col_a);
            let eb = estimate(&col_b);
            let z_mean = z_score(ea.mean, eb.mean, ea.se_mean, eb.se_mean);
            let z_var = z_score(ea.var, eb.var, ea.se_var, eb.se_var);
            max_z_mean = max_z_mean.max(z_mean.abs());
            max_z_var = max_z_var.max(z_var.abs());
            rows.push(MomentRow {
                t: a.initial.t + j as f64 * dt_out,
                observable: obs.name.clone(),
                a: ea,
                b: eb,
                z_mean,
                z_var,
            });
        }
    }
    Ok(MomentComparison {
        rows,
        n_paths,
        max_abs_z_mean: max_z_mean,
        max_abs_z_var: max_z_var,
        failed_paths_a: n_paths - good_a.len(),
        failed_paths_b: n_paths - good_b.len(),
    })
}

/// Central-difference Jacobian of `map` at `x` with step `1e-6 (1 + |x|)`.
pub fn fd_jacobian<F>(mut map: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let delta = 1e-6 * (1.0 + x.norm());
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + delta;
        let fp = map(&xp);
        xp[j] = x[j] - delta;
        let fm = map(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * delta)));
    }
    jac
}

/// `[[0, I], [-I, 0]]`
pub fn canonical_form(d: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = 1.0;
        j[(d + i, i)] = -1.0;
    }
    j
}

/// `|| J^T Omega_c J - Omega_c ||_2` for a finite-difference Jacobian `J`.
pub fn symplectic_defect_of(jac: &DMatrix<f64>) -> f64 {
    let d = jac.nrows() / 2;
    let omega = canonical_form(d);
    spectral_norm(&(jac.transpose() * &omega * jac - omega))
}

/// Finite-difference Jacobian of one deterministic step of `stepper`.
pub fn step_jacobian(stepper: &Stepper, state: &State) -> Result<DMatrix<f64>, DiagnosticsError> {
    let x = state.to_vector();
    let mut failure = None;
    let jac = fd_jacobian(
        |v| match stepper.step_state(&State::from_vector(v, state.t), StepNoise::None) {
            Ok(s) => s.to_vector(),
            Err(e) => {
                failure.get_or_insert(e);
                DVector::from_element(v.len(), f64::NAN)
            }
        },
        &x,
    );
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(jac),
    }
}

/// Symplecticity defect of one `method` step of size `h` at `state`.
pub fn symplectic_defect(
    sys: &CheckedSystem,
    method: Method,
    state: &State,
    h: f64,
) -> Result<f64, DiagnosticsError> {
    let stepper = Stepper::new(sys, StepPlan::deterministic(method, h))?;
    Ok(symplectic_defect_of(&step_jacobian(&stepper, state)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeterminantReport {
    pub dets: Vec<f64>,
    /// `max |d_i - d_j| / max |d_i|`
    pub max_rel_spread: f64,
    /// `exp(-tr(c~) H)`
    pub expected: f64,
    /// `max |d_i - expected| / expected`
    pub max_rel_error: f64,
}

/// Jacobian determinants of the one-step map with the noise frozen: every
/// evaluation replays the same draws from `(seed, 0)`.
pub fn jacobian_det_uniformity(
    sys: &CheckedSystem,
    plan: StepPlan,
    states: &[State],
    seed: u64,
) -> Result<DeterminantReport, DiagnosticsError> {
    if states.len() < 2 {
        return Err(DiagnosticsError::InvalidInput("need at least two states".into()));
    }
    let h = plan.h;
    let stepper = Stepper::new(sys, plan)?;
    let base = PathStream::new(seed, 0);
    let mut dets = Vec::with_capacity(states.len());
    for s in states {
        let mut failure = None;
        let jac = fd_jacobian(
            |v| {
                let mut stream = base.rewound();
                let noise = if stepper.is_noisy() {
                    StepNoise::Stream(&mut stream)
                } else {
                    StepNoise::None
                };
                match stepper.step_state(&State::from_vector(v, s.t), noise) {
                    Ok(out) => out.to_vector(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        DVector::from_element(v.len(), f64::NAN)
                    }
                }
            },
            &s.to_vector(),
        );
        if let Some(e) = failure {
            return Err(e.into());
        }
        dets.push(jac.determinant());
    }
    let expected = (-stepper.modal().damping_trace() * h).exp();
    let scale = dets.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
    let mut spread: f64 = 0.0;
    for a in &dets {
        for b in &dets {
            spread = spread.max((a - b).abs());
        }
    }
    let max_rel_error = dets
        .iter()
        .fold(0.0_f64, |a, d| a.max((d - expected).abs() / expected));
    Ok(DeterminantReport {
        dets,
        max_rel_spread: spread / scale,
        expected,
        max_rel_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BridgeReport {
    pub step_grid: Vec<f64>,
    /// RMS energy-norm distance between the original and the bridge dynamics.
    pub original_vs_bridge: Vec<f64>,
    /// RMS energy-norm distance between the bridge dynamics and one SIM1 step.
    pub bridge_vs_sim: Vec<f64>,
    pub slope_original_vs_bridge: LinearFit,
    pub slope_bridge_vs_sim: LinearFit,
    pub fine_step: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// One-step comparison of (a) the original dynamics (fine reference), (b) the
/// bridge dynamics with the soft force frozen at `q_0`, solved exactly, and (c) a
/// SIM1 step, all driven by the same Brownian path.
pub fn bridge_local_error_study(
    sys: &CheckedSystem,
    initial: &State,
    step_grid: &[f64],
    n_paths: usize,
    seed: u64,
    fine_target: f64,
) -> Result<BridgeReport, DiagnosticsError> {
    if step_grid.len() < 2 || step_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DiagnosticsError::InvalidInput(
            "step grid must be strictly decreasing with at least two entries".into(),
        ));
    }
    let (unit, transform) = mass_weighted_form(sys)?;
    let x0 = transform.to_weighted(initial);
    let modal = modal_decompose(&unit)?;
    let ctx = EnergyNormContext::from_modal(&modal);
    let min_h = step_grid[step_grid.len() - 1];
    let fine_h = nested_fine_step(min_h, fine_target);
    let stochastic = !unit.is_deterministic();
    let n_paths = if stochastic { n_paths.max(1) } else { 1 };
    let d = unit.dim();
    let r = unit.noise_dim();
    let f0 = unit.force_vec(&x0.q);

    struct PerStep {
        h: f64,
        n: usize,
        bridge_q: DVector<f64>,
        bridge_p: DVector<f64>,
        table: CoupledKickTable,
        sim: Stepper,
    }
    let mut per_step = Vec::new();
    for &h in step_grid {
        let n = multiple_of(h, fine_h)?;
        let prop = assemble_propagator(&modal, h);
        let (i12, i22) = propagator_integral(&modal, h)?;
        let (bq, bp) = prop.apply(&x0.q, &x0.p);
        let mode = if stochastic {
            NoiseMode::PathCoupled { fine_h }
        } else {
            NoiseMode::None
        };
        per_step.push(PerStep {
            h,
            n,
            bridge_q: bq + &i12 * &f0,
            bridge_p: bp + &i22 * &f0,
            table: CoupledKickTable::new(&modal, &unit.sigma, h, n),
            sim: Stepper::new(&unit, StepPlan::new(Method::Sim1Langevin, h, mode))?,
        });
    }
    let reference = Stepper::new(
        &unit,
        if stochastic {
            StepPlan::new(Method::FineEulerMaruyama, fine_h, NoiseMode::PathCoupled { fine_h })
        } else {
            StepPlan::deterministic(Method::FineSymplecticEuler, fine_h)
        },
    )?;
    let opts = IntegrateOptions::default();
    let max_h = step_grid[0];

    let results: Vec<Result<Vec<(f64, f64)>, DiagnosticsError>> = map_paths(n_paths, |i| {
        let mut stream = PathStream::new(seed, i as u64);
        let grid = brownian_grid(&mut stream, fine_h, max_h, r)?;
        let mut mq = DVector::zeros(d);
        let mut mp = DVector::zeros(d);
        let mut kq = DVector::zeros(d);
        let mut kp = DVector::zeros(d);
        per_step
            .iter()
            .map(|ps| {
                let window = grid.window(0, ps.n);
                let noise = |g| if stochastic { Noise::Grid(g) } else { Noise::None };
                let sub = crate::noise::BrownianGrid {
                    h: fine_h,
                    dim: r,
                    increments: window.to_vec(),
                };
                let a = integrate(&reference, &x0, ps.h, noise(&sub), &mut (), &opts)?.state;
                let c = integrate(&ps.sim, &x0, ps.h, noise(&sub), &mut (), &opts)?.state;
                let (mut bq, mut bp) = (ps.bridge_q.clone(), ps.bridge_p.clone());
                if stochastic {
                    ps.table.kick_into(window, &mut mq, &mut mp, &mut kq, &mut kp);
                    bq += &kq;
                    bp += &kp;
                }
                let ab = ctx.norm(&(&a.q - &bq), &(&a.p - &bp));
                let bc = ctx.norm(&(&bq - &c.q), &(&bp - &c.p));
                Ok((ab * ab, bc * bc))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut ab = Vec::new();
    let mut bc = Vec::new();
    for k in 0..step_grid.len() {
        let sa: Vec<f64> = results.iter().map(|v| v[k].0).collect();
        let sb: Vec<f64> = results.iter().map(|v| v[k].1).collect();
        ab.push(rms_with_jackknife(&sa).0);
        bc.push(rms_with_jackknife(&sb).0);
    }
    Ok(BridgeReport {
        step_grid: step_grid.to_vec(),
        slope_original_vs_bridge: fit_order(step_grid, &ab),
        slope_bridge_vs_sim: fit_order(step_grid, &bc),
        original_vs_bridge: ab,
        bridge_vs_sim: bc,
        fine_step: fine_h,
        n_paths,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySample {
    pub h: f64,
    pub stable: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub samples: Vec<StabilitySample>,
    /// Maximal runs of consecutive unstable samples, as `[first, last]`.
    pub unstable_intervals: Vec<(f64, f64)>,
}

/// Runs `method` at every step in `steps` (ascending) and classifies each as
/// stable when every path reaches `t_end` without blowing up.
pub fn stability_scan(
    sys: &CheckedSystem,
    method: Method,
    initial: &State,
    steps: &[f64],
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> Result<StabilityReport, DiagnosticsError> {
    if steps.iter().any(|&h| !(h > 0.0)) {
        return Err(DiagnosticsError::InvalidInput("steps must be positive".into()));
    }
    let stochastic = !sys.is_deterministic();
    let n_paths = if stochastic { n_paths.max(1) } else { 1 };
    let opts = IntegrateOptions::default();
    let mut samples = Vec::with_capacity(steps.len());
    for &h in steps {
        let mode = if stochastic {
            NoiseMode::ExactSample
        } else {
            NoiseMode::None
        };
        let stepper = Stepper::new(sys, StepPlan::new(method, h, mode))?;
        let outcomes = map_paths(n_paths, |i| {
            let mut stream = PathStream::new(seed, i as u64);
            let noise = if stepper.is_noisy() {
                Noise::Stream(&mut stream)
            } else {
                Noise::None
            };
            integrate(&stepper, initial, t_end, noise, &mut (), &opts).err()
        });
        let detail = outcomes.into_iter().flatten().next().map(|e| e.to_string());
        samples.push(StabilitySample {
            h,
            stable: detail.is_none(),
            detail,
        });
    }
    let mut intervals = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for s in &samples {
        match (s.stable, open) {
            (false, None) => open = Some((s.h, s.h)),
            (false, Some((lo, _))) => open = Some((lo, s.h)),
            (true, Some(iv)) => {
                intervals.push(iv);
                open = None;
            }
            (true, None) => {}
        }
    }
    if let Some(iv) = open {
        intervals.push(iv);
    }
    Ok(StabilityReport {
        samples,
        unstable_intervals: intervals,
    })
}

/// Evenly spaced values `lo, .., hi` (inclusive).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
