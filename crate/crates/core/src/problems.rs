// SPDX-License-Identifier: Apache-2.0

//! Benchmark problems: a wall–stiff spring–mass–soft spring–mass chain under
//! Langevin noise, the Fermi–Pasta–Ulam chain of alternating stiff and soft
//! springs, and a strictly positive definite harmonic variant of the first.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_system, CheckedSystem, ForceFn, ForceSpec, ModelError, PotentialFn, State, StiffSystem,
    DEFAULT_COMMUTE_TOL,
};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem configuration: {0}")]
    ConfigInvalid(String),
    #[error("expected vectors of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn check(cond: bool, msg: &str) -> Result<(), ProblemError> {
    if cond {
        Ok(())
    } else {
        Err(ProblemError::ConfigInvalid(msg.to_string()))
    }
}

/// Stiff spring on `x`, quartic soft spring between `x` and `y`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TwoSpringConfig {
    pub omega: f64,
    pub c: f64,
    pub beta: f64,
    /// Defaults to `0.8 / omega`.
    pub x0: Option<f64>,
    /// Defaults to `1.1 + x0`.
    pub y0: Option<f64>,
    pub px0: f64,
    pub py0: f64,
}

impl Default for TwoSpringConfig {
    fn default() -> Self {
        TwoSpringConfig {
            omega: 100.0,
            c: 0.1,
            beta: 10.0,
            x0: None,
            y0: None,
            px0: 0.0,
            py0: 0.0,
        }
    }
}

impl TwoSpringConfig {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    /// `sqrt(2c / beta)`
    pub fn sigma(&self) -> f64 {
        (2.0 * self.c / self.beta).sqrt()
    }

    pub fn initial_state(&self) -> State {
        let x = self.x0.unwrap_or(0.8 / self.omega);
        let y = self.y0.unwrap_or(1.1 + x);
        State::from_slices(&[x, y], &[self.px0, self.py0])
    }

    fn validate(&self) -> Result<(), ProblemError> {
        check(self.omega > 0.0 && self.omega.is_finite(), "omega must be positive")?;
        check(self.c >= 0.0, "friction c must be nonnegative")?;
        check(self.beta > 0.0, "beta must be positive")
    }
}

/// `F(x, y) = (-(x - y)^3, (x - y)^3)`
pub fn quartic_coupling_force() -> ForceFn {
    Arc::new(|q: &[f64], out: &mut [f64]| {
        let r = q[0] - q[1];
        let f = r * r * r;
        out[0] = -f;
        out[1] = f;
    })
}

/// `V(x, y) = (y - x)^4 / 4`
pub fn quartic_coupling_potential() -> PotentialFn {
    Arc::new(|q: &[f64]| 0.25 * (q[1] - q[0]).powi(4))
}

/// `F = -k (x - y) (1, -1)`
pub fn quadratic_coupling_force(k: f64) -> ForceFn {
    Arc::new(move |q: &[f64], out: &mut [f64]| {
        let f = k * (q[0] - q[1]);
        out[0] = -f;
        out[1] = f;
    })
}

pub fn quadratic_coupling_potential(k: f64) -> PotentialFn {
    Arc::new(move |q: &[f64]| 0.5 * k * (q[1] - q[0]).powi(2))
}

/// `eps^-1 K = diag(omega^2, 0)` with `eps = omega^-2`; `y` is a free mode.
pub fn build_two_spring(cfg: &TwoSpringConfig) -> Result<CheckedSystem, ProblemError> {
    cfg.validate()?;
    let sys = StiffSystem::new(diag(&[1.0, 0.0]), 1.0 / (cfg.omega * cfg.omega), quartic_coupling_force())
        .with_free_modes(true)
        .with_scalar_damping(cfg.c)
        .with_scalar_sigma(cfg.sigma())
        .with_potential(quartic_coupling_potential());
    Ok(validate_system(sys, DEFAULT_COMMUTE_TOL)?)
}

/// Soft coupling of the harmonic test problem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Coupling {
    Quartic,
    Quadratic { k: f64 },
}

/// Two-spring geometry with an extra soft spring tying `y` to the wall, so the
/// stiff part is positive definite: `eps^-1 K = diag(omega^2, omega_slow^2)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonicConfig {
    pub omega: f64,
    pub omega_slow: f64,
    pub coupling: Coupling,
    pub c: f64,
    pub beta: f64,
    pub x0: Option<f64>,
    pub y0: Option<f64>,
    pub px0: f64,
    pub py0: f64,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        HarmonicConfig {
            omega: 100.0,
            omega_slow: 1.0,
            coupling: Coupling::Quartic,
            c: 0.0,
            beta: 10.0,
            x0: None,
            y0: None,
            px0: 0.0,
            py0: 0.0,
        }
    }
}

impl HarmonicConfig {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn sigma(&self) -> f64 {
        (2.0 * self.c / self.beta).sqrt()
    }

    pub fn initial_state(&self) -> State {
        let x = self.x0.unwrap_or(0.8 / self.omega);
        let y = self.y0.unwrap_or(1.1 + x);
        State::from_slices(&[x, y], &[self.px0, self.py0])
    }
}

pub fn build_harmonic(cfg: &HarmonicConfig) -> Result<CheckedSystem, ProblemError> {
    check(cfg.omega > 0.0 && cfg.omega.is_finite(), "omega must be positive")?;
    check(cfg.omega_slow > 0.0, "omega_slow must be positive")?;
    check(cfg.c >= 0.0, "friction c must be nonnegative")?;
    check(cfg.beta > 0.0, "beta must be positive")?;
    let eps = 1.0 / (cfg.omega * cfg.omega);
    let (force, potential) = match cfg.coupling {
        Coupling::Quartic => (quartic_coupling_force(), quartic_coupling_potential()),
        Coupling::Quadratic { k } => (quadratic_coupling_force(k), quadratic_coupling_potential(k)),
    };
    let k_slow = eps * cfg.omega_slow * cfg.omega_slow;
    let mut sys = StiffSystem::new(diag(&[1.0, k_slow]), eps, force)
        .with_scalar_damping(cfg.c)
        .with_potential(potential);
    if cfg.c > 0.0 {
        sys = sys.with_scalar_sigma(cfg.sigma());
    }
    Ok(validate_system(sys, DEFAULT_COMMUTE_TOL)?)
}

/// Fermi–Pasta–Ulam chain in the coordinates that diagonalize the stiff springs:
/// `x_1..x_m` are spring midpoints, `x_{m+1}..x_{2m}` spring expansions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FpuConfig {
    pub m: usize,
    pub omega: f64,
    /// Defaults to `[1, 0, .., 0, 1/omega, 0, .., 0]`.
    pub x0: Option<Vec<f64>>,
    /// Defaults to zero.
    pub y0: Option<Vec<f64>>,
}

impl Default for FpuConfig {
    fn default() -> Self {
        FpuConfig {
            m: 3,
            omega: 200.0,
            x0: None,
            y0: None,
        }
    }
}

impl FpuConfig {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn dim(&self) -> usize {
        2 * self.m
    }

    pub fn initial_state(&self) -> State {
        let d = self.dim();
        let x = self.x0.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; d];
            v[0] = 1.0;
            v[self.m] = 1.0 / self.omega;
            v
        });
        let y = self.y0.clone().unwrap_or_else(|| vec![0.0; d]);
        State::from_slices(&x, &y)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        check(self.m >= 1, "m must be at least 1")?;
        check(self.omega > 0.0 && self.omega.is_finite(), "omega must be positive")?;
        for v in [&self.x0, &self.y0].into_iter().flatten() {
            if v.len() != self.dim() {
                return Err(ProblemError::DimensionMismatch {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Soft spring elongations `a_0..a_m` of the chain in transformed coordinates.
fn fpu_elongations(x: &[f64], m: usize, out: &mut [f64]) {
    out[0] = x[0] - x[m];
    for i in 1..m {
        out[i] = x[i] - x[m + i] - x[i - 1] - x[m + i - 1];
    }
    out[m] = x[m - 1] + x[2 * m - 1];
}

/// `V_s(x) = 1/4 sum a_i^4`
pub fn fpu_soft_potential(x: &[f64]) -> f64 {
    let m = x.len() / 2;
    let mut a = vec![0.0; m + 1];
    fpu_elongations(x, m, &mut a);
    0.25 * a.iter().map(|v| v.powi(4)).sum::<f64>()
}

/// `-grad V_s`
pub fn fpu_soft_force(x: &[f64], out: &mut [f64]) {
    let m = x.len() / 2;
    out.fill(0.0);
    let a0 = x[0] - x[m];
    let c0 = a0 * a0 * a0;
    out[0] -= c0;
    out[m] += c0;
    for i in 1..m {
        let a = x[i] - x[m + i] - x[i - 1] - x[m + i - 1];
        let c = a * a * a;
        out[i] -= c;
        out[m + i] += c;
        out[i - 1] += c;
        out[m + i - 1] += c;
    }
    let am = x[m - 1] + x[2 * m - 1];
    let cm = am * am * am;
    out[m - 1] -= cm;
    out[2 * m - 1] -= cm;
}

/// `eps^-1 K = omega^2 diag(0, .., 0, 1, .., 1)`; midpoints are free modes.
pub fn build_fpu(cfg: &FpuConfig) -> Result<CheckedSystem, ProblemError> {
    cfg.validate()?;
    let m = cfg.m;
    let k: Vec<f64> = (0..2 * m).map(|i| if i < m { 0.0 } else { 1.0 }).collect();
    let force: ForceFn = Arc::new(fpu_soft_force);
    let potential: PotentialFn = Arc::new(fpu_soft_potential);
    let sys = StiffSystem::new(diag(&k), 1.0 / (cfg.omega * cfg.omega), force)
        .with_potential(potential)
        .with_free_modes(true);
    Ok(validate_system(sys, DEFAULT_COMMUTE_TOL)?)
}

fn check_len(v: &DVector<f64>, m: usize) -> Result<(), ProblemError> {
    if v.len() != 2 * m {
        return Err(ProblemError::DimensionMismatch {
            expected: 2 * m,
            got: v.len(),
        });
    }
    Ok(())
}

fn to_transformed(q: &DVector<f64>, m: usize) -> DVector<f64> {
    let mut x = DVector::zeros(2 * m);
    for i in 0..m {
        let (lo, hi) = (q[2 * i], q[2 * i + 1]);
        x[i] = (hi + lo) * FRAC_1_SQRT_2;
        x[m + i] = (hi - lo) * FRAC_1_SQRT_2;
    }
    x
}

fn from_transformed(x: &DVector<f64>, m: usize) -> DVector<f64> {
    let mut q = DVector::zeros(2 * m);
    for i in 0..m {
        q[2 * i] = (x[i] - x[m + i]) * FRAC_1_SQRT_2;
        q[2 * i + 1] = (x[i] + x[m + i]) * FRAC_1_SQRT_2;
    }
    q
}

/// Chain coordinates `(q, p)` to `(x, y)`.
pub fn fpu_transform(
    q: &DVector<f64>,
    p: &DVector<f64>,
    m: usize,
) -> Result<(DVector<f64>, DVector<f64>), ProblemError> {
    check_len(q, m)?;
    check_len(p, m)?;
    Ok((to_transformed(q, m), to_transformed(p, m)))
}

/// `(x, y)` back to chain coordinates.
pub fn fpu_inverse_transform(
    x: &DVector<f64>,
    y: &DVector<f64>,
    m: usize,
) -> Result<(DVector<f64>, DVector<f64>), ProblemError> {
    check_len(x, m)?;
    check_len(y, m)?;
    Ok((from_transformed(x, m), from_transformed(y, m)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpuObservables {
    /// `x_{m+i}`
    pub expansions: Vec<f64>,
    /// `x_i`
    pub midpoints: Vec<f64>,
    /// `I_j = (y_{m+j}^2 + omega^2 x_{m+j}^2) / 2`
    pub spring_energies: Vec<f64>,
    pub total_stiff_energy: f64,
}

pub fn fpu_observables(state: &State, cfg: &FpuConfig) -> FpuObservables {
    let m = cfg.m;
    let w2 = cfg.omega * cfg.omega;
    let spring_energies: Vec<f64> = (0..m)
        .map(|j| 0.5 * (state.p[m + j].powi(2) + w2 * state.q[m + j].powi(2)))
        .collect();
    FpuObservables {
        expansions: state.q.rows(m, m).iter().copied().collect(),
        midpoints: state.q.rows(0, m).iter().copied().collect(),
        total_stiff_energy: spring_energies.iter().sum(),
        spring_energies,
    }
}

/// Which resonance a macro step is snapped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resonance {
    /// `sin(omega H) = 0`
    FullPeriod,
    /// `cos(omega H) = 0`
    QuarterPeriod,
}

/// Nearest `H` to `h` with `omega H = k pi` (full period, `k >= 1`) or
/// `omega H = (k + 1/2) pi` (quarter period, `k >= 0`).
pub fn snap_resonant(h: f64, omega: f64, kind: Resonance) -> f64 {
    let r = omega * h / PI;
    match kind {
        Resonance::FullPeriod => r.round().max(1.0) * PI / omega,
        Resonance::QuarterPeriod => ((r - 0.5).round().max(0.0) + 0.5) * PI / omega,
    }
}

fn param(spec: &ForceSpec, key: &str, default: f64) -> f64 {
    spec.params.get(key).copied().unwrap_or(default)
}

/// Soft-force registry used by system documents and run configs.
pub fn resolve_force(spec: &ForceSpec, d: usize) -> Result<(ForceFn, Option<PotentialFn>), ModelError> {
    let wrong_dim = |need: &str| ModelError::Document(format!("force '{}' needs {need}, got d = {d}", spec.name));
    match spec.name.as_str() {
        "zero" => {
            let f: ForceFn = Arc::new(|_q: &[f64], out: &mut [f64]| out.fill(0.0));
            let v: PotentialFn = Arc::new(|_q: &[f64]| 0.0);
            Ok((f, Some(v)))
        }
        "two-spring" => {
            if d != 2 {
                return Err(wrong_dim("d = 2"));
            }
            Ok((quartic_coupling_force(), Some(quartic_coupling_potential())))
        }
        "harmonic" => {
            if d != 2 {
                return Err(wrong_dim("d = 2"));
            }
            match spec.params.get("k") {
                Some(&k) => Ok((quadratic_coupling_force(k), Some(quadratic_coupling_potential(k)))),
                None => Ok((quartic_coupling_force(), Some(quartic_coupling_potential()))),
            }
        }
        "fpu" => {
            if d < 2 || !d.is_multiple_of(2) {
                return Err(wrong_dim("an even d >= 2"));
            }
            let f: ForceFn = Arc::new(fpu_soft_force);
            let v: PotentialFn = Arc::new(fpu_soft_potential);
            Ok((f, Some(v)))
        }
        "constant" => {
            let g = param(spec, "g", 0.0);
            let f: ForceFn = Arc::new(move |_q: &[f64], out: &mut [f64]| out.fill(g));
            let v: PotentialFn = Arc::new(move |q: &[f64]| -g * q.iter().sum::<f64>());
            Ok((f, Some(v)))
        }
        other => Err(ModelError::UnknownForce(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_spring_defaults() {
        let cfg = TwoSpringConfig::default();
        let sys = build_two_spring(&cfg).unwrap();
        assert!((sys.eps - 1e-4).abs() < 1e-18);
        let x0 = cfg.initial_state();
        assert!((x0.q[0] - 0.008).abs() < 1e-15);
        assert!((x0.q[1] - 1.108).abs() < 1e-15);
        assert!((cfg.sigma() - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn coupling_force_vanishes_at_equal_positions() {
        let mut out = [1.0, 1.0];
        quartic_coupling_force()(&[0.3, 0.3], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn fpu_force_vanishes_at_origin() {
        let mut out = vec![1.0; 6];
        fpu_soft_force(&[0.0; 6], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fpu_initial_stiff_energy() {
        let cfg = FpuConfig::default();
        let obs = fpu_observables(&cfg.initial_state(), &cfg);
        assert!((obs.spring_energies[0] - 0.5).abs() < 1e-12);
        assert_eq!(obs.spring_energies[1], 0.0);
        assert!((obs.total_stiff_energy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let q = DVector::from_vec(vec![0.1, -0.4, 0.7, 1.3, -0.2, 0.05]);
        let p = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (x, y) = fpu_transform(&q, &p, 3).unwrap();
        let (q2, p2) = fpu_inverse_transform(&x, &y, 3).unwrap();
        assert!((q - q2).norm() < 1e-14 && (p - p2).norm() < 1e-14);
        assert!(matches!(
            fpu_transform(&DVector::zeros(4), &DVector::zeros(4), 3),
            Err(ProblemError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn resonant_snapping() {
        let w = 100.0;
        let h = snap_resonant(0.1, w, Resonance::FullPeriod);
        assert!((w * h).sin().abs() < 1e-12);
        assert!((h - 3.0 * PI / w).abs() < 1e-15);
        let h = snap_resonant(0.1, w, Resonance::QuarterPeriod);
        assert!((w * h).cos().abs() < 1e-12);
        assert!((h - 3.5 * PI / w).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TwoSpringConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(matches!(build_two_spring(&bad), Err(ProblemError::ConfigInvalid(_))));
        let bad = FpuConfig {
            m: 0,
            ..Default::default()
        };
        assert!(matches!(build_fpu(&bad), Err(ProblemError::ConfigInvalid(_))));
    }

    #[test]
    fn harmonic_is_strictly_definite() {
        let sys = build_harmonic(&HarmonicConfig::default()).unwrap();
        assert!(!sys.free_modes);
        assert!((sys.stiffness[(1, 1)] / sys.eps - 1.0).abs() < 1e-12);
    }

    #[test]
    fn registry_resolves_names() {
        let spec = ForceSpec {
            name: "fpu".into(),
            params: Default::default(),
        };
        assert!(resolve_force(&spec, 6).is_ok());
        let spec = ForceSpec {
            name: "nope".into(),
            params: Default::default(),
        };
        assert!(matches!(resolve_force(&spec, 2), Err(ModelError::UnknownForce(_))));
    }
}
