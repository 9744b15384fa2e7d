// SPDX-License-Identifier: Apache-2.0

//! Stiff Langevin systems
//!
//! ```text
//! M dq = p dt
//! dp   = F(q) dt - eps^-1 K q dt - c p dt + sigma dW
//! ```
//!
//! and their reduction to unit mass. Everything downstream of [`mass_weighted_form`]
//! assumes `M = I`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_diagonal, sorted_symmetric_eigen, spectral_norm, symmetric_function};

/// Soft force `q -> F(q)`, written into the output slice.
pub type ForceFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Soft potential `q -> V(q)`, used for energy diagnostics only.
pub type PotentialFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Default relative tolerance on `||Kc - cK||_2 / (||K||_2 ||c||_2)`.
pub const DEFAULT_COMMUTE_TOL: f64 = 1e-10;

/// Eigenvalues of `K` below this fraction of the largest one are zero-frequency modes.
pub const FREE_MODE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixName {
    Mass,
    Stiffness,
    Damping,
    Sigma,
}

impl fmt::Display for MatrixName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MatrixName::Mass => "mass matrix M",
            MatrixName::Stiffness => "stiffness matrix K",
            MatrixName::Damping => "damping matrix c",
            MatrixName::Sigma => "noise amplitude sigma",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{matrix} is not symmetric positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotSpd { matrix: MatrixName, min_eigenvalue: f64 },
    #[error("{matrix} is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { matrix: MatrixName, min_eigenvalue: f64 },
    #[error("{matrix} is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { matrix: MatrixName, asymmetry: f64 },
    #[error("stiffness and damping do not commute: relative defect {defect:e} exceeds {tolerance:e}")]
    CommutationViolation { defect: f64, tolerance: f64 },
    #[error("{matrix} has shape {rows}x{cols}, expected {expected} rows")]
    DimensionMismatch {
        matrix: MatrixName,
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("stiffness scale eps must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("unknown soft force '{0}'")]
    UnknownForce(String),
    #[error("invalid system document: {0}")]
    Document(String),
}

/// Phase-space point `(q, p)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    pub t: f64,
}

impl State {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have equal length");
        State { q, p, t: 0.0 }
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Self {
        State::new(DVector::from_column_slice(q), DVector::from_column_slice(p))
    }

    pub fn zeros(dim: usize) -> Self {
        State::new(DVector::zeros(dim), DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }

    /// `||(q, p)||_2`
    pub fn norm(&self) -> f64 {
        (self.q.norm_squared() + self.p.norm_squared()).sqrt()
    }

    /// Stacked `(q, p)` vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let d = self.dim();
        DVector::from_iterator(2 * d, self.q.iter().chain(self.p.iter()).copied())
    }

    pub fn from_vector(x: &DVector<f64>, t: f64) -> Self {
        let d = x.len() / 2;
        State {
            q: x.rows(0, d).into_owned(),
            p: x.rows(d, d).into_owned(),
            t,
        }
    }
}

/// A stiff Langevin system. Construct with [`StiffSystem::new`] and the `with_*`
/// builders, then check it with [`validate_system`].
#[derive(Clone)]
pub struct StiffSystem {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub eps: f64,
    pub damping: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub soft_force: ForceFn,
    pub soft_potential: Option<PotentialFn>,
    pub lipschitz: Option<f64>,
    /// Allow a positive semi-definite `K`; zero eigenvalues become free modes.
    pub free_modes: bool,
}

impl fmt::Debug for StiffSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StiffSystem")
            .field("mass", &self.mass)
            .field("stiffness", &self.stiffness)
            .field("eps", &self.eps)
            .field("damping", &self.damping)
            .field("sigma", &self.sigma)
            .field("soft_potential", &self.soft_potential.is_some())
            .field("lipschitz", &self.lipschitz)
            .field("free_modes", &self.free_modes)
            .finish()
    }
}

impl StiffSystem {
    /// Unit mass, no damping, no noise.
    pub fn new(stiffness: DMatrix<f64>, eps: f64, soft_force: ForceFn) -> Self {
        let d = stiffness.nrows();
        StiffSystem {
            mass: DMatrix::identity(d, d),
            stiffness,
            eps,
            damping: DMatrix::zeros(d, d),
            sigma: DMatrix::zeros(d, d),
            soft_force,
            soft_potential: None,
            lipschitz: None,
            free_modes: false,
        }
    }

    pub fn with_mass(mut self, mass: DMatrix<f64>) -> Self {
        self.mass = mass;
        self
    }

    pub fn with_damping(mut self, damping: DMatrix<f64>) -> Self {
        self.damping = damping;
        self
    }

    /// Scalar damping `c I`.
    pub fn with_scalar_damping(self, c: f64) -> Self {
        let d = self.dim();
        self.with_damping(DMatrix::identity(d, d) * c)
    }

    pub fn with_sigma(mut self, sigma: DMatrix<f64>) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_scalar_sigma(self, sigma: f64) -> Self {
        let d = self.dim();
        self.with_sigma(DMatrix::identity(d, d) * sigma)
    }

    pub fn with_potential(mut self, potential: PotentialFn) -> Self {
        self.soft_potential = Some(potential);
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn with_free_modes(mut self, allow: bool) -> Self {
        self.free_modes = allow;
        self
    }

    pub fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    /// Number of independent Brownian components (columns of sigma).
    pub fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn is_unit_mass(&self) -> bool {
        self.mass == DMatrix::identity(self.dim(), self.dim())
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&v| v == 0.0)
    }

    pub fn is_undamped(&self) -> bool {
        self.damping.iter().all(|&v| v == 0.0)
    }

    pub fn force(&self, q: &[f64], out: &mut [f64]) {
        (self.soft_force)(q, out)
    }

    pub fn force_vec(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(q.len());
        self.force(q.as_slice(), out.as_mut_slice());
        out
    }
}

/// A system that passed [`validate_system`]. Immutable and cheap to share.
#[derive(Clone, Debug)]
pub struct CheckedSystem {
    system: StiffSystem,
    commutation_defect: f64,
}

impl CheckedSystem {
    pub fn system(&self) -> &StiffSystem {
        &self.system
    }

    /// Measured `||Kc - cK||_2 / (||K||_2 ||c||_2)`, taken in the mass-weighted frame
    /// when that is the larger of the two.
    pub fn commutation_defect(&self) -> f64 {
        self.commutation_defect
    }

    pub fn into_inner(self) -> StiffSystem {
        self.system
    }
}

impl std::ops::Deref for CheckedSystem {
    type Target = StiffSystem;
    fn deref(&self) -> &StiffSystem {
        &self.system
    }
}

fn check_square(m: &DMatrix<f64>, name: MatrixName, d: usize) -> Result<(), ModelError> {
    if m.nrows() != d || m.ncols() != d {
        return Err(ModelError::DimensionMismatch {
            matrix: name,
            rows: m.nrows(),
            cols: m.ncols(),
            expected: d,
        });
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>, name: MatrixName) -> Result<(), ModelError> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let asymmetry = (m - m.transpose()).norm();
    if asymmetry > 1e-12 * scale {
        return Err(ModelError::NotSymmetric {
            matrix: name,
            asymmetry,
        });
    }
    Ok(())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> (f64, f64) {
    let (values, _) = sorted_symmetric_eigen(m);
    let min = values[0];
    let max_abs = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (min, max_abs)
}

fn relative_commutator(k: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let denom = spectral_norm(k) * spectral_norm(c);
    if denom == 0.0 {
        return 0.0;
    }
    spectral_norm(&(k * c - c * k)) / denom
}

fn sqrt_and_inv_sqrt(mass: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    if is_diagonal(mass) {
        let d = mass.nrows();
        let mut s = DMatrix::zeros(d, d);
        let mut si = DMatrix::zeros(d, d);
        for i in 0..d {
            s[(i, i)] = mass[(i, i)].sqrt();
            si[(i, i)] = 1.0 / mass[(i, i)].sqrt();
        }
        (s, si)
    } else {
        (
            symmetric_function(mass, f64::sqrt),
            symmetric_function(mass, |v| 1.0 / v.sqrt()),
        )
    }
}

/// Checks every structural requirement on the system: square shapes, SPD mass,
/// SPD (or PSD with free modes) stiffness, PSD damping, and commutation of `K` and
/// `c` both as given and in the mass-weighted frame.
pub fn validate_system(sys: StiffSystem, tol_commute: f64) -> Result<CheckedSystem, ModelError> {
    let d = sys.dim();
    if !(sys.eps.is_finite() && sys.eps > 0.0) {
        return Err(ModelError::InvalidScale(sys.eps));
    }
    check_square(&sys.stiffness, MatrixName::Stiffness, d)?;
    check_square(&sys.mass, MatrixName::Mass, d)?;
    check_square(&sys.damping, MatrixName::Damping, d)?;
    if sys.sigma.nrows() != d {
        return Err(ModelError::DimensionMismatch {
            matrix: MatrixName::Sigma,
            rows: sys.sigma.nrows(),
            cols: sys.sigma.ncols(),
            expected: d,
        });
    }

    check_symmetric(&sys.mass, MatrixName::Mass)?;
    let (m_min, _) = min_eigenvalue(&sys.mass);
    if m_min <= 0.0 {
        return Err(ModelError::NotSpd {
            matrix: MatrixName::Mass,
            min_eigenvalue: m_min,
        });
    }

    check_symmetric(&sys.stiffness, MatrixName::Stiffness)?;
    let (k_min, k_max) = min_eigenvalue(&sys.stiffness);
    let zero_band = FREE_MODE_TOL * k_max.max(f64::MIN_POSITIVE);
    if sys.free_modes {
        if k_min < -zero_band || k_max == 0.0 {
            return Err(ModelError::NotPsd {
                matrix: MatrixName::Stiffness,
                min_eigenvalue: k_min,
            });
        }
    } else if k_min <= zero_band {
        return Err(ModelError::NotSpd {
            matrix: MatrixName::Stiffness,
            min_eigenvalue: k_min,
        });
    }

    check_symmetric(&sys.damping, MatrixName::Damping)?;
    let mut defect = relative_commutator(&sys.stiffness, &sys.damping);
    if !sys.is_unit_mass() {
        let (_, inv_sqrt) = sqrt_and_inv_sqrt(&sys.mass);
        let kw = &inv_sqrt * &sys.stiffness * &inv_sqrt;
        let cw = &inv_sqrt * &sys.damping * &inv_sqrt;
        defect = defect.max(relative_commutator(&kw, &cw));
    }
    if defect > tol_commute {
        return Err(ModelError::CommutationViolation {
            defect,
            tolerance: tol_commute,
        });
    }

    let (c_min, c_max) = min_eigenvalue(&sys.damping);
    if c_min < -1e-12 * c_max.max(1.0) {
        return Err(ModelError::NotPsd {
            matrix: MatrixName::Damping,
            min_eigenvalue: c_min,
        });
    }

    Ok(CheckedSystem {
        system: sys,
        commutation_defect: defect,
    })
}

/// Maps states between original coordinates and the unit-mass frame
/// `q~ = M^{1/2} q`, `p~ = M^{-1/2} p`.
#[derive(Debug, Clone)]
pub struct Transform {
    sqrt_mass: DMatrix<f64>,
    inv_sqrt_mass: DMatrix<f64>,
    identity: bool,
}

impl Transform {
    pub fn identity(d: usize) -> Self {
        Transform {
            sqrt_mass: DMatrix::identity(d, d),
            inv_sqrt_mass: DMatrix::identity(d, d),
            identity: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn to_weighted(&self, s: &State) -> State {
        if self.identity {
            return s.clone();
        }
        State {
            q: &self.sqrt_mass * &s.q,
            p: &self.inv_sqrt_mass * &s.p,
            t: s.t,
        }
    }

    pub fn from_weighted(&self, s: &State) -> State {
        if self.identity {
            return s.clone();
        }
        State {
            q: &self.inv_sqrt_mass * &s.q,
            p: &self.sqrt_mass * &s.p,
            t: s.t,
        }
    }
}

/// Reduces a validated system to unit mass. The returned system carries
/// `K~ = M^{-1/2} K M^{-1/2}`, `c~ = M^{-1/2} c M^{-1/2}`, `sigma~ = M^{-1/2} sigma`
/// and `F~(q~) = M^{-1/2} F(M^{-1/2} q~)`.
pub fn mass_weighted_form(sys: &CheckedSystem) -> Result<(CheckedSystem, Transform), ModelError> {
    let d = sys.dim();
    if sys.is_unit_mass() {
        return Ok((sys.clone(), Transform::identity(d)));
    }
    let (sqrt_mass, inv_sqrt) = sqrt_and_inv_sqrt(&sys.mass);
    let stiffness = crate::linalg::symmetrize(&(&inv_sqrt * &sys.stiffness * &inv_sqrt));
    let damping = crate::linalg::symmetrize(&(&inv_sqrt * &sys.damping * &inv_sqrt));
    let sigma = &inv_sqrt * &sys.sigma;

    let force = sys.soft_force.clone();
    let w = inv_sqrt.clone();
    let soft_force: ForceFn = Arc::new(move |q: &[f64], out: &mut [f64]| {
        let qv = &w * DVector::from_column_slice(q);
        let mut f = DVector::zeros(q.len());
        force(qv.as_slice(), f.as_mut_slice());
        let fw = &w * f;
        out.copy_from_slice(fw.as_slice());
    });
    let soft_potential = sys.soft_potential.clone().map(|v| {
        let w = inv_sqrt.clone();
        let wrapped: PotentialFn = Arc::new(move |q: &[f64]| {
            let qv = &w * DVector::from_column_slice(q);
            v(qv.as_slice())
        });
        wrapped
    });

    let weighted = StiffSystem {
        mass: DMatrix::identity(d, d),
        stiffness,
        eps: sys.eps,
        damping,
        sigma,
        soft_force,
        soft_potential,
        lipschitz: sys.lipschitz,
        free_modes: sys.free_modes,
    };
    let checked = validate_system(weighted, DEFAULT_COMMUTE_TOL.max(sys.commutation_defect))?;
    Ok((
        checked,
        Transform {
            sqrt_mass,
            inv_sqrt_mass: inv_sqrt,
            identity: false,
        },
    ))
}

/// Soft force reference in a [`SystemDocument`]: a registered name plus parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ForceSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Serializable system definition. Matrices are row-major nested arrays; the soft
/// force is looked up by name since closures cannot be serialized.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemDocument {
    #[serde(default)]
    pub mass: Option<Vec<Vec<f64>>>,
    pub stiffness: Vec<Vec<f64>>,
    pub eps: f64,
    #[serde(default)]
    pub damping: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub soft_force: ForceSpec,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub free_modes: bool,
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(ModelError::Document("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(
        n,
        m,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

impl SystemDocument {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Document(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Document(e.to_string()))
    }

    /// Builds the system, resolving the soft force through `resolve`.
    pub fn into_system<R>(self, resolve: R) -> Result<StiffSystem, ModelError>
    where
        R: Fn(&ForceSpec, usize) -> Result<(ForceFn, Option<PotentialFn>), ModelError>,
    {
        let stiffness = matrix_from_rows(&self.stiffness)?;
        let d = stiffness.nrows();
        let (force, potential) = resolve(&self.soft_force, d)?;
        let mut sys = StiffSystem::new(stiffness, self.eps, force).with_free_modes(self.free_modes);
        if let Some(m) = &self.mass {
            sys = sys.with_mass(matrix_from_rows(m)?);
        }
        if let Some(c) = &self.damping {
            sys = sys.with_damping(matrix_from_rows(c)?);
        }
        if let Some(s) = &self.sigma {
            sys = sys.with_sigma(matrix_from_rows(s)?);
        }
        if let Some(v) = potential {
            sys = sys.with_potential(v);
        }
        if let Some(l) = self.lipschitz {
            sys = sys.with_lipschitz(l);
        }
        Ok(sys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_force() -> ForceFn {
        Arc::new(|_q: &[f64], out: &mut [f64]| out.fill(0.0))
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn scalar_damping_is_accepted() {
        let sys = StiffSystem::new(DMatrix::identity(2, 2), 1e-4, zero_force())
            .with_scalar_damping(0.1);
        let checked = validate_system(sys, DEFAULT_COMMUTE_TOL).unwrap();
        assert_eq!(checked.commutation_defect(), 0.0);
    }

    #[test]
    fn non_commuting_damping_is_rejected() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let sys = StiffSystem::new(diag(&[1.0, 4.0]), 1.0, zero_force()).with_damping(c);
        match validate_system(sys, DEFAULT_COMMUTE_TOL) {
            Err(ModelError::CommutationViolation { defect, .. }) => assert!(defect > 0.1),
            other => panic!("expected CommutationViolation, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_stiffness_is_rejected() {
        let sys = StiffSystem::new(diag(&[1.0, -1.0]), 1.0, zero_force());
        assert!(matches!(
            validate_system(sys, DEFAULT_COMMUTE_TOL),
            Err(ModelError::NotSpd {
                matrix: MatrixName::Stiffness,
                ..
            })
        ));
    }

    #[test]
    fn zero_frequency_needs_free_modes() {
        let k = diag(&[0.0, 1.0]);
        let strict = StiffSystem::new(k.clone(), 1.0, zero_force());
        assert!(matches!(
            validate_system(strict, DEFAULT_COMMUTE_TOL),
            Err(ModelError::NotSpd { .. })
        ));
        let relaxed = StiffSystem::new(k, 1.0, zero_force()).with_free_modes(true);
        assert!(validate_system(relaxed, DEFAULT_COMMUTE_TOL).is_ok());
    }

    #[test]
    fn negative_damping_is_rejected() {
        let sys = StiffSystem::new(DMatrix::identity(1, 1), 1.0, zero_force()).with_scalar_damping(-0.5);
        assert!(matches!(
            validate_system(sys, DEFAULT_COMMUTE_TOL),
            Err(ModelError::NotPsd {
                matrix: MatrixName::Damping,
                ..
            })
        ));
    }

    #[test]
    fn bad_mass_is_rejected() {
        let sys = StiffSystem::new(DMatrix::identity(1, 1), 1.0, zero_force()).with_mass(diag(&[0.0]));
        assert!(matches!(
            validate_system(sys, DEFAULT_COMMUTE_TOL),
            Err(ModelError::NotSpd {
                matrix: MatrixName::Mass,
                ..
            })
        ));
    }

    #[test]
    fn unit_mass_gives_identity_transform() {
        let sys = validate_system(
            StiffSystem::new(DMatrix::identity(2, 2), 1.0, zero_force()),
            DEFAULT_COMMUTE_TOL,
        )
        .unwrap();
        let (w, t) = mass_weighted_form(&sys).unwrap();
        assert!(t.is_identity());
        assert_eq!(w.stiffness, sys.stiffness);
    }

    #[test]
    fn scalar_mass_scales_stiffness() {
        let sys = StiffSystem::new(diag(&[1.0]), 1.0, zero_force()).with_mass(diag(&[4.0]));
        let (w, _) = mass_weighted_form(&validate_system(sys, DEFAULT_COMMUTE_TOL).unwrap()).unwrap();
        assert!((w.stiffness[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn diagonal_mass_scales_componentwise() {
        let sys = StiffSystem::new(diag(&[8.0, 27.0]), 1.0, zero_force()).with_mass(diag(&[2.0, 3.0]));
        let (w, _) = mass_weighted_form(&validate_system(sys, DEFAULT_COMMUTE_TOL).unwrap()).unwrap();
        assert!((&w.stiffness - diag(&[4.0, 9.0])).norm() < 1e-14);
    }

    #[test]
    fn weighted_force_is_conjugated() {
        let f: ForceFn = Arc::new(|q: &[f64], out: &mut [f64]| {
            out[0] = q[0] * q[0];
        });
        let sys = StiffSystem::new(diag(&[1.0]), 1.0, f).with_mass(diag(&[4.0]));
        let (w, _) = mass_weighted_form(&validate_system(sys, DEFAULT_COMMUTE_TOL).unwrap()).unwrap();
        let mut out = [0.0];
        // q = q~ / 2 = 1.5, F = 2.25, F~ = F / 2
        w.force(&[3.0], &mut out);
        assert!((out[0] - 1.125).abs() < 1e-15);
    }

    #[test]
    fn document_roundtrip_json_and_toml() {
        let json = r#"{
            "stiffness": [[1.0, 0.0], [0.0, 4.0]],
            "eps": 0.01,
            "damping": [[0.1, 0.0], [0.0, 0.1]],
            "soft_force": {"name": "zero"}
        }"#;
        let doc = SystemDocument::from_json(json).unwrap();
        let toml_text = toml::to_string(&doc).unwrap();
        assert_eq!(SystemDocument::from_toml(&toml_text).unwrap(), doc);
        let sys = doc
            .into_system(|spec, _| {
                assert_eq!(spec.name, "zero");
                Ok((zero_force(), None))
            })
            .unwrap();
        assert_eq!(sys.stiffness[(1, 1)], 4.0);
        assert!(validate_system(sys, DEFAULT_COMMUTE_TOL).is_ok());
    }
}
