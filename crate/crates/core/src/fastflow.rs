// SPDX-License-Identifier: Apache-2.0

//! Exact flow of the fast linear SDE
//!
//! ```text
//! dq = p dt
//! dp = -eps^-1 K q dt - c p dt + sigma dW
//! ```
//!
//! for a unit-mass system whose `K` and `c` commute. Both are diagonalized in a
//! shared orthonormal basis; each mode is then a scalar damped oscillator
//! `q'' + c_i q' + omega_i^2 q = 0` with a closed-form 2x2 flow. The additive noise
//! contributes a Gaussian kick whose covariance is integrated by adaptive
//! Gauss–Legendre quadrature.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{block2, off_diagonal_norm, psd_factor, sorted_symmetric_eigen, symmetrize};
use crate::model::{CheckedSystem, FREE_MODE_TOL};
use crate::quadrature::{integrate_adaptive, AdaptiveOptions, QuadratureError};

/// Half-width of the band `|zeta - 1| <= CRITICAL_BAND` treated as critical damping.
pub const CRITICAL_BAND: f64 = 1e-6;

/// Relative off-diagonal mass allowed after simultaneous diagonalization.
pub const DIAGONAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FastFlowError {
    #[error("fast-flow routines need a mass-weighted (unit mass) system")]
    NotMassWeighted,
    #[error("damping is not diagonal in any stiffness eigenbasis (relative off-diagonal norm {offdiag:e})")]
    SimultaneousDiagonalizationFailure { offdiag: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("Brownian increments span {total} but the step is {expected}")]
    PathMismatch { total: f64, expected: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Shared eigenbasis of `K~` and `c~` with per-mode frequencies and damping rates.
#[derive(Debug, Clone)]
pub struct ModalForm {
    /// Orthogonal `U` whose columns diagonalize both `K~` and `c~`.
    pub basis: DMatrix<f64>,
    /// `omega_i = sqrt(lambda_i(K~) / eps)`, zero for free modes.
    pub omega: Vec<f64>,
    /// `c_i`, the eigenvalues of `c~` in the same basis.
    pub damping: Vec<f64>,
    pub eps: f64,
}

impl ModalForm {
    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn zeta(&self, i: usize) -> f64 {
        damping_ratio(self.omega[i], self.damping[i])
    }

    pub fn omega_max(&self) -> f64 {
        self.omega.iter().fold(0.0_f64, |a, &w| a.max(w))
    }

    pub fn damping_max(&self) -> f64 {
        self.damping.iter().fold(0.0_f64, |a, &c| a.max(c))
    }

    /// `tr(c~)`
    pub fn damping_trace(&self) -> f64 {
        self.damping.iter().sum()
    }

    pub fn to_modal(&self, v: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(v)
    }

    pub fn from_modal(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * v
    }

    /// `U diag(values) U^T`
    pub fn assemble(&self, values: &[f64]) -> DMatrix<f64> {
        let mut scaled = self.basis.clone();
        for (j, v) in values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*v);
        }
        scaled * self.basis.transpose()
    }
}

/// `zeta = c / (2 omega)` for `q'' + c q' + omega^2 q = 0`.
pub fn damping_ratio(omega: f64, c: f64) -> f64 {
    if omega == 0.0 {
        if c == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        c / (2.0 * omega)
    }
}

/// Simultaneous diagonalization of the mass-weighted `K~` and `c~`.
///
/// Eigenvectors of `K~` are computed first; inside every numerically repeated
/// eigenvalue cluster the basis is rotated to diagonalize the projected damping.
pub fn modal_decompose(sys: &CheckedSystem) -> Result<ModalForm, FastFlowError> {
    if !sys.is_unit_mass() {
        return Err(FastFlowError::NotMassWeighted);
    }
    let d = sys.dim();
    let (values, mut basis) = sorted_symmetric_eigen(&sys.stiffness);
    let lambda_max = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cluster_tol = 1e-8 * lambda_max.max(f64::MIN_POSITIVE);
    let damping = symmetrize(&sys.damping);

    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && (values[end] - values[end - 1]).abs() <= cluster_tol {
            end += 1;
        }
        if end - start > 1 {
            let v = basis.columns(start, end - start).into_owned();
            let projected = v.transpose() * &damping * &v;
            let (_, w) = sorted_symmetric_eigen(&projected);
            basis.columns_mut(start, end - start).copy_from(&(v * w));
        }
        start = end;
    }

    let c_modal = basis.transpose() * &damping * &basis;
    let c_scale = damping.norm();
    if c_scale > 0.0 {
        let offdiag = off_diagonal_norm(&c_modal) / c_scale;
        if offdiag > DIAGONAL_TOL {
            return Err(FastFlowError::SimultaneousDiagonalizationFailure { offdiag });
        }
    }

    let k_modal = basis.transpose() * &sys.stiffness * &basis;
    let zero_band = FREE_MODE_TOL * lambda_max;
    let omega = (0..d)
        .map(|i| {
            let lambda = k_modal[(i, i)];
            if lambda <= zero_band {
                0.0
            } else {
                (lambda / sys.eps).sqrt()
            }
        })
        .collect();
    let damping = (0..d).map(|i| c_modal[(i, i)].max(0.0)).collect();

    Ok(ModalForm {
        basis,
        omega,
        damping,
        eps: sys.eps,
    })
}

/// Entries of the 2x2 flow of `q'' + c q' + omega^2 q = 0` over time `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarBlocks {
    pub b11: f64,
    pub b12: f64,
    pub b21: f64,
    pub b22: f64,
}

impl ScalarBlocks {
    pub const IDENTITY: ScalarBlocks = ScalarBlocks {
        b11: 1.0,
        b12: 0.0,
        b21: 0.0,
        b22: 1.0,
    };

    pub fn determinant(&self) -> f64 {
        self.b11 * self.b22 - self.b12 * self.b21
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DampingRegime {
    Underdamped,
    Critical,
    Overdamped,
    /// `omega = 0`: a free particle, damped when `c > 0`.
    Free,
}

pub fn damping_regime(omega: f64, c: f64) -> DampingRegime {
    if omega == 0.0 {
        return DampingRegime::Free;
    }
    let zeta = damping_ratio(omega, c);
    if (zeta - 1.0).abs() <= CRITICAL_BAND {
        DampingRegime::Critical
    } else if zeta < 1.0 {
        DampingRegime::Underdamped
    } else {
        DampingRegime::Overdamped
    }
}

/// Closed-form flow of the scalar damped oscillator.
///
/// With `a = c/2`, the under- and overdamped branches use the damped frequency
/// `sqrt(|omega^2 - a^2|)` in trigonometric and hyperbolic form respectively. The
/// critical branch is the power series in `(a^2 - omega^2) s^2` whose leading term is
/// the textbook `e^{-omega s}(1 + omega s)` family, so the band around `zeta = 1`
/// loses no accuracy. Valid for any real `s`.
pub fn scalar_damped_blocks(omega: f64, c: f64, s: f64) -> ScalarBlocks {
    if s == 0.0 {
        return ScalarBlocks::IDENTITY;
    }
    let a = 0.5 * c;
    let w2 = omega * omega;
    let combine = |decay: f64, cosh_like: f64, sinh_over_r: f64| ScalarBlocks {
        b11: decay * (cosh_like + a * sinh_over_r),
        b12: decay * sinh_over_r,
        b21: -w2 * decay * sinh_over_r,
        b22: decay * (cosh_like - a * sinh_over_r),
    };
    match damping_regime(omega, c) {
        DampingRegime::Free if c == 0.0 => ScalarBlocks {
            b11: 1.0,
            b12: s,
            b21: 0.0,
            b22: 1.0,
        },
        DampingRegime::Underdamped => {
            let mu = ((omega - a) * (omega + a)).sqrt();
            let (sn, cs) = (mu * s).sin_cos();
            combine((-a * s).exp(), cs, sn / mu)
        }
        DampingRegime::Critical => {
            if a * s > 745.0 {
                return ScalarBlocks {
                    b11: 0.0,
                    b12: 0.0,
                    b21: 0.0,
                    b22: 0.0,
                };
            }
            let x = (a - omega) * (a + omega) * s * s;
            // cosh(sqrt(x)) and sinh(sqrt(x))/sqrt(x) as series in x
            let mut ch = 1.0;
            let mut sh = 1.0;
            let mut tc = 1.0;
            let mut ts = 1.0;
            for k in 1..60 {
                let kf = k as f64;
                tc *= x / ((2.0 * kf - 1.0) * (2.0 * kf));
                ts *= x / ((2.0 * kf) * (2.0 * kf + 1.0));
                ch += tc;
                sh += ts;
                if tc.abs() <= 1e-17 * ch.abs() && ts.abs() <= 1e-17 * sh.abs() {
                    break;
                }
            }
            combine((-a * s).exp(), ch, s * sh)
        }
        DampingRegime::Overdamped | DampingRegime::Free => {
            let r = ((a - omega) * (a + omega)).sqrt();
            // e^{-as} cosh(rs) and e^{-as} sinh(rs) without overflow or cancellation
            let slow = -w2 / (a + r);
            let e_plus = (slow * s).exp();
            let half_diff = -0.5 * e_plus * (-2.0 * r * s).exp_m1();
            let e_minus = (-(a + r) * s).exp();
            let half_sum = 0.5 * (e_plus + e_minus);
            ScalarBlocks {
                b11: half_sum + a * half_diff / r,
                b12: half_diff / r,
                b21: -w2 * half_diff / r,
                b22: half_sum - a * half_diff / r,
            }
        }
    }
}

/// Block propagator `B(s)` of the fast flow in the unit-mass frame.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub s: f64,
    /// Per-mode scalar blocks in the modal basis.
    pub modal: Vec<ScalarBlocks>,
    pub b11: DMatrix<f64>,
    pub b12: DMatrix<f64>,
    pub b21: DMatrix<f64>,
    pub b22: DMatrix<f64>,
}

impl Propagator {
    pub fn dim(&self) -> usize {
        self.modal.len()
    }

    /// `(q_out, p_out) = B(s) (q, p)`
    pub fn apply_into(
        &self,
        q: &DVector<f64>,
        p: &DVector<f64>,
        q_out: &mut DVector<f64>,
        p_out: &mut DVector<f64>,
    ) {
        q_out.gemv(1.0, &self.b11, q, 0.0);
        q_out.gemv(1.0, &self.b12, p, 1.0);
        p_out.gemv(1.0, &self.b21, q, 0.0);
        p_out.gemv(1.0, &self.b22, p, 1.0);
    }

    pub fn apply(&self, q: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let mut qo = DVector::zeros(d);
        let mut po = DVector::zeros(d);
        self.apply_into(q, p, &mut qo, &mut po);
        (qo, po)
    }

    /// The full `2d x 2d` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        block2(&self.b11, &self.b12, &self.b21, &self.b22)
    }

    /// `det B(s)` as the product of per-mode 2x2 determinants.
    pub fn determinant(&self) -> f64 {
        self.modal.iter().map(ScalarBlocks::determinant).product()
    }
}

/// Assembles `B(s)` mode by mode and rotates it back to the working frame.
pub fn assemble_propagator(modal: &ModalForm, s: f64) -> Propagator {
    let blocks: Vec<ScalarBlocks> = modal
        .omega
        .iter()
        .zip(&modal.damping)
        .map(|(&w, &c)| scalar_damped_blocks(w, c, s))
        .collect();
    let pick = |f: fn(&ScalarBlocks) -> f64| {
        let v: Vec<f64> = blocks.iter().map(f).collect();
        modal.assemble(&v)
    };
    Propagator {
        s,
        b11: pick(|b| b.b11),
        b12: pick(|b| b.b12),
        b21: pick(|b| b.b21),
        b22: pick(|b| b.b22),
        modal: blocks,
    }
}

/// `(int_0^s B12(u) du, int_0^s B22(u) du)`: the response of the fast flow to a
/// constant momentum forcing over `[0, s]`.
pub fn propagator_integral(
    modal: &ModalForm,
    s: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), FastFlowError> {
    let d = modal.dim();
    let opts = quadrature_options(modal, s.abs(), 1e-13 * s.abs().max(s * s));
    let v = integrate_adaptive(
        |u, out: &mut [f64]| {
            for i in 0..d {
                let b = scalar_damped_blocks(modal.omega[i], modal.damping[i], u);
                out[i] = b.b12;
                out[d + i] = b.b22;
            }
        },
        2 * d,
        0.0,
        s,
        &opts,
    )?;
    Ok((modal.assemble(&v[..d]), modal.assemble(&v[d..])))
}

fn quadrature_options(modal: &ModalForm, span: f64, abs_tol: f64) -> AdaptiveOptions {
    let rate = modal.omega_max().max(0.5 * modal.damping_max());
    let panels = (rate * span / std::f64::consts::PI).ceil().clamp(1.0, 1e6) as usize;
    AdaptiveOptions {
        abs_tol,
        initial_panels: panels,
        ..AdaptiveOptions::default()
    }
}

/// Covariance of the Gaussian kick `(Rq, Rp)` accumulated by the fast flow over
/// one step, together with a factor for sampling.
#[derive(Debug, Clone)]
pub struct KickCovariance {
    pub h: f64,
    /// `[[S11, S12], [S21, S22]]`, `2d x 2d`.
    pub sigma2: DMatrix<f64>,
    /// `G` with `G G^T = sigma2`.
    pub factor: DMatrix<f64>,
}

impl KickCovariance {
    pub fn dim(&self) -> usize {
        self.sigma2.nrows() / 2
    }

    pub fn block11(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.sigma2.view((0, 0), (d, d)).into_owned()
    }

    pub fn is_zero(&self) -> bool {
        self.factor.iter().all(|&v| v == 0.0)
    }

    /// Draws `G z` using `z` (length `2d`) as scratch for the standard normals.
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        z: &mut DVector<f64>,
        out_q: &mut DVector<f64>,
        out_p: &mut DVector<f64>,
    ) {
        let d = self.dim();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut aq = 0.0;
            let mut ap = 0.0;
            for k in 0..2 * d {
                aq += self.factor[(i, k)] * z[k];
                ap += self.factor[(d + i, k)] * z[k];
            }
            out_q[i] = aq;
            out_p[i] = ap;
        }
    }
}

/// Kick covariance over a step `h > 0`:
///
/// ```text
/// S11 = int_0^h B12(u) sigma sigma^T B12(u)^T du
/// S12 = int_0^h B12(u) sigma sigma^T B22(u)^T du
/// S22 = int_0^h B22(u) sigma sigma^T B22(u)^T du
/// ```
///
/// In the modal basis each entry is `(U^T sigma sigma^T U)_ij` times a scalar
/// integral of a product of per-mode blocks.
pub fn kick_covariance(
    modal: &ModalForm,
    sigma: &DMatrix<f64>,
    h: f64,
) -> Result<KickCovariance, FastFlowError> {
    let d = modal.dim();
    if sigma.nrows() != d {
        return Err(FastFlowError::DimensionMismatch(format!(
            "sigma has {} rows, system has dimension {d}",
            sigma.nrows()
        )));
    }
    assert!(h > 0.0, "kick covariance needs a positive step");
    let zero = DMatrix::zeros(2 * d, 2 * d);
    if sigma.iter().all(|&v| v == 0.0) {
        return Ok(KickCovariance {
            h,
            sigma2: zero.clone(),
            factor: zero,
        });
    }

    let sigma_modal = modal.basis.tr_mul(sigma);
    let noise = &sigma_modal * sigma_modal.transpose();

    let tol = 1e-13 * h.max(h * h * h) / d as f64;
    let opts = quadrature_options(modal, h, tol);
    let mut b12 = vec![0.0; d];
    let mut b22 = vec![0.0; d];
    let ints = integrate_adaptive(
        |u, out: &mut [f64]| {
            for i in 0..d {
                let b = scalar_damped_blocks(modal.omega[i], modal.damping[i], u);
                b12[i] = b.b12;
                b22[i] = b.b22;
            }
            for i in 0..d {
                for j in 0..d {
                    let k = i * d + j;
                    out[k] = b12[i] * b12[j];
                    out[d * d + k] = b12[i] * b22[j];
                    out[2 * d * d + k] = b22[i] * b22[j];
                }
            }
        },
        3 * d * d,
        0.0,
        h,
        &opts,
    )?;

    let mut s11 = DMatrix::zeros(d, d);
    let mut s12 = DMatrix::zeros(d, d);
    let mut s22 = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let k = i * d + j;
            s11[(i, j)] = noise[(i, j)] * ints[k];
            s12[(i, j)] = noise[(i, j)] * ints[d * d + k];
            s22[(i, j)] = noise[(i, j)] * ints[2 * d * d + k];
        }
    }
    let u = &modal.basis;
    let s11 = symmetrize(&(u * s11 * u.transpose()));
    let s12 = u * s12 * u.transpose();
    let s22 = symmetrize(&(u * s22 * u.transpose()));
    let s21 = s12.transpose();
    let sigma2 = block2(&s11, &s12, &s21, &s22);
    let factor = psd_factor(&sigma2);
    Ok(KickCovariance { h, sigma2, factor })
}

/// One draw of the kick: `(Rq, Rp) = G z`.
pub fn sample_kick<R: Rng + ?Sized>(cov: &KickCovariance, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
    let d = cov.dim();
    let mut z = DVector::zeros(2 * d);
    let mut q = DVector::zeros(d);
    let mut p = DVector::zeros(d);
    cov.sample_into(rng, &mut z, &mut q, &mut p);
    (q, p)
}

/// Kick driven by a given Brownian path: the left-point sum
/// `sum_j B(h - s_j) (0, sigma dW_j)` with `s_j` the start of increment `j`.
pub fn coupled_kick_from_increments(
    modal: &ModalForm,
    sigma: &DMatrix<f64>,
    h: f64,
    increments: &[(f64, &[f64])],
) -> Result<(DVector<f64>, DVector<f64>), FastFlowError> {
    let d = modal.dim();
    let total: f64 = increments.iter().map(|(dt, _)| dt).sum();
    if (total - h).abs() > 1e-9 * h.abs().max(1.0) {
        return Err(FastFlowError::PathMismatch { total, expected: h });
    }
    let sigma_modal = modal.basis.tr_mul(sigma);
    let mut kq = DVector::zeros(d);
    let mut kp = DVector::zeros(d);
    let mut start = 0.0;
    for (dt, dw) in increments {
        if dw.len() != sigma.ncols() {
            return Err(FastFlowError::DimensionMismatch(format!(
                "increment has {} components, sigma has {} columns",
                dw.len(),
                sigma.ncols()
            )));
        }
        let w = &sigma_modal * DVector::from_column_slice(dw);
        for i in 0..d {
            let b = scalar_damped_blocks(modal.omega[i], modal.damping[i], h - start);
            kq[i] += b.b12 * w[i];
            kp[i] += b.b22 * w[i];
        }
        start += dt;
    }
    Ok((modal.from_modal(&kq), modal.from_modal(&kp)))
}

/// Precomputed left-point weights for coupled kicks on a uniform fine grid with
/// `n` increments per step.
#[derive(Debug, Clone)]
pub struct CoupledKickTable {
    n: usize,
    noise_dim: usize,
    /// `b12_i(h - j dt)` at `j * d + i`.
    b12: Vec<f64>,
    b22: Vec<f64>,
    sigma_modal: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl CoupledKickTable {
    pub fn new(modal: &ModalForm, sigma: &DMatrix<f64>, h: f64, n: usize) -> Self {
        let d = modal.dim();
        let dt = h / n as f64;
        let mut b12 = Vec::with_capacity(n * d);
        let mut b22 = Vec::with_capacity(n * d);
        for j in 0..n {
            let lag = h - j as f64 * dt;
            for i in 0..d {
                let b = scalar_damped_blocks(modal.omega[i], modal.damping[i], lag);
                b12.push(b.b12);
                b22.push(b.b22);
            }
        }
        CoupledKickTable {
            n,
            noise_dim: sigma.ncols(),
            b12,
            b22,
            sigma_modal: modal.basis.tr_mul(sigma),
            basis: modal.basis.clone(),
        }
    }

    pub fn increments_per_step(&self) -> usize {
        self.n
    }

    /// `increments` holds `n * noise_dim` values, increment-major.
    /// `mq` and `mp` are modal scratch vectors.
    pub fn kick_into(
        &self,
        increments: &[f64],
        mq: &mut DVector<f64>,
        mp: &mut DVector<f64>,
        out_q: &mut DVector<f64>,
        out_p: &mut DVector<f64>,
    ) {
        let d = self.basis.nrows();
        let r = self.noise_dim;
        debug_assert_eq!(increments.len(), self.n * r);
        mq.fill(0.0);
        mp.fill(0.0);
        for j in 0..self.n {
            let dw = &increments[j * r..(j + 1) * r];
            for i in 0..d {
                let mut w = 0.0;
                for (k, dwk) in dw.iter().enumerate() {
                    w += self.sigma_modal[(i, k)] * dwk;
                }
                mq[i] += self.b12[j * d + i] * w;
                mp[i] += self.b22[j * d + i] * w;
            }
        }
        out_q.gemv(1.0, &self.basis, mq, 0.0);
        out_p.gemv(1.0, &self.basis, mp, 0.0);
    }
}
