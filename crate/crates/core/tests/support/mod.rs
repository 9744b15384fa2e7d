// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations used only by tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `exp(A)` by scaling and squaring with a degree-20 Taylor polynomial.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `[[0, I], [-K/eps, -c]]`
pub fn generator(k: &DMatrix<f64>, eps: f64, c: &DMatrix<f64>) -> DMatrix<f64> {
    let d = k.nrows();
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    a.view_mut((0, d), (d, d)).fill_with_identity();
    a.view_mut((d, 0), (d, d)).copy_from(&(-k / eps));
    a.view_mut((d, d), (d, d)).copy_from(&(-c));
    a
}

/// Midpoint-rule `int_0^H B(H - s) S S^T B(H - s)^T ds` for a scalar mode with
/// `n` panels; `B` is advanced by repeated multiplication with `expm(A dt)`.
pub fn riemann_covariance(omega: f64, c: f64, sigma: f64, h: f64, n: usize) -> [[f64; 2]; 2] {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, -c]);
    let dt = h / n as f64;
    let step = expm(&(&a * dt));
    let mut b = expm(&(&a * (0.5 * dt)));
    let mut acc = [[0.0; 2]; 2];
    for _ in 0..n {
        let v = [b[(0, 1)] * sigma, b[(1, 1)] * sigma];
        for i in 0..2 {
            for j in 0..2 {
                acc[i][j] += v[i] * v[j];
            }
        }
        b = &step * &b;
    }
    for row in &mut acc {
        for v in row.iter_mut() {
            *v *= dt;
        }
    }
    acc
}

/// Classical RK4 for `x' = f(x)` with `n` equal steps over `[0, t]`.
pub fn rk4<F>(f: F, x0: &DVector<f64>, t: f64, n: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = t / n as f64;
    let mut x = x0.clone();
    for _ in 0..n {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (0.5 * h)));
        let k3 = f(&(&x + &k2 * (0.5 * h)));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// Right-hand side of `q' = p, p' = F(q) - K q / eps - c p` for a unit-mass system.
pub fn hamiltonian_rhs<'a>(
    k: &'a DMatrix<f64>,
    eps: f64,
    c: &'a DMatrix<f64>,
    force: impl Fn(&[f64]) -> Vec<f64> + 'a,
) -> impl Fn(&DVector<f64>) -> DVector<f64> + 'a {
    move |x| {
        let d = k.nrows();
        let q = x.rows(0, d).into_owned();
        let p = x.rows(d, d).into_owned();
        let f = DVector::from_vec(force(q.as_slice()));
        let dp = f - k * &q / eps - c * &p;
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&p);
        out.rows_mut(d, d).copy_from(&dp);
        out
    }
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    q
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
