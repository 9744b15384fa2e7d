// SPDX-License-Identifier: Apache-2.0

//! Adaptive Gauss–Legendre quadrature for vector-valued integrands.
//!
//! A panel is accepted when the single-panel rule and the two half-panel rules
//! agree to within the panel's share of the absolute tolerance.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("adaptive quadrature did not converge: estimated error {error:e} > tolerance {tolerance:e} after {panels} panels")]
    NonConvergence {
        error: f64,
        tolerance: f64,
        panels: usize,
    },
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Fixed rule on `[a, b]`, accumulated into `out` (which is zeroed first).
    pub fn integrate_into<F>(&self, f: &mut F, a: f64, b: f64, scratch: &mut [f64], out: &mut [f64])
    where
        F: FnMut(f64, &mut [f64]),
    {
        out.fill(0.0);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            f(mid + half * x, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += w * half * s;
            }
        }
    }
}

/// `(P_n(x), P_n'(x))`
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[derive(Debug, Clone)]
pub struct AdaptiveOptions {
    pub order: usize,
    pub abs_tol: f64,
    /// Number of equal panels to start from.
    pub initial_panels: usize,
    pub max_panels: usize,
    pub max_depth: u32,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        AdaptiveOptions {
            order: 12,
            abs_tol: 1e-13,
            initial_panels: 1,
            max_panels: 2_000_000,
            max_depth: 48,
        }
    }
}

/// Integrates the `dim`-valued function `f` over `[a, b]`.
pub fn integrate_adaptive<F>(
    mut f: F,
    dim: usize,
    a: f64,
    b: f64,
    opts: &AdaptiveOptions,
) -> Result<Vec<f64>, QuadratureError>
where
    F: FnMut(f64, &mut [f64]),
{
    let rule = GaussLegendre::new(opts.order);
    let mut total = vec![0.0; dim];
    if a == b {
        return Ok(total);
    }
    let width = b - a;
    let mut scratch = vec![0.0; dim];
    let mut whole = vec![0.0; dim];
    let mut left = vec![0.0; dim];
    let mut right = vec![0.0; dim];

    let n0 = opts.initial_panels.max(1);
    let mut stack: Vec<(f64, f64, u32)> = (0..n0)
        .rev()
        .map(|k| {
            let lo = a + width * k as f64 / n0 as f64;
            let hi = if k + 1 == n0 {
                b
            } else {
                a + width * (k + 1) as f64 / n0 as f64
            };
            (lo, hi, 0)
        })
        .collect();

    let mut panels = 0usize;
    let mut unmet: Option<f64> = None;
    while let Some((lo, hi, depth)) = stack.pop() {
        panels += 1;
        rule.integrate_into(&mut f, lo, hi, &mut scratch, &mut whole);
        let mid = 0.5 * (lo + hi);
        rule.integrate_into(&mut f, lo, mid, &mut scratch, &mut left);
        rule.integrate_into(&mut f, mid, hi, &mut scratch, &mut right);
        let err = whole
            .iter()
            .zip(left.iter().zip(&right))
            .fold(0.0_f64, |acc, (w, (l, r))| acc.max((w - (l + r)).abs()));
        let share = opts.abs_tol * ((hi - lo) / width).abs();
        if err <= share || depth >= opts.max_depth || panels >= opts.max_panels {
            if err > share {
                unmet = Some(unmet.map_or(err, |w: f64| w.max(err)));
            }
            for (t, (l, r)) in total.iter_mut().zip(left.iter().zip(&right)) {
                *t += l + r;
            }
            if panels >= opts.max_panels && !stack.is_empty() {
                return Err(QuadratureError::NonConvergence {
                    error: f64::INFINITY,
                    tolerance: opts.abs_tol,
                    panels,
                });
            }
        } else {
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    if let Some(error) = unmet {
        return Err(QuadratureError::NonConvergence {
            error,
            tolerance: opts.abs_tol,
            panels,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_and_weights_are_exact_for_polynomials() {
        let rule = GaussLegendre::new(5);
        let sum: f64 = rule.weights().iter().sum();
        assert!((sum - 2.0).abs() < 1e-14);
        // degree 9 is integrated exactly by 5 points
        let integral: f64 = rule
            .nodes()
            .iter()
            .zip(rule.weights())
            .map(|(x, w)| w * x.powi(8))
            .sum();
        assert!((integral - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_oscillation() {
        let omega = 500.0;
        let out = integrate_adaptive(
            |s, o| {
                o[0] = (omega * s).sin().powi(2);
                o[1] = (-s).exp();
            },
            2,
            0.0,
            1.0,
            &AdaptiveOptions {
                abs_tol: 1e-13,
                ..Default::default()
            },
        )
        .unwrap();
        let exact0 = 0.5 - (2.0 * omega).sin() / (4.0 * omega);
        assert!((out[0] - exact0).abs() < 1e-12);
        assert!((out[1] - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn reports_non_convergence() {
        let r = integrate_adaptive(
            |s, o| o[0] = if s < 0.3 { 0.0 } else { 1.0 },
            1,
            0.0,
            1.0,
            &AdaptiveOptions {
                abs_tol: 1e-20,
                max_depth: 3,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(QuadratureError::NonConvergence { .. })));
    }
}
