//! Flux carried by the ray solution `F(r, θ) = C₀ r^{-(γ+1)/2-d} δ(θ - θ₀)`:
//!
//! ```text
//! J(t) = C₀² ∫₀^t r^d dr ∫_{t-r}^∞ ρ^{d-1} G(r, ρ) / (r^e ρ^e) dρ,   e = (γ+1)/2 + d
//! ```
//!
//! With `r = t u` and `ρ = t (1-u) / (1-w)` the dimension drops out and
//!
//! ```text
//! J(t) = C₀² t^{-γ} ∫₀¹ ∫₀¹ u^{-(γ+1)/2} (1-u)^{-(γ+1)/2} (1-w)^{(γ-1)/2} G(tu, t(1-u)/(1-w)) dw du
//! ```
//!
//! which is constant in `t` whenever `G` is homogeneous of degree `γ < 1`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::{KernelError, KernelSpec};
use crate::quadrature::{tanh_sinh, QuadError, MAX_LEVEL};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("flux integral diverges as {endpoint} (local exponent {slope:.3} ≤ -1)")]
    NonIntegrable { endpoint: &'static str, slope: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayAnsatz {
    pub gamma: f64,
    pub c0: f64,
    pub theta0: Vec<f64>,
    pub d: usize,
}

impl RayAnsatz {
    pub fn new(gamma: f64, c0: f64, theta0: Vec<f64>) -> Result<Self, OracleError> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(OracleError::InvalidParameter(format!(
                "C₀ = {c0} must be positive"
            )));
        }
        if !gamma.is_finite() {
            return Err(OracleError::InvalidParameter(format!("γ = {gamma}")));
        }
        if theta0.is_empty()
            || theta0.iter().any(|&t| t < 0.0)
            || (theta0.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(OracleError::InvalidParameter(format!(
                "θ₀ = {theta0:?} is not a point of the simplex"
            )));
        }
        let d = theta0.len();
        Ok(Self {
            gamma,
            c0,
            theta0,
            d,
        })
    }

    /// Exponent of `r` in the density, `-(γ+1)/2 - d`.
    pub fn exponent(&self) -> f64 {
        -0.5 * (self.gamma + 1.0) - self.d as f64
    }
}

/// A kernel restricted to the ray through `θ₀`: `G(r, ρ) = K(r θ₀, ρ θ₀)`.
#[derive(Debug, Clone)]
pub struct RayKernel {
    spec: KernelSpec,
    theta: Vec<f64>,
}

impl RayKernel {
    pub fn new(spec: KernelSpec, theta: Vec<f64>) -> Result<Self, OracleError> {
        let ray = Self { spec, theta };
        ray.eval(1.0, 1.0)?;
        Ok(ray)
    }

    pub fn eval(&self, r: f64, rho: f64) -> Result<f64, KernelError> {
        let x: Vec<f64> = self.theta.iter().map(|t| r * t).collect();
        let y: Vec<f64> = self.theta.iter().map(|t| rho * t).collect();
        self.spec.eval_real(&x, &y)
    }

    /// Evaluation for quadrature; failures become NaN and stop the quadrature.
    pub fn g(&self) -> impl Fn(f64, f64) -> f64 + Sync + '_ {
        move |r, rho| self.eval(r, rho).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluxIntegral {
    pub t: f64,
    pub value: f64,
    pub error: f64,
}

/// Log-slope of `f` at `x₁ = 1e-9` against `x₂ = 1e-11`.
fn endpoint_slope(f: impl Fn(f64) -> f64) -> Option<f64> {
    let (x1, x2) = (1e-9_f64, 1e-11_f64);
    let (f1, f2) = (f(x1), f(x2));
    if !(f1 > 0.0 && f2 > 0.0 && f1.is_finite() && f2.is_finite()) {
        return None;
    }
    Some((f1.ln() - f2.ln()) / (x1.ln() - x2.ln()))
}

/// Local exponents not above this are treated as non-integrable.
const DIVERGENT_SLOPE: f64 = -1.0 + 1e-6;

/// `J(t)` for the ray ansatz with pair function `g`, to quadrature tolerance
/// `tol`. Endpoint divergences are reported as [`OracleError::NonIntegrable`].
pub fn flux_integral(
    ansatz: &RayAnsatz,
    g: &(impl Fn(f64, f64) -> f64 + Sync),
    t: f64,
    tol: f64,
) -> Result<FluxIntegral, OracleError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(OracleError::InvalidParameter(format!(
            "t = {t} must be positive"
        )));
    }
    if !(tol > 0.0) {
        return Err(OracleError::InvalidParameter(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let a = -0.5 * (ansatz.gamma + 1.0);
    let b = 0.5 * (ansatz.gamma - 1.0);
    // integrand of the inner integral, w and 1 - w supplied separately
    let inner = |u: f64, uc: f64, wc: f64| wc.powf(b) * g(t * u, t * uc / wc);
    for (endpoint, u, uc) in [("ρ → ∞", 0.5, 0.5), ("ρ → ∞ near r → 0", 1e-6, 1.0 - 1e-6)]
    {
        if let Some(s) = endpoint_slope(|wc| inner(u, uc, wc)) {
            if s <= DIVERGENT_SLOPE {
                return Err(OracleError::NonIntegrable { endpoint, slope: s });
            }
        }
    }
    let inner_tol = 0.1 * tol;
    let inner_integral = |u: f64, uc: f64| -> Result<f64, QuadError> {
        tanh_sinh(|_, wc| inner(u, uc, wc), inner_tol, MAX_LEVEL).map(|q| q.value)
    };
    let outer = |u: f64, uc: f64| -> f64 {
        match inner_integral(u, uc) {
            Ok(v) => (u * uc).powf(a) * v,
            Err(_) => f64::NAN,
        }
    };
    for (endpoint, flip) in [("r → 0", false), ("r → t", true)] {
        let probe = |x: f64| {
            if flip {
                outer(1.0 - x, x)
            } else {
                outer(x, 1.0 - x)
            }
        };
        if let Some(s) = endpoint_slope(probe) {
            if s <= DIVERGENT_SLOPE {
                return Err(OracleError::NonIntegrable { endpoint, slope: s });
            }
        }
    }
    let q = tanh_sinh(outer, tol, MAX_LEVEL)?;
    let scale = ansatz.c0 * ansatz.c0 * t.powf(-ansatz.gamma);
    Ok(FluxIntegral {
        t,
        value: scale * q.value,
        error: scale * q.error,
    })
}

/// [`flux_integral`] at each `t`, evaluated in parallel.
pub fn flux_table(
    ansatz: &RayAnsatz,
    g: &(impl Fn(f64, f64) -> f64 + Sync),
    ts: &[f64],
    tol: f64,
) -> Vec<Result<FluxIntegral, OracleError>> {
    ts.par_iter()
        .map(|&t| flux_integral(ansatz, g, t, tol))
        .collect()
}

/// `max |G(λr, λρ) - λ^γ G(r, ρ)| / G(r, ρ)` over the samples.
pub fn homogeneity_check(
    g: impl Fn(f64, f64) -> f64,
    gamma: f64,
    lambdas: &[f64],
    pairs: &[(f64, f64)],
) -> f64 {
    let mut worst = 0.0_f64;
    for &(r, rho) in pairs {
        let base = g(r, rho);
        for &l in lambdas {
            let dev = (g(l * r, l * rho) - l.powf(gamma) * base).abs() / base;
            worst = worst.max(dev);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn ansatz(gamma: f64) -> RayAnsatz {
        RayAnsatz::new(gamma, 1.0, vec![1.0]).unwrap()
    }

    #[test]
    fn unit_pair_function_gives_two_pi() {
        // ∫₀¹ (u(1-u))^{-1/2} du · ∫₀¹ (1-w)^{-1/2} dw = π · 2
        let one = |_: f64, _: f64| 1.0;
        for t in [1.0, 2.0, 4.0] {
            let j = flux_integral(&ansatz(0.0), &one, t, 1e-10).unwrap();
            assert_abs_diff_eq!(j.value, 2.0 * PI, epsilon = 1e-8);
        }
    }

    #[test]
    fn unit_pair_function_in_original_variables() {
        // inner ∫_{t-r}^∞ ρ^{-3/2} dρ = 2 (t-r)^{-1/2}; outer Beta(1/2,1/2) · 2
        let t: f64 = 3.0;
        let beta = tanh_sinh(
            |u, uc| (t * u).powf(-0.5) * 2.0 * (t * uc).powf(-0.5) * t,
            1e-12,
            MAX_LEVEL,
        )
        .unwrap();
        let j = flux_integral(&ansatz(0.0), &|_, _| 1.0, t, 1e-10).unwrap();
        assert_abs_diff_eq!(j.value, beta.value, epsilon = 1e-8);
    }

    #[test]
    fn amplitude_enters_quadratically() {
        let one = |_: f64, _: f64| 1.0;
        let j1 = flux_integral(&ansatz(0.0), &one, 1.0, 1e-10).unwrap();
        let a2 = RayAnsatz::new(0.0, 2.0, vec![1.0]).unwrap();
        let j2 = flux_integral(&a2, &one, 1.0, 1e-10).unwrap();
        assert_abs_diff_eq!(j2.value, 4.0 * j1.value, epsilon = 1e-8);
    }

    #[test]
    fn homogeneous_kernel_flux_is_constant_in_t() {
        let g = |r: f64, rho: f64| (r + rho).powf(0.5);
        let js: Vec<f64> = flux_table(&ansatz(0.5), &g, &[1.0, 2.0, 4.0, 8.0], 1e-9)
            .into_iter()
            .map(|j| j.unwrap().value)
            .collect();
        for j in &js {
            assert_abs_diff_eq!(*j, js[0], epsilon = 2e-9 * js[0]);
        }
    }

    #[test]
    fn dimension_does_not_enter() {
        let g = |r: f64, rho: f64| (r + rho).powf(0.3);
        let a1 = RayAnsatz::new(0.3, 1.0, vec![1.0]).unwrap();
        let a3 = RayAnsatz::new(0.3, 1.0, vec![0.2, 0.3, 0.5]).unwrap();
        let j1 = flux_integral(&a1, &g, 2.0, 1e-10).unwrap();
        let j3 = flux_integral(&a3, &g, 2.0, 1e-10).unwrap();
        assert_eq!(j1.value, j3.value);
    }

    #[test]
    fn growing_kernels_are_non_integrable() {
        for gamma in [1.0, 1.2, 2.0] {
            let g = move |r: f64, rho: f64| (r + rho).powf(gamma);
            let err = flux_integral(&ansatz(gamma), &g, 1.0, 1e-10).unwrap_err();
            assert!(
                matches!(err, OracleError::NonIntegrable { .. }),
                "{gamma}: {err}"
            );
        }
        let err = flux_integral(&ansatz(1.2), &|_, _| 1.0, 1.0, 1e-10).unwrap_err();
        assert!(matches!(err, OracleError::NonIntegrable { .. }));
    }

    #[test]
    fn homogeneity_examples() {
        let lambdas = [0.5, 2.0, 7.0];
        let pairs = [(1.0, 1.0), (0.3, 5.0), (10.0, 0.1)];
        assert_eq!(homogeneity_check(|_, _| 3.0, 0.0, &lambdas, &pairs), 0.0);
        let pp = RayKernel::new(
            KernelSpec::ProductPower {
                gamma: 0.4,
                lambda: 0.1,
            },
            vec![1.0],
        )
        .unwrap();
        assert!(homogeneity_check(pp.g(), 0.4, &lambdas, &pairs) < 1e-14);
        let brownian = RayKernel::new(
            KernelSpec::Brownian {
                volumes: vec![1.0, 2.0],
            },
            vec![0.75, 0.25],
        )
        .unwrap();
        assert!(homogeneity_check(brownian.g(), 0.0, &lambdas, &pairs) <= 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(RayAnsatz::new(0.0, 0.0, vec![1.0]).is_err());
        assert!(RayAnsatz::new(0.0, 1.0, vec![0.5, 0.6]).is_err());
        assert!(flux_integral(&ansatz(0.0), &|_, _| 1.0, -1.0, 1e-10).is_err());
    }
}
