//! Mass flux across the sphere `|α| = R`:
//!
//! ```text
//! A_j(R) = Σ_{|α| ≤ R} Σ_{|α|+|β| > R} α_j K_{ε,M}(α, β) n_α n_β
//! ```
//!
//! At a stationary state `A(R)` equals the mass injected inside the ball,
//! `Σ_{|α| ≤ R} α s_α`, for every `R ≤ M/2`.

use rayon::prelude::*;
use serde::Serialize;

use crate::lattice::{ClusterDistribution, Source};
use crate::truncation::{TruncatedKernel, TruncationError};

/// Flux vector `A(R)`, one entry per species.
pub fn flux_vector(
    state: &ClusterDistribution,
    kernel: &TruncatedKernel,
    r: f64,
) -> Result<Vec<f64>, TruncationError> {
    let d = state.dim();
    let entries: Vec<(&[u32], u64, f64)> = state
        .iter()
        .map(|(k, v)| (k.parts(), k.norm(), v))
        .collect();
    let per_alpha: Vec<Vec<f64>> = entries
        .par_iter()
        .filter(|(_, na, _)| *na as f64 <= r)
        .map(|&(a, na, va)| {
            let mut s = 0.0;
            for &(b, nb, vb) in &entries {
                if (na + nb) as f64 > r {
                    s += kernel.rate_parts(a, b)? * vb;
                }
            }
            Ok(a.iter().map(|&aj| f64::from(aj) * va * s).collect())
        })
        .collect::<Result<_, TruncationError>>()?;
    let mut out = vec![0.0; d];
    for row in per_alpha {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluxRow {
    pub r: f64,
    pub measured: Vec<f64>,
    pub expected: Vec<f64>,
    /// `‖A(R) - Σ_{|α|≤R} α s_α‖_∞ / ‖Σ_{|α|≤R} α s_α‖_∞`.
    pub rel_err: f64,
    /// `R > M/2`: outside the range where the identity holds.
    pub beyond_cutoff: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluxReport {
    pub rows: Vec<FluxRow>,
}

impl FluxReport {
    /// Largest relative error over radii inside `M/2`.
    pub fn max_rel_err(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| !r.beyond_cutoff)
            .map(|r| r.rel_err)
            .fold(0.0, f64::max)
    }

    /// CSV `R,A_1..A_d,expected_1..expected_d,rel_err,beyond_cutoff`.
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.measured.len());
        let mut out = String::from("R");
        for j in 1..=d {
            out.push_str(&format!(",A_{j}"));
        }
        for j in 1..=d {
            out.push_str(&format!(",expected_{j}"));
        }
        out.push_str(",rel_err,beyond_cutoff\n");
        for row in &self.rows {
            out.push_str(&format!("{}", row.r));
            for v in row.measured.iter().chain(&row.expected) {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push_str(&format!(",{:.6e},{}\n", row.rel_err, row.beyond_cutoff));
        }
        out
    }
}

/// Compares `A(R)` with the injected mass inside `R` at each radius.
pub fn flux_identity_check(
    state: &ClusterDistribution,
    kernel: &TruncatedKernel,
    src: &Source,
    radii: &[f64],
) -> Result<FluxReport, TruncationError> {
    let half = 0.5 * kernel.m();
    let rows = radii
        .iter()
        .map(|&r| {
            let measured = flux_vector(state, kernel, r)?;
            let expected = src.injection_within(r);
            let scale = expected.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let diff = measured
                .iter()
                .zip(&expected)
                .fold(0.0_f64, |m, (a, e)| m.max((a - e).abs()));
            let rel_err = if scale > 0.0 { diff / scale } else { diff };
            Ok(FluxRow {
                r,
                measured,
                expected,
                rel_err,
                beyond_cutoff: r > half,
            })
        })
        .collect::<Result<_, TruncationError>>()?;
    Ok(FluxReport { rows })
}

/// Radii `1, 2, 4, …` up to `M/2`.
pub fn default_radii(m: f64) -> Vec<f64> {
    std::iter::successors(Some(1.0), |r| Some(r * 2.0))
        .take_while(|&r| r <= 0.5 * m)
        .collect()
}
