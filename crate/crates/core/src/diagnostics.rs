//! Tail exponents, localization along the injection direction, and
//! existence sweeps over truncation parameters.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::composition::norm_of;
use crate::kernels::KernelSpec;
use crate::lattice::{ClusterDistribution, LatticeError, Source};
use crate::solver::{evolve_to_steady, SolverConfig};
use crate::truncation::{TruncatedKernel, TruncationError, TruncationParams};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("only {found} non-empty windows; a tail fit needs at least 4")]
    TooFewPoints { found: usize },
    #[error("band {r} ≤ |α| ≤ {upper} holds no clusters")]
    EmptyBand { r: f64, upper: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Truncation(#[from] TruncationError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Up to `max_points` integer sizes spread geometrically over `[lo, hi]`.
pub fn geometric_z_grid(lo: f64, hi: f64, max_points: usize) -> Vec<f64> {
    if !(lo > 0.0 && hi >= lo) || max_points == 0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = (0..max_points)
        .map(|k| {
            let f = if max_points == 1 {
                0.0
            } else {
                k as f64 / (max_points - 1) as f64
            };
            (lo * (hi / lo).powf(f)).round()
        })
        .filter(|&z| z >= lo.ceil() && z <= hi.floor())
        .collect();
    out.dedup();
    out
}

/// Default fit window `[max(8, 4L), M/4]`.
pub fn default_fit_window(reach: u64, m: f64) -> (f64, f64) {
    ((4 * reach).max(8) as f64, 0.25 * m)
}

/// Least-squares slope of `log m(z)` against `log z` over the windows
/// `b z ≤ |α| ≤ z`; empty windows are dropped.
pub fn fit_tail_exponent(
    state: &ClusterDistribution,
    b: f64,
    z_grid: &[f64],
) -> Result<ExponentFit, DiagnosticsError> {
    let mut pts = Vec::with_capacity(z_grid.len());
    for &z in z_grid {
        let w = state.dyadic_window_mass(z, b)?;
        if w > 0.0 {
            pts.push((z.ln(), w.ln(), z));
        }
    }
    if pts.len() < 4 {
        return Err(DiagnosticsError::TooFewPoints { found: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    let zs = pts.iter().map(|p| p.2);
    Ok(ExponentFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        window: (
            zs.clone().fold(f64::INFINITY, f64::min),
            zs.fold(0.0, f64::max),
        ),
        points: pts.len(),
    })
}

/// `m(z) z^{(3+γ)/2} / √|J₀|` at each grid point with a non-empty window.
pub fn window_constants(
    state: &ClusterDistribution,
    b: f64,
    z_grid: &[f64],
    gamma: f64,
    injection_norm: f64,
) -> Result<Vec<(f64, f64)>, DiagnosticsError> {
    let scale = injection_norm.sqrt();
    let mut out = Vec::new();
    for &z in z_grid {
        let w = state.dyadic_window_mass(z, b)?;
        if w > 0.0 {
            out.push((z, w * z.powf(0.5 * (3.0 + gamma)) / scale));
        }
    }
    Ok(out)
}

/// Ratio of the largest to the smallest constant.
pub fn constant_spread(constants: &[(f64, f64)]) -> f64 {
    let hi = constants.iter().map(|c| c.1).fold(0.0, f64::max);
    let lo = constants.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    hi / lo
}

fn in_cone(parts: &[u32], theta: &[f64], eps: f64) -> bool {
    let r = norm_of(parts) as f64;
    let dist: f64 = parts
        .iter()
        .zip(theta)
        .map(|(&a, &t)| (f64::from(a) / r - t).abs())
        .sum();
    dist < eps
}

fn check_localization_args(
    dim: usize,
    r: f64,
    zeta_band: f64,
    eps_angle: f64,
    theta: &[f64],
) -> Result<(), DiagnosticsError> {
    if theta.len() != dim {
        return Err(DiagnosticsError::InvalidParameter(format!(
            "direction has {} components, state has {dim}",
            theta.len()
        )));
    }
    if theta.iter().any(|&t| t < 0.0) || (theta.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(DiagnosticsError::InvalidParameter(format!(
            "direction {theta:?} is not a point of the simplex"
        )));
    }
    if !(zeta_band > 1.0) {
        return Err(DiagnosticsError::InvalidParameter(format!(
            "band factor {zeta_band} must exceed 1"
        )));
    }
    if !(eps_angle > 0.0) {
        return Err(DiagnosticsError::InvalidParameter(format!(
            "cone width {eps_angle} must be positive"
        )));
    }
    if !(r > 0.0) {
        return Err(DiagnosticsError::InvalidParameter(format!(
            "band radius {r} must be positive"
        )));
    }
    Ok(())
}

/// Fraction of the clusters in `R ≤ |α| ≤ ζR` whose direction `α/|α|` lies
/// within ℓ¹ distance `eps_angle` of `theta`.
pub fn localization_ratio(
    state: &ClusterDistribution,
    r: f64,
    zeta_band: f64,
    eps_angle: f64,
    theta: &[f64],
) -> Result<f64, DiagnosticsError> {
    check_localization_args(state.dim(), r, zeta_band, eps_angle, theta)?;
    let upper = zeta_band * r;
    let (mut band, mut cone) = (0.0, 0.0);
    for (k, v) in state.iter() {
        let n = k.norm() as f64;
        if n >= r && n <= upper {
            band += v;
            if in_cone(k.parts(), theta, eps_angle) {
                cone += v;
            }
        }
    }
    if band == 0.0 {
        return Err(DiagnosticsError::EmptyBand { r, upper });
    }
    Ok(cone / band)
}

fn for_each_with_norm(dim: usize, norm: u32, f: &mut impl FnMut(&[u32])) {
    fn rec(parts: &mut Vec<u32>, dim: usize, left: u32, f: &mut impl FnMut(&[u32])) {
        if parts.len() + 1 == dim {
            parts.push(left);
            f(parts);
            parts.pop();
            return;
        }
        for a in 0..=left {
            parts.push(a);
            rec(parts, dim, left - a, f);
            parts.pop();
        }
    }
    rec(&mut Vec::with_capacity(dim), dim, norm, f);
}

/// Localization ratio of the uniform state `n_α = 1` on the band.
pub fn isotropic_baseline(
    dim: usize,
    r: f64,
    zeta_band: f64,
    eps_angle: f64,
    theta: &[f64],
) -> Result<f64, DiagnosticsError> {
    check_localization_args(dim, r, zeta_band, eps_angle, theta)?;
    let (lo, hi) = (r.ceil().max(1.0) as u32, (zeta_band * r).floor() as u32);
    let (mut band, mut cone) = (0u64, 0u64);
    for n in lo..=hi {
        for_each_with_norm(dim, n, &mut |p| {
            band += 1;
            if in_cone(p, theta, eps_angle) {
                cone += 1;
            }
        });
    }
    if band == 0 {
        return Err(DiagnosticsError::EmptyBand {
            r,
            upper: zeta_band * r,
        });
    }
    Ok(cone as f64 / band as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Saturating,
    Diverging,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub m: f64,
    pub converged: bool,
    pub total_number: f64,
    pub tail_count: f64,
    pub residual: f64,
    pub steps: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub tail_radius: f64,
    pub cells: Vec<SweepCell>,
    pub verdict: Verdict,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epsilon,M,converged,total_number,tail_count,residual,steps,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{:.3e},{},{}\n",
                c.epsilon,
                c.m,
                c.converged,
                c.total_number,
                c.tail_count,
                c.residual,
                c.steps,
                c.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }
}

const SATURATION_CHANGE: f64 = 0.05;
const DIVERGENCE_GROWTH: f64 = 0.25;

fn rel_change(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        if b == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (b - a).abs() / a.abs()
    }
}

fn row_verdict(row: &[(f64, f64)]) -> Verdict {
    if row.len() < 2 {
        return Verdict::Inconclusive;
    }
    let steps: Vec<(f64, f64)> = row
        .windows(2)
        .map(|w| (rel_change(w[0].0, w[1].0), rel_change(w[0].1, w[1].1)))
        .collect();
    let grows = |i: usize| {
        let (a, b) = (row[i], row[i + 1]);
        b.0 > a.0 * (1.0 + DIVERGENCE_GROWTH) && b.1 > a.1 * (1.0 + DIVERGENCE_GROWTH)
    };
    if (0..steps.len()).all(grows) {
        return Verdict::Diverging;
    }
    let last = steps[steps.len() - 1];
    let settled = last.0 < SATURATION_CHANGE && last.1 < SATURATION_CHANGE;
    // hysteresis: a refinement that still grew by the divergence margin
    // blocks an immediate switch to saturating
    let previous_grew = steps.len() >= 2 && grows(steps.len() - 2);
    if settled && !previous_grew {
        Verdict::Saturating
    } else {
        Verdict::Inconclusive
    }
}

/// Verdict from cells laid out row-major over `(ε, M)`. Each ε row is a
/// refinement sequence in `M`; rows must agree.
pub fn sweep_verdict(cells: &[SweepCell], n_m: usize) -> Verdict {
    if cells.is_empty() || n_m == 0 || cells.iter().any(|c| !c.converged) {
        return Verdict::Inconclusive;
    }
    let verdicts: Vec<Verdict> = cells
        .chunks(n_m)
        .map(|row| {
            let pts: Vec<(f64, f64)> = row.iter().map(|c| (c.total_number, c.tail_count)).collect();
            row_verdict(&pts)
        })
        .collect();
    if verdicts.iter().all(|&v| v == verdicts[0]) {
        verdicts[0]
    } else {
        Verdict::Inconclusive
    }
}

/// Stationary runs over every `(ε, M)` in the grid, on a pool of `threads`
/// workers; cells are reported in grid order.
pub fn existence_sweep(
    base: &KernelSpec,
    src: &Source,
    epsilons: &[f64],
    ms: &[f64],
    cfg: &SolverConfig,
    tail_radius: f64,
    threads: usize,
) -> Result<SweepResult, DiagnosticsError> {
    if epsilons.is_empty() || ms.is_empty() {
        return Err(DiagnosticsError::InvalidParameter(
            "empty sweep grid".into(),
        ));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DiagnosticsError::InvalidParameter(
            "epsilons must be strictly decreasing".into(),
        ));
    }
    if ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagnosticsError::InvalidParameter(
            "cutoffs must be strictly increasing".into(),
        ));
    }
    let mut kernels = Vec::new();
    for &eps in epsilons {
        for &m in ms {
            let params = TruncationParams::new(eps, m, src.reach())?;
            kernels.push(TruncatedKernel::new(base.clone(), params)?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| DiagnosticsError::InvalidParameter(e.to_string()))?;
    let cells: Vec<SweepCell> = pool.install(|| {
        kernels
            .par_iter()
            .map(|k| {
                let (epsilon, m) = (k.params().epsilon, k.m());
                let start = ClusterDistribution::new(src.dim(), 2.0 * m);
                match evolve_to_steady(&start, cfg, k, src) {
                    Ok(run) => SweepCell {
                        epsilon,
                        m,
                        converged: run.converged,
                        total_number: run.state.total_number(),
                        tail_count: run.state.tail_count(tail_radius),
                        residual: run.residual,
                        steps: run.steps,
                        error: None,
                    },
                    Err(e) => SweepCell {
                        epsilon,
                        m,
                        converged: false,
                        total_number: f64::NAN,
                        tail_count: f64::NAN,
                        residual: f64::NAN,
                        steps: 0,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    let verdict = sweep_verdict(&cells, ms.len());
    Ok(SweepResult {
        tail_radius,
        cells,
        verdict,
    })
}
