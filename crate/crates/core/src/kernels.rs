//! Coagulation kernels on the integer lattice.
//!
//! Every kernel is evaluated in terms of the ℓ¹ norms of its arguments and,
//! for the physical families, the cluster volume `V(α) = Σ_j α_j v_j`.
//! Classification places a kernel in the envelope class
//!
//! ```text
//! c1 (|a|+|b|)^γ Φ(t) ≤ K(a,b) ≤ c2 (|a|+|b|)^γ Φ(t),   Φ(t) = t^{-p} (1-t)^{-p},
//! ```
//!
//! with `t = |a| / (|a|+|b|)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{norm_of, Composition, CompositionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("monomer volume v_{index} = {value} must be positive and finite")]
    NonPositiveVolume { index: usize, value: f64 },
    #[error("kernel has {expected} monomer volumes but was evaluated in dimension {got}")]
    VolumeDimension { expected: usize, got: usize },
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("cluster size {norm} lies outside the tabulated range 1..={max}")]
    OutsideTable { norm: f64, max: u32 },
    #[error("kernel evaluated to {0}, expected a positive finite rate")]
    NonPositiveRate(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("kernel could not be classified: {0}")]
    Unclassifiable(String),
}

/// Rates tabulated by cluster size, `values[(i-1)*max_norm + (j-1)] = K(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedKernel {
    pub max_norm: u32,
    pub values: Vec<f64>,
}

impl TabulatedKernel {
    pub fn from_fn(max_norm: u32, f: impl Fn(u32, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity((max_norm as usize).pow(2));
        for i in 1..=max_norm {
            for j in 1..=max_norm {
                values.push(f(i, j));
            }
        }
        Self { max_norm, values }
    }

    fn get(&self, na: f64, nb: f64) -> Result<f64, KernelError> {
        let idx = |n: f64| -> Result<usize, KernelError> {
            if n.fract() != 0.0 || n < 1.0 || n > f64::from(self.max_norm) {
                return Err(KernelError::OutsideTable {
                    norm: n,
                    max: self.max_norm,
                });
            }
            Ok(n as usize - 1)
        };
        let (i, j) = (idx(na)?, idx(nb)?);
        Ok(self.values[i * self.max_norm as usize + j])
    }
}

/// A coagulation kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `K ≡ c`.
    Constant {
        c: f64,
    },
    /// Free molecular regime, `(1/V_a + 1/V_b)^{1/2} (V_a^{1/3} + V_b^{1/3})^2`.
    FreeMolecular {
        volumes: Vec<f64>,
    },
    /// Diffusive (Brownian), `(V_a^{-1/3} + V_b^{-1/3}) (V_a^{1/3} + V_b^{1/3})`.
    Brownian {
        volumes: Vec<f64>,
    },
    /// `|a|^{γ+λ} |b|^{-λ} + |b|^{γ+λ} |a|^{-λ}`.
    ProductPower {
        gamma: f64,
        lambda: f64,
    },
    /// `c (|a|+|b|)^γ Φ(t)`, the envelope itself.
    EnvelopePower {
        gamma: f64,
        p: f64,
        #[serde(default = "unit")]
        c: f64,
    },
    Tabulated(TabulatedKernel),
    /// `K(a,b) |a|^p |b|^p`.
    Rescaled {
        base: Box<KernelSpec>,
        p: f64,
    },
}

fn unit() -> f64 {
    1.0
}

/// Envelope class `(γ, p, c1, c2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub gamma: f64,
    pub p: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Envelope {
    /// `(|a|+|b|)^γ Φ(|a|/(|a|+|b|))`, written symmetrically in `a` and `b`.
    pub fn shape(&self, na: f64, nb: f64) -> f64 {
        let s = na + nb;
        s.powf(self.gamma) * ((na / s) * (nb / s)).powf(-self.p)
    }

    pub fn phi(&self, t: f64) -> f64 {
        (t * (1.0 - t)).powf(-self.p)
    }
}

/// Existence of stationary injection solutions: `γ + 2p < 1`.
pub fn existence_predicate(env: &Envelope) -> bool {
    env.gamma + 2.0 * env.p < 1.0
}

/// `K̃(a,b) = K(a,b) |a|^p |b|^p`.
pub fn rescale(spec: &KernelSpec, p: f64) -> KernelSpec {
    KernelSpec::Rescaled {
        base: Box::new(spec.clone()),
        p,
    }
}

#[derive(Clone, Copy)]
enum Point<'a> {
    Lattice(&'a [u32]),
    Real(&'a [f64]),
}

impl Point<'_> {
    fn dim(&self) -> usize {
        match self {
            Point::Lattice(p) => p.len(),
            Point::Real(p) => p.len(),
        }
    }

    fn norm(&self) -> f64 {
        match self {
            Point::Lattice(p) => norm_of(p) as f64,
            Point::Real(p) => p.iter().sum(),
        }
    }

    fn volume(&self, volumes: &[f64]) -> Result<f64, KernelError> {
        if volumes.len() != self.dim() {
            return Err(KernelError::VolumeDimension {
                expected: volumes.len(),
                got: self.dim(),
            });
        }
        Ok(match self {
            Point::Lattice(p) => p.iter().zip(volumes).map(|(&a, v)| f64::from(a) * v).sum(),
            Point::Real(p) => p.iter().zip(volumes).map(|(a, v)| a * v).sum(),
        })
    }
}

pub(crate) fn free_molecular_rate(va: f64, vb: f64) -> f64 {
    let c = va.cbrt() + vb.cbrt();
    (1.0 / va + 1.0 / vb).sqrt() * c * c
}

pub(crate) fn brownian_rate(va: f64, vb: f64) -> f64 {
    let (ca, cb) = (va.cbrt(), vb.cbrt());
    (1.0 / ca + 1.0 / cb) * (ca + cb)
}

fn product_power_rate(gamma: f64, lambda: f64, na: f64, nb: f64) -> f64 {
    let term = |x: f64, y: f64| x.powf(gamma + lambda) * y.powf(-lambda);
    term(na, nb) + term(nb, na)
}

impl KernelSpec {
    /// Number of species the kernel is tied to, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            KernelSpec::FreeMolecular { volumes } | KernelSpec::Brownian { volumes } => {
                Some(volumes.len())
            }
            KernelSpec::Rescaled { base, .. } => base.dim(),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(KernelError::InvalidParameter(format!(
                    "{name} = {v} is not finite"
                )))
            }
        };
        match self {
            KernelSpec::Constant { c } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(KernelError::InvalidParameter(format!(
                        "constant rate c = {c} must be positive"
                    )));
                }
            }
            KernelSpec::FreeMolecular { volumes } | KernelSpec::Brownian { volumes } => {
                if volumes.is_empty() {
                    return Err(KernelError::InvalidParameter(
                        "at least one monomer volume is required".into(),
                    ));
                }
                for (index, &value) in volumes.iter().enumerate() {
                    if !(value.is_finite() && value > 0.0) {
                        return Err(KernelError::NonPositiveVolume { index, value });
                    }
                }
            }
            KernelSpec::ProductPower { gamma, lambda } => {
                finite("gamma", *gamma)?;
                finite("lambda", *lambda)?;
                if (gamma + lambda).max(-lambda) > 1.0 {
                    log::warn!(
                        "product kernel with gamma={gamma}, lambda={lambda} violates the \
                         non-gelling condition max(gamma+lambda, -lambda) <= 1"
                    );
                }
            }
            KernelSpec::EnvelopePower { gamma, p, c } => {
                finite("gamma", *gamma)?;
                finite("p", *p)?;
                if !(c.is_finite() && *c > 0.0) {
                    return Err(KernelError::InvalidParameter(format!(
                        "envelope constant c = {c} must be positive"
                    )));
                }
            }
            KernelSpec::Tabulated(t) => {
                let n = t.max_norm as usize;
                if n == 0 || t.values.len() != n * n {
                    return Err(KernelError::InvalidParameter(format!(
                        "tabulated kernel needs {}x{} values, got {}",
                        n,
                        n,
                        t.values.len()
                    )));
                }
                for i in 0..n {
                    for j in 0..n {
                        let v = t.values[i * n + j];
                        if !(v.is_finite() && v > 0.0) {
                            return Err(KernelError::NonPositiveRate(v));
                        }
                        if v != t.values[j * n + i] {
                            return Err(KernelError::InvalidParameter(format!(
                                "tabulated kernel is not symmetric at ({}, {})",
                                i + 1,
                                j + 1
                            )));
                        }
                    }
                }
            }
            KernelSpec::Rescaled { base, p } => {
                finite("p", *p)?;
                base.validate()?;
            }
        }
        Ok(())
    }

    /// `K(a, b)` for lattice compositions.
    pub fn eval(&self, a: &Composition, b: &Composition) -> Result<f64, KernelError> {
        b.check_dim(a.dim())?;
        self.eval_parts(a.parts(), b.parts())
    }

    /// `K(a, b)` on raw monomer counts; used by the pair loops.
    pub fn eval_parts(&self, a: &[u32], b: &[u32]) -> Result<f64, KernelError> {
        if a.len() != b.len() {
            return Err(CompositionError::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            }
            .into());
        }
        self.eval_point(Point::Lattice(a), Point::Lattice(b))
    }

    /// `K(x, y)` for continuous compositions `x, y ∈ R₊^d \ {0}`.
    pub fn eval_real(&self, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
        if x.len() != y.len() {
            return Err(CompositionError::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            }
            .into());
        }
        self.eval_point(Point::Real(x), Point::Real(y))
    }

    fn eval_point(&self, a: Point<'_>, b: Point<'_>) -> Result<f64, KernelError> {
        let rate = match self {
            KernelSpec::Constant { c } => *c,
            KernelSpec::FreeMolecular { volumes } => {
                free_molecular_rate(a.volume(volumes)?, b.volume(volumes)?)
            }
            KernelSpec::Brownian { volumes } => {
                brownian_rate(a.volume(volumes)?, b.volume(volumes)?)
            }
            KernelSpec::ProductPower { gamma, lambda } => {
                product_power_rate(*gamma, *lambda, a.norm(), b.norm())
            }
            KernelSpec::EnvelopePower { gamma, p, c } => {
                let env = Envelope {
                    gamma: *gamma,
                    p: *p,
                    c1: *c,
                    c2: *c,
                };
                c * env.shape(a.norm(), b.norm())
            }
            KernelSpec::Tabulated(t) => t.get(a.norm(), b.norm())?,
            KernelSpec::Rescaled { base, p } => {
                base.eval_point(a, b)? * (a.norm().powf(*p) * b.norm().powf(*p))
            }
        };
        if rate.is_finite() && rate > 0.0 {
            Ok(rate)
        } else {
            Err(KernelError::NonPositiveRate(rate))
        }
    }

    /// Envelope constants, with the sampling seed used only for large tables.
    pub fn classify(&self) -> Result<Envelope, ClassifyError> {
        self.classify_seeded(0)
    }

    pub fn classify_seeded(&self, seed: u64) -> Result<Envelope, ClassifyError> {
        self.validate()?;
        Ok(match self {
            KernelSpec::Constant { c } => Envelope {
                gamma: 0.0,
                p: 0.0,
                c1: *c,
                c2: *c,
            },
            KernelSpec::FreeMolecular { volumes } => {
                sampled_envelope(1.0 / 6.0, 0.5, volumes, free_molecular_rate)
            }
            KernelSpec::Brownian { volumes } => {
                sampled_envelope(0.0, 1.0 / 3.0, volumes, brownian_rate)
            }
            KernelSpec::ProductPower { gamma, lambda } => product_power_envelope(*gamma, *lambda),
            KernelSpec::EnvelopePower { gamma, p, c } => Envelope {
                gamma: *gamma,
                p: *p,
                c1: *c,
                c2: *c,
            },
            KernelSpec::Tabulated(t) => classify_table(t, seed)?,
            KernelSpec::Rescaled { base, p } => {
                let env = base.classify_seeded(seed)?;
                Envelope {
                    gamma: env.gamma + 2.0 * p,
                    p: env.p - p,
                    ..env
                }
            }
        })
    }
}

/// Safety margin applied to envelope constants found by sampling.
pub const SAMPLED_MARGIN: f64 = 1.05;

/// Envelope constants of a volume-based kernel: the ratio `K / (s^γ Φ)` is
/// homogeneous of degree zero, so it is sampled at `s = 1` over size ratios
/// `10^-8 ..= 10^8` and per-monomer volumes spanning `[min v, max v]`.
fn sampled_envelope(gamma: f64, p: f64, volumes: &[f64], rate: fn(f64, f64) -> f64) -> Envelope {
    let vmin = volumes.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = volumes.iter().copied().fold(0.0, f64::max);
    let vgrid: Vec<f64> = if vmin == vmax {
        vec![vmin]
    } else {
        (0..5)
            .map(|k| vmin * (vmax / vmin).powf(f64::from(k) / 4.0))
            .collect()
    };
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for k in -800..=800 {
        let r = 10f64.powf(f64::from(k) / 100.0);
        let (t, u) = (r / (1.0 + r), 1.0 / (1.0 + r));
        let phi = (t * u).powf(-p);
        for &va in &vgrid {
            for &vb in &vgrid {
                let ratio = rate(va * t, vb * u) / phi;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
        }
    }
    Envelope {
        gamma,
        p,
        c1: lo / SAMPLED_MARGIN,
        c2: hi * SAMPLED_MARGIN,
    }
}

/// `p = max{λ, -(γ+λ)}`; the constants are the extrema over `t ∈ (0,1)` of
/// `t^A (1-t)^B + t^B (1-t)^A` with `A = p+γ+λ ≥ 0`, `B = p-λ ≥ 0`.
fn product_power_envelope(gamma: f64, lambda: f64) -> Envelope {
    let p = lambda.max(-(gamma + lambda));
    let (a, b) = (p + gamma + lambda, p - lambda);
    let h = |t: f64| {
        let u = 1.0 - t;
        t.powf(a) * u.powf(b) + t.powf(b) * u.powf(a)
    };
    let at_zero = f64::from(u8::from(a == 0.0)) + f64::from(u8::from(b == 0.0));
    let (lo, hi) = extrema_on_half(h, at_zero);
    Envelope {
        gamma,
        p,
        c1: lo,
        c2: hi,
    }
}

/// Infimum and supremum of a function on `(0, 1/2]` with known limit at 0.
fn extrema_on_half(h: impl Fn(f64) -> f64, at_zero: f64) -> (f64, f64) {
    let grid: Vec<f64> = (0..=4000)
        .map(|k| 0.5 * (-f64::from(k) / 100.0).exp())
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&t| h(t)).collect();
    let mut lo = at_zero.min(vals[0]);
    let mut hi = at_zero.max(vals[0]);
    for k in 0..grid.len() {
        lo = lo.min(vals[k]);
        hi = hi.max(vals[k]);
        if k == 0 || k + 1 == grid.len() {
            continue;
        }
        let (l, r) = (grid[k + 1], grid[k - 1]);
        if vals[k] <= vals[k - 1] && vals[k] <= vals[k + 1] {
            lo = lo.min(golden(&h, l, r, false));
        }
        if vals[k] >= vals[k - 1] && vals[k] >= vals[k + 1] {
            hi = hi.max(golden(&h, l, r, true));
        }
    }
    (lo, hi)
}

fn golden(h: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, maximize: bool) -> f64 {
    let sign = if maximize { -1.0 } else { 1.0 };
    let g = |t: f64| sign * h(t);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    for _ in 0..200 {
        if g(c) < g(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - ratio * (b - a);
        d = a + ratio * (b - a);
        if (b - a).abs() < 1e-15 * b.abs().max(1e-300) {
            break;
        }
    }
    h(0.5 * (a + b))
}

/// Largest `c2 / c1` accepted when classifying tabulated kernels.
pub const MAX_TABLE_SPREAD: f64 = 1.0e3;
const MAX_TABLE_SAMPLES: usize = 4096;

/// Least-squares fit of `ln K = ln c + γ ln s - p ln(t(1-t))` over the table.
fn classify_table(t: &TabulatedKernel, seed: u64) -> Result<Envelope, ClassifyError> {
    let n = t.max_norm;
    let mut pairs: Vec<(u32, u32)> = (1..=n).flat_map(|i| (i..=n).map(move |j| (i, j))).collect();
    if pairs.len() > MAX_TABLE_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(MAX_TABLE_SAMPLES);
        pairs.sort_unstable();
    }
    let rows: Vec<[f64; 4]> = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (f64::from(i), f64::from(j));
            let s = a + b;
            let k = t.values[(i as usize - 1) * n as usize + (j as usize - 1)];
            [1.0, s.ln(), -((a / s) * (b / s)).ln(), k.ln()]
        })
        .collect();
    // Normal equations for the 3-parameter fit.
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for r in &rows {
        for i in 0..3 {
            aty[i] += r[i] * r[3];
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    let coef = solve3(ata, aty).ok_or_else(|| {
        ClassifyError::Unclassifiable(format!("table of {n} sizes does not determine (gamma, p)"))
    })?;
    let (gamma, p) = (coef[1], coef[2]);
    let env = Envelope {
        gamma,
        p,
        c1: 1.0,
        c2: 1.0,
    };
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for &(i, j) in &pairs {
        let k = t.values[(i as usize - 1) * n as usize + (j as usize - 1)];
        let ratio = k / env.shape(f64::from(i), f64::from(j));
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    if !(lo > 0.0 && hi.is_finite()) || hi / lo > MAX_TABLE_SPREAD {
        return Err(ClassifyError::Unclassifiable(format!(
            "fitted gamma={gamma:.4}, p={p:.4} leaves envelope spread c2/c1={:.3e} above {MAX_TABLE_SPREAD:e}",
            hi / lo
        )));
    }
    Ok(Envelope {
        gamma,
        p,
        c1: lo,
        c2: hi,
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..3 {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}
