//! Bounded, compactly supported kernels `K_{ε,M} = K_ε · ω_M` and the gain
//! cutoff `ζ_M`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{norm_of, Composition, CompositionError};
use crate::kernels::{ClassifyError, Envelope, KernelError, KernelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TruncationError {
    #[error("cutoff scale M = {m} must satisfy M > 2L with source reach L = {reach}")]
    CutoffTooSmall { m: f64, reach: u64 },
    #[error("regularizer epsilon = {0} must be finite and non-negative")]
    Epsilon(f64),
    #[error("base kernel is not classified: {0}")]
    Unclassified(#[from] ClassifyError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub epsilon: f64,
    pub m: f64,
    pub reach: u64,
}

impl TruncationParams {
    pub fn new(epsilon: f64, m: f64, reach: u64) -> Result<Self, TruncationError> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(TruncationError::Epsilon(epsilon));
        }
        if !(m.is_finite() && m > 2.0 * reach as f64 && m > 0.0) {
            return Err(TruncationError::CutoffTooSmall { m, reach });
        }
        Ok(Self { epsilon, m, reach })
    }

    /// Largest cluster norm that can receive gain, `max{n : n < M}`.
    pub fn max_gain_norm(&self) -> u64 {
        (self.m.ceil() as u64).saturating_sub(1)
    }
}

fn ramp(m: f64, r: f64) -> f64 {
    ((2.0 * m - r) / m).clamp(0.0, 1.0)
}

/// `ω_M(a, b)`: 1 on `[1, M]²`, 0 once either size reaches `2M`, linear
/// ramps in each argument between.
pub fn omega(m: f64, ra: f64, rb: f64) -> f64 {
    ramp(m, ra) * ramp(m, rb)
}

/// `ζ_M(a)`: 1 for `|a| ≤ M/2`, 0 for `|a| ≥ M`, linear between.
pub fn zeta(m: f64, r: f64) -> f64 {
    (2.0 * (m - r) / m).clamp(0.0, 1.0)
}

/// `K_{ε,M}` built on a classified base kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedKernel {
    base: KernelSpec,
    envelope: Envelope,
    params: TruncationParams,
}

impl TruncatedKernel {
    pub fn new(base: KernelSpec, params: TruncationParams) -> Result<Self, TruncationError> {
        let envelope = base.classify()?;
        Ok(Self::with_envelope(base, envelope, params))
    }

    pub fn with_envelope(base: KernelSpec, envelope: Envelope, params: TruncationParams) -> Self {
        Self {
            base,
            envelope,
            params,
        }
    }

    pub fn base(&self) -> &KernelSpec {
        &self.base
    }

    pub fn envelope(&self) -> &Envelope {
        &self.envelope
    }

    pub fn params(&self) -> &TruncationParams {
        &self.params
    }

    pub fn m(&self) -> f64 {
        self.params.m
    }

    /// `K_ε = min{(|a|+|b|)^γ, 1/ε} Φ + ε` with `Φ = K / (|a|+|b|)^γ`.
    pub fn k_eps(&self, a: &Composition, b: &Composition) -> Result<f64, TruncationError> {
        b.check_dim(a.dim())?;
        self.k_eps_parts(a.parts(), b.parts())
    }

    pub(crate) fn k_eps_parts(&self, a: &[u32], b: &[u32]) -> Result<f64, TruncationError> {
        let k = self.base.eval_parts(a, b)?;
        Ok(self.regularize(k, (norm_of(a) + norm_of(b)) as f64))
    }

    fn regularize(&self, k: f64, s: f64) -> f64 {
        let eps = self.params.epsilon;
        if eps == 0.0 {
            return k;
        }
        let grow = s.powf(self.envelope.gamma);
        if grow <= 1.0 / eps {
            k + eps
        } else {
            (k / grow) / eps + eps
        }
    }

    /// `K_{ε,M}(a, b) = K_ε(a, b) ω_M(a, b)`.
    pub fn rate(&self, a: &Composition, b: &Composition) -> Result<f64, TruncationError> {
        b.check_dim(a.dim())?;
        self.rate_parts(a.parts(), b.parts())
    }

    pub(crate) fn rate_parts(&self, a: &[u32], b: &[u32]) -> Result<f64, TruncationError> {
        let (ra, rb) = (norm_of(a) as f64, norm_of(b) as f64);
        let w = omega(self.params.m, ra, rb);
        if w == 0.0 {
            return Ok(0.0);
        }
        Ok(self.k_eps_parts(a, b)? * w)
    }

    pub fn zeta(&self, r: f64) -> f64 {
        zeta(self.params.m, r)
    }

    /// Envelope-implied extrema of `K_ε` over cluster sizes in `[1, M]`.
    fn envelope_extrema(&self) -> (f64, f64) {
        let eps = self.params.epsilon;
        let top = self.params.m.floor().max(1.0) as u64;
        let cap = if eps > 0.0 { 1.0 / eps } else { f64::INFINITY };
        let shape = |a: f64, b: f64| {
            let s = a + b;
            s.powf(self.envelope.gamma).min(cap) * ((a / s) * (b / s)).powf(-self.envelope.p)
        };
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for a in 1..=top {
            for b in a..=top {
                let v = shape(a as f64, b as f64);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (self.envelope.c1 * lo + eps, self.envelope.c2 * hi + eps)
    }

    /// `a₁`: lower bound of `K_{ε,M}` on `[1, M]²`.
    pub fn lower_bound(&self) -> f64 {
        self.envelope_extrema().0
    }

    /// `a₂`: upper bound of `K_{ε,M}` on `[1, M]²`.
    pub fn upper_bound(&self) -> f64 {
        self.envelope_extrema().1
    }
}
