//! Sparse cluster distributions, sources and their aggregate moments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::composition::{Composition, CompositionError};

/// Concentrations below this value are dropped from the support.
pub const PRUNE_FLOOR: f64 = 1.0e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("concentration {value} at {at} must be finite and non-negative")]
    Negative { at: Composition, value: f64 },
    #[error("{at} has norm {norm}, above the cap {cap}")]
    AboveCap {
        at: Composition,
        norm: u64,
        cap: f64,
    },
    #[error("window ratio b = {0} must lie in (0, 1)")]
    WindowRatio(f64),
    #[error("source rate {value} at {at} must be finite and non-negative")]
    NegativeSource { at: Composition, value: f64 },
    #[error("snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
}

/// Sparse map `α ↦ n_α` with every key satisfying `1 ≤ |α| ≤ cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDistribution {
    dim: usize,
    cap: f64,
    entries: BTreeMap<Composition, f64>,
}

impl ClusterDistribution {
    pub fn new(dim: usize, cap: f64) -> Self {
        Self {
            dim,
            cap,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Sets `n_α`; values below [`PRUNE_FLOOR`] remove the entry.
    pub fn set(&mut self, at: Composition, value: f64) -> Result<(), LatticeError> {
        at.check_dim(self.dim)?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(LatticeError::Negative { at, value });
        }
        let norm = at.norm();
        if norm as f64 > self.cap {
            return Err(LatticeError::AboveCap {
                at,
                norm,
                cap: self.cap,
            });
        }
        if value < PRUNE_FLOOR {
            self.entries.remove(&at);
        } else {
            self.entries.insert(at, value);
        }
        Ok(())
    }

    pub fn get(&self, at: &Composition) -> f64 {
        self.entries.get(at).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Composition, f64)> + '_ {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn total_number(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn max_norm(&self) -> u64 {
        self.entries
            .keys()
            .map(Composition::norm)
            .max()
            .unwrap_or(0)
    }

    /// `(1/z) Σ_{bz ≤ |α| ≤ z} n_α`, window closed on both ends.
    pub fn dyadic_window_mass(&self, z: f64, b: f64) -> Result<f64, LatticeError> {
        if !(b > 0.0 && b < 1.0) {
            return Err(LatticeError::WindowRatio(b));
        }
        let lo = b * z;
        let sum: f64 = self
            .iter()
            .filter(|(k, _)| {
                let r = k.norm() as f64;
                lo <= r && r <= z
            })
            .map(|(_, v)| v)
            .sum();
        Ok(sum / z)
    }

    /// `Σ_{|α| ≥ r} n_α`.
    pub fn tail_count(&self, r: f64) -> f64 {
        self.iter()
            .filter(|(k, _)| k.norm() as f64 >= r)
            .map(|(_, v)| v)
            .sum()
    }

    /// Per-species mass `Σ_α α_j n_α`.
    pub fn species_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.dim];
        for (k, v) in self.iter() {
            for (m, &a) in mass.iter_mut().zip(k.parts()) {
                *m += f64::from(a) * v;
            }
        }
        mass
    }

    /// Text snapshot: `# d=<d> M=<M> t=<t>` then `α_1 … α_d n` per line.
    pub fn to_snapshot(&self, m: f64, t: f64) -> String {
        let mut out = format!("# d={} M={} t={}\n", self.dim, fmt17(m), fmt17(t));
        for (k, v) in self.iter() {
            for p in k.parts() {
                write!(out, "{p} ").unwrap();
            }
            writeln!(out, "{}", fmt17(v)).unwrap();
        }
        out
    }

    /// Parses a snapshot, returning the state with cap `2M`, `M`, and `t`.
    pub fn from_snapshot(text: &str) -> Result<(Self, f64, f64), LatticeError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(LatticeError::Snapshot {
            line: 1,
            msg: "empty snapshot".into(),
        })?;
        let bad = |line: usize, msg: String| LatticeError::Snapshot { line, msg };
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| bad(1, "header must start with '#'".into()))?;
        let mut dim = None;
        let mut m = None;
        let mut t = None;
        for field in header.split_whitespace() {
            let (key, val) = field
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed header field '{field}'")))?;
            match key {
                "d" => dim = val.parse::<usize>().ok().filter(|&d| d >= 1),
                "M" => {
                    m = val
                        .parse::<f64>()
                        .ok()
                        .filter(|m| m.is_finite() && *m > 0.0)
                }
                "t" => t = val.parse::<f64>().ok().filter(|t| t.is_finite()),
                _ => return Err(bad(1, format!("unknown header field '{key}'"))),
            }
        }
        let (dim, m, t) = match (dim, m, t) {
            (Some(d), Some(m), Some(t)) => (d, m, t),
            _ => return Err(bad(1, "header needs valid d, M and t".into())),
        };
        let mut state = Self::new(dim, 2.0 * m);
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 1 {
                return Err(bad(
                    lineno,
                    format!("expected {} fields, found {}", dim + 1, fields.len()),
                ));
            }
            let parts = fields[..dim]
                .iter()
                .map(|f| f.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, format!("bad monomer count: {e}")))?;
            let value: f64 = fields[dim]
                .parse()
                .map_err(|e| bad(lineno, format!("bad concentration: {e}")))?;
            let at = Composition::new(parts).map_err(|e| bad(lineno, e.to_string()))?;
            if state.entries.contains_key(&at) {
                return Err(bad(lineno, format!("duplicate composition {at}")));
            }
            state
                .set(at, value)
                .map_err(|e| bad(lineno, e.to_string()))?;
        }
        Ok((state, m, t))
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Finite-support injection `α ↦ s_α ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    dim: usize,
    entries: BTreeMap<Composition, f64>,
}

impl Source {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_entries(
        dim: usize,
        entries: impl IntoIterator<Item = (Composition, f64)>,
    ) -> Result<Self, LatticeError> {
        let mut src = Self::new(dim);
        for (at, rate) in entries {
            src.add(at, rate)?;
        }
        Ok(src)
    }

    pub fn add(&mut self, at: Composition, rate: f64) -> Result<(), LatticeError> {
        at.check_dim(self.dim)?;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(LatticeError::NegativeSource { at, value: rate });
        }
        if rate > 0.0 {
            *self.entries.entry(at).or_insert(0.0) += rate;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, at: &Composition) -> f64 {
        self.entries.get(at).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Composition, f64)> + '_ {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `L = max{|α| : s_α > 0}`, zero for an empty source.
    pub fn reach(&self) -> u64 {
        self.entries
            .keys()
            .map(Composition::norm)
            .max()
            .unwrap_or(0)
    }

    pub fn total_rate(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn max_rate(&self) -> f64 {
        self.entries.values().copied().fold(0.0, f64::max)
    }

    /// `J₀ = Σ_α α s_α`.
    pub fn injection(&self) -> Vec<f64> {
        self.injection_within(f64::INFINITY)
    }

    /// `Σ_{|α| ≤ r} α s_α`.
    pub fn injection_within(&self, r: f64) -> Vec<f64> {
        let mut j = vec![0.0; self.dim];
        for (k, s) in self.iter().filter(|(k, _)| k.norm() as f64 <= r) {
            for (jj, &a) in j.iter_mut().zip(k.parts()) {
                *jj += f64::from(a) * s;
            }
        }
        j
    }

    /// `|J₀| = Σ_α |α| s_α`.
    pub fn injection_norm(&self) -> f64 {
        self.iter().map(|(k, s)| k.norm() as f64 * s).sum()
    }

    /// Normalised mass direction `J₀ / |J₀|`.
    pub fn direction(&self) -> Option<Vec<f64>> {
        let norm = self.injection_norm();
        (norm > 0.0).then(|| self.injection().into_iter().map(|j| j / norm).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub total_number: f64,
    pub species_mass: Vec<f64>,
    pub injection: Vec<f64>,
    pub injection_norm: f64,
}

pub fn moments(state: &ClusterDistribution, src: &Source) -> Result<Moments, LatticeError> {
    if state.dim() != src.dim() {
        return Err(CompositionError::DimensionMismatch {
            expected: state.dim(),
            got: src.dim(),
        }
        .into());
    }
    Ok(Moments {
        total_number: state.total_number(),
        species_mass: state.species_mass(),
        injection: src.injection(),
        injection_norm: src.injection_norm(),
    })
}
