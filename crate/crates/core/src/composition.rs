//! Cluster compositions: points of the lattice N₀^d with the origin removed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositionError {
    #[error("composition must have at least one species")]
    Empty,
    #[error("composition {0:?} is the origin; every cluster holds at least one monomer")]
    Origin(Vec<u32>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Monomer counts per species. Ordered lexicographically, which fixes the
/// iteration order of every map keyed by compositions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Composition(Vec<u32>);

impl Composition {
    pub fn new(parts: Vec<u32>) -> Result<Self, CompositionError> {
        if parts.is_empty() {
            return Err(CompositionError::Empty);
        }
        if parts.iter().all(|&p| p == 0) {
            return Err(CompositionError::Origin(parts));
        }
        Ok(Self(parts))
    }

    /// Pure cluster of `count` monomers of species `species` in dimension `dim`.
    pub fn pure(dim: usize, species: usize, count: u32) -> Result<Self, CompositionError> {
        let mut parts = vec![0; dim];
        if species >= dim {
            return Err(CompositionError::DimensionMismatch {
                expected: dim,
                got: species + 1,
            });
        }
        parts[species] = count;
        Self::new(parts)
    }

    pub fn parts(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// ℓ¹ norm, the total number of monomers.
    pub fn norm(&self) -> u64 {
        norm_of(&self.0)
    }

    /// Componentwise sum; the result is never the origin.
    pub fn add(&self, other: &Composition) -> Composition {
        debug_assert_eq!(self.dim(), other.dim());
        Composition(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn check_dim(&self, dim: usize) -> Result<(), CompositionError> {
        if self.dim() == dim {
            Ok(())
        } else {
            Err(CompositionError::DimensionMismatch {
                expected: dim,
                got: self.dim(),
            })
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&p| f64::from(p)).collect()
    }
}

pub(crate) fn norm_of(parts: &[u32]) -> u64 {
    parts.iter().map(|&p| u64::from(p)).sum()
}

impl TryFrom<Vec<u32>> for Composition {
    type Error = CompositionError;

    fn try_from(parts: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(parts)
    }
}

impl From<Composition> for Vec<u32> {
    fn from(c: Composition) -> Self {
        c.0
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_rejected() {
        assert!(matches!(
            Composition::new(vec![0, 0]),
            Err(CompositionError::Origin(_))
        ));
        assert_eq!(Composition::new(vec![]), Err(CompositionError::Empty));
    }

    #[test]
    fn norm_and_sum() {
        let a = Composition::new(vec![3, 1]).unwrap();
        let b = Composition::new(vec![0, 5]).unwrap();
        assert_eq!(a.norm(), 4);
        assert_eq!(a.add(&b).parts(), &[3, 6]);
        assert_eq!(a.to_string(), "(3,1)");
    }

    #[test]
    fn ordering_is_lexicographic() {
        let a = Composition::new(vec![0, 9]).unwrap();
        let b = Composition::new(vec![1, 0]).unwrap();
        assert!(a < b);
    }
}
