//! Run configuration, read from and written to TOML.
//!
//! ```toml
//! dimension = 2
//!
//! [kernel]
//! family = "constant"
//! c = 1.0
//!
//! [[source]]
//! composition = [1, 0]
//! rate = 1.0
//!
//! [truncation]
//! epsilon = 0.0
//! m = 48.0
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::Composition;
use crate::kernels::{ClassifyError, KernelError, KernelSpec};
use crate::lattice::Source;
use crate::solver::{SolverConfig, SolverError};
use crate::truncation::{TruncatedKernel, TruncationParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot print config: {0}")]
    Print(#[from] toml::ser::Error),
    #[error("cutoff M = {m} violates M > 2L: the source reaches L = {reach}, so M must exceed {}", 2 * reach)]
    CutoffTooSmall { m: f64, reach: u64 },
    #[error("epsilon = {0} must be finite and non-negative")]
    Epsilon(f64),
    #[error("source rate at {at:?} is {rate}; rates must be finite and non-negative")]
    SourceRate { at: Vec<u32>, rate: f64 },
    #[error("source entry {at:?}: {msg}")]
    SourceEntry { at: Vec<u32>, msg: String },
    #[error("the source is empty or injects nothing")]
    EmptySource,
    #[error("dimension must be at least 1")]
    Dimension,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub composition: Vec<u32>,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(default)]
    pub epsilon: f64,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// Write a snapshot every this many accepted steps; 0 disables.
    pub snapshot_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Window ratio `b` of `b z ≤ |α| ≤ z`.
    pub b: f64,
    pub zeta_band: f64,
    pub eps_angle: f64,
    pub tail_radius: f64,
    /// Localization radii; empty means `M/8` and `3M/8`.
    pub localization_radii: Vec<f64>,
    /// Fit window `[z_min, z_max]`; empty means `[max(8, 4L), M/4]`.
    pub fit_window: Vec<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            b: 0.5,
            zeta_band: 2.0,
            eps_angle: 0.1,
            tail_radius: 8.0,
            localization_radii: Vec::new(),
            fit_window: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub ms: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.01],
            ms: vec![16.0, 32.0, 64.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    /// Seed for sampled classification of large tabulated kernels.
    #[serde(default)]
    pub seed: u64,
    pub kernel: KernelSpec,
    pub source: Vec<SourceEntry>,
    pub truncation: TruncationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dimension == 0 {
            return Err(ConfigError::Dimension);
        }
        self.kernel.validate()?;
        if let Some(kd) = self.kernel.dim() {
            if kd != self.dimension {
                return Err(ConfigError::Invalid(format!(
                    "kernel has {kd} species volumes but dimension = {}",
                    self.dimension
                )));
            }
        }
        let src = self.source()?;
        let t = &self.truncation;
        if !(t.epsilon.is_finite() && t.epsilon >= 0.0) {
            return Err(ConfigError::Epsilon(t.epsilon));
        }
        if !(t.m.is_finite() && t.m > 2.0 * src.reach() as f64) {
            return Err(ConfigError::CutoffTooSmall {
                m: t.m,
                reach: src.reach(),
            });
        }
        self.solver.validate()?;
        let d = &self.diagnostics;
        if !(d.b > 0.0 && d.b < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "diagnostics.b = {} must lie in (0, 1)",
                d.b
            )));
        }
        if !(d.zeta_band > 1.0 && d.eps_angle > 0.0 && d.tail_radius >= 1.0) {
            return Err(ConfigError::Invalid(
                "diagnostics need zeta_band > 1, eps_angle > 0 and tail_radius ≥ 1".into(),
            ));
        }
        if !(d.fit_window.is_empty()
            || d.fit_window.len() == 2 && d.fit_window[0] < d.fit_window[1])
        {
            return Err(ConfigError::Invalid(
                "diagnostics.fit_window must be [z_min, z_max] with z_min < z_max".into(),
            ));
        }
        Ok(())
    }

    pub fn source(&self) -> Result<Source, ConfigError> {
        let mut src = Source::new(self.dimension);
        for e in &self.source {
            if !(e.rate.is_finite() && e.rate >= 0.0) {
                return Err(ConfigError::SourceRate {
                    at: e.composition.clone(),
                    rate: e.rate,
                });
            }
            let at = e.composition.clone();
            let c = Composition::new(e.composition.clone()).map_err(|err| {
                ConfigError::SourceEntry {
                    at: at.clone(),
                    msg: err.to_string(),
                }
            })?;
            c.check_dim(self.dimension)
                .map_err(|err| ConfigError::SourceEntry {
                    at: at.clone(),
                    msg: err.to_string(),
                })?;
            src.add(c, e.rate).map_err(|err| ConfigError::SourceEntry {
                at,
                msg: err.to_string(),
            })?;
        }
        if src.injection_norm() <= 0.0 {
            return Err(ConfigError::EmptySource);
        }
        Ok(src)
    }

    pub fn truncation_params(&self) -> Result<TruncationParams, ConfigError> {
        let reach = self.source()?.reach();
        TruncationParams::new(self.truncation.epsilon, self.truncation.m, reach).map_err(|_| {
            ConfigError::CutoffTooSmall {
                m: self.truncation.m,
                reach,
            }
        })
    }

    pub fn truncated_kernel(&self) -> Result<TruncatedKernel, ConfigError> {
        let envelope = self.kernel.classify_seeded(self.seed)?;
        Ok(TruncatedKernel::with_envelope(
            self.kernel.clone(),
            envelope,
            self.truncation_params()?,
        ))
    }

    /// Configured fit window, or `[max(8, 4L), M/4]`.
    pub fn fit_window(&self) -> Result<(f64, f64), ConfigError> {
        match self.diagnostics.fit_window.as_slice() {
            [lo, hi] => Ok((*lo, *hi)),
            _ => Ok(crate::diagnostics::default_fit_window(
                self.source()?.reach(),
                self.truncation.m,
            )),
        }
    }

    pub fn localization_radii(&self) -> Vec<f64> {
        if self.diagnostics.localization_radii.is_empty() {
            vec![self.truncation.m / 8.0, 3.0 * self.truncation.m / 8.0]
        } else {
            self.diagnostics.localization_radii.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
dimension = 1

[kernel]
family = "constant"
c = 1.0

[[source]]
composition = [1]
rate = 1.0

[truncation]
m = 64.0
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.dimension, 1);
        assert_eq!(cfg.truncation.epsilon, 0.0);
        assert_eq!(cfg.solver, SolverConfig::default());
        assert_eq!(cfg.diagnostics.b, 0.5);
        assert_eq!(cfg.fit_window().unwrap(), (8.0, 16.0));
        assert_eq!(cfg.localization_radii(), vec![8.0, 24.0]);
        cfg.truncated_kernel().unwrap();
    }

    #[test]
    fn small_cutoff_names_the_constraint() {
        let text = MINIMAL
            .replace("composition = [1]", "composition = [4]")
            .replace("m = 64.0", "m = 2.0");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, ConfigError::CutoffTooSmall { reach: 4, .. }));
        assert!(err.to_string().contains("M > 2L"), "{err}");
    }

    #[test]
    fn negative_rate_is_rejected() {
        let err = RunConfig::parse(&MINIMAL.replace("rate = 1.0", "rate = -0.5")).unwrap_err();
        assert!(matches!(err, ConfigError::SourceRate { .. }));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = RunConfig::parse(&MINIMAL.replace("composition = [1]", "composition = [1, 0]"))
            .unwrap_err();
        assert!(matches!(err, ConfigError::SourceEntry { .. }));
        let err = RunConfig::parse(&MINIMAL.replace("composition = [1]", "composition = [0]"))
            .unwrap_err();
        assert!(matches!(err, ConfigError::SourceEntry { .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}\n[output]\nfolder = \"x\"\n")).is_err());
    }

    #[test]
    fn volume_kernels_must_match_dimension() {
        let text = MINIMAL.replace(
            "family = \"constant\"\nc = 1.0",
            "family = \"brownian\"\nvolumes = [1.0, 2.0]",
        );
        assert!(matches!(
            RunConfig::parse(&text).unwrap_err(),
            ConfigError::Invalid(_)
        ));
    }

    fn arb_kernel() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (0.1f64..5.0).prop_map(|c| KernelSpec::Constant { c }),
            (-0.5f64..0.9, -0.4f64..0.4)
                .prop_map(|(gamma, lambda)| KernelSpec::ProductPower { gamma, lambda }),
            (-0.5f64..0.9, 0.0f64..0.4, 0.1f64..3.0)
                .prop_map(|(gamma, p, c)| KernelSpec::EnvelopePower { gamma, p, c }),
            proptest::collection::vec(0.5f64..4.0, 2)
                .prop_map(|volumes| KernelSpec::Brownian { volumes }),
        ]
    }

    proptest! {
        #[test]
        fn parse_print_parse_is_idempotent(
            kernel in arb_kernel(),
            rates in proptest::collection::vec(0.01f64..10.0, 1..4),
            eps in 0.0f64..0.5,
            extra_m in 1.0f64..100.0,
        ) {
            let dimension = kernel.dim().unwrap_or(2);
            let source: Vec<SourceEntry> = rates
                .iter()
                .enumerate()
                .map(|(i, &rate)| {
                    let mut composition = vec![0; dimension];
                    composition[i % dimension] = i as u32 + 1;
                    SourceEntry { composition, rate }
                })
                .collect();
            let reach = rates.len() as f64;
            let cfg = RunConfig {
                dimension,
                seed: 7,
                kernel,
                source,
                truncation: TruncationConfig { epsilon: eps, m: 2.0 * reach + extra_m },
                solver: SolverConfig::default(),
                output: OutputConfig::default(),
                diagnostics: DiagnosticsConfig::default(),
                sweep: SweepConfig::default(),
            };
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
