//! Time integration of the truncated coagulation system
//!
//! ```text
//! ∂_t n_α = ζ_M(α)/2 Σ_{β<α} K_{ε,M}(α-β, β) n_{α-β} n_β - n_α Σ_β K_{ε,M}(α, β) n_β + s_α
//! ```
//!
//! towards a stationary state.
//!
//! The state lives on a set of *slots*: the compositions reachable from the
//! initial support and the source by repeated coagulation, restricted to the
//! region where `ζ_M > 0`. Unordered slot pairs `(i ≤ j)` are enumerated once
//! into a pair plan carrying the kernel value and the slot of `α_i + α_j`, so
//! a right-hand side evaluation is a single pass over the plan. The pass is
//! split into chunks whose size depends only on the problem, each chunk
//! accumulating into private buffers that are merged in chunk order; results
//! are therefore bit-identical for any thread count.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{Composition, CompositionError};
use crate::lattice::{ClusterDistribution, LatticeError, Source, PRUNE_FLOOR};
use crate::truncation::{TruncatedKernel, TruncationError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Truncation(#[from] TruncationError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("rate of change at {at} is not finite ({value}); rates overflowed")]
    Overflow { at: Composition, value: f64 },
    #[error("step size {dt:e} fell below {floor:e} at t = {t}; the system is too stiff for the explicit scheme")]
    Stiff { t: f64, dt: f64, floor: f64 },
    #[error("{at} has norm {norm} but the truncated kernel only supports norms below {limit}")]
    OutsideSupport {
        at: Composition,
        norm: u64,
        limit: f64,
    },
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub dt_init: f64,
    pub dt_max: f64,
    pub safety: f64,
    /// Stop once `max |rhs| / max(|J₀|, max s)` drops to this value.
    pub steady_tol: f64,
    pub max_time: f64,
    pub max_steps: u64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt_init: 1e-3,
            dt_max: 10.0,
            safety: 0.9,
            steady_tol: 1e-8,
            max_time: 1e6,
            max_steps: 1_000_000,
            rtol: 1e-6,
            atol: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("dt_init", self.dt_init),
            ("dt_max", self.dt_max),
            ("steady_tol", self.steady_tol),
            ("max_time", self.max_time),
            ("rtol", self.rtol),
            ("atol", self.atol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SolverError::Config(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(SolverError::Config(format!(
                "safety = {} must lie in (0, 1]",
                self.safety
            )));
        }
        if self.steady_tol >= 1.0 {
            return Err(SolverError::Config(format!(
                "steady_tol = {} must be below 1",
                self.steady_tol
            )));
        }
        if self.max_steps == 0 {
            return Err(SolverError::Config("max_steps must be positive".into()));
        }
        if self.dt_init > self.dt_max {
            return Err(SolverError::Config("dt_init exceeds dt_max".into()));
        }
        Ok(())
    }
}

const NO_TARGET: u32 = u32::MAX;
/// Pair plans above this many entries are not cached; kernel values are
/// recomputed on every evaluation instead.
const PLAN_LIMIT: usize = 20_000_000;
const MIN_CHUNK: usize = 1 << 15;
const MAX_CHUNKS: usize = 64;

#[derive(Debug, Clone, Copy)]
struct PairEntry {
    i: u32,
    j: u32,
    target: u32,
    rate: f64,
}

#[derive(Debug)]
enum PairPlan {
    Cached(Vec<PairEntry>),
    Streaming,
}

/// Slots, source and pair plan for one truncated problem.
#[derive(Debug)]
pub struct Workspace {
    kernel: TruncatedKernel,
    dim: usize,
    comps: Vec<Composition>,
    index: HashMap<Composition, u32>,
    zeta: Vec<f64>,
    source: Vec<f64>,
    /// Slots `0..active` take part in pair interactions.
    active: usize,
    plan: PairPlan,
    pair_count: usize,
    injection_scale: f64,
}

impl Workspace {
    /// Slots for the full coagulation closure of the initial support and the
    /// source inside `|α| < M`.
    pub fn for_evolution(
        kernel: &TruncatedKernel,
        src: &Source,
        initial: &ClusterDistribution,
    ) -> Result<Self, SolverError> {
        Self::build(kernel, src, initial, true)
    }

    /// Slots for one right-hand side evaluation: the support of `state` and
    /// `src` plus every composition receiving gain from a support pair.
    pub fn for_rhs(
        kernel: &TruncatedKernel,
        src: &Source,
        state: &ClusterDistribution,
    ) -> Result<Self, SolverError> {
        Self::build(kernel, src, state, false)
    }

    fn build(
        kernel: &TruncatedKernel,
        src: &Source,
        state: &ClusterDistribution,
        closure: bool,
    ) -> Result<Self, SolverError> {
        let dim = state.dim();
        if src.dim() != dim {
            return Err(CompositionError::DimensionMismatch {
                expected: dim,
                got: src.dim(),
            }
            .into());
        }
        if let Some(kd) = kernel.base().dim() {
            if kd != dim {
                return Err(CompositionError::DimensionMismatch {
                    expected: kd,
                    got: dim,
                }
                .into());
            }
        }
        let m = kernel.m();
        let limit = 2.0 * m;
        let mut seeds: Vec<Composition> = state.iter().map(|(k, _)| k.clone()).collect();
        seeds.extend(src.iter().map(|(k, _)| k.clone()));
        seeds.sort();
        seeds.dedup();
        for s in &seeds {
            if s.norm() as f64 >= limit {
                return Err(SolverError::OutsideSupport {
                    at: s.clone(),
                    norm: s.norm(),
                    limit,
                });
            }
        }
        let mut index: HashMap<Composition, u32> = HashMap::new();
        let mut comps: Vec<Composition> = Vec::new();
        for s in seeds {
            index.insert(s.clone(), comps.len() as u32);
            comps.push(s);
        }
        let n_seeds = comps.len();
        // Breadth-first closure: slot k is combined with every slot j ≤ k.
        let mut k = 0;
        while k < comps.len() && (closure || k < n_seeds) {
            let upper = if closure { k } else { k.min(n_seeds - 1) };
            for j in 0..=upper {
                let sum = comps[k].add(&comps[j]);
                let r = sum.norm() as f64;
                if kernel.zeta(r) > 0.0 && !index.contains_key(&sum) {
                    index.insert(sum.clone(), comps.len() as u32);
                    comps.push(sum);
                }
            }
            k += 1;
        }
        let active = if closure { comps.len() } else { n_seeds };
        let zeta = comps.iter().map(|c| kernel.zeta(c.norm() as f64)).collect();
        let source = comps.iter().map(|c| src.get(c)).collect();
        let pair_count = active * (active + 1) / 2;
        let mut ws = Self {
            kernel: kernel.clone(),
            dim,
            comps,
            index,
            zeta,
            source,
            active,
            plan: PairPlan::Streaming,
            pair_count,
            injection_scale: src.injection_norm().max(src.max_rate()),
        };
        if pair_count <= PLAN_LIMIT {
            ws.plan = PairPlan::Cached(ws.build_plan()?);
        }
        Ok(ws)
    }

    fn pair_entry(&self, i: usize, j: usize) -> Result<PairEntry, SolverError> {
        let (a, b) = (&self.comps[i], &self.comps[j]);
        let rate = self.kernel.rate_parts(a.parts(), b.parts())?;
        let sum_norm = (a.norm() + b.norm()) as f64;
        let target = if rate > 0.0 && self.kernel.zeta(sum_norm) > 0.0 {
            let sum = a.add(b);
            *self
                .index
                .get(&sum)
                .expect("gain target missing from slot closure")
        } else {
            NO_TARGET
        };
        Ok(PairEntry {
            i: i as u32,
            j: j as u32,
            target,
            rate,
        })
    }

    fn build_plan(&self) -> Result<Vec<PairEntry>, SolverError> {
        let rows: Vec<Vec<PairEntry>> = (0..self.active)
            .into_par_iter()
            .map(|i| {
                (i..self.active)
                    .map(|j| self.pair_entry(i, j))
                    .filter(|e| !matches!(e, Ok(p) if p.rate == 0.0))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(rows.into_iter().flatten().collect())
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn compositions(&self) -> &[Composition] {
        &self.comps
    }

    pub fn kernel(&self) -> &TruncatedKernel {
        &self.kernel
    }

    /// `max(|J₀|, max s_α)`, the scale of the steady-state residual.
    pub fn injection_scale(&self) -> f64 {
        self.injection_scale
    }

    /// Dense slot vector of a distribution.
    pub fn load(&self, state: &ClusterDistribution) -> Result<Vec<f64>, SolverError> {
        let mut y = vec![0.0; self.comps.len()];
        for (k, v) in state.iter() {
            match self.index.get(k) {
                Some(&i) => y[i as usize] = v,
                None => {
                    return Err(SolverError::OutsideSupport {
                        at: k.clone(),
                        norm: k.norm(),
                        limit: 2.0 * self.kernel.m(),
                    })
                }
            }
        }
        Ok(y)
    }

    /// Sparse distribution of a slot vector; entries below the floor are dropped.
    pub fn store(&self, y: &[f64]) -> ClusterDistribution {
        let mut st = ClusterDistribution::new(self.dim, 2.0 * self.kernel.m());
        for (c, &v) in self.comps.iter().zip(y) {
            if v >= PRUNE_FLOOR {
                st.set(c.clone(), v).expect("slot values are valid");
            }
        }
        st
    }

    fn chunk_len(&self) -> usize {
        MIN_CHUNK.max(self.pair_count.div_ceil(MAX_CHUNKS))
    }

    /// Right-hand side on slot values `y`, written into `out`.
    pub fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<(), SolverError> {
        let n = self.comps.len();
        debug_assert_eq!(y.len(), n);
        let partials: Vec<(Vec<f64>, Vec<f64>)> = match &self.plan {
            PairPlan::Cached(plan) => plan
                .par_chunks(self.chunk_len())
                .map(|chunk| {
                    let mut gain = vec![0.0; n];
                    let mut loss = vec![0.0; n];
                    for e in chunk {
                        accumulate(e, y, &mut gain, &mut loss);
                    }
                    (gain, loss)
                })
                .collect(),
            PairPlan::Streaming => {
                let rows_per_chunk = (self.active / MAX_CHUNKS).max(1);
                (0..self.active)
                    .step_by(rows_per_chunk)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|start| {
                        let mut gain = vec![0.0; n];
                        let mut loss = vec![0.0; n];
                        for i in start..(start + rows_per_chunk).min(self.active) {
                            if y[i] == 0.0 {
                                continue;
                            }
                            for j in i..self.active {
                                let e = self.pair_entry(i, j)?;
                                accumulate(&e, y, &mut gain, &mut loss);
                            }
                        }
                        Ok((gain, loss))
                    })
                    .collect::<Result<_, SolverError>>()?
            }
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut loss_rate = vec![0.0; n];
        for (gain, loss) in &partials {
            for k in 0..n {
                out[k] += gain[k];
                loss_rate[k] += loss[k];
            }
        }
        for k in 0..n {
            let v = self.zeta[k] * out[k] - y[k] * loss_rate[k] + self.source[k];
            if !v.is_finite() {
                return Err(SolverError::Overflow {
                    at: self.comps[k].clone(),
                    value: v,
                });
            }
            out[k] = v;
        }
        Ok(())
    }
}

#[inline]
fn accumulate(e: &PairEntry, y: &[f64], gain: &mut [f64], loss: &mut [f64]) {
    let (i, j) = (e.i as usize, e.j as usize);
    let (yi, yj) = (y[i], y[j]);
    if i == j {
        loss[i] += e.rate * yi;
        if e.target != NO_TARGET {
            gain[e.target as usize] += 0.5 * e.rate * yi * yi;
        }
    } else {
        loss[i] += e.rate * yj;
        loss[j] += e.rate * yi;
        if e.target != NO_TARGET {
            gain[e.target as usize] += e.rate * yi * yj;
        }
    }
}

/// Right-hand side of the truncated system at `state`, keyed by every
/// composition in the support of `state`, the source, or a gain target.
pub fn rhs(
    state: &ClusterDistribution,
    kernel: &TruncatedKernel,
    src: &Source,
) -> Result<BTreeMap<Composition, f64>, SolverError> {
    let ws = Workspace::for_rhs(kernel, src, state)?;
    let y = ws.load(state)?;
    let mut out = vec![0.0; ws.len()];
    ws.eval(&y, &mut out)?;
    Ok(ws
        .comps
        .iter()
        .zip(out)
        .enumerate()
        .filter(|(k, (_, v))| *k < ws.active || *v != 0.0)
        .map(|(_, (c, v))| (c.clone(), v))
        .collect())
}

/// Scaled residual `max_α |r_α| / scale`; the plain maximum when the scale is 0.
fn residual_of(r: &[f64], scale: f64) -> f64 {
    let m = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        m / scale
    } else {
        m
    }
}

/// One accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub dt: f64,
    pub residual: f64,
    pub total_number: f64,
}

/// Adaptive Bogacki–Shampine 3(2) integrator with positivity-limited steps.
#[derive(Debug)]
pub struct Integrator {
    ws: Workspace,
    cfg: SolverConfig,
    y: Vec<f64>,
    /// Right-hand side at `y` (first-same-as-last).
    f: Vec<f64>,
    t: f64,
    dt: f64,
    steps: u64,
    rejected: u64,
    /// Current relative tolerance, tightened towards `steady_tol / 10` as the
    /// residual falls so that controller noise never masks convergence.
    rtol: f64,
}

impl Integrator {
    pub fn new(
        kernel: &TruncatedKernel,
        src: &Source,
        initial: &ClusterDistribution,
        cfg: SolverConfig,
    ) -> Result<Self, SolverError> {
        cfg.validate()?;
        let ws = Workspace::for_evolution(kernel, src, initial)?;
        let y = ws.load(initial)?;
        let mut f = vec![0.0; y.len()];
        ws.eval(&y, &mut f)?;
        Ok(Self {
            ws,
            cfg,
            y,
            f,
            t: 0.0,
            dt: cfg.dt_init,
            steps: 0,
            rejected: 0,
            rtol: cfg.rtol,
        })
        .map(|mut it: Self| {
            it.retune();
            it
        })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn state(&self) -> ClusterDistribution {
        self.ws.store(&self.y)
    }

    pub fn total_number(&self) -> f64 {
        self.y.iter().sum()
    }

    pub fn species_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.ws.dim];
        for (c, &v) in self.ws.comps.iter().zip(&self.y) {
            for (m, &a) in mass.iter_mut().zip(c.parts()) {
                *m += f64::from(a) * v;
            }
        }
        mass
    }

    fn retune(&mut self) {
        self.rtol = self
            .cfg
            .rtol
            .min(self.residual().max(0.1 * self.cfg.steady_tol));
    }

    pub fn residual(&self) -> f64 {
        residual_of(&self.f, self.ws.injection_scale)
    }

    /// Explicit Euler update with a fixed step, clamped at zero.
    pub fn forward_euler(&mut self, dt: f64) -> Result<(), SolverError> {
        for (y, f) in self.y.iter_mut().zip(&self.f) {
            *y += dt * f;
            if *y < PRUNE_FLOOR {
                *y = 0.0;
            }
        }
        self.t += dt;
        self.steps += 1;
        self.ws.eval(&self.y, &mut self.f)
    }

    /// Takes one accepted adaptive step and returns the step size used.
    pub fn step(&mut self) -> Result<f64, SolverError> {
        let n = self.y.len();
        let floor = 1e-14 * self.cfg.dt_init;
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let atol = self.cfg.atol * self.rtol / self.cfg.rtol;
        loop {
            let dt = self.dt;
            if dt < floor {
                return Err(SolverError::Stiff {
                    t: self.t,
                    dt,
                    floor,
                });
            }
            for k in 0..n {
                stage[k] = self.y[k] + 0.5 * dt * self.f[k];
            }
            self.ws.eval(&stage, &mut k2)?;
            for k in 0..n {
                stage[k] = self.y[k] + 0.75 * dt * k2[k];
            }
            self.ws.eval(&stage, &mut k3)?;
            let mut negative = false;
            for k in 0..n {
                y_new[k] = self.y[k]
                    + dt * (2.0 / 9.0 * self.f[k] + 1.0 / 3.0 * k2[k] + 4.0 / 9.0 * k3[k]);
                if y_new[k] < -PRUNE_FLOOR {
                    negative = true;
                } else if y_new[k] < PRUNE_FLOOR {
                    y_new[k] = 0.0;
                }
            }
            if negative {
                self.rejected += 1;
                self.dt = 0.5 * dt;
                continue;
            }
            self.ws.eval(&y_new, &mut k4)?;
            let mut err = 0.0_f64;
            for k in 0..n {
                let e = dt
                    * (-5.0 / 72.0 * self.f[k] + 1.0 / 12.0 * k2[k] + 1.0 / 9.0 * k3[k]
                        - 1.0 / 8.0 * k4[k]);
                let sc = atol + self.rtol * self.y[k].abs().max(y_new[k].abs());
                err = err.max(e.abs() / sc);
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (self.cfg.safety * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                std::mem::swap(&mut self.y, &mut y_new);
                std::mem::swap(&mut self.f, &mut k4);
                self.t += dt;
                self.steps += 1;
                self.dt = (dt * factor).min(self.cfg.dt_max);
                self.retune();
                return Ok(dt);
            }
            self.rejected += 1;
            self.dt = dt * factor.min(0.9);
        }
    }
}

/// Outcome of a run towards a stationary state.
#[derive(Debug, Clone)]
pub struct SteadyRun {
    pub state: ClusterDistribution,
    pub residual: f64,
    pub t_final: f64,
    pub steps: u64,
    pub rejected: u64,
    pub converged: bool,
    /// Largest `Σ n_α` seen at any accepted step.
    pub max_total_number: f64,
    /// `Σ_{|α| > M} n_α` in the returned state.
    pub mass_beyond_cutoff: f64,
    pub history: Vec<HistoryRow>,
}

/// Row of the per-run time series.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub t: f64,
    pub total_number: f64,
    pub mass: Vec<f64>,
    pub residual: f64,
    pub dt: f64,
}

impl SteadyRun {
    /// CSV `t,total_number,mass_1..mass_d,residual,dt`.
    pub fn history_csv(&self) -> String {
        let d = self.state.dim();
        let mut out = String::from("t,total_number");
        for j in 1..=d {
            out.push_str(&format!(",mass_{j}"));
        }
        out.push_str(",residual,dt\n");
        for row in &self.history {
            out.push_str(&format!("{:e},{:e}", row.t, row.total_number));
            for m in &row.mass {
                out.push_str(&format!(",{m:e}"));
            }
            out.push_str(&format!(",{:e},{:e}\n", row.residual, row.dt));
        }
        out
    }
}

/// Integrates from `initial` until the scaled residual reaches
/// `cfg.steady_tol` or the step/time budget runs out.
pub fn evolve_to_steady(
    initial: &ClusterDistribution,
    cfg: &SolverConfig,
    kernel: &TruncatedKernel,
    src: &Source,
) -> Result<SteadyRun, SolverError> {
    evolve_with_observer(initial, cfg, kernel, src, |_, _| {})
}

/// As [`evolve_to_steady`], calling `observer` after every accepted step.
pub fn evolve_with_observer(
    initial: &ClusterDistribution,
    cfg: &SolverConfig,
    kernel: &TruncatedKernel,
    src: &Source,
    mut observer: impl FnMut(&StepRecord, &Integrator),
) -> Result<SteadyRun, SolverError> {
    let mut integ = Integrator::new(kernel, src, initial, *cfg)?;
    let mut history = vec![HistoryRow {
        t: 0.0,
        total_number: integ.total_number(),
        mass: integ.species_mass(),
        residual: integ.residual(),
        dt: 0.0,
    }];
    let mut max_total = integ.total_number();
    let mut converged = integ.residual() <= cfg.steady_tol;
    while !converged && integ.steps() < cfg.max_steps && integ.time() < cfg.max_time {
        let dt = integ.step()?;
        let total = integ.total_number();
        max_total = max_total.max(total);
        let record = StepRecord {
            step: integ.steps(),
            t: integ.time(),
            dt,
            residual: integ.residual(),
            total_number: total,
        };
        history.push(HistoryRow {
            t: record.t,
            total_number: total,
            mass: integ.species_mass(),
            residual: record.residual,
            dt,
        });
        observer(&record, &integ);
        converged = record.residual <= cfg.steady_tol;
    }
    let state = integ.state();
    let m = kernel.m();
    let beyond = state
        .iter()
        .filter(|(k, _)| k.norm() as f64 > m)
        .map(|(_, v)| v)
        .sum();
    if beyond > 0.0 {
        log::warn!("stationary state carries {beyond:e} clusters beyond the cutoff M = {m}");
    }
    Ok(SteadyRun {
        residual: integ.residual(),
        t_final: integ.time(),
        steps: integ.steps(),
        rejected: integ.rejected(),
        converged,
        max_total_number: max_total,
        mass_beyond_cutoff: beyond,
        history,
        state,
    })
}
