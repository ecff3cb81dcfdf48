//! Reward-functional estimation and value-function approximation by
//! derivative-free search over parametric policy families.
//!
//! `estimate_j` integrates the running reward by left-endpoint quadrature
//! and adds the terminal reward; the mean is the across-scenario average of
//! within-scenario averages, and the standard error comes from scenario-level
//! batching — scenarios are the independent units, particles within a
//! scenario are coupled through the conditional slice.
//!
//! `optimize_value` runs a two-stage search with common random numbers: a
//! coarse tensor grid, then local coordinate refinement around the incumbent
//! (halving the grid cell at each round). Ties break toward the lowest
//! candidate index.

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::policies::{family_grid, InfoClass, Policy, PolicyFamily};
use crate::problems::{ControlBox, InitialLaw, MeasureView, ProblemSpec, SummaryKind, TerminalCtx};
use crate::simulator::{running_rewards, simulate, terminal_rewards, TimeGrid};
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;

/// Monte Carlo value estimate: the unit of all value comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub scenarios: usize,
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
}

impl ValueEstimate {
    pub fn combined_se(&self, other: &ValueEstimate) -> f64 {
        (self.std_error * self.std_error + other.std_error * other.std_error).sqrt()
    }
}

/// Reward functional estimate under a fixed policy.
pub fn estimate_j(
    spec: &ProblemSpec,
    policy: &Policy,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let ens = simulate(spec, policy, grid, m, n, seed)?;
    let running = running_rewards(spec, &ens, None);
    let terminal = terminal_rewards(spec, &ens);
    let per_particle: Vec<f64> = running
        .iter()
        .zip(&terminal)
        .map(|(r, g)| r + g)
        .collect();
    Ok(batched_estimate(&per_particle, m, n, grid.steps, seed))
}

/// Scenario-batched mean and standard error. With a single scenario the
/// standard error falls back to particle-level batching.
pub fn batched_estimate(
    per_particle: &[f64],
    m: usize,
    n: usize,
    steps: usize,
    seed: u64,
) -> ValueEstimate {
    let scenario_means: Vec<f64> = (0..m)
        .map(|j| per_particle[j * n..(j + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let mean = scenario_means.iter().sum::<f64>() / m as f64;
    let std_error = if m >= 2 {
        let var = scenario_means
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (m - 1) as f64;
        (var / m as f64).sqrt()
    } else if n >= 2 {
        let var = per_particle
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    ValueEstimate {
        mean,
        std_error,
        scenarios: m,
        particles: n,
        steps,
        seed,
    }
}

/// A searchable policy family: a parameter template, the indices being
/// searched, per-index bounds, and grid/refinement settings. Extra candidate
/// parameter vectors (e.g. embeddings of a smaller family's trace) are
/// appended after the tensor grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub info_class: InfoClass,
    pub family: PolicyFamily,
    pub clip: ControlBox,
    pub summary: SummaryKind,
    pub template: Vec<f64>,
    pub free: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    pub refinements: usize,
    #[serde(default)]
    pub extra_candidates: Vec<Vec<f64>>,
}

impl SearchSpace {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let expected = self.family.param_len(state_dim, self.clip.dim());
        if self.template.len() != expected {
            return Err(Error::ParamsLength {
                expected,
                got: self.template.len(),
            });
        }
        if self.free.len() != self.bounds.len() {
            return Err(Error::InvalidArgument(
                "free indices and bounds must have equal length".into(),
            ));
        }
        if self.free.iter().any(|&i| i >= self.template.len()) {
            return Err(Error::InvalidArgument("free index out of range".into()));
        }
        for extra in &self.extra_candidates {
            if extra.len() != expected {
                return Err(Error::ParamsLength {
                    expected,
                    got: extra.len(),
                });
            }
        }
        Ok(())
    }

    pub fn policy(&self, params: Vec<f64>) -> Result<Policy> {
        let mut p = Policy {
            info_class: self.info_class,
            family: self.family.clone(),
            params,
            clip: self.clip.clone(),
            summary: self.summary,
        };
        p.summary = self.summary;
        Ok(p)
    }

    fn assemble(&self, free_values: &[f64]) -> Vec<f64> {
        let mut params = self.template.clone();
        for (slot, &v) in self.free.iter().zip(free_values) {
            params[*slot] = v;
        }
        params
    }

    /// Coarse-stage candidate parameter vectors: tensor grid over the free
    /// coordinates, then the extra candidates.
    pub fn candidates(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        if self.free.is_empty() {
            out.push(self.template.clone());
        } else {
            for pt in family_grid(&self.bounds, self.resolution)? {
                out.push(self.assemble(&pt));
            }
        }
        out.extend(self.extra_candidates.iter().cloned());
        Ok(out)
    }

    fn cell_widths(&self) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| {
                if self.resolution > 1 {
                    (hi - lo) / (self.resolution - 1) as f64
                } else {
                    0.5 * (hi - lo)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub params: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub best_params: Vec<f64>,
    pub estimate: ValueEstimate,
    pub trace: Vec<TraceEntry>,
    pub best_effort: bool,
    pub evaluations: usize,
}

impl OptimizeOutcome {
    pub fn best_policy(&self, space: &SearchSpace) -> Result<Policy> {
        space.policy(self.best_params.clone())
    }
}

/// Derivative-free maximization (by the problem's objective sign) over a
/// policy family. All candidates are evaluated with the same seed (common
/// random numbers), so nested families give per-seed monotone incumbents.
pub fn optimize_value(
    spec: &ProblemSpec,
    space: &SearchSpace,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
    max_evals: usize,
) -> Result<OptimizeOutcome> {
    space.validate(spec.state_dim)?;
    let cands = space.candidates()?;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_est: Option<ValueEstimate> = None;
    let mut best_params = cands[0].clone();
    let mut evals = 0usize;
    let mut exhausted = false;

    let eval = |params: &[f64],
                    trace: &mut Vec<TraceEntry>,
                    evals: &mut usize|
     -> Result<Option<ValueEstimate>> {
        if *evals >= max_evals {
            return Ok(None);
        }
        *evals += 1;
        let policy = space.policy(params.to_vec())?;
        policy.validate(spec.state_dim)?;
        let est = estimate_j(spec, &policy, grid, m, n, seed)?;
        trace.push(TraceEntry {
            index: trace.len(),
            params: params.to_vec(),
            mean: est.mean,
            std_error: est.std_error,
        });
        Ok(Some(est))
    };

    for params in &cands {
        match eval(params, &mut trace, &mut evals)? {
            Some(est) => {
                let score = spec.objective.score(est.mean);
                if score > best_score {
                    best_score = score;
                    best_idx = trace.len() - 1;
                    best_est = Some(est);
                    best_params = params.clone();
                }
            }
            None => {
                exhausted = true;
                break;
            }
        }
    }

    // Local coordinate refinement: halve the grid cell `refinements` times,
    // probing ± the current step along each free coordinate.
    if !exhausted && !space.free.is_empty() {
        let widths = space.cell_widths();
        let mut free_values: Vec<f64> = space
            .free
            .iter()
            .map(|&slot| best_params[slot])
            .collect();
        'rounds: for round in 1..=space.refinements {
            for (d, &(lo, hi)) in space.bounds.iter().enumerate() {
                let step = widths[d] / (1u64 << round) as f64;
                if step == 0.0 {
                    continue;
                }
                for dir in [-1.0, 1.0] {
                    let cand = (free_values[d] + dir * step).clamp(lo, hi);
                    if cand == free_values[d] {
                        continue;
                    }
                    let mut probe = free_values.clone();
                    probe[d] = cand;
                    let params = space.assemble(&probe);
                    match eval(&params, &mut trace, &mut evals)? {
                        Some(est) => {
                            let score = spec.objective.score(est.mean);
                            if score > best_score {
                                best_score = score;
                                best_idx = trace.len() - 1;
                                best_est = Some(est);
                                best_params = params;
                                free_values = probe;
                            }
                        }
                        None => {
                            exhausted = true;
                            break 'rounds;
                        }
                    }
                }
            }
        }
    }

    let estimate = best_est.ok_or_else(|| {
        Error::InvalidArgument("optimize_value evaluated no candidates (budget 0?)".into())
    })?;
    let _ = best_idx;
    Ok(OptimizeOutcome {
        best_params,
        estimate,
        trace,
        best_effort: exhausted,
        evaluations: evals,
    })
}

/// Monte Carlo budget for restarted (inner) value problems.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RestartBudget {
    pub scenarios: usize,
    pub particles: usize,
    /// Steps per unit of remaining time (at least one step overall).
    pub steps_per_unit: f64,
    pub max_evals: usize,
}

impl RestartBudget {
    pub fn steps_for(&self, remaining: f64) -> usize {
        ((remaining * self.steps_per_unit).round() as usize).max(1)
    }
}

/// Value restarted from a realized state-slice measure at `t_start`:
/// draws initial states by resampling the measure's atoms and optimizes over
/// the family on `[t_start, T]`. At `t_start = T` no dynamics remain and the
/// estimate is the exact mean of the terminal reward over the measure.
pub fn value_at_measure(
    spec: &ProblemSpec,
    t_start: f64,
    measure: &EmpiricalMeasure,
    space: &SearchSpace,
    budget: &RestartBudget,
    seed: u64,
) -> Result<OptimizeOutcome> {
    if measure.is_empty() {
        return Err(Error::EmptyInput("restart measure"));
    }
    if measure.dim() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            context: "restart measure",
            expected: spec.state_dim,
            got: measure.dim(),
        });
    }
    let remaining = spec.horizon - t_start;
    if remaining <= 1e-12 {
        let mean = terminal_mean_over(spec, measure);
        let estimate = ValueEstimate {
            mean,
            std_error: 0.0,
            scenarios: 0,
            particles: measure.len(),
            steps: 0,
            seed,
        };
        let params = space.candidates()?.into_iter().next().ok_or(Error::EmptyInput(
            "search space has no candidates",
        ))?;
        return Ok(OptimizeOutcome {
            best_params: params.clone(),
            estimate: estimate.clone(),
            trace: vec![TraceEntry {
                index: 0,
                params,
                mean: estimate.mean,
                std_error: 0.0,
            }],
            best_effort: false,
            evaluations: 0,
        });
    }
    let grid = TimeGrid::new(t_start, spec.horizon, budget.steps_for(remaining))?;
    let restarted = spec.with_initial_law(InitialLaw::Atoms {
        measure: measure.clone(),
    });
    optimize_value(
        &restarted,
        space,
        &grid,
        budget.scenarios,
        budget.particles,
        seed,
        budget.max_evals,
    )
}

/// Weighted mean of the terminal reward over a measure's atoms, with the
/// measure itself as the terminal slice.
pub fn terminal_mean_over(spec: &ProblemSpec, measure: &EmpiricalMeasure) -> f64 {
    let sd = spec.state_dim;
    let atoms = measure.len();
    let mut states = Vec::with_capacity(atoms * sd);
    for p in measure.points() {
        states.extend_from_slice(p);
    }
    let mut mean = vec![0.0; sd];
    for (p, w) in measure.points().iter().zip(measure.weights()) {
        for c in 0..sd {
            mean[c] += w * p[c];
        }
    }
    let empty: [f64; 0] = [];
    let view = MeasureView::new(&states, &empty, atoms, sd, 0, &mean);
    let t_row = [spec.horizon];
    let mut acc = 0.0;
    for (p, w) in measure.points().iter().zip(measure.weights()) {
        let path = crate::problems::PathSlice::new(&t_row, p, sd);
        let ctx = TerminalCtx {
            path,
            measure: view,
        };
        acc += w * (spec.terminal_reward)(&ctx);
    }
    acc
}

/// Search-trace CSV: candidate index, params…, mean, std_error.
pub fn trace_to_csv<W: IoWrite>(trace: &[TraceEntry], w: &mut W) -> Result<()> {
    let width = trace.first().map(|t| t.params.len()).unwrap_or(0);
    write!(w, "index")?;
    for c in 0..width {
        write!(w, ",param_{c}")?;
    }
    writeln!(w, ",mean,std_error")?;
    for entry in trace {
        write!(w, "{}", entry.index)?;
        for p in &entry.params {
            write!(w, ",{p}")?;
        }
        writeln!(w, ",{},{}", entry.mean, entry.std_error)?;
    }
    Ok(())
}
