//! Control rules organized by information class.
//!
//! Classes are ordered by what a rule may read at time `t`:
//! - `CommonNoise`: the common-noise path and conditional-slice statistics
//!   (both measurable for the common-noise filtration);
//! - `Strong`: additionally the particle's initial state and its own
//!   idiosyncratic noise path (equivalently, anything the strong solution map
//!   produces from them);
//! - `Feedback`: the particle's own path summary `Φ_t(X)` plus slice
//!   statistics — a subclass of `Strong` realized directly;
//! - `Randomized`: `Strong` augmented with an independent uniform stream per
//!   particle, the implementable face of weak (externally randomized) rules.
//!
//! Policies are immutable, cheap to clone, and always clip their output into
//! the control box.

use crate::error::{Error, Result};
use crate::problems::{ControlBox, SummaryKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoClass {
    CommonNoise,
    Strong,
    Feedback,
    Randomized,
}

impl InfoClass {
    pub fn name(&self) -> &'static str {
        match self {
            InfoClass::CommonNoise => "common_noise",
            InfoClass::Strong => "strong",
            InfoClass::Feedback => "feedback",
            InfoClass::Randomized => "randomized",
        }
    }

    /// Whether rules of this class may read the particle's own summary.
    fn allows_own_state(&self) -> bool {
        !matches!(self, InfoClass::CommonNoise)
    }

    fn allows_dither(&self) -> bool {
        matches!(self, InfoClass::Randomized)
    }
}

/// Parametric control families. Parameter layouts (for control dimension `m`
/// and state dimension `n`):
/// - `Constant`: `m` values.
/// - `PiecewiseConstant`: `pieces × m`, constant on equal time bins.
/// - `LinearFeedback`: `m × (1 + 2n)` as `u = k0 + K1·x + K2·mean`.
/// - `GainSchedule`: `bins × m × (1 + 2n)`, a time-binned `LinearFeedback`.
/// - `Table`: `time_bins × state_bins × m`, lookup on (time, summary[0]).
/// - `DitheredLinear`: `m × (1 + 2n) + 1`, `LinearFeedback` plus a trailing
///   amplitude on an independent uniform dither.
/// - `Spliced`: no own parameters; delegates to `before` strictly before
///   `switch_time` and to `after` from it on (concatenated rules).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    Constant,
    PiecewiseConstant { pieces: usize },
    LinearFeedback,
    GainSchedule { bins: usize },
    Table { time_bins: usize, state_bins: usize, state_lo: f64, state_hi: f64 },
    DitheredLinear,
    Spliced {
        switch_time: f64,
        before: Box<Policy>,
        after: Box<Policy>,
    },
}

impl PolicyFamily {
    pub fn param_len(&self, state_dim: usize, control_dim: usize) -> usize {
        match self {
            PolicyFamily::Constant => control_dim,
            PolicyFamily::PiecewiseConstant { pieces } => pieces * control_dim,
            PolicyFamily::LinearFeedback => control_dim * (1 + 2 * state_dim),
            PolicyFamily::GainSchedule { bins } => bins * control_dim * (1 + 2 * state_dim),
            PolicyFamily::Table {
                time_bins,
                state_bins,
                ..
            } => time_bins * state_bins * control_dim,
            PolicyFamily::DitheredLinear => control_dim * (1 + 2 * state_dim) + 1,
            PolicyFamily::Spliced { .. } => 0,
        }
    }

    fn reads_own_state(&self, params: &[f64], state_dim: usize, control_dim: usize) -> bool {
        match self {
            PolicyFamily::Constant | PolicyFamily::PiecewiseConstant { .. } => false,
            PolicyFamily::Table { .. } => true,
            PolicyFamily::Spliced { before, after, .. } => {
                before
                    .family
                    .reads_own_state(&before.params, state_dim, control_dim)
                    || after
                        .family
                        .reads_own_state(&after.params, state_dim, control_dim)
            }
            PolicyFamily::LinearFeedback | PolicyFamily::DitheredLinear => {
                // Own-state reads only happen through the K1 block.
                (0..control_dim)
                    .any(|r| (0..state_dim).any(|c| params[r * (1 + 2 * state_dim) + 1 + c] != 0.0))
            }
            PolicyFamily::GainSchedule { bins } => {
                let block = control_dim * (1 + 2 * state_dim);
                (0..*bins).any(|b| {
                    (0..control_dim).any(|r| {
                        (0..state_dim)
                            .any(|c| params[b * block + r * (1 + 2 * state_dim) + 1 + c] != 0.0)
                    })
                })
            }
        }
    }

    fn reads_dither(&self, params: &[f64]) -> bool {
        match self {
            PolicyFamily::DitheredLinear => *params.last().unwrap_or(&0.0) != 0.0,
            PolicyFamily::Spliced { before, after, .. } => {
                before.family.reads_dither(&before.params)
                    || after.family.reads_dither(&after.params)
            }
            _ => false,
        }
    }
}

/// Everything a policy may read when choosing the control for one particle at
/// one step. Fields forbidden by the information class are empty. Histories
/// carry increments strictly before the current step (predictability).
#[derive(Debug, Clone, Default)]
pub struct InfoView {
    pub t: f64,
    pub step: usize,
    pub class_name: &'static str,
    /// Own path summary Φ_t(X); empty for common-noise rules.
    pub summary: Vec<f64>,
    /// Initial state of the own particle; strong/randomized only.
    pub initial_state: Vec<f64>,
    /// Conditional slice statistics (measurable for the common-noise
    /// filtration): per-coordinate mean and central second moment.
    pub slice_mean: Vec<f64>,
    pub slice_var: Vec<f64>,
    /// Common-noise increments, rows 0..step (row-major, ℓ per row).
    pub common_increments: Vec<f64>,
    /// Idiosyncratic increments, rows 0..step; strong/randomized only.
    pub idio_increments: Vec<f64>,
    /// Independent uniform in [0,1); randomized class only.
    pub dither: Option<f64>,
}

impl InfoView {
    pub fn common_rows(&self, ell: usize) -> usize {
        if ell == 0 {
            0
        } else {
            self.common_increments.len() / ell
        }
    }

    pub fn idio_rows(&self, d: usize) -> usize {
        if d == 0 {
            0
        } else {
            self.idio_increments.len() / d
        }
    }
}

/// A control rule: information class, family, parameters, clip box, and the
/// path summary the feedback reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub info_class: InfoClass,
    pub family: PolicyFamily,
    pub params: Vec<f64>,
    pub clip: ControlBox,
    #[serde(default = "default_summary")]
    pub summary: SummaryKind,
}

fn default_summary() -> SummaryKind {
    SummaryKind::RunningState
}

impl Policy {
    pub fn new(
        info_class: InfoClass,
        family: PolicyFamily,
        params: Vec<f64>,
        clip: ControlBox,
    ) -> Result<Self> {
        let p = Policy {
            info_class,
            family,
            params,
            clip,
            summary: SummaryKind::RunningState,
        };
        p.validate(1).map(|_| p)
    }

    /// Validate parameter count and class/family measurability for a given
    /// state dimension.
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let expected = self.family.param_len(state_dim, self.clip.dim());
        if self.params.len() != expected {
            return Err(Error::ParamsLength {
                expected,
                got: self.params.len(),
            });
        }
        if !self.info_class.allows_own_state()
            && self
                .family
                .reads_own_state(&self.params, state_dim, self.clip.dim())
        {
            return Err(Error::ClassMismatch {
                family: format!("{:?}", self.family),
                class: self.info_class.name().to_string(),
            });
        }
        if self.family.reads_dither(&self.params) && !self.info_class.allows_dither() {
            return Err(Error::ClassMismatch {
                family: format!("{:?}", self.family),
                class: self.info_class.name().to_string(),
            });
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.clip.dim()
    }

    /// Evaluate the rule on a view, writing the clipped control into `out`.
    ///
    /// `horizon` is the (t_start, t_end) pair used by time-binned families.
    pub fn evaluate_into(
        &self,
        view: &InfoView,
        horizon: (f64, f64),
        state_dim: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let m = self.control_dim();
        debug_assert_eq!(out.len(), m);
        let time_bin = |bins: usize| -> usize {
            let (t0, t1) = horizon;
            if t1 <= t0 {
                return 0;
            }
            let frac = ((view.t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            ((frac * bins as f64) as usize).min(bins - 1)
        };
        match &self.family {
            PolicyFamily::Constant => out.copy_from_slice(&self.params),
            PolicyFamily::PiecewiseConstant { pieces } => {
                let b = time_bin(*pieces);
                out.copy_from_slice(&self.params[b * m..(b + 1) * m]);
            }
            PolicyFamily::LinearFeedback => {
                linear_eval(&self.params, view, state_dim, out)?;
            }
            PolicyFamily::GainSchedule { bins } => {
                let block = m * (1 + 2 * state_dim);
                let b = time_bin(*bins);
                linear_eval(&self.params[b * block..(b + 1) * block], view, state_dim, out)?;
            }
            PolicyFamily::Table {
                time_bins,
                state_bins,
                state_lo,
                state_hi,
            } => {
                if view.summary.is_empty() {
                    return Err(Error::ClassMismatch {
                        family: "Table".into(),
                        class: view.class_name.to_string(),
                    });
                }
                let tb = time_bin(*time_bins);
                let x = view.summary[0];
                let frac = ((x - state_lo) / (state_hi - state_lo)).clamp(0.0, 1.0);
                let sb = ((frac * *state_bins as f64) as usize).min(state_bins - 1);
                let idx = (tb * state_bins + sb) * m;
                out.copy_from_slice(&self.params[idx..idx + m]);
            }
            PolicyFamily::DitheredLinear => {
                let amp = *self.params.last().unwrap();
                linear_eval(&self.params[..self.params.len() - 1], view, state_dim, out)?;
                if amp != 0.0 {
                    let eta = view.dither.ok_or_else(|| Error::ClassMismatch {
                        family: "DitheredLinear".into(),
                        class: view.class_name.to_string(),
                    })?;
                    out[0] += amp * (eta - 0.5);
                }
            }
            PolicyFamily::Spliced {
                switch_time,
                before,
                after,
            } => {
                let rule = if view.t < switch_time - 1e-12 {
                    before
                } else {
                    after
                };
                rule.evaluate_into(view, horizon, state_dim, out)?;
            }
        }
        self.clip.clip(out);
        Ok(())
    }

    /// Allocating wrapper around [`Policy::evaluate_into`].
    pub fn evaluate(&self, view: &InfoView, horizon: (f64, f64), state_dim: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.control_dim()];
        self.evaluate_into(view, horizon, state_dim, &mut out)?;
        Ok(out)
    }
}

fn linear_eval(params: &[f64], view: &InfoView, state_dim: usize, out: &mut [f64]) -> Result<()> {
    let m = out.len();
    let row = 1 + 2 * state_dim;
    debug_assert_eq!(params.len(), m * row);
    for (r, o) in out.iter_mut().enumerate() {
        let p = &params[r * row..(r + 1) * row];
        let mut v = p[0];
        for c in 0..state_dim {
            let k1 = p[1 + c];
            if k1 != 0.0 {
                let x = view.summary.get(c).copied().ok_or_else(|| Error::ClassMismatch {
                    family: "LinearFeedback".into(),
                    class: view.class_name.to_string(),
                })?;
                v += k1 * x;
            }
            v += p[1 + state_dim + c] * view.slice_mean[c];
        }
        *o = v;
    }
    Ok(())
}

/// Tensor grid of parameter vectors over per-dimension bounds. Resolution 1
/// yields the midpoint; points are computed as exact convex combinations so
/// stated grid values (e.g. a gain of -1.0) are hit bit-exactly.
pub fn family_grid(bounds: &[(f64, f64)], resolution: usize) -> Result<Vec<Vec<f64>>> {
    if bounds.is_empty() {
        return Err(Error::EmptyInput("family_grid bounds"));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be >= 1".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "grid bounds must be finite with lo <= hi, got [{lo}, {hi}]"
            )));
        }
    }
    let size = (resolution as u128).pow(bounds.len() as u32);
    if size > 1_000_000 {
        return Err(Error::GridTooLarge { size });
    }
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if resolution == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..resolution)
                .map(|i| {
                    let num = (resolution - 1 - i) as f64;
                    (lo * num + hi * i as f64) / (resolution - 1) as f64
                })
                .collect()
        }
    };
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| axis(lo, hi)).collect();
    let mut grid = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; bounds.len()];
    loop {
        grid.push(idx.iter().enumerate().map(|(d, &i)| axes[d][i]).collect());
        let mut d = bounds.len();
        loop {
            if d == 0 {
                return Ok(grid);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < resolution {
                break;
            }
            idx[d] = 0;
        }
    }
}
