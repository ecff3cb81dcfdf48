//! Problem specifications: coefficient evaluators, reward functionals,
//! control sets, initial laws, sample-based assumption validators, and
//! path-summary (updating) functions for the Markovian reduction.
//!
//! Coefficients receive `(t, grid-sampled state path, joint state×control
//! slice measure, control)` and must be non-anticipative: their value may
//! depend on the path only through its restriction to `[0, t]`. Validators
//! below are samplers, not provers — they certify violations, never
//! satisfaction.

use crate::error::{Error, Result};
use crate::measures::{wasserstein2, EmpiricalMeasure};
use crate::rng::{Role, Stream};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Views handed to coefficient evaluators
// ---------------------------------------------------------------------------

/// A grid-sampled path, possibly strided into a larger ensemble array.
#[derive(Debug, Clone, Copy)]
pub struct PathSlice<'a> {
    times: &'a [f64],
    values: &'a [f64],
    offset: usize,
    stride: usize,
    dim: usize,
    rows: usize,
}

impl<'a> PathSlice<'a> {
    pub fn new(times: &'a [f64], values: &'a [f64], dim: usize) -> Self {
        assert_eq!(values.len(), times.len() * dim);
        PathSlice {
            times,
            values,
            offset: 0,
            stride: dim,
            dim,
            rows: times.len(),
        }
    }

    pub(crate) fn strided(
        times: &'a [f64],
        values: &'a [f64],
        offset: usize,
        stride: usize,
        dim: usize,
        rows: usize,
    ) -> Self {
        PathSlice {
            times,
            values,
            offset,
            stride,
            dim,
            rows,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times[..self.rows]
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        let start = self.offset + i * self.stride;
        &self.values[start..start + self.dim]
    }

    /// Value at the latest grid time `<= t` (grid sampling, no interpolation).
    pub fn at_time(&self, t: f64) -> &'a [f64] {
        let mut idx = 0;
        for (i, &ti) in self.times().iter().enumerate() {
            if ti <= t + 1e-12 {
                idx = i;
            } else {
                break;
            }
        }
        self.row(idx)
    }

    pub fn initial(&self) -> &'a [f64] {
        self.row(0)
    }

    /// Last sampled row. For an anticipative evaluator this is the whole
    /// path's endpoint, which is exactly what the validator must detect.
    pub fn terminal(&self) -> &'a [f64] {
        self.row(self.rows - 1)
    }

    pub fn sup_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows {
            for v in self.row(i) {
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// A lightweight view of a joint state×control slice measure: uniform-weight
/// atoms backed by contiguous arrays, with the state mean precomputed.
#[derive(Debug, Clone, Copy)]
pub struct MeasureView<'a> {
    states: &'a [f64],
    controls: &'a [f64],
    atoms: usize,
    state_dim: usize,
    control_dim: usize,
    mean: &'a [f64],
}

impl<'a> MeasureView<'a> {
    pub fn new(
        states: &'a [f64],
        controls: &'a [f64],
        atoms: usize,
        state_dim: usize,
        control_dim: usize,
        mean: &'a [f64],
    ) -> Self {
        debug_assert_eq!(states.len(), atoms * state_dim);
        debug_assert_eq!(controls.len(), atoms * control_dim);
        debug_assert_eq!(mean.len(), state_dim);
        MeasureView {
            states,
            controls,
            atoms,
            state_dim,
            control_dim,
            mean,
        }
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn state_atom(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn control_atom(&self, i: usize) -> &'a [f64] {
        &self.controls[i * self.control_dim..(i + 1) * self.control_dim]
    }

    /// Mean of the state marginal, coordinate `c`.
    pub fn mean_state(&self, c: usize) -> f64 {
        self.mean[c]
    }

    pub fn second_moment_state(&self, c: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..self.atoms {
            let x = self.state_atom(i)[c];
            s += x * x;
        }
        s / self.atoms as f64
    }

    pub fn to_empirical_joint(&self) -> Result<EmpiricalMeasure> {
        let pts = (0..self.atoms)
            .map(|i| {
                let mut p = self.state_atom(i).to_vec();
                p.extend_from_slice(self.control_atom(i));
                p
            })
            .collect();
        EmpiricalMeasure::uniform(pts)
    }

    pub fn to_empirical_state(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::uniform((0..self.atoms).map(|i| self.state_atom(i).to_vec()).collect())
    }
}

/// Owned backing storage for a [`MeasureView`]; used by validators and
/// anywhere a view must be built from an [`EmpiricalMeasure`].
#[derive(Debug, Clone)]
pub struct OwnedMeasure {
    states: Vec<f64>,
    controls: Vec<f64>,
    atoms: usize,
    state_dim: usize,
    control_dim: usize,
    mean: Vec<f64>,
}

impl OwnedMeasure {
    /// Split joint atoms into state and control blocks. Weighted measures are
    /// flattened to uniform by ignoring weights (validator inputs are uniform).
    pub fn from_joint(m: &EmpiricalMeasure, state_dim: usize) -> Result<Self> {
        let control_dim = m
            .dim()
            .checked_sub(state_dim)
            .ok_or(Error::DimensionMismatch {
                context: "joint measure split",
                expected: state_dim,
                got: m.dim(),
            })?;
        let atoms = m.len();
        let mut states = Vec::with_capacity(atoms * state_dim);
        let mut controls = Vec::with_capacity(atoms * control_dim);
        for p in m.points() {
            states.extend_from_slice(&p[..state_dim]);
            controls.extend_from_slice(&p[state_dim..]);
        }
        let mut mean = vec![0.0; state_dim];
        for i in 0..atoms {
            for c in 0..state_dim {
                mean[c] += states[i * state_dim + c];
            }
        }
        for v in &mut mean {
            *v /= atoms as f64;
        }
        Ok(OwnedMeasure {
            states,
            controls,
            atoms,
            state_dim,
            control_dim,
            mean,
        })
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::new(
            &self.states,
            &self.controls,
            self.atoms,
            self.state_dim,
            self.control_dim,
            &self.mean,
        )
    }
}

/// Everything a coefficient evaluator may read.
pub struct CoeffCtx<'a> {
    pub t: f64,
    pub path: PathSlice<'a>,
    pub measure: MeasureView<'a>,
    pub control: &'a [f64],
}

/// Terminal-reward context: terminal path plus the terminal state slice.
pub struct TerminalCtx<'a> {
    pub path: PathSlice<'a>,
    pub measure: MeasureView<'a>,
}

pub type CoeffFn = Arc<dyn Fn(&CoeffCtx, &mut [f64]) + Send + Sync>;
pub type RewardFn = Arc<dyn Fn(&CoeffCtx) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&TerminalCtx) -> f64 + Send + Sync>;

// ---------------------------------------------------------------------------
// Control set and initial law
// ---------------------------------------------------------------------------

/// Axis-aligned control box with Euclidean metric; the reference point `u0`
/// is the box center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::InvalidArgument(
                "control box bounds must be nonempty and of equal length".into(),
            ));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::InvalidArgument(format!(
                    "control box requires finite lo <= hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(ControlBox { lo, hi })
    }

    pub fn scalar(lo: f64, hi: f64) -> Self {
        ControlBox::new(vec![lo], vec![hi]).expect("scalar box")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn clip(&self, u: &mut [f64]) {
        for (c, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *c = c.clamp(*l, *h);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(c, (l, h))| *c >= *l - 1e-12 && *c <= *h + 1e-12)
    }

    /// Euclidean distance to the reference point u0 (the center).
    pub fn rho_to_center(&self, u: &[f64]) -> f64 {
        let u0 = self.center();
        u.iter()
            .zip(&u0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Initial law for the state at the grid start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitialLaw {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Dirac { point: Vec<f64> },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    /// Resample i.i.d. from a fixed atom cloud (restart measures).
    Atoms { measure: EmpiricalMeasure },
    /// Assign atoms cyclically by particle index: with as many particles as
    /// atoms this reproduces the slice exactly (stratified restart).
    AtomsExact { measure: EmpiricalMeasure },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Uniform { lo, .. } => lo.len(),
            InitialLaw::Atoms { measure } | InitialLaw::AtomsExact { measure } => measure.dim(),
        }
    }

    /// Draw the initial state for global particle index `g`. Stream draws
    /// are indexed so the result is independent of the (M, N) partition.
    pub fn sample(&self, stream: &Stream, g: u64, out: &mut [f64]) {
        match self {
            InitialLaw::Gaussian { mean, std } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = mean[c] + std[c] * stream.normal(g * 8 + c as u64);
                }
            }
            InitialLaw::Dirac { point } => out.copy_from_slice(point),
            InitialLaw::Uniform { lo, hi } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = lo[c] + (hi[c] - lo[c]) * stream.uniform(g * 8 + c as u64);
                }
            }
            InitialLaw::Atoms { measure } => {
                let u = stream.uniform(g * 8);
                let mut acc = 0.0;
                let mut idx = measure.len() - 1;
                for (i, w) in measure.weights().iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                out.copy_from_slice(&measure.points()[idx]);
            }
            InitialLaw::AtomsExact { measure } => {
                let idx = (g as usize) % measure.len();
                out.copy_from_slice(&measure.points()[idx]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Problem specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Maximize,
    Minimize,
}

impl Objective {
    /// Sign mapping estimates onto a common maximize scale.
    pub fn score(&self, mean: f64) -> f64 {
        match self {
            Objective::Maximize => mean,
            Objective::Minimize => -mean,
        }
    }
}

/// A full problem specification. Evaluators must be pure and reentrant.
#[derive(Clone)]
pub struct ProblemSpec {
    pub label: String,
    pub state_dim: usize,
    pub idio_dim: usize,
    pub common_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub control_box: ControlBox,
    pub drift: CoeffFn,
    pub vol: CoeffFn,
    pub common_vol: CoeffFn,
    pub running_reward: RewardFn,
    pub terminal_reward: TerminalFn,
    pub initial_law: InitialLaw,
    pub objective: Objective,
    pub p_integrability: f64,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("label", &self.label)
            .field("state_dim", &self.state_dim)
            .field("idio_dim", &self.idio_dim)
            .field("common_dim", &self.common_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("objective", &self.objective)
            .finish()
    }
}

impl ProblemSpec {
    pub fn validate_dims(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::InvalidArgument("state_dim must be positive".into()));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if self.control_box.dim() != self.control_dim {
            return Err(Error::DimensionMismatch {
                context: "control box",
                expected: self.control_dim,
                got: self.control_box.dim(),
            });
        }
        if self.initial_law.dim() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial law",
                expected: self.state_dim,
                got: self.initial_law.dim(),
            });
        }
        Ok(())
    }

    /// Replace the initial law, keeping everything else (restarts).
    pub fn with_initial_law(&self, law: InitialLaw) -> ProblemSpec {
        let mut s = self.clone();
        s.initial_law = law;
        s
    }
}

/// Convenience builders for coefficient evaluators.
pub mod coeffs {
    use super::*;

    pub fn zero() -> CoeffFn {
        Arc::new(|_ctx, out| out.fill(0.0))
    }

    pub fn constant(values: Vec<f64>) -> CoeffFn {
        Arc::new(move |_ctx, out| out.copy_from_slice(&values))
    }

    /// Scalar linear drift `b = a·x(t) + a_bar·mean + b_u·u` (state_dim 1).
    pub fn scalar_linear_drift(a: f64, a_bar: f64, b_u: f64) -> CoeffFn {
        Arc::new(move |ctx, out| {
            let x = ctx.path.at_time(ctx.t)[0];
            let m = ctx.measure.mean_state(0);
            out[0] = a * x + a_bar * m + b_u * ctx.control[0];
        })
    }

    pub fn zero_reward() -> RewardFn {
        Arc::new(|_ctx| 0.0)
    }

    pub fn constant_reward(v: f64) -> RewardFn {
        Arc::new(move |_ctx| v)
    }

    /// Scalar quadratic running cost `q x² + q_bar m² + r u²`, signed for
    /// the problem's objective (costs should be used with `Minimize`).
    pub fn scalar_quadratic_running(q: f64, q_bar: f64, r: f64) -> RewardFn {
        Arc::new(move |ctx| {
            let x = ctx.path.at_time(ctx.t)[0];
            let m = ctx.measure.mean_state(0);
            let u = ctx.control[0];
            q * x * x + q_bar * m * m + r * u * u
        })
    }

    pub fn zero_terminal() -> TerminalFn {
        Arc::new(|_ctx| 0.0)
    }

    pub fn constant_terminal(v: f64) -> TerminalFn {
        Arc::new(move |_ctx| v)
    }

    /// Scalar quadratic terminal cost `g x_T² + g_bar m_T²`.
    pub fn scalar_quadratic_terminal(g: f64, g_bar: f64) -> TerminalFn {
        Arc::new(move |ctx| {
            let x = ctx.path.terminal()[0];
            let m = ctx.measure.mean_state(0);
            g * x * x + g_bar * m * m
        })
    }
}

// ---------------------------------------------------------------------------
// JSON problem configuration (the CLI surface)
// ---------------------------------------------------------------------------

/// Serializable problem description: dimensions, horizon, box bounds, a named
/// coefficient template with numeric parameters, and an initial-law
/// descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    pub kind: ProblemKind,
    pub initial_law: InitialLawConfig,
    pub control_box: ControlBoxConfig,
    #[serde(default)]
    pub objective: Option<Objective>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLawConfig {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Dirac { point: Vec<f64> },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Constant coefficients, zero or constant rewards.
    Constant {
        drift: Vec<f64>,
        vol: Vec<f64>,
        common_vol: Vec<f64>,
        running: f64,
        terminal: f64,
    },
    /// Scalar linear drift with mean coupling, constant volatilities,
    /// quadratic costs (minimize).
    Linear {
        a: f64,
        a_bar: f64,
        b_u: f64,
        sigma: f64,
        sigma0: f64,
        q: f64,
        q_bar: f64,
        r: f64,
        g: f64,
        g_bar: f64,
        horizon: f64,
    },
    /// The scalar linear-quadratic common-noise benchmark family.
    Lq(crate::lq::LqSpec),
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec> {
        let initial_law = match &self.initial_law {
            InitialLawConfig::Gaussian { mean, std } => InitialLaw::Gaussian {
                mean: mean.clone(),
                std: std.clone(),
            },
            InitialLawConfig::Dirac { point } => InitialLaw::Dirac {
                point: point.clone(),
            },
            InitialLawConfig::Uniform { lo, hi } => InitialLaw::Uniform {
                lo: lo.clone(),
                hi: hi.clone(),
            },
        };
        let control_box =
            ControlBox::new(self.control_box.lo.clone(), self.control_box.hi.clone())?;
        let mut spec = match &self.kind {
            ProblemKind::Constant {
                drift,
                vol,
                common_vol,
                running,
                terminal,
            } => {
                let n = drift.len();
                if n == 0 {
                    return Err(Error::InvalidArgument("constant drift empty".into()));
                }
                let d = if vol.is_empty() { 0 } else { vol.len() / n };
                let ell = if common_vol.is_empty() {
                    0
                } else {
                    common_vol.len() / n
                };
                ProblemSpec {
                    label: self.name.clone(),
                    state_dim: n,
                    idio_dim: d,
                    common_dim: ell,
                    control_dim: control_box.dim(),
                    horizon: 1.0,
                    control_box,
                    drift: coeffs::constant(drift.clone()),
                    vol: coeffs::constant(vol.clone()),
                    common_vol: coeffs::constant(common_vol.clone()),
                    running_reward: coeffs::constant_reward(*running),
                    terminal_reward: coeffs::constant_terminal(*terminal),
                    initial_law,
                    objective: Objective::Maximize,
                    p_integrability: 2.0,
                }
            }
            ProblemKind::Linear {
                a,
                a_bar,
                b_u,
                sigma,
                sigma0,
                q,
                q_bar,
                r,
                g,
                g_bar,
                horizon,
            } => {
                let ell = usize::from(*sigma0 != 0.0);
                ProblemSpec {
                    label: self.name.clone(),
                    state_dim: 1,
                    idio_dim: 1,
                    common_dim: ell,
                    control_dim: 1,
                    horizon: *horizon,
                    control_box,
                    drift: coeffs::scalar_linear_drift(*a, *a_bar, *b_u),
                    vol: coeffs::constant(vec![*sigma]),
                    common_vol: if ell == 1 {
                        coeffs::constant(vec![*sigma0])
                    } else {
                        coeffs::constant(vec![])
                    },
                    running_reward: coeffs::scalar_quadratic_running(*q, *q_bar, *r),
                    terminal_reward: coeffs::scalar_quadratic_terminal(*g, *g_bar),
                    initial_law,
                    objective: Objective::Minimize,
                    p_integrability: 2.0,
                }
            }
            ProblemKind::Lq(lq) => {
                let mut spec = crate::lq::lq_problem(lq, usize::from(lq.sigma0 != 0.0))?;
                spec.label = self.name.clone();
                spec.control_box = control_box;
                spec.initial_law = initial_law;
                spec
            }
        };
        if let Some(obj) = self.objective {
            spec.objective = obj;
        }
        spec.validate_dims()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Updating functions (path summaries)
// ---------------------------------------------------------------------------

/// Path summaries `Z_t = Φ_t(X)` that depend only on the path up to `t` and
/// update consistently from increments: running state, running maximum,
/// running (time-)average, or the composite of all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    RunningState,
    RunningMax,
    RunningAverage,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatingFunction {
    pub kind: SummaryKind,
}

impl UpdatingFunction {
    pub fn new(kind: SummaryKind) -> Self {
        UpdatingFunction { kind }
    }

    /// Dimension of the summary space E for a state dimension `n`.
    pub fn summary_dim(&self, n: usize) -> usize {
        match self.kind {
            SummaryKind::Composite => 3 * n,
            _ => n,
        }
    }

    /// Apply to a grid-sampled path, returning the summary path on the same
    /// grid (row-major, `summary_dim` per row). The running average uses the
    /// trapezoidal rule with the convention `Φ_0 = x(0)`.
    pub fn apply(&self, times: &[f64], values: &[f64], dim: usize) -> Result<Vec<f64>> {
        if times.is_empty() || values.len() != times.len() * dim {
            return Err(Error::EmptyInput("updating function needs a nonempty path"));
        }
        let rows = times.len();
        let row = |i: usize| &values[i * dim..(i + 1) * dim];
        let out_dim = self.summary_dim(dim);
        let mut out = vec![0.0; rows * out_dim];
        match self.kind {
            SummaryKind::RunningState => out.copy_from_slice(values),
            SummaryKind::RunningMax => {
                out[..dim].copy_from_slice(row(0));
                for i in 1..rows {
                    for c in 0..dim {
                        out[i * dim + c] = out[(i - 1) * dim + c].max(row(i)[c]);
                    }
                }
            }
            SummaryKind::RunningAverage => {
                let mut integral = vec![0.0; dim];
                out[..dim].copy_from_slice(row(0));
                for i in 1..rows {
                    let dt = times[i] - times[i - 1];
                    for c in 0..dim {
                        integral[c] += 0.5 * dt * (row(i - 1)[c] + row(i)[c]);
                        let elapsed = times[i] - times[0];
                        out[i * dim + c] = integral[c] / elapsed;
                    }
                }
            }
            SummaryKind::Composite => {
                let st = UpdatingFunction::new(SummaryKind::RunningState)
                    .apply(times, values, dim)?;
                let mx =
                    UpdatingFunction::new(SummaryKind::RunningMax).apply(times, values, dim)?;
                let av = UpdatingFunction::new(SummaryKind::RunningAverage)
                    .apply(times, values, dim)?;
                for i in 0..rows {
                    out[i * out_dim..i * out_dim + dim].copy_from_slice(&st[i * dim..(i + 1) * dim]);
                    out[i * out_dim + dim..i * out_dim + 2 * dim]
                        .copy_from_slice(&mx[i * dim..(i + 1) * dim]);
                    out[i * out_dim + 2 * dim..i * out_dim + 3 * dim]
                        .copy_from_slice(&av[i * dim..(i + 1) * dim]);
                }
            }
        }
        Ok(out)
    }

    /// Summary at the final grid time only.
    pub fn at_end(&self, times: &[f64], values: &[f64], dim: usize) -> Result<Vec<f64>> {
        let all = self.apply(times, values, dim)?;
        let od = self.summary_dim(dim);
        Ok(all[all.len() - od..].to_vec())
    }
}

/// `apply_updating`: spec-level free function.
pub fn apply_updating(
    phi: &UpdatingFunction,
    times: &[f64],
    values: &[f64],
    dim: usize,
) -> Result<Vec<f64>> {
    phi.apply(times, values, dim)
}

// ---------------------------------------------------------------------------
// Sample-based assumption validators
// ---------------------------------------------------------------------------

/// Max absolute deviation per coefficient between evaluation on a path and on
/// the same path stopped at `t`. Zero for non-anticipative evaluators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonAnticipativityReport {
    pub drift: f64,
    pub vol: f64,
    pub common_vol: f64,
    pub running: f64,
    pub max_violation: f64,
    pub samples: usize,
}

/// Lipschitz/growth sampling report. `lipschitz` is the max observed ratio
/// `‖Δ(b,σ,σ₀)‖ / (‖x−x′‖ + W2(μ̄,μ̄′))`; `growth` the max observed ratio of
/// `‖(b,σ,σ₀)‖²` against the quadratic bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub lipschitz: f64,
    pub growth: f64,
    pub worst_pair: usize,
    pub samples: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthReport {
    pub max_ratio: f64,
    pub samples: usize,
}

struct SampledScene {
    times: Vec<f64>,
    path: Vec<f64>,
    t: f64,
    measure: OwnedMeasure,
    control: Vec<f64>,
}

/// Draw sample scene `i` deterministically; independent of the total sample
/// count so reports are monotone under sample growth with a fixed seed.
fn sample_scene(spec: &ProblemSpec, seed: u64, i: u64, constant_path: bool) -> SampledScene {
    let s = Stream::new(seed, Role::Validator, &[i]);
    let n = spec.state_dim;
    let grid_pts = 17usize;
    let mut times = Vec::with_capacity(grid_pts);
    let mut path = vec![0.0; grid_pts * n];
    for k in 0..grid_pts {
        times.push(spec.horizon * k as f64 / (grid_pts - 1) as f64);
    }
    if constant_path {
        for c in 0..n {
            let v = 2.0 * s.normal(c as u64);
            for k in 0..grid_pts {
                path[k * n + c] = v;
            }
        }
    } else {
        for k in 0..grid_pts {
            for c in 0..n {
                path[k * n + c] = 2.0 * s.normal((k * n + c) as u64);
            }
        }
    }
    let t = spec.horizon * s.uniform(1000);
    let atoms = 8;
    let mut pts = Vec::with_capacity(atoms);
    for a in 0..atoms {
        let mut p = Vec::with_capacity(n + spec.control_dim);
        for c in 0..n {
            p.push(s.normal(2000 + (a * n + c) as u64));
        }
        for c in 0..spec.control_dim {
            let (lo, hi) = (spec.control_box.lo[c], spec.control_box.hi[c]);
            p.push(lo + (hi - lo) * s.uniform(3000 + (a * spec.control_dim + c) as u64));
        }
        pts.push(p);
    }
    let measure =
        OwnedMeasure::from_joint(&EmpiricalMeasure::uniform(pts).expect("atoms"), n)
            .expect("joint split");
    let control: Vec<f64> = (0..spec.control_dim)
        .map(|c| {
            let (lo, hi) = (spec.control_box.lo[c], spec.control_box.hi[c]);
            lo + (hi - lo) * s.uniform(4000 + c as u64)
        })
        .collect();
    SampledScene {
        times,
        path,
        t,
        measure,
        control,
    }
}

fn stopped_path(times: &[f64], path: &[f64], dim: usize, t: f64) -> Vec<f64> {
    let mut out = path.to_vec();
    let ps = PathSlice::new(times, path, dim);
    let frozen = ps.at_time(t).to_vec();
    for (k, &tk) in times.iter().enumerate() {
        if tk > t + 1e-12 {
            out[k * dim..(k + 1) * dim].copy_from_slice(&frozen);
        }
    }
    out
}

fn eval_coeff(f: &CoeffFn, ctx: &CoeffCtx, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    f(ctx, &mut out);
    out
}

/// Compare every coefficient on `(t, x, μ̄, u)` against `(t, x stopped at t,
/// μ̄, u)` over random scenes; report the sup of absolute deviations.
pub fn validate_nonanticipativity(
    spec: &ProblemSpec,
    sample_count: usize,
    seed: u64,
) -> Result<NonAnticipativityReport> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be >= 1".into()));
    }
    let n = spec.state_dim;
    let mut rep = NonAnticipativityReport {
        drift: 0.0,
        vol: 0.0,
        common_vol: 0.0,
        running: 0.0,
        max_violation: 0.0,
        samples: sample_count,
    };
    for i in 0..sample_count as u64 {
        let scene = sample_scene(spec, seed, i, false);
        let stopped = stopped_path(&scene.times, &scene.path, n, scene.t);
        let view = scene.measure.view();
        let full_ctx = CoeffCtx {
            t: scene.t,
            path: PathSlice::new(&scene.times, &scene.path, n),
            measure: view,
            control: &scene.control,
        };
        let stop_ctx = CoeffCtx {
            t: scene.t,
            path: PathSlice::new(&scene.times, &stopped, n),
            measure: view,
            control: &scene.control,
        };
        let diff = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        rep.drift = rep.drift.max(diff(
            &eval_coeff(&spec.drift, &full_ctx, n),
            &eval_coeff(&spec.drift, &stop_ctx, n),
        ));
        rep.vol = rep.vol.max(diff(
            &eval_coeff(&spec.vol, &full_ctx, n * spec.idio_dim),
            &eval_coeff(&spec.vol, &stop_ctx, n * spec.idio_dim),
        ));
        rep.common_vol = rep.common_vol.max(diff(
            &eval_coeff(&spec.common_vol, &full_ctx, n * spec.common_dim),
            &eval_coeff(&spec.common_vol, &stop_ctx, n * spec.common_dim),
        ));
        rep.running = rep
            .running
            .max(((spec.running_reward)(&full_ctx) - (spec.running_reward)(&stop_ctx)).abs());
    }
    rep.max_violation = rep.drift.max(rep.vol).max(rep.common_vol).max(rep.running);
    Ok(rep)
}

fn stacked_coeffs(spec: &ProblemSpec, ctx: &CoeffCtx) -> Vec<f64> {
    let n = spec.state_dim;
    let mut out = eval_coeff(&spec.drift, ctx, n);
    out.extend(eval_coeff(&spec.vol, ctx, n * spec.idio_dim));
    out.extend(eval_coeff(&spec.common_vol, ctx, n * spec.common_dim));
    out
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Quadratic growth denominator `1 + ‖x‖² + ∫(‖y‖² + ρ(u′,u₀)²) μ̄ + ρ(u,u₀)²`.
fn growth_bound(spec: &ProblemSpec, path: &PathSlice, view: &MeasureView, u: &[f64]) -> f64 {
    let xn = path.sup_norm();
    let mut integral = 0.0;
    for a in 0..view.atoms() {
        integral += norm2(view.state_atom(a)).powi(2)
            + spec.control_box.rho_to_center(view.control_atom(a)).powi(2);
    }
    integral /= view.atoms() as f64;
    1.0 + xn * xn + integral + spec.control_box.rho_to_center(u).powi(2)
}

/// Sample pairs `(x, μ̄)` vs `(x′, μ̄′)` at shared `(t, u)` and return the max
/// observed Lipschitz ratio of the stacked coefficients, plus the max growth
/// ratio. Requires `p_integrability == 2`.
pub fn estimate_lipschitz(
    spec: &ProblemSpec,
    sample_count: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if (spec.p_integrability - 2.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "lipschitz estimation requires p_integrability = 2".into(),
        ));
    }
    let n = spec.state_dim;
    let mut rep = LipschitzReport {
        lipschitz: 0.0,
        growth: 0.0,
        worst_pair: 0,
        samples: sample_count,
        skipped: 0,
    };
    for i in 0..sample_count as u64 {
        // Every 4th pair uses constant paths (so the sup norm is attained at
        // t) and every 3rd pair shares the measure, which makes pure-state
        // Lipschitz constants attainable exactly.
        let constant = i % 4 == 0;
        let scene_a = sample_scene(spec, seed, 2 * i, constant);
        let mut scene_b = sample_scene(spec, seed.wrapping_add(0x5bd1), 2 * i + 1, constant);
        scene_b.t = scene_a.t;
        scene_b.control = scene_a.control.clone();
        let shared_measure = i % 3 == 0;
        let view_a = scene_a.measure.view();
        let view_b = if shared_measure {
            scene_a.measure.view()
        } else {
            scene_b.measure.view()
        };
        let path_a = PathSlice::new(&scene_a.times, &scene_a.path, n);
        let path_b = PathSlice::new(&scene_b.times, &scene_b.path, n);
        let ctx_a = CoeffCtx {
            t: scene_a.t,
            path: path_a,
            measure: view_a,
            control: &scene_a.control,
        };
        let ctx_b = CoeffCtx {
            t: scene_a.t,
            path: path_b,
            measure: view_b,
            control: &scene_a.control,
        };
        let ca = stacked_coeffs(spec, &ctx_a);
        let cb = stacked_coeffs(spec, &ctx_b);
        let dc: f64 = norm2(
            &ca.iter()
                .zip(&cb)
                .map(|(x, y)| x - y)
                .collect::<Vec<f64>>(),
        );
        let mut dx: f64 = 0.0;
        for k in 0..path_a.rows() {
            for c in 0..n {
                dx = dx.max((path_a.row(k)[c] - path_b.row(k)[c]).abs());
            }
        }
        let dm = if shared_measure {
            0.0
        } else {
            let ja = view_a.to_empirical_joint()?;
            let jb = view_b.to_empirical_joint()?;
            wasserstein2(&ja, &jb)?
        };
        let denom = dx + dm;
        if denom < 1e-12 {
            rep.skipped += 1;
        } else {
            let ratio = dc / denom;
            if ratio > rep.lipschitz {
                rep.lipschitz = ratio;
                rep.worst_pair = i as usize;
            }
        }
        let bound = growth_bound(spec, &path_a, &view_a, &scene_a.control);
        rep.growth = rep.growth.max(norm2(&ca).powi(2) / bound);
    }
    Ok(rep)
}

/// Max ratio of `|(L, g)|²` against the quadratic growth bound over random
/// scenes.
pub fn validate_growth(
    spec: &ProblemSpec,
    sample_count: usize,
    seed: u64,
) -> Result<GrowthReport> {
    let n = spec.state_dim;
    let mut max_ratio: f64 = 0.0;
    for i in 0..sample_count as u64 {
        let scene = sample_scene(spec, seed, i, false);
        let view = scene.measure.view();
        let path = PathSlice::new(&scene.times, &scene.path, n);
        let ctx = CoeffCtx {
            t: scene.t,
            path,
            measure: view,
            control: &scene.control,
        };
        let l = (spec.running_reward)(&ctx);
        let tctx = TerminalCtx { path, measure: view };
        let g = (spec.terminal_reward)(&tctx);
        let bound = growth_bound(spec, &path, &view, &scene.control);
        max_ratio = max_ratio.max((l * l).max(g * g) / bound);
    }
    Ok(GrowthReport {
        max_ratio,
        samples: sample_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> ProblemSpec {
        ProblemSpec {
            label: "test".into(),
            state_dim: 1,
            idio_dim: 1,
            common_dim: 1,
            control_dim: 1,
            horizon: 1.0,
            control_box: ControlBox::scalar(-1.0, 1.0),
            drift: coeffs::zero(),
            vol: coeffs::constant(vec![1.0]),
            common_vol: coeffs::constant(vec![0.5]),
            running_reward: coeffs::zero_reward(),
            terminal_reward: coeffs::zero_terminal(),
            initial_law: InitialLaw::Gaussian {
                mean: vec![0.0],
                std: vec![1.0],
            },
            objective: Objective::Maximize,
            p_integrability: 2.0,
        }
    }

    #[test]
    fn nonanticipative_current_state_passes() {
        let mut spec = base_spec();
        spec.drift = Arc::new(|ctx, out| out[0] = ctx.path.at_time(ctx.t)[0]);
        let rep = validate_nonanticipativity(&spec, 64, 9).unwrap();
        assert_eq!(rep.max_violation, 0.0);
    }

    #[test]
    fn anticipative_terminal_state_is_detected() {
        let mut spec = base_spec();
        spec.drift = Arc::new(|ctx, out| out[0] = ctx.path.terminal()[0]);
        let rep = validate_nonanticipativity(&spec, 64, 9).unwrap();
        assert!(rep.drift > 0.0, "violation not detected: {rep:?}");
    }

    #[test]
    fn constant_coefficients_have_zero_lipschitz() {
        let spec = base_spec();
        let rep = estimate_lipschitz(&spec, 64, 11).unwrap();
        assert_eq!(rep.lipschitz, 0.0);
    }

    #[test]
    fn linear_drift_ratio_converges_to_three_from_below() {
        let mut spec = base_spec();
        spec.drift = Arc::new(|ctx, out| out[0] = 3.0 * ctx.path.at_time(ctx.t)[0]);
        spec.vol = coeffs::constant(vec![0.0]);
        spec.common_vol = coeffs::constant(vec![0.0]);
        let rep = estimate_lipschitz(&spec, 256, 13).unwrap();
        assert!(rep.lipschitz <= 3.0 + 1e-9, "ratio {}", rep.lipschitz);
        assert!(rep.lipschitz > 2.9, "ratio {}", rep.lipschitz);
    }

    #[test]
    fn slice_mean_drift_is_one_lipschitz_in_w2() {
        let mut spec = base_spec();
        spec.drift = Arc::new(|ctx, out| out[0] = ctx.measure.mean_state(0));
        spec.vol = coeffs::constant(vec![0.0]);
        spec.common_vol = coeffs::constant(vec![0.0]);
        let rep = estimate_lipschitz(&spec, 256, 17).unwrap();
        assert!(rep.lipschitz <= 1.0 + 1e-9, "ratio {}", rep.lipschitz);
    }

    #[test]
    fn growth_examples() {
        let spec = base_spec();
        let rep = validate_growth(&spec, 64, 3).unwrap();
        assert_eq!(rep.max_ratio, 0.0);

        let mut spec2 = base_spec();
        spec2.running_reward = Arc::new(|ctx| {
            // L = ρ(u, u0)²; |L|² = ρ⁴ <= bound only when ρ <= 1, which the
            // unit box guarantees.
            let r = ctx.control[0];
            r * r
        });
        let rep2 = validate_growth(&spec2, 128, 3).unwrap();
        assert!(rep2.max_ratio <= 1.0 + 1e-12, "{}", rep2.max_ratio);
    }

    #[test]
    fn updating_running_state_is_identity() {
        let phi = UpdatingFunction::new(SummaryKind::RunningState);
        let times = [0.0, 0.5, 1.0];
        let vals = [0.0, 2.0, 1.0];
        assert_eq!(phi.apply(&times, &vals, 1).unwrap(), vals.to_vec());
    }

    #[test]
    fn updating_running_max_envelope() {
        let phi = UpdatingFunction::new(SummaryKind::RunningMax);
        let times = [0.0, 0.5, 1.0];
        let vals = [0.0, 2.0, 1.0];
        assert_eq!(phi.apply(&times, &vals, 1).unwrap(), vec![0.0, 2.0, 2.0]);
    }

    #[test]
    fn updating_running_average_of_constant() {
        let phi = UpdatingFunction::new(SummaryKind::RunningAverage);
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        let vals = [3.0; 5];
        let out = phi.apply(&times, &vals, 1).unwrap();
        for v in out {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn updating_increment_consistency() {
        // Equal summaries at s plus equal increments on [s, t] imply equal
        // summaries on [s, t].
        let s = Stream::new(5, Role::Validator, &[31]);
        for rep in 0..50u64 {
            let times: Vec<f64> = (0..9).map(|k| k as f64 / 8.0).collect();
            let split = 4usize;
            let mut a = vec![0.0; 9];
            let mut b = vec![0.0; 9];
            for k in 0..=split {
                // Same prefix values so running summaries agree at the split.
                let v = s.normal(rep * 100 + k as u64);
                a[k] = v;
                b[k] = v;
            }
            for k in split + 1..9 {
                let inc = s.normal(rep * 100 + 50 + k as u64);
                a[k] = a[k - 1] + inc;
                b[k] = b[k - 1] + inc;
            }
            for kind in [
                SummaryKind::RunningState,
                SummaryKind::RunningMax,
                SummaryKind::RunningAverage,
                SummaryKind::Composite,
            ] {
                let phi = UpdatingFunction::new(kind);
                let za = phi.apply(&times, &a, 1).unwrap();
                let zb = phi.apply(&times, &b, 1).unwrap();
                let od = phi.summary_dim(1);
                for k in split..9 {
                    for c in 0..od {
                        assert!(
                            (za[k * od + c] - zb[k * od + c]).abs() < 1e-12,
                            "{kind:?} inconsistent at row {k}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn empty_path_rejected() {
        let phi = UpdatingFunction::new(SummaryKind::RunningState);
        assert!(phi.apply(&[], &[], 1).is_err());
    }

    #[test]
    fn sampling_reports_are_monotone_in_sample_count() {
        let mut spec = base_spec();
        spec.drift = Arc::new(|ctx, out| out[0] = 3.0 * ctx.path.at_time(ctx.t)[0]);
        let small = estimate_lipschitz(&spec, 32, 7).unwrap();
        let large = estimate_lipschitz(&spec, 128, 7).unwrap();
        assert!(large.lipschitz >= small.lipschitz);
    }
}
