//! Time-discretized simulation of the controlled conditional McKean–Vlasov
//! SDE by an outer×inner particle scheme.
//!
//! The scheme is explicit Euler–Maruyama. At step k the conditional joint
//! law μ̄ is replaced by the within-scenario empirical slice built from the
//! states at t_k and the controls chosen at step k (same-step slice).
//! Controls are piecewise constant on grid cells and are evaluated from
//! information available at t_k only. When there is no common noise (ℓ = 0)
//! the conditional law degenerates to the unconditional one, so the
//! interaction slice pools all scenarios; under the stream contract below
//! this makes outputs bit-identical under re-partitioning of M×N particles.
//!
//! Noise streams are counter-based and keyed by `(seed, role, entity)`:
//! common noise by scenario, idiosyncratic noise and initial draws by the
//! global particle index. Every particle in a scenario therefore sees the
//! same common increments, and results do not depend on thread count.

use crate::error::{Error, Result};
use crate::policies::{InfoClass, InfoView, Policy};
use crate::problems::{CoeffCtx, MeasureView, PathSlice, ProblemSpec, SummaryKind, TerminalCtx};
use crate::rng::{Role, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;

/// Uniform grid on [t_start, t_end] with `steps` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t_start) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid requires t_end > t_start and steps >= 1, got [{t_start}, {t_end}] with {steps} steps"
            )));
        }
        Ok(TimeGrid {
            t_start,
            t_end,
            steps,
        })
    }

    pub fn delta(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let d = self.delta();
        (0..=self.steps)
            .map(|k| self.t_start + k as f64 * d)
            .collect()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.delta()
    }
}

/// I.i.d. N(0, Δ) increments: `steps × dims` row-major, draw indices laid
/// out so each (step, dim) cell has its own counter.
pub fn brownian_increments(stream: &Stream, steps: usize, dims: usize, delta: f64) -> Vec<f64> {
    let mut out = vec![0.0; steps * dims];
    stream.fill_normal(0, delta.sqrt(), &mut out);
    out
}

/// Stream carrying the common noise of one scenario.
pub fn common_noise_stream(seed: u64, scenario: usize) -> Stream {
    Stream::new(seed, Role::CommonNoise, &[scenario as u64])
}

/// Stream carrying the idiosyncratic noise of one particle, keyed by the
/// global particle index so an (M, N) ensemble and a (1, M·N) ensemble share
/// draws.
pub fn idio_noise_stream(seed: u64, global_particle: usize) -> Stream {
    Stream::new(seed, Role::IdioNoise, &[global_particle as u64])
}

/// Discretized carrier of the conditional law flow: common-noise scenarios
/// (outer) × particles (inner), with state, control, integrated-control and
/// noise arrays, all time-major.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    scenarios: usize,
    particles: usize,
    state_dim: usize,
    control_dim: usize,
    idio_dim: usize,
    common_dim: usize,
    seed: u64,
    times: Vec<f64>,
    /// `[time][scenario][particle][coord]`
    states: Vec<f64>,
    /// `[step][scenario][particle][coord]`
    controls: Vec<f64>,
    /// Integrated control A (piecewise linear with slope u), like `states`.
    integrated: Vec<f64>,
    /// `[step][scenario][coord]`
    common: Vec<f64>,
    /// `[step][scenario][particle][coord]`
    idio: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn idio_dim(&self) -> usize {
        self.idio_dim
    }

    pub fn common_dim(&self) -> usize {
        self.common_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Interaction slices pool all scenarios when there is no common noise.
    pub fn pooled_interaction(&self) -> bool {
        self.common_dim == 0
    }

    #[inline]
    fn sidx(&self, k: usize, j: usize, i: usize) -> usize {
        ((k * self.scenarios + j) * self.particles + i) * self.state_dim
    }

    pub fn state(&self, k: usize, j: usize, i: usize) -> &[f64] {
        let a = self.sidx(k, j, i);
        &self.states[a..a + self.state_dim]
    }

    pub fn control(&self, k: usize, j: usize, i: usize) -> &[f64] {
        let a = ((k * self.scenarios + j) * self.particles + i) * self.control_dim;
        &self.controls[a..a + self.control_dim]
    }

    pub fn integrated_control(&self, k: usize, j: usize, i: usize) -> &[f64] {
        let a = ((k * self.scenarios + j) * self.particles + i) * self.control_dim;
        &self.integrated[a..a + self.control_dim]
    }

    pub fn common_increment(&self, k: usize, j: usize) -> &[f64] {
        let a = (k * self.scenarios + j) * self.common_dim;
        &self.common[a..a + self.common_dim]
    }

    pub fn idio_increment(&self, k: usize, j: usize, i: usize) -> &[f64] {
        let a = ((k * self.scenarios + j) * self.particles + i) * self.idio_dim;
        &self.idio[a..a + self.idio_dim]
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub fn raw_controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn raw_integrated(&self) -> &[f64] {
        &self.integrated
    }

    /// Contiguous state block of scenario `j` at grid index `k` (N×n).
    pub fn scenario_states(&self, k: usize, j: usize) -> &[f64] {
        let a = self.sidx(k, j, 0);
        &self.states[a..a + self.particles * self.state_dim]
    }

    /// Contiguous pooled state block at grid index `k` (M·N×n).
    pub fn pooled_states(&self, k: usize) -> &[f64] {
        let a = self.sidx(k, 0, 0);
        &self.states[a..a + self.scenarios * self.particles * self.state_dim]
    }

    pub fn scenario_controls(&self, k: usize, j: usize) -> &[f64] {
        let a = ((k * self.scenarios + j) * self.particles) * self.control_dim;
        &self.controls[a..a + self.particles * self.control_dim]
    }

    pub fn pooled_controls(&self, k: usize) -> &[f64] {
        let a = (k * self.scenarios) * self.particles * self.control_dim;
        &self.controls[a..a + self.scenarios * self.particles * self.control_dim]
    }

    /// Strided view of one particle's state path over grid rows `0..=k`.
    pub fn path(&self, j: usize, i: usize, k: usize) -> PathSlice<'_> {
        PathSlice::strided(
            &self.times,
            &self.states,
            self.sidx(0, j, i),
            self.scenarios * self.particles * self.state_dim,
            self.state_dim,
            k + 1,
        )
    }

    /// Per-slice interaction statistics at grid index `k`: one `(mean, var)`
    /// row per scenario, or a single pooled row when ℓ = 0.
    pub fn slice_stats(&self, k: usize) -> SliceStats {
        slice_stats_from(
            self.pooled_states(k),
            self.scenarios,
            self.particles,
            self.state_dim,
            self.pooled_interaction(),
        )
    }

    /// Full information view for one particle at one step; copies its data so
    /// it stays valid (and fixed) independent of the ensemble afterwards.
    pub fn info_view(
        &self,
        class: InfoClass,
        summary: SummaryKind,
        scenario: usize,
        particle: usize,
        step: usize,
    ) -> Result<InfoView> {
        if scenario >= self.scenarios || particle >= self.particles || step > self.steps() {
            return Err(Error::IndexOutOfRange {
                context: "info_view",
                index: scenario.max(particle).max(step),
                len: self.scenarios.max(self.particles).max(self.steps()),
            });
        }
        let stats = self.slice_stats(step);
        let (mean, var) = stats.row(if stats.pooled { 0 } else { scenario });
        let mut view = InfoView {
            t: self.times[step],
            step,
            class_name: class.name(),
            slice_mean: mean.to_vec(),
            slice_var: var.to_vec(),
            ..Default::default()
        };
        if class != InfoClass::CommonNoise {
            let path = self.path(scenario, particle, step);
            let flat: Vec<f64> = (0..=step).flat_map(|r| path.row(r).to_vec()).collect();
            let phi = crate::problems::UpdatingFunction::new(summary);
            view.summary = phi.at_end(&self.times[..=step], &flat, self.state_dim)?;
            view.initial_state = self.state(0, scenario, particle).to_vec();
            for r in 0..step {
                view.idio_increments
                    .extend_from_slice(self.idio_increment(r, scenario, particle));
            }
        }
        for r in 0..step {
            view.common_increments
                .extend_from_slice(self.common_increment(r, scenario));
        }
        if class == InfoClass::Randomized {
            let g = (scenario * self.particles + particle) as u64;
            view.dither =
                Some(Stream::new(self.seed, Role::Dither, &[g]).uniform(step as u64));
        }
        Ok(view)
    }

    /// Columnar CSV export: scenario, particle, time, state…, control…, a….
    /// Control columns are empty on the final grid row (controls live on
    /// cells, not grid points).
    pub fn to_csv<W: IoWrite>(&self, w: &mut W) -> Result<()> {
        write!(w, "scenario,particle,time")?;
        for c in 0..self.state_dim {
            write!(w, ",state_{c}")?;
        }
        for c in 0..self.control_dim {
            write!(w, ",control_{c}")?;
        }
        for c in 0..self.control_dim {
            write!(w, ",a_{c}")?;
        }
        writeln!(w)?;
        for j in 0..self.scenarios {
            for i in 0..self.particles {
                for k in 0..=self.steps() {
                    write!(w, "{},{},{}", j, i, self.times[k])?;
                    for v in self.state(k, j, i) {
                        write!(w, ",{v}")?;
                    }
                    if k < self.steps() {
                        for v in self.control(k, j, i) {
                            write!(w, ",{v}")?;
                        }
                    } else {
                        for _ in 0..self.control_dim {
                            write!(w, ",")?;
                        }
                    }
                    for v in self.integrated_control(k, j, i) {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    }

    /// Compact binary snapshot. Layout (little-endian):
    /// magic `MKVESNAP`, version u32, then u64 dims
    /// (M, N, steps, n, m, d, ℓ, seed), then f64 t_start, t_end, then the
    /// arrays in order: times, states, controls, integrated, common, idio,
    /// each as raw little-endian f64.
    pub fn write_binary<W: IoWrite>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"MKVESNAP")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [
            self.scenarios as u64,
            self.particles as u64,
            self.grid.steps as u64,
            self.state_dim as u64,
            self.control_dim as u64,
            self.idio_dim as u64,
            self.common_dim as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.t_start.to_le_bytes())?;
        w.write_all(&self.grid.t_end.to_le_bytes())?;
        for arr in [
            &self.times,
            &self.states,
            &self.controls,
            &self.integrated,
            &self.common,
            &self.idio,
        ] {
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<ParticleEnsemble> {
        let bad = |m: &str| Error::InvalidArgument(format!("snapshot: {m}"));
        if bytes.len() < 12 || &bytes[..8] != b"MKVESNAP" {
            return Err(bad("bad magic"));
        }
        let mut pos = 8usize;
        let take_u32 = |b: &[u8], p: &mut usize| {
            let v = u32::from_le_bytes(b[*p..*p + 4].try_into().unwrap());
            *p += 4;
            v
        };
        let version = take_u32(bytes, &mut pos);
        if version != 1 {
            return Err(bad("unsupported version"));
        }
        let take_u64 = |b: &[u8], p: &mut usize| {
            let v = u64::from_le_bytes(b[*p..*p + 8].try_into().unwrap());
            *p += 8;
            v
        };
        let m = take_u64(bytes, &mut pos) as usize;
        let n = take_u64(bytes, &mut pos) as usize;
        let steps = take_u64(bytes, &mut pos) as usize;
        let sd = take_u64(bytes, &mut pos) as usize;
        let cd = take_u64(bytes, &mut pos) as usize;
        let id = take_u64(bytes, &mut pos) as usize;
        let ld = take_u64(bytes, &mut pos) as usize;
        let seed = take_u64(bytes, &mut pos);
        let take_f64 = |b: &[u8], p: &mut usize| {
            let v = f64::from_le_bytes(b[*p..*p + 8].try_into().unwrap());
            *p += 8;
            v
        };
        let t0 = take_f64(bytes, &mut pos);
        let t1 = take_f64(bytes, &mut pos);
        let grid = TimeGrid::new(t0, t1, steps)?;
        let lens = [
            steps + 1,
            (steps + 1) * m * n * sd,
            steps * m * n * cd,
            (steps + 1) * m * n * cd,
            steps * m * ld,
            steps * m * n * id,
        ];
        let total: usize = lens.iter().sum::<usize>() * 8 + pos;
        if bytes.len() != total {
            return Err(bad("length mismatch"));
        }
        let mut arrays: Vec<Vec<f64>> = Vec::new();
        for len in lens {
            let mut a = Vec::with_capacity(len);
            for _ in 0..len {
                a.push(take_f64(bytes, &mut pos));
            }
            arrays.push(a);
        }
        let idio = arrays.pop().unwrap();
        let common = arrays.pop().unwrap();
        let integrated = arrays.pop().unwrap();
        let controls = arrays.pop().unwrap();
        let states = arrays.pop().unwrap();
        let times = arrays.pop().unwrap();
        Ok(ParticleEnsemble {
            grid,
            scenarios: m,
            particles: n,
            state_dim: sd,
            control_dim: cd,
            idio_dim: id,
            common_dim: ld,
            seed,
            times,
            states,
            controls,
            integrated,
            common,
            idio,
        })
    }
}

/// Interaction statistics of one grid slice.
#[derive(Debug, Clone)]
pub struct SliceStats {
    pub pooled: bool,
    pub state_dim: usize,
    /// One row per scenario (or a single pooled row): means then variances.
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl SliceStats {
    pub fn row(&self, j: usize) -> (&[f64], &[f64]) {
        let n = self.state_dim;
        let j = if self.pooled { 0 } else { j };
        (&self.means[j * n..(j + 1) * n], &self.vars[j * n..(j + 1) * n])
    }
}

fn slice_stats_from(
    block: &[f64],
    scenarios: usize,
    particles: usize,
    dim: usize,
    pooled: bool,
) -> SliceStats {
    let rows = if pooled { 1 } else { scenarios };
    let per_row = if pooled {
        scenarios * particles
    } else {
        particles
    };
    let mut means = vec![0.0; rows * dim];
    let mut vars = vec![0.0; rows * dim];
    for r in 0..rows {
        let chunk = &block[r * per_row * dim..(r + 1) * per_row * dim];
        let mrow = &mut means[r * dim..(r + 1) * dim];
        for i in 0..per_row {
            for c in 0..dim {
                mrow[c] += chunk[i * dim + c];
            }
        }
        for v in mrow.iter_mut() {
            *v /= per_row as f64;
        }
        let vrow = &mut vars[r * dim..(r + 1) * dim];
        for i in 0..per_row {
            for c in 0..dim {
                let d = chunk[i * dim + c] - means[r * dim + c];
                vrow[c] += d * d;
            }
        }
        for v in vrow.iter_mut() {
            *v /= per_row as f64;
        }
    }
    SliceStats {
        pooled,
        state_dim: dim,
        means,
        vars,
    }
}

/// Frozen interaction flow used by the Picard solver: per-step statistics
/// plus the source slices the coefficients integrate against.
struct FrozenFlow {
    states: Vec<f64>,
    controls: Vec<f64>,
    stats: Vec<SliceStats>,
}

/// Per-iteration distances of the Picard solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardReport {
    /// `max_k mean_{j,i} ‖Y^{r+1}_k − Y^r_k‖²` per iteration.
    pub distances: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub tolerance: f64,
}

/// Simulate the controlled system on `grid` with `m` outer scenarios and `n`
/// inner particles per scenario.
pub fn simulate(
    spec: &ProblemSpec,
    policy: &Policy,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    run_scheme(spec, policy, grid, m, n, seed, None).map(|(e, _)| e)
}

/// Picard fixed-point solver: iterate the solution map with the measure
/// argument frozen from the previous iterate, reusing the same noise
/// increments each pass. `Y⁰` holds the initial states constant in time.
/// Stops when `max_k mean‖Y^{r+1}−Y^r‖² < tol`.
pub fn picard_solve(
    spec: &ProblemSpec,
    policy: &Policy,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<(ParticleEnsemble, PicardReport)> {
    if tol <= 0.0 || max_iter == 0 {
        return Err(Error::InvalidArgument(
            "picard_solve needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    // Y⁰: constant-in-time paths at the initial draws, controls evaluated
    // from the constant flow.
    let frozen0 = constant_initial_flow(spec, policy, grid, m, n, seed)?;
    let mut prev_states = frozen0.states.clone();
    let mut frozen = frozen0;
    let mut distances = Vec::new();
    let mut last: Option<ParticleEnsemble> = None;
    let mut converged = false;
    for _ in 0..max_iter {
        let (ens, _) = run_scheme(spec, policy, grid, m, n, seed, Some(&frozen))?;
        let d = mean_sq_sup_distance(&prev_states, &ens, m, n);
        distances.push(d);
        prev_states.copy_from_slice(ens.raw_states());
        frozen = freeze_flow(&ens);
        last = Some(ens);
        if d < tol {
            converged = true;
            break;
        }
    }
    let iterations = distances.len();
    Ok((
        last.expect("max_iter >= 1"),
        PicardReport {
            distances,
            iterations,
            converged,
            tolerance: tol,
        },
    ))
}

fn mean_sq_sup_distance(prev: &[f64], ens: &ParticleEnsemble, m: usize, n: usize) -> f64 {
    let sd = ens.state_dim();
    let per_time = m * n * sd;
    let mut worst: f64 = 0.0;
    for k in 0..=ens.steps() {
        let a = &prev[k * per_time..(k + 1) * per_time];
        let b = &ens.raw_states()[k * per_time..(k + 1) * per_time];
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            acc += d * d;
        }
        worst = worst.max(acc / (m * n) as f64);
    }
    worst
}

fn freeze_flow(ens: &ParticleEnsemble) -> FrozenFlow {
    let stats = (0..ens.steps()).map(|k| ens.slice_stats(k)).collect();
    FrozenFlow {
        states: ens.raw_states().to_vec(),
        controls: ens.raw_controls().to_vec(),
        stats,
    }
}

/// Flow of an ensemble whose paths sit at the initial draws for all times,
/// with controls evaluated against that constant flow.
fn constant_initial_flow(
    spec: &ProblemSpec,
    policy: &Policy,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<FrozenFlow> {
    let sd = spec.state_dim;
    let cd = spec.control_dim;
    let steps = grid.steps;
    let mut init = vec![0.0; m * n * sd];
    let stream = Stream::new(seed, Role::InitialState, &[]);
    for g in 0..m * n {
        spec.initial_law
            .sample(&stream, g as u64, &mut init[g * sd..(g + 1) * sd]);
    }
    let mut states = vec![0.0; (steps + 1) * m * n * sd];
    for k in 0..=steps {
        states[k * m * n * sd..(k + 1) * m * n * sd].copy_from_slice(&init);
    }
    let pooled = spec.common_dim == 0;
    let base_stats = slice_stats_from(&init, m, n, sd, pooled);
    let times = grid.points();
    let horizon = (grid.t_start, grid.t_end);
    let mut controls = vec![0.0; steps * m * n * cd];
    let mut view = InfoView {
        class_name: policy.info_class.name(),
        ..Default::default()
    };
    let dither_streams: Vec<Stream> = (0..m * n)
        .map(|g| Stream::new(seed, Role::Dither, &[g as u64]))
        .collect();
    for k in 0..steps {
        view.t = times[k];
        view.step = k;
        for j in 0..m {
            let (mean, var) = base_stats.row(j);
            view.slice_mean = mean.to_vec();
            view.slice_var = var.to_vec();
            for i in 0..n {
                let g = j * n + i;
                view.summary = init[g * sd..(g + 1) * sd].to_vec();
                if policy.info_class == InfoClass::Randomized {
                    view.dither = Some(dither_streams[g].uniform(k as u64));
                }
                let mut out = vec![0.0; cd];
                policy.evaluate_into(&view, horizon, sd, &mut out)?;
                controls[((k * m + j) * n + i) * cd..((k * m + j) * n + i + 1) * cd]
                    .copy_from_slice(&out);
            }
        }
    }
    let stats = (0..steps).map(|_| base_stats.clone()).collect();
    Ok(FrozenFlow {
        states,
        controls,
        stats,
    })
}

/// One full forward pass. With `frozen == None` the interaction terms come
/// from the current (same-step) slices; otherwise from the frozen flow.
fn run_scheme(
    spec: &ProblemSpec,
    policy: &Policy,
    grid: &TimeGrid,
    m: usize,
    n: usize,
    seed: u64,
    frozen: Option<&FrozenFlow>,
) -> Result<(ParticleEnsemble, ())> {
    spec.validate_dims()?;
    policy.validate(spec.state_dim)?;
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("need M >= 1 and N >= 1".into()));
    }
    if policy.control_dim() != spec.control_dim {
        return Err(Error::DimensionMismatch {
            context: "policy control dimension",
            expected: spec.control_dim,
            got: policy.control_dim(),
        });
    }
    let sd = spec.state_dim;
    let cd = spec.control_dim;
    let d = spec.idio_dim;
    let ell = spec.common_dim;
    let steps = grid.steps;
    let delta = grid.delta();
    let times = grid.points();
    let pooled = ell == 0;
    let horizon = (grid.t_start, grid.t_end);

    // Noise and initial draws, all counter-based.
    let mut common = vec![0.0; steps * m * ell];
    if ell > 0 {
        for j in 0..m {
            let s = common_noise_stream(seed, j);
            let inc = brownian_increments(&s, steps, ell, delta);
            for k in 0..steps {
                common[(k * m + j) * ell..(k * m + j + 1) * ell]
                    .copy_from_slice(&inc[k * ell..(k + 1) * ell]);
            }
        }
    }
    let mut idio = vec![0.0; steps * m * n * d];
    if d > 0 {
        for g in 0..m * n {
            let s = idio_noise_stream(seed, g);
            let inc = brownian_increments(&s, steps, d, delta);
            let (j, i) = (g / n, g % n);
            for k in 0..steps {
                idio[((k * m + j) * n + i) * d..((k * m + j) * n + i + 1) * d]
                    .copy_from_slice(&inc[k * d..(k + 1) * d]);
            }
        }
    }
    let mut states = vec![0.0; (steps + 1) * m * n * sd];
    {
        let stream = Stream::new(seed, Role::InitialState, &[]);
        for g in 0..m * n {
            spec.initial_law
                .sample(&stream, g as u64, &mut states[g * sd..(g + 1) * sd]);
        }
    }
    let mut controls = vec![0.0; steps * m * n * cd];
    let mut integrated = vec![0.0; (steps + 1) * m * n * cd];

    // Tracked path summary for feedback rules (running-state reads the
    // current state directly, so it needs no extra storage).
    let track_summary = policy.summary != SummaryKind::RunningState;
    let summary_dim = crate::problems::UpdatingFunction::new(policy.summary).summary_dim(sd);
    let mut summaries = vec![0.0; if track_summary { m * n * summary_dim } else { 0 }];
    let mut avg_integral = vec![0.0; if track_summary { m * n * sd } else { 0 }];
    if track_summary {
        for g in 0..m * n {
            let x0 = &states[g * sd..(g + 1) * sd];
            init_summary(policy.summary, x0, &mut summaries[g * summary_dim..(g + 1) * summary_dim]);
        }
    }

    let per_time_s = m * n * sd;
    let per_time_c = m * n * cd;
    let dither_needed = policy.info_class == InfoClass::Randomized;

    for k in 0..steps {
        let t = times[k];
        // Interaction statistics for this step: frozen flow or current states.
        let stats_owned;
        let stats: &SliceStats = match frozen {
            Some(f) => &f.stats[k],
            None => {
                stats_owned = slice_stats_from(
                    &states[k * per_time_s..(k + 1) * per_time_s],
                    m,
                    n,
                    sd,
                    pooled,
                );
                &stats_owned
            }
        };

        // Pass A: choose controls from information at t_k.
        {
            let (past, _) = states.split_at(per_time_s * (k + 1));
            let ctrl_block = &mut controls[k * per_time_c..(k + 1) * per_time_c];
            let summaries_ref = &summaries;
            let result: Result<Vec<()>> = ctrl_block
                .par_chunks_mut(n * cd)
                .enumerate()
                .map(|(j, chunk)| {
                    let (mean, var) = stats.row(j);
                    let mut view = InfoView {
                        t,
                        step: k,
                        class_name: policy.info_class.name(),
                        slice_mean: mean.to_vec(),
                        slice_var: var.to_vec(),
                        ..Default::default()
                    };
                    let mut summary_buf = vec![0.0; summary_dim];
                    for i in 0..n {
                        let g = j * n + i;
                        if track_summary {
                            summary_buf.copy_from_slice(
                                &summaries_ref[g * summary_dim..(g + 1) * summary_dim],
                            );
                        } else {
                            let a = ((k * m + j) * n + i) * sd;
                            summary_buf.copy_from_slice(&past[a..a + sd]);
                        }
                        std::mem::swap(&mut view.summary, &mut summary_buf);
                        if dither_needed {
                            view.dither = Some(
                                Stream::new(seed, Role::Dither, &[g as u64]).uniform(k as u64),
                            );
                        }
                        policy.evaluate_into(
                            &view,
                            horizon,
                            sd,
                            &mut chunk[i * cd..(i + 1) * cd],
                        )?;
                        std::mem::swap(&mut view.summary, &mut summary_buf);
                    }
                    Ok(())
                })
                .collect();
            result?;
        }

        // Pass B: advance states and integrated controls.
        {
            let (past, future) = states.split_at_mut(per_time_s * (k + 1));
            let next = &mut future[..per_time_s];
            let (int_past, int_future) = integrated.split_at_mut(per_time_c * (k + 1));
            let int_next = &mut int_future[..per_time_c];
            let ctrl_block = &controls[k * per_time_c..(k + 1) * per_time_c];
            // Interaction slice the coefficients integrate against.
            let (mslice_states, mslice_controls): (&[f64], &[f64]) = match frozen {
                Some(f) => (
                    &f.states[k * per_time_s..(k + 1) * per_time_s],
                    &f.controls[k * per_time_c..(k + 1) * per_time_c],
                ),
                None => (&past[k * per_time_s..], ctrl_block),
            };
            let idio_block = &idio[k * m * n * d..(k + 1) * m * n * d];
            let common_block = &common[k * m * ell..(k + 1) * m * ell];

            let step_result: Result<Vec<()>> = next
                .par_chunks_mut(n * sd)
                .zip(int_next.par_chunks_mut(n * cd))
                .enumerate()
                .map(|(j, (next_chunk, int_chunk))| {
                    let (mean, _) = stats.row(j);
                    let view = if pooled {
                        MeasureView::new(mslice_states, mslice_controls, m * n, sd, cd, mean)
                    } else {
                        MeasureView::new(
                            &mslice_states[j * n * sd..(j + 1) * n * sd],
                            &mslice_controls[j * n * cd..(j + 1) * n * cd],
                            n,
                            sd,
                            cd,
                            mean,
                        )
                    };
                    let mut bbuf = vec![0.0; sd];
                    let mut sbuf = vec![0.0; sd * d];
                    let mut s0buf = vec![0.0; sd * ell];
                    for i in 0..n {
                        let path = PathSlice::strided(
                            &times,
                            past,
                            (j * n + i) * sd,
                            per_time_s,
                            sd,
                            k + 1,
                        );
                        let u = &ctrl_block[i * cd..(i + 1) * cd];
                        let ctx = CoeffCtx {
                            t,
                            path,
                            measure: view,
                            control: u,
                        };
                        (spec.drift)(&ctx, &mut bbuf);
                        (spec.vol)(&ctx, &mut sbuf);
                        (spec.common_vol)(&ctx, &mut s0buf);
                        if !bbuf.iter().chain(&sbuf).chain(&s0buf).all(|v| v.is_finite()) {
                            return Err(Error::Coefficient {
                                scenario: j,
                                particle: i,
                                step: k,
                                message: "non-finite coefficient value".into(),
                            });
                        }
                        let x = path.row(k);
                        let dw = &idio_block[(j * n + i) * d..(j * n + i + 1) * d];
                        let db = &common_block[j * ell..(j + 1) * ell];
                        let out = &mut next_chunk[i * sd..(i + 1) * sd];
                        for c in 0..sd {
                            let mut v = x[c] + bbuf[c] * delta;
                            for e in 0..d {
                                v += sbuf[c * d + e] * dw[e];
                            }
                            for e in 0..ell {
                                v += s0buf[c * ell + e] * db[e];
                            }
                            out[c] = v;
                        }
                        let a_prev = &int_past[k * per_time_c + (j * n + i) * cd..][..cd];
                        let a_next = &mut int_chunk[i * cd..(i + 1) * cd];
                        for c in 0..cd {
                            a_next[c] = a_prev[c] + u[c] * delta;
                        }
                    }
                    Ok(())
                })
                .collect();
            step_result?;
        }

        // Non-finite state check on the freshly written block, in canonical
        // (scenario, particle) order so the reported index is deterministic.
        let fresh = &states[(k + 1) * per_time_s..(k + 2) * per_time_s];
        if let Some(pos) = fresh.iter().position(|v| !v.is_finite()) {
            let flat = pos / sd;
            return Err(Error::NonFiniteState {
                scenario: flat / n,
                particle: flat % n,
                step: k,
            });
        }

        if track_summary {
            let (past, future) = states.split_at(per_time_s * (k + 1));
            let fresh = &future[..per_time_s];
            let old = &past[k * per_time_s..];
            let dt = delta;
            let elapsed = times[k + 1] - times[0];
            for g in 0..m * n {
                update_summary(
                    policy.summary,
                    &old[g * sd..(g + 1) * sd],
                    &fresh[g * sd..(g + 1) * sd],
                    dt,
                    elapsed,
                    &mut avg_integral[g * sd..(g + 1) * sd],
                    &mut summaries[g * summary_dim..(g + 1) * summary_dim],
                );
            }
        }
    }

    Ok((
        ParticleEnsemble {
            grid: *grid,
            scenarios: m,
            particles: n,
            state_dim: sd,
            control_dim: cd,
            idio_dim: d,
            common_dim: ell,
            seed,
            times,
            states,
            controls,
            integrated,
            common,
            idio,
        },
        (),
    ))
}

fn init_summary(kind: SummaryKind, x0: &[f64], out: &mut [f64]) {
    let n = x0.len();
    match kind {
        SummaryKind::RunningState | SummaryKind::RunningMax | SummaryKind::RunningAverage => {
            out.copy_from_slice(x0)
        }
        SummaryKind::Composite => {
            out[..n].copy_from_slice(x0);
            out[n..2 * n].copy_from_slice(x0);
            out[2 * n..3 * n].copy_from_slice(x0);
        }
    }
}

fn update_summary(
    kind: SummaryKind,
    old_x: &[f64],
    new_x: &[f64],
    dt: f64,
    elapsed: f64,
    integral: &mut [f64],
    out: &mut [f64],
) {
    let n = new_x.len();
    match kind {
        SummaryKind::RunningState => out.copy_from_slice(new_x),
        SummaryKind::RunningMax => {
            for c in 0..n {
                out[c] = out[c].max(new_x[c]);
            }
        }
        SummaryKind::RunningAverage => {
            for c in 0..n {
                integral[c] += 0.5 * dt * (old_x[c] + new_x[c]);
                out[c] = integral[c] / elapsed;
            }
        }
        SummaryKind::Composite => {
            out[..n].copy_from_slice(new_x);
            for c in 0..n {
                out[n + c] = out[n + c].max(new_x[c]);
                integral[c] += 0.5 * dt * (old_x[c] + new_x[c]);
                out[2 * n + c] = integral[c] / elapsed;
            }
        }
    }
}

/// Evaluate the terminal reward for every particle: `g(X_path, μ_T)` with the
/// terminal state slice (per scenario, pooled when ℓ = 0).
pub fn terminal_rewards(spec: &ProblemSpec, ens: &ParticleEnsemble) -> Vec<f64> {
    let k = ens.steps();
    let m = ens.scenarios();
    let n = ens.particles();
    let sd = ens.state_dim();
    let stats = ens.slice_stats(k);
    let mut out = vec![0.0; m * n];
    let empty: [f64; 0] = [];
    for j in 0..m {
        let (mean, _) = stats.row(j);
        let view = if ens.pooled_interaction() {
            MeasureView::new(ens.pooled_states(k), &empty, m * n, sd, 0, mean)
        } else {
            MeasureView::new(ens.scenario_states(k, j), &empty, n, sd, 0, mean)
        };
        for i in 0..n {
            let ctx = TerminalCtx {
                path: ens.path(j, i, k),
                measure: view,
            };
            out[j * n + i] = (spec.terminal_reward)(&ctx);
        }
    }
    out
}

/// Left-endpoint quadrature of the running reward for every particle,
/// `Σ_{k < stop_j} L(t_k, ·, μ̄_k, u_k) Δ`, with an optional per-scenario
/// stopping index.
pub fn running_rewards(
    spec: &ProblemSpec,
    ens: &ParticleEnsemble,
    stop: Option<&[usize]>,
) -> Vec<f64> {
    let m = ens.scenarios();
    let n = ens.particles();
    let sd = ens.state_dim();
    let cd = ens.control_dim();
    let delta = ens.grid().delta();
    let mut out = vec![0.0; m * n];
    for k in 0..ens.steps() {
        let stats = ens.slice_stats(k);
        let t = ens.times()[k];
        for j in 0..m {
            if let Some(s) = stop {
                if k >= s[j] {
                    continue;
                }
            }
            let (mean, _) = stats.row(j);
            let view = if ens.pooled_interaction() {
                MeasureView::new(
                    ens.pooled_states(k),
                    ens.pooled_controls(k),
                    m * n,
                    sd,
                    cd,
                    mean,
                )
            } else {
                MeasureView::new(
                    ens.scenario_states(k, j),
                    ens.scenario_controls(k, j),
                    n,
                    sd,
                    cd,
                    mean,
                )
            };
            for i in 0..n {
                let ctx = CoeffCtx {
                    t,
                    path: ens.path(j, i, k),
                    measure: view,
                    control: ens.control(k, j, i),
                };
                out[j * n + i] += (spec.running_reward)(&ctx) * delta;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicyFamily;
    use crate::problems::{coeffs, ControlBox, InitialLaw, Objective};

    fn frozen_spec() -> ProblemSpec {
        ProblemSpec {
            label: "frozen".into(),
            state_dim: 1,
            idio_dim: 1,
            common_dim: 1,
            control_dim: 1,
            horizon: 1.0,
            control_box: ControlBox::scalar(-1.0, 1.0),
            drift: coeffs::zero(),
            vol: coeffs::constant(vec![0.0]),
            common_vol: coeffs::constant(vec![0.0]),
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

    fn constant_policy(u: f64) -> Policy {
        Policy::new(
            InfoClass::CommonNoise,
            PolicyFamily::Constant,
            vec![u],
            ControlBox::scalar(-1.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn frozen_dynamics_states_constant() {
        let spec = frozen_spec();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let ens = simulate(&spec, &constant_policy(0.3), &grid, 3, 5, 7).unwrap();
        for k in 0..=16 {
            for j in 0..3 {
                for i in 0..5 {
                    assert_eq!(ens.state(k, j, i), ens.state(0, j, i));
                }
            }
        }
    }

    #[test]
    fn brownian_marginal_variance() {
        // b = 0, σ = 1, σ₀ = 0, X₀ = 0: Var(X_T) ≈ T within 4 standard
        // errors of the chi-square sampling law.
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        spec.common_dim = 0;
        spec.initial_law = InitialLaw::Dirac { point: vec![0.0] };
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let (m, n) = (8, 2000);
        let ens = simulate(&spec, &constant_policy(0.0), &grid, m, n, 11).unwrap();
        let total = (m * n) as f64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for j in 0..m {
            for i in 0..n {
                let x = ens.state(50, j, i)[0];
                sum += x;
                sumsq += x * x;
            }
        }
        let mean = sum / total;
        let var = sumsq / total - mean * mean;
        let se = 1.0 * (2.0 / (total - 1.0)).sqrt();
        assert!(
            (var - 1.0).abs() < 4.0 * se,
            "var {var} vs 1.0 (se {se})"
        );
    }

    #[test]
    fn common_noise_shared_within_scenario() {
        let mut spec = frozen_spec();
        spec.common_vol = coeffs::constant(vec![1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ens = simulate(&spec, &constant_policy(0.0), &grid, 2, 3, 5).unwrap();
        for k in 0..8 {
            let b0 = ens.common_increment(k, 0);
            let b1 = ens.common_increment(k, 1);
            assert_ne!(b0[0].to_bits(), b1[0].to_bits());
            for i in 0..3 {
                let a = ens.idio_increment(k, 0, i);
                let b = ens.idio_increment(k, 0, (i + 1) % 3);
                assert_ne!(a[0].to_bits(), b[0].to_bits());
            }
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        spec.common_vol = coeffs::constant(vec![0.5]);
        spec.drift = coeffs::scalar_linear_drift(-0.5, 0.2, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let policy = Policy::new(
            InfoClass::Feedback,
            PolicyFamily::LinearFeedback,
            vec![0.1, -0.4, 0.2],
            ControlBox::scalar(-1.0, 1.0),
        )
        .unwrap();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let e1 = pool1.install(|| simulate(&spec, &policy, &grid, 4, 16, 99).unwrap());
        let e4 = pool4.install(|| simulate(&spec, &policy, &grid, 4, 16, 99).unwrap());
        assert_eq!(e1.raw_states(), e4.raw_states());
        assert_eq!(e1.raw_controls(), e4.raw_controls());
    }

    #[test]
    fn pooling_invariance_without_common_noise() {
        // ℓ = 0: (M, N) = (4, 8) and (1, 32) produce bit-identical states in
        // global particle order.
        let mut spec = frozen_spec();
        spec.common_dim = 0;
        spec.vol = coeffs::constant(vec![1.0]);
        spec.drift = coeffs::scalar_linear_drift(-1.0, 0.5, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let policy = Policy::new(
            InfoClass::Feedback,
            PolicyFamily::LinearFeedback,
            vec![0.0, -0.5, 0.25],
            ControlBox::scalar(-1.0, 1.0),
        )
        .unwrap();
        let a = simulate(&spec, &policy, &grid, 4, 8, 123).unwrap();
        let b = simulate(&spec, &policy, &grid, 1, 32, 123).unwrap();
        assert_eq!(a.raw_states(), b.raw_states());
        assert_eq!(a.raw_controls(), b.raw_controls());
    }

    #[test]
    fn integrated_control_recovers_stored_controls() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let policy = Policy::new(
            InfoClass::Feedback,
            PolicyFamily::LinearFeedback,
            vec![0.1, 0.7, 0.0],
            ControlBox::scalar(-1.0, 1.0),
        )
        .unwrap();
        let ens = simulate(&spec, &policy, &grid, 2, 4, 3).unwrap();
        let d = grid.delta();
        for k in 0..16 {
            for j in 0..2 {
                for i in 0..4 {
                    let du =
                        (ens.integrated_control(k + 1, j, i)[0] - ens.integrated_control(k, j, i)[0]) / d;
                    assert!(
                        (du - ens.control(k, j, i)[0]).abs() < 1e-12,
                        "recovered {du} vs {}",
                        ens.control(k, j, i)[0]
                    );
                }
            }
        }
    }

    #[test]
    fn moment_stability_under_step_halving() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![0.7]);
        spec.common_vol = coeffs::constant(vec![0.3]);
        spec.drift = coeffs::scalar_linear_drift(-1.0, 0.0, 0.0);
        let policy = constant_policy(0.0);
        let sup_second_moment = |steps: usize| -> f64 {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let ens = simulate(&spec, &policy, &grid, 16, 256, 21).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..=steps {
                let blk = ens.pooled_states(k);
                let m2 = blk.iter().map(|x| x * x).sum::<f64>() / blk.len() as f64;
                worst = worst.max(m2);
            }
            worst
        };
        let a = sup_second_moment(25);
        let b = sup_second_moment(50);
        assert!(a.is_finite() && b.is_finite());
        assert!((a / b - 1.0).abs() < 0.2, "halving ratio {a}/{b}");
    }

    #[test]
    fn picard_converges_in_two_iterations_without_measure_coupling() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        spec.drift = coeffs::constant(vec![0.5]);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let (ens, rep) =
            picard_solve(&spec, &constant_policy(0.2), &grid, 2, 16, 5, 1e-12, 10).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 2);
        assert!(rep.distances[1] < 1e-12, "{:?}", rep.distances);
        let direct = simulate(&spec, &constant_policy(0.2), &grid, 2, 16, 5).unwrap();
        assert_eq!(ens.raw_states(), direct.raw_states());
    }

    #[test]
    fn picard_tracks_mean_growth_ode() {
        // b = slice mean, σ = 1, σ₀ = 0, X₀ = 1: conditional mean follows
        // m' = m, and the Picard distances decay geometrically.
        let mut spec = frozen_spec();
        spec.common_dim = 0;
        spec.vol = coeffs::constant(vec![1.0]);
        spec.drift = std::sync::Arc::new(|ctx: &CoeffCtx, out: &mut [f64]| {
            out[0] = ctx.measure.mean_state(0);
        });
        spec.initial_law = InitialLaw::Dirac { point: vec![1.0] };
        let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let (ens, rep) =
            picard_solve(&spec, &constant_policy(0.0), &grid, 1, 4000, 13, 1e-10, 30).unwrap();
        assert!(rep.converged, "{:?}", rep.distances);
        for w in rep.distances.windows(2) {
            if w[0] > 1e-12 {
                assert!(w[1] < w[0], "distances not decreasing: {:?}", rep.distances);
            }
        }
        // Mean at T should track e^T within Monte Carlo and Euler error.
        let blk = ens.pooled_states(40);
        let mean = blk.iter().sum::<f64>() / blk.len() as f64;
        assert!(
            (mean - 1.0f64.exp()).abs() < 0.1,
            "terminal mean {mean} vs e"
        );
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let ens = simulate(&spec, &constant_policy(0.1), &grid, 2, 3, 77).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        let back = ParticleEnsemble::read_binary(&buf).unwrap();
        assert_eq!(ens.raw_states(), back.raw_states());
        assert_eq!(ens.raw_controls(), back.raw_controls());
        assert_eq!(ens.times(), back.times());
        assert_eq!(ens.seed(), back.seed());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = frozen_spec();
        let grid = TimeGrid::new(0.0, 0.5, 2).unwrap();
        let ens = simulate(&spec, &constant_policy(0.0), &grid, 1, 2, 1).unwrap();
        let mut buf = Vec::new();
        ens.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,particle,time,state_0,control_0,a_0"
        );
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn view_isolation_by_copy() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let mut ens = simulate(&spec, &constant_policy(0.0), &grid, 2, 3, 9).unwrap();
        let view = ens
            .info_view(InfoClass::Feedback, SummaryKind::RunningState, 1, 2, 2)
            .unwrap();
        let before = view.clone();
        // Mutating the ensemble afterwards cannot change the copied view.
        ens.states.iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(before.summary, view.summary);
        assert_eq!(before.slice_mean, view.slice_mean);
    }

    #[test]
    fn views_are_predictable() {
        let mut spec = frozen_spec();
        spec.vol = coeffs::constant(vec![1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
        let ens = simulate(&spec, &constant_policy(0.0), &grid, 1, 2, 9).unwrap();
        let v0 = ens
            .info_view(InfoClass::CommonNoise, SummaryKind::RunningState, 0, 0, 0)
            .unwrap();
        assert!(v0.common_increments.is_empty());
        assert!(v0.summary.is_empty());
        let v3 = ens
            .info_view(InfoClass::Strong, SummaryKind::RunningState, 0, 1, 3)
            .unwrap();
        assert_eq!(v3.idio_rows(1), 3);
        assert_eq!(v3.common_rows(1), 3);
    }
}
