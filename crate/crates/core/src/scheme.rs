//! Linearly implicit finite-volume step and the time loop.
//!
//! With `g = exp(-f)` frozen at the old time level, each species solves
//!
//! ```text
//! vol_j c_j' + Σ_faces τ_f g_f (c_j'/g_j - c_nb'/g_nb) = vol_j c_j
//! ```
//!
//! where `τ_f = dt · face length / spacing` and `g_f` is the harmonic mean
//! across the face. In 1D this tridiagonal system is solved directly for
//! `c`. In 2D, substituting `c = w √g` and scaling row `j` by `1/√g_j`
//! gives a symmetric M-matrix for conjugate gradients.

use log::{debug, warn};

use crate::diagnostics::{record, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::field::{FieldModel, FieldSet, SpeciesState};
use crate::grid::{Grid, Grid1D, Grid2D};
use crate::linalg::{pcg, thomas};

/// Robin data `α φ - β φ' = left` at `-L` and `α φ + β φ' = right` at `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobinBc {
    pub alpha: f64,
    pub beta: f64,
    pub left: f64,
    pub right: f64,
}

/// Second-order finite differences for `-φ'' = ρ` with Robin ends.
///
/// The one-sided derivative at each end uses three points; the third is
/// eliminated with the first interior equation so the system stays
/// tridiagonal.
pub fn solve_poisson_robin_1d(rho: &[f64], bc: &RobinBc, grid: &Grid1D) -> Result<Vec<f64>> {
    let n = grid.len();
    if rho.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: rho.len(),
        });
    }
    if !(bc.alpha.is_finite() && bc.beta.is_finite() && bc.left.is_finite() && bc.right.is_finite()) {
        return Err(Error::invalid("Robin data must be finite"));
    }
    if bc.alpha == 0.0 {
        return Err(Error::invalid(
            "Robin coefficient alpha = 0 leaves the potential determined only up to a constant",
        ));
    }
    let h = grid.dx();
    let h2 = h * h;
    let k = bc.beta / h;
    let mut lower = vec![-1.0; n - 1];
    let mut upper = vec![-1.0; n - 1];
    let mut diag = vec![2.0; n];
    let mut rhs: Vec<f64> = rho.iter().map(|r| h2 * r).collect();
    diag[0] = bc.alpha + k;
    upper[0] = -k;
    rhs[0] = bc.left + bc.beta * h * rho[1] / 2.0;
    diag[n - 1] = bc.alpha + k;
    lower[n - 2] = -k;
    rhs[n - 1] = bc.right + bc.beta * h * rho[n - 2] / 2.0;
    thomas(&lower, &diag, &upper, &rhs)
}

/// Time-step parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub dt: f64,
    /// Relative residual target for the 2D iterative solve.
    pub tolerance: f64,
    /// Iteration cap for the 2D solve; `None` means `10 √n`.
    pub max_iterations: Option<usize>,
}

impl StepConfig {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            tolerance: 1e-12,
            max_iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-6) {
            return Err(Error::invalid(format!(
                "solver tolerance must lie in (0, 1e-6], got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Per-step bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    /// Mass removed by zeroing round-off negatives, summed over species.
    pub clamped_mass: f64,
    /// Largest iteration count over species and solves (0 for direct solves).
    pub iterations: usize,
    /// Deepest halving of the 2D step after the iteration cap was hit
    /// (0 when every solve converged at the full step).
    pub halvings: usize,
}

/// Relative size of negative round-off that is silently zeroed after a
/// direct solve.
const CLAMP_TOL: f64 = 1e-13;

/// Same after the 2D iterative solve, whose pointwise error in `c` can
/// exceed its residual by the spread of `exp(-(f - s)/2)`.
const ITERATIVE_CLAMP_TOL: f64 = 1e-8;

fn check_inputs(state: &SpeciesState, fields: &FieldSet, cfg: &StepConfig) -> Result<()> {
    cfg.validate()?;
    if fields.time != state.time {
        return Err(Error::invalid(format!(
            "fields assembled at t = {} used for a state at t = {}",
            fields.time, state.time
        )));
    }
    if fields.f.len() != state.species_count() {
        return Err(Error::ShapeMismatch {
            expected: state.species_count(),
            got: fields.f.len(),
        });
    }
    Ok(())
}

/// Midpoint of the range of `f`, subtracted before exponentiating.
fn shift_of(f: &[f64]) -> f64 {
    let (lo, hi) = f
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    0.5 * (lo + hi)
}

/// Outflow rates `τ g_f / g_j` and `τ g_f / g_nb` and symmetric coupling
/// `τ g_f / √(g_j g_nb)` of one face, from `d = f_nb - f_j`.
#[inline]
fn face_terms(tau: f64, d: f64) -> (f64, f64, f64) {
    let to_j = tau * 2.0 / (1.0 + d.exp());
    let to_nb = tau * 2.0 / (1.0 + (-d).exp());
    let off = tau / (0.5 * d).cosh();
    (to_j, to_nb, off)
}

fn back_transform(
    w: &[f64],
    f: &[f64],
    s: f64,
    vol: &[f64],
    species: usize,
) -> Result<(Vec<f64>, f64)> {
    let c: Vec<f64> = w
        .iter()
        .zip(f)
        .map(|(w, f)| if *w == 0.0 { 0.0 } else { w * (-(f - s) / 2.0).exp() })
        .collect();
    clamp_roundoff(c, vol, species, ITERATIVE_CLAMP_TOL)
}

/// Zeroes round-off negatives and rejects anything worse.
fn clamp_roundoff(mut c: Vec<f64>, vol: &[f64], species: usize, tol: f64) -> Result<(Vec<f64>, f64)> {
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut clamped = 0.0;
    for (j, v) in c.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "species {species} non-finite concentration at node {j}"
            )));
        }
        if *v < 0.0 {
            if *v < -tol * scale {
                return Err(Error::InvariantViolation(format!(
                    "species {species} concentration {v:e} at node {j}"
                )));
            }
            clamped += -*v * vol[j];
            *v = 0.0;
        }
    }
    if clamped > 0.0 {
        debug!("species {species}: clamped mass {clamped:e}");
    }
    Ok((c, clamped))
}

fn rhs_of(c: &[f64], f: &[f64], s: f64, vol: &[f64]) -> Result<Vec<f64>> {
    let b: Vec<f64> = c
        .iter()
        .zip(f)
        .zip(vol)
        .map(|((c, f), v)| if *c == 0.0 { 0.0 } else { v * c * ((f - s) / 2.0).exp() })
        .collect();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("potential range too large for the scaled step"));
    }
    Ok(b)
}

/// One backward-Euler step on a 1D grid.
pub fn step_1d(state: &SpeciesState, fields: &FieldSet, cfg: &StepConfig) -> Result<(SpeciesState, StepReport)> {
    check_inputs(state, fields, cfg)?;
    let Grid::D1(grid) = state.grid else {
        return Err(Error::invalid("step_1d called with a 2D state"));
    };
    let n = grid.len();
    let vol = grid.volumes();
    let tau = cfg.dt / grid.dx();
    let mut report = StepReport::default();
    let mut conc = Vec::with_capacity(state.species_count());
    for (m, (c, f)) in state.conc.iter().zip(&fields.f).enumerate() {
        // concentration form: columns sum to the volumes and every pivot
        // stays above its volume, so face rates may span any range
        let mut diag = vol.clone();
        let mut lower = vec![0.0; n - 1];
        let mut upper = vec![0.0; n - 1];
        for j in 0..n - 1 {
            let (out, back, _) = face_terms(tau, f[j + 1] - f[j]);
            diag[j] += out;
            diag[j + 1] += back;
            lower[j] = -out;
            upper[j] = -back;
        }
        let rhs: Vec<f64> = c.iter().zip(&vol).map(|(c, v)| c * v).collect();
        let cn = thomas(&lower, &diag, &upper, &rhs)?;
        let (cn, clamped) = clamp_roundoff(cn, &vol, m + 1, CLAMP_TOL)?;
        report.clamped_mass += clamped;
        conc.push(cn);
    }
    Ok((
        SpeciesState {
            grid: state.grid,
            valences: state.valences.clone(),
            conc,
            time: state.time + cfg.dt,
        },
        report,
    ))
}

/// Five-point operator in the scaled variable.
struct Operator2D {
    nx: usize,
    ny: usize,
    diag: Vec<f64>,
    /// coupling across the face between `(ix, iy)` and `(ix + 1, iy)`
    off_x: Vec<f64>,
    /// coupling across the face between `(ix, iy)` and `(ix, iy + 1)`
    off_y: Vec<f64>,
}

/// Largest jump of `f` across a face for which the coupling
/// `τ / cosh(d/2)` stays a normal float.
const MAX_FACE_JUMP: f64 = 1400.0;

/// Largest range of `f` for which `exp(±(f - s)/2)` stays finite, with
/// room for the volume and time-step factors.
const MAX_RANGE: f64 = 2800.0;

impl Operator2D {
    fn build(grid: &Grid2D, f: &[f64], dt: f64) -> Result<Self> {
        let (nx, ny) = grid.shape();
        let mut diag = grid.volumes();
        let vx = grid.x.volumes();
        let vy = grid.y.volumes();
        let mut off_x = vec![0.0; (nx - 1) * ny];
        let mut off_y = vec![0.0; nx * (ny - 1)];
        let mut jump = 0.0f64;
        for ix in 0..nx - 1 {
            for iy in 0..ny {
                let tau = dt * vy[iy] / grid.dx();
                let (i, j) = (ix * ny + iy, (ix + 1) * ny + iy);
                jump = jump.max((f[j] - f[i]).abs());
                let (a, b, o) = face_terms(tau, f[j] - f[i]);
                diag[i] += a;
                diag[j] += b;
                off_x[ix * ny + iy] = o;
            }
        }
        for ix in 0..nx {
            let tau = dt * vx[ix] / grid.dy();
            for iy in 0..ny - 1 {
                let (i, j) = (ix * ny + iy, ix * ny + iy + 1);
                jump = jump.max((f[j] - f[i]).abs());
                let (a, b, o) = face_terms(tau, f[j] - f[i]);
                diag[i] += a;
                diag[j] += b;
                off_y[ix * (ny - 1) + iy] = o;
            }
        }
        let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if !(hi - lo <= MAX_RANGE) {
            return Err(Error::invalid(format!(
                "field spans {:e}; the 2D step handles a range of at most {MAX_RANGE}",
                hi - lo
            )));
        }
        if !(jump <= MAX_FACE_JUMP) {
            return Err(Error::invalid(format!(
                "field jumps by {jump:e} across a face; the 2D step handles at most {MAX_FACE_JUMP}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            diag,
            off_x,
            off_y,
        })
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for i in 0..nx * ny {
            y[i] = self.diag[i] * x[i];
        }
        for ix in 0..nx - 1 {
            let base = ix * ny;
            for iy in 0..ny {
                let o = self.off_x[base + iy];
                let (i, j) = (base + iy, base + ny + iy);
                y[i] -= o * x[j];
                y[j] -= o * x[i];
            }
        }
        for ix in 0..nx {
            let base = ix * ny;
            let ob = ix * (ny - 1);
            for iy in 0..ny - 1 {
                let o = self.off_y[ob + iy];
                let (i, j) = (base + iy, base + iy + 1);
                y[i] -= o * x[j];
                y[j] -= o * x[i];
            }
        }
    }
}

/// Times a 2D species step may be split in half when the iteration cap is hit.
const MAX_HALVINGS: usize = 6;

/// One species on a 2D grid with its field frozen.
struct SpeciesSolve2D<'a> {
    grid: &'a Grid2D,
    f: &'a [f64],
    vol: &'a [f64],
    tolerance: f64,
    max_iter: usize,
    species: usize,
}

impl SpeciesSolve2D<'_> {
    /// Advances `c` by `dt`. If conjugate gradients hits the iteration cap,
    /// the step is redone as two half steps with the same field, each of
    /// which keeps sign, mass and energy decay.
    fn advance(&self, c: &[f64], dt: f64, depth: usize, report: &mut StepReport) -> Result<Vec<f64>> {
        match self.solve(c, dt, report) {
            Err(Error::SolverFailure { iterations, residual }) if depth < MAX_HALVINGS => {
                debug!(
                    "species {}: {iterations} iterations left residual {residual:e} at dt = {dt:e}; halving",
                    self.species
                );
                report.halvings = report.halvings.max(depth + 1);
                let mid = self.advance(c, dt / 2.0, depth + 1, report)?;
                self.advance(&mid, dt / 2.0, depth + 1, report)
            }
            other => other,
        }
    }

    fn solve(&self, c: &[f64], dt: f64, report: &mut StepReport) -> Result<Vec<f64>> {
        let (f, vol) = (self.f, self.vol);
        let s = shift_of(f);
        let op = Operator2D::build(self.grid, f, dt)?;
        let rhs = rhs_of(c, f, s, vol)?;
        let mut w: Vec<f64> = rhs.iter().zip(vol).map(|(b, v)| b / v).collect();
        // row j of the concentration form is row j here times these weights,
        // so the weighted residual bounds the mass defect
        let weights: Vec<f64> = f.iter().map(|v| (-(v - s) / 2.0).exp()).collect();
        let stats = pcg(|x, y| op.apply(x, y), &op.diag, &rhs, &mut w, self.tolerance, self.max_iter, Some(&weights))?;
        report.iterations = report.iterations.max(stats.iterations);
        let (mut cn, clamped) = back_transform(&w, f, s, vol, self.species)?;
        restore_mass(c, &mut cn, vol, self.species)?;
        report.clamped_mass += clamped;
        Ok(cn)
    }
}

/// One backward-Euler step on a 2D grid.
pub fn step_2d(state: &SpeciesState, fields: &FieldSet, cfg: &StepConfig) -> Result<(SpeciesState, StepReport)> {
    check_inputs(state, fields, cfg)?;
    let Grid::D2(grid) = state.grid else {
        return Err(Error::invalid("step_2d called with a 1D state"));
    };
    let n = grid.len();
    let vol = grid.volumes();
    let max_iter = cfg
        .max_iterations
        .unwrap_or_else(|| (10.0 * (n as f64).sqrt()).ceil() as usize);
    let mut report = StepReport::default();
    let mut conc = Vec::with_capacity(state.species_count());
    for (m, (c, f)) in state.conc.iter().zip(&fields.f).enumerate() {
        let solver = SpeciesSolve2D {
            grid: &grid,
            f,
            vol: &vol,
            tolerance: cfg.tolerance,
            max_iter,
            species: m + 1,
        };
        let cn = solver.advance(c, cfg.dt, 0, &mut report)?;
        conc.push(cn);
    }
    Ok((
        SpeciesState {
            grid: state.grid,
            valences: state.valences.clone(),
            conc,
            time: state.time + cfg.dt,
        },
        report,
    ))
}

/// Largest relative mass defect an iterative solve may leave behind.
const MASS_DEFECT_LIMIT: f64 = 1e-8;

/// Rescales `next` to the mass of `prev`, removing what the iterative
/// tolerance leaves of the mass defect.
fn restore_mass(prev: &[f64], next: &mut [f64], vol: &[f64], species: usize) -> Result<()> {
    let before: f64 = prev.iter().zip(vol).map(|(c, v)| c * v).sum();
    let after: f64 = next.iter().zip(vol).map(|(c, v)| c * v).sum();
    if before == 0.0 || after == 0.0 {
        return Ok(());
    }
    let k = before / after;
    if (k - 1.0).abs() > MASS_DEFECT_LIMIT {
        return Err(Error::InvariantViolation(format!(
            "species {species}: iterative solve lost relative mass {:e}",
            1.0 - 1.0 / k
        )));
    }
    if k != 1.0 {
        next.iter_mut().for_each(|v| *v *= k);
    }
    Ok(())
}

/// Dispatches on the grid dimension.
pub fn step(state: &SpeciesState, fields: &FieldSet, cfg: &StepConfig) -> Result<(SpeciesState, StepReport)> {
    match state.grid {
        Grid::D1(_) => step_1d(state, fields, cfg),
        Grid::D2(_) => step_2d(state, fields, cfg),
    }
}

/// Stop criterion on `max_m ||c_m||∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlowupGuard {
    /// Multiple of the initial maximum.
    Relative(f64),
    /// Absolute ceiling.
    Absolute(f64),
    Off,
}

impl Default for BlowupGuard {
    fn default() -> Self {
        BlowupGuard::Relative(1e6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub t_end: f64,
    pub step: StepConfig,
    pub guard: BlowupGuard,
}

/// What observers see after each completed step.
pub struct StepEvent<'a> {
    pub index: usize,
    pub state: &'a SpeciesState,
    pub fields: &'a FieldSet,
    pub record: &'a DiagnosticsRecord,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: SpeciesState,
    /// Diagnostics of the initial state.
    pub initial: DiagnosticsRecord,
    /// One record per completed step.
    pub records: Vec<DiagnosticsRecord>,
    pub blowup: bool,
}

/// Number of steps to reach `t_end` and the length of the last one.
pub fn step_plan(t_end: f64, dt: f64) -> (usize, f64) {
    if t_end <= 0.0 {
        return (0, 0.0);
    }
    let ratio = t_end / dt;
    let full = (ratio * (1.0 + 1e-12)).floor() as usize;
    let rem = t_end - full as f64 * dt;
    if rem > 1e-9 * dt {
        (full + 1, rem)
    } else {
        (full.max(1), if full == 0 { t_end } else { dt })
    }
}

/// Runs the explicit-field / implicit-transport loop to `t_end`. The last
/// step is shortened so the run ends exactly at `t_end`.
pub fn run_transient(
    initial: SpeciesState,
    model: &FieldModel,
    opts: &RunOptions,
    mut observer: impl FnMut(&StepEvent) -> Result<()>,
) -> Result<Trajectory> {
    opts.step.validate()?;
    let mut state = initial;
    let mut fields = model.assemble(&state)?;
    let initial_record = record(&state, &fields, &StepReport::default())?;
    let linf0 = initial_record.linf.iter().fold(0.0f64, |m, v| m.max(*v));
    let ceiling = match opts.guard {
        BlowupGuard::Relative(k) => k * linf0,
        BlowupGuard::Absolute(c) => c,
        BlowupGuard::Off => f64::INFINITY,
    };
    let t0 = state.time;
    let (steps, last) = step_plan(opts.t_end - t0, opts.step.dt);
    let mut records = Vec::with_capacity(steps);
    let mut blowup = false;
    let mut halved = false;
    for k in 0..steps {
        let mut cfg = opts.step;
        if k + 1 == steps {
            cfg.dt = last;
        }
        let (mut next, report) = step(&state, &fields, &cfg)?;
        if report.halvings > 0 && !halved {
            warn!(
                "iteration cap hit at t = {}; step split into up to {} parts (reported once)",
                state.time,
                1usize << report.halvings
            );
            halved = true;
        }
        if k + 1 == steps {
            next.time = opts.t_end;
        } else {
            next.time = t0 + (k + 1) as f64 * opts.step.dt;
        }
        state = next;
        fields = model.assemble(&state)?;
        let rec = record(&state, &fields, &report)?;
        let peak = rec.linf.iter().fold(0.0f64, |m, v| m.max(*v));
        observer(&StepEvent {
            index: k + 1,
            state: &state,
            fields: &fields,
            record: &rec,
        })?;
        records.push(rec);
        if peak > ceiling {
            warn!("blowup guard: max concentration {peak:e} exceeds {ceiling:e} at t = {}", state.time);
            blowup = true;
            break;
        }
    }
    Ok(Trajectory {
        state,
        initial: initial_record,
        records,
        blowup,
    })
}
