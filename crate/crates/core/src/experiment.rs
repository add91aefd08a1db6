//! Builds solver inputs from a [`RunConfig`] and runs each experiment mode.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{debug, info, warn};

use crate::config::{center_pair, kernel_spec, robin_bc, KernelConfig, KernelKind, Mode, RunConfig};
use crate::conv::{ConvolutionTensor, PointwiseKernel1D};
use crate::diagnostics::{
    chemical_potential, chemical_potential_spread, error_norms, fit_order, record, DiagnosticsRecord, ErrorNorms,
};
use crate::error::{Error, Result};
use crate::field::{total_densities, FieldModel, Interaction, SpeciesState};
use crate::grid::Grid;
use crate::kernels::{precompute_tensor_1d, precompute_tensor_2d, KernelSpec, TensorCache};
use crate::output::{self, write_convergence, write_snapshot, write_summary, write_table, ConvergenceRow, DiagnosticsWriter};
use crate::scheme::{run_transient, RunOptions, StepConfig, StepReport, Trajectory};

/// Run-time knobs that do not belong in the config file.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    /// Cap on concurrent independent runs within a sweep.
    pub threads: usize,
    pub snapshot_stride: Option<usize>,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            threads: 1,
            snapshot_stride: None,
        }
    }
}

/// Initial data on `grid`: each species is its table or its Gaussian sum.
pub fn initial_state(cfg: &RunConfig, grid: Grid) -> Result<SpeciesState> {
    let coords = grid.coords();
    let mut valences = Vec::with_capacity(cfg.species.len());
    let mut conc = Vec::with_capacity(cfg.species.len());
    for (m, s) in cfg.species.iter().enumerate() {
        valences.push(s.valence.ok_or_else(|| Error::Config(format!("species[{m}].valence is required")))?);
        let c = match &s.table {
            Some(t) => {
                if t.len() != coords.len() {
                    return Err(Error::Config(format!(
                        "species[{m}].table has {} values but the grid has {} nodes",
                        t.len(),
                        coords.len()
                    )));
                }
                t.clone()
            }
            None => coords
                .iter()
                .map(|&(x, y)| {
                    s.gaussians
                        .iter()
                        .map(|g| {
                            let (cx, cy) = center_pair(&g.center);
                            g.amplitude * (-g.rate * ((x - cx).powi(2) + (y - cy).powi(2))).exp()
                        })
                        .sum()
                })
                .collect(),
        };
        conc.push(c);
    }
    SpeciesState::new(grid, valences, conc, 0.0)
}

/// How nonsingular kernels are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// Hat-basis integrals for every kernel.
    Hat,
    /// Nodal samples `dx U(x_j - x_i)`; singular kernels are refused.
    Pointwise,
}

fn interaction(k: Option<&KernelConfig>, grid: &Grid, eta: Option<f64>, disc: Discretization) -> Result<Interaction> {
    let Some(k) = k else {
        return Ok(Interaction::Off);
    };
    if k.family == KernelKind::Poisson {
        let bc = robin_bc(k).ok_or_else(|| Error::Config("Poisson closure needs robin data".into()))?;
        return match grid {
            Grid::D1(g) => Ok(Interaction::Poisson { bc, grid: *g }),
            Grid::D2(_) => Err(Error::Config("the Poisson closure is 1D only".into())),
        };
    }
    let mut k = k.clone();
    if eta.is_some() {
        k.eta = eta;
    }
    let spec = kernel_spec(&k, grid.dim())?.expect("convolution kernel");
    match disc {
        Discretization::Pointwise => match grid {
            Grid::D1(g) => Ok(Interaction::Pointwise(Arc::new(PointwiseKernel1D::new(&spec, g)?))),
            Grid::D2(_) => Err(Error::Config("pointwise kernels are 1D only".into())),
        },
        Discretization::Hat => {
            let cache = TensorCache::global();
            let tensor = match grid {
                Grid::D1(g) => ConvolutionTensor::D1(cache.get_1d(&spec, g.dx(), g.half_count())?),
                Grid::D2(g) => ConvolutionTensor::D2(cache.get_2d(
                    &spec,
                    g.dx(),
                    g.dy(),
                    g.x.half_count(),
                    g.y.half_count(),
                )?),
            };
            Ok(Interaction::Hat {
                tensor,
                strength: spec.strength,
            })
        }
    }
}

/// Field model on `grid`, optionally with the crowding strength replaced.
pub fn field_model(cfg: &RunConfig, grid: Grid, crowding_eta: Option<f64>) -> Result<FieldModel> {
    FieldModel::new(
        grid,
        interaction(cfg.kernels.charge.as_ref(), &grid, None, Discretization::Hat)?,
        interaction(cfg.kernels.crowding.as_ref(), &grid, crowding_eta, Discretization::Hat)?,
        cfg.external_potential(),
    )
}

pub fn run_options(cfg: &RunConfig, dt: Option<f64>) -> Result<RunOptions> {
    let dt = dt
        .or(cfg.time.dt)
        .ok_or_else(|| Error::Config("time.dt is required".into()))?;
    let mut step = StepConfig::new(dt);
    if let Some(tol) = cfg.time.tolerance {
        step.tolerance = tol;
    }
    step.max_iterations = cfg.time.max_iterations;
    Ok(RunOptions {
        t_end: cfg.time.t_end.unwrap_or(0.0),
        step,
        guard: cfg.guard(),
    })
}

/// Everything one transient run needs.
pub struct Setup {
    pub state: SpeciesState,
    pub model: FieldModel,
    pub options: RunOptions,
}

pub fn setup(cfg: &RunConfig, half_count: Option<usize>, dt: Option<f64>) -> Result<Setup> {
    let grid = cfg.grid_with(half_count)?;
    Ok(Setup {
        state: initial_state(cfg, grid)?,
        model: field_model(cfg, grid, None)?,
        options: run_options(cfg, dt)?,
    })
}

/// Runs `f` over `items` on at most `threads` workers, keeping input order.
/// The first error in input order is returned.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = threads.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Position of the largest value of each species, and the distance
/// between the peaks of the first two species.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakRecord {
    pub t: f64,
    pub peaks: Vec<(f64, f64)>,
    pub separation: f64,
}

pub fn peak_record(state: &SpeciesState) -> PeakRecord {
    let coords = state.grid.coords();
    let peaks: Vec<(f64, f64)> = state
        .conc
        .iter()
        .map(|c| {
            let mut best = 0;
            for (j, v) in c.iter().enumerate() {
                if *v > c[best] {
                    best = j;
                }
            }
            coords[best]
        })
        .collect();
    let separation = match peaks.as_slice() {
        [a, b, ..] => (a.0 - b.0).hypot(a.1 - b.1),
        _ => 0.0,
    };
    PeakRecord {
        t: state.time,
        peaks,
        separation,
    }
}

/// Result of one transient run.
#[derive(Debug, Clone)]
pub struct TransientOutcome {
    pub trajectory: Trajectory,
    /// Max minus min chemical potential per species at the final time.
    pub mu_spread: Vec<f64>,
    pub peaks: Vec<PeakRecord>,
}

impl TransientOutcome {
    pub fn final_record(&self) -> &DiagnosticsRecord {
        self.trajectory.records.last().unwrap_or(&self.trajectory.initial)
    }

    /// Largest single-step energy increase (negative when always decreasing).
    pub fn max_energy_increase(&self) -> f64 {
        let mut prev = self.trajectory.initial.energy;
        let mut worst = f64::NEG_INFINITY;
        for r in &self.trajectory.records {
            worst = worst.max(r.energy - prev);
            prev = r.energy;
        }
        worst
    }
}

/// Where a transient run writes, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct TransientOutput {
    pub dir: Option<PathBuf>,
    pub snapshot_stride: usize,
    pub diagnostics_stride: usize,
    pub track_peaks: bool,
}

fn snapshot_name(step: usize) -> String {
    format!("snapshot_{step:06}.csv")
}

/// Runs one transient solve, streaming diagnostics and snapshots.
pub fn run_transient_with_output(setup: Setup, out: &TransientOutput) -> Result<TransientOutcome> {
    let Setup { state, model, options } = setup;
    let species = state.species_count();
    let mut diag = match &out.dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let mut w = DiagnosticsWriter::create(d.join("diagnostics.csv"), species)?;
            w.push(&record(&state, &model.assemble(&state)?, &StepReport::default())?)?;
            Some(w)
        }
        None => None,
    };
    let mut index_rows: Vec<(usize, f64)> = Vec::new();
    if let Some(d) = &out.dir {
        write_snapshot(d.join(snapshot_name(0)), &state)?;
        index_rows.push((0, state.time));
    }
    let mut peaks = Vec::new();
    if out.track_peaks {
        peaks.push(peak_record(&state));
    }
    let dstride = out.diagnostics_stride.max(1);
    let mut pending: Option<DiagnosticsRecord> = None;
    let mut last_snapshot = 0;
    let t0 = Instant::now();
    let trajectory = run_transient(state, &model, &options, |ev| {
        if let Some(w) = &mut diag {
            if ev.index % dstride == 0 {
                w.push(ev.record)?;
                pending = None;
            } else {
                pending = Some(ev.record.clone());
            }
        }
        if let Some(d) = &out.dir {
            if out.snapshot_stride > 0 && ev.index % out.snapshot_stride == 0 {
                write_snapshot(d.join(snapshot_name(ev.index)), ev.state)?;
                index_rows.push((ev.index, ev.state.time));
                last_snapshot = ev.index;
            }
        }
        if out.track_peaks {
            peaks.push(peak_record(ev.state));
        }
        if ev.index % 1000 == 0 {
            debug!("step {} t = {:.6} E = {:.12e}", ev.index, ev.state.time, ev.record.energy);
        }
        Ok(())
    });
    let trajectory = trajectory?;
    let steps = trajectory.records.len();
    info!(
        "transient run: {steps} steps to t = {} in {:.2?}{}",
        trajectory.state.time,
        t0.elapsed(),
        if trajectory.blowup { " (blowup guard)" } else { "" }
    );
    let fields = model.assemble(&trajectory.state)?;
    let mu_spread = chemical_potential_spread(&trajectory.state, &fields, 0.0);
    if let Some(d) = &out.dir {
        if let Some(w) = diag.take() {
            let mut w = w;
            if let Some(r) = pending {
                w.push(&r)?;
            }
            w.finish()?;
        }
        if steps > 0 && last_snapshot != steps {
            write_snapshot(d.join(snapshot_name(steps)), &trajectory.state)?;
            index_rows.push((steps, trajectory.state.time));
        }
        write_snapshot_index(&d.join("snapshots.csv"), &index_rows)?;
        write_potential(&d.join("chemical_potential.csv"), &trajectory.state, &chemical_potential(&trajectory.state, &fields))?;
        if out.track_peaks {
            write_peaks(&d.join("peaks.csv"), &peaks)?;
        }
    }
    Ok(TransientOutcome {
        trajectory,
        mu_spread,
        peaks,
    })
}

fn write_snapshot_index(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,t,file\n");
    for (k, t) in rows {
        text.push_str(&format!("{k},{},{}\n", output::fmt17(*t), snapshot_name(*k)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_potential(path: &Path, state: &SpeciesState, mu: &[Vec<f64>]) -> Result<()> {
    let dim = state.grid.dim();
    let mut header = vec!["x".to_string()];
    if dim == 2 {
        header.push("y".into());
    }
    header.extend((1..=mu.len()).map(|m| format!("mu_{m}")));
    let rows: Vec<Vec<f64>> = state
        .grid
        .coords()
        .into_iter()
        .enumerate()
        .map(|(j, (x, y))| {
            let mut row = vec![x];
            if dim == 2 {
                row.push(y);
            }
            row.extend(mu.iter().map(|m| m[j]));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_table(path, &header, &rows)
}

fn write_peaks(path: &Path, peaks: &[PeakRecord]) -> Result<()> {
    let m = peaks.first().map_or(0, |p| p.peaks.len());
    let mut header = vec!["t".to_string()];
    for k in 1..=m {
        header.push(format!("x_{k}"));
        header.push(format!("y_{k}"));
    }
    header.push("separation".into());
    let rows: Vec<Vec<f64>> = peaks
        .iter()
        .map(|p| {
            let mut row = vec![p.t];
            for (x, y) in &p.peaks {
                row.push(*x);
                row.push(*y);
            }
            row.push(p.separation);
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_table(path, &header, &rows)
}

/// Convergence study result.
#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub rows: Vec<ConvergenceRow>,
    /// Fitted slopes in `l∞`, `l1`, `l2`.
    pub orders: [f64; 3],
    /// Runs that produced non-finite values or failed.
    pub diverged: Vec<f64>,
}

fn fit_orders(rows: &[ConvergenceRow]) -> Result<[f64; 3]> {
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let pick = |f: fn(&ErrorNorms) -> f64| -> Vec<f64> { rows.iter().map(|r| f(&r.err)).collect() };
    Ok([
        fit_order(&h, &pick(|e| e.linf))?,
        fit_order(&h, &pick(|e| e.l1))?,
        fit_order(&h, &pick(|e| e.l2))?,
    ])
}

fn final_state(cfg: &RunConfig, half_count: Option<usize>, dt: Option<f64>) -> Result<SpeciesState> {
    let s = setup(cfg, half_count, dt)?;
    let out = run_transient_with_output(s, &TransientOutput::default())?;
    if out.trajectory.blowup {
        return Err(Error::InvariantViolation("blowup guard tripped during a convergence run".into()));
    }
    Ok(out.trajectory.state)
}

/// Spatial study: every level against a finer reference, or successive
/// levels against each other when no reference is configured.
pub fn convergence_space(cfg: &RunConfig, threads: usize) -> Result<ConvergenceOutcome> {
    let conv = cfg.convergence.clone().unwrap_or_default();
    let mut levels = conv.half_counts.clone().unwrap_or_default();
    levels.sort_unstable();
    let mut jobs = levels.clone();
    if let Some(r) = conv.reference_half_count {
        jobs.push(r);
    }
    // biggest first so the slowest run starts early
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(jobs[i]));
    let ordered: Vec<usize> = order.iter().map(|&i| jobs[i]).collect();
    let states = parallel_map(&ordered, threads, |&n| {
        info!("spatial level N = {n}");
        final_state(cfg, Some(n), None)
    })?;
    let mut by_job: Vec<Option<SpeciesState>> = vec![None; jobs.len()];
    for (k, s) in order.into_iter().zip(states) {
        by_job[k] = Some(s);
    }
    let states: Vec<SpeciesState> = by_job.into_iter().map(|s| s.expect("all levels ran")).collect();
    let mut rows = Vec::new();
    if conv.reference_half_count.is_some() {
        let reference = states.last().expect("reference run");
        for s in &states[..levels.len()] {
            rows.push(ConvergenceRow {
                h: s.grid.h(),
                err: error_norms(s, reference)?,
            });
        }
    } else {
        for pair in states.windows(2) {
            rows.push(ConvergenceRow {
                h: pair[1].grid.h(),
                err: error_norms(&pair[0], &pair[1])?,
            });
        }
    }
    let orders = fit_orders(&rows)?;
    Ok(ConvergenceOutcome {
        rows,
        orders,
        diverged: Vec::new(),
    })
}

/// Temporal study on a fixed grid against a small-step reference. A run
/// that fails or blows up is recorded as diverged instead of aborting.
pub fn convergence_time(cfg: &RunConfig, threads: usize) -> Result<ConvergenceOutcome> {
    let conv = cfg.convergence.clone().unwrap_or_default();
    let dts = conv.dts.clone().unwrap_or_default();
    let reference_dt = conv
        .reference_dt
        .ok_or_else(|| Error::Config("convergence.reference_dt is required".into()))?;
    let mut jobs = vec![reference_dt];
    jobs.extend(dts.iter().copied());
    let results = parallel_map(&jobs, threads, |&dt| {
        info!("time level dt = {dt}");
        Ok(final_state(cfg, None, Some(dt)))
    })?;
    let mut iter = results.into_iter();
    let reference = iter.next().expect("reference run")?;
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for (dt, r) in dts.iter().zip(iter) {
        match r {
            Ok(s) if s.conc.iter().flatten().all(|v| v.is_finite()) => rows.push(ConvergenceRow {
                h: *dt,
                err: error_norms(&s, &reference)?,
            }),
            Ok(_) => diverged.push(*dt),
            Err(e) => {
                warn!("run with dt = {dt} failed: {e}");
                diverged.push(*dt);
            }
        }
    }
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    let orders = fit_orders(&rows)?;
    Ok(ConvergenceOutcome { rows, orders, diverged })
}

/// One row of the regularization comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationRow {
    pub eps: f64,
    pub half_count: usize,
    pub h: f64,
    /// `max_m max_j |c_singular - c_regularized|` at the final time.
    pub discrepancy: f64,
}

/// Model with pointwise kernels and the crowding power law replaced by its
/// regularized form.
fn regularized_model(cfg: &RunConfig, grid: Grid, eps: f64) -> Result<FieldModel> {
    let mut crowd = cfg
        .kernels
        .crowding
        .clone()
        .ok_or_else(|| Error::Config("regularization_compare needs [kernels.crowding]".into()))?;
    crowd.family = KernelKind::RegularizedPowerLaw;
    crowd.eps = Some(eps);
    FieldModel::new(
        grid,
        interaction(cfg.kernels.charge.as_ref(), &grid, None, Discretization::Pointwise)?,
        interaction(Some(&crowd), &grid, None, Discretization::Pointwise)?,
        cfg.external_potential(),
    )
}

pub fn regularization_compare(cfg: &RunConfig, threads: usize) -> Result<Vec<RegularizationRow>> {
    let reg = cfg.regularization.clone().unwrap_or_default();
    if reg.eps.iter().any(|e| *e == 0.0) {
        return Err(Error::Config("regularization.eps = 0 is the singular kernel itself".into()));
    }
    // None marks the singular run
    let mut jobs: Vec<(usize, Option<f64>)> = Vec::new();
    for &n in &reg.half_counts {
        jobs.push((n, None));
        jobs.extend(reg.eps.iter().map(|&e| (n, Some(e))));
    }
    let states = parallel_map(&jobs, threads, |&(n, eps)| {
        let grid = cfg.grid_with(Some(n))?;
        let model = match eps {
            None => field_model(cfg, grid, None)?,
            Some(e) => regularized_model(cfg, grid, e)?,
        };
        let s = Setup {
            state: initial_state(cfg, grid)?,
            model,
            options: run_options(cfg, None)?,
        };
        Ok(run_transient_with_output(s, &TransientOutput::default())?.trajectory.state)
    })?;
    let mut rows = Vec::new();
    let stride = 1 + reg.eps.len();
    for (k, &n) in reg.half_counts.iter().enumerate() {
        let singular = &states[k * stride];
        for (i, &eps) in reg.eps.iter().enumerate() {
            let other = &states[k * stride + 1 + i];
            let discrepancy = singular
                .conc
                .iter()
                .zip(&other.conc)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0f64, f64::max);
            rows.push(RegularizationRow {
                eps,
                half_count: n,
                h: singular.grid.h(),
                discrepancy,
            });
        }
    }
    Ok(rows)
}

/// Final state of one strength in an η-sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub strength: f64,
    pub outcome: TransientOutcome,
}

pub fn eta_sweep(cfg: &RunConfig, ctx: &RunContext, write: bool) -> Result<Vec<SweepRow>> {
    let strengths = cfg.sweep.clone().unwrap_or_default().strengths;
    let grid = cfg.grid_with(None)?;
    let jobs: Vec<(usize, f64)> = strengths.iter().copied().enumerate().collect();
    let rows = parallel_map(&jobs, ctx.threads, |&(k, eta)| {
        info!("sweep strength {eta}");
        let s = Setup {
            state: initial_state(cfg, grid)?,
            model: field_model(cfg, grid, Some(eta))?,
            options: run_options(cfg, None)?,
        };
        let out = transient_output(cfg, ctx, write.then(|| ctx.out_dir.join(format!("run_{k:02}"))), false);
        Ok(SweepRow {
            strength: eta,
            outcome: run_transient_with_output(s, &out)?,
        })
    })?;
    Ok(rows)
}

/// Benchmark timings for one grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub half_count: usize,
    pub nodes: usize,
    pub precompute_s: f64,
    pub fast_s: f64,
    /// `NaN` when the direct sum was not timed.
    pub direct_s: f64,
}

impl BenchRow {
    pub fn fast_per_nlogn(&self) -> f64 {
        let n = self.nodes as f64;
        self.fast_s / (n * n.ln())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the fast convolution of the total initial density with the
/// crowding kernel on each grid size; sizes run one after another.
pub fn benchmark(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let b = cfg.benchmark.clone().unwrap_or_default();
    let repeats = b.repeats.unwrap_or(3);
    let direct_max = b.direct_max_nodes.unwrap_or(20_000);
    let k = cfg
        .kernels
        .crowding
        .as_ref()
        .ok_or_else(|| Error::Config("benchmark needs [kernels.crowding]".into()))?;
    let spec: KernelSpec = kernel_spec(k, cfg.dim())?.ok_or_else(|| Error::Config("benchmark needs a convolution kernel".into()))?;
    let mut rows = Vec::new();
    for &n in &b.half_counts {
        let grid = cfg.grid_with(Some(n))?;
        let (_, theta) = total_densities(&initial_state(cfg, grid)?);
        let t = Instant::now();
        let tensor = match grid {
            Grid::D1(g) => ConvolutionTensor::D1(Arc::new(precompute_tensor_1d(&spec, g.dx(), g.half_count())?)),
            Grid::D2(g) => ConvolutionTensor::D2(Arc::new(precompute_tensor_2d(
                &spec,
                g.dx(),
                g.dy(),
                g.x.half_count(),
                g.y.half_count(),
            )?)),
        };
        // the first application also builds the kernel spectrum
        let fast0 = tensor.conv_fast(&theta)?;
        let precompute_s = t.elapsed().as_secs_f64();
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let v = tensor.conv_fast(&theta)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(v);
        }
        let fast_s = median(times);
        let direct_s = if grid.len() <= direct_max {
            let t = Instant::now();
            let d = tensor.conv_direct(&theta)?;
            let s = t.elapsed().as_secs_f64();
            let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let diff = d.iter().zip(&fast0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if diff > 1e-10 * scale {
                return Err(Error::InvariantViolation(format!(
                    "fast and direct convolution differ by {diff:e} at N = {n}"
                )));
            }
            if grid.len() >= 4096 && fast_s >= s {
                return Err(Error::InvariantViolation(format!(
                    "fast convolution ({fast_s:e} s) not faster than direct ({s:e} s) with {} nodes",
                    grid.len()
                )));
            }
            s
        } else {
            f64::NAN
        };
        let row = BenchRow {
            half_count: n,
            nodes: grid.len(),
            precompute_s,
            fast_s,
            direct_s,
        };
        info!(
            "N = {n}: {} nodes, precompute {:.3e} s, fast {:.3e} s, direct {:.3e} s",
            row.nodes, precompute_s, fast_s, direct_s
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Per-mode results handed back to the caller.
#[derive(Debug, Clone)]
pub enum Outcome {
    Transient(Box<TransientOutcome>),
    Sweep(Vec<SweepRow>),
    Convergence(ConvergenceOutcome),
    Regularization(Vec<RegularizationRow>),
    Benchmark(Vec<BenchRow>),
}

#[derive(Debug, Clone)]
pub struct Report {
    pub mode: Mode,
    /// `key=value` pairs written to `summary.txt`.
    pub summary: Vec<(String, String)>,
    pub outcome: Outcome,
}

impl Report {
    pub fn blowup(&self) -> bool {
        match &self.outcome {
            Outcome::Transient(t) => t.trajectory.blowup,
            Outcome::Sweep(rows) => rows.iter().any(|r| r.outcome.trajectory.blowup),
            _ => false,
        }
    }
}

fn transient_output(cfg: &RunConfig, ctx: &RunContext, dir: Option<PathBuf>, track_peaks: bool) -> TransientOutput {
    TransientOutput {
        dir,
        snapshot_stride: ctx.snapshot_stride.or(cfg.time.snapshot_stride).unwrap_or(0),
        diagnostics_stride: cfg.time.diagnostics_stride.unwrap_or(1),
        track_peaks,
    }
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn transient_summary(s: &mut Vec<(String, String)>, o: &TransientOutcome) {
    let tr = &o.trajectory;
    let last = o.final_record();
    s.push(kv("steps", tr.records.len()));
    s.push(kv("t_final", output::fmt17(tr.state.time)));
    s.push(kv("blowup", tr.blowup));
    s.push(kv("energy_initial", output::fmt17(tr.initial.energy)));
    s.push(kv("energy_final", output::fmt17(last.energy)));
    s.push(kv("max_energy_increase", output::fmt17(o.max_energy_increase())));
    for (m, (a, b)) in tr.initial.masses.iter().zip(&last.masses).enumerate() {
        s.push(kv(&format!("mass_drift_{}", m + 1), output::fmt17((b - a) / a.abs().max(f64::MIN_POSITIVE))));
    }
    for (m, v) in last.linf.iter().enumerate() {
        s.push(kv(&format!("linf_{}", m + 1), output::fmt17(*v)));
    }
    for (m, v) in o.mu_spread.iter().enumerate() {
        s.push(kv(&format!("mu_spread_{}", m + 1), output::fmt17(*v)));
    }
}

/// Runs the configured mode, writing every output under `ctx.out_dir`.
pub fn run_experiment(cfg: &RunConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    let dir = &ctx.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let canonical = cfg.to_canonical()?;
    let cpath = dir.join("config.toml");
    std::fs::write(&cpath, canonical).map_err(|e| Error::io(&cpath, e))?;
    let mode = cfg.mode();
    let mut summary = vec![kv("mode", mode.name())];
    if let Some(n) = &cfg.name {
        summary.push(kv("name", n));
    }
    let outcome = match mode {
        Mode::Transient | Mode::KellerSegel => {
            let s = setup(cfg, None, None)?;
            let out = transient_output(cfg, ctx, Some(dir.clone()), mode == Mode::KellerSegel);
            let o = run_transient_with_output(s, &out)?;
            transient_summary(&mut summary, &o);
            if let (Some(first), Some(last)) = (o.peaks.first(), o.peaks.last()) {
                summary.push(kv("separation_initial", output::fmt17(first.separation)));
                summary.push(kv("separation_final", output::fmt17(last.separation)));
            }
            Outcome::Transient(Box::new(o))
        }
        Mode::EtaSweep => {
            let rows = eta_sweep(cfg, ctx, true)?;
            let m = cfg.species.len();
            let mut header = vec!["strength".to_string()];
            header.extend((1..=m).map(|k| format!("linf_{k}")));
            header.push("E".into());
            let table: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let last = r.outcome.final_record();
                    let mut row = vec![r.strength];
                    row.extend(last.linf.iter().copied());
                    row.push(last.energy);
                    row
                })
                .collect();
            let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            write_table(dir.join("sweep.csv"), &header, &table)?;
            summary.push(kv("runs", rows.len()));
            summary.push(kv("blowup", rows.iter().any(|r| r.outcome.trajectory.blowup)));
            Outcome::Sweep(rows)
        }
        Mode::ConvergenceSpace | Mode::ConvergenceTime => {
            let o = if mode == Mode::ConvergenceSpace {
                convergence_space(cfg, ctx.threads)?
            } else {
                convergence_time(cfg, ctx.threads)?
            };
            write_convergence(dir.join("convergence.csv"), &o.rows)?;
            summary.push(kv("order_linf", output::fmt17(o.orders[0])));
            summary.push(kv("order_l1", output::fmt17(o.orders[1])));
            summary.push(kv("order_l2", output::fmt17(o.orders[2])));
            summary.push(kv("diverged", o.diverged.len()));
            Outcome::Convergence(o)
        }
        Mode::RegularizationCompare => {
            let rows = regularization_compare(cfg, ctx.threads)?;
            let table: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r.eps, r.half_count as f64, r.h, r.discrepancy])
                .collect();
            write_table(dir.join("regularization.csv"), &["eps", "half_count", "h", "discrepancy"], &table)?;
            summary.push(kv("rows", rows.len()));
            Outcome::Regularization(rows)
        }
        Mode::Benchmark => {
            let rows = benchmark(cfg)?;
            let table: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.half_count as f64,
                        r.nodes as f64,
                        r.precompute_s,
                        r.fast_s,
                        r.direct_s,
                        r.fast_per_nlogn(),
                    ]
                })
                .collect();
            write_table(
                dir.join("benchmark.csv"),
                &["half_count", "nodes", "precompute_s", "fast_s", "direct_s", "fast_per_nlogn"],
                &table,
            )?;
            let ratios: Vec<f64> = rows.iter().map(|r| r.fast_per_nlogn()).collect();
            let spread = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            summary.push(kv("nlogn_spread", output::fmt17(spread)));
            Outcome::Benchmark(rows)
        }
    };
    write_summary(dir.join("summary.txt"), &summary)?;
    Ok(Report { mode, summary, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const SMALL: &str = r#"
mode = "transient"

[grid]
dim = 1
half_width = 2.0
half_count = 16

[time]
dt = 0.01
t_end = 0.05
snapshot_stride = 2
diagnostics_stride = 2

[kernels.charge]
family = "exponential"

[kernels.crowding]
family = "power_law"
alpha = 0.5

[external]
kind = "quadratic"
a = 1.0

[[species]]
valence = 1
[[species.gaussians]]
amplitude = 0.2
center = [0.2]
rate = 20.0

[[species]]
valence = -1
[[species.gaussians]]
amplitude = 0.4
center = [-0.2]
rate = 20.0
"#;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = parallel_map(&items, 4, |&i| Ok(i * i)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
        let err = parallel_map(&items, 3, |&i| {
            if i % 10 == 7 {
                Err(Error::invalid(format!("item {i}")))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("item 7"));
    }

    #[test]
    fn gaussian_initial_data() {
        let cfg = parse_config(SMALL).unwrap();
        let s = initial_state(&cfg, cfg.grid_with(None).unwrap()).unwrap();
        let j = s.grid.coords().iter().position(|(x, _)| (*x - 0.25).abs() < 1e-12).unwrap();
        let expect = 0.2 * (-20.0f64 * 0.05 * 0.05).exp();
        assert!((s.conc[0][j] - expect).abs() < 1e-15);
        assert_eq!(s.valences, vec![1, -1]);
    }

    #[test]
    fn transient_writes_expected_files() {
        let cfg = parse_config(SMALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, &RunContext::new(dir.path())).unwrap();
        assert!(!report.blowup());
        let diag = std::fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        // initial row, steps 2 and 4 by stride, then the final step 5
        assert_eq!(diag.lines().count(), 1 + 4);
        for f in ["snapshot_000000.csv", "snapshot_000002.csv", "snapshot_000004.csv", "snapshot_000005.csv", "summary.txt", "config.toml", "snapshots.csv", "chemical_potential.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("blowup=false"));
        let echoed = crate::config::load_config(dir.path().join("config.toml")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let cfg = parse_config(SMALL).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&cfg, &RunContext::new(a.path())).unwrap();
        run_experiment(&cfg, &RunContext::new(b.path())).unwrap();
        for f in ["diagnostics.csv", "snapshot_000005.csv", "summary.txt"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn regularized_model_refuses_zero_eps() {
        let text = SMALL.replace("mode = \"transient\"", "mode = \"regularization_compare\"")
            + "\n[regularization]\neps = [0.5]\nhalf_counts = [8]\n";
        let mut cfg = parse_config(&text).unwrap();
        cfg.regularization.as_mut().unwrap().eps = vec![0.0];
        assert!(matches!(regularization_compare(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn peak_tracking_finds_maxima() {
        let g: Grid = crate::grid::Grid2D::new(1.0, 1.0, 2, 2).unwrap().into();
        let mut a = vec![0.0; 25];
        let mut b = vec![0.0; 25];
        a[g_index(0, 4)] = 1.0;
        b[g_index(4, 0)] = 2.0;
        let s = SpeciesState::new(g, vec![1, 1], vec![a, b], 0.0).unwrap();
        let p = peak_record(&s);
        assert_eq!(p.peaks, vec![(-1.0, 1.0), (1.0, -1.0)]);
        assert!((p.separation - 8f64.sqrt()).abs() < 1e-15);
    }

    fn g_index(ix: usize, iy: usize) -> usize {
        ix * 5 + iy
    }
}
