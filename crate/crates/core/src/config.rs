//! Run descriptions, read from TOML.
//!
//! Every field is optional at the serde level so that a missing value is
//! reported by [`RunConfig::validate`] with its full dotted key instead of a
//! bare field name. Unknown keys are rejected by the parser itself, with the
//! line and column of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ExternalPotential, GaussianWell, PotentialShape};
use crate::grid::{Grid, Grid1D, Grid2D};
use crate::kernels::{KernelFamily, KernelSpec, INV_TWO_PI};
use crate::scheme::{BlowupGuard, RobinBc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Transient,
    ConvergenceSpace,
    ConvergenceTime,
    RegularizationCompare,
    EtaSweep,
    Benchmark,
    KellerSegel,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Transient => "transient",
            Mode::ConvergenceSpace => "convergence_space",
            Mode::ConvergenceTime => "convergence_time",
            Mode::RegularizationCompare => "regularization_compare",
            Mode::EtaSweep => "eta_sweep",
            Mode::Benchmark => "benchmark",
            Mode::KellerSegel => "keller_segel",
        }
    }

    /// Modes that take their grid sizes from a list instead of `grid.half_count`.
    fn sizes_from_list(self) -> bool {
        matches!(
            self,
            Mode::ConvergenceSpace | Mode::RegularizationCompare | Mode::Benchmark
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
    #[serde(default, skip_serializing_if = "KernelsConfig::is_empty")]
    pub kernels: KernelsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<RegularizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub species: Vec<SpeciesConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// `L`: the domain is `[-L, L]` (per axis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// `N`: nodes run from `-N` to `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_count_y: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Steps between snapshot files; 0 writes only the first and last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardKind {
    Relative,
    Absolute,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardConfig {
    pub kind: GuardKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    /// Couples through the charge density `Σ z_m c_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charge: Option<KernelConfig>,
    /// Couples through the total density `Σ c_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crowding: Option<KernelConfig>,
}

impl KernelsConfig {
    fn is_empty(&self) -> bool {
        self.charge.is_none() && self.crowding.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Exponential,
    PowerLaw,
    Log,
    RegularizedPowerLaw,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Strength; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// +1 or -1; defaults to +1. The log kernel also carries `1/(2π)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robin: Option<RobinConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobinConfig {
    pub alpha: f64,
    pub beta: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalKind {
    None,
    Quadratic,
    Linear,
    MultiWell,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub kind: ExternalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence_coupled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wells: Vec<GaussianConfig>,
}

/// `amplitude * exp(-rate |x - center|²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<i32>,
    /// Nodal values replacing the Gaussian sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaussians: Vec<GaussianConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_counts: Option<Vec<usize>>,
    /// Without a reference, successive levels are differenced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_half_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dts: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dt: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Values substituted for `kernels.crowding.eta`.
    #[serde(default)]
    pub strengths: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub half_counts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub half_counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    /// Largest node count for which the direct sum is also timed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_max_nodes: Option<usize>,
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Violations(Vec<String>);

impl Violations {
    fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    fn finite(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            if !v.is_finite() {
                self.push(format!("{key} must be finite, got {v}"));
            }
        }
    }

    fn positive(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                self.push(format!("{key} must be positive and finite, got {v}"));
            }
        }
    }
}

impl RunConfig {
    /// Canonical TOML form; parsing it gives back an equal config.
    pub fn to_canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Transient)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim.unwrap_or(1)
    }

    /// Checks everything that can be checked without running; all problems
    /// are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut v = Violations(Vec::new());
        let mode = match self.mode {
            Some(m) => m,
            None => {
                v.push("mode is required");
                Mode::Transient
            }
        };
        let dim = match self.grid.dim {
            Some(d @ (1 | 2)) => d,
            Some(d) => {
                v.push(format!("grid.dim must be 1 or 2, got {d}"));
                1
            }
            None => {
                v.push("grid.dim is required");
                1
            }
        };
        match self.grid.half_width {
            None => v.push("grid.half_width is required"),
            w => v.positive("grid.half_width", w),
        }
        if self.grid.half_count.is_none() && !mode.sizes_from_list() {
            v.push("grid.half_count is required");
        }
        if self.grid.half_count.is_some_and(|n| n < 2) {
            v.push("grid.half_count must be at least 2");
        }
        if dim == 1 && (self.grid.half_width_y.is_some() || self.grid.half_count_y.is_some()) {
            v.push("grid.half_width_y and grid.half_count_y only apply to dim = 2");
        }
        v.positive("grid.half_width_y", self.grid.half_width_y);
        if self.grid.half_count_y.is_some_and(|n| n < 2) {
            v.push("grid.half_count_y must be at least 2");
        }

        let t = &self.time;
        let needs_time = mode != Mode::Benchmark;
        if needs_time {
            if t.dt.is_none() && mode != Mode::ConvergenceTime {
                v.push("time.dt is required");
            }
            if t.t_end.is_none() {
                v.push("time.t_end is required");
            }
        }
        v.positive("time.dt", t.dt);
        if let Some(te) = t.t_end {
            if !(te >= 0.0 && te.is_finite()) {
                v.push(format!("time.t_end must be nonnegative and finite, got {te}"));
            }
        }
        v.positive("time.tolerance", t.tolerance);
        if t.diagnostics_stride == Some(0) {
            v.push("time.diagnostics_stride must be at least 1");
        }
        if t.max_iterations == Some(0) {
            v.push("time.max_iterations must be at least 1");
        }

        if let Some(g) = &self.guard {
            match g.kind {
                GuardKind::Off => {
                    if g.value.is_some() {
                        v.push("guard.value has no meaning with kind = \"off\"");
                    }
                }
                _ => match g.value {
                    None => v.push("guard.value is required"),
                    val => v.positive("guard.value", val),
                },
            }
        }

        if self.species.is_empty() {
            v.push("at least one [[species]] entry is required");
        }
        for (m, s) in self.species.iter().enumerate() {
            let key = format!("species[{m}]");
            if s.valence.is_none() {
                v.push(format!("{key}.valence is required"));
            }
            if s.table.is_none() && s.gaussians.is_empty() {
                v.push(format!("{key} needs gaussians or a table"));
            }
            if let Some(tab) = &s.table {
                if let Some(x) = tab.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    v.push(format!("{key}.table entries must be finite and nonnegative, got {x}"));
                }
            }
            for (k, gs) in s.gaussians.iter().enumerate() {
                check_gaussian(&mut v, &format!("{key}.gaussians[{k}]"), gs, dim, true);
            }
        }

        for (slot, k) in [("charge", &self.kernels.charge), ("crowding", &self.kernels.crowding)] {
            if let Some(k) = k {
                check_kernel(&mut v, &format!("kernels.{slot}"), k, dim, slot == "charge");
            }
        }

        if let Some(e) = &self.external {
            check_external(&mut v, e, dim);
        }

        match mode {
            Mode::ConvergenceSpace => match &self.convergence {
                Some(c) => {
                    match &c.half_counts {
                        Some(h) if h.len() >= 2 => {
                            if h.iter().any(|n| *n < 2) {
                                v.push("convergence.half_counts entries must be at least 2");
                            }
                        }
                        _ => v.push("convergence.half_counts needs at least two entries"),
                    }
                    if c.reference_half_count.is_some_and(|n| n < 2) {
                        v.push("convergence.reference_half_count must be at least 2");
                    }
                    if c.dts.is_some() || c.reference_dt.is_some() {
                        v.push("convergence.dts and convergence.reference_dt belong to convergence_time");
                    }
                }
                None => v.push("mode convergence_space needs a [convergence] block"),
            },
            Mode::ConvergenceTime => match &self.convergence {
                Some(c) => {
                    match &c.dts {
                        Some(d) if d.len() >= 2 => {
                            for (i, x) in d.iter().enumerate() {
                                v.positive(&format!("convergence.dts[{i}]"), Some(*x));
                            }
                        }
                        _ => v.push("convergence.dts needs at least two entries"),
                    }
                    match c.reference_dt {
                        None => v.push("convergence.reference_dt is required"),
                        r => v.positive("convergence.reference_dt", r),
                    }
                    if c.half_counts.is_some() || c.reference_half_count.is_some() {
                        v.push("convergence.half_counts and convergence.reference_half_count belong to convergence_space");
                    }
                }
                None => v.push("mode convergence_time needs a [convergence] block"),
            },
            Mode::EtaSweep => match &self.sweep {
                Some(s) if !s.strengths.is_empty() => {
                    for (i, x) in s.strengths.iter().enumerate() {
                        v.finite(&format!("sweep.strengths[{i}]"), Some(*x));
                    }
                    if self.kernels.crowding.is_none() {
                        v.push("mode eta_sweep needs [kernels.crowding]");
                    }
                }
                _ => v.push("mode eta_sweep needs sweep.strengths"),
            },
            Mode::RegularizationCompare => {
                match &self.regularization {
                    Some(r) => {
                        if r.eps.is_empty() {
                            v.push("regularization.eps needs at least one entry");
                        }
                        for (i, e) in r.eps.iter().enumerate() {
                            if *e == 0.0 {
                                v.push(format!(
                                    "regularization.eps[{i}] = 0 makes both paths use the same singular kernel"
                                ));
                            } else {
                                v.positive(&format!("regularization.eps[{i}]"), Some(*e));
                            }
                        }
                        if r.half_counts.is_empty() || r.half_counts.iter().any(|n| *n < 2) {
                            v.push("regularization.half_counts needs entries of at least 2");
                        }
                    }
                    None => v.push("mode regularization_compare needs a [regularization] block"),
                }
                if dim != 1 {
                    v.push("mode regularization_compare is 1D only");
                }
                match &self.kernels.crowding {
                    Some(k) if k.family == KernelKind::PowerLaw => {}
                    _ => v.push("mode regularization_compare needs a power_law crowding kernel"),
                }
                if let Some(k) = &self.kernels.charge {
                    if !matches!(k.family, KernelKind::Exponential) {
                        v.push("mode regularization_compare supports only an exponential charge kernel");
                    }
                }
            }
            Mode::Benchmark => match &self.benchmark {
                Some(b) => {
                    if b.half_counts.is_empty() || b.half_counts.iter().any(|n| *n < 2) {
                        v.push("benchmark.half_counts needs entries of at least 2");
                    }
                    if b.repeats == Some(0) {
                        v.push("benchmark.repeats must be at least 1");
                    }
                    match &self.kernels.crowding {
                        Some(k) if k.family != KernelKind::Poisson => {}
                        _ => v.push("mode benchmark times [kernels.crowding], which must be a convolution kernel"),
                    }
                }
                None => v.push("mode benchmark needs a [benchmark] block"),
            },
            Mode::Transient | Mode::KellerSegel => {}
        }
        if mode == Mode::KellerSegel && dim != 2 {
            v.push("mode keller_segel tracks peaks in 2D; set grid.dim = 2");
        }

        if v.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.0.join("; ")))
        }
    }

    /// Grid with `grid.half_count`, or `half_count` when given. In 2D an
    /// override keeps the spacing equal on both axes.
    pub fn grid_with(&self, half_count: Option<usize>) -> Result<Grid> {
        let lx = self
            .grid
            .half_width
            .ok_or_else(|| Error::Config("grid.half_width is required".into()))?;
        let nx = half_count
            .or(self.grid.half_count)
            .ok_or_else(|| Error::Config("grid.half_count is required".into()))?;
        if self.dim() == 1 {
            return Ok(Grid1D::new(lx, nx)?.into());
        }
        let ly = self.grid.half_width_y.unwrap_or(lx);
        let ny = match (half_count, self.grid.half_count_y) {
            (None, Some(ny)) => ny,
            _ => {
                let r = ly / lx * nx as f64;
                let ny = r.round();
                if (r - ny).abs() > 1e-9 * r || ny < 1.0 {
                    return Err(Error::Config(format!(
                        "cannot keep dy = dx with {nx} half cells on x: y would need {r} half cells"
                    )));
                }
                ny as usize
            }
        };
        Ok(Grid2D::new(lx, ly, nx, ny)?.into())
    }

    pub fn guard(&self) -> BlowupGuard {
        match &self.guard {
            None => BlowupGuard::default(),
            Some(g) => match g.kind {
                GuardKind::Off => BlowupGuard::Off,
                GuardKind::Relative => BlowupGuard::Relative(g.value.unwrap_or(1e6)),
                GuardKind::Absolute => BlowupGuard::Absolute(g.value.unwrap_or(f64::INFINITY)),
            },
        }
    }

    pub fn external_potential(&self) -> ExternalPotential {
        let Some(e) = &self.external else {
            return ExternalPotential::default();
        };
        let shape = match e.kind {
            ExternalKind::None => PotentialShape::None,
            ExternalKind::Quadratic => PotentialShape::Quadratic { a: e.a.unwrap_or(0.0) },
            ExternalKind::Linear => PotentialShape::Linear { a: e.a.unwrap_or(0.0) },
            ExternalKind::MultiWell => PotentialShape::MultiWell {
                wells: e
                    .wells
                    .iter()
                    .map(|w| GaussianWell {
                        amplitude: w.amplitude,
                        center: center_pair(&w.center),
                        rate: w.rate,
                    })
                    .collect(),
                quadratic: e.quadratic.unwrap_or(0.0),
            },
            ExternalKind::Table => PotentialShape::Table(e.values.clone().unwrap_or_default()),
        };
        ExternalPotential {
            shape,
            valence_coupled: e.valence_coupled.unwrap_or(false),
        }
    }
}

pub(crate) fn center_pair(c: &[f64]) -> (f64, f64) {
    (c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0))
}

/// Convolution kernel described by a kernel block; `None` for Poisson.
pub fn kernel_spec(k: &KernelConfig, dim: usize) -> Result<Option<KernelSpec>> {
    let family = match k.family {
        KernelKind::Exponential => KernelFamily::Exponential,
        KernelKind::Log => KernelFamily::Log,
        KernelKind::PowerLaw => KernelFamily::PowerLaw {
            alpha: k.alpha.unwrap_or(f64::NAN),
        },
        KernelKind::RegularizedPowerLaw => KernelFamily::RegularizedPowerLaw {
            alpha: k.alpha.unwrap_or(f64::NAN),
            eps: k.eps.unwrap_or(f64::NAN),
        },
        KernelKind::Poisson => return Ok(None),
    };
    let scale = if k.family == KernelKind::Log { INV_TWO_PI } else { 1.0 };
    let strength = k.sign.unwrap_or(1.0) * k.eta.unwrap_or(1.0) * scale;
    Ok(Some(KernelSpec::new(family, strength, dim)?))
}

pub fn robin_bc(k: &KernelConfig) -> Option<RobinBc> {
    k.robin.as_ref().map(|r| RobinBc {
        alpha: r.alpha,
        beta: r.beta,
        left: r.left,
        right: r.right,
    })
}

fn check_gaussian(v: &mut Violations, key: &str, g: &GaussianConfig, dim: usize, nonneg: bool) {
    if g.center.len() != dim {
        v.push(format!("{key}.center needs {dim} coordinate(s), got {}", g.center.len()));
    }
    for (i, c) in g.center.iter().enumerate() {
        v.finite(&format!("{key}.center[{i}]"), Some(*c));
    }
    if nonneg && !(g.amplitude >= 0.0 && g.amplitude.is_finite()) {
        v.push(format!("{key}.amplitude must be nonnegative and finite, got {}", g.amplitude));
    }
    v.finite(&format!("{key}.amplitude"), Some(g.amplitude));
    if !(g.rate >= 0.0 && g.rate.is_finite()) {
        v.push(format!("{key}.rate must be nonnegative and finite, got {}", g.rate));
    }
}

fn check_kernel(v: &mut Violations, key: &str, k: &KernelConfig, dim: usize, charge_slot: bool) {
    v.finite(&format!("{key}.eta"), k.eta);
    if let Some(s) = k.sign {
        if s != 1.0 && s != -1.0 {
            v.push(format!("{key}.sign must be 1 or -1, got {s}"));
        }
    }
    let needs_alpha = matches!(k.family, KernelKind::PowerLaw | KernelKind::RegularizedPowerLaw);
    if needs_alpha && k.alpha.is_none() {
        v.push(format!("{key}.alpha is required for this family"));
    }
    if !needs_alpha && k.alpha.is_some() {
        v.push(format!("{key}.alpha only applies to power-law families"));
    }
    match k.family {
        KernelKind::RegularizedPowerLaw => match k.eps {
            None => v.push(format!("{key}.eps is required for regularized_power_law")),
            Some(e) if e == 0.0 => v.push(format!(
                "{key}.eps = 0 is the singular kernel; use family = \"power_law\""
            )),
            _ => {}
        },
        _ => {
            if k.eps.is_some() {
                v.push(format!("{key}.eps only applies to regularized_power_law"));
            }
        }
    }
    if k.family == KernelKind::Poisson {
        if !charge_slot {
            v.push(format!("{key}: the Poisson closure only applies to the charge kernel"));
        }
        if dim != 1 {
            v.push(format!("{key}: the Poisson closure is 1D only"));
        }
        match &k.robin {
            None => v.push(format!("{key}.robin is required for family = \"poisson\"")),
            Some(r) => {
                for (name, x) in [("alpha", r.alpha), ("beta", r.beta), ("left", r.left), ("right", r.right)] {
                    v.finite(&format!("{key}.robin.{name}"), Some(x));
                }
                if r.alpha == 0.0 {
                    v.push(format!("{key}.robin.alpha must be nonzero"));
                }
                if r.beta < 0.0 {
                    v.push(format!("{key}.robin.beta must be nonnegative"));
                }
            }
        }
        if k.eta.is_some() || k.sign.is_some() {
            v.push(format!("{key}: eta and sign do not apply to the Poisson closure"));
        }
        return;
    }
    if k.robin.is_some() {
        v.push(format!("{key}.robin only applies to family = \"poisson\""));
    }
    if let Err(e) = kernel_spec(k, dim) {
        v.push(format!("{key}: {e}"));
    }
}

fn check_external(v: &mut Violations, e: &ExternalConfig, dim: usize) {
    v.finite("external.a", e.a);
    v.finite("external.quadratic", e.quadratic);
    let wants_a = matches!(e.kind, ExternalKind::Quadratic | ExternalKind::Linear);
    if wants_a && e.a.is_none() {
        v.push("external.a is required for this kind");
    }
    if !wants_a && e.a.is_some() {
        v.push("external.a only applies to quadratic and linear");
    }
    if e.kind != ExternalKind::MultiWell && (e.quadratic.is_some() || !e.wells.is_empty()) {
        v.push("external.quadratic and external.wells only apply to multi_well");
    }
    match (e.kind, &e.values) {
        (ExternalKind::Table, None) => v.push("external.values is required for kind = \"table\""),
        (ExternalKind::Table, Some(vals)) => {
            if vals.iter().any(|x| !x.is_finite()) {
                v.push("external.values must be finite");
            }
        }
        (_, Some(_)) => v.push("external.values only applies to kind = \"table\""),
        _ => {}
    }
    for (k, w) in e.wells.iter().enumerate() {
        check_gaussian(v, &format!("external.wells[{k}]"), w, dim, false);
    }
}
