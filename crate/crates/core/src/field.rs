//! Species state and the per-species drift potentials built from it.

use std::sync::Arc;

use crate::conv::{ConvolutionTensor, PointwiseKernel1D};
use crate::error::{Error, Result};
use crate::grid::{Grid, Grid1D};
use crate::scheme::{solve_poisson_robin_1d, RobinBc};

/// `max |f|` above which `exp(-f)` is not materialized.
pub const BOLTZMANN_LIMIT: f64 = 600.0;

/// Concentrations of all species on a common grid at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesState {
    pub grid: Grid,
    pub valences: Vec<i32>,
    /// `conc[m][node]`
    pub conc: Vec<Vec<f64>>,
    pub time: f64,
}

impl SpeciesState {
    pub fn new(grid: Grid, valences: Vec<i32>, conc: Vec<Vec<f64>>, time: f64) -> Result<Self> {
        if valences.is_empty() || valences.len() != conc.len() {
            return Err(Error::invalid(format!(
                "{} valences for {} concentration arrays",
                valences.len(),
                conc.len()
            )));
        }
        for (m, c) in conc.iter().enumerate() {
            if c.len() != grid.len() {
                return Err(Error::ShapeMismatch {
                    expected: grid.len(),
                    got: c.len(),
                });
            }
            if let Some(j) = c.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "species {} has invalid concentration {} at node {j}",
                    m + 1,
                    c[j]
                )));
            }
        }
        Ok(Self {
            grid,
            valences,
            conc,
            time,
        })
    }

    pub fn species_count(&self) -> usize {
        self.conc.len()
    }

    /// Per-species `Σ vol_j c_j`.
    pub fn masses(&self) -> Vec<f64> {
        let vol = self.grid.volumes();
        self.conc
            .iter()
            .map(|c| c.iter().zip(&vol).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Charge density `Σ z_m c_m` and total density `Σ c_m`.
pub fn total_densities(state: &SpeciesState) -> (Vec<f64>, Vec<f64>) {
    let n = state.grid.len();
    let mut rho = vec![0.0; n];
    let mut theta = vec![0.0; n];
    for (c, z) in state.conc.iter().zip(&state.valences) {
        let z = *z as f64;
        for j in 0..n {
            rho[j] += z * c[j];
            theta[j] += c[j];
        }
    }
    (rho, theta)
}

/// `amplitude * exp(-rate |x - center|²)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianWell {
    pub amplitude: f64,
    pub center: (f64, f64),
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialShape {
    None,
    /// `a |x|²`
    Quadratic { a: f64 },
    /// `a x`
    Linear { a: f64 },
    /// Gaussian wells on top of `quadratic * |x|²`.
    MultiWell { wells: Vec<GaussianWell>, quadratic: f64 },
    /// Nodal values.
    Table(Vec<f64>),
}

/// External potential; when `valence_coupled` it enters species `m` as
/// `z_m V` instead of `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPotential {
    pub shape: PotentialShape,
    pub valence_coupled: bool,
}

impl Default for ExternalPotential {
    fn default() -> Self {
        Self {
            shape: PotentialShape::None,
            valence_coupled: false,
        }
    }
}

impl ExternalPotential {
    pub fn values(&self, grid: &Grid) -> Result<Vec<f64>> {
        let coords = grid.coords();
        let v: Vec<f64> = match &self.shape {
            PotentialShape::None => vec![0.0; coords.len()],
            PotentialShape::Quadratic { a } => coords.iter().map(|(x, y)| a * (x * x + y * y)).collect(),
            PotentialShape::Linear { a } => coords.iter().map(|(x, _)| a * x).collect(),
            PotentialShape::MultiWell { wells, quadratic } => coords
                .iter()
                .map(|&(x, y)| {
                    let mut v = quadratic * (x * x + y * y);
                    for w in wells {
                        let (dx, dy) = (x - w.center.0, y - w.center.1);
                        v += w.amplitude * (-w.rate * (dx * dx + dy * dy)).exp();
                    }
                    v
                })
                .collect(),
            PotentialShape::Table(t) => {
                if t.len() != coords.len() {
                    return Err(Error::ShapeMismatch {
                        expected: coords.len(),
                        got: t.len(),
                    });
                }
                t.clone()
            }
        };
        if let Some(j) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("external potential not finite at node {j}")));
        }
        Ok(v)
    }
}

/// One nonlocal coupling: how a density is turned into a potential.
#[derive(Clone)]
pub enum Interaction {
    Off,
    /// Hat-basis convolution scaled by `strength`.
    Hat { tensor: ConvolutionTensor, strength: f64 },
    /// Nodal-sample convolution; strength is folded into the samples.
    Pointwise(Arc<PointwiseKernel1D>),
    /// `-φ'' = ρ` with Robin data (1D, charge slot only).
    Poisson { bc: RobinBc, grid: Grid1D },
}

impl std::fmt::Debug for Interaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Interaction::Off => write!(f, "Off"),
            Interaction::Hat { strength, .. } => write!(f, "Hat {{ strength: {strength} }}"),
            Interaction::Pointwise(_) => write!(f, "Pointwise"),
            Interaction::Poisson { bc, .. } => write!(f, "Poisson {{ {bc:?} }}"),
        }
    }
}

impl Interaction {
    fn is_off(&self) -> bool {
        matches!(self, Interaction::Off)
    }

    fn potential(&self, density: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            Interaction::Off => Ok(None),
            Interaction::Hat { tensor, strength } => {
                if *strength == 0.0 || density.iter().all(|v| *v == 0.0) {
                    return Ok(Some(vec![0.0; density.len()]));
                }
                let mut v = tensor.conv_fast(density)?;
                v.iter_mut().for_each(|x| *x *= strength);
                Ok(Some(v))
            }
            Interaction::Pointwise(k) => Ok(Some(k.apply(density)?)),
            Interaction::Poisson { bc, grid } => Ok(Some(solve_poisson_robin_1d(density, bc, grid)?)),
        }
    }
}

/// Nodal drift potentials for every species at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub time: f64,
    /// Total potential `f[m][node]`.
    pub f: Vec<Vec<f64>>,
    /// The part of `f` that does not depend on the state (external
    /// potential and boundary data); the energy weights it fully, while the
    /// self-interaction remainder carries a factor one half.
    pub external: Vec<Vec<f64>>,
    /// `exp(-f)` when `max |f| <= BOLTZMANN_LIMIT`.
    pub boltzmann: Option<Vec<Vec<f64>>>,
    /// Harmonic-mean mobilities on faces normal to x, `[m][face]`.
    pub mobility_x: Vec<Vec<f64>>,
    /// Faces normal to y (empty in 1D).
    pub mobility_y: Vec<Vec<f64>>,
}

/// Harmonic mean `2ab / (a + b)` of two positive numbers, without
/// intermediate overflow.
pub fn half_point_mobility(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::invalid(format!("mobilities must be positive, got {a} and {b}")));
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok(2.0 * lo / (1.0 + lo / hi))
}

/// Harmonic mean of `exp(-fa)` and `exp(-fb)` from the exponents.
#[inline]
pub fn face_mobility(fa: f64, fb: f64) -> f64 {
    let s = fa.min(fb);
    2.0 * (-s).exp() / ((fa - s).exp() + (fb - s).exp())
}

fn face_mobilities(grid: &Grid, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match grid {
        Grid::D1(_) => (f.windows(2).map(|w| face_mobility(w[0], w[1])).collect(), vec![]),
        Grid::D2(g) => {
            let (nx, ny) = g.shape();
            let mut mx = Vec::with_capacity((nx - 1) * ny);
            for ix in 0..nx - 1 {
                for iy in 0..ny {
                    mx.push(face_mobility(f[ix * ny + iy], f[(ix + 1) * ny + iy]));
                }
            }
            let mut my = Vec::with_capacity(nx * (ny - 1));
            for ix in 0..nx {
                for iy in 0..ny - 1 {
                    my.push(face_mobility(f[ix * ny + iy], f[ix * ny + iy + 1]));
                }
            }
            (mx, my)
        }
    }
}

/// Everything needed to turn a state into its [`FieldSet`].
#[derive(Debug, Clone)]
pub struct FieldModel {
    grid: Grid,
    /// Couples through the charge density, scaled per species by valence.
    pub charge: Interaction,
    /// Couples through the total density.
    pub crowding: Interaction,
    pub external: ExternalPotential,
    external_values: Vec<f64>,
    /// Potential generated by the Poisson boundary data alone.
    boundary_values: Option<Vec<f64>>,
}

impl FieldModel {
    pub fn new(
        grid: Grid,
        charge: Interaction,
        crowding: Interaction,
        external: ExternalPotential,
    ) -> Result<Self> {
        if matches!(crowding, Interaction::Poisson { .. }) {
            return Err(Error::invalid("the Poisson closure only applies to the charge coupling"));
        }
        for slot in [&charge, &crowding] {
            check_interaction(&grid, slot)?;
        }
        let external_values = external.values(&grid)?;
        let boundary_values = match &charge {
            Interaction::Poisson { bc, grid: g } => {
                Some(solve_poisson_robin_1d(&vec![0.0; g.len()], bc, g)?)
            }
            _ => None,
        };
        Ok(Self {
            grid,
            charge,
            crowding,
            external,
            external_values,
            boundary_values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Assembles `f_m = z_m φ_charge + φ_crowding + V_m` and the derived
    /// mobilities from `state`, stamped with the state's time.
    pub fn assemble(&self, state: &SpeciesState) -> Result<FieldSet> {
        if state.grid != self.grid {
            return Err(Error::invalid("state grid differs from the field model grid"));
        }
        let n = self.grid.len();
        let (rho, theta) = total_densities(state);
        let phi_charge = if self.charge.is_off() {
            None
        } else {
            self.charge.potential(&rho)?
        };
        let phi_crowd = self.crowding.potential(&theta)?;
        let mut f = Vec::with_capacity(state.species_count());
        let mut external = Vec::with_capacity(state.species_count());
        for &z in &state.valences {
            let zf = z as f64;
            let ext_scale = if self.external.valence_coupled { zf } else { 1.0 };
            let mut ext: Vec<f64> = self.external_values.iter().map(|v| ext_scale * v).collect();
            if let Some(b) = &self.boundary_values {
                ext.iter_mut().zip(b).for_each(|(e, b)| *e += zf * b);
            }
            let mut fm = vec![0.0; n];
            if let Some(p) = &phi_charge {
                fm.iter_mut().zip(p).for_each(|(a, b)| *a += zf * b);
            }
            if let Some(p) = &phi_crowd {
                fm.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            if self.boundary_values.is_none() {
                fm.iter_mut().zip(&ext).for_each(|(a, b)| *a += b);
            } else {
                // the Poisson potential already contains the boundary part
                let ext_only: Vec<f64> = self.external_values.iter().map(|v| ext_scale * v).collect();
                fm.iter_mut().zip(&ext_only).for_each(|(a, b)| *a += b);
            }
            if let Some(j) = fm.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("field is not finite at node {j}")));
            }
            f.push(fm);
            external.push(ext);
        }
        let fmax = f.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let boltzmann = (fmax <= BOLTZMANN_LIMIT)
            .then(|| f.iter().map(|fm| fm.iter().map(|v| (-v).exp()).collect()).collect());
        let (mut mobility_x, mut mobility_y) = (Vec::new(), Vec::new());
        for fm in &f {
            let (mx, my) = face_mobilities(&self.grid, fm);
            mobility_x.push(mx);
            mobility_y.push(my);
        }
        Ok(FieldSet {
            time: state.time,
            f,
            external,
            boltzmann,
            mobility_x,
            mobility_y,
        })
    }
}

fn check_interaction(grid: &Grid, slot: &Interaction) -> Result<()> {
    match (grid, slot) {
        (_, Interaction::Off) => Ok(()),
        (Grid::D1(g), Interaction::Hat { tensor: ConvolutionTensor::D1(t), strength }) => {
            if !strength.is_finite() {
                return Err(Error::invalid("kernel strength must be finite"));
            }
            if t.half_count() != g.half_count() || t.dx() != g.dx() {
                return Err(Error::invalid("convolution tensor does not match the grid"));
            }
            Ok(())
        }
        (Grid::D2(g), Interaction::Hat { tensor: ConvolutionTensor::D2(t), strength }) => {
            if !strength.is_finite() {
                return Err(Error::invalid("kernel strength must be finite"));
            }
            if t.half_counts() != (g.x.half_count(), g.y.half_count())
                || t.spacing() != (g.dx(), g.dy())
            {
                return Err(Error::invalid("convolution tensor does not match the grid"));
            }
            Ok(())
        }
        (Grid::D1(_), Interaction::Pointwise(_)) => Ok(()),
        (Grid::D1(g), Interaction::Poisson { grid, .. }) if g == grid => Ok(()),
        _ => Err(Error::invalid("interaction does not fit the grid dimension")),
    }
}
