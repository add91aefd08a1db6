//! Energy, dissipation, chemical potential, masses and error norms.

use crate::error::{Error, Result};
use crate::field::{FieldSet, SpeciesState};
use crate::grid::{Grid, Grid1D};
use crate::scheme::StepReport;

/// One row of the diagnostics series.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub energy: f64,
    /// `+inf` when a face has a zero on exactly one side.
    pub dissipation: f64,
    pub masses: Vec<f64>,
    pub linf: Vec<f64>,
    pub clamped: f64,
    pub iterations: usize,
}

/// Builds the record for `state` with its own fields.
pub fn record(state: &SpeciesState, fields: &FieldSet, report: &StepReport) -> Result<DiagnosticsRecord> {
    Ok(DiagnosticsRecord {
        t: state.time,
        energy: discrete_energy(state, fields)?,
        dissipation: discrete_dissipation(state, fields),
        masses: total_mass(state),
        linf: state
            .conc
            .iter()
            .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect(),
        clamped: report.clamped_mass,
        iterations: report.iterations,
    })
}

/// `Σ_m Σ_j vol_j c (ln c + f_self/2 + f_ext)` with `0 ln 0 = 0`; `f_self`
/// is the state-dependent part of the field.
pub fn discrete_energy(state: &SpeciesState, fields: &FieldSet) -> Result<f64> {
    let vol = state.grid.volumes();
    let mut e = 0.0;
    for (m, c) in state.conc.iter().enumerate() {
        let (f, ext) = (&fields.f[m], &fields.external[m]);
        for j in 0..c.len() {
            let v = c[j];
            if v < 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "negative concentration {v:e} for species {} at node {j}",
                    m + 1
                )));
            }
            if v > 0.0 {
                e += vol[j] * v * (v.ln() + 0.5 * (f[j] - ext[j]) + ext[j]);
            }
        }
    }
    Ok(e)
}

/// Contribution of one face with transmissibility `w` (face length over
/// spacing): `w g_f (ln u_b - ln u_a)(u_b - u_a)` with `u = c e^f`.
#[inline]
fn face_dissipation(w: f64, ca: f64, cb: f64, fa: f64, fb: f64) -> f64 {
    if ca == 0.0 && cb == 0.0 {
        return 0.0;
    }
    if ca == 0.0 || cb == 0.0 {
        return f64::INFINITY;
    }
    let la = ca.ln() + fa;
    let lb = cb.ln() + fb;
    let d = lb - la;
    // g_f e^{la} = c_a * 2 / (1 + e^{fb - fa}); evaluated from the side with
    // the smaller exponent to stay finite
    if d >= 0.0 {
        w * d * ca * 2.0 / (1.0 + (fb - fa).exp()) * d.exp_m1()
    } else {
        w * (-d) * cb * 2.0 / (1.0 + (fa - fb).exp()) * (-d).exp_m1()
    }
}

/// Dissipation in the product form over all faces; nonnegative.
pub fn discrete_dissipation(state: &SpeciesState, fields: &FieldSet) -> f64 {
    let mut total = 0.0;
    for (c, f) in state.conc.iter().zip(&fields.f) {
        match &state.grid {
            Grid::D1(g) => {
                let w = 1.0 / g.dx();
                for j in 0..c.len() - 1 {
                    total += face_dissipation(w, c[j], c[j + 1], f[j], f[j + 1]);
                }
            }
            Grid::D2(g) => {
                let (nx, ny) = g.shape();
                let vx = g.x.volumes();
                let vy = g.y.volumes();
                for ix in 0..nx {
                    for iy in 0..ny {
                        let i = ix * ny + iy;
                        if ix + 1 < nx {
                            let j = i + ny;
                            total += face_dissipation(vy[iy] / g.dx(), c[i], c[j], f[i], f[j]);
                        }
                        if iy + 1 < ny {
                            let j = i + 1;
                            total += face_dissipation(vx[ix] / g.dy(), c[i], c[j], f[i], f[j]);
                        }
                    }
                }
            }
        }
    }
    total
}

/// `μ = 1 + ln c + f` per species; `-inf` where `c = 0`.
pub fn chemical_potential(state: &SpeciesState, fields: &FieldSet) -> Vec<Vec<f64>> {
    state
        .conc
        .iter()
        .zip(&fields.f)
        .map(|(c, f)| c.iter().zip(f).map(|(c, f)| 1.0 + c.ln() + f).collect())
        .collect()
}

/// `max - min` of `μ` per species over nodes where `c > floor`.
pub fn chemical_potential_spread(state: &SpeciesState, fields: &FieldSet, floor: f64) -> Vec<f64> {
    let mu = chemical_potential(state, fields);
    mu.iter()
        .zip(&state.conc)
        .map(|(mu, c)| {
            let (lo, hi) = mu
                .iter()
                .zip(c)
                .filter(|(_, c)| **c > floor)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (m, _)| (a.min(*m), b.max(*m)));
            if lo.is_finite() {
                hi - lo
            } else {
                0.0
            }
        })
        .collect()
}

pub fn total_mass(state: &SpeciesState) -> Vec<f64> {
    state.masses()
}

/// Discrete `l∞`, `l1`, `l2` errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub linf: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Overlap weights that average fine control volumes onto each coarse one.
/// Returns, for each coarse node, `(first fine index, weights)`.
fn restriction_1d(coarse: &Grid1D, fine: &Grid1D) -> Result<Vec<(usize, Vec<f64>)>> {
    if (coarse.half_width() - fine.half_width()).abs() > 1e-12 * coarse.half_width() {
        return Err(Error::invalid("grids cover different domains"));
    }
    let (nc, nf) = (coarse.half_count(), fine.half_count());
    if nf % nc != 0 {
        return Err(Error::invalid(format!(
            "grid with N = {nf} does not nest into N = {nc}"
        )));
    }
    let r = nf / nc;
    let mut out = Vec::with_capacity(coarse.len());
    for j in 0..coarse.len() {
        let (a, b) = coarse.cell_bounds(j);
        let centre = r * j;
        let lo = centre.saturating_sub(r / 2 + 1);
        let hi = (centre + r / 2 + 1).min(fine.len() - 1);
        let mut w = Vec::with_capacity(hi - lo + 1);
        for i in lo..=hi {
            let (fa, fb) = fine.cell_bounds(i);
            w.push((fb.min(b) - fa.max(a)).max(0.0));
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        out.push((lo, w));
    }
    Ok(out)
}

/// Restricts nodal values on `fine` to the control volumes of `coarse`.
pub fn restrict(coarse: &Grid, fine: &Grid, values: &[f64]) -> Result<Vec<f64>> {
    match (coarse, fine) {
        (Grid::D1(c), Grid::D1(f)) => {
            let r = restriction_1d(c, f)?;
            Ok(r.iter()
                .map(|(lo, w)| w.iter().enumerate().map(|(k, w)| w * values[lo + k]).sum())
                .collect())
        }
        (Grid::D2(c), Grid::D2(f)) => {
            let rx = restriction_1d(&c.x, &f.x)?;
            let ry = restriction_1d(&c.y, &f.y)?;
            let fny = f.y.len();
            let mut out = Vec::with_capacity(c.len());
            for (lx, wx) in &rx {
                for (ly, wy) in &ry {
                    let mut acc = 0.0;
                    for (a, wa) in wx.iter().enumerate() {
                        if *wa == 0.0 {
                            continue;
                        }
                        let row = (lx + a) * fny;
                        for (b, wb) in wy.iter().enumerate() {
                            acc += wa * wb * values[row + ly + b];
                        }
                    }
                    out.push(acc);
                }
            }
            Ok(out)
        }
        _ => Err(Error::invalid("grids differ in dimension")),
    }
}

/// Errors of `candidate` against `reference`, which lives on the same grid
/// or on a nested refinement of it. Summed over species.
pub fn error_norms(candidate: &SpeciesState, reference: &SpeciesState) -> Result<ErrorNorms> {
    if candidate.species_count() != reference.species_count() {
        return Err(Error::ShapeMismatch {
            expected: candidate.species_count(),
            got: reference.species_count(),
        });
    }
    let vol = candidate.grid.volumes();
    let (mut linf, mut l1, mut l2) = (0.0f64, 0.0, 0.0);
    for (c, r) in candidate.conc.iter().zip(&reference.conc) {
        let rr = if candidate.grid == reference.grid {
            r.clone()
        } else {
            restrict(&candidate.grid, &reference.grid, r)?
        };
        for j in 0..c.len() {
            let e = (c[j] - rr[j]).abs();
            linf = linf.max(e);
            l1 += vol[j] * e;
            l2 += vol[j] * e * e;
        }
    }
    Ok(ErrorNorms {
        linf,
        l1,
        l2: l2.sqrt(),
    })
}

/// Least-squares slope of `ln err` against `ln h`.
pub fn fit_order(h: &[f64], err: &[f64]) -> Result<f64> {
    if h.len() != err.len() {
        return Err(Error::ShapeMismatch {
            expected: h.len(),
            got: err.len(),
        });
    }
    if h.len() < 3 {
        return Err(Error::invalid("at least three points are needed to fit an order"));
    }
    if h.iter().chain(err).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("mesh sizes and errors must be positive"));
    }
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("mesh sizes must not all be equal"));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ExternalPotential, FieldModel, Interaction, PotentialShape};
    use crate::grid::Grid2D;

    fn free(grid: Grid) -> FieldModel {
        FieldModel::new(grid, Interaction::Off, Interaction::Off, ExternalPotential::default()).unwrap()
    }

    fn st(grid: Grid, c: Vec<Vec<f64>>) -> SpeciesState {
        let z = vec![1; c.len()];
        SpeciesState::new(grid, z, c, 0.0).unwrap()
    }

    #[test]
    fn energy_examples() {
        let g: Grid = Grid1D::new(1.0, 10).unwrap().into();
        let s = st(g, vec![vec![1.0; 21]]);
        let fs = free(g).assemble(&s).unwrap();
        assert_eq!(discrete_energy(&s, &fs).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let s = st(g, vec![vec![e; 21]]);
        let fs = free(g).assemble(&s).unwrap();
        assert!((discrete_energy(&s, &fs).unwrap() - 2.0 * e).abs() < 1e-13);
        let mut c = vec![1.0; 21];
        c[4] = 0.0;
        let s = st(g, vec![c]);
        assert!(discrete_energy(&s, &fs).unwrap().is_finite());
    }

    #[test]
    fn dissipation_sign_and_zero() {
        let g: Grid = Grid1D::new(1.0, 10).unwrap().into();
        let ext = ExternalPotential {
            shape: PotentialShape::Quadratic { a: 3.0 },
            valence_coupled: false,
        };
        let model = FieldModel::new(g, Interaction::Off, Interaction::Off, ext).unwrap();
        let probe = model.assemble(&st(g, vec![vec![1.0; 21]])).unwrap();
        // equilibrium c ∝ exp(-f)
        let c: Vec<f64> = probe.f[0].iter().map(|f| 2.0 * (-f).exp()).collect();
        let s = st(g, vec![c]);
        let fs = model.assemble(&s).unwrap();
        assert!(discrete_dissipation(&s, &fs) < 1e-12);
        let mu = chemical_potential_spread(&s, &fs, 0.0);
        assert!(mu[0] < 1e-13);
        let s = st(g, vec![(0..21).map(|i| 1.0 + 0.1 * i as f64).collect()]);
        assert!(discrete_dissipation(&s, &fs) > 0.0);
    }

    #[test]
    fn chemical_potential_trivial() {
        let g: Grid = Grid1D::new(1.0, 4).unwrap().into();
        let s = st(g, vec![vec![1.0; 9]]);
        let fs = free(g).assemble(&s).unwrap();
        assert!(chemical_potential(&s, &fs)[0].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn spike_error() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let g: Grid = grid.into();
        let a = st(g, vec![vec![0.5; 17]]);
        let mut c = vec![0.5; 17];
        c[5] += 1e-3;
        let b = st(g, vec![c]);
        let e = error_norms(&b, &a).unwrap();
        assert!((e.linf - 1e-3).abs() < 1e-15);
        assert!((e.l1 - 1e-3 * grid.dx()).abs() < 1e-16);
        let z = error_norms(&a, &a).unwrap();
        assert_eq!((z.linf, z.l1, z.l2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn restriction_preserves_linear_profiles_inside() {
        let c = Grid1D::new(1.0, 4).unwrap();
        let f = Grid1D::new(1.0, 16).unwrap();
        let vals: Vec<f64> = f.nodes().iter().map(|x| 3.0 * x + 1.0).collect();
        let r = restrict(&c.into(), &f.into(), &vals).unwrap();
        for j in 1..8 {
            assert!((r[j] - (3.0 * c.node(j) + 1.0)).abs() < 1e-14);
        }
        // mass is preserved by the averaging
        let fv: f64 = vals.iter().zip(f.volumes()).map(|(a, b)| a * b).sum();
        let cv: f64 = r.iter().zip(c.volumes()).map(|(a, b)| a * b).sum();
        assert!((fv - cv).abs() < 1e-13);
        assert!(restrict(&c.into(), &Grid1D::new(1.0, 6).unwrap().into(), &[0.0; 13]).is_err());
    }

    #[test]
    fn restriction_2d_constant() {
        let c = Grid2D::new(1.0, 1.0, 3, 3).unwrap();
        let f = Grid2D::new(1.0, 1.0, 6, 6).unwrap();
        let r = restrict(&c.into(), &f.into(), &vec![2.5; f.len()]).unwrap();
        assert!(r.iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn order_fits() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let e2: Vec<f64> = h.iter().map(|h| 3.0 * h * h).collect();
        assert!((fit_order(&h, &e2).unwrap() - 2.0).abs() < 1e-12);
        let e1: Vec<f64> = h.iter().map(|h| 0.5 * h).collect();
        assert!((fit_order(&h, &e1).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_order(&h[..2], &e1[..2]).is_err());
        assert!(fit_order(&h, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }
}
