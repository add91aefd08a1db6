//! Discrete hat-basis convolutions: a direct double loop and an FFT path.
//!
//! Every node carries up to two half-hats per direction, so the sum splits
//! into one ordinary convolution per half-hat orientation. Each is a linear
//! convolution of a masked density with the reflected half-hat table `G`,
//! evaluated by zero padding to at least `4N + 1` points. Only the spectrum
//! of `G` itself is stored; the reflected tables use `Ĝ[-k]`. Two real
//! inputs are packed into one complex transform.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, Grid2D};
use crate::kernels::{ConvolutionTensor1D, ConvolutionTensor2D, HatPart, KernelFamily, KernelSpec};

/// Largest tolerated imaginary residue, relative to the output bound.
const IMAG_TOL: f64 = 1e-13;

/// Smallest 7-smooth integer `>= n`.
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

fn check_finite(x: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("density entry {i} is not finite")));
    }
    Ok(())
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Spectrum of a table `g(a)`, `|a| <= 2N`, on a padded periodic grid.
pub struct HalfHatSpectrum1D {
    n: usize,
    p: usize,
    spectrum: Vec<Complex64>,
    /// `max |g|`, for the residual bound
    g_max: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HalfHatSpectrum1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HalfHatSpectrum1D")
            .field("n", &self.n)
            .field("p", &self.p)
            .finish()
    }
}

impl HalfHatSpectrum1D {
    /// `table[m + 2N] = g(m)`.
    pub fn new(table: &[f64], n: usize) -> Self {
        assert_eq!(table.len(), 4 * n + 1);
        let p = fast_len(4 * n + 1);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(p);
        let inv = planner.plan_fft_inverse(p);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); p];
        let n2 = 2 * n as i64;
        for (idx, g) in table.iter().enumerate() {
            let m = idx as i64 - n2;
            spectrum[m.rem_euclid(p as i64) as usize] = Complex64::new(*g, 0.0);
        }
        fwd.process(&mut spectrum);
        Self {
            n,
            p,
            spectrum,
            g_max: max_abs(table),
            fwd,
            inv,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.p
    }

    /// `out[j] = Σ_i a_i g(j - i) + Σ_i b_i g(i - j)` for `j = 0..=2N`.
    pub fn apply_pair(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let len = 2 * self.n + 1;
        check_len(len, a.len())?;
        check_len(len, b.len())?;
        let p = self.p;
        let mut z = vec![Complex64::new(0.0, 0.0); p];
        for i in 0..len {
            z[i] = Complex64::new(a[i], b[i]);
        }
        self.fwd.process(&mut z);
        let half = Complex64::new(0.5, 0.0);
        let minus_half_i = Complex64::new(0.0, -0.5);
        // pairwise in place: k and -k are read before either is written
        for k in 0..=p / 2 {
            let km = (p - k) % p;
            let zk = z[k];
            let zm = z[km];
            let a_k = (zk + zm.conj()) * half;
            let b_k = (zk - zm.conj()) * minus_half_i;
            let (gk, gm) = (self.spectrum[k], self.spectrum[km]);
            let rk = a_k * gk + b_k * gm;
            let rm = a_k.conj() * gm + b_k.conj() * gk;
            z[k] = rk;
            z[km] = rm;
        }
        self.inv.process(&mut z);
        let scale = 1.0 / p as f64;
        let bound = (a.iter().map(|v| v.abs()).sum::<f64>() + b.iter().map(|v| v.abs()).sum::<f64>())
            * self.g_max;
        let mut imag = 0.0f64;
        let out: Vec<f64> = z[..len]
            .iter()
            .map(|c| {
                imag = imag.max(c.im.abs() * scale);
                c.re * scale
            })
            .collect();
        if imag > IMAG_TOL * bound {
            return Err(Error::TransformResidual { imag, real: bound });
        }
        Ok(out)
    }
}

/// Spectrum of the 2D table `G(m, n)`, stored transposed (`ky` slow).
pub struct HalfHatSpectrum2D {
    nx: usize,
    ny: usize,
    px: usize,
    py: usize,
    spectrum: Vec<Complex64>,
    g_max: f64,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HalfHatSpectrum2D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HalfHatSpectrum2D")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("px", &self.px)
            .field("py", &self.py)
            .finish()
    }
}

/// `dst[c * dst_stride + r] = src[r * src_stride + c]` for `r < rows`, `c < cols`.
fn transpose(
    src: &[Complex64],
    src_stride: usize,
    rows: usize,
    cols: usize,
    dst: &mut [Complex64],
    dst_stride: usize,
) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * dst_stride + r] = src[r * src_stride + c];
                }
            }
        }
    }
}

impl HalfHatSpectrum2D {
    /// `table` holds `G(m, n)` row-major in `m`, `(4Nx+1) x (4Ny+1)`.
    pub fn new(table: &[f64], nx: usize, ny: usize) -> Self {
        let (rows, cols) = (4 * nx + 1, 4 * ny + 1);
        assert_eq!(table.len(), rows * cols);
        let px = fast_len(rows);
        let py = fast_len(cols);
        let mut planner = FftPlanner::new();
        let fwd_x = planner.plan_fft_forward(px);
        let fwd_y = planner.plan_fft_forward(py);
        let inv_x = planner.plan_fft_inverse(px);
        let inv_y = planner.plan_fft_inverse(py);
        let mut grid = vec![Complex64::new(0.0, 0.0); px * py];
        let (mx, my) = (2 * nx as i64, 2 * ny as i64);
        for r in 0..rows {
            let ix = (r as i64 - mx).rem_euclid(px as i64) as usize;
            for c in 0..cols {
                let iy = (c as i64 - my).rem_euclid(py as i64) as usize;
                grid[ix * py + iy] = Complex64::new(table[r * cols + c], 0.0);
            }
        }
        fwd_y.process(&mut grid);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); px * py];
        transpose(&grid, py, px, py, &mut spectrum, px);
        drop(grid);
        fwd_x.process(&mut spectrum);
        Self {
            nx,
            ny,
            px,
            py,
            spectrum,
            g_max: max_abs(table),
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
        }
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.px, self.py)
    }

    /// Forward transform of a packed pair of `(2Nx+1) x (2Ny+1)` arrays;
    /// result is transposed.
    fn forward_pair(&self, re: &[f64], im: &[f64]) -> Vec<Complex64> {
        let (lx, ly) = (2 * self.nx + 1, 2 * self.ny + 1);
        let (px, py) = (self.px, self.py);
        let mut rows = vec![Complex64::new(0.0, 0.0); lx * py];
        for ix in 0..lx {
            for iy in 0..ly {
                let s = ix * ly + iy;
                rows[ix * py + iy] = Complex64::new(re[s], im[s]);
            }
        }
        self.fwd_y.process(&mut rows);
        let mut t = vec![Complex64::new(0.0, 0.0); px * py];
        transpose(&rows, py, lx, py, &mut t, px);
        self.fwd_x.process(&mut t);
        t
    }

    /// Applies all four half-hat orientations; `parts[s]` is the density
    /// masked to nodes carrying the orientation `(σx, σy)` with `s` in the
    /// order `(+,+), (+,-), (-,+), (-,-)`.
    fn apply_quadrants(&self, parts: [&[f64]; 4]) -> Result<Vec<f64>> {
        let (lx, ly) = (2 * self.nx + 1, 2 * self.ny + 1);
        for p in parts {
            check_len(lx * ly, p.len())?;
        }
        let (px, py) = (self.px, self.py);
        let mut z1 = self.forward_pair(parts[0], parts[1]);
        let z2 = self.forward_pair(parts[2], parts[3]);
        let half = Complex64::new(0.5, 0.0);
        let mhi = Complex64::new(0.0, -0.5);
        let g = &self.spectrum;
        // transposed layout: idx = ky * px + kx
        for ky in 0..py {
            let kym = (py - ky) % py;
            for kx in 0..px {
                let kxm = (px - kx) % px;
                let i = ky * px + kx;
                let j = kym * px + kxm;
                if j < i {
                    continue;
                }
                let (a1, b1) = (z1[i], z1[j].conj());
                let (a2, b2) = (z2[i], z2[j].conj());
                let pp = (a1 + b1) * half;
                let pm = (a1 - b1) * mhi;
                let mp = (a2 + b2) * half;
                let mm = (a2 - b2) * mhi;
                // Ĝ at (±kx, ±ky)
                let g_pp = g[i];
                let g_mm = g[j];
                let g_pm = g[kym * px + kx];
                let g_mp = g[ky * px + kxm];
                let ri = pp * g_pp + pm * g_pm + mp * g_mp + mm * g_mm;
                let rj = pp.conj() * g_mm + pm.conj() * g_mp + mp.conj() * g_pm + mm.conj() * g_pp;
                z1[i] = ri;
                z1[j] = rj;
            }
        }
        drop(z2);
        self.inv_x.process(&mut z1);
        let mut rows = vec![Complex64::new(0.0, 0.0); lx * py];
        transpose(&z1, px, py, lx, &mut rows, py);
        drop(z1);
        self.inv_y.process(&mut rows);
        let scale = 1.0 / (px * py) as f64;
        let bound = parts
            .iter()
            .map(|p| p.iter().map(|v| v.abs()).sum::<f64>())
            .sum::<f64>()
            * self.g_max;
        let mut imag = 0.0f64;
        let mut out = Vec::with_capacity(lx * ly);
        for ix in 0..lx {
            for iy in 0..ly {
                let c = rows[ix * py + iy];
                imag = imag.max(c.im.abs() * scale);
                out.push(c.re * scale);
            }
        }
        if imag > IMAG_TOL * bound {
            return Err(Error::TransformResidual { imag, real: bound });
        }
        Ok(out)
    }
}

impl ConvolutionTensor1D {
    pub fn spectrum(&self) -> Arc<HalfHatSpectrum1D> {
        self.spectrum
            .get_or_init(|| Arc::new(HalfHatSpectrum1D::new(self.half_hats(), self.half_count())))
            .clone()
    }
}

impl ConvolutionTensor2D {
    pub fn spectrum(&self) -> Arc<HalfHatSpectrum2D> {
        self.spectrum
            .get_or_init(|| {
                let (nx, ny) = self.half_counts();
                Arc::new(HalfHatSpectrum2D::new(self.half_hats(), nx, ny))
            })
            .clone()
    }
}

/// FFT evaluation of the 1D hat-basis convolution.
pub fn conv_fast_1d(tensor: &ConvolutionTensor1D, density: &[f64]) -> Result<Vec<f64>> {
    let len = 2 * tensor.half_count() + 1;
    check_len(len, density.len())?;
    check_finite(density)?;
    let mut upper = density.to_vec();
    upper[len - 1] = 0.0;
    let mut lower = density.to_vec();
    lower[0] = 0.0;
    tensor.spectrum().apply_pair(&upper, &lower)
}

/// Literal double loop over interior and boundary weights; the oracle for
/// [`conv_fast_1d`].
pub fn conv_direct_1d(tensor: &ConvolutionTensor1D, density: &[f64]) -> Result<Vec<f64>> {
    let n = tensor.half_count();
    let len = 2 * n + 1;
    check_len(len, density.len())?;
    check_finite(density)?;
    let (ni, nn) = (n as i64, len - 1);
    let mut out = vec![0.0; len];
    for (j, o) in out.iter_mut().enumerate() {
        let js = j as i64 - ni;
        let mut acc = 0.0;
        for i in 1..nn {
            acc += density[i] * tensor.interior(j as i64 - i as i64);
        }
        acc += density[0] * tensor.boundary_left(js);
        acc += density[nn] * tensor.boundary_right(js);
        *o = acc;
    }
    Ok(out)
}

fn quadrant_parts(density: &[f64], lx: usize, ly: usize) -> [Vec<f64>; 4] {
    let orient = [(1i64, 1i64), (1, -1), (-1, 1), (-1, -1)];
    orient.map(|(sx, sy)| {
        let mut v = density.to_vec();
        for ix in 0..lx {
            let hx = HatPart::of(ix, lx).signs().contains(&sx);
            for iy in 0..ly {
                let hy = HatPart::of(iy, ly).signs().contains(&sy);
                if !(hx && hy) {
                    v[ix * ly + iy] = 0.0;
                }
            }
        }
        v
    })
}

/// FFT evaluation of the 2D hat-basis convolution.
pub fn conv_fast_2d(tensor: &ConvolutionTensor2D, density: &[f64]) -> Result<Vec<f64>> {
    let (nx, ny) = tensor.half_counts();
    let (lx, ly) = (2 * nx + 1, 2 * ny + 1);
    check_len(lx * ly, density.len())?;
    check_finite(density)?;
    let parts = quadrant_parts(density, lx, ly);
    tensor
        .spectrum()
        .apply_quadrants([&parts[0], &parts[1], &parts[2], &parts[3]])
}

/// Literal quadruple loop with interior, edge and corner weights.
pub fn conv_direct_2d(tensor: &ConvolutionTensor2D, density: &[f64]) -> Result<Vec<f64>> {
    let (nx, ny) = tensor.half_counts();
    let (lx, ly) = (2 * nx + 1, 2 * ny + 1);
    check_len(lx * ly, density.len())?;
    check_finite(density)?;
    let mut out = vec![0.0; lx * ly];
    for jx in 0..lx {
        for jy in 0..ly {
            let mut acc = 0.0;
            for ix in 0..lx {
                let px = HatPart::of(ix, lx);
                let k = jx as i64 - ix as i64;
                for iy in 0..ly {
                    let v = density[ix * ly + iy];
                    if v == 0.0 {
                        continue;
                    }
                    let py = HatPart::of(iy, ly);
                    acc += v * tensor.weight(px, py, k, jy as i64 - iy as i64);
                }
            }
            out[jx * ly + jy] = acc;
        }
    }
    Ok(out)
}

/// Either tensor, for dimension-generic callers.
#[derive(Debug, Clone)]
pub enum ConvolutionTensor {
    D1(Arc<ConvolutionTensor1D>),
    D2(Arc<ConvolutionTensor2D>),
}

impl ConvolutionTensor {
    pub fn conv_fast(&self, density: &[f64]) -> Result<Vec<f64>> {
        match self {
            ConvolutionTensor::D1(t) => conv_fast_1d(t, density),
            ConvolutionTensor::D2(t) => conv_fast_2d(t, density),
        }
    }

    pub fn conv_direct(&self, density: &[f64]) -> Result<Vec<f64>> {
        match self {
            ConvolutionTensor::D1(t) => conv_direct_1d(t, density),
            ConvolutionTensor::D2(t) => conv_direct_2d(t, density),
        }
    }
}

/// Nodal samples of a nonsingular kernel, convolved by plain quadrature
/// `dx Σ_i U(x_j - x_i) ρ_i` instead of the hat-basis integral.
pub struct PointwiseKernel1D {
    grid: Grid1D,
    spectrum: HalfHatSpectrum1D,
    samples: Vec<f64>,
}

impl PointwiseKernel1D {
    pub fn new(spec: &KernelSpec, grid: &Grid1D) -> Result<Self> {
        spec.validate()?;
        if spec.family.is_singular() {
            return Err(Error::invalid(format!(
                "pointwise evaluation needs a kernel bounded at the origin, got {}",
                spec.family.name()
            )));
        }
        if spec.dim != 1 {
            return Err(Error::invalid("pointwise kernel path is 1D only"));
        }
        let n = grid.half_count();
        let dx = grid.dx();
        let n2 = 2 * n as i64;
        let samples: Vec<f64> = (-n2..=n2)
            .map(|m| dx * spec.strength * spec.family.profile((m as f64 * dx).abs()))
            .collect();
        Ok(Self {
            grid: *grid,
            spectrum: HalfHatSpectrum1D::new(&samples, n),
            samples,
        })
    }

    pub fn apply(&self, density: &[f64]) -> Result<Vec<f64>> {
        check_len(self.grid.len(), density.len())?;
        check_finite(density)?;
        let zeros = vec![0.0; density.len()];
        self.spectrum.apply_pair(density, &zeros)
    }

    /// Direct `O(N²)` sum, for testing.
    pub fn apply_direct(&self, density: &[f64]) -> Result<Vec<f64>> {
        check_len(self.grid.len(), density.len())?;
        let n2 = 2 * self.grid.half_count() as i64;
        Ok((0..density.len())
            .map(|j| {
                density
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.samples[(j as i64 - i as i64 + n2) as usize])
                    .sum()
            })
            .collect())
    }
}

/// `dx Σ_i η W(x_j - x_i) ρ_i` for a kernel that is finite at the origin.
pub fn conv_pointwise_regularized(spec: &KernelSpec, density: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    if !matches!(
        spec.family,
        KernelFamily::RegularizedPowerLaw { .. } | KernelFamily::Exponential
    ) {
        return Err(Error::invalid("pointwise convolution requires a nonsingular kernel"));
    }
    PointwiseKernel1D::new(spec, grid)?.apply(density)
}

/// Grid-aware shape check used by callers holding a [`Grid2D`].
pub fn check_density_2d(grid: &Grid2D, density: &[f64]) -> Result<()> {
    check_len(grid.len(), density.len())?;
    check_finite(density)
}
