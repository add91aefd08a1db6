//! Interaction kernels and their convolution tensors.
//!
//! A tensor entry is the integral of the kernel against a hat basis
//! function. Every hat splits into halves, so all weights are assembled from
//! the half-hat integral
//!
//! ```text
//! G(m)    = dx      ∫₀¹      U((m - s) dx) (1 - s) ds
//! G(m, n) = dx dy  ∫₀¹∫₀¹   U((m - s) dx, (n - t) dy) (1 - s)(1 - t) ds dt
//! ```
//!
//! for integer offsets. The full-hat weight is `T_k = G(k) + G(-k)` and the
//! half-hats at the two domain ends give the boundary weights. Kernel
//! strengths are not part of the tensor; they are applied by the caller.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::quadrature::{adaptive, GaussLegendre};

/// Functional form of a radial kernel, without its strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    /// `|x|^(-alpha)`
    PowerLaw { alpha: f64 },
    /// `exp(-|x|)`
    Exponential,
    /// `ln |x|` (2D only)
    Log,
    /// `1 / (|x|^alpha + eps)`
    RegularizedPowerLaw { alpha: f64, eps: f64 },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::PowerLaw { .. } => "power_law",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Log => "log",
            KernelFamily::RegularizedPowerLaw { .. } => "regularized_power_law",
        }
    }

    /// Whether the kernel is unbounded at the origin.
    pub fn is_singular(&self) -> bool {
        matches!(self, KernelFamily::PowerLaw { .. } | KernelFamily::Log)
    }

    /// Profile `U(r)` for `r >= 0`. Infinite (or -inf) at the origin for the
    /// singular families.
    #[inline]
    pub fn profile(&self, r: f64) -> f64 {
        match *self {
            KernelFamily::PowerLaw { alpha } => {
                if alpha == 0.5 {
                    1.0 / r.sqrt()
                } else if alpha == 1.5 {
                    1.0 / (r * r.sqrt())
                } else {
                    r.powf(-alpha)
                }
            }
            KernelFamily::Exponential => (-r).exp(),
            KernelFamily::Log => r.ln(),
            KernelFamily::RegularizedPowerLaw { alpha, eps } => {
                if alpha == 0.5 {
                    1.0 / (r.sqrt() + eps)
                } else {
                    1.0 / (r.powf(alpha) + eps)
                }
            }
        }
    }
}

/// A kernel family together with its strength and spatial dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub strength: f64,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, strength: f64, dim: usize) -> Result<Self> {
        let spec = Self {
            family,
            strength,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::invalid(format!("unsupported dimension {}", self.dim)));
        }
        if !self.strength.is_finite() {
            return Err(Error::invalid("kernel strength must be finite"));
        }
        match self.family {
            KernelFamily::PowerLaw { alpha } => {
                let max = self.dim as f64;
                if !(alpha > 0.0 && alpha < max) {
                    return Err(Error::NotIntegrable(format!(
                        "kernel not integrable in {}D: power-law exponent {alpha} outside (0, {max})",
                        self.dim
                    )));
                }
            }
            KernelFamily::Log => {
                if self.dim != 2 {
                    return Err(Error::invalid("log kernel is only provided in 2D"));
                }
            }
            KernelFamily::RegularizedPowerLaw { alpha, eps } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::invalid(format!(
                        "regularization parameter must be positive, got {eps}"
                    )));
                }
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::invalid(format!(
                        "regularized exponent must be positive, got {alpha}"
                    )));
                }
            }
            KernelFamily::Exponential => {}
        }
        Ok(())
    }

    /// `strength * U(|r|)`; errors at the origin for singular families.
    pub fn eval(&self, r: f64) -> Result<f64> {
        let r = r.abs();
        if r == 0.0 && self.family.is_singular() {
            return Err(Error::SingularPoint);
        }
        Ok(self.strength * self.family.profile(r))
    }

    pub fn eval_2d(&self, x: f64, y: f64) -> Result<f64> {
        self.eval(x.hypot(y))
    }
}

/// Gauss-Legendre order for a smooth cell whose nearest singularity lies
/// `d` cell widths away. Chosen from the Bernstein-ellipse bound so the
/// truncation error is below roughly 1e-16 relative.
fn order_for_distance(d: f64) -> usize {
    let d = d.max(0.25);
    let z = 1.0 + 2.0 * d;
    let rho = z + (z * z - 1.0).sqrt();
    let n = (16.0 * std::f64::consts::LN_10 / (2.0 * rho.ln())).ceil() as usize + 2;
    n.clamp(3, 64)
}

const ADAPTIVE_BUDGET: usize = 1_000_000;
const ADAPTIVE_TOL: f64 = 1e-14;

/// Half-hat integral `G(m)` in 1D (strength excluded).
pub fn half_hat_1d(family: &KernelFamily, m: i64, dx: f64) -> Result<f64> {
    if let KernelFamily::PowerLaw { alpha } = *family {
        if (-1..=1).contains(&m) {
            return Ok(power_law_half_hat_closed(alpha, m, dx));
        }
    }
    // distance (in cells) from the singular point to the interval
    // u = m - s, s in [0, 1]
    let dist = if m > 0 { (m - 1) as f64 } else { (-m) as f64 };
    let mf = m as f64;
    let integrand = |s: f64| family.profile(((mf - s) * dx).abs()) * (1.0 - s);
    let v = if dist == 0.0 && !matches!(family, KernelFamily::Exponential) {
        adaptive(integrand, 0.0, 1.0, ADAPTIVE_TOL, 0.0, ADAPTIVE_BUDGET)?
    } else {
        let gl = GaussLegendre::cached(if dist == 0.0 { 24 } else { order_for_distance(dist) });
        gl.integrate(0.0, 1.0, integrand)
    };
    Ok(dx * v)
}

/// Closed form of `G(m)` for `|x|^(-alpha)` and `m in {-1, 0, 1}`.
pub fn power_law_half_hat_closed(alpha: f64, m: i64, dx: f64) -> f64 {
    let a = 1.0 - alpha;
    let scale = dx.powf(a);
    let v = match m {
        0 => 1.0 / (a * (a + 1.0)),
        1 => 1.0 / (a + 1.0),
        -1 => {
            2.0 * (2f64.powf(a) - 1.0) / a - (2f64.powf(a + 1.0) - 1.0) / (a + 1.0)
        }
        _ => unreachable!("closed form only for |m| <= 1"),
    };
    scale * v
}

/// Full-hat weight `T_k` of an arbitrary offset, computed directly from the
/// half-hat integrals. For `|k| <= 1` these are the cells touching the
/// singularity.
pub fn singular_cell_integral_1d(spec: &KernelSpec, offset: i64, dx: f64) -> Result<f64> {
    spec.validate()?;
    if offset.abs() > 1 {
        return Err(Error::invalid("singular cell offsets satisfy |k| <= 1"));
    }
    Ok(half_hat_1d(&spec.family, offset, dx)? + half_hat_1d(&spec.family, -offset, dx)?)
}

/// Full-hat weight for 2D offsets with `max(|k|, |l|) <= 1`.
pub fn singular_cell_integral_2d(
    spec: &KernelSpec,
    offset: (i64, i64),
    dx: f64,
    dy: f64,
) -> Result<f64> {
    spec.validate()?;
    if spec.dim != 2 {
        return Err(Error::invalid("2D cell integral needs a 2D kernel"));
    }
    let (k, l) = offset;
    if k.abs() > 1 || l.abs() > 1 {
        return Err(Error::invalid("singular cell offsets satisfy max(|k|, |l|) <= 1"));
    }
    let mut total = 0.0;
    for sx in [1, -1] {
        for sy in [1, -1] {
            total += half_hat_2d(&spec.family, sx * k, sy * l, dx, dy)?;
        }
    }
    Ok(total)
}

/// Coefficients of `(a0 + a1 r)(b0 + b1 r)` in powers of `r`.
#[inline]
fn poly_mul(a: (f64, f64), b: (f64, f64)) -> [f64; 3] {
    [a.0 * b.0, a.0 * b.1 + a.1 * b.0, a.1 * b.1]
}

/// Quarter-hat integral `G(m, n)` in 2D (strength excluded).
pub fn half_hat_2d(family: &KernelFamily, m: i64, n: i64, dx: f64, dy: f64) -> Result<f64> {
    let touches = (0..=1).contains(&m) && (0..=1).contains(&n);
    if touches {
        return Ok(dx * dy * corner_cell(family, m, n, dx, dy)?);
    }
    // cell in (u, v) = (m - s, n - t) is [m-1, m] x [n-1, n]
    let gap = |m: i64| -> f64 {
        if m > 1 {
            (m - 1) as f64
        } else if m < 0 {
            (-m) as f64
        } else {
            0.0
        }
    };
    let dphys = (gap(m) * dx).hypot(gap(n) * dy);
    let order = order_for_distance(dphys / dx.max(dy));
    let gl = GaussLegendre::cached(order);
    let (mf, nf) = (m as f64, n as f64);
    let mut acc = 0.0;
    for (s, ws) in gl.nodes.iter().zip(&gl.weights) {
        let u = (mf - s) * dx;
        let mut inner = 0.0;
        for (t, wt) in gl.nodes.iter().zip(&gl.weights) {
            let v = (nf - t) * dy;
            inner += wt * family.profile(u.hypot(v)) * (1.0 - t);
        }
        acc += ws * inner * (1.0 - s);
    }
    Ok(dx * dy * acc)
}

/// Integral over the unit cell whose corner `(p, q) = (0, 0)` sits on the
/// singularity, in the local coordinates `p = |s - m|`, `q = |t - n|`. The
/// square is split along its diagonal and each triangle is mapped to the
/// unit square (`p = r, q = r w` and the mirror), which turns the radial
/// singularity into a power of `r` that is integrated exactly.
fn corner_cell(family: &KernelFamily, m: i64, n: i64, dx: f64, dy: f64) -> Result<f64> {
    // hat weights as affine functions of p and q
    let wx = if m == 0 { (1.0, -1.0) } else { (0.0, 1.0) };
    let wy = if n == 0 { (1.0, -1.0) } else { (0.0, 1.0) };
    let gl = GaussLegendre::cached(48);
    let mut total = 0.0;
    for tri in 0..2 {
        for (w, ww) in gl.nodes.iter().zip(&gl.weights) {
            // triangle 0: p = r, q = r w; triangle 1: q = r, p = r w
            let (scale, coeffs) = if tri == 0 {
                (
                    dx.hypot(w * dy),
                    poly_mul(wx, (wy.0, wy.1 * w)),
                )
            } else {
                (
                    (w * dx).hypot(dy),
                    poly_mul((wx.0, wx.1 * w), wy),
                )
            };
            let radial = radial_moment(family, scale, &coeffs)?;
            total += ww * radial;
        }
    }
    Ok(total)
}

/// `∫₀¹ r U(r S) (c0 + c1 r + c2 r²) dr`.
fn radial_moment(family: &KernelFamily, scale: f64, c: &[f64; 3]) -> Result<f64> {
    match *family {
        KernelFamily::PowerLaw { alpha } => {
            let s = scale.powf(-alpha);
            Ok(s * c
                .iter()
                .enumerate()
                .map(|(k, ck)| ck / (2.0 - alpha + k as f64))
                .sum::<f64>())
        }
        KernelFamily::Log => {
            let ls = scale.ln();
            Ok(c
                .iter()
                .enumerate()
                .map(|(k, ck)| {
                    let p = 2.0 + k as f64;
                    ck * (ls / p - 1.0 / (p * p))
                })
                .sum())
        }
        KernelFamily::Exponential => {
            let gl = GaussLegendre::cached(24);
            Ok(gl.integrate(0.0, 1.0, |r| {
                r * (-r * scale).exp() * (c[0] + r * (c[1] + r * c[2]))
            }))
        }
        KernelFamily::RegularizedPowerLaw { .. } => adaptive(
            |r| r * family.profile(r * scale) * (c[0] + r * (c[1] + r * c[2])),
            0.0,
            1.0,
            ADAPTIVE_TOL,
            0.0,
            ADAPTIVE_BUDGET,
        ),
    }
}

/// Precomputed weights for the 1D hat-basis convolution on a grid with
/// `2N + 1` nodes and spacing `dx`.
#[derive(Debug)]
pub struct ConvolutionTensor1D {
    family: KernelFamily,
    dx: f64,
    n: usize,
    /// `G(m)` for `m = -2N..=2N`, stored at `m + 2N`.
    half: Vec<f64>,
    pub(crate) spectrum: OnceLock<Arc<crate::conv::HalfHatSpectrum1D>>,
}

impl ConvolutionTensor1D {
    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn half_count(&self) -> usize {
        self.n
    }

    /// `G(m)`, `|m| <= 2N`.
    #[inline]
    pub fn half_hat(&self, m: i64) -> f64 {
        self.half[(m + 2 * self.n as i64) as usize]
    }

    pub fn half_hats(&self) -> &[f64] {
        &self.half
    }

    /// Interior weight `T_k` for `|k| <= 2N`.
    #[inline]
    pub fn interior(&self, k: i64) -> f64 {
        self.half_hat(k) + self.half_hat(-k)
    }

    /// Weight of the right end node `x_N` seen from node `j` (signed index).
    pub fn boundary_right(&self, j: i64) -> f64 {
        self.half_hat(self.n as i64 - j)
    }

    /// Weight of the left end node `x_{-N}` seen from node `j` (signed index).
    pub fn boundary_left(&self, j: i64) -> f64 {
        self.half_hat(j + self.n as i64)
    }
}

/// Precomputed weights for the 2D bilinear-hat convolution.
#[derive(Debug)]
pub struct ConvolutionTensor2D {
    family: KernelFamily,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    /// `G(m, n)` for `|m| <= 2Nx`, `|n| <= 2Ny`, row-major in `m`.
    half: Vec<f64>,
    pub(crate) spectrum: OnceLock<Arc<crate::conv::HalfHatSpectrum2D>>,
}

/// Which part of the hat a node carries in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HatPart {
    Full,
    /// only the half towards increasing coordinate (left end node)
    Upper,
    /// only the half towards decreasing coordinate (right end node)
    Lower,
}

impl HatPart {
    pub fn of(i: usize, len: usize) -> Self {
        if i == 0 {
            HatPart::Upper
        } else if i + 1 == len {
            HatPart::Lower
        } else {
            HatPart::Full
        }
    }

    /// Signs `σ` such that the weight is a sum of `G(σ a)`.
    pub fn signs(self) -> &'static [i64] {
        match self {
            HatPart::Full => &[1, -1],
            HatPart::Upper => &[1],
            HatPart::Lower => &[-1],
        }
    }
}

impl ConvolutionTensor2D {
    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.dx, self.dy)
    }

    pub fn half_counts(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub(crate) fn half_hats(&self) -> &[f64] {
        &self.half
    }

    #[inline]
    pub fn half_hat(&self, m: i64, n: i64) -> f64 {
        let cols = 4 * self.ny + 1;
        let r = (m + 2 * self.nx as i64) as usize;
        let c = (n + 2 * self.ny as i64) as usize;
        self.half[r * cols + c]
    }

    /// Interior weight `T_{k,l}`.
    pub fn interior(&self, k: i64, l: i64) -> f64 {
        self.weight(HatPart::Full, HatPart::Full, k, l)
    }

    /// Weight of a source node carrying hat parts `(px, py)` at offset
    /// `(k, l)` = target minus source. Edge nodes carry one half in one
    /// direction, corner nodes one half in both.
    pub fn weight(&self, px: HatPart, py: HatPart, k: i64, l: i64) -> f64 {
        let mut w = 0.0;
        for sx in px.signs() {
            for sy in py.signs() {
                w += self.half_hat(sx * k, sy * l);
            }
        }
        w
    }
}

fn check_mesh(dx: f64) -> Result<()> {
    if !(dx > 0.0 && dx.is_finite()) {
        return Err(Error::invalid(format!("mesh size must be positive, got {dx}")));
    }
    Ok(())
}

/// Builds the 1D tensor; the spec's strength is ignored.
pub fn precompute_tensor_1d(spec: &KernelSpec, dx: f64, n: usize) -> Result<ConvolutionTensor1D> {
    spec.validate()?;
    check_mesh(dx)?;
    if spec.dim != 1 {
        return Err(Error::invalid("1D tensor requested for a 2D kernel"));
    }
    let n2 = 2 * n as i64;
    let half = (-n2..=n2)
        .map(|m| half_hat_1d(&spec.family, m, dx))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvolutionTensor1D {
        family: spec.family,
        dx,
        n,
        half,
        spectrum: OnceLock::new(),
    })
}

/// Builds the 2D tensor; the spec's strength is ignored.
pub fn precompute_tensor_2d(
    spec: &KernelSpec,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
) -> Result<ConvolutionTensor2D> {
    spec.validate()?;
    check_mesh(dx)?;
    check_mesh(dy)?;
    if spec.dim != 2 {
        return Err(Error::invalid("2D tensor requested for a 1D kernel"));
    }
    let (mx, my) = (2 * nx as i64, 2 * ny as i64);
    let mut half = Vec::with_capacity(((2 * mx + 1) * (2 * my + 1)) as usize);
    let symmetric = (dx - dy).abs() <= f64::EPSILON * dx && nx == ny;
    for m in -mx..=mx {
        for n in -my..=my {
            // G(m, n) = G(n, m) when the grid is square; reuse the transpose
            if symmetric && n < m {
                let cols = (2 * my + 1) as usize;
                let r = (n + mx) as usize;
                let c = (m + my) as usize;
                half.push(half[r * cols + c]);
            } else {
                half.push(half_hat_2d(&spec.family, m, n, dx, dy)?);
            }
        }
    }
    Ok(ConvolutionTensor2D {
        family: spec.family,
        dx,
        dy,
        nx,
        ny,
        half,
        spectrum: OnceLock::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TensorKey {
    family: &'static str,
    params: Vec<u64>,
    dims: Vec<usize>,
}

impl TensorKey {
    fn new(family: &KernelFamily, spacing: &[f64], dims: &[usize]) -> Self {
        let mut params: Vec<u64> = match *family {
            KernelFamily::PowerLaw { alpha } => vec![alpha.to_bits()],
            KernelFamily::RegularizedPowerLaw { alpha, eps } => {
                vec![alpha.to_bits(), eps.to_bits()]
            }
            _ => vec![],
        };
        params.extend(spacing.iter().map(|h| h.to_bits()));
        Self {
            family: family.name(),
            params,
            dims: dims.to_vec(),
        }
    }
}

/// Process-wide cache of tensors keyed by family, exponents, spacing and
/// grid size. Strengths are excluded so strength sweeps share one tensor.
#[derive(Default)]
pub struct TensorCache {
    one: Mutex<HashMap<TensorKey, Arc<ConvolutionTensor1D>>>,
    two: Mutex<HashMap<TensorKey, Arc<ConvolutionTensor2D>>>,
}

impl TensorCache {
    pub fn global() -> &'static TensorCache {
        static CACHE: OnceLock<TensorCache> = OnceLock::new();
        CACHE.get_or_init(TensorCache::default)
    }

    pub fn get_1d(&self, spec: &KernelSpec, dx: f64, n: usize) -> Result<Arc<ConvolutionTensor1D>> {
        let key = TensorKey::new(&spec.family, &[dx], &[n]);
        if let Some(t) = self.one.lock().expect("cache poisoned").get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(precompute_tensor_1d(spec, dx, n)?);
        Ok(self
            .one
            .lock()
            .expect("cache poisoned")
            .entry(key)
            .or_insert(t)
            .clone())
    }

    pub fn get_2d(
        &self,
        spec: &KernelSpec,
        dx: f64,
        dy: f64,
        nx: usize,
        ny: usize,
    ) -> Result<Arc<ConvolutionTensor2D>> {
        let key = TensorKey::new(&spec.family, &[dx, dy], &[nx, ny]);
        if let Some(t) = self.two.lock().expect("cache poisoned").get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(precompute_tensor_2d(spec, dx, dy, nx, ny)?);
        Ok(self
            .two
            .lock()
            .expect("cache poisoned")
            .entry(key)
            .or_insert(t)
            .clone())
    }

    pub fn clear(&self) {
        self.one.lock().expect("cache poisoned").clear();
        self.two.lock().expect("cache poisoned").clear();
    }
}

/// Writes a 1D tensor as a plain-text table `k  T_k` with a commented header.
pub fn write_tensor_table(
    tensor: &ConvolutionTensor1D,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    let (alpha, eps) = match tensor.family {
        KernelFamily::PowerLaw { alpha } => (alpha, f64::NAN),
        KernelFamily::RegularizedPowerLaw { alpha, eps } => (alpha, eps),
        _ => (f64::NAN, f64::NAN),
    };
    writeln!(
        out,
        "# family={} alpha={alpha} eps={eps} strength_excluded=true dx={:.17e} N={} tol={ADAPTIVE_TOL:e}",
        tensor.family.name(),
        tensor.dx,
        tensor.n
    )?;
    let n2 = 2 * tensor.n as i64;
    for k in -(n2 - 1)..=(n2 - 1) {
        writeln!(out, "{k} {:.17e}", tensor.interior(k))?;
    }
    Ok(())
}

/// `(1/2π)`, the prefactor of the 2D Newtonian potential.
pub const INV_TWO_PI: f64 = 1.0 / (2.0 * PI);

#[cfg(test)]
mod tests {
    use super::*;

    fn pl(alpha: f64, dim: usize) -> KernelSpec {
        KernelSpec::new(KernelFamily::PowerLaw { alpha }, 1.0, dim).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(pl(0.5, 1).eval(4.0).unwrap(), 0.5);
        let e = KernelSpec::new(KernelFamily::Exponential, 1.0, 1).unwrap();
        assert_eq!(e.eval(0.0).unwrap(), 1.0);
        let r = KernelSpec::new(
            KernelFamily::RegularizedPowerLaw {
                alpha: 0.5,
                eps: 0.5,
            },
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(r.eval(0.0).unwrap(), 2.0);
        assert!(matches!(pl(0.5, 1).eval(0.0), Err(Error::SingularPoint)));
        let lg = KernelSpec::new(KernelFamily::Log, INV_TWO_PI, 2).unwrap();
        assert!((lg.eval_2d(3.0, 4.0).unwrap() - 5f64.ln() / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn integrability_checks() {
        assert!(matches!(
            KernelSpec::new(KernelFamily::PowerLaw { alpha: 1.5 }, 1.0, 1),
            Err(Error::NotIntegrable(_))
        ));
        assert!(KernelSpec::new(KernelFamily::PowerLaw { alpha: 1.5 }, 1.0, 2).is_ok());
        assert!(KernelSpec::new(KernelFamily::PowerLaw { alpha: 2.0 }, 1.0, 2).is_err());
        assert!(KernelSpec::new(
            KernelFamily::RegularizedPowerLaw {
                alpha: 0.5,
                eps: 0.0
            },
            1.0,
            1
        )
        .is_err());
        assert!(KernelSpec::new(KernelFamily::Log, 1.0, 1).is_err());
    }

    #[test]
    fn power_law_closed_forms() {
        for dx in [1.0, 0.25, 0.01] {
            let t = precompute_tensor_1d(&pl(0.5, 1), dx, 4).unwrap();
            let sq = f64::sqrt(dx);
            assert!((t.interior(0) - 8.0 / 3.0 * sq).abs() < 1e-14 * sq);
            let t1 = (8.0 * 2f64.sqrt() - 8.0) / 3.0 * sq;
            assert!((t.interior(1) - t1).abs() < 1e-14 * sq);
            assert_eq!(t.interior(1), t.interior(-1));
        }
    }

    #[test]
    fn power_law_scaling() {
        let alpha = 0.3;
        let a = precompute_tensor_1d(&pl(alpha, 1), 0.1, 8).unwrap();
        let b = precompute_tensor_1d(&pl(alpha, 1), 0.3, 8).unwrap();
        let c: f64 = 3f64.powf(1.0 - alpha);
        for k in -15..=15 {
            let rel = (b.interior(k) - c * a.interior(k)).abs() / b.interior(k);
            assert!(rel < 1e-13, "k={k} rel={rel}");
        }
    }

    #[test]
    fn exponential_offset_zero() {
        let e = KernelSpec::new(KernelFamily::Exponential, 1.0, 1).unwrap();
        let v = singular_cell_integral_1d(&e, 0, 1.0).unwrap();
        assert!((v - 2.0 / std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn exponential_tensor_decays_monotonically() {
        let e = KernelSpec::new(KernelFamily::Exponential, 1.0, 1).unwrap();
        let t = precompute_tensor_1d(&e, 0.5, 16).unwrap();
        for k in 0..31 {
            assert!(t.interior(k + 1) < t.interior(k));
            assert_eq!(t.interior(k), t.interior(-k));
        }
    }

    #[test]
    fn two_d_power_law_rejects_alpha_two() {
        let spec = KernelSpec {
            family: KernelFamily::PowerLaw { alpha: 2.0 },
            strength: 1.0,
            dim: 2,
        };
        assert!(singular_cell_integral_2d(&spec, (0, 0), 0.1, 0.1).is_err());
    }

    #[test]
    fn two_d_symmetries() {
        let t = precompute_tensor_2d(&pl(1.5, 2), 0.1, 0.1, 4, 4).unwrap();
        assert!((t.interior(1, 0) - t.interior(0, 1)).abs() < 1e-14 * t.interior(1, 0));
        for k in -7..=7 {
            for l in -7..=7 {
                let v = t.interior(k, l);
                assert!(v.is_finite());
                for (a, b) in [(-k, l), (k, -l), (-k, -l)] {
                    assert!((t.interior(a, b) - v).abs() <= 1e-13 * v.abs());
                }
            }
        }
    }

    #[test]
    fn log_tensor_center_is_negative() {
        let spec = KernelSpec::new(KernelFamily::Log, 1.0, 2).unwrap();
        let t = precompute_tensor_2d(&spec, 0.05, 0.05, 3, 3).unwrap();
        assert!(t.interior(0, 0) < 0.0 && t.interior(0, 0).is_finite());
    }

    #[test]
    fn cache_ignores_strength() {
        let cache = TensorCache::default();
        let a = pl(0.5, 1);
        let mut b = a;
        b.strength = 7.0;
        let ta = cache.get_1d(&a, 0.1, 5).unwrap();
        let tb = cache.get_1d(&b, 0.1, 5).unwrap();
        assert!(Arc::ptr_eq(&ta, &tb));
        let tc = cache.get_1d(&a, 0.2, 5).unwrap();
        assert!(!Arc::ptr_eq(&ta, &tc));
    }

    #[test]
    fn tensor_table_has_header() {
        let t = precompute_tensor_1d(&pl(0.5, 1), 0.25, 2).unwrap();
        let mut buf = Vec::new();
        write_tensor_table(&t, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# family=power_law alpha=0.5"));
        assert_eq!(s.lines().count(), 1 + 7);
    }
}
