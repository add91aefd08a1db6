//! Uniform node-centred grids on symmetric boxes.
//!
//! Nodes sit at `x_j = -L + (j + N) dx` for `j = -N..=N`; internally they are
//! addressed by the zero-based index `i = j + N`. Each node owns a control
//! volume of width `dx`, except the two boundary nodes which own half-cells.

use crate::error::{Error, Result};

/// 1D grid on `[-L, L]` with `2N + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    half_width: f64,
    half_count: usize,
    dx: f64,
}

impl Grid1D {
    pub fn new(half_width: f64, half_count: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::invalid(format!(
                "grid half-width must be positive and finite, got {half_width}"
            )));
        }
        if half_count < 2 {
            return Err(Error::invalid(format!(
                "grid half count must be at least 2, got {half_count}"
            )));
        }
        Ok(Self {
            half_width,
            half_count,
            dx: half_width / half_count as f64,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn half_count(&self) -> usize {
        self.half_count
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Number of nodes, `2N + 1`.
    pub fn len(&self) -> usize {
        2 * self.half_count + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of the node with zero-based index `i`. The last node is
    /// pinned to `L` so the endpoints are exact.
    pub fn node(&self, i: usize) -> f64 {
        if i == 2 * self.half_count {
            self.half_width
        } else if i == self.half_count {
            0.0
        } else {
            -self.half_width + i as f64 * self.dx
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Control volume of node `i`: `dx` inside, `dx / 2` at either end.
    pub fn cell_volume(&self, i: usize) -> Result<f64> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "node index {i} out of range for {} nodes",
                self.len()
            )));
        }
        Ok(self.volume_unchecked(i))
    }

    pub(crate) fn volume_unchecked(&self, i: usize) -> f64 {
        if i == 0 || i == 2 * self.half_count {
            0.5 * self.dx
        } else {
            self.dx
        }
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.volume_unchecked(i)).collect()
    }

    /// Bounds `[a, b]` of the control volume of node `i`.
    pub fn cell_bounds(&self, i: usize) -> (f64, f64) {
        let x = self.node(i);
        let a = if i == 0 { x } else { x - 0.5 * self.dx };
        let b = if i == 2 * self.half_count {
            x
        } else {
            x + 0.5 * self.dx
        };
        (a, b)
    }
}

/// Tensor-product grid on `[-Lx, Lx] x [-Ly, Ly]`.
///
/// Values are stored row-major with `x` as the slow index:
/// `idx = ix * ny_nodes + iy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub x: Grid1D,
    pub y: Grid1D,
}

impl Grid2D {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        Ok(Self {
            x: Grid1D::new(lx, nx)?,
            y: Grid1D::new(ly, ny)?,
        })
    }

    pub fn dx(&self) -> f64 {
        self.x.dx()
    }

    pub fn dy(&self) -> f64 {
        self.y.dx()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.x.len(), self.y.len())
    }

    pub fn len(&self) -> usize {
        self.x.len() * self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.y.len() + iy
    }

    pub fn node(&self, ix: usize, iy: usize) -> (f64, f64) {
        (self.x.node(ix), self.y.node(iy))
    }

    pub fn cell_volume(&self, ix: usize, iy: usize) -> Result<f64> {
        Ok(self.x.cell_volume(ix)? * self.y.cell_volume(iy)?)
    }

    pub fn volumes(&self) -> Vec<f64> {
        let vx = self.x.volumes();
        let vy = self.y.volumes();
        vx.iter()
            .flat_map(|a| vy.iter().map(move |b| a * b))
            .collect()
    }
}

/// Either grid, for code paths shared between dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grid {
    D1(Grid1D),
    D2(Grid2D),
}

impl Grid {
    pub fn dim(&self) -> usize {
        match self {
            Grid::D1(_) => 1,
            Grid::D2(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::D1(g) => g.len(),
            Grid::D2(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn volumes(&self) -> Vec<f64> {
        match self {
            Grid::D1(g) => g.volumes(),
            Grid::D2(g) => g.volumes(),
        }
    }

    /// Node coordinates; `y` is zero in 1D.
    pub fn coords(&self) -> Vec<(f64, f64)> {
        match self {
            Grid::D1(g) => g.nodes().into_iter().map(|x| (x, 0.0)).collect(),
            Grid::D2(g) => {
                let (nx, ny) = g.shape();
                let mut out = Vec::with_capacity(nx * ny);
                for ix in 0..nx {
                    for iy in 0..ny {
                        out.push(g.node(ix, iy));
                    }
                }
                out
            }
        }
    }

    /// Characteristic mesh size (largest spacing).
    pub fn h(&self) -> f64 {
        match self {
            Grid::D1(g) => g.dx(),
            Grid::D2(g) => g.dx().max(g.dy()),
        }
    }
}

impl From<Grid1D> for Grid {
    fn from(g: Grid1D) -> Self {
        Grid::D1(g)
    }
}

impl From<Grid2D> for Grid {
    fn from(g: Grid2D) -> Self {
        Grid::D2(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_grid_nodes() {
        let g = Grid1D::new(1.0, 4).unwrap();
        assert_eq!(g.dx(), 0.25);
        assert_eq!(
            g.nodes(),
            vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]
        );
    }

    #[test]
    fn midpoint_is_zero() {
        let g = Grid1D::new(10.0, 10).unwrap();
        assert_eq!(g.node(10), 0.0);
        assert_eq!(g.node(0), -10.0);
        assert_eq!(g.node(20), 10.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(Grid1D::new(1.0, 0).is_err());
        assert!(Grid1D::new(1.0, 1).is_err());
        assert!(Grid1D::new(0.0, 4).is_err());
        assert!(Grid1D::new(-1.0, 4).is_err());
        assert!(Grid2D::new(1.0, 1.0, 1, 4).is_err());
    }

    #[test]
    fn grid_2d_spacing() {
        let g = Grid2D::new(1.0, 1.0, 4, 4).unwrap();
        assert_eq!(g.shape(), (9, 9));
        assert_eq!(g.dx(), 0.25);
        assert_eq!(g.dy(), 0.25);
        let g = Grid2D::new(1.0, 2.0, 4, 4).unwrap();
        assert_eq!(g.dy(), 0.5);
        assert_ne!(g.dx(), g.dy());
    }

    #[test]
    fn cell_volumes() {
        let g = Grid1D::new(1.0, 4).unwrap();
        assert_eq!(g.cell_volume(4).unwrap(), 0.25);
        assert_eq!(g.cell_volume(0).unwrap(), 0.125);
        assert_eq!(g.cell_volume(8).unwrap(), 0.125);
        assert!(g.cell_volume(9).is_err());

        let g2 = Grid2D::new(1.0, 1.0, 4, 4).unwrap();
        assert_eq!(g2.cell_volume(8, 8).unwrap(), 0.0625 / 4.0);
        assert_eq!(g2.cell_volume(8, 3).unwrap(), 0.0625 / 2.0);
        assert_eq!(g2.cell_volume(3, 3).unwrap(), 0.0625);
    }

    #[test]
    fn volumes_sum_to_domain_measure() {
        for &(l, n) in &[(1.0, 4usize), (10.0, 16), (1.0, 1000), (3.7, 49)] {
            let g = Grid1D::new(l, n).unwrap();
            let s: f64 = g.volumes().iter().sum();
            assert!((s - 2.0 * l).abs() <= 1e-12 * l, "{l} {n} {s}");
            assert!((g.dx() * n as f64 - l).abs() <= f64::EPSILON * l);
        }
        let g = Grid2D::new(1.0, 2.0, 7, 5).unwrap();
        let s: f64 = g.volumes().iter().sum();
        assert!((s - 8.0).abs() < 1e-12);
    }

    #[test]
    fn nodes_are_mirror_symmetric() {
        let g = Grid1D::new(3.7, 49).unwrap();
        let n = g.len();
        for i in 0..n {
            assert!((g.node(i) + g.node(n - 1 - i)).abs() < 1e-14);
        }
    }
}
