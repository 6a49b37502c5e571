//! Uniform tensor grids over `(ℝᵈ)ⁿ`: indexing, multilinear interpolation,
//! and cloud-in-cell deposition of weighted point sets.

/// A uniform tensor grid. Axis `a = i·d + k` is coordinate `k` of agent `i`;
/// flat indices are row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid {
    pub dims: Vec<usize>,
    pub lo: Vec<f64>,
    pub h: Vec<f64>,
    pub strides: Vec<usize>,
    pub total: usize,
}

impl TensorGrid {
    pub fn new(bounds: &[(f64, f64)], points_per_axis: usize) -> Self {
        let nd = bounds.len();
        let dims = vec![points_per_axis; nd];
        let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let h: Vec<f64> =
            bounds.iter().map(|b| (b.1 - b.0) / (points_per_axis - 1) as f64).collect();
        let mut strides = vec![1usize; nd];
        for a in (0..nd.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        let total = dims.iter().product();
        Self { dims, lo, h, strides, total }
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        self.lo[axis] + self.h[axis] * idx as f64
    }

    #[inline]
    pub fn hi(&self, axis: usize) -> f64 {
        self.coord(axis, self.dims[axis] - 1)
    }

    #[inline]
    pub fn axis_index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.strides[axis]) % self.dims[axis]
    }

    pub fn decompose(&self, mut flat: usize, out: &mut [usize]) {
        for a in 0..self.ndim() {
            out[a] = flat / self.strides[a];
            flat %= self.strides[a];
        }
    }

    pub fn node_coords(&self, flat: usize, out: &mut [f64]) {
        for a in 0..self.ndim() {
            out[a] = self.coord(a, self.axis_index(flat, a));
        }
    }

    pub fn is_interior(&self, flat: usize) -> bool {
        (0..self.ndim()).all(|a| {
            let i = self.axis_index(flat, a);
            i > 0 && i + 1 < self.dims[a]
        })
    }

    /// Fractional grid position of `x` on `axis`, clamped into the domain.
    #[inline]
    fn position(&self, axis: usize, x: f64) -> (usize, f64) {
        let pos = (x - self.lo[axis]) / self.h[axis];
        let max = (self.dims[axis] - 1) as f64;
        let clamped = pos.clamp(0.0, max);
        let cell = (clamped.floor() as usize).min(self.dims[axis] - 2);
        (cell, clamped - cell as f64)
    }

    /// Multilinear interpolation of a node field at `x` (clamped to the box).
    pub fn interp(&self, field: &[f64], x: &[f64]) -> f64 {
        let nd = self.ndim();
        debug_assert_eq!(x.len(), nd);
        let mut cells = [0usize; 8];
        let mut fracs = [0.0f64; 8];
        for a in 0..nd {
            let (c, f) = self.position(a, x[a]);
            cells[a] = c;
            fracs[a] = f;
        }
        let corners = 1usize << nd;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut flat = 0;
            let mut w = 1.0;
            for a in 0..nd {
                let up = (corner >> a) & 1;
                flat += (cells[a] + up) * self.strides[a];
                w *= if up == 1 { fracs[a] } else { 1.0 - fracs[a] };
            }
            acc += w * field[flat];
        }
        acc
    }

    /// Interpolate `block_len` contiguous components of a node-major vector
    /// field (layout `[node][component]`).
    pub fn interp_vector(&self, field: &[f64], block_len: usize, x: &[f64], out: &mut [f64]) {
        let nd = self.ndim();
        let mut cells = [0usize; 8];
        let mut fracs = [0.0f64; 8];
        for a in 0..nd {
            let (c, f) = self.position(a, x[a]);
            cells[a] = c;
            fracs[a] = f;
        }
        out[..block_len].fill(0.0);
        let corners = 1usize << nd;
        for corner in 0..corners {
            let mut flat = 0;
            let mut w = 1.0;
            for a in 0..nd {
                let up = (corner >> a) & 1;
                flat += (cells[a] + up) * self.strides[a];
                w *= if up == 1 { fracs[a] } else { 1.0 - fracs[a] };
            }
            for c in 0..block_len {
                out[c] += w * field[flat * block_len + c];
            }
        }
    }

    /// Sub-grid over a contiguous axis range (one agent's axes).
    pub fn subgrid(&self, first_axis: usize, naxes: usize) -> TensorGrid {
        let bounds: Vec<(f64, f64)> = (first_axis..first_axis + naxes)
            .map(|a| (self.lo[a], self.hi(a)))
            .collect();
        TensorGrid::new(&bounds, self.dims[first_axis])
    }
}

/// Linear (cloud-in-cell) deposition of weighted points onto a grid; the
/// result sums to the total input weight as long as every point lies inside
/// the box (outside points are clamped to the boundary).
pub fn deposit_points(
    grid: &TensorGrid,
    points: impl Iterator<Item = (f64, Vec<f64>)>,
    out: &mut [f64],
) {
    let nd = grid.ndim();
    out.fill(0.0);
    let mut cells = [0usize; 8];
    let mut fracs = [0.0f64; 8];
    for (w, x) in points {
        for a in 0..nd {
            let (c, f) = grid.position(a, x[a]);
            cells[a] = c;
            fracs[a] = f;
        }
        let corners = 1usize << nd;
        for corner in 0..corners {
            let mut flat = 0;
            let mut ww = w;
            for a in 0..nd {
                let up = (corner >> a) & 1;
                flat += (cells[a] + up) * grid.strides[a];
                ww *= if up == 1 { fracs[a] } else { 1.0 - fracs[a] };
            }
            out[flat] += ww;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_roundtrip() {
        let g = TensorGrid::new(&[(-1.0, 1.0), (0.0, 2.0)], 5);
        assert_eq!(g.total, 25);
        let mut idx = [0usize; 2];
        for flat in 0..g.total {
            g.decompose(flat, &mut idx);
            assert_eq!(flat, idx[0] * g.strides[0] + idx[1] * g.strides[1]);
            assert_eq!(idx[0], g.axis_index(flat, 0));
            assert_eq!(idx[1], g.axis_index(flat, 1));
        }
        assert_eq!(g.hi(0), 1.0);
        assert_eq!(g.hi(1), 2.0);
    }

    #[test]
    fn interp_reproduces_linear_fields() {
        let g = TensorGrid::new(&[(-1.0, 1.0), (-1.0, 1.0)], 9);
        let field: Vec<f64> = (0..g.total)
            .map(|f| {
                let mut x = [0.0; 2];
                g.node_coords(f, &mut x);
                2.0 * x[0] - 0.5 * x[1] + 0.25
            })
            .collect();
        for probe in [[-0.9, 0.3], [0.11, -0.77], [1.0, 1.0], [0.0, 0.0]] {
            let v = g.interp(&field, &probe);
            let exact = 2.0 * probe[0] - 0.5 * probe[1] + 0.25;
            assert!((v - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn deposit_conserves_mass_and_means() {
        let g = TensorGrid::new(&[(-2.0, 2.0)], 81);
        let pts = [(-1.3, 0.25), (0.05, 0.5), (1.9, 0.25)];
        let mut weights = vec![0.0; g.total];
        deposit_points(&g, pts.iter().map(|(x, w)| (*w, vec![*x])), &mut weights);
        let mass: f64 = weights.iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let mean: f64 =
            weights.iter().enumerate().map(|(i, w)| w * g.coord(0, i)).sum();
        let exact: f64 = pts.iter().map(|(x, w)| w * x).sum();
        // CIC deposition preserves first moments exactly for interior points
        assert!((mean - exact).abs() < 1e-12);
    }
}
