use crate::error::{Error, Result};

/// Uniform tensor-product grid of interior nodes on `(0, L_x) [x (0, L_y)]`.
///
/// Boundary nodes are not stored; every field carries one value per interior
/// node with homogeneous Dirichlet data implied on the boundary. Nodes are
/// ordered with the x index running fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    extents: Vec<f64>,
    n_cells: Vec<usize>,
    spacing: Vec<f64>,
}

pub const MIN_NODES_PER_AXIS: usize = 3;

impl Grid {
    pub fn new(dim: usize, extents: &[f64], n_cells: &[usize]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if extents.len() != dim || n_cells.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} extents and node counts, got {} and {}",
                extents.len(),
                n_cells.len()
            )));
        }
        for (axis, (&len, &n)) in extents.iter().zip(n_cells).enumerate() {
            if !(len.is_finite() && len > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "extent along axis {axis} must be positive, got {len}"
                )));
            }
            if n < MIN_NODES_PER_AXIS {
                return Err(Error::InvalidGrid(format!(
                    "need at least {MIN_NODES_PER_AXIS} interior nodes along axis {axis}, got {n}"
                )));
            }
        }
        let spacing = extents
            .iter()
            .zip(n_cells)
            .map(|(&len, &n)| len / (n as f64 + 1.0))
            .collect();
        Ok(Grid {
            extents: extents.to_vec(),
            n_cells: n_cells.to_vec(),
            spacing,
        })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn n_cells(&self) -> &[usize] {
        &self.n_cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Total number of interior nodes.
    pub fn len(&self) -> usize {
        self.n_cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Quadrature weight of a single node (product of the mesh widths).
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Number of nodes along x; also the half bandwidth of 2D operators.
    pub fn stride(&self) -> usize {
        if self.dim() == 1 {
            1
        } else {
            self.n_cells[0]
        }
    }

    /// Per-axis interior indices of a flat node index.
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        let nx = self.n_cells[0];
        [idx % nx, idx / nx]
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let [i, j] = self.multi_index(idx);
        let x = (i as f64 + 1.0) * self.spacing[0];
        let y = if self.dim() == 2 {
            (j as f64 + 1.0) * self.spacing[1]
        } else {
            0.0
        };
        [x, y]
    }

    /// Coordinates of every interior node, in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(move |k| self.coords(k))
    }

    /// Discrete L2 inner product `h^d * sum(x_k y_k)`.
    pub fn dot(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        self.cell_volume() * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        self.dot(x, x).sqrt()
    }

    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.nodes().map(f).collect()
    }

    pub(crate) fn check_field(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field contains non-finite values".into()));
        }
        Ok(())
    }
}

pub fn build_grid(dim: usize, extents: &[f64], n_cells: &[usize]) -> Result<Grid> {
    Grid::new(dim, extents, n_cells)
}

/// Nodal values on a grid. Values are one real per interior node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        grid.check_field(&values)?;
        Ok(ScalarField { values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        ScalarField {
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        ScalarField { values: grid.sample(f) }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
