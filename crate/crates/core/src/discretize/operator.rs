use nalgebra::DMatrix;

use super::grid::Grid;
use crate::error::{Error, Result};

/// Diagonal conductivity tensor sampled on the extended grid.
///
/// Each axis stores one value per node of the grid *including* the boundary
/// layer, so that interface values next to the boundary can be formed by the
/// same harmonic average as interior ones. In 1D there is a single component.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity {
    /// `components[axis][k]`, `k` indexing the extended `(nx+2) x (ny+2)` grid.
    components: Vec<Vec<f64>>,
    ext: [usize; 2],
}

impl Conductivity {
    pub fn constant(grid: &Grid, c: f64) -> Result<Self> {
        Self::isotropic(grid, |_| c)
    }

    /// Same scalar conductivity along every axis.
    pub fn isotropic(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let comp = sample_extended(grid, &f);
        Self::from_components(grid, vec![comp; grid.dim()])
    }

    /// Independent conductivity per axis (2D only; in 1D `fy` is ignored).
    pub fn diagonal(grid: &Grid, fx: impl Fn([f64; 2]) -> f64, fy: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let mut comps = vec![sample_extended(grid, &fx)];
        if grid.dim() == 2 {
            comps.push(sample_extended(grid, &fy));
        }
        Self::from_components(grid, comps)
    }

    fn from_components(grid: &Grid, components: Vec<Vec<f64>>) -> Result<Self> {
        for (axis, comp) in components.iter().enumerate() {
            if let Some(bad) = comp.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::InvalidConductivity(format!(
                    "conductivity must be strictly positive, found {bad} along axis {axis}"
                )));
            }
        }
        Ok(Conductivity {
            components,
            ext: extended_shape(grid),
        })
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|comp| comp.iter().map(|v| c * v).collect())
            .collect();
        let out = Conductivity {
            components,
            ext: self.ext,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn sum(&self, other: &Conductivity) -> Result<Self> {
        if self.ext != other.ext || self.components.len() != other.components.len() {
            return Err(Error::InvalidConductivity("tensors live on different grids".into()));
        }
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Conductivity {
            components,
            ext: self.ext,
        })
    }

    /// Value of the `axis` component at interior node `idx`.
    pub fn at_node(&self, grid: &Grid, axis: usize, idx: usize) -> f64 {
        let [i, j] = grid.multi_index(idx);
        let jj = if grid.dim() == 2 { j + 1 } else { 0 };
        self.components[axis][(i + 1) + self.ext[0] * jj]
    }

    fn validate(&self) -> Result<()> {
        for comp in &self.components {
            if comp.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidConductivity(
                    "conductivity must be strictly positive".into(),
                ));
            }
        }
        Ok(())
    }

    fn ext_value(&self, axis: usize, i: usize, j: usize) -> f64 {
        self.components[axis][i + self.ext[0] * j]
    }
}

fn extended_shape(grid: &Grid) -> [usize; 2] {
    let n = grid.n_cells();
    if grid.dim() == 1 {
        [n[0] + 2, 1]
    } else {
        [n[0] + 2, n[1] + 2]
    }
}

fn sample_extended(grid: &Grid, f: &impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    let [ex, ey] = extended_shape(grid);
    let h = grid.spacing();
    let mut out = Vec::with_capacity(ex * ey);
    for j in 0..ey {
        for i in 0..ex {
            let x = i as f64 * h[0];
            let y = if grid.dim() == 2 { j as f64 * h[1] } else { 0.0 };
            out.push(f([x, y]));
        }
    }
    out
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|(c, _)| *c);
            for (c, v) in row {
                indices.push(c);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            data,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.data[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn nnz_in_row(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            *yi = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Exact (bitwise) symmetry test.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Finite-difference discretization of `-div(M grad u)` with homogeneous
/// Dirichlet conditions: 3-point stencil in 1D, 5-point stencil in 2D, with
/// harmonic averaging of the tensor at cell interfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    grid: Grid,
    tensor: Conductivity,
    matrix: CsrMatrix,
}

impl DiffusionOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tensor(&self) -> &Conductivity {
        &self.tensor
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.n
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.n == 0
    }

    /// Half bandwidth of the matrix in natural ordering.
    pub fn bandwidth(&self) -> usize {
        self.grid.stride()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }

    /// Discretization of `-div(M_1 grad u) - div(M_2 grad u)` as the sum of
    /// the two matrices. Harmonic face averaging is not additive, so this
    /// differs from assembling `M_1 + M_2` unless the tensors are
    /// proportional.
    pub fn plus(&self, other: &DiffusionOperator) -> Result<DiffusionOperator> {
        if self.grid != other.grid {
            return Err(Error::InvalidArgument("operators live on different grids".into()));
        }
        let rows = (0..self.len())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = self.matrix.row(i).collect();
                for (j, v) in other.matrix.row(i) {
                    match row.iter_mut().find(|(c, _)| *c == j) {
                        Some(e) => e.1 += v,
                        None => row.push((j, v)),
                    }
                }
                row
            })
            .collect();
        Ok(DiffusionOperator {
            grid: self.grid.clone(),
            tensor: self.tensor.sum(&other.tensor)?,
            matrix: CsrMatrix::from_rows(rows),
        })
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec_into(x, y)
    }
}

pub fn assemble_diffusion(grid: &Grid, tensor: &Conductivity) -> Result<DiffusionOperator> {
    if tensor.ext != extended_shape(grid) || tensor.components.len() != grid.dim() {
        return Err(Error::InvalidConductivity(
            "tensor was sampled on a different grid".into(),
        ));
    }
    tensor.validate()?;
    let n = grid.n_cells();
    let h = grid.spacing();
    let nx = n[0];
    let ny = if grid.dim() == 2 { n[1] } else { 1 };
    let mut rows = Vec::with_capacity(grid.len());
    for j in 0..ny {
        for i in 0..nx {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
            // extended coordinates of the node
            let (ei, ej) = (i + 1, if grid.dim() == 2 { j + 1 } else { 0 });
            let k = tensor.ext_value(0, ei, ej);
            let west = harmonic(k, tensor.ext_value(0, ei - 1, ej)) / (h[0] * h[0]);
            let east = harmonic(k, tensor.ext_value(0, ei + 1, ej)) / (h[0] * h[0]);
            let mut diag = west + east;
            let idx = i + nx * j;
            if i > 0 {
                row.push((idx - 1, -west));
            }
            if i + 1 < nx {
                row.push((idx + 1, -east));
            }
            if grid.dim() == 2 {
                let ky = tensor.ext_value(1, ei, ej);
                let south = harmonic(ky, tensor.ext_value(1, ei, ej - 1)) / (h[1] * h[1]);
                let north = harmonic(ky, tensor.ext_value(1, ei, ej + 1)) / (h[1] * h[1]);
                diag += south + north;
                if j > 0 {
                    row.push((idx - nx, -south));
                }
                if j + 1 < ny {
                    row.push((idx + nx, -north));
                }
            }
            row.push((idx, diag));
            rows.push(row);
        }
    }
    Ok(DiffusionOperator {
        grid: grid.clone(),
        tensor: tensor.clone(),
        matrix: CsrMatrix::from_rows(rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::build_grid;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    #[test]
    fn operator_sum_adds_matrices() {
        let g = build_grid(2, &[1.0, 1.0], &[5, 4]).unwrap();
        let a = assemble_diffusion(&g, &Conductivity::isotropic(&g, |p| 1.0 + p[0]).unwrap()).unwrap();
        let b = assemble_diffusion(&g, &Conductivity::isotropic(&g, |p| 2.0 - p[1]).unwrap()).unwrap();
        let s = a.plus(&b).unwrap();
        let dense = a.matrix().to_dense() + b.matrix().to_dense();
        assert_abs_diff_eq!(s.matrix().to_dense(), dense, epsilon = 1e-12);
        assert!(s.matrix().is_symmetric());

        let c = Conductivity::isotropic(&g, |p| 1.0 + p[0] * p[1]).unwrap();
        let one = assemble_diffusion(&g, &c).unwrap();
        let summed = one
            .plus(&assemble_diffusion(&g, &c.scaled(0.5).unwrap()).unwrap())
            .unwrap();
        let direct = assemble_diffusion(&g, &c.scaled(1.5).unwrap()).unwrap();
        assert_abs_diff_eq!(summed.matrix().to_dense(), direct.matrix().to_dense(), epsilon = 1e-10);
    }

    #[test]
    fn unit_tensor_stencil() {
        let g = build_grid(1, &[1.0], &[4]).unwrap();
        let a = assemble_diffusion(&g, &Conductivity::constant(&g, 1.0).unwrap()).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(a.matrix().get(i, i), 50.0, epsilon = 1e-12);
        }
        for i in 0..3 {
            assert_abs_diff_eq!(a.matrix().get(i, i + 1), -25.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.matrix().get(i + 1, i), -25.0, epsilon = 1e-12);
        }
        assert_eq!(a.matrix().get(0, 2), 0.0);
    }

    #[test]
    fn constant_tensor_scales_linearly() {
        let g = build_grid(2, &[1.0, 2.0], &[4, 5]).unwrap();
        let one = assemble_diffusion(&g, &Conductivity::constant(&g, 1.0).unwrap()).unwrap();
        let c = assemble_diffusion(&g, &Conductivity::constant(&g, 3.5).unwrap()).unwrap();
        let (d1, dc) = (one.matrix().to_dense(), c.matrix().to_dense());
        assert!((dc - d1 * 3.5).abs().max() < 1e-10);
    }

    #[test]
    fn stencil_pattern() {
        let g = build_grid(2, &[1.0, 1.0], &[4, 4]).unwrap();
        let a = assemble_diffusion(&g, &Conductivity::constant(&g, 1.0).unwrap()).unwrap();
        // corner, edge, interior
        assert_eq!(a.matrix().nnz_in_row(0), 3);
        assert_eq!(a.matrix().nnz_in_row(1), 4);
        assert_eq!(a.matrix().nnz_in_row(5), 5);
        let g1 = build_grid(1, &[1.0], &[6]).unwrap();
        let a1 = assemble_diffusion(&g1, &Conductivity::constant(&g1, 1.0).unwrap()).unwrap();
        assert_eq!(a1.matrix().nnz_in_row(0), 2);
        assert_eq!(a1.matrix().nnz_in_row(3), 3);
    }

    #[test]
    fn variable_tensor_smallest_eigenvalue_matches_dense() {
        let g = build_grid(1, &[1.0], &[8]).unwrap();
        let t = Conductivity::isotropic(&g, |p| 1.0 + p[0]).unwrap();
        let a = assemble_diffusion(&g, &t).unwrap();
        // independent dense assembly from the analytic coefficient
        let h = g.spacing()[0];
        let kf = |x: f64| 1.0 + x;
        let mut dense = DMatrix::<f64>::zeros(8, 8);
        for i in 0..8 {
            let x = (i + 1) as f64 * h;
            let kw = harmonic(kf(x), kf(x - h)) / (h * h);
            let ke = harmonic(kf(x), kf(x + h)) / (h * h);
            dense[(i, i)] = kw + ke;
            if i > 0 {
                dense[(i, i - 1)] = -kw;
            }
            if i < 7 {
                dense[(i, i + 1)] = -ke;
            }
        }
        let lam_oracle = SymmetricEigen::new(dense).eigenvalues.min();
        let lam = SymmetricEigen::new(a.matrix().to_dense()).eigenvalues.min();
        assert!(lam > 0.0);
        assert!((lam - lam_oracle).abs() <= 1e-10 * lam_oracle.abs().max(1.0));
    }

    #[test]
    fn rejects_non_positive_tensor() {
        let g = build_grid(1, &[1.0], &[5]).unwrap();
        assert!(Conductivity::constant(&g, 0.0).is_err());
        assert!(Conductivity::isotropic(&g, |p| p[0] - 0.5).is_err());
        // boundary value must be positive too
        assert!(Conductivity::isotropic(&g, |p| p[0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn symmetric_positive_definite(
            nx in 3usize..=16, ny in 3usize..=16, two_d in any::<bool>(),
            c0 in 0.1f64..5.0, c1 in -0.09f64..2.0, c2 in -0.09f64..2.0,
            xs in proptest::collection::vec(-1.0f64..1.0, 256),
            ys in proptest::collection::vec(-1.0f64..1.0, 256),
        ) {
            let g = if two_d {
                build_grid(2, &[1.0, 1.3], &[nx, ny]).unwrap()
            } else {
                build_grid(1, &[1.0], &[nx]).unwrap()
            };
            let t = Conductivity::diagonal(
                &g,
                |p| c0 * (1.0 + c1 * p[0] + 0.5 * c2 * p[1]),
                |p| c0 * (1.0 + c2 * p[0] * p[1]),
            ).unwrap();
            let a = assemble_diffusion(&g, &t).unwrap();
            prop_assert!(a.matrix().is_symmetric());
            let n = g.len();
            let x = &xs[..n];
            let y = &ys[..n];
            let ax = a.apply(x);
            let ay = a.apply(y);
            let xay: f64 = x.iter().zip(&ay).map(|(p, q)| p * q).sum();
            let axy: f64 = ax.iter().zip(y).map(|(p, q)| p * q).sum();
            let scale = xay.abs().max(1.0);
            prop_assert!((xay - axy).abs() <= 1e-12 * scale);
            if x.iter().any(|v| *v != 0.0) {
                let xax: f64 = x.iter().zip(&ax).map(|(p, q)| p * q).sum();
                prop_assert!(xax > 0.0);
            }
            if n <= 64 {
                let lam = SymmetricEigen::new(a.matrix().to_dense()).eigenvalues.min();
                prop_assert!(lam > 0.0);
            }
        }
    }
}
