use nalgebra::{DMatrix, DVector};

use super::operator::DiffusionOperator;
use crate::error::{Error, Result};

/// Symmetric linear map applied matrix-free.
pub trait LinearOperator {
    fn len(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
    /// Diagonal used for Jacobi preconditioning.
    fn diagonal(&self) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `sigma * I + scale * A + diag(extra)`, the operator family met in every
/// implicit step and elliptic solve.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedOperator<'a> {
    pub sigma: f64,
    pub scale: f64,
    pub op: &'a DiffusionOperator,
    pub extra_diag: Option<&'a [f64]>,
}

impl<'a> ShiftedOperator<'a> {
    pub fn new(sigma: f64, op: &'a DiffusionOperator) -> Self {
        ShiftedOperator {
            sigma,
            scale: 1.0,
            op,
            extra_diag: None,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_extra_diag(mut self, extra: &'a [f64]) -> Self {
        self.extra_diag = Some(extra);
        self
    }

    fn entry_diag(&self, i: usize) -> f64 {
        self.sigma + self.scale * self.op.matrix().get(i, i) + self.extra_diag.map_or(0.0, |d| d[i])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = self.op.matrix().to_dense() * self.scale;
        for i in 0..self.len() {
            m[(i, i)] += self.sigma + self.extra_diag.map_or(0.0, |d| d[i]);
        }
        m
    }
}

impl LinearOperator for ShiftedOperator<'_> {
    fn len(&self) -> usize {
        self.op.len()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply_into(x, y);
        for i in 0..y.len() {
            y[i] = self.scale * y[i] + self.sigma * x[i];
            if let Some(d) = self.extra_diag {
                y[i] += d[i] * x[i];
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.entry_diag(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm relative to the right-hand side norm.
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator.
///
/// Succeeds once `||b - A x|| <= tol * ||b||`; a zero right-hand side returns
/// the zero vector immediately.
pub fn solve_spd(op: &impl LinearOperator, rhs: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    let n = op.len();
    if rhs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rhs.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let bnorm = norm2(rhs);
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            solution: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        op.apply_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return Ok(CgOutcome {
                solution: x,
                iterations: it,
                relative_residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual: rel,
    })
}

/// Dense Cholesky solve, for oracle checks on small systems.
pub const DENSE_LIMIT: usize = 1000;

pub fn solve_dense(op: &ShiftedOperator<'_>, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = op.len();
    if n >= DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "dense solve limited to fewer than {DENSE_LIMIT} unknowns, got {n}"
        )));
    }
    if rhs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rhs.len(),
        });
    }
    let chol = op.to_dense().cholesky().ok_or(Error::NotPositiveDefinite {
        row: 0,
        pivot: f64::NAN,
    })?;
    Ok(chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
}

/// Cholesky factor of a symmetric banded matrix, stored by rows of the lower
/// band: entry `(i, j)` with `i - bw <= j <= i` lives at `i * (bw + 1) + j + bw - i`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Factor the matrix whose lower-band entries are produced by `entry(i, j)`
    /// for `i - bw <= j <= i`.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = entry(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + k + bw - i] * l[j * w + k + bw - j];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + j + bw - i] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }

    /// Factor `sigma * I + scale * A + diag(extra)`.
    pub fn from_shifted(op: &ShiftedOperator<'_>) -> Result<Self> {
        let m = op.op.matrix();
        let n = op.len();
        let diag = op.diagonal();
        Self::factor(n, op.op.bandwidth(), |i, j| {
            if i == j {
                diag[i]
            } else {
                op.scale * m.get(i, j)
            }
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[allow(clippy::needless_range_loop)]
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[i * w + k + bw - i] * b[k];
            }
            b[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.l[k * w + i + bw - k] * b[k];
            }
            b[i] = s / self.l[i * w + bw];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble_diffusion, build_grid, Conductivity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poisson(n: usize) -> DiffusionOperator {
        let g = build_grid(1, &[1.0], &[n]).unwrap();
        assemble_diffusion(&g, &Conductivity::constant(&g, 1.0).unwrap()).unwrap()
    }

    fn residual(op: &impl LinearOperator, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        op.apply_into(x, &mut ax);
        norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
    }

    #[test]
    fn cg_recovers_manufactured_solution() {
        let g = build_grid(2, &[1.0, 1.0], &[9, 7]).unwrap();
        let t = Conductivity::isotropic(&g, |p| 1.0 + p[0] * p[1]).unwrap();
        let a = assemble_diffusion(&g, &t).unwrap();
        let op = ShiftedOperator::new(0.3, &a);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = vec![0.0; g.len()];
        op.apply_into(&xs, &mut b);
        let out = solve_spd(&op, &b, 1e-12, 500).unwrap();
        assert!(residual(&op, &out.solution, &b) <= 1e-12 * norm2(&b));
        let err = out
            .solution
            .iter()
            .zip(&xs)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "err {err}");
        // deterministic
        let again = solve_spd(&op, &b, 1e-12, 500).unwrap();
        assert_eq!(again.solution, out.solution);
    }

    #[test]
    fn cg_zero_rhs() {
        let a = poisson(10);
        let out = solve_spd(&ShiftedOperator::new(0.0, &a), &[0.0; 10], 1e-10, 10).unwrap();
        assert!(out.solution.iter().all(|v| *v == 0.0));
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn cg_matches_dense_poisson() {
        let a = poisson(16);
        let op = ShiftedOperator::new(0.0, &a);
        let b = vec![1.0; 16];
        let cg = solve_spd(&op, &b, 1e-13, 200).unwrap();
        let lu = op.to_dense().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (x, y) in cg.solution.iter().zip(lu.iter()) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn cg_reports_iteration_limit() {
        let a = poisson(40);
        let err = solve_spd(&ShiftedOperator::new(0.0, &a), &vec![1.0; 40], 1e-14, 2).unwrap_err();
        match err {
            Error::CgNotConverged { iterations, residual } => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-14);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn band_cholesky_matches_dense() {
        let g = build_grid(2, &[1.0, 2.0], &[6, 5]).unwrap();
        let t = Conductivity::diagonal(&g, |p| 1.0 + p[0], |p| 2.0 + p[1]).unwrap();
        let a = assemble_diffusion(&g, &t).unwrap();
        let extra: Vec<f64> = (0..g.len()).map(|i| 0.1 * i as f64).collect();
        let op = ShiftedOperator::new(2.0, &a).with_scale(0.7).with_extra_diag(&extra);
        let b: Vec<f64> = (0..g.len()).map(|i| (i as f64).sin()).collect();
        let band = BandCholesky::from_shifted(&op).unwrap().solve(&b);
        let dense = solve_dense(&op, &b).unwrap();
        for (x, y) in band.iter().zip(&dense) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn band_cholesky_rejects_indefinite() {
        let r = BandCholesky::factor(3, 1, |i, j| if i == j { 1.0 } else { 2.0 });
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
    }
}
