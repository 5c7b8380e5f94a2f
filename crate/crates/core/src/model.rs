//! Problem definitions: constants, conductivities, reactions, control region
//! and initial data.

use serde::{Deserialize, Serialize};

use crate::discretize::{assemble_diffusion, Conductivity, DiffusionOperator, Grid};
use crate::error::{Error, Result};

/// Ionic current `h(v)`. Every kind satisfies `h(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Reaction {
    /// `h = 0`
    None,
    /// `h(v) = L tanh(v)`, globally Lipschitz with constant `L`.
    Lipschitz { lipschitz: f64 },
    /// `h(v) = c3 v^3 + c1 v` with `c3 > 0`, `c1 >= 0`.
    Cubic { c3: f64, c1: f64 },
}

impl Reaction {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Reaction::None => Ok(()),
            Reaction::Lipschitz { lipschitz } if lipschitz.is_finite() && lipschitz >= 0.0 => Ok(()),
            Reaction::Lipschitz { lipschitz } => Err(Error::InvalidArgument(format!(
                "Lipschitz constant must be finite and non-negative, got {lipschitz}"
            ))),
            Reaction::Cubic { c3, c1 } if c3 > 0.0 && c1 >= 0.0 && c3.is_finite() && c1.is_finite() => Ok(()),
            Reaction::Cubic { c3, c1 } => Err(Error::InvalidArgument(format!(
                "cubic reaction needs c3 > 0 and c1 >= 0, got c3 = {c3}, c1 = {c1}"
            ))),
        }
    }

    pub fn is_linear_zero(&self) -> bool {
        matches!(self, Reaction::None)
    }

    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            Reaction::None => 0.0,
            Reaction::Lipschitz { lipschitz } => lipschitz * v.tanh(),
            Reaction::Cubic { c3, c1 } => c3 * v * v * v + c1 * v,
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            Reaction::None => 0.0,
            Reaction::Lipschitz { lipschitz } => {
                let c = v.cosh();
                lipschitz / (c * c)
            }
            Reaction::Cubic { c3, c1 } => 3.0 * c3 * v * v + c1,
        }
    }

    /// Secant slope `h(z)/z`, continued by `h'(0)` at the origin.
    pub fn secant(&self, z: f64) -> f64 {
        match *self {
            Reaction::Cubic { c3, c1 } => c3 * z * z + c1,
            _ if z == 0.0 => self.derivative(0.0),
            _ => self.eval(z) / z,
        }
    }

    /// `int_0^1 h'(s z) ds`, in closed form for the built-in kinds.
    pub fn integral_slope(&self, z: f64) -> f64 {
        match *self {
            Reaction::None => 0.0,
            // d/ds tanh(sz) = z sech^2(sz): the integral is tanh(z)/z
            Reaction::Lipschitz { .. } => self.secant(z),
            // int_0^1 (3 c3 s^2 z^2 + c1) ds
            Reaction::Cubic { c3, c1 } => c3 * z * z + c1,
        }
    }

    pub fn lipschitz_constant(&self) -> Option<f64> {
        match *self {
            Reaction::None => Some(0.0),
            Reaction::Lipschitz { lipschitz } => Some(lipschitz),
            Reaction::Cubic { .. } => None,
        }
    }
}

pub fn reaction_eval(reaction: &Reaction, v: f64) -> f64 {
    reaction.eval(v)
}

pub fn linearize_secant(reaction: &Reaction, z: f64) -> f64 {
    reaction.secant(z)
}

pub fn linearize_integral(reaction: &Reaction, z: f64) -> f64 {
    reaction.integral_slope(z)
}

/// Zeroth-order coefficient `a(t, x)` of the linearized system, one field per
/// time step. Step `n` holds the values used on the interval `(t_n, t_{n+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialField {
    Zero,
    Uniform(f64),
    Sampled(Vec<Vec<f64>>),
}

impl PotentialField {
    pub fn sampled(steps: Vec<Vec<f64>>) -> Result<Self> {
        if steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("potential contains non-finite values".into()));
        }
        Ok(PotentialField::Sampled(steps))
    }

    /// Builds `a^n(x) = g(z^{n+1}(x))` from a state trajectory `z` (`n_steps + 1` fields).
    pub fn from_trajectory(z: &[Vec<f64>], g: impl Fn(f64) -> f64) -> Result<Self> {
        Self::sampled(
            z.iter()
                .skip(1)
                .map(|field| field.iter().map(|&v| g(v)).collect())
                .collect(),
        )
    }

    pub fn inf_norm(&self) -> f64 {
        match self {
            PotentialField::Zero => 0.0,
            PotentialField::Uniform(a) => a.abs(),
            PotentialField::Sampled(s) => s.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())),
        }
    }

    /// True when every step uses the same coefficient field.
    pub fn is_time_invariant(&self) -> bool {
        !matches!(self, PotentialField::Sampled(_))
    }

    /// Diagonal contribution at step `n`; `None` means zero.
    pub fn step_diag(&self, n: usize, len: usize) -> Option<Vec<f64>> {
        match self {
            PotentialField::Zero => None,
            PotentialField::Uniform(a) => Some(vec![*a; len]),
            PotentialField::Sampled(s) => Some(s[n].clone()),
        }
    }

    pub(crate) fn check(&self, n_steps: usize, len: usize) -> Result<()> {
        if let PotentialField::Sampled(s) = self {
            if s.len() != n_steps {
                return Err(Error::DimensionMismatch {
                    expected: n_steps,
                    got: s.len(),
                });
            }
            if let Some(bad) = s.iter().find(|f| f.len() != len) {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    got: bad.len(),
                });
            }
        }
        Ok(())
    }
}

/// Axis-aligned box; selects the interior nodes whose coordinates lie inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn new(lower: &[f64], upper: &[f64]) -> Self {
        Region {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        }
    }

    pub fn whole(grid: &Grid) -> Self {
        Region {
            lower: vec![0.0; grid.dim()],
            upper: grid.extents().to_vec(),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn mask(&self, grid: &Grid) -> Result<Vec<bool>> {
        let d = grid.dim();
        if self.lower.len() != d || self.upper.len() != d {
            return Err(Error::InvalidProblem(format!(
                "region needs {d} bounds per corner, got {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for axis in 0..d {
            let (lo, hi) = (self.lower[axis], self.upper[axis]);
            if !(lo >= 0.0 && hi <= grid.extents()[axis] && lo < hi) {
                return Err(Error::InvalidProblem(format!(
                    "region [{lo}, {hi}] along axis {axis} must lie inside [0, {}]",
                    grid.extents()[axis]
                )));
            }
        }
        let tol = 1e-12 * grid.extents().iter().cloned().fold(0.0, f64::max);
        let mask: Vec<bool> = grid
            .nodes()
            .map(|p| (0..d).all(|a| p[a] >= self.lower[a] - tol && p[a] <= self.upper[a] + tol))
            .collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidProblem("region contains no grid nodes".into()));
        }
        Ok(mask)
    }
}

/// Linear solver used inside the time steppers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverKind {
    /// Banded Cholesky, factored once per distinct step matrix.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    Cg { tol: f64, max_iter: usize },
}

/// Everything needed to run the relaxed, monodomain and bidomain solvers.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    grid: Grid,
    c_m: f64,
    mu: f64,
    epsilon: f64,
    m_i: Conductivity,
    m_e: Conductivity,
    omega_region: Region,
    omega: Vec<bool>,
    horizon: f64,
    n_steps: usize,
    v0: Vec<f64>,
    ue0: Vec<f64>,
    solver: SolverKind,
    a_i: DiffusionOperator,
    a_e: DiffusionOperator,
    a_m: DiffusionOperator,
}

/// Plain-data description of a problem; `build` validates and assembles.
#[derive(Debug, Clone)]
pub struct ProblemBuilder {
    pub grid: Grid,
    pub c_m: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub m_e: Conductivity,
    /// Defaults to `mu * m_e`.
    pub m_i: Option<Conductivity>,
    pub omega: Region,
    pub horizon: f64,
    pub n_steps: usize,
    pub v0: Vec<f64>,
    pub ue0: Vec<f64>,
    pub solver: SolverKind,
}

impl ProblemBuilder {
    /// Unit constants, `M_e = 1`, zero initial data.
    pub fn new(grid: Grid, omega: Region, horizon: f64, n_steps: usize) -> Result<Self> {
        let n = grid.len();
        let m_e = Conductivity::constant(&grid, 1.0)?;
        Ok(ProblemBuilder {
            c_m: 1.0,
            mu: 1.0,
            epsilon: 0.0,
            m_e,
            m_i: None,
            omega,
            horizon,
            n_steps,
            v0: vec![0.0; n],
            ue0: vec![0.0; n],
            solver: SolverKind::Direct,
            grid,
        })
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let ProblemBuilder {
            grid,
            c_m,
            mu,
            epsilon,
            m_e,
            m_i,
            omega,
            horizon,
            n_steps,
            v0,
            ue0,
            solver,
        } = self;
        if !(c_m.is_finite() && c_m > 0.0) {
            return Err(Error::InvalidProblem(format!("c_m must be positive, got {c_m}")));
        }
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::InvalidProblem(format!("mu must be positive, got {mu}")));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::InvalidProblem(format!(
                "epsilon must be non-negative, got {epsilon}"
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::InvalidProblem(format!(
                "need at least 2 time steps, got {n_steps}"
            )));
        }
        grid.check_field(&v0)?;
        grid.check_field(&ue0)?;
        if let SolverKind::Cg { tol, max_iter } = solver {
            if !(tol > 0.0) || max_iter == 0 {
                return Err(Error::InvalidProblem("CG solver needs tol > 0 and max_iter > 0".into()));
            }
        }
        let omega_mask = omega.mask(&grid)?;
        let m_i = match m_i {
            Some(m) => m,
            None => m_e.scaled(mu)?,
        };
        let a_i = assemble_diffusion(&grid, &m_i)?;
        let a_e = assemble_diffusion(&grid, &m_e)?;
        let a_m = a_i.plus(&a_e)?;
        Ok(ProblemSpec {
            grid,
            c_m,
            mu,
            epsilon,
            m_i,
            m_e,
            omega_region: omega,
            omega: omega_mask,
            horizon,
            n_steps,
            v0,
            ue0,
            solver,
            a_i,
            a_e,
            a_m,
        })
    }
}

impl ProblemSpec {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn c_m(&self) -> f64 {
        self.c_m
    }
    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
    pub fn v0(&self) -> &[f64] {
        &self.v0
    }
    pub fn ue0(&self) -> &[f64] {
        &self.ue0
    }
    pub fn omega(&self) -> &[bool] {
        &self.omega
    }
    pub fn omega_region(&self) -> &Region {
        &self.omega_region
    }
    pub fn m_i(&self) -> &Conductivity {
        &self.m_i
    }
    pub fn m_e(&self) -> &Conductivity {
        &self.m_e
    }
    pub fn solver(&self) -> SolverKind {
        self.solver
    }
    /// Discrete `-div(M_i grad .)`.
    pub fn op_i(&self) -> &DiffusionOperator {
        &self.a_i
    }
    /// Discrete `-div(M_e grad .)`.
    pub fn op_e(&self) -> &DiffusionOperator {
        &self.a_e
    }
    /// Discrete `-div(M grad .)`, `M = M_i + M_e`.
    pub fn op_m(&self) -> &DiffusionOperator {
        &self.a_m
    }

    /// Coefficient `mu / (mu + 1)` of the parabolic operator.
    pub fn parabolic_coefficient(&self) -> f64 {
        self.mu / (self.mu + 1.0)
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Midpoint of step interval `n`, used by every weighted quadrature.
    pub fn mid_time(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.dt()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<ProblemSpec> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::InvalidProblem(format!(
                "epsilon must be non-negative, got {epsilon}"
            )));
        }
        let mut p = self.clone();
        p.epsilon = epsilon;
        Ok(p)
    }

    pub fn with_initial_data(&self, v0: Vec<f64>, ue0: Vec<f64>) -> Result<ProblemSpec> {
        self.grid.check_field(&v0)?;
        self.grid.check_field(&ue0)?;
        let mut p = self.clone();
        p.v0 = v0;
        p.ue0 = ue0;
        Ok(p)
    }

    pub fn with_omega(&self, omega: Region) -> Result<ProblemSpec> {
        let mask = omega.mask(&self.grid)?;
        let mut p = self.clone();
        p.omega = mask;
        p.omega_region = omega;
        Ok(p)
    }

    pub fn with_solver(&self, solver: SolverKind) -> ProblemSpec {
        let mut p = self.clone();
        p.solver = solver;
        p
    }

    /// Sum over time and control nodes of `dt h^d |x|^2` for step-indexed fields.
    pub fn omega_energy(&self, steps: &[Vec<f64>]) -> f64 {
        let w = self.dt() * self.grid.cell_volume();
        steps
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&self.omega)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::build_grid;
    use proptest::prelude::*;

    #[test]
    fn reaction_values() {
        let cubic = Reaction::Cubic { c3: 1.0, c1: 1.0 };
        assert_eq!(reaction_eval(&cubic, 2.0), 10.0);
        let tanh = Reaction::Lipschitz { lipschitz: 3.0 };
        assert_eq!(reaction_eval(&tanh, 0.0), 0.0);
        for v in [1e2, 1e4, -1e6] {
            let r = cubic.eval(v) / (v * v * v);
            assert!((r - 1.0).abs() < 1e-3, "{r}");
        }
        assert_eq!(Reaction::None.eval(5.0), 0.0);
    }

    #[test]
    fn secant_linearization() {
        let pure = Reaction::Cubic { c3: 1.0, c1: 0.0 };
        assert_eq!(linearize_secant(&pure, 2.0), 4.0);
        assert_eq!(linearize_secant(&pure, 0.0), 0.0);
        let tanh = Reaction::Lipschitz { lipschitz: 2.5 };
        assert_eq!(linearize_secant(&tanh, 0.0), 2.5);
    }

    #[test]
    fn integral_linearization() {
        assert_eq!(linearize_integral(&Reaction::Cubic { c3: 1.0, c1: 0.0 }, 2.0), 4.0);
        assert_eq!(linearize_integral(&Reaction::Cubic { c3: 1.0, c1: 1.0 }, 3.0), 10.0);
        for r in [
            Reaction::None,
            Reaction::Lipschitz { lipschitz: 1.5 },
            Reaction::Cubic { c3: 2.0, c1: 0.5 },
        ] {
            assert_eq!(r.integral_slope(0.0), r.derivative(0.0));
        }
    }

    #[test]
    fn integral_slope_matches_quadrature() {
        // Gauss-Legendre on [0, 1] as an independent check of the closed forms
        let nodes = [
            (-0.906_179_845_938_664, 0.236_926_885_056_189),
            (-0.538_469_310_105_683, 0.478_628_670_499_366),
            (0.0, 0.568_888_888_888_889),
            (0.538_469_310_105_683, 0.478_628_670_499_366),
            (0.906_179_845_938_664, 0.236_926_885_056_189),
        ];
        let r = Reaction::Cubic { c3: 1.3, c1: 0.4 };
        for z in [-2.0, 0.3, 1.7] {
            let q: f64 = nodes
                .iter()
                .map(|(x, w)| 0.5 * w * r.derivative(0.5 * (x + 1.0) * z))
                .sum();
            assert!((q - r.integral_slope(z)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_reactions() {
        assert!(Reaction::Cubic { c3: 0.0, c1: 1.0 }.validate().is_err());
        assert!(Reaction::Cubic { c3: 1.0, c1: -1.0 }.validate().is_err());
        assert!(Reaction::Lipschitz {
            lipschitz: f64::INFINITY
        }
        .validate()
        .is_err());
    }

    #[test]
    fn problem_validation() {
        let g = build_grid(1, &[1.0], &[8]).unwrap();
        let b = ProblemBuilder::new(g.clone(), Region::new(&[0.2], &[0.6]), 1.0, 10).unwrap();
        let p = b.clone().build().unwrap();
        assert_eq!(p.parabolic_coefficient(), 0.5);
        assert!(p.omega().iter().any(|&m| m));
        let mut bad = b.clone();
        bad.epsilon = -1.0;
        assert!(bad.build().is_err());
        let mut bad = b.clone();
        bad.omega = Region::new(&[0.01], &[0.05]);
        assert!(bad.build().is_err());
        let mut bad = b.clone();
        bad.n_steps = 1;
        assert!(bad.build().is_err());
        let mut bad = b;
        bad.c_m = 0.0;
        assert!(bad.build().is_err());
    }

    proptest! {
        #[test]
        fn secant_identity(z in -50.0f64..50.0, l in 0.1f64..5.0, c3 in 0.1f64..3.0, c1 in 0.0f64..3.0) {
            for r in [Reaction::Lipschitz { lipschitz: l }, Reaction::Cubic { c3, c1 }] {
                let lhs = r.secant(z) * z;
                let rhs = r.eval(z);
                prop_assert!((lhs - rhs).abs() <= 1e-13 * rhs.abs().max(1e-300) + 1e-300);
                let lhs = r.integral_slope(z) * z;
                prop_assert!((lhs - rhs).abs() <= 1e-13 * rhs.abs().max(1e-300) + 1e-300);
            }
        }

        #[test]
        fn tanh_is_lipschitz(x in -20.0f64..20.0, y in -20.0f64..20.0, l in 0.1f64..5.0) {
            let r = Reaction::Lipschitz { lipschitz: l };
            prop_assert!((r.eval(x) - r.eval(y)).abs() <= l * (x - y).abs() * (1.0 + 1e-14));
        }
    }
}
