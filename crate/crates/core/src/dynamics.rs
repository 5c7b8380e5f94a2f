//! Backward-Euler time integration of the relaxed, monodomain and bidomain
//! systems, the exact discrete adjoint, and the duality pairing between them.
//!
//! One step of the relaxed linear system reads
//!
//! ```text
//! (c_m/dt + k A_e + a^n) v^{n+1} = c_m/dt v^n + f^n
//! (eps/dt + A)        u_e^{n+1} = eps/dt u_e^n - A_i v^{n+1}
//! ```
//!
//! with `k = mu/(mu+1)` and `A_* = -div(M_* grad .)`. The adjoint recursion is
//! the transpose of this map, so the pairing returned by [`duality_gap`]
//! vanishes up to round-off.

use crate::discretize::{solve_spd, BandCholesky, DiffusionOperator, Grid, LinearOperator, ShiftedOperator};
use crate::error::{Error, Result};
use crate::model::{PotentialField, ProblemSpec, Reaction, SolverKind};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 25;

/// Forward trajectory: `n_steps + 1` fields per unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub v: Vec<Vec<f64>>,
    pub ue: Vec<Vec<f64>>,
    /// Intracellular potential, only produced by the bidomain solver.
    pub ui: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.v.len() - 1
    }

    pub fn terminal_v(&self) -> &[f64] {
        self.v.last().expect("trajectory is never empty")
    }

    pub fn terminal_ue(&self) -> &[f64] {
        self.ue.last().expect("trajectory is never empty")
    }

    /// `L2(Q)` norm of `v` over the step values `v^1 .. v^N`.
    pub fn v_l2(&self, grid: &Grid) -> f64 {
        space_time_l2(grid, self.dt, &self.v[1..])
    }
}

/// Adjoint trajectory. `phi[N]` and `phi_e[N]` hold the terminal data; `phi[n]`
/// for `n < N` is the value paired with the control on step interval `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub dt: f64,
    pub phi: Vec<Vec<f64>>,
    pub phi_e: Vec<Vec<f64>>,
}

impl AdjointTrajectory {
    pub fn n_steps(&self) -> usize {
        self.phi.len() - 1
    }

    /// The step values `phi^0 .. phi^{N-1}` seen by the observation.
    pub fn observed(&self) -> &[Vec<f64>] {
        &self.phi[..self.n_steps()]
    }
}

pub fn space_time_l2(grid: &Grid, dt: f64, steps: &[Vec<f64>]) -> f64 {
    (dt * steps.iter().map(|f| grid.dot(f, f)).sum::<f64>()).sqrt()
}

/// Piecewise-constant-in-time source supported on a node subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFunction {
    support: Vec<bool>,
    steps: Vec<Vec<f64>>,
}

impl ControlFunction {
    pub fn zero(problem: &ProblemSpec) -> Self {
        Self::zero_on(problem.omega().to_vec(), problem.n_steps())
    }

    pub fn zero_on(support: Vec<bool>, n_steps: usize) -> Self {
        let n = support.len();
        ControlFunction {
            support,
            steps: vec![vec![0.0; n]; n_steps],
        }
    }

    /// Control on the problem's `omega`.
    pub fn new(problem: &ProblemSpec, steps: Vec<Vec<f64>>) -> Result<Self> {
        Self::on_support(problem.omega().to_vec(), problem.n_steps(), steps)
    }

    /// Control on an arbitrary node subset; entries outside it must be zero.
    pub fn on_support(support: Vec<bool>, n_steps: usize, steps: Vec<Vec<f64>>) -> Result<Self> {
        if steps.len() != n_steps {
            return Err(Error::DimensionMismatch {
                expected: n_steps,
                got: steps.len(),
            });
        }
        for f in &steps {
            if f.len() != support.len() {
                return Err(Error::DimensionMismatch {
                    expected: support.len(),
                    got: f.len(),
                });
            }
            for (v, &m) in f.iter().zip(&support) {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument("control contains non-finite values".into()));
                }
                if !m && *v != 0.0 {
                    return Err(Error::InvalidArgument("control is nonzero outside its support".into()));
                }
            }
        }
        Ok(ControlFunction { support, steps })
    }

    /// Restricts `steps` to the problem's `omega`, zeroing everything else.
    pub fn restricted(problem: &ProblemSpec, mut steps: Vec<Vec<f64>>) -> Result<Self> {
        for f in &mut steps {
            for (v, &m) in f.iter_mut().zip(problem.omega()) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        Self::new(problem, steps)
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn step(&self, n: usize) -> &[f64] {
        &self.steps[n]
    }

    pub fn is_zero(&self) -> bool {
        self.steps.iter().flatten().all(|v| *v == 0.0)
    }

    pub fn l2_norm(&self, grid: &Grid, dt: f64) -> f64 {
        space_time_l2(grid, dt, &self.steps)
    }

    /// `(sum dt h^d |f|^q)^(1/q)`.
    pub fn lq_norm(&self, grid: &Grid, dt: f64, q: f64) -> f64 {
        let w = dt * grid.cell_volume();
        (w * self.steps.iter().flatten().map(|v| v.abs().powf(q)).sum::<f64>()).powf(1.0 / q)
    }

    pub fn distance(&self, other: &ControlFunction, grid: &Grid, dt: f64) -> f64 {
        let diff: Vec<Vec<f64>> = self
            .steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        space_time_l2(grid, dt, &diff)
    }
}

/// Zeroth-order term of the v-equation: a given potential or a reaction.
#[derive(Debug, Clone, Copy)]
pub enum IonicTerm<'a> {
    Linear(&'a PotentialField),
    Nonlinear(&'a Reaction),
}

/// Solver for `sigma I + scale A + diag(extra)`.
pub(crate) struct StepSolver<'a> {
    kind: SolverKind,
    sigma: f64,
    scale: f64,
    op: &'a DiffusionOperator,
    extra: Option<Vec<f64>>,
    chol: Option<BandCholesky>,
}

impl<'a> StepSolver<'a> {
    pub(crate) fn new(
        kind: SolverKind,
        sigma: f64,
        scale: f64,
        op: &'a DiffusionOperator,
        extra: Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut s = StepSolver {
            kind,
            sigma,
            scale,
            op,
            extra,
            chol: None,
        };
        if let SolverKind::Direct = kind {
            s.chol = Some(BandCholesky::from_shifted(&s.shifted())?);
        }
        Ok(s)
    }

    fn shifted(&self) -> ShiftedOperator<'_> {
        let mut op = ShiftedOperator::new(self.sigma, self.op).with_scale(self.scale);
        if let Some(d) = &self.extra {
            op = op.with_extra_diag(d);
        }
        op
    }

    pub(crate) fn solve(&self, rhs: Vec<f64>) -> Result<Vec<f64>> {
        match (&self.chol, self.kind) {
            (Some(c), _) => {
                let mut x = rhs;
                c.solve_in_place(&mut x);
                Ok(x)
            }
            (None, SolverKind::Cg { tol, max_iter }) => Ok(solve_spd(&self.shifted(), &rhs, tol, max_iter)?.solution),
            (None, SolverKind::Direct) => unreachable!("direct solver is factored on construction"),
        }
    }
}

/// Factors for the parabolic v-step, reused across steps when the potential
/// does not depend on time.
struct ParabolicStepper<'a> {
    problem: &'a ProblemSpec,
    potential: &'a PotentialField,
    fixed: Option<StepSolver<'a>>,
}

impl<'a> ParabolicStepper<'a> {
    fn new(problem: &'a ProblemSpec, potential: &'a PotentialField) -> Result<Self> {
        potential.check(problem.n_steps(), problem.grid().len())?;
        let fixed = if potential.is_time_invariant() {
            Some(Self::make(problem, potential, 0)?)
        } else {
            None
        };
        Ok(ParabolicStepper {
            problem,
            potential,
            fixed,
        })
    }

    fn make(problem: &'a ProblemSpec, potential: &PotentialField, n: usize) -> Result<StepSolver<'a>> {
        StepSolver::new(
            problem.solver(),
            problem.c_m() / problem.dt(),
            problem.parabolic_coefficient(),
            problem.op_e(),
            potential.step_diag(n, problem.grid().len()),
        )
    }

    /// Solves `(c_m/dt + k A_e + a^n) x = rhs`.
    fn solve(&self, n: usize, rhs: Vec<f64>) -> Result<Vec<f64>> {
        match &self.fixed {
            Some(s) => s.solve(rhs),
            None => Self::make(self.problem, self.potential, n)?.solve(rhs),
        }
    }
}

fn axpy_into(alpha: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + b).collect()
}

/// Backward-Euler step of the v-equation with a nonlinear reaction, solved
/// by Newton's method.
fn newton_v_step(
    problem: &ProblemSpec,
    reaction: &Reaction,
    v_prev: &[f64],
    source: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    let cdt = problem.c_m() / problem.dt();
    let k = problem.parabolic_coefficient();
    let a_e = problem.op_e();
    let n = v_prev.len();
    let mut v = v_prev.to_vec();
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITERS {
        let av = a_e.apply(&v);
        let r: Vec<f64> = (0..n)
            .map(|i| cdt * (v[i] - v_prev[i]) + k * av[i] + reaction.eval(v[i]) - source[i])
            .collect();
        residual = r.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if !residual.is_finite() {
            break;
        }
        if residual <= NEWTON_TOL {
            return Ok(v);
        }
        let jac_diag: Vec<f64> = v.iter().map(|&x| reaction.derivative(x)).collect();
        let solver = StepSolver::new(problem.solver(), cdt, k, a_e, Some(jac_diag)).map_err(|e| e.at_step(step))?;
        let delta = solver
            .solve(r.iter().map(|x| -x).collect())
            .map_err(|e| e.at_step(step))?;
        let mut dmax = 0.0_f64;
        for i in 0..n {
            v[i] += delta[i];
            dmax = dmax.max(delta[i].abs());
        }
        let vmax = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if dmax <= 4.0 * f64::EPSILON * vmax.max(f64::MIN_POSITIVE) {
            // round-off floor reached
            return Ok(v);
        }
    }
    Err(Error::NewtonDiverged { step, residual })
}

fn check_control(problem: &ProblemSpec, f: &ControlFunction) -> Result<()> {
    if f.steps.len() != problem.n_steps() {
        return Err(Error::DimensionMismatch {
            expected: problem.n_steps(),
            got: f.steps.len(),
        });
    }
    if f.support.len() != problem.grid().len() {
        return Err(Error::DimensionMismatch {
            expected: problem.grid().len(),
            got: f.support.len(),
        });
    }
    Ok(())
}

/// Relaxed system with given initial data; shared by the public entry points
/// and the HUM gradient.
pub(crate) fn forward_linear_from(
    problem: &ProblemSpec,
    potential: &PotentialField,
    f: &ControlFunction,
    v0: &[f64],
    ue0: &[f64],
) -> Result<Trajectory> {
    check_control(problem, f)?;
    let dt = problem.dt();
    let cdt = problem.c_m() / dt;
    let edt = problem.epsilon() / dt;
    let stepper = ParabolicStepper::new(problem, potential)?;
    let elliptic = StepSolver::new(problem.solver(), edt, 1.0, problem.op_m(), None)?;
    let n_steps = problem.n_steps();
    let mut v = Vec::with_capacity(n_steps + 1);
    let mut ue = Vec::with_capacity(n_steps + 1);
    v.push(v0.to_vec());
    ue.push(ue0.to_vec());
    for n in 0..n_steps {
        let rhs = axpy_into(cdt, &v[n], f.step(n));
        let v_next = stepper.solve(n, rhs).map_err(|e| e.at_step(n))?;
        let ue_next = relaxed_ue_step(problem, &elliptic, edt, &ue[n], &v_next).map_err(|e| e.at_step(n))?;
        v.push(v_next);
        ue.push(ue_next);
    }
    Ok(Trajectory { dt, v, ue, ui: None })
}

fn relaxed_ue_step(
    problem: &ProblemSpec,
    elliptic: &StepSolver<'_>,
    edt: f64,
    ue_prev: &[f64],
    v_next: &[f64],
) -> Result<Vec<f64>> {
    let aiv = problem.op_i().apply(v_next);
    let rhs: Vec<f64> = ue_prev.iter().zip(&aiv).map(|(u, a)| edt * u - a).collect();
    elliptic.solve(rhs)
}

/// Relaxed linearized system `c_m v_t - k div(M_e grad v) + a v = f 1_omega`,
/// `eps ue_t - div(M grad ue) = div(M_i grad v)`.
pub fn forward_relaxed_linear(
    problem: &ProblemSpec,
    potential: &PotentialField,
    f: &ControlFunction,
) -> Result<Trajectory> {
    forward_linear_from(problem, potential, f, problem.v0(), problem.ue0())
}

/// Relaxed system with the nonlinear reaction `h(v)` in place of `a v`.
pub fn forward_relaxed_nonlinear(
    problem: &ProblemSpec,
    reaction: &Reaction,
    f: &ControlFunction,
) -> Result<Trajectory> {
    reaction.validate()?;
    if reaction.is_linear_zero() {
        return forward_relaxed_linear(problem, &PotentialField::Zero, f);
    }
    check_control(problem, f)?;
    let dt = problem.dt();
    let edt = problem.epsilon() / dt;
    let elliptic = StepSolver::new(problem.solver(), edt, 1.0, problem.op_m(), None)?;
    let cdt = problem.c_m() / dt;
    let n_steps = problem.n_steps();
    let mut v = vec![problem.v0().to_vec()];
    let mut ue = vec![problem.ue0().to_vec()];
    for n in 0..n_steps {
        let source = axpy_into(cdt, &v[n], f.step(n));
        // move c_m/dt v^n back into the residual form used by Newton
        let src: Vec<f64> = source.iter().zip(&v[n]).map(|(s, x)| s - cdt * x).collect();
        let v_next = newton_v_step(problem, reaction, &v[n], &src, n)?;
        let ue_next = relaxed_ue_step(problem, &elliptic, edt, &ue[n], &v_next).map_err(|e| e.at_step(n))?;
        v.push(v_next);
        ue.push(ue_next);
    }
    Ok(Trajectory { dt, v, ue, ui: None })
}

/// Monodomain (parabolic-elliptic) limit: the v-step of the relaxed system
/// followed by the elliptic solve `A ue = -A_i v`.
///
/// `ue[0]` is reported as supplied by the problem; it does not influence any
/// later step.
pub fn forward_monodomain(problem: &ProblemSpec, term: IonicTerm<'_>, f: &ControlFunction) -> Result<Trajectory> {
    check_control(problem, f)?;
    let dt = problem.dt();
    let cdt = problem.c_m() / dt;
    let elliptic = StepSolver::new(problem.solver(), 0.0, 1.0, problem.op_m(), None)?;
    let zero = PotentialField::Zero;
    let stepper = match term {
        IonicTerm::Linear(p) => Some(ParabolicStepper::new(problem, p)?),
        IonicTerm::Nonlinear(r) if r.is_linear_zero() => Some(ParabolicStepper::new(problem, &zero)?),
        IonicTerm::Nonlinear(r) => {
            r.validate()?;
            None
        }
    };
    let mut v = vec![problem.v0().to_vec()];
    let mut ue = vec![problem.ue0().to_vec()];
    for n in 0..problem.n_steps() {
        let v_next = match (&stepper, term) {
            (Some(s), _) => s.solve(n, axpy_into(cdt, &v[n], f.step(n))).map_err(|e| e.at_step(n))?,
            (None, IonicTerm::Nonlinear(r)) => newton_v_step(problem, r, &v[n], f.step(n), n)?,
            (None, IonicTerm::Linear(_)) => unreachable!(),
        };
        let aiv = problem.op_i().apply(&v_next);
        let rhs: Vec<f64> = aiv.iter().map(|a| -a).collect();
        let ue_next = elliptic.solve(rhs).map_err(|e| e.at_step(n))?;
        v.push(v_next);
        ue.push(ue_next);
    }
    Ok(Trajectory { dt, v, ue, ui: None })
}

/// Coupled block operator of one implicit bidomain step, unknowns interleaved
/// per node as `(v_k, ue_k)`:
///
/// ```text
/// [ c_m/dt + h' + A_i   A_i ] [v ]
/// [ A_i                 A   ] [ue]
/// ```
///
/// The block is SPD since its quadratic form is
/// `c_m/dt |v|^2 + (v+ue)^T A_i (v+ue) + ue^T (A - A_i) ue`.
struct BidomainBlock<'a> {
    cdt: f64,
    a_i: &'a DiffusionOperator,
    a_m: &'a DiffusionOperator,
    reaction_diag: Vec<f64>,
}

impl BidomainBlock<'_> {
    fn split(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            x.iter().step_by(2).copied().collect(),
            x.iter().skip(1).step_by(2).copied().collect(),
        )
    }

    fn factor(&self) -> Result<BandCholesky> {
        let n = self.a_i.len();
        let bw = 2 * self.a_i.bandwidth() + 1;
        let (mi, mm) = (self.a_i.matrix(), self.a_m.matrix());
        BandCholesky::factor(2 * n, bw, |r, c| {
            let (i, j) = (r / 2, c / 2);
            match (r % 2, c % 2) {
                (0, 0) if i == j => self.cdt + self.reaction_diag[i] + mi.get(i, i),
                (0, 0) => mi.get(i, j),
                (1, 1) => mm.get(i, j),
                _ => mi.get(i, j),
            }
        })
    }

    fn solve(&self, kind: SolverKind, rhs: Vec<f64>) -> Result<Vec<f64>> {
        match kind {
            SolverKind::Direct => {
                let mut x = rhs;
                self.factor()?.solve_in_place(&mut x);
                Ok(x)
            }
            SolverKind::Cg { tol, max_iter } => Ok(solve_spd(self, &rhs, tol, max_iter)?.solution),
        }
    }
}

impl LinearOperator for BidomainBlock<'_> {
    fn len(&self) -> usize {
        2 * self.a_i.len()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let (v, u) = Self::split(x);
        let (aiv, aiu, amu) = (self.a_i.apply(&v), self.a_i.apply(&u), self.a_m.apply(&u));
        for k in 0..v.len() {
            y[2 * k] = (self.cdt + self.reaction_diag[k]) * v[k] + aiv[k] + aiu[k];
            y[2 * k + 1] = aiv[k] + amu[k];
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let (di, dm) = (self.a_i.matrix().diagonal(), self.a_m.matrix().diagonal());
        (0..self.a_i.len())
            .flat_map(|k| [self.cdt + self.reaction_diag[k] + di[k], dm[k]])
            .collect()
    }
}

/// Bidomain model with controls `f` on `omega` and `g` on a second region.
///
/// Each step solves the intracellular equation together with the elliptic
/// constraint `-div(M grad ue) = div(M_i grad v) + (f - g)` implicitly; the
/// returned trajectory also carries `ui = v + ue`.
pub fn forward_bidomain(
    problem: &ProblemSpec,
    reaction: &Reaction,
    f: &ControlFunction,
    g: &ControlFunction,
) -> Result<Trajectory> {
    reaction.validate()?;
    check_control(problem, f)?;
    check_control(problem, g)?;
    let dt = problem.dt();
    let cdt = problem.c_m() / dt;
    let (a_i, a_m) = (problem.op_i(), problem.op_m());
    let n = problem.grid().len();
    let kind = problem.solver();

    let elliptic = StepSolver::new(kind, 0.0, 1.0, a_m, None)?;
    let ue_init = elliptic.solve(a_i.apply(problem.v0()).iter().map(|x| -x).collect())?;

    let mut v = vec![problem.v0().to_vec()];
    let mut ue = vec![ue_init];
    for step in 0..problem.n_steps() {
        let (fs, gs) = (f.step(step), g.step(step));
        let v_prev = &v[step];
        let mut x: Vec<f64> = (0..n).flat_map(|k| [v_prev[k], ue[step][k]]).collect();
        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            let (vv, uu) = BidomainBlock::split(&x);
            let (aiv, aiu, amu) = (a_i.apply(&vv), a_i.apply(&uu), a_m.apply(&uu));
            let r: Vec<f64> = (0..n)
                .flat_map(|k| {
                    [
                        cdt * (vv[k] - v_prev[k]) + aiv[k] + aiu[k] + reaction.eval(vv[k]) - fs[k],
                        aiv[k] + amu[k] - (fs[k] - gs[k]),
                    ]
                })
                .collect();
            residual = r.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if residual <= NEWTON_TOL {
                converged = true;
                break;
            }
            let block = BidomainBlock {
                cdt,
                a_i,
                a_m,
                reaction_diag: vv.iter().map(|&s| reaction.derivative(s)).collect(),
            };
            let delta = block
                .solve(kind, r.iter().map(|x| -x).collect())
                .map_err(|e| e.at_step(step))?;
            let mut dmax = 0.0_f64;
            for (xi, di) in x.iter_mut().zip(&delta) {
                *xi += di;
                dmax = dmax.max(di.abs());
            }
            let xmax = x.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
            if reaction.is_linear_zero() || dmax <= 4.0 * f64::EPSILON * xmax.max(f64::MIN_POSITIVE) {
                // a linear step is exact after one solve
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NewtonDiverged { step, residual });
        }
        let (vv, uu) = BidomainBlock::split(&x);
        v.push(vv);
        ue.push(uu);
    }
    let ui = v
        .iter()
        .zip(&ue)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    Ok(Trajectory {
        dt,
        v,
        ue,
        ui: Some(ui),
    })
}

/// Adjoint terminal pair `(phi_T, phi_eT)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData {
    pub phi_t: Vec<f64>,
    pub phi_et: Vec<f64>,
}

impl TerminalData {
    pub fn zeros(grid: &Grid) -> Self {
        TerminalData {
            phi_t: vec![0.0; grid.len()],
            phi_et: vec![0.0; grid.len()],
        }
    }

    pub fn new(grid: &Grid, phi_t: Vec<f64>, phi_et: Vec<f64>) -> Result<Self> {
        grid.check_field(&phi_t)?;
        grid.check_field(&phi_et)?;
        Ok(TerminalData { phi_t, phi_et })
    }

    /// Stacked coordinates `[phi_T; phi_eT]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = self.phi_t.clone();
        x.extend_from_slice(&self.phi_et);
        x
    }

    pub fn from_stacked(x: &[f64]) -> Self {
        let n = x.len() / 2;
        TerminalData {
            phi_t: x[..n].to_vec(),
            phi_et: x[n..].to_vec(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.phi_t.iter().chain(&self.phi_et).all(|v| *v == 0.0)
    }
}

/// Backward solve of the adjoint system; the exact transpose of
/// [`forward_relaxed_linear`].
pub fn adjoint_solve(
    problem: &ProblemSpec,
    potential: &PotentialField,
    terminal: &TerminalData,
) -> Result<AdjointTrajectory> {
    let grid = problem.grid();
    if terminal.phi_t.len() != grid.len() || terminal.phi_et.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: terminal.phi_t.len().min(terminal.phi_et.len()),
        });
    }
    let dt = problem.dt();
    let cdt = problem.c_m() / dt;
    let edt = problem.epsilon() / dt;
    let n_steps = problem.n_steps();
    let stepper = ParabolicStepper::new(problem, potential)?;
    let elliptic = StepSolver::new(problem.solver(), edt, 1.0, problem.op_m(), None)?;
    let mut phi = vec![Vec::new(); n_steps + 1];
    let mut phi_e = vec![Vec::new(); n_steps + 1];
    phi[n_steps] = terminal.phi_t.clone();
    phi_e[n_steps] = terminal.phi_et.clone();
    for n in (0..n_steps).rev() {
        let pe = elliptic
            .solve(phi_e[n + 1].iter().map(|x| edt * x).collect())
            .map_err(|e| e.at_step(n))?;
        let aip = problem.op_i().apply(&pe);
        let rhs: Vec<f64> = phi[n + 1].iter().zip(&aip).map(|(p, a)| cdt * p - a).collect();
        phi[n] = stepper.solve(n, rhs).map_err(|e| e.at_step(n))?;
        phi_e[n] = pe;
    }
    Ok(AdjointTrajectory { dt, phi, phi_e })
}

/// Value of the discrete duality identity and the magnitude of its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityGap {
    pub gap: f64,
    /// Sum of the absolute values of the individual pairings.
    pub scale: f64,
}

impl DualityGap {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.gap.abs()
        } else {
            self.gap.abs() / self.scale
        }
    }
}

/// `c_m<v(T),phi_T> + eps<ue(T),phi_eT> - c_m<v0,phi(0)> - eps<ue0,phi_e(0)>
///  - sum dt <f^n, phi^n>_omega`, from one forward and one adjoint run.
pub fn duality_gap(
    problem: &ProblemSpec,
    potential: &PotentialField,
    f: &ControlFunction,
    terminal: &TerminalData,
) -> Result<DualityGap> {
    let fw = forward_relaxed_linear(problem, potential, f)?;
    let adj = adjoint_solve(problem, potential, terminal)?;
    let grid = problem.grid();
    let (c_m, eps, dt) = (problem.c_m(), problem.epsilon(), problem.dt());
    let terms = [
        c_m * grid.dot(fw.terminal_v(), &terminal.phi_t),
        eps * grid.dot(fw.terminal_ue(), &terminal.phi_et),
        -c_m * grid.dot(problem.v0(), &adj.phi[0]),
        -eps * grid.dot(problem.ue0(), &adj.phi_e[0]),
        -dt * (0..problem.n_steps())
            .map(|n| grid.dot(f.step(n), &adj.phi[n]))
            .sum::<f64>(),
    ];
    Ok(DualityGap {
        gap: terms.iter().sum(),
        scale: terms.iter().map(|t| t.abs()).sum(),
    })
}
