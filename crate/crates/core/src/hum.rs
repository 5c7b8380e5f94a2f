//! Penalized HUM: minimize
//!
//! ```text
//! J(xi) = 1/2 sum_n dt <w phi^n, phi^n>_omega + c_m <v0, phi^0> + eps <ue0, phi_e^0>
//!         + delta (|phi_T| + |phi_eT|)
//! ```
//!
//! over adjoint terminal data `xi = (phi_T, phi_eT)` and use `f = w phi` on
//! `omega` as the control. The smooth part is the quadratic
//! `1/2 <G xi, xi> + <b, xi>` where `G` is the controllability Gramian, so the
//! minimization runs a monotone FISTA with blockwise shrinkage.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretize::{Grid, DENSE_LIMIT};
use crate::dynamics::{
    adjoint_solve, forward_linear_from, forward_relaxed_linear, forward_relaxed_nonlinear, space_time_l2,
    AdjointTrajectory, ControlFunction, TerminalData, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{PotentialField, ProblemSpec, Reaction};
use crate::weights::WeightSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumMode {
    #[default]
    Plain,
    Weighted,
}

impl HumMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HumMode::Plain => "plain",
            HumMode::Weighted => "weighted",
        }
    }
}

/// Settings of the proximal-gradient minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumConfig {
    pub delta: f64,
    pub mode: HumMode,
    pub max_iters: usize,
    /// Stop once the prox-gradient residual falls below
    /// `tol * max(|b|, delta)`.
    pub tol: f64,
    /// Also stop when the functional fell by at most `ftol * |J|` over the
    /// last `stall_window` iterations while the residual is within ten
    /// times the tolerance. Flat directions of the Gramian otherwise keep
    /// the residual hovering just above `tol` for many thousand iterations.
    pub ftol: f64,
    pub stall_window: usize,
    /// Power iterations used for the initial step size.
    pub power_iters: usize,
    /// Factor applied to the Lipschitz estimate when a step is rejected.
    pub backtrack: f64,
    /// Assemble the Gramian densely when it has at most this many rows.
    pub dense_limit: usize,
    /// Exponent of the Lebesgue norm reported next to the L2 norm.
    pub q: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HumConfig {
    fn default() -> Self {
        HumConfig {
            delta: 1e-3,
            mode: HumMode::Plain,
            max_iters: 20_000,
            tol: 1e-7,
            ftol: 1e-12,
            stall_window: 200,
            power_iters: 10,
            backtrack: 2.0,
            dense_limit: DENSE_LIMIT,
            q: 4.0,
            seed: 0,
        }
    }
}

impl HumConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return bad(format!("delta = {} must be positive", self.delta));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol = {} must be positive", self.tol));
        }
        if !(self.ftol.is_finite() && self.ftol >= 0.0) || self.stall_window == 0 {
            return bad(format!(
                "ftol = {} must be non-negative and stall_window = {} at least 1",
                self.ftol, self.stall_window
            ));
        }
        if !(self.backtrack.is_finite() && self.backtrack > 1.0) {
            return bad(format!("backtrack = {} must exceed 1", self.backtrack));
        }
        if !(self.q.is_finite() && self.q > 2.0) {
            return bad(format!("q = {} must exceed 2", self.q));
        }
        Ok(())
    }
}

/// Observation weight `w(x, t_n + dt/2)` on `omega`, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    weights: Vec<Vec<f64>>,
}

impl Observation {
    pub fn plain(problem: &ProblemSpec) -> Self {
        let row: Vec<f64> = problem.omega().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Observation {
            weights: vec![row; problem.n_steps()],
        }
    }

    pub fn weighted(problem: &ProblemSpec, weights: &WeightSet) -> Result<Self> {
        let n = problem.grid().len();
        if weights.psi().values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: weights.psi().values.len(),
            });
        }
        if (weights.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
            return Err(Error::InvalidArgument(
                "weight horizon differs from the problem horizon".into(),
            ));
        }
        let omega = problem.omega();
        let w = (0..problem.n_steps())
            .map(|k| {
                let t = problem.mid_time(k);
                (0..n)
                    .map(|i| {
                        if omega[i] {
                            weights.observation_weight(i, t)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Observation { weights: w })
    }

    pub fn for_mode(problem: &ProblemSpec, mode: HumMode, weights: Option<&WeightSet>) -> Result<Self> {
        match (mode, weights) {
            (HumMode::Plain, _) => Ok(Self::plain(problem)),
            (HumMode::Weighted, Some(w)) => Self::weighted(problem, w),
            (HumMode::Weighted, None) => Err(Error::InvalidArgument("weighted mode requires a weight set".into())),
        }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// `w phi^n` for each step.
    pub fn control_steps(&self, adj: &AdjointTrajectory) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .zip(adj.observed())
            .map(|(w, p)| w.iter().zip(p).map(|(a, b)| a * b).collect())
            .collect()
    }

    /// `sum_n dt <w phi^n, phi^n>`.
    pub fn energy(&self, grid: &Grid, adj: &AdjointTrajectory) -> f64 {
        adj.dt
            * self
                .weights
                .iter()
                .zip(adj.observed())
                .map(|(w, p)| grid.cell_volume() * w.iter().zip(p).map(|(a, b)| a * b * b).sum::<f64>())
                .sum::<f64>()
    }
}

fn stacked_dot(grid: &Grid, x: &[f64], y: &[f64]) -> f64 {
    grid.cell_volume() * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
}

fn block_norms(grid: &Grid, x: &[f64]) -> (f64, f64) {
    let n = grid.len();
    (grid.norm(&x[..n]), grid.norm(&x[n..]))
}

/// Blockwise shrinkage `x -> max(0, 1 - tau_delta/|x|) x` for each of the
/// two terminal fields.
pub fn prox_penalty(grid: &Grid, terminal: &TerminalData, tau_delta: f64) -> TerminalData {
    let shrink = |x: &[f64]| -> Vec<f64> {
        let nx = grid.norm(x);
        if nx <= tau_delta || nx == 0.0 {
            vec![0.0; x.len()]
        } else {
            let c = 1.0 - tau_delta / nx;
            x.iter().map(|v| c * v).collect()
        }
    };
    TerminalData {
        phi_t: shrink(&terminal.phi_t),
        phi_et: shrink(&terminal.phi_et),
    }
}

fn prox_stacked(grid: &Grid, x: &[f64], tau_delta: f64) -> Vec<f64> {
    prox_penalty(grid, &TerminalData::from_stacked(x), tau_delta).to_vec()
}

/// Terminal state of a forward run, scaled as `(c_m v(T), eps ue(T))`.
fn scaled_terminal(problem: &ProblemSpec, traj: &Trajectory) -> Vec<f64> {
    let mut out: Vec<f64> = traj.terminal_v().iter().map(|v| problem.c_m() * v).collect();
    out.extend(traj.terminal_ue().iter().map(|u| problem.epsilon() * u));
    out
}

fn control_from_adjoint(problem: &ProblemSpec, obs: &Observation, adj: &AdjointTrajectory) -> Result<ControlFunction> {
    ControlFunction::new(problem, obs.control_steps(adj))
}

/// Controllability Gramian `G xi = (c_m v(T), eps ue(T))` for zero initial
/// data and control `w phi[xi]`.
pub struct Gramian<'a> {
    problem: &'a ProblemSpec,
    potential: &'a PotentialField,
    obs: &'a Observation,
    dense: Option<DMatrix<f64>>,
}

impl<'a> Gramian<'a> {
    pub fn matrix_free(problem: &'a ProblemSpec, potential: &'a PotentialField, obs: &'a Observation) -> Self {
        Gramian {
            problem,
            potential,
            obs,
            dense: None,
        }
    }

    /// Dense column-by-column assembly when `2 n <= dense_limit`.
    pub fn new(
        problem: &'a ProblemSpec,
        potential: &'a PotentialField,
        obs: &'a Observation,
        dense_limit: usize,
    ) -> Result<Self> {
        let mut g = Self::matrix_free(problem, potential, obs);
        let dim = g.dim();
        if dim <= dense_limit {
            let mut m = DMatrix::zeros(dim, dim);
            let mut e = vec![0.0; dim];
            for j in 0..dim {
                e[j] = 1.0;
                let col = g.apply_matrix_free(&e)?;
                m.set_column(j, &nalgebra::DVector::from_vec(col));
                e[j] = 0.0;
            }
            // remove round-off asymmetry
            let sym = (&m + m.transpose()) * 0.5;
            g.dense = Some(sym);
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        2 * self.problem.grid().len()
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        self.dense.as_ref()
    }

    fn apply_matrix_free(&self, x: &[f64]) -> Result<Vec<f64>> {
        let terminal = TerminalData::from_stacked(x);
        let adj = adjoint_solve(self.problem, self.potential, &terminal)?;
        let f = control_from_adjoint(self.problem, self.obs, &adj)?;
        let zeros = vec![0.0; self.problem.grid().len()];
        let traj = forward_linear_from(self.problem, self.potential, &f, &zeros, &zeros)?;
        Ok(scaled_terminal(self.problem, &traj))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.dense {
            Some(m) => Ok((m * nalgebra::DVector::from_column_slice(x)).data.into()),
            None => self.apply_matrix_free(x),
        }
    }

    /// Rayleigh quotient after `iters` power iterations from a seeded start.
    pub fn power_estimate(&self, iters: usize, seed: u64) -> Result<f64> {
        let grid = self.problem.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..self.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rq = 0.0;
        for _ in 0..iters.max(1) {
            let nx = stacked_dot(grid, &x, &x).sqrt();
            if nx == 0.0 {
                return Ok(0.0);
            }
            x.iter_mut().for_each(|v| *v /= nx);
            let gx = self.apply(&x)?;
            rq = stacked_dot(grid, &gx, &x);
            x = gx;
        }
        Ok(rq)
    }
}

/// Free terminal state `b = (c_m v(T), eps ue(T))` under zero control.
fn free_terminal(problem: &ProblemSpec, potential: &PotentialField) -> Result<Vec<f64>> {
    let traj = forward_relaxed_linear(problem, potential, &ControlFunction::zero(problem))?;
    Ok(scaled_terminal(problem, &traj))
}

/// Value of the penalized functional at `terminal`.
pub fn hum_functional(
    problem: &ProblemSpec,
    potential: &PotentialField,
    weights: Option<&WeightSet>,
    config: &HumConfig,
    terminal: &TerminalData,
) -> Result<f64> {
    let obs = Observation::for_mode(problem, config.mode, weights)?;
    let grid = problem.grid();
    let adj = adjoint_solve(problem, potential, terminal)?;
    let quad = 0.5 * obs.energy(grid, &adj);
    let lin = problem.c_m() * grid.dot(problem.v0(), &adj.phi[0])
        + problem.epsilon() * grid.dot(problem.ue0(), &adj.phi_e[0]);
    let pen = config.delta * (grid.norm(&terminal.phi_t) + grid.norm(&terminal.phi_et));
    Ok(quad + lin + pen)
}

/// Gradient of the smooth part of [`hum_functional`] with respect to the
/// grid inner product: `(c_m v(T), eps ue(T))` for the run from the problem's
/// initial data under the control `w phi`.
pub fn hum_smooth_gradient(
    problem: &ProblemSpec,
    potential: &PotentialField,
    weights: Option<&WeightSet>,
    config: &HumConfig,
    terminal: &TerminalData,
) -> Result<TerminalData> {
    let obs = Observation::for_mode(problem, config.mode, weights)?;
    let adj = adjoint_solve(problem, potential, terminal)?;
    let f = control_from_adjoint(problem, &obs, &adj)?;
    let traj = forward_relaxed_linear(problem, potential, &f)?;
    Ok(TerminalData::from_stacked(&scaled_terminal(problem, &traj)))
}

/// Synthesized control and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResult {
    pub control: ControlFunction,
    /// Minimizing adjoint terminal data.
    pub terminal: TerminalData,
    pub epsilon: f64,
    pub delta: f64,
    pub mode: HumMode,
    pub control_norm_l2: f64,
    pub control_norm_lq: f64,
    pub q: f64,
    pub terminal_v_norm: f64,
    pub terminal_ue_norm: f64,
    pub bound_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized functional value after each iteration.
    pub functional_history: Vec<f64>,
    pub final_residual: f64,
    pub lipschitz_estimate: f64,
}

impl ControlResult {
    /// Norm used for the bound ratio: L2 in plain mode, Lq in weighted mode.
    pub fn control_norm(&self) -> f64 {
        match self.mode {
            HumMode::Plain => self.control_norm_l2,
            HumMode::Weighted => self.control_norm_lq,
        }
    }

    pub fn terminal_sum(&self) -> f64 {
        self.terminal_v_norm + self.terminal_ue_norm
    }

    pub fn summary(&self) -> ControlSummary {
        ControlSummary {
            epsilon: self.epsilon,
            delta: self.delta,
            mode: self.mode,
            control_norm_l2: self.control_norm_l2,
            control_norm_lq: self.control_norm_lq,
            q: self.q,
            terminal_v_norm: self.terminal_v_norm,
            terminal_ue_norm: self.terminal_ue_norm,
            bound_ratio: self.bound_ratio,
            iterations: self.iterations,
            converged: self.converged,
        }
    }

    fn set_terminal_norms(&mut self, grid: &Grid, traj: &Trajectory) {
        self.terminal_v_norm = grid.norm(traj.terminal_v());
        self.terminal_ue_norm = grid.norm(traj.terminal_ue());
    }
}

/// Flat record written as `control_result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSummary {
    pub epsilon: f64,
    pub delta: f64,
    pub mode: HumMode,
    pub control_norm_l2: f64,
    pub control_norm_lq: f64,
    pub q: f64,
    pub terminal_v_norm: f64,
    pub terminal_ue_norm: f64,
    pub bound_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `|v0| + eps |ue0|`.
pub fn initial_data_size(problem: &ProblemSpec) -> f64 {
    let g = problem.grid();
    g.norm(problem.v0()) + problem.epsilon() * g.norm(problem.ue0())
}

struct FistaOutcome {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
    residual: f64,
    lipschitz: f64,
}

/// Monotone FISTA with function-value restart on
/// `1/2 <G x, x> + <b, x> + delta (|x_v| + |x_e|)`.
fn minimize(
    gram: &Gramian<'_>,
    b: &[f64],
    grid: &Grid,
    config: &HumConfig,
    warm: Option<&[f64]>,
) -> Result<FistaOutcome> {
    let dim = gram.dim();
    let delta = config.delta;
    let objective = |x: &[f64], gx: &[f64]| -> f64 {
        let (nv, ne) = block_norms(grid, x);
        0.5 * stacked_dot(grid, gx, x) + stacked_dot(grid, b, x) + delta * (nv + ne)
    };
    let mut x = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; dim]);
    let mut gx = gram.apply(&x)?;
    let mut fx = objective(&x, &gx);
    let scale = stacked_dot(grid, b, b).sqrt().max(delta);

    let mut lip = gram.power_estimate(config.power_iters, config.seed)?;
    if !(lip.is_finite() && lip > 0.0) {
        lip = 1.0;
    }
    let mut x_prev = x.clone();
    let mut gx_prev = gx.clone();
    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut t = 1.0_f64;
    let mut from_x = true;
    let mut history = vec![fx];
    let mut residual = f64::INFINITY;

    for k in 1..=config.max_iters {
        let (z, gz, d_norm) = loop {
            let step: Vec<f64> = y
                .iter()
                .zip(&gy)
                .zip(b)
                .map(|((yi, gi), bi)| yi - (gi + bi) / lip)
                .collect();
            let z = prox_stacked(grid, &step, delta / lip);
            let gz = gram.apply(&z)?;
            let d: Vec<f64> = z.iter().zip(&y).map(|(a, c)| a - c).collect();
            let gd: Vec<f64> = gz.iter().zip(&gy).map(|(a, c)| a - c).collect();
            let dd = stacked_dot(grid, &d, &d);
            let curvature = stacked_dot(grid, &gd, &d);
            if curvature <= lip * dd * (1.0 + 1e-10) {
                break (z, gz, dd.sqrt());
            }
            lip *= config.backtrack;
        };
        residual = lip * d_norm;
        let fz = objective(&z, &gz);
        // a plain prox-gradient step from x descends in exact arithmetic;
        // accepting it keeps the iteration moving once objective
        // differences drop below round-off
        let improved = fz <= fx || from_x;
        if improved {
            x_prev = std::mem::replace(&mut x, z);
            gx_prev = std::mem::replace(&mut gx, gz);
            fx = fz;
        }
        history.push(fx);
        let stalled = history.len() > config.stall_window
            && residual <= 10.0 * config.tol * scale
            && history[history.len() - 1 - config.stall_window] - fx <= config.ftol * fx.abs();
        if residual <= config.tol * scale || stalled {
            return Ok(FistaOutcome {
                x,
                iterations: k,
                converged: true,
                history,
                residual,
                lipschitz: lip,
            });
        }
        if !improved {
            t = 1.0;
            y.clone_from(&x);
            gy.clone_from(&gx);
            from_x = true;
            continue;
        }
        from_x = false;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..dim {
            y[i] = x[i] + beta * (x[i] - x_prev[i]);
            gy[i] = gx[i] + beta * (gx[i] - gx_prev[i]);
        }
        t = t_next;
    }
    Ok(FistaOutcome {
        x,
        iterations: config.max_iters,
        converged: false,
        history,
        residual,
        lipschitz: lip,
    })
}

/// Minimizes the penalized functional and extracts the control `w phi` on
/// `omega`. A run that exhausts `max_iters` returns its best iterate with
/// `converged = false`.
pub fn synthesize_control(
    problem: &ProblemSpec,
    potential: &PotentialField,
    weights: Option<&WeightSet>,
    config: &HumConfig,
) -> Result<ControlResult> {
    synthesize_control_from(problem, potential, weights, config, None)
}

/// As [`synthesize_control`], starting the iteration at `warm`.
pub fn synthesize_control_from(
    problem: &ProblemSpec,
    potential: &PotentialField,
    weights: Option<&WeightSet>,
    config: &HumConfig,
    warm: Option<&TerminalData>,
) -> Result<ControlResult> {
    config.validate()?;
    let obs = Observation::for_mode(problem, config.mode, weights)?;
    let grid = problem.grid();
    let gram = Gramian::new(problem, potential, &obs, config.dense_limit)?;
    let b = free_terminal(problem, potential)?;
    let warm_vec = warm.map(|w| w.to_vec());
    let out = minimize(&gram, &b, grid, config, warm_vec.as_deref())?;

    let terminal = TerminalData::from_stacked(&out.x);
    let adj = adjoint_solve(problem, potential, &terminal)?;
    let control = control_from_adjoint(problem, &obs, &adj)?;
    let dt = problem.dt();
    let control_norm_l2 = control.l2_norm(grid, dt);
    let control_norm_lq = control.lq_norm(grid, dt, config.q);
    let mut result = ControlResult {
        epsilon: problem.epsilon(),
        delta: config.delta,
        mode: config.mode,
        control_norm_l2,
        control_norm_lq,
        q: config.q,
        terminal_v_norm: 0.0,
        terminal_ue_norm: 0.0,
        bound_ratio: 0.0,
        iterations: out.iterations,
        converged: out.converged,
        functional_history: out.history,
        final_residual: out.residual,
        lipschitz_estimate: out.lipschitz,
        control,
        terminal,
    };
    result.bound_ratio = bound_ratio(result.control_norm(), initial_data_size(problem));
    let traj = forward_relaxed_linear(problem, potential, &result.control)?;
    result.set_terminal_norms(grid, &traj);
    Ok(result)
}

fn bound_ratio(norm: f64, data: f64) -> f64 {
    if data > 0.0 {
        norm / data
    } else {
        0.0
    }
}

/// Starting point of the fixed-point loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointStart {
    /// `z_0 = 0`.
    #[default]
    Zero,
    /// `z_0` is the uncontrolled nonlinear trajectory.
    Uncontrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Relative `L2(Q)` distance between consecutive iterates.
    pub tol: f64,
    pub max_outer: usize,
    /// Bound on `|v0|_inf` required by the cubic loop.
    pub gamma: f64,
    pub start: FixedPointStart,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-8,
            max_outer: 50,
            gamma: 0.1,
            start: FixedPointStart::Zero,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) || self.max_outer == 0 {
            return Err(Error::InvalidArgument(
                "fixed point needs tol > 0 and max_outer >= 1".into(),
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Result of a fixed-point control loop. `control.terminal_*_norm` come from
/// the nonlinear validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearControlResult {
    pub control: ControlResult,
    pub outer_iterations: usize,
    pub outer_converged: bool,
    /// Relative distance between consecutive iterates.
    pub distance_history: Vec<f64>,
    /// Terminal norms of the last linearized run.
    pub linear_terminal_v_norm: f64,
    pub linear_terminal_ue_norm: f64,
    pub validation: Trajectory,
}

fn fixed_point_loop(
    problem: &ProblemSpec,
    reaction: &Reaction,
    weights: Option<&WeightSet>,
    config: &HumConfig,
    fp: &FixedPointConfig,
    linearize: impl Fn(f64) -> f64,
) -> Result<NonlinearControlResult> {
    config.validate()?;
    fp.validate()?;
    reaction.validate()?;
    let grid = problem.grid();
    let dt = problem.dt();
    let mut z: Vec<Vec<f64>> = match fp.start {
        FixedPointStart::Zero => vec![vec![0.0; grid.len()]; problem.n_steps() + 1],
        FixedPointStart::Uncontrolled => {
            forward_relaxed_nonlinear(problem, reaction, &ControlFunction::zero(problem))?.v
        }
    };
    let mut potential = PotentialField::from_trajectory(&z, &linearize)?;
    let mut warm: Option<TerminalData> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut last = None;
    for k in 1..=fp.max_outer {
        let result = synthesize_control_from(problem, &potential, weights, config, warm.as_ref())?;
        let traj = forward_relaxed_linear(problem, &potential, &result.control)?;
        let next = PotentialField::from_trajectory(&traj.v, &linearize)?;
        let diff: Vec<Vec<f64>> = traj.v[1..]
            .iter()
            .zip(&z[1..])
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let denom = traj.v_l2(grid).max(f64::MIN_POSITIVE);
        let dist = space_time_l2(grid, dt, &diff) / denom;
        history.push(dist);
        // identical potential means the next linear problem is this one
        let done = next == potential || dist <= fp.tol;
        warm = Some(result.terminal.clone());
        z = traj.v.clone();
        last = Some((k, result, traj));
        if done {
            converged = true;
            break;
        }
        potential = next;
    }
    let (outer, mut result, lin_traj) = last.expect("at least one outer iteration");
    let validation = forward_relaxed_nonlinear(problem, reaction, &result.control)?;
    let linear_terminal_v_norm = grid.norm(lin_traj.terminal_v());
    let linear_terminal_ue_norm = grid.norm(lin_traj.terminal_ue());
    result.set_terminal_norms(grid, &validation);
    result.converged = result.converged && converged;
    Ok(NonlinearControlResult {
        control: result,
        outer_iterations: outer,
        outer_converged: converged,
        distance_history: history,
        linear_terminal_v_norm,
        linear_terminal_ue_norm,
        validation,
    })
}

/// Picard iteration `z -> v[z]` for a globally Lipschitz reaction, where
/// `v[z]` is the controlled solution of the system linearized with the secant
/// slope `h(z)/z`.
pub fn nonlinear_control_lipschitz(
    problem: &ProblemSpec,
    reaction: &Reaction,
    config: &HumConfig,
    fp: &FixedPointConfig,
) -> Result<NonlinearControlResult> {
    if !matches!(reaction, Reaction::Lipschitz { .. } | Reaction::None) {
        return Err(Error::InvalidArgument(
            "the Lipschitz loop needs a lipschitz or none reaction".into(),
        ));
    }
    let mut cfg = config.clone();
    cfg.mode = HumMode::Plain;
    let r = *reaction;
    fixed_point_loop(problem, reaction, None, &cfg, fp, move |s| r.secant(s))
}

/// Fixed-point loop for the cubic reaction with the weighted functional and
/// the averaged slope `int_0^1 h'(s z) ds`. Requires `|v0|_inf <= gamma`.
pub fn nonlinear_control_cubic(
    problem: &ProblemSpec,
    reaction: &Reaction,
    weights: &WeightSet,
    config: &HumConfig,
    fp: &FixedPointConfig,
) -> Result<NonlinearControlResult> {
    if !matches!(reaction, Reaction::Cubic { .. }) {
        return Err(Error::InvalidArgument("the cubic loop needs a cubic reaction".into()));
    }
    let sup = problem.v0().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if sup > fp.gamma {
        return Err(Error::InvalidArgument(format!(
            "|v0|_inf = {sup} exceeds the smallness bound gamma = {}",
            fp.gamma
        )));
    }
    let mut cfg = config.clone();
    cfg.mode = HumMode::Weighted;
    let r = *reaction;
    fixed_point_loop(problem, reaction, Some(weights), &cfg, fp, move |s| r.integral_slope(s))
}
