//! Experiment harness around the control pipeline: observability constants,
//! weighted-inequality certificates and relaxation sweeps.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{DiffusionOperator, Grid, DENSE_LIMIT};
use crate::dynamics::{adjoint_solve, forward_linear_from, ControlFunction, TerminalData};
use crate::error::{Error, Result};
use crate::hum::{synthesize_control, Gramian, HumConfig, HumMode, Observation};
use crate::model::{PotentialField, ProblemSpec};
use crate::weights::WeightSet;

/// Stated in every report that carries certificate values.
pub const CERTIFICATE_NOTE: &str =
    "certificate ratios are empirical diagnostics on sampled data, not verifications of the inequalities";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilityOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Relative size of the diagonal shift added to the Gramian.
    pub shift: f64,
    /// Probe vectors used for the trace estimate.
    pub trace_probes: usize,
    /// Dense assembly and factorization below this many unknowns.
    pub dense_limit: usize,
    /// Tolerance of the inner conjugate-gradient solves.
    pub cg_tol: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ObservabilityOptions {
    fn default() -> Self {
        ObservabilityOptions {
            tol: 1e-13,
            max_iters: 20_000,
            shift: 1e-12,
            trace_probes: 8,
            dense_limit: DENSE_LIMIT,
            cg_tol: 1e-12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityEstimate {
    /// Largest `(|phi(0)|^2 + eps |phi_e(0)|^2) / sum dt |phi|^2_omega`.
    pub c_obs: f64,
    pub iterations: usize,
    pub shift: f64,
    pub trace_estimate: f64,
}

/// `B xi = (c_m v(T), eps ue(T))` for the uncontrolled run from
/// `(phi(0)/c_m, phi_e(0))`, so that `<B xi, xi> = |phi(0)|^2 + eps |phi_e(0)|^2`.
fn apply_initial_energy(problem: &ProblemSpec, potential: &PotentialField, x: &[f64]) -> Result<Vec<f64>> {
    let adj = adjoint_solve(problem, potential, &TerminalData::from_stacked(x))?;
    let v0: Vec<f64> = adj.phi[0].iter().map(|p| p / problem.c_m()).collect();
    let traj = forward_linear_from(problem, potential, &ControlFunction::zero(problem), &v0, &adj.phi_e[0])?;
    let mut out: Vec<f64> = traj.terminal_v().iter().map(|v| problem.c_m() * v).collect();
    out.extend(traj.terminal_ue().iter().map(|u| problem.epsilon() * u));
    Ok(out)
}

fn raw_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on `(G + sigma I) y = r` with a fallible operator.
fn shifted_cg(gram: &Gramian<'_>, sigma: f64, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = rhs.len();
    let bnorm = raw_dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = raw_dot(&r, &r);
    for _ in 0..max_iter {
        let mut ap = gram.apply(&p)?;
        ap.iter_mut().zip(&p).for_each(|(a, pi)| *a += sigma * pi);
        let alpha = rr / raw_dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = raw_dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Dense factors of the pencil in raw terminal coordinates: `O` with
/// `|O xi|^2 = sum dt |phi|^2_omega` and `P` with
/// `|P xi|^2 = |phi(0)|^2 + eps |phi_e(0)|^2`, one adjoint run per column.
fn pencil_factors(problem: &ProblemSpec, potential: &PotentialField) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let grid = problem.grid();
    let n = grid.len();
    let h = grid.cell_volume();
    let observed: Vec<usize> = (0..n).filter(|&i| problem.omega()[i]).collect();
    let steps = problem.n_steps();
    let (w_obs, w_v, w_e) = ((problem.dt() * h).sqrt(), h.sqrt(), (problem.epsilon() * h).sqrt());
    let mut o = DMatrix::zeros(steps * observed.len(), 2 * n);
    let mut p = DMatrix::zeros(2 * n, 2 * n);
    let mut e = vec![0.0; 2 * n];
    for j in 0..2 * n {
        e[j] = 1.0;
        let adj = adjoint_solve(problem, potential, &TerminalData::from_stacked(&e))?;
        e[j] = 0.0;
        for (k, phi) in adj.observed().iter().enumerate() {
            for (r, &i) in observed.iter().enumerate() {
                o[(k * observed.len() + r, j)] = w_obs * phi[i];
            }
        }
        for i in 0..n {
            p[(i, j)] = w_v * adj.phi[0][i];
            p[(n + i, j)] = w_e * adj.phi_e[0][i];
        }
    }
    Ok((o, p))
}

/// Largest eigenvalue of `(P^T P, O^T O + h sigma I)` from a QR
/// factorization of the stacked matrix `[O; sqrt(h sigma) I]`, which avoids
/// forming `O^T O` and keeps near-null directions accurate.
fn dense_observability(
    problem: &ProblemSpec,
    potential: &PotentialField,
    opts: &ObservabilityOptions,
) -> Result<ObservabilityEstimate> {
    let (o, p) = pencil_factors(problem, potential)?;
    let h = problem.grid().cell_volume();
    let dim = o.ncols();
    let trace_estimate = o.norm_squared() / h;
    let sigma = opts.shift * trace_estimate;
    let mut stacked = DMatrix::zeros(o.nrows() + dim, dim);
    stacked.view_mut((0, 0), (o.nrows(), dim)).copy_from(&o);
    stacked
        .view_mut((o.nrows(), 0), (dim, dim))
        .fill_diagonal((h * sigma).sqrt());
    let r = stacked.qr().r();
    // (P R^{-1})^T = R^{-T} P^T
    let m = r
        .transpose()
        .solve_lower_triangular(&p.transpose())
        .ok_or(Error::NotPositiveDefinite { row: 0, pivot: sigma })?;
    let top = m.singular_values().max();
    Ok(ObservabilityEstimate {
        c_obs: top * top,
        iterations: 0,
        shift: sigma,
        trace_estimate,
    })
}

/// Largest generalized eigenvalue of the pencil (initial energy, observed
/// energy) over adjoint terminal data. Small problems use dense factors;
/// larger ones run inverse power iteration on `(G + sigma I)^{-1} B` with
/// conjugate-gradient solves.
pub fn estimate_observability_constant(
    problem: &ProblemSpec,
    potential: &PotentialField,
    opts: &ObservabilityOptions,
) -> Result<ObservabilityEstimate> {
    if 2 * problem.grid().len() <= opts.dense_limit {
        return dense_observability(problem, potential, opts);
    }
    let obs = Observation::plain(problem);
    let gram = Gramian::matrix_free(problem, potential, &obs);
    let dim = gram.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace_estimate = 0.0;
    for _ in 0..opts.trace_probes.max(1) {
        let z: Vec<f64> = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        trace_estimate += raw_dot(&gram.apply(&z)?, &z);
    }
    trace_estimate /= opts.trace_probes.max(1) as f64;
    let sigma = opts.shift * trace_estimate.abs();
    let solve = |rhs: &[f64]| shifted_cg(&gram, sigma, rhs, opts.cg_tol, 10 * dim);

    let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rayleigh = 0.0_f64;
    for k in 1..=opts.max_iters {
        let nx = raw_dot(&x, &x).sqrt();
        if nx == 0.0 {
            return Ok(ObservabilityEstimate {
                c_obs: 0.0,
                iterations: k,
                shift: sigma,
                trace_estimate,
            });
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let bx = apply_initial_energy(problem, potential, &x)?;
        let y = solve(&bx)?;
        // Rayleigh quotient <Bx,x> / <(G+sigma)x,x> evaluated at y
        let by = apply_initial_energy(problem, potential, &y)?;
        let num = raw_dot(&by, &y);
        let den = raw_dot(&bx, &y); // <(G+sigma) y, y> = <Bx, y>
        let next = if den > 0.0 { num / den } else { 0.0 };
        let change = (next - rayleigh).abs();
        rayleigh = next;
        x = y;
        if k > 1 && change <= opts.tol * rayleigh.abs() {
            return Ok(ObservabilityEstimate {
                c_obs: rayleigh,
                iterations: k,
                shift: sigma,
                trace_estimate,
            });
        }
    }
    Err(Error::PowerIterationNotConverged {
        iterations: opts.max_iters,
        rayleigh,
    })
}

/// Which conductivity defines `rho = div(M grad phi_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RhoVariant {
    /// Total conductivity `M = M_i + M_e`.
    Total,
    /// Intracellular conductivity `M_i`.
    Intracellular,
}

impl RhoVariant {
    fn operator<'a>(&self, problem: &'a ProblemSpec) -> &'a DiffusionOperator {
        match self {
            RhoVariant::Total => problem.op_m(),
            RhoVariant::Intracellular => problem.op_i(),
        }
    }
}

/// Log-domain accumulator for sums of nonnegative terms `exp(l_k)`.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    /// Adds `exp(log_weight) * value` for `value >= 0`.
    fn add(&mut self, log_weight: f64, value: f64) {
        if value <= 0.0 || log_weight == f64::NEG_INFINITY {
            return;
        }
        let l = log_weight + value.ln();
        if l > self.max {
            self.scaled = self.scaled * (self.max - l).exp() + 1.0;
            self.max = l;
        } else {
            self.scaled += (l - self.max).exp();
        }
    }

    fn ln(&self) -> f64 {
        if self.scaled == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// One side pair of a weighted inequality with values kept in log form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateSides {
    /// Natural log of the left side (`-inf` when it vanishes).
    pub ln_lhs: f64,
    /// Natural log of the right side without its unknown constant.
    pub ln_rhs: f64,
}

impl CertificateSides {
    pub fn lhs(&self) -> f64 {
        self.ln_lhs.exp()
    }

    pub fn rhs(&self) -> f64 {
        self.ln_rhs.exp()
    }

    /// `lhs / rhs`, or `None` when the right side vanishes.
    pub fn ratio(&self) -> Option<f64> {
        if self.ln_rhs == f64::NEG_INFINITY {
            None
        } else {
            Some((self.ln_lhs - self.ln_rhs).exp())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanCertificate {
    pub total: CertificateSides,
    pub intracellular: CertificateSides,
}

impl CarlemanCertificate {
    pub fn variant(&self, v: RhoVariant) -> &CertificateSides {
        match v {
            RhoVariant::Total => &self.total,
            RhoVariant::Intracellular => &self.intracellular,
        }
    }
}

/// Both sides of the weighted observability inequality
///
/// ```text
/// sum e^{3 s alpha} |rho|^2 + s^3 lambda^4 sum phi^3 e^{3 s alpha} |phi|^2
///     <= C e^{6 lambda |psi|} s^7 lambda^4 sum_omega phi^8 e^{2 s alpha} |phi|^2
/// ```
///
/// on the adjoint solution, with midpoint-in-time quadrature.
pub fn carleman_certificate(
    problem: &ProblemSpec,
    potential: &PotentialField,
    weights: &WeightSet,
    terminal: &TerminalData,
) -> Result<CarlemanCertificate> {
    let adj = adjoint_solve(problem, potential, terminal)?;
    let grid = problem.grid();
    let ln_cell = (problem.dt() * grid.cell_volume()).ln();
    let (s, l) = (weights.s(), weights.lambda());
    let ln_phi_coef = 3.0 * s.ln() + 4.0 * l.ln();
    let ln_rhs_coef = 6.0 * l * weights.psi_norm() + 7.0 * s.ln() + 4.0 * l.ln();
    let psi = &weights.psi().values;
    let omega = problem.omega();

    let mut phi_part = LogSum::new();
    let mut rhs = LogSum::new();
    let mut rho_parts = [LogSum::new(), LogSum::new()];
    let variants = [RhoVariant::Total, RhoVariant::Intracellular];
    for n in 0..problem.n_steps() {
        let t = problem.mid_time(n);
        let phi = &adj.phi[n];
        let rhos: Vec<Vec<f64>> = variants
            .iter()
            .map(|v| v.operator(problem).apply(&adj.phi_e[n]))
            .collect();
        for i in 0..grid.len() {
            let e3 = weights.log_power_weight(psi[i], t, 0.0, 0.0, 3.0);
            for (acc, rho) in rho_parts.iter_mut().zip(&rhos) {
                acc.add(ln_cell + e3, rho[i] * rho[i]);
            }
            phi_part.add(
                ln_cell + ln_phi_coef + weights.log_power_weight(psi[i], t, 0.0, 3.0, 3.0),
                phi[i] * phi[i],
            );
            if omega[i] {
                rhs.add(
                    ln_cell + ln_rhs_coef + weights.log_power_weight(psi[i], t, 0.0, 8.0, 2.0),
                    phi[i] * phi[i],
                );
            }
        }
    }
    let combine = |a: &LogSum| {
        let (x, y) = (a.ln(), phi_part.ln());
        let m = x.max(y);
        if m == f64::NEG_INFINITY {
            m
        } else {
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
    };
    let ln_rhs = rhs.ln();
    Ok(CarlemanCertificate {
        total: CertificateSides {
            ln_lhs: combine(&rho_parts[0]),
            ln_rhs,
        },
        intracellular: CertificateSides {
            ln_lhs: combine(&rho_parts[1]),
            ln_rhs,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCertificate {
    pub epsilon: f64,
    /// `lhs` against the full right side `eps^2 e^{4 lambda |psi|} sum s^3 phi^4 e^{2 s alpha} |rho|^2`.
    pub total: CertificateSides,
    pub intracellular: CertificateSides,
}

impl EnergyCertificate {
    pub fn variant(&self, v: RhoVariant) -> &CertificateSides {
        match v {
            RhoVariant::Total => &self.total,
            RhoVariant::Intracellular => &self.intracellular,
        }
    }

    /// `lhs / (rhs / eps^2)`: the ratio with the `eps^2` factor removed.
    pub fn ratio_without_epsilon(&self, v: RhoVariant) -> Option<f64> {
        self.variant(v).ratio().map(|r| r * self.epsilon * self.epsilon)
    }
}

/// Both sides of `sum e^{3 s alpha*} |rho|^2 <= C eps^2 e^{4 lambda |psi|} sum s^3 phi^4 e^{2 s alpha} |rho|^2`.
pub fn energy_certificate(
    problem: &ProblemSpec,
    weights: &WeightSet,
    terminal: &TerminalData,
) -> Result<EnergyCertificate> {
    // rho depends on phi_e only, which does not see the potential
    let adj = adjoint_solve(problem, &PotentialField::Zero, terminal)?;
    let grid = problem.grid();
    let ln_cell = (problem.dt() * grid.cell_volume()).ln();
    let eps = problem.epsilon();
    let ln_pref = 2.0 * eps.ln() + 4.0 * weights.lambda() * weights.psi_norm();
    let psi = &weights.psi().values;
    let mut sides = Vec::new();
    for v in [RhoVariant::Total, RhoVariant::Intracellular] {
        let (mut lhs, mut core) = (LogSum::new(), LogSum::new());
        for n in 0..problem.n_steps() {
            let t = problem.mid_time(n);
            let rho = v.operator(problem).apply(&adj.phi_e[n]);
            let star = weights.log_star_weight(t, 0.0, 0.0, 3.0);
            for i in 0..grid.len() {
                let r2 = rho[i] * rho[i];
                lhs.add(ln_cell + star, r2);
                core.add(ln_cell + weights.log_power_weight(psi[i], t, 3.0, 4.0, 2.0), r2);
            }
        }
        let ln_core = core.ln();
        sides.push(CertificateSides {
            ln_lhs: lhs.ln(),
            ln_rhs: if ln_core == f64::NEG_INFINITY {
                ln_core
            } else {
                ln_pref + ln_core
            },
        });
    }
    Ok(EnergyCertificate {
        epsilon: eps,
        total: sides[0],
        intracellular: sides[1],
    })
}

/// Terminal data with independent standard normal nodal values.
pub fn random_terminal(grid: &Grid, seed: u64) -> TerminalData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect() };
    let phi_t = draw();
    let phi_et = draw();
    TerminalData { phi_t, phi_et }
}

/// Parameters of the weights used by the certificates and weighted mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightParams {
    pub m: f64,
    pub s0: f64,
    /// Critical point of the profile; defaults to the center of `omega`.
    pub center: Option<Vec<f64>>,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            m: 2.0,
            s0: 1.0,
            center: None,
        }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m.is_finite() && self.m > 1.0) {
            return Err(Error::InvalidArgument(format!("m = {} must satisfy m > 1", self.m)));
        }
        if !(self.s0.is_finite() && self.s0 > 0.0) {
            return Err(Error::InvalidArgument(format!("s0 = {} must be positive", self.s0)));
        }
        Ok(())
    }

    pub fn build(&self, problem: &ProblemSpec, a_inf_norm: f64) -> Result<WeightSet> {
        self.validate()?;
        let center = self.center.clone().unwrap_or_else(|| problem.omega_region().center());
        WeightSet::auto(problem.grid(), &center, self.m, problem.horizon(), a_inf_norm, self.s0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub hum: HumConfig,
    pub observability: ObservabilityOptions,
    pub weights: WeightParams,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub with_observability: bool,
    pub with_certificates: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            hum: HumConfig::default(),
            observability: ObservabilityOptions::default(),
            weights: WeightParams::default(),
            seed: 0,
            jobs: 1,
            with_observability: true,
            with_certificates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub control_norm: f64,
    pub bound_ratio: f64,
    pub term_v: f64,
    pub term_ue: f64,
    pub c_obs: f64,
    #[serde(rename = "carleman_ratio_M")]
    pub carleman_ratio_m: f64,
    #[serde(rename = "carleman_ratio_Mi")]
    pub carleman_ratio_mi: f64,
    pub dist_to_limit: f64,
    pub converged: bool,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub dim: usize,
    pub extents: Vec<f64>,
    pub n_cells: Vec<usize>,
    pub horizon: f64,
    pub n_steps: usize,
    pub delta: f64,
    pub mode: HumMode,
    pub lambda: f64,
    pub s: f64,
    pub m: f64,
    pub seed: u64,
    pub limit_control_norm: f64,
    pub certificate_probe: String,
    pub note: String,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub metadata: SweepMetadata,
}

/// Least-squares slope of `ln y` against `ln(1/eps)` over rows with
/// `eps > 0`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(e, y)| *e > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(e, y)| ((1.0 / e).ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > 0.0 {
        hi / lo
    } else if hi == lo {
        1.0
    } else {
        f64::INFINITY
    }
}

impl SweepReport {
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }

    pub fn bound_ratio_spread(&self) -> f64 {
        spread(self.rows.iter().map(|r| r.bound_ratio))
    }

    pub fn control_norm_slope(&self) -> Option<f64> {
        loglog_slope(
            &self
                .rows
                .iter()
                .map(|r| (r.epsilon, r.control_norm))
                .collect::<Vec<_>>(),
        )
    }

    pub fn c_obs_slope(&self) -> Option<f64> {
        loglog_slope(&self.rows.iter().map(|r| (r.epsilon, r.c_obs)).collect::<Vec<_>>())
    }

    pub fn carleman_spread(&self, variant: RhoVariant) -> f64 {
        spread(self.rows.iter().map(|r| match variant {
            RhoVariant::Total => r.carleman_ratio_m,
            RhoVariant::Intracellular => r.carleman_ratio_mi,
        }))
    }

    /// Whether the distance to the limit control does not grow as `eps`
    /// decreases, allowing relative growth `rel` and absolute growth
    /// `floor * |f^0|`.
    pub fn distance_non_increasing(&self, rel: f64, floor: f64) -> bool {
        let abs = floor * self.metadata.limit_control_norm;
        self.rows
            .windows(2)
            .all(|w| w[1].dist_to_limit <= w[0].dist_to_limit * (1.0 + rel) + abs)
    }
}

fn failed_row(eps: f64, err: &Error) -> SweepRow {
    SweepRow {
        epsilon: eps,
        control_norm: f64::NAN,
        bound_ratio: f64::NAN,
        term_v: f64::NAN,
        term_ue: f64::NAN,
        c_obs: f64::NAN,
        carleman_ratio_m: f64::NAN,
        carleman_ratio_mi: f64::NAN,
        dist_to_limit: f64::NAN,
        converged: false,
        error: Some(err.to_string()),
    }
}

struct RowOutcome {
    row: SweepRow,
    control: Option<ControlFunction>,
}

fn sweep_row(
    template: &ProblemSpec,
    potential: &PotentialField,
    eps: f64,
    config: &SweepConfig,
    weights: &WeightSet,
    probe: &TerminalData,
) -> RowOutcome {
    let run = || -> Result<(SweepRow, ControlFunction)> {
        let problem = template.with_epsilon(eps)?;
        let mut hum = config.hum.clone();
        hum.seed = config.seed;
        let w = (hum.mode == HumMode::Weighted).then_some(weights);
        let res = synthesize_control(&problem, potential, w, &hum)?;
        let mut converged = res.converged;
        let c_obs = if config.with_observability {
            let mut o = config.observability.clone();
            o.seed = config.seed;
            match estimate_observability_constant(&problem, potential, &o) {
                Ok(e) => e.c_obs,
                Err(e) if e.is_non_convergence() => {
                    converged = false;
                    f64::NAN
                }
                Err(e) => return Err(e),
            }
        } else {
            f64::NAN
        };
        let (cm, cmi) = if config.with_certificates {
            let c = carleman_certificate(&problem, potential, weights, probe)?;
            (
                c.total.ratio().unwrap_or(f64::NAN),
                c.intracellular.ratio().unwrap_or(f64::NAN),
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok((
            SweepRow {
                epsilon: eps,
                control_norm: res.control_norm(),
                bound_ratio: res.bound_ratio,
                term_v: res.terminal_v_norm,
                term_ue: res.terminal_ue_norm,
                c_obs,
                carleman_ratio_m: cm,
                carleman_ratio_mi: cmi,
                dist_to_limit: f64::NAN,
                converged,
                error: None,
            },
            res.control,
        ))
    };
    match run() {
        Ok((row, control)) => RowOutcome {
            row,
            control: Some(control),
        },
        Err(e) => RowOutcome {
            row: failed_row(eps, &e),
            control: None,
        },
    }
}

/// Runs the control synthesis (plus observability and certificate
/// diagnostics) for each `eps`, and measures the distance of every control to
/// the `eps = 0` control. Failed rows are kept with `converged = false`.
pub fn epsilon_sweep(
    template: &ProblemSpec,
    potential: &PotentialField,
    config: &SweepConfig,
    eps_list: &[f64],
) -> Result<SweepReport> {
    if eps_list.is_empty() {
        return Err(Error::InvalidArgument("epsilon list is empty".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(
            "epsilon list must be strictly decreasing".into(),
        ));
    }
    if eps_list.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument(
            "epsilon values must be finite and nonnegative".into(),
        ));
    }
    config.hum.validate()?;
    let weights = config.weights.build(template, potential.inf_norm())?;
    let probe = random_terminal(template.grid(), config.seed);

    let mut list = eps_list.to_vec();
    let has_limit = *list.last().expect("nonempty") == 0.0;
    if !has_limit {
        list.push(0.0);
    }
    let job = |eps: &f64| sweep_row(template, potential, *eps, config, &weights, &probe);
    let mut outcomes: Vec<RowOutcome> = if config.jobs == 1 {
        list.iter().map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| list.par_iter().map(job).collect())
    };

    let limit = outcomes.last().and_then(|o| o.control.clone());
    let grid = template.grid();
    let dt = template.dt();
    let limit_norm = limit.as_ref().map(|f| f.l2_norm(grid, dt)).unwrap_or(f64::NAN);
    for o in &mut outcomes {
        if let (Some(f), Some(f0)) = (&o.control, &limit) {
            o.row.dist_to_limit = f.distance(f0, grid, dt);
        } else if o.row.error.is_none() {
            o.row.converged = false;
        }
    }
    if !has_limit {
        outcomes.pop();
    }
    let rows: Vec<SweepRow> = outcomes.into_iter().map(|o| o.row).collect();
    let failures = rows
        .iter()
        .filter(|r| !r.converged)
        .map(|r| match &r.error {
            Some(e) => format!("epsilon {:e}: {e}", r.epsilon),
            None => format!("epsilon {:e}: not converged", r.epsilon),
        })
        .collect();
    Ok(SweepReport {
        rows,
        metadata: SweepMetadata {
            dim: grid.dim(),
            extents: grid.extents().to_vec(),
            n_cells: grid.n_cells().to_vec(),
            horizon: template.horizon(),
            n_steps: template.n_steps(),
            delta: config.hum.delta,
            mode: config.hum.mode,
            lambda: weights.lambda(),
            s: weights.s(),
            m: weights.m(),
            seed: config.seed,
            limit_control_norm: limit_norm,
            certificate_probe: format!("standard normal nodal terminal data, seed {}", config.seed),
            note: CERTIFICATE_NOTE.to_string(),
            failures,
        },
    })
}
