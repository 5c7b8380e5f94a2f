//! Carleman weights `phi`, `alpha`, `phi*`, `alpha*` built on an auxiliary
//! profile `psi` that vanishes on the boundary and peaks inside the control
//! window.

use serde::{Deserialize, Serialize};

use crate::discretize::Grid;
use crate::error::{Error, Result};

/// Geometric search range for `lambda * ||psi||` in [`choose_lambda`].
const LAMBDA_SEARCH_MIN: f64 = 1e-3;
const LAMBDA_SEARCH_MAX: f64 = 1e6;
const LAMBDA_SEARCH_RATIO: f64 = 1.044_273_782_427_413_8; // 2^(1/16)

/// Nodal values of the auxiliary profile together with its sup norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Psi {
    pub values: Vec<f64>,
    /// Analytic maximum of the profile (attained at `center`).
    pub norm: f64,
    pub center: Vec<f64>,
}

fn axis_profile(x: f64, length: f64, center: f64) -> f64 {
    // sigma = (x/L)^r hits 1/2 at the center; reflecting keeps r >= 1
    let (y, c) = if center >= 0.5 * length {
        (x, center)
    } else {
        (length - x, length - center)
    };
    let r = 0.5_f64.ln() / (c / length).ln();
    let sigma = (y / length).max(0.0).powf(r);
    sigma * (1.0 - sigma)
}

/// Positive profile with a single critical point at `center`, zero on the
/// boundary. In 1D with the center at mid-domain this is `x(1-x)/L^2`.
pub fn build_psi(grid: &Grid, center: &[f64]) -> Result<Psi> {
    if center.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: center.len(),
        });
    }
    for (c, l) in center.iter().zip(grid.extents()) {
        if !(c.is_finite() && *c > 0.0 && c < l) {
            return Err(Error::InvalidArgument(format!(
                "profile center {c} must lie strictly inside (0, {l})"
            )));
        }
    }
    let values = grid.sample(|p| {
        (0..grid.dim())
            .map(|a| axis_profile(p[a], grid.extents()[a], center[a]))
            .product()
    });
    Ok(Psi {
        values,
        norm: 0.25_f64.powi(grid.dim() as i32),
        center: center.to_vec(),
    })
}

/// Euclidean norm of the central-difference gradient of `psi` at every node,
/// with the boundary value 0 on the outside.
pub fn psi_gradient_norms(grid: &Grid, psi: &[f64]) -> Vec<f64> {
    let n = grid.n_cells();
    (0..grid.len())
        .map(|idx| {
            let ij = grid.multi_index(idx);
            let mut sq = 0.0;
            for axis in 0..grid.dim() {
                let stride = if axis == 0 { 1 } else { n[0] };
                let k = ij[axis];
                let lo = if k == 0 { 0.0 } else { psi[idx - stride] };
                let hi = if k + 1 == n[axis] { 0.0 } else { psi[idx + stride] };
                let d = (hi - lo) / (2.0 * grid.spacing()[axis]);
                sq += d * d;
            }
            sq.sqrt()
        })
        .collect()
}

/// Weight values at one space-time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightValues {
    pub phi: f64,
    pub alpha: f64,
    pub phi_star: f64,
    pub alpha_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    psi: Psi,
    lambda: f64,
    s: f64,
    m: f64,
    horizon: f64,
}

impl WeightSet {
    pub fn new(psi: Psi, lambda: f64, s: f64, m: f64, horizon: f64) -> Result<Self> {
        if !(m.is_finite() && m > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "weight exponent m = {m} must satisfy m > 1"
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda = {lambda} must be positive")));
        }
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidArgument(format!("s = {s} must be positive")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
        }
        if psi.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("psi must be positive at interior nodes".into()));
        }
        Ok(WeightSet {
            psi,
            lambda,
            s,
            m,
            horizon,
        })
    }

    /// Profile centered at `center`, smallest admissible `lambda` and
    /// `s` from [`choose_s`].
    pub fn auto(grid: &Grid, center: &[f64], m: f64, horizon: f64, a_inf_norm: f64, s0: f64) -> Result<Self> {
        let psi = build_psi(grid, center)?;
        let lambda = choose_lambda(&psi, m)?;
        let s = choose_s(horizon, a_inf_norm, s0)?;
        Self::new(psi, lambda, s, m, horizon)
    }

    pub fn psi(&self) -> &Psi {
        &self.psi
    }

    pub fn psi_norm(&self) -> f64 {
        self.psi.norm
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.psi.clone(), lambda, self.s, self.m, self.horizon)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t > 0.0 && t < self.horizon {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "weights are singular at t = {t}; need 0 < t < {}",
                self.horizon
            )))
        }
    }

    /// `1 / (t (T - t))`.
    fn time_factor(&self, t: f64) -> f64 {
        1.0 / (t * (self.horizon - t))
    }

    /// Weights for an arbitrary profile value (0 gives the boundary).
    pub fn at_psi(&self, psi: f64, t: f64) -> Result<WeightValues> {
        self.check_time(t)?;
        let (l, p, m) = (self.lambda, self.psi.norm, self.m);
        let theta = self.time_factor(t);
        let top = (2.0 * l * m * p).exp();
        let here = (l * (psi + m * p)).exp();
        Ok(WeightValues {
            phi: here * theta,
            alpha: (here - top) * theta,
            phi_star: (l * m * p).exp() * theta,
            alpha_star: ((l * (m + 1.0) * p).exp() - top) * theta,
        })
    }

    /// `d/dt alpha*(t)` in closed form.
    pub fn alpha_star_dt(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let (l, p, m) = (self.lambda, self.psi.norm, self.m);
        let theta = self.time_factor(t);
        let c = (l * (m + 1.0) * p).exp() - (2.0 * l * m * p).exp();
        Ok(-c * (self.horizon - 2.0 * t) * theta * theta)
    }

    /// `ln phi(x, t)` and `alpha(x, t)` for a profile value; used to form
    /// products of powers without overflow.
    fn log_phi_alpha(&self, psi: f64, t: f64) -> (f64, f64) {
        let (l, p, m) = (self.lambda, self.psi.norm, self.m);
        let theta = self.time_factor(t);
        let e = l * (psi + m * p);
        (e - theta.recip().ln(), (e.exp() - (2.0 * l * m * p).exp()) * theta)
    }

    /// `ln(s^a phi^b exp(c s alpha))` at `(psi, t)`.
    pub fn log_power_weight(&self, psi: f64, t: f64, s_pow: f64, phi_pow: f64, alpha_coef: f64) -> f64 {
        let (ln_phi, alpha) = self.log_phi_alpha(psi, t);
        s_pow * self.s.ln() + phi_pow * ln_phi + alpha_coef * self.s * alpha
    }

    /// `s^a phi^b exp(c s alpha)` at `(psi, t)`, flushed to zero on underflow.
    pub fn power_weight(&self, psi: f64, t: f64, s_pow: f64, phi_pow: f64, alpha_coef: f64) -> f64 {
        self.log_power_weight(psi, t, s_pow, phi_pow, alpha_coef).exp()
    }

    /// `ln(s^a phi*^b exp(c s alpha*))` at time `t`.
    pub fn log_star_weight(&self, t: f64, s_pow: f64, phi_pow: f64, alpha_coef: f64) -> f64 {
        let (l, p, m) = (self.lambda, self.psi.norm, self.m);
        let theta = self.time_factor(t);
        let ln_phi = l * m * p + theta.ln();
        let alpha = ((l * (m + 1.0) * p).exp() - (2.0 * l * m * p).exp()) * theta;
        s_pow * self.s.ln() + phi_pow * ln_phi + alpha_coef * self.s * alpha
    }

    /// HUM observation weight `exp(2 s alpha) phi^8` at node `idx`, time `t`.
    pub fn observation_weight(&self, idx: usize, t: f64) -> f64 {
        self.power_weight(self.psi.values[idx], t, 0.0, 8.0, 2.0)
    }
}

/// `(phi, alpha, phi*, alpha*)` at node `idx` and time `t`.
pub fn eval_weights(weights: &WeightSet, idx: usize, t: f64) -> Result<WeightValues> {
    let psi = *weights
        .psi
        .values
        .get(idx)
        .ok_or_else(|| Error::InvalidArgument(format!("node index {idx} out of range")))?;
    weights.at_psi(psi, t)
}

/// Whether `3 alpha* <= 2 alpha` at every node and on the boundary, in a form
/// independent of time.
pub fn alpha_ordering_holds(psi: &Psi, m: f64, lambda: f64) -> bool {
    let p = psi.norm;
    let lhs = 3.0 * (lambda * (1.0 - m) * p).exp_m1();
    std::iter::once(0.0)
        .chain(psi.values.iter().copied())
        .all(|v| lhs <= 2.0 * (lambda * (v - m * p)).exp_m1())
}

/// Smallest `lambda` on a geometric grid for which [`alpha_ordering_holds`].
pub fn choose_lambda(psi: &Psi, m: f64) -> Result<f64> {
    if !(m.is_finite() && m > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "weight exponent m = {m} must satisfy m > 1"
        )));
    }
    if !(psi.norm > 0.0) {
        return Err(Error::InvalidArgument("psi must have positive norm".into()));
    }
    let mut lp = LAMBDA_SEARCH_MIN;
    while lp <= LAMBDA_SEARCH_MAX {
        let lambda = lp / psi.norm;
        if alpha_ordering_holds(psi, m, lambda) {
            return Ok(lambda);
        }
        lp *= LAMBDA_SEARCH_RATIO;
    }
    Err(Error::LambdaSearchExhausted {
        last: LAMBDA_SEARCH_MAX / psi.norm,
    })
}

/// `s = s0 (T + (1 + a^(2/3) + a^(2/5)) T^2 + T^4)` with `a = ||a||_inf`.
pub fn choose_s(horizon: f64, a_inf_norm: f64, s0: f64) -> Result<f64> {
    if !(horizon > 0.0 && a_inf_norm >= 0.0 && s0 > 0.0) || !(horizon * a_inf_norm * s0).is_finite() {
        return Err(Error::InvalidArgument(format!(
            "choose_s needs T > 0, ||a|| >= 0, s0 > 0 (got {horizon}, {a_inf_norm}, {s0})"
        )));
    }
    let a = a_inf_norm;
    let t = horizon;
    Ok(s0 * (t + (1.0 + a.powf(2.0 / 3.0) + a.powf(0.4)) * t * t + t.powi(4)))
}

/// Outcome of checking the weight inequalities on a space-time mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCheck {
    /// Space-time points examined, boundary profile value included.
    pub points: usize,
    pub alpha_ordering_failures: usize,
    pub phi_bound_failures: usize,
    pub alpha_star_dt_failures: usize,
    /// Smallest `3 alpha* / (2 alpha)`. Both sides are negative, so the
    /// ordering holds when this is at least 1.
    pub worst_alpha_ratio: f64,
    /// Largest `|d/dt alpha*| / (e^{2 lambda |psi|} T phi^2)`.
    pub worst_alpha_star_dt_ratio: f64,
}

impl WeightCheck {
    pub fn passed(&self) -> bool {
        self.alpha_ordering_failures == 0 && self.phi_bound_failures == 0 && self.alpha_star_dt_failures == 0
    }
}

/// Checks `3 alpha* <= 2 alpha`, `phi* <= phi <= e^{lambda |psi|} phi*` and
/// `|d/dt alpha*| <= e^{2 lambda |psi|} T phi^2` at every node (and at
/// `psi = 0`) for the cell-centered times of an `n_steps` partition.
pub fn check_weight_properties(weights: &WeightSet, n_steps: usize) -> Result<WeightCheck> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one time cell".into()));
    }
    let slack = 1e-12;
    let dt = weights.horizon / n_steps as f64;
    let spread = (weights.lambda * weights.psi.norm).exp();
    let mut check = WeightCheck {
        points: 0,
        alpha_ordering_failures: 0,
        phi_bound_failures: 0,
        alpha_star_dt_failures: 0,
        worst_alpha_ratio: f64::INFINITY,
        worst_alpha_star_dt_ratio: 0.0,
    };
    for n in 0..n_steps {
        let t = (n as f64 + 0.5) * dt;
        let dstar = weights.alpha_star_dt(t)?.abs();
        for psi in std::iter::once(0.0).chain(weights.psi.values.iter().copied()) {
            let w = weights.at_psi(psi, t)?;
            check.points += 1;
            let (lhs, rhs) = (3.0 * w.alpha_star, 2.0 * w.alpha);
            check.worst_alpha_ratio = check.worst_alpha_ratio.min(lhs / rhs);
            if lhs > rhs + slack * rhs.abs() {
                check.alpha_ordering_failures += 1;
            }
            if w.phi_star > w.phi * (1.0 + slack) || w.phi > spread * w.phi_star * (1.0 + slack) {
                check.phi_bound_failures += 1;
            }
            let bound = spread * spread * weights.horizon * w.phi * w.phi;
            check.worst_alpha_star_dt_ratio = check.worst_alpha_star_dt_ratio.max(dstar / bound);
            if dstar > bound * (1.0 + slack) {
                check.alpha_star_dt_failures += 1;
            }
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::build_grid;
    use approx::assert_relative_eq;
    use std::f64::consts::E;

    fn unit_line(n: usize) -> Grid {
        build_grid(1, &[1.0], &[n]).unwrap()
    }

    #[test]
    fn centered_profile_is_parabola() {
        let g = unit_line(9);
        let psi = build_psi(&g, &[0.5]).unwrap();
        for (x, v) in g.nodes().zip(&psi.values) {
            assert_relative_eq!(*v, x[0] * (1.0 - x[0]), max_relative = 1e-14);
        }
        assert_eq!(psi.norm, 0.25);
        // derivative of x - x^2 at 0.25 from the central difference at h = 0.1 node spacing
        let g = build_grid(1, &[1.0], &[7]).unwrap(); // nodes at k/8
        let psi = build_psi(&g, &[0.5]).unwrap();
        let grad = psi_gradient_norms(&g, &psi.values);
        assert_relative_eq!(grad[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn off_center_profile_peaks_at_center() {
        let g = build_grid(1, &[2.0], &[199]).unwrap();
        for c in [0.3, 0.8, 1.5] {
            let psi = build_psi(&g, &[c]).unwrap();
            assert_relative_eq!(axis_profile(c, 2.0, c), 0.25, max_relative = 1e-12);
            let (imax, _) = psi
                .values
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
            assert!((g.coords(imax)[0] - c).abs() <= g.spacing()[0]);
            assert!(psi.values.iter().all(|v| *v > 0.0 && *v <= 0.25));
        }
    }

    #[test]
    fn square_profile_has_single_critical_node() {
        let g = build_grid(2, &[1.0, 1.0], &[9, 9]).unwrap();
        let psi = build_psi(&g, &[0.5, 0.5]).unwrap();
        assert_eq!(psi.norm, 1.0 / 16.0);
        let grad = psi_gradient_norms(&g, &psi.values);
        for (idx, gn) in grad.iter().enumerate() {
            let p = g.coords(idx);
            let at_center = (p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12;
            if at_center {
                assert!(*gn < 1e-14);
            } else {
                assert!(*gn > 1e-3, "node {p:?}");
            }
        }
    }

    #[test]
    fn rejects_boundary_center() {
        let g = unit_line(5);
        assert!(build_psi(&g, &[0.0]).is_err());
        assert!(build_psi(&g, &[1.2]).is_err());
    }

    #[test]
    fn weight_values_match_closed_forms() {
        let g = unit_line(9);
        let psi = build_psi(&g, &[0.5]).unwrap();
        let w = WeightSet::new(psi, 4.0, 1.0, 2.0, 1.0).unwrap();
        let b = w.at_psi(0.0, 0.5).unwrap();
        assert_relative_eq!(b.phi_star, 4.0 * E * E, max_relative = 1e-14);
        assert_relative_eq!(b.phi_star, 29.556, epsilon = 1e-3);
        let top = w.at_psi(0.25, 0.5).unwrap();
        assert_relative_eq!(top.alpha, 4.0 * (E.powi(3) - E.powi(4)), max_relative = 1e-13);
        assert_relative_eq!(top.alpha, -138.05, epsilon = 1e-2);
        assert_relative_eq!(top.alpha_star, top.alpha, max_relative = 1e-14);
        assert_relative_eq!(3.0 * top.alpha_star, -414.2, epsilon = 0.1);
        assert_relative_eq!(2.0 * b.alpha, 8.0 * (E * E - E.powi(4)), max_relative = 1e-13);
        assert!(3.0 * top.alpha_star <= 2.0 * b.alpha);
        assert!(w.at_psi(0.1, 0.0).is_err());
        assert!(w.at_psi(0.1, 1.0).is_err());
    }

    #[test]
    fn weights_are_negative_and_ordered() {
        let g = unit_line(15);
        let w = WeightSet::auto(&g, &[0.4], 2.0, 1.0, 0.0, 1.0).unwrap();
        for idx in 0..g.len() {
            for k in 0..40 {
                let t = (k as f64 + 0.5) / 40.0;
                let v = eval_weights(&w, idx, t).unwrap();
                assert!(v.alpha < 0.0 && v.alpha_star < 0.0);
                assert!(v.phi_star <= v.phi);
                assert!(v.phi <= (w.lambda() * w.psi_norm()).exp() * v.phi_star * (1.0 + 1e-15));
            }
        }
    }

    #[test]
    fn lambda_search_is_minimal_and_monotone() {
        let g = unit_line(31);
        let psi = build_psi(&g, &[0.5]).unwrap();
        let lambda = choose_lambda(&psi, 2.0).unwrap();
        assert!(alpha_ordering_holds(&psi, 2.0, lambda));
        assert!(!alpha_ordering_holds(&psi, 2.0, lambda / LAMBDA_SEARCH_RATIO));
        // for m = 2 the boundary condition reduces to lambda ||psi|| >= ln 2
        assert!(lambda * psi.norm >= 2.0_f64.ln());
        assert!(lambda * psi.norm <= 2.0_f64.ln() * LAMBDA_SEARCH_RATIO);
        for k in 1..6 {
            assert!(alpha_ordering_holds(&psi, 2.0, lambda * f64::from(1 << k)));
        }
        let near_one = choose_lambda(&psi, 1.0001).unwrap();
        assert!(near_one > lambda);
        assert!(choose_lambda(&psi, 1.0).is_err());
    }

    #[test]
    fn s_rule() {
        assert_eq!(choose_s(1.0, 0.0, 1.0).unwrap(), 3.0);
        assert_eq!(choose_s(1.0, 1.0, 1.0).unwrap(), 5.0);
        let t: f64 = 0.7;
        assert_relative_eq!(
            choose_s(t, 0.0, 2.0).unwrap(),
            2.0 * (t + t * t + t.powi(4)),
            max_relative = 1e-15
        );
        assert!(choose_s(0.0, 0.0, 1.0).is_err());
        assert!(choose_s(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn observation_weight_underflows_to_zero() {
        let g = unit_line(31);
        let w = WeightSet::auto(&g, &[0.5], 2.0, 1.0, 0.0, 1.0).unwrap();
        let early = w.observation_weight(3, 1e-4);
        let late = w.observation_weight(3, 1.0 - 1e-4);
        assert_eq!(early, 0.0);
        assert_eq!(late, 0.0);
        let mid = w.observation_weight(15, 0.5);
        let v = eval_weights(&w, 15, 0.5).unwrap();
        assert_relative_eq!(mid, (2.0 * w.s() * v.alpha).exp() * v.phi.powi(8), max_relative = 1e-12);
    }

    #[test]
    fn alpha_star_derivative_bound() {
        let g = unit_line(15);
        let w = WeightSet::auto(&g, &[0.3], 2.0, 1.5, 0.0, 1.0).unwrap();
        let h = 1e-6;
        for k in 1..30 {
            let t = 1.5 * k as f64 / 30.0;
            let fd = (w.at_psi(0.0, t + h).unwrap().alpha_star - w.at_psi(0.0, t - h).unwrap().alpha_star) / (2.0 * h);
            let d = w.alpha_star_dt(t).unwrap();
            assert_relative_eq!(d, fd, max_relative = 1e-5, epsilon = 1e-6);
            let bound = (2.0 * w.lambda() * w.psi_norm()).exp() * w.horizon();
            for idx in 0..g.len() {
                let phi = eval_weights(&w, idx, t).unwrap().phi;
                assert!(d.abs() <= bound * phi * phi);
            }
        }
    }

    #[test]
    fn mesh_check_passes_for_auto_weights() {
        for (dim, center) in [(1, vec![0.4]), (2, vec![0.7, 0.3])] {
            let g = build_grid(dim, &vec![1.0; dim], &vec![9; dim]).unwrap();
            let w = WeightSet::auto(&g, &center, 2.0, 1.0, 0.5, 1.0).unwrap();
            let c = check_weight_properties(&w, 16).unwrap();
            assert!(c.passed(), "{c:?}");
            assert_eq!(c.points, 16 * (g.len() + 1));
            assert!(c.worst_alpha_ratio >= 1.0);
        }
    }

    #[test]
    fn mesh_check_flags_small_lambda() {
        let g = unit_line(15);
        let w = WeightSet::auto(&g, &[0.3], 2.0, 1.0, 0.0, 1.0).unwrap();
        let lam = w.lambda();
        let small = w.with_lambda(lam * 1e-3).unwrap();
        assert!(!alpha_ordering_holds(small.psi(), 2.0, small.lambda()));
        assert!(check_weight_properties(&small, 8).unwrap().alpha_ordering_failures > 0);
    }
}
