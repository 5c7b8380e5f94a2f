//! JSON run configuration for `humctl`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{ObservabilityOptions, WeightParams};
use crate::discretize::{Conductivity, Grid, MIN_NODES_PER_AXIS};
use crate::dynamics::TerminalData;
use crate::error::Error;
use crate::hum::{FixedPointConfig, HumConfig};
use crate::model::{PotentialField, ProblemBuilder, ProblemSpec, Reaction, Region, SolverKind};

/// A configuration problem located by a JSON pointer (`""` for the document).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    fn at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pointer.is_empty() {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error at {}: {}", self.pointer, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

type Check = std::result::Result<(), ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub time: TimeConfig,
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default)]
    pub hum: HumConfig,
    #[serde(default)]
    pub weights: WeightParams,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    #[serde(default)]
    pub observability: ObservabilityOptions,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub output: OutputConfig,
    /// Governs every random draw: certificate probes, power-iteration starts
    /// and trace probes.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub dim: usize,
    pub extents: Vec<f64>,
    /// Interior nodes per axis.
    pub nodes: Vec<usize>,
    /// Control region of `f`.
    pub omega: Region,
    /// Control region of `g` in the bidomain model; defaults to `omega`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Relaxed,
    Monodomain,
    Bidomain,
}

/// A positive number (isotropic constant) or one constant per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ConductivitySpec {
    Constant(f64),
    Axes { x: f64, y: f64 },
}

impl ConductivitySpec {
    fn values(&self) -> [f64; 2] {
        match *self {
            ConductivitySpec::Constant(c) => [c, c],
            ConductivitySpec::Axes { x, y } => [x, y],
        }
    }

    fn build(&self, grid: &Grid) -> crate::Result<Conductivity> {
        let [x, y] = self.values();
        Conductivity::diagonal(grid, |_| x, |_| y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub c_m: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub m_e: ConductivitySpec,
    /// Defaults to `mu * m_e`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_i: Option<ConductivitySpec>,
    pub reaction: Reaction,
    /// Constant potential `a` of the linear ionic term; used when the
    /// reaction is `none`.
    pub potential: f64,
    pub model: ModelKind,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            c_m: 1.0,
            mu: 1.0,
            epsilon: 0.0,
            m_e: ConductivitySpec::Constant(1.0),
            m_i: None,
            reaction: Reaction::None,
            potential: 0.0,
            model: ModelKind::Relaxed,
        }
    }
}

/// Initial field sampled at the interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude * prod_i sin(pi x_i / L_i)`.
    Sine {
        amplitude: f64,
    },
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    Gaussian {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// Explicit nodal values, x index fastest.
    Values {
        values: Vec<f64>,
    },
}

impl FieldSpec {
    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        let ext = grid.extents().to_vec();
        let d = grid.dim();
        match self {
            FieldSpec::Zero => vec![0.0; grid.len()],
            FieldSpec::Constant { value } => vec![*value; grid.len()],
            FieldSpec::Sine { amplitude } => grid.sample(|p| {
                (0..d)
                    .map(|a| (std::f64::consts::PI * p[a] / ext[a]).sin())
                    .product::<f64>()
                    * amplitude
            }),
            FieldSpec::Gaussian {
                amplitude,
                center,
                width,
            } => grid.sample(|p| {
                let r2: f64 = (0..d).map(|a| (p[a] - center[a]).powi(2)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }),
            FieldSpec::Values { values } => values.clone(),
        }
    }

    fn check(&self, ptr: &str, dim: usize, len: usize) -> Check {
        let finite = |x: f64, key: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::at(
                    format!("{ptr}/{key}"),
                    format!("must be finite, got {x}"),
                ))
            }
        };
        match self {
            FieldSpec::Zero => Ok(()),
            FieldSpec::Constant { value } => finite(*value, "value"),
            FieldSpec::Sine { amplitude } => finite(*amplitude, "amplitude"),
            FieldSpec::Gaussian {
                amplitude,
                center,
                width,
            } => {
                finite(*amplitude, "amplitude")?;
                if center.len() != dim {
                    return Err(ConfigError::at(
                        format!("{ptr}/center"),
                        format!("needs {dim} coordinates, got {}", center.len()),
                    ));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(ConfigError::at(
                        format!("{ptr}/width"),
                        format!("must be positive, got {width}"),
                    ));
                }
                Ok(())
            }
            FieldSpec::Values { values } => {
                if values.len() != len {
                    return Err(ConfigError::at(
                        format!("{ptr}/values"),
                        format!("needs one value per interior node ({len}), got {}", values.len()),
                    ));
                }
                match values.iter().position(|v| !v.is_finite()) {
                    Some(i) => Err(ConfigError::at(format!("{ptr}/values/{i}"), "must be finite")),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub v0: FieldSpec,
    pub ue0: FieldSpec,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            v0: FieldSpec::Sine { amplitude: 1.0 },
            ue0: FieldSpec::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Strictly decreasing; `0` is appended when missing.
    pub epsilons: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0],
        }
    }
}

/// Adjoint terminal data for `adjoint` and `carleman-check`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TerminalSpec {
    /// Independent standard normal nodal values drawn from `seed`.
    #[default]
    Random,
    Values {
        phi_t: Vec<f64>,
        phi_et: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
        }
    }
}

fn positive(ptr: &str, x: f64) -> Check {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::at(ptr, format!("must be positive, got {x}")))
    }
}

fn non_negative(ptr: &str, x: f64) -> Check {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::at(ptr, format!("must be non-negative, got {x}")))
    }
}

fn check_region(ptr: &str, region: &Region, extents: &[f64]) -> Check {
    let d = extents.len();
    for (key, side) in [("lower", &region.lower), ("upper", &region.upper)] {
        if side.len() != d {
            return Err(ConfigError::at(
                format!("{ptr}/{key}"),
                format!("needs {d} coordinates, got {}", side.len()),
            ));
        }
    }
    for (a, &extent) in extents.iter().enumerate().take(d) {
        let (lo, hi) = (region.lower[a], region.upper[a]);
        if !(lo >= 0.0 && lo < hi && hi <= extent) {
            return Err(ConfigError::at(
                format!("{ptr}/lower/{a}"),
                format!("need 0 <= lower < upper <= {extent} along axis {a}, got [{lo}, {hi}]"),
            ));
        }
    }
    Ok(())
}

fn check_conductivity(ptr: &str, spec: &ConductivitySpec, dim: usize) -> Check {
    match spec {
        ConductivitySpec::Constant(c) => positive(ptr, *c),
        ConductivitySpec::Axes { x, y } => {
            positive(&format!("{ptr}/x"), *x)?;
            if dim == 2 {
                positive(&format!("{ptr}/y"), *y)?;
            }
            Ok(())
        }
    }
}

/// Turns a deserialization path into a JSON pointer.
fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => {}
        }
    }
    out
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> std::result::Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            ConfigError::at(pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Check {
        let dom = &self.domain;
        let d = dom.dim;
        if d != 1 && d != 2 {
            return Err(ConfigError::at("/domain/dim", format!("must be 1 or 2, got {d}")));
        }
        if dom.extents.len() != d {
            return Err(ConfigError::at(
                "/domain/extents",
                format!("needs {d} entries, got {}", dom.extents.len()),
            ));
        }
        for (a, &l) in dom.extents.iter().enumerate() {
            positive(&format!("/domain/extents/{a}"), l)?;
        }
        if dom.nodes.len() != d {
            return Err(ConfigError::at(
                "/domain/nodes",
                format!("needs {d} entries, got {}", dom.nodes.len()),
            ));
        }
        for (a, &n) in dom.nodes.iter().enumerate() {
            if n < MIN_NODES_PER_AXIS {
                return Err(ConfigError::at(
                    format!("/domain/nodes/{a}"),
                    format!("needs at least {MIN_NODES_PER_AXIS} interior nodes, got {n}"),
                ));
            }
        }
        check_region("/domain/omega", &dom.omega, &dom.extents)?;
        if let Some(g) = &dom.g_region {
            check_region("/domain/g_region", g, &dom.extents)?;
        }

        positive("/time/horizon", self.time.horizon)?;
        if self.time.n_steps < 2 {
            return Err(ConfigError::at(
                "/time/n_steps",
                format!("needs at least 2 steps, got {}", self.time.n_steps),
            ));
        }

        let ph = &self.physics;
        positive("/physics/c_m", ph.c_m)?;
        positive("/physics/mu", ph.mu)?;
        non_negative("/physics/epsilon", ph.epsilon)?;
        check_conductivity("/physics/m_e", &ph.m_e, d)?;
        if let Some(mi) = &ph.m_i {
            check_conductivity("/physics/m_i", mi, d)?;
        }
        ph.reaction
            .validate()
            .map_err(|e| ConfigError::at("/physics/reaction", e.to_string()))?;
        if !ph.potential.is_finite() {
            return Err(ConfigError::at("/physics/potential", "must be finite"));
        }

        let n_nodes: usize = dom.nodes.iter().product();
        self.initial.v0.check("/initial/v0", d, n_nodes)?;
        self.initial.ue0.check("/initial/ue0", d, n_nodes)?;

        if let SolverKind::Cg { tol, max_iter } = self.solver {
            positive("/solver/tol", tol)?;
            if max_iter == 0 {
                return Err(ConfigError::at("/solver/max_iter", "must be at least 1"));
            }
        }

        let h = &self.hum;
        positive("/hum/delta", h.delta)?;
        positive("/hum/tol", h.tol)?;
        if h.max_iters == 0 {
            return Err(ConfigError::at("/hum/max_iters", "must be at least 1"));
        }
        if !(h.backtrack.is_finite() && h.backtrack > 1.0) {
            return Err(ConfigError::at(
                "/hum/backtrack",
                format!("must exceed 1, got {}", h.backtrack),
            ));
        }
        if !(h.q.is_finite() && h.q > 2.0) {
            return Err(ConfigError::at("/hum/q", format!("must exceed 2, got {}", h.q)));
        }

        let w = &self.weights;
        if !(w.m.is_finite() && w.m > 1.0) {
            return Err(ConfigError::at("/weights/m", format!("requires m > 1, got {}", w.m)));
        }
        positive("/weights/s0", w.s0)?;
        if let Some(c) = &w.center {
            if c.len() != d {
                return Err(ConfigError::at(
                    "/weights/center",
                    format!("needs {d} coordinates, got {}", c.len()),
                ));
            }
            for (a, (&x, &l)) in c.iter().zip(&dom.extents).enumerate() {
                if !(x > 0.0 && x < l) {
                    return Err(ConfigError::at(
                        format!("/weights/center/{a}"),
                        format!("must lie strictly inside (0, {l}), got {x}"),
                    ));
                }
            }
        }

        let fp = &self.fixed_point;
        positive("/fixed_point/tol", fp.tol)?;
        positive("/fixed_point/gamma", fp.gamma)?;
        if fp.max_outer == 0 {
            return Err(ConfigError::at("/fixed_point/max_outer", "must be at least 1"));
        }

        let ob = &self.observability;
        positive("/observability/tol", ob.tol)?;
        positive("/observability/shift", ob.shift)?;
        positive("/observability/cg_tol", ob.cg_tol)?;
        if ob.max_iters == 0 {
            return Err(ConfigError::at("/observability/max_iters", "must be at least 1"));
        }

        let eps = &self.sweep.epsilons;
        if eps.is_empty() {
            return Err(ConfigError::at("/sweep/epsilons", "must not be empty"));
        }
        for (i, &e) in eps.iter().enumerate() {
            non_negative(&format!("/sweep/epsilons/{i}"), e)?;
            if i > 0 && !(e < eps[i - 1]) {
                return Err(ConfigError::at(
                    format!("/sweep/epsilons/{i}"),
                    "values must be strictly decreasing",
                ));
            }
        }

        if let TerminalSpec::Values { phi_t, phi_et } = &self.terminal {
            for (key, v) in [("phi_t", phi_t), ("phi_et", phi_et)] {
                if v.len() != n_nodes {
                    return Err(ConfigError::at(
                        format!("/terminal/{key}"),
                        format!("needs one value per interior node ({n_nodes}), got {}", v.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> crate::Result<Grid> {
        Grid::new(self.domain.dim, &self.domain.extents, &self.domain.nodes)
    }

    /// The problem at the configured `epsilon`.
    pub fn problem(&self) -> crate::Result<ProblemSpec> {
        let grid = self.grid()?;
        let ph = &self.physics;
        let mut b = ProblemBuilder::new(
            grid.clone(),
            self.domain.omega.clone(),
            self.time.horizon,
            self.time.n_steps,
        )?;
        b.c_m = ph.c_m;
        b.mu = ph.mu;
        b.epsilon = ph.epsilon;
        b.m_e = ph.m_e.build(&grid)?;
        b.m_i = ph.m_i.as_ref().map(|m| m.build(&grid)).transpose()?;
        b.v0 = self.initial.v0.sample(&grid);
        b.ue0 = self.initial.ue0.sample(&grid);
        b.solver = self.solver;
        b.build()
    }

    pub fn potential(&self) -> PotentialField {
        if self.physics.potential == 0.0 {
            PotentialField::Zero
        } else {
            PotentialField::Uniform(self.physics.potential)
        }
    }

    pub fn hum_config(&self) -> HumConfig {
        HumConfig {
            seed: self.seed,
            ..self.hum.clone()
        }
    }

    pub fn observability_options(&self) -> ObservabilityOptions {
        ObservabilityOptions {
            seed: self.seed,
            ..self.observability.clone()
        }
    }

    pub fn terminal_data(&self, grid: &Grid) -> crate::Result<TerminalData> {
        match &self.terminal {
            TerminalSpec::Random => Ok(crate::analysis::random_terminal(grid, self.seed)),
            TerminalSpec::Values { phi_t, phi_et } => TerminalData::new(grid, phi_t.clone(), phi_et.clone()),
        }
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> std::result::Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "domain": {"dim": 1, "extents": [1.0], "nodes": [31], "omega": {"lower": [0.2], "upper": [0.6]}},
        "time": {"horizon": 1.0, "n_steps": 64},
        "physics": {"epsilon": 0.01, "m_e": 0.1}
    }"#;

    fn with(path: &[&str], value: serde_json::Value) -> String {
        let mut doc: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let mut cur = &mut doc;
        for key in &path[..path.len() - 1] {
            cur = cur
                .as_object_mut()
                .unwrap()
                .entry(key.to_string())
                .or_insert(serde_json::json!({}));
        }
        cur[path[path.len() - 1]] = value;
        doc.to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.weights.m, 2.0);
        assert_eq!(c.weights.s0, 1.0);
        assert_eq!(c.hum.delta, 1e-3);
        assert_eq!(c.hum.mode, crate::hum::HumMode::Plain);
        assert_eq!(c.hum.q, 4.0);
        assert_eq!(c.physics.c_m, 1.0);
        assert_eq!(c.physics.reaction, Reaction::None);
        assert_eq!(c.seed, 0);
        let p = c.problem().unwrap();
        assert_eq!(p.grid().len(), 31);
        assert_eq!(p.epsilon(), 0.01);
    }

    #[test]
    fn negative_epsilon_names_its_key() {
        let e = RunConfig::from_json(&with(&["physics", "epsilon"], serde_json::json!(-1.0))).unwrap_err();
        assert_eq!(e.pointer, "/physics/epsilon");
    }

    #[test]
    fn weight_exponent_one_is_rejected() {
        let e = RunConfig::from_json(&with(&["weights", "m"], serde_json::json!(1.0))).unwrap_err();
        assert_eq!(e.pointer, "/weights/m");
        assert!(e.message.contains("m > 1"), "{}", e.message);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let e = RunConfig::from_json(&with(&["hum", "deltaa"], serde_json::json!(1.0))).unwrap_err();
        assert!(e.pointer.starts_with("/hum"), "{e}");
        let e = RunConfig::from_json(&with(&["extra"], serde_json::json!(1))).unwrap_err();
        assert!(e.message.contains("extra"), "{e}");
    }

    #[test]
    fn type_errors_carry_a_path() {
        let e = RunConfig::from_json(&with(&["time", "n_steps"], serde_json::json!("many"))).unwrap_err();
        assert_eq!(e.pointer, "/time/n_steps");
    }

    #[test]
    fn serialized_config_parses_back_equal() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.physics.reaction = Reaction::Cubic { c3: 1.0, c1: 0.5 };
        c.physics.m_i = Some(ConductivitySpec::Axes { x: 0.2, y: 0.3 });
        c.initial.ue0 = FieldSpec::Gaussian {
            amplitude: 0.5,
            center: vec![0.3],
            width: 0.1,
        };
        c.domain.g_region = Some(Region::new(&[0.5], &[0.9]));
        c.terminal = TerminalSpec::Values {
            phi_t: vec![0.1; 31],
            phi_et: vec![-0.2; 31],
        };
        c.seed = 17;
        c.hum.tol = 0.1 + 0.2;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let plain = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_json(&plain.to_json()).unwrap(), plain);
    }

    #[test]
    fn region_outside_domain_is_rejected() {
        let e = RunConfig::from_json(&with(
            &["domain", "omega"],
            serde_json::json!({"lower": [0.5], "upper": [1.5]}),
        ))
        .unwrap_err();
        assert!(e.pointer.starts_with("/domain/omega"), "{e}");
    }

    #[test]
    fn sweep_list_must_decrease() {
        let e = RunConfig::from_json(&with(&["sweep", "epsilons"], serde_json::json!([1.0, 0.1, 0.1]))).unwrap_err();
        assert_eq!(e.pointer, "/sweep/epsilons/2");
    }
}
