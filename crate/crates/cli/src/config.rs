//! Run configuration: a TOML file overlaid on problem-specific defaults.
//!
//! Only `problem` is required. Every other key falls back to the defaults of
//! that problem, and the fully resolved configuration is echoed next to the
//! outputs of each command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `problem` (one of \"pipe2d\", \"cantilever2d\")")]
    MissingProblem,
    #[error("`{key}` {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Pipe2d,
    Cantilever2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViscousKind {
    Gradient,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    Nodal,
    Bspline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKindConfig {
    Elasticity,
    H1,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Dissipation for the pipe, compliance for the cantilever.
    Default,
    Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// MSH 2.2 or native mesh file; the generator is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub length: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub nu: f64,
    pub convection: bool,
    pub viscous: ViscousKind,
    pub inflow_peak: f64,
    pub lambda: f64,
    pub mu: f64,
    pub traction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub kind: ControlKind,
    /// Nodal control: vertices on these markers do not move.
    pub fixed_markers: Vec<u32>,
    pub fix_x: bool,
    pub fix_y: bool,
    pub bbox_min: [f64; 2],
    pub bbox_max: [f64; 2],
    pub level: [u32; 2],
    pub order: usize,
    pub boundary_regularity: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub kind: MetricKindConfig,
    pub cauchy_riemann_weight: f64,
    pub fixed_markers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub objective: ObjectiveKind,
    pub alpha_reg: f64,
    pub tau: f64,
    pub volume_constraint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub omega0: f64,
    pub eta0: f64,
    pub omega_star: f64,
    pub eta_star: f64,
    pub penalty0: f64,
    pub penalty_factor: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_radius: f64,
    pub max_radius: f64,
    pub step_min: f64,
    pub memory: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaylorConfig {
    pub directions: usize,
    pub epsilon0: f64,
    pub halvings: usize,
    /// Base point is this multiple of a random unit direction; 0 tests at
    /// the initial design.
    pub base_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub seed: u64,
    pub output: String,
    pub mesh: MeshConfig,
    pub physics: PhysicsConfig,
    pub control: ControlConfig,
    pub metric: MetricConfig,
    pub functional: FunctionalConfig,
    pub optimizer: OptimizerConfig,
    pub taylor: TaylorConfig,
}

impl RunConfig {
    pub fn defaults(problem: ProblemKind) -> Self {
        let pipe = problem == ProblemKind::Pipe2d;
        let (length, height, nx, ny) = if pipe { (3.0, 1.0, 30, 10) } else { (2.0, 1.0, 30, 15) };
        Self {
            schema_version: SCHEMA_VERSION,
            problem,
            seed: 42,
            output: "output".into(),
            mesh: MeshConfig {
                path: None,
                length,
                height,
                nx,
                ny,
            },
            physics: PhysicsConfig {
                nu: 0.1,
                convection: true,
                viscous: ViscousKind::Gradient,
                inflow_peak: 1.0,
                lambda: 1.0,
                mu: 1.0,
                traction: [0.0, -1.0],
            },
            control: ControlConfig {
                kind: if pipe { ControlKind::Bspline } else { ControlKind::Nodal },
                fixed_markers: if pipe { vec![10, 11] } else { vec![1, 2] },
                fix_x: pipe,
                fix_y: false,
                bbox_min: [0.5, -1.0],
                bbox_max: [2.5, 1.0],
                level: [3, 2],
                order: 2,
                boundary_regularity: [1, 0],
            },
            metric: MetricConfig {
                kind: MetricKindConfig::Elasticity,
                cauchy_riemann_weight: 0.0,
                fixed_markers: if pipe { vec![10, 11] } else { vec![1, 2] },
            },
            functional: FunctionalConfig {
                objective: ObjectiveKind::Default,
                alpha_reg: 10.0,
                tau: 0.01,
                volume_constraint: true,
            },
            optimizer: OptimizerConfig {
                omega0: 1e-2,
                eta0: 1e-2,
                omega_star: 1e-6,
                eta_star: 1e-4,
                penalty0: 10.0,
                penalty_factor: 10.0,
                max_outer: 10,
                max_inner: 100,
                initial_radius: 0.1,
                max_radius: 1e3,
                step_min: 1e-4,
                memory: 10,
            },
            taylor: TaylorConfig {
                directions: 3,
                epsilon0: 1e-4,
                halvings: 3,
                base_scale: 0.0,
            },
        }
    }

    /// Parses `text` over the defaults of its `problem`, then validates.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let problem = match user.get("problem") {
            None => return Err(ConfigError::MissingProblem),
            Some(v) => v
                .clone()
                .try_into::<ProblemKind>()
                .map_err(|_| invalid("problem", format!("must be \"pipe2d\" or \"cantilever2d\", got {v}")))?,
        };
        let defaults = toml::Table::try_from(Self::defaults(problem)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut merged = defaults;
        overlay(&mut merged, user, "")?;
        let text = toml::to_string(&merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let config: Self = toml::from_str(&text).map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive, got {v}")))
            }
        };
        let nonnegative = |key: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be nonnegative, got {v}")))
            }
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("{} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.mesh.path.is_none() {
            positive("mesh.length", self.mesh.length)?;
            positive("mesh.height", self.mesh.height)?;
            if self.mesh.nx < 2 {
                return Err(invalid("mesh.nx", format!("must be at least 2, got {}", self.mesh.nx)));
            }
            if self.mesh.ny < 2 {
                return Err(invalid("mesh.ny", format!("must be at least 2, got {}", self.mesh.ny)));
            }
        }
        match self.problem {
            ProblemKind::Pipe2d => {
                positive("physics.nu", self.physics.nu)?;
                if !self.physics.inflow_peak.is_finite() {
                    return Err(invalid("physics.inflow_peak", "must be finite"));
                }
            }
            ProblemKind::Cantilever2d => {
                positive("physics.mu", self.physics.mu)?;
                nonnegative("physics.lambda", self.physics.lambda)?;
                if !self.physics.traction.iter().all(|v| v.is_finite()) {
                    return Err(invalid("physics.traction", "must be finite"));
                }
            }
        }
        if self.control.kind == ControlKind::Bspline {
            if self.control.order < 2 {
                return Err(invalid("control.order", format!("must be at least 2, got {}", self.control.order)));
            }
            if (0..2).any(|d| !(self.control.bbox_min[d] < self.control.bbox_max[d])) {
                return Err(invalid("control.bbox_max", "must exceed control.bbox_min in both axes"));
            }
        }
        nonnegative("metric.cauchy_riemann_weight", self.metric.cauchy_riemann_weight)?;
        nonnegative("functional.alpha_reg", self.functional.alpha_reg)?;
        if !self.functional.tau.is_finite() {
            return Err(invalid("functional.tau", "must be finite"));
        }
        let o = &self.optimizer;
        positive("optimizer.omega0", o.omega0)?;
        positive("optimizer.eta0", o.eta0)?;
        positive("optimizer.omega_star", o.omega_star)?;
        positive("optimizer.eta_star", o.eta_star)?;
        positive("optimizer.penalty0", o.penalty0)?;
        if !(o.penalty_factor.is_finite() && o.penalty_factor > 1.0) {
            return Err(invalid("optimizer.penalty_factor", format!("must exceed 1, got {}", o.penalty_factor)));
        }
        positive("optimizer.initial_radius", o.initial_radius)?;
        positive("optimizer.max_radius", o.max_radius)?;
        positive("optimizer.step_min", o.step_min)?;
        if o.memory == 0 {
            return Err(invalid("optimizer.memory", "must be at least 1"));
        }
        positive("taylor.epsilon0", self.taylor.epsilon0)?;
        nonnegative("taylor.base_scale", self.taylor.base_scale)?;
        if self.taylor.halvings == 0 {
            return Err(invalid("taylor.halvings", "must be at least 1"));
        }
        Ok(())
    }
}

/// Recursively replaces entries of `base` by those of `user`, rejecting keys
/// that `base` does not know.
fn overlay(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if path == "mesh.path" => {
                base.insert(key, v);
            }
            (None, _) => return Err(ConfigError::UnknownKey(path)),
        }
    }
    Ok(())
}
