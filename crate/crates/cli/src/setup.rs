//! Builds the optimization problem described by a [`RunConfig`].

use std::collections::BTreeSet;
use std::path::Path;

use shapeopt::control::{BoundingBox, ControlMap, ControlSpec};
use shapeopt::fem::FunctionSpace;
use shapeopt::forms::{Atom, FormExpr};
use shapeopt::functional::{ReducedFunctional, VolumeConstraint};
use shapeopt::mesh::{gen_cantilever, gen_channel, TriMesh};
use shapeopt::meshio::{parse_msh, read_native};
use shapeopt::metric::{assemble_gram, GramOperator, MetricKind, MetricSpec};
use shapeopt::optim::{AugmentedLagrangianParams, ShapeProblem, TrustRegionParams};
use shapeopt::pde::{ElasticityProblem, FlowProblem, Inflow, Problem, ViscousForm};

use crate::config::{ControlKind, MetricKindConfig, ObjectiveKind, ProblemKind, RunConfig, ViscousKind};
use crate::CliError;

/// Reads a mesh file, choosing the parser from its first line.
pub fn load_mesh(path: &Path) -> Result<TriMesh, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let parsed = if text.trim_start().starts_with("$MeshFormat") {
        parse_msh(&text)
    } else {
        read_native(&text)
    };
    parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Base mesh from the file named in the config (relative to `base_dir`) or
/// from the generator of the problem.
pub fn base_mesh(config: &RunConfig, base_dir: &Path) -> Result<TriMesh, CliError> {
    let m = &config.mesh;
    match &m.path {
        Some(p) => load_mesh(&base_dir.join(p)),
        None => {
            let mesh = match config.problem {
                ProblemKind::Pipe2d => gen_channel(m.length, m.height, m.nx, m.ny),
                ProblemKind::Cantilever2d => gen_cantilever(m.length, m.height, m.nx, m.ny),
            };
            mesh.map_err(|e| CliError::Config(format!("mesh: {e}")))
        }
    }
}

pub fn problem(config: &RunConfig, mesh: &TriMesh) -> Result<Problem, CliError> {
    let p = &config.physics;
    let built = match config.problem {
        ProblemKind::Pipe2d => {
            let inlet = mesh.marked_vertices(&BTreeSet::from([10]));
            let ys: Vec<f64> = inlet.iter().map(|&k| mesh.vertices()[k][1]).collect();
            let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
            let inflow = Inflow {
                peak: p.inflow_peak,
                center: 0.5 * (lo + hi),
                half_width: 0.5 * (hi - lo),
            };
            FlowProblem::new(p.nu).map(|f| {
                let f = f.with_inflow(inflow).with_viscous(match p.viscous {
                    ViscousKind::Gradient => ViscousForm::Gradient,
                    ViscousKind::Symmetric => ViscousForm::Symmetric,
                });
                Problem::Flow(if p.convection { f } else { f.stokes() })
            })
        }
        ProblemKind::Cantilever2d => {
            ElasticityProblem::new(p.lambda, p.mu, p.traction).map(Problem::Elasticity)
        }
    };
    built.map_err(|e| CliError::Config(format!("physics: {e}")))
}

pub fn control_map(config: &RunConfig, mesh: &TriMesh) -> Result<ControlMap, CliError> {
    let c = &config.control;
    let fixed_dims = [c.fix_x, c.fix_y];
    let spec = match c.kind {
        ControlKind::Nodal => ControlSpec::NodalFe {
            fixed_markers: c.fixed_markers.iter().copied().collect(),
            fixed_dims,
        },
        ControlKind::Bspline => ControlSpec::BSpline {
            bbox: BoundingBox {
                min: c.bbox_min,
                max: c.bbox_max,
            },
            level: c.level,
            order: c.order,
            boundary_regularity: c.boundary_regularity,
            fixed_dims,
        },
    };
    ControlMap::new(&spec, mesh).map_err(|e| CliError::Config(format!("control: {e}")))
}

pub fn metric_spec(config: &RunConfig) -> MetricSpec {
    let m = &config.metric;
    MetricSpec {
        kind: match m.kind {
            MetricKindConfig::Elasticity => MetricKind::Elasticity,
            MetricKindConfig::H1 => MetricKind::H1,
            MetricKindConfig::Laplace => MetricKind::Laplace,
        },
        cauchy_riemann_weight: m.cauchy_riemann_weight,
        fixed_markers: m.fixed_markers.iter().copied().collect(),
    }
}

pub fn optimizer_params(config: &RunConfig) -> AugmentedLagrangianParams {
    let o = &config.optimizer;
    AugmentedLagrangianParams {
        omega0: o.omega0,
        eta0: o.eta0,
        omega_star: o.omega_star,
        eta_star: o.eta_star,
        penalty0: o.penalty0,
        penalty_factor: o.penalty_factor,
        tighten: 0.5,
        max_outer: o.max_outer,
        trust_region: TrustRegionParams {
            initial_radius: o.initial_radius,
            max_radius: o.max_radius,
            step_min: o.step_min,
            memory: o.memory,
            max_iterations: o.max_inner,
            ..TrustRegionParams::default()
        },
    }
}

/// Everything a command needs.
pub struct Setup {
    pub base: TriMesh,
    pub space: FunctionSpace,
    pub problem: ShapeProblem,
    pub gram: GramOperator,
}

pub fn build(config: &RunConfig, base_dir: &Path) -> Result<Setup, CliError> {
    let base = base_mesh(config, base_dir)?;
    let pde = problem(config, &base)?;
    let map = control_map(config, &base)?;
    let objective = match config.functional.objective {
        ObjectiveKind::Default => pde.default_objective(),
        ObjectiveKind::Volume => FormExpr::atom(Atom::VolumeOne),
    };
    let space = FunctionSpace::new(&base, pde.family());
    let gram = assemble_gram(&metric_spec(config), &map, &base).map_err(|e| CliError::Config(format!("metric: {e}")))?;
    let functional = ReducedFunctional::new(
        base.clone(),
        map.clone(),
        pde,
        objective,
        config.functional.alpha_reg,
        config.functional.tau,
    )
    .map_err(|e| CliError::Config(format!("functional: {e}")))?;
    let volume = if config.functional.volume_constraint {
        Some(VolumeConstraint::new(base.clone(), map).map_err(|e| CliError::Config(format!("functional: {e}")))?)
    } else {
        None
    };
    Ok(Setup {
        base,
        space,
        problem: ShapeProblem { functional, volume },
        gram,
    })
}
