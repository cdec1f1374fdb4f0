//! The four subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeopt::fem::{Family, FunctionSpace};
use shapeopt::functional::{taylor_test, TaylorReport};
use shapeopt::mesh::{gen_cantilever, gen_channel, TriMesh};
use shapeopt::meshio::{format_real, write_history_csv, write_native, write_vtk, PointField};
use shapeopt::optim::{augmented_lagrangian_solve, ConvergenceRecord, OptProblem, ShapeProblem, Termination};

use crate::config::RunConfig;
use crate::setup::{build, load_mesh, optimizer_params};
use crate::{CliError, EXIT_OK, EXIT_STALL};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Vertex values of block `b`: one entry per component.
fn vertex_values(space: &FunctionSpace, state: &[f64], b: usize) -> Vec<Vec<f64>> {
    let block = space.block(b);
    (0..space.num_vertices())
        .map(|k| (0..block.components).map(|c| state[block.dof(k, c)]).collect())
        .collect()
}

/// VTK snapshot of the design `x`: deformed mesh, state, displacement and
/// the per-element `detDT`.
fn snapshot(problem: &mut ShapeProblem, space: &FunctionSpace, x: &[f64]) -> Result<String, CliError> {
    let rf = &mut problem.functional;
    let ev = rf.evaluate(x).map_err(|e| CliError::Run(e.to_string()))?;
    let displacement: Vec<[f64; 2]> = rf
        .displacement(x)
        .map_err(|e| CliError::Run(e.to_string()))?
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let quality = rf.quality(x).map_err(|e| CliError::Run(e.to_string()))?;
    let mut vectors: Vec<(&str, Vec<[f64; 2]>)> = Vec::new();
    let mut scalars: Vec<(&str, Vec<f64>)> = Vec::new();
    if let Some(sol) = ev.state.as_ref().filter(|s| !s.failed_to_solve) {
        let u = vertex_values(space, &sol.state, 0);
        vectors.push(("u", u.iter().map(|v| [v[0], v[1]]).collect()));
        if space.family() == Family::TaylorHood {
            scalars.push(("p", vertex_values(space, &sol.state, 1).iter().map(|v| v[0]).collect()));
        }
    }
    vectors.push(("displacement", displacement));
    let mut point_fields: Vec<(&str, PointField<'_>)> = Vec::new();
    for (name, v) in &vectors {
        point_fields.push((name, PointField::Vector(v)));
    }
    for (name, v) in &scalars {
        point_fields.push((name, PointField::Scalar(v)));
    }
    write_vtk(&ev.mesh, &point_fields, &[("detDT", &quality.det_ratios)]).map_err(|e| CliError::Run(e.to_string()))
}

/// Result of [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub termination: Termination,
    pub outer_iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_constraint: f64,
    pub volume_target: Option<f64>,
    pub final_min_det_ratio: f64,
    pub multiplier: f64,
    pub history: Vec<ConvergenceRecord>,
    pub exit_code: i32,
}

/// Optimizes the design and writes `config.toml`, `u_NNNN.vtk` for every
/// accepted iterate, `history.csv` and `final_mesh.{mesh,vtk}` to `output`.
pub fn cmd_run(config: &RunConfig, base_dir: &Path, output: &Path) -> Result<RunOutcome, CliError> {
    let mut setup = build(config, base_dir)?;
    create_dir(output)?;
    write_file(&output.join("config.toml"), &config.to_toml())?;
    let x0 = vec![0.0; setup.problem.dim()];
    let initial = setup.problem.diagnostics(&x0).map_err(|e| CliError::Run(e.to_string()))?;
    if !initial.objective.is_finite() {
        return Err(CliError::Run("objective is not finite for the initial design".into()));
    }
    let params = optimizer_params(config);
    let mut iterates: Vec<Vec<f64>> = Vec::new();
    let result = augmented_lagrangian_solve(&mut setup.problem, &setup.gram, &x0, &params, &mut |_, x| {
        iterates.push(x.to_vec())
    })
    .map_err(|e| CliError::Run(e.to_string()))?;
    for (k, x) in iterates.iter().enumerate() {
        let vtk = snapshot(&mut setup.problem, &setup.space, x)?;
        write_file(&output.join(format!("u_{k:04}.vtk")), &vtk)?;
    }
    write_file(&output.join("history.csv"), &write_history_csv(&result.history))?;
    let last = setup.problem.diagnostics(&result.x).map_err(|e| CliError::Run(e.to_string()))?;
    let final_mesh = setup
        .problem
        .functional
        .evaluate(&result.x)
        .map_err(|e| CliError::Run(e.to_string()))?
        .mesh;
    write_file(&output.join("final_mesh.mesh"), &write_native(&final_mesh))?;
    write_file(&output.join("final_mesh.vtk"), &snapshot(&mut setup.problem, &setup.space, &result.x)?)?;
    let final_constraint = setup.problem.constraint(&result.x).map_err(|e| CliError::Run(e.to_string()))?;
    let exit_code = match result.termination {
        Termination::Converged => EXIT_OK,
        _ => EXIT_STALL,
    };
    Ok(RunOutcome {
        termination: result.termination,
        outer_iterations: result.outer_iterations,
        initial_objective: initial.objective,
        final_objective: last.objective,
        final_constraint,
        volume_target: setup.problem.volume.as_ref().map(|v| v.target()),
        final_min_det_ratio: last.min_det_ratio,
        multiplier: result.multiplier,
        history: result.history,
        exit_code,
    })
}

impl RunOutcome {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "termination: {:?}", self.termination);
        let _ = writeln!(s, "outer iterations: {}", self.outer_iterations);
        let _ = writeln!(s, "accepted iterates: {}", self.history.len());
        let _ = writeln!(s, "objective: {} -> {}", format_real(self.initial_objective), format_real(self.final_objective));
        let _ = writeln!(s, "constraint: {}", format_real(self.final_constraint));
        let _ = writeln!(s, "multiplier: {}", format_real(self.multiplier));
        let _ = writeln!(s, "min det ratio: {}", format_real(self.final_min_det_ratio));
        s
    }
}

/// One functional along one direction.
#[derive(Debug, Clone)]
pub struct TaylorLine {
    pub direction: usize,
    pub functional: &'static str,
    pub report: TaylorReport,
}

#[derive(Debug, Clone)]
pub struct TaylorOutcome {
    pub lines: Vec<TaylorLine>,
    pub passed: bool,
}

impl TaylorOutcome {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = write!(s, "direction {} {}:", l.direction, l.functional);
            for (e, r) in l.report.epsilons.iter().zip(&l.report.remainders) {
                let _ = write!(s, " r({e:.3e})={r:.6e}");
            }
            let ratios: Vec<String> = l.report.ratios.iter().map(|r| format!("{r:.4}")).collect();
            let _ = writeln!(
                s,
                " ratios=[{}]{} {}",
                ratios.join(", "),
                if l.report.exact { " exact" } else { "" },
                if l.report.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "{}", if self.passed { "PASS" } else { "FAIL" });
        s
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_STALL
        }
    }
}

/// Random direction with unit metric norm.
fn unit_direction(rng: &mut ChaCha8Rng, gram: &shapeopt::metric::GramOperator) -> Vec<f64> {
    let d: Vec<f64> = (0..gram.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = gram.norm(&d);
    d.iter().map(|v| v / n).collect()
}

/// Finite-difference check of the reduced functional (and of the volume
/// constraint when enabled) along seeded random directions.
pub fn cmd_taylor(config: &RunConfig, base_dir: &Path) -> Result<TaylorOutcome, CliError> {
    let mut setup = build(config, base_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t = &config.taylor;
    let n = setup.problem.dim();
    if n == 0 {
        return Err(CliError::Config("control space is empty".into()));
    }
    let base: Vec<f64> = if t.base_scale > 0.0 {
        unit_direction(&mut rng, &setup.gram).iter().map(|v| t.base_scale * v).collect()
    } else {
        vec![0.0; n]
    };
    let err = |e: shapeopt::optim::OptimError| CliError::Run(e.to_string());
    let f0 = setup.problem.value(&base).map_err(err)?;
    if !f0.is_finite() {
        return Err(CliError::Run("objective is NaN at the base point; choose a feasible base".into()));
    }
    let grad = setup.problem.gradient(&base).map_err(err)?;
    let cgrad = match setup.problem.volume {
        Some(_) => Some(setup.problem.constraint_gradient(&base).map_err(err)?),
        None => None,
    };
    let mut lines = Vec::new();
    for k in 0..t.directions {
        let d = unit_direction(&mut rng, &setup.gram);
        let p = &mut setup.problem;
        let report = taylor_test(|x| p.value(x).unwrap_or(f64::NAN), &base, &grad, &d, t.epsilon0, t.halvings);
        lines.push(TaylorLine {
            direction: k + 1,
            functional: "objective",
            report,
        });
        if let Some(cg) = &cgrad {
            // the absolute area, so rounding is judged against its magnitude
            let target = p.volume.as_ref().map_or(0.0, |v| v.target());
            let area = |x: &[f64]| p.constraint(x).map_or(f64::NAN, |c| c + target);
            let report = taylor_test(area, &base, cg, &d, t.epsilon0, t.halvings);
            lines.push(TaylorLine {
                direction: k + 1,
                functional: "volume",
                report,
            });
        }
    }
    let passed = lines.iter().all(|l| l.report.passed);
    Ok(TaylorOutcome { lines, passed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    Channel,
    Cantilever,
}

/// Writes `mesh.mesh` (native) and `mesh.vtk` to `output`.
pub fn cmd_genmesh(
    kind: MeshKind,
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
    output: &Path,
) -> Result<TriMesh, CliError> {
    let mesh = match kind {
        MeshKind::Channel => gen_channel(length, height, nx, ny),
        MeshKind::Cantilever => gen_cantilever(length, height, nx, ny),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(output)?;
    write_file(&output.join("mesh.mesh"), &write_native(&mesh))?;
    let vtk = write_vtk(&mesh, &[], &[]).map_err(|e| CliError::Run(e.to_string()))?;
    write_file(&output.join("mesh.vtk"), &vtk)?;
    Ok(mesh)
}

/// `4 sqrt(3) area / sum of squared edge lengths`: 1 for an equilateral
/// triangle, 0 for a degenerate one.
pub fn shape_quality(mesh: &TriMesh, t: usize) -> f64 {
    let [a, b, c] = mesh.triangles()[t].map(|k| mesh.vertices()[k]);
    let sq = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let area = mesh.geometry(t).area();
    4.0 * 3f64.sqrt() * area / (sq(a, b) + sq(b, c) + sq(c, a))
}

/// Counts, marker inventory and element quality range of a mesh file.
pub fn cmd_info(path: &Path) -> Result<String, CliError> {
    let mesh = load_mesh(path)?;
    let mut markers: BTreeMap<u32, usize> = BTreeMap::new();
    for e in mesh.boundary_edges() {
        *markers.entry(e.marker).or_default() += 1;
    }
    let q: Vec<f64> = (0..mesh.num_triangles()).map(|t| shape_quality(&mesh, t)).collect();
    let areas: Vec<f64> = (0..mesh.num_triangles()).map(|t| mesh.geometry(t).area()).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::new();
    let _ = writeln!(s, "vertices: {}", mesh.num_vertices());
    let _ = writeln!(s, "triangles: {}", mesh.num_triangles());
    let _ = writeln!(s, "boundary edges: {}", mesh.boundary_edges().len());
    let inventory: Vec<String> = markers.iter().map(|(m, n)| format!("{m} ({n} edges)")).collect();
    let _ = writeln!(s, "markers: {}", inventory.join(", "));
    let _ = writeln!(s, "area: {}", format_real(mesh.area()));
    let _ = writeln!(s, "element area: min {} max {}", format_real(min(&areas)), format_real(max(&areas)));
    let _ = writeln!(s, "element quality: min {} max {}", format_real(min(&q)), format_real(max(&q)));
    Ok(s)
}
