//! Reduced functionals: control -> deformed mesh -> state -> objective, with
//! adjoint gradients, the spectral-norm regularizer and the volume
//! constraint.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::control::{ControlError, ControlMap};
use crate::fem::{Family, FunctionSpace};
use crate::forms::{self, Atom, FormError, FormExpr, FormInputs};
use crate::mesh::{MeshError, Point, QualityReport, TriMesh};
use crate::pde::{PdeError, Problem, StateSolution};

/// Floor of the discriminant in the closed-form largest eigenvalue.
pub const DISCRIMINANT_FLOOR: f64 = 1e-30;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.01;
pub const DEFAULT_REGULARIZATION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("control vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("gradient requested at a point where the functional is NaN")]
    Infeasible,
    #[error("marker {0} must be fixed by the control space")]
    MovingFixedMarker(u32),
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Why an evaluation produced NaN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// `min_det_ratio` below the quality threshold.
    Quality,
    /// The state solver did not converge.
    Solver,
}

/// Everything computed by one evaluation of the reduced functional.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `objective + alpha_reg * penalty`, or NaN.
    pub value: f64,
    pub objective: f64,
    pub penalty: f64,
    pub min_det_ratio: f64,
    pub failure: Option<Failure>,
    pub mesh: TriMesh,
    pub state: Option<StateSolution>,
}

/// `lambda_max(S)` of a symmetric 2x2 `S = [[a, b], [b, d]]` and its partial
/// derivatives with respect to `a`, `b`, `d`. Below the discriminant floor
/// the eigenvalues are treated as tied.
pub fn lambda_max_sym(a: f64, b: f64, d: f64) -> (f64, [f64; 3]) {
    let half_tr = 0.5 * (a + d);
    let disc = half_tr * half_tr - (a * d - b * b);
    if disc > DISCRIMINANT_FLOOR {
        let root = disc.sqrt();
        let k = 0.5 / root;
        (
            half_tr + root,
            [0.5 + k * 0.5 * (a - d), k * 2.0 * b, 0.5 + k * 0.5 * (d - a)],
        )
    } else {
        (half_tr + disc.max(0.0).sqrt(), [0.5, 0.0, 0.5])
    }
}

/// `lambda_max(DV^T DV)` and its derivative with respect to `DV`.
pub fn squared_spectral_norm(dv: [[f64; 2]; 2]) -> (f64, [[f64; 2]; 2]) {
    let a = dv[0][0] * dv[0][0] + dv[1][0] * dv[1][0];
    let d = dv[0][1] * dv[0][1] + dv[1][1] * dv[1][1];
    let b = dv[0][0] * dv[0][1] + dv[1][0] * dv[1][1];
    let (lam, [la, lb, ld]) = lambda_max_sym(a, b, d);
    // d lambda = L : dS with L symmetric, dS = dDV^T DV + DV^T dDV
    let l = [[la, 0.5 * lb], [0.5 * lb, ld]];
    let mut grad = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            grad[i][j] = 2.0 * (dv[i][0] * l[0][j] + dv[i][1] * l[1][j]);
        }
    }
    (lam, grad)
}

fn points(flat: &[f64]) -> Vec<Point> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Integral over the base mesh of `lambda_max(DV^T DV)` for the P1
/// displacement `disp` (interleaved layout).
pub fn spectral_penalty_displacement(base: &TriMesh, disp: &[f64]) -> f64 {
    let v = points(disp);
    (0..base.num_triangles())
        .map(|t| base.geometry(t).area() * squared_spectral_norm(base.displacement_gradient(t, &v)).0)
        .sum()
}

/// Gradient of [`spectral_penalty_displacement`] with respect to `disp`.
pub fn spectral_penalty_gradient_displacement(base: &TriMesh, disp: &[f64]) -> Vec<f64> {
    let v = points(disp);
    let mut out = vec![0.0; disp.len()];
    for t in 0..base.num_triangles() {
        let geo = base.geometry(t);
        let (_, g) = squared_spectral_norm(base.displacement_gradient(t, &v));
        let grads = geo.p1_gradients();
        let area = geo.area();
        for (k, &vert) in base.triangles()[t].iter().enumerate() {
            for i in 0..2 {
                out[2 * vert + i] += area * (g[i][0] * grads[k][0] + g[i][1] * grads[k][1]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReducedFunctional {
    base: TriMesh,
    map: ControlMap,
    problem: Problem,
    objective: FormExpr,
    alpha_reg: f64,
    tau: f64,
    fixed_markers: BTreeSet<u32>,
    base_state: Option<Vec<f64>>,
    last: Option<(Vec<f64>, Evaluation)>,
}

impl ReducedFunctional {
    /// The problem's traction and inflow markers must be fixed by `map`.
    pub fn new(
        base: TriMesh,
        map: ControlMap,
        problem: Problem,
        objective: FormExpr,
        alpha_reg: f64,
        tau: f64,
    ) -> Result<Self, FunctionalError> {
        if !(alpha_reg.is_finite() && alpha_reg >= 0.0) {
            return Err(FunctionalError::InvalidParameter {
                name: "alpha_reg",
                value: alpha_reg,
            });
        }
        if !tau.is_finite() {
            return Err(FunctionalError::InvalidParameter { name: "tau", value: tau });
        }
        if map.displacement_dim() != 2 * base.num_vertices() {
            return Err(FunctionalError::Dimension {
                expected: 2 * base.num_vertices(),
                got: map.displacement_dim(),
            });
        }
        problem.check_mesh(&base)?;
        let fixed_markers = map.fixed_markers(&base);
        let needed = problem.fixed_markers().union(&objective.traction_markers()).copied().collect::<Vec<_>>();
        if let Some(&m) = needed.iter().find(|m| !fixed_markers.contains(m)) {
            return Err(FunctionalError::MovingFixedMarker(m));
        }
        let base_sol = problem.solve_state(&base, None)?;
        let base_state = (!base_sol.failed_to_solve).then_some(base_sol.state);
        Ok(Self {
            base,
            map,
            problem,
            objective,
            alpha_reg,
            tau,
            fixed_markers,
            base_state,
            last: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn base(&self) -> &TriMesh {
        &self.base
    }

    pub fn map(&self) -> &ControlMap {
        &self.map
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn objective(&self) -> &FormExpr {
        &self.objective
    }

    pub fn alpha_reg(&self) -> f64 {
        self.alpha_reg
    }

    pub fn set_alpha_reg(&mut self, alpha_reg: f64) {
        self.alpha_reg = alpha_reg;
        self.last = None;
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn check(&self, c: &[f64]) -> Result<(), FunctionalError> {
        if c.len() != self.dim() {
            return Err(FunctionalError::Dimension {
                expected: self.dim(),
                got: c.len(),
            });
        }
        Ok(())
    }

    pub fn displacement(&self, c: &[f64]) -> Result<Vec<f64>, FunctionalError> {
        Ok(self.map.apply(c)?)
    }

    pub fn quality(&self, c: &[f64]) -> Result<QualityReport, FunctionalError> {
        Ok(self.base.quality(&points(&self.displacement(c)?))?)
    }

    pub fn spectral_penalty(&self, c: &[f64]) -> Result<f64, FunctionalError> {
        Ok(spectral_penalty_displacement(&self.base, &self.displacement(c)?))
    }

    pub fn spectral_penalty_gradient(&self, c: &[f64]) -> Result<Vec<f64>, FunctionalError> {
        let g = spectral_penalty_gradient_displacement(&self.base, &self.displacement(c)?);
        Ok(self.map.apply_transpose(&g)?)
    }

    /// Full evaluation; the state solve always starts from the base-mesh
    /// state, so the result depends on `c` only.
    pub fn evaluate(&mut self, c: &[f64]) -> Result<Evaluation, FunctionalError> {
        self.check(c)?;
        if let Some((lc, ev)) = &self.last {
            if lc.as_slice() == c {
                return Ok(ev.clone());
            }
        }
        let disp = self.displacement(c)?;
        let mesh = self.base.deform_flat(&disp)?;
        let quality = self.base.quality(&points(&disp))?;
        let penalty = spectral_penalty_displacement(&self.base, &disp);
        let mut ev = Evaluation {
            value: f64::NAN,
            objective: f64::NAN,
            penalty,
            min_det_ratio: quality.min_det_ratio,
            failure: None,
            mesh,
            state: None,
        };
        if !(quality.min_det_ratio >= self.tau) {
            ev.failure = Some(Failure::Quality);
        } else {
            let sol = self.problem.solve_state(&ev.mesh, self.base_state.as_deref())?;
            if sol.failed_to_solve {
                ev.failure = Some(Failure::Solver);
            } else {
                let space = FunctionSpace::new(&ev.mesh, self.problem.family());
                let j = forms::value(&self.objective, FormInputs::new(&ev.mesh, &space, &sol.state))?;
                ev.objective = j;
                ev.value = j + self.alpha_reg * penalty;
                ev.state = Some(sol);
            }
        }
        self.last = Some((c.to_vec(), ev.clone()));
        Ok(ev)
    }

    /// Objective plus regularization, NaN on quality or solver failure.
    pub fn value(&mut self, c: &[f64]) -> Result<f64, FunctionalError> {
        Ok(self.evaluate(c)?.value)
    }

    /// Gradient with respect to the control (a dual vector).
    pub fn gradient(&mut self, c: &[f64]) -> Result<Vec<f64>, FunctionalError> {
        let ev = self.evaluate(c)?;
        let Some(sol) = ev.state.as_ref().filter(|_| ev.value.is_finite()) else {
            return Err(FunctionalError::Infeasible);
        };
        let dual = self.problem.solve_adjoint(&self.objective, &ev.mesh, sol)?;
        let space = FunctionSpace::new(&ev.mesh, self.problem.family());
        let lagrangian = self.problem.lagrangian(&self.objective);
        let mut g = forms::shape_derivative(
            &lagrangian,
            FormInputs::new(&ev.mesh, &space, &sol.state).with_dual(&dual),
            &self.fixed_markers,
        )?;
        if self.alpha_reg != 0.0 {
            let disp = self.displacement(c)?;
            let gp = spectral_penalty_gradient_displacement(&self.base, &disp);
            for (a, b) in g.iter_mut().zip(gp) {
                *a += self.alpha_reg * b;
            }
        }
        Ok(self.map.apply_transpose(&g)?)
    }
}

/// `volume(deformed mesh) - target`, target defaulting to the base volume.
#[derive(Debug, Clone)]
pub struct VolumeConstraint {
    base: TriMesh,
    map: ControlMap,
    target: f64,
}

impl VolumeConstraint {
    pub fn new(base: TriMesh, map: ControlMap) -> Result<Self, FunctionalError> {
        let mut vc = Self { base, map, target: 0.0 };
        vc.target = vc.value(&vec![0.0; vc.map.dim()])?;
        Ok(vc)
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    fn parts(&self, c: &[f64]) -> Result<(TriMesh, FunctionSpace, Vec<f64>), FunctionalError> {
        let mesh = self.base.deform_flat(&self.map.apply(c)?)?;
        let space = FunctionSpace::new(&mesh, Family::P1);
        let zero = vec![0.0; space.dim()];
        Ok((mesh, space, zero))
    }

    pub fn value(&self, c: &[f64]) -> Result<f64, FunctionalError> {
        let (mesh, space, zero) = self.parts(c)?;
        let vol = forms::value(&FormExpr::atom(Atom::VolumeOne), FormInputs::new(&mesh, &space, &zero))?;
        Ok(vol - self.target)
    }

    pub fn gradient(&self, c: &[f64]) -> Result<Vec<f64>, FunctionalError> {
        let (mesh, space, zero) = self.parts(c)?;
        let g = forms::shape_derivative(
            &FormExpr::atom(Atom::VolumeOne),
            FormInputs::new(&mesh, &space, &zero),
            &BTreeSet::new(),
        )?;
        Ok(self.map.apply_transpose(&g)?)
    }
}

/// Result of a Taylor remainder test along one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub epsilons: Vec<f64>,
    pub remainders: Vec<f64>,
    pub ratios: Vec<f64>,
    /// All remainders are at rounding level: the first-order model is exact.
    pub exact: bool,
    pub passed: bool,
}

pub const TAYLOR_WINDOW: (f64, f64) = (3.5, 4.5);

/// Remainders `|f(c + e d) - f(c) - e <g, d>|` for `e = eps0 / 2^k`,
/// `k = 0..=halvings`, and their successive ratios.
pub fn taylor_test(
    mut f: impl FnMut(&[f64]) -> f64,
    c: &[f64],
    gradient: &[f64],
    direction: &[f64],
    eps0: f64,
    halvings: usize,
) -> TaylorReport {
    let f0 = f(c);
    let slope: f64 = gradient.iter().zip(direction).map(|(a, b)| a * b).sum();
    let mut epsilons = Vec::new();
    let mut remainders = Vec::new();
    let mut noise = 0.0_f64;
    for k in 0..=halvings {
        let e = eps0 / f64::powi(2.0, k as i32);
        let x: Vec<f64> = c.iter().zip(direction).map(|(a, b)| a + e * b).collect();
        let fe = f(&x);
        epsilons.push(e);
        remainders.push((fe - f0 - e * slope).abs());
        noise = noise.max(64.0 * f64::EPSILON * (f0.abs() + fe.abs() + (e * slope).abs()));
    }
    let ratios: Vec<f64> = remainders.windows(2).map(|w| w[0] / w[1]).collect();
    let exact = remainders.iter().all(|&r| r <= noise);
    let passed = remainders.iter().all(|r| r.is_finite())
        && (exact || ratios.iter().all(|r| (TAYLOR_WINDOW.0..=TAYLOR_WINDOW.1).contains(r)));
    TaylorReport {
        epsilons,
        remainders,
        ratios,
        exact,
        passed,
    }
}
