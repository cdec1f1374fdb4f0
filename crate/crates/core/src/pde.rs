//! State problems (incompressible flow, linear elasticity) with a Newton
//! solver on the assembled residual, and the adjoint solve.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fem::{
    apply_dirichlet, norm, solve_linear, Family, FunctionSpace, SolveError, SparseMatrix,
    UnknownMarker,
};
use crate::forms::{self, Arg, Atom, FormError, FormExpr, FormInputs, Var};
use crate::mesh::{cantilever_markers, channel_markers, Point, TriMesh};

/// Newton stops once the residual drops below this fraction of the first one.
pub const NEWTON_RTOL: f64 = 1e-10;
pub const NEWTON_ATOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("mesh has no boundary marker {0}")]
    MissingMarker(u32),
    #[error("state was not solved successfully; refusing to solve the adjoint")]
    StateNotSolved,
    #[error("state vector has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

impl From<UnknownMarker> for PdeError {
    fn from(e: UnknownMarker) -> Self {
        PdeError::MissingMarker(e.0)
    }
}

/// Viscous term of the momentum equation. Both give the same interior
/// equations for divergence-free fields; they differ in the natural outflow
/// condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViscousForm {
    /// `2 nu eps(u) : eps(v)`
    Symmetric,
    /// `nu grad u : grad v`
    #[default]
    Gradient,
}

/// Parabolic inflow `peak * (1 - ((y - center) / half_width)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inflow {
    pub peak: f64,
    pub center: f64,
    pub half_width: f64,
}

impl Default for Inflow {
    fn default() -> Self {
        Self {
            peak: 1.0,
            center: 0.0,
            half_width: 0.5,
        }
    }
}

impl Inflow {
    pub fn velocity(&self, p: Point) -> [f64; 2] {
        let s = (p[1] - self.center) / self.half_width;
        [(self.peak * (1.0 - s * s)).max(0.0), 0.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowProblem {
    pub nu: f64,
    /// 1 for Navier-Stokes, 0 for Stokes.
    pub convection: f64,
    pub viscous: ViscousForm,
    pub inflow: Inflow,
}

impl FlowProblem {
    pub fn new(nu: f64) -> Result<Self, PdeError> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(PdeError::InvalidParameter { name: "nu", value: nu });
        }
        Ok(Self {
            nu,
            convection: 1.0,
            viscous: ViscousForm::default(),
            inflow: Inflow::default(),
        })
    }

    pub fn stokes(mut self) -> Self {
        self.convection = 0.0;
        self
    }

    pub fn with_viscous(mut self, viscous: ViscousForm) -> Self {
        self.viscous = viscous;
        self
    }

    pub fn with_inflow(mut self, inflow: Inflow) -> Self {
        self.inflow = inflow;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityProblem {
    pub lambda: f64,
    pub mu: f64,
    pub traction: [f64; 2],
}

impl ElasticityProblem {
    pub fn new(lambda: f64, mu: f64, traction: [f64; 2]) -> Result<Self, PdeError> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(PdeError::InvalidParameter { name: "mu", value: mu });
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(PdeError::InvalidParameter {
                name: "lambda",
                value: lambda,
            });
        }
        if !traction.iter().all(|g| g.is_finite()) {
            return Err(PdeError::InvalidParameter {
                name: "traction",
                value: f64::NAN,
            });
        }
        Ok(Self { lambda, mu, traction })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Flow(FlowProblem),
    Elasticity(ElasticityProblem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSolution {
    pub state: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub failed_to_solve: bool,
    pub residual_norm: f64,
}

impl StateSolution {
    fn failed(state: Vec<f64>, iterations: usize, residual_norm: f64) -> Self {
        Self {
            state,
            converged: false,
            iterations,
            failed_to_solve: true,
            residual_norm,
        }
    }
}

impl Problem {
    pub fn family(&self) -> Family {
        match self {
            Problem::Flow(_) => Family::TaylorHood,
            Problem::Elasticity(_) => Family::P1Vector,
        }
    }

    /// Residual form, linear in the dual (test) field.
    pub fn residual(&self) -> FormExpr {
        match self {
            Problem::Flow(f) => {
                let (u, v, p, q) = (Arg::state(0), Arg::dual(0), Arg::state(1), Arg::dual(1));
                let mut form = match f.viscous {
                    ViscousForm::Symmetric => FormExpr::atom(Atom::SymGradSymGrad(u, v)).scaled(f.nu),
                    ViscousForm::Gradient => FormExpr::atom(Atom::GradGrad(u, v)).scaled(f.nu),
                };
                if f.convection != 0.0 {
                    form = form.term(f.convection, Atom::Convection(v, u));
                }
                form.term(1.0, Atom::PressureDiv(p, v))
                    .term(1.0, Atom::DivConstraint(q, u))
            }
            Problem::Elasticity(e) => FormExpr::atom(Atom::StressStrain {
                lambda: e.lambda,
                mu: e.mu,
                a: Arg::state(0),
                b: Arg::dual(0),
            })
            .term(
                -1.0,
                Atom::BoundaryTraction {
                    g: e.traction,
                    b: Arg::dual(0),
                    marker: cantilever_markers::LOADED,
                },
            ),
        }
    }

    /// Dissipation for flow, compliance for elasticity.
    pub fn default_objective(&self) -> FormExpr {
        match self {
            Problem::Flow(f) => FormExpr::atom(Atom::DissipationEnergy(Arg::state(0))).scaled(f.nu),
            Problem::Elasticity(e) => FormExpr::atom(Atom::ComplianceEnergy {
                lambda: e.lambda,
                mu: e.mu,
                a: Arg::state(0),
            }),
        }
    }

    /// Markers the geometry must keep in place (inflow data, loaded edges).
    pub fn fixed_markers(&self) -> BTreeSet<u32> {
        match self {
            Problem::Flow(_) => BTreeSet::from([channel_markers::INLET]),
            Problem::Elasticity(_) => BTreeSet::from([cantilever_markers::LOADED]),
        }
    }

    pub fn required_markers(&self) -> BTreeSet<u32> {
        match self {
            Problem::Flow(_) => BTreeSet::from([channel_markers::INLET, channel_markers::OUTLET]),
            Problem::Elasticity(_) => {
                BTreeSet::from([cantilever_markers::CLAMPED, cantilever_markers::LOADED])
            }
        }
    }

    pub fn check_mesh(&self, mesh: &TriMesh) -> Result<(), PdeError> {
        let present = mesh.markers();
        match self.required_markers().difference(&present).next() {
            Some(&m) => Err(PdeError::MissingMarker(m)),
            None => Ok(()),
        }
    }

    /// Dirichlet data on `mesh`, as `dof -> value`.
    pub fn dirichlet(&self, mesh: &TriMesh, space: &FunctionSpace) -> Result<BTreeMap<usize, f64>, PdeError> {
        let mut bc = BTreeMap::new();
        match self {
            Problem::Flow(f) => {
                let inflow = f.inflow;
                bc.extend(space.boundary_values(mesh, 0, channel_markers::INLET, |p| inflow.velocity(p))?);
                for wall in [channel_markers::BOTTOM, channel_markers::TOP] {
                    if space.has_marker(wall) {
                        bc.extend(space.boundary_values(mesh, 0, wall, |_| [0.0, 0.0])?);
                    }
                }
            }
            Problem::Elasticity(_) => {
                bc.extend(space.boundary_values(mesh, 0, cantilever_markers::CLAMPED, |_| [0.0, 0.0])?);
            }
        }
        Ok(bc)
    }

    /// Residual vector with Dirichlet rows replaced by `x - g`.
    pub fn residual_vector(
        &self,
        mesh: &TriMesh,
        space: &FunctionSpace,
        state: &[f64],
        bc: &BTreeMap<usize, f64>,
    ) -> Result<Vec<f64>, PdeError> {
        let zero = vec![0.0; space.dim()];
        let mut r = forms::derivative(
            &self.residual(),
            FormInputs::new(mesh, space, state).with_dual(&zero),
            Var::Dual,
        )?;
        for (&i, &g) in bc {
            r[i] = state[i] - g;
        }
        Ok(r)
    }

    /// Jacobian of the residual (rows: test dofs, columns: state dofs),
    /// without boundary conditions.
    pub fn jacobian(&self, mesh: &TriMesh, space: &FunctionSpace, state: &[f64]) -> Result<SparseMatrix, PdeError> {
        let zero = vec![0.0; space.dim()];
        Ok(forms::second_derivative(
            &self.residual(),
            FormInputs::new(mesh, space, state).with_dual(&zero),
            Var::Dual,
            Var::State,
        )?)
    }

    /// Newton's method on the residual. Numerical trouble (tangled mesh,
    /// singular Jacobian, divergence) is reported through
    /// `failed_to_solve`; only configuration problems are errors.
    pub fn solve_state(&self, mesh: &TriMesh, initial: Option<&[f64]>) -> Result<StateSolution, PdeError> {
        self.check_mesh(mesh)?;
        let space = FunctionSpace::new(mesh, self.family());
        let n = space.dim();
        let mut x = match initial {
            Some(x0) if x0.len() != n => {
                return Err(PdeError::StateLength {
                    expected: n,
                    got: x0.len(),
                })
            }
            Some(x0) => x0.to_vec(),
            None => vec![0.0; n],
        };
        if !mesh.is_untangled() {
            log::debug!("state solve skipped: tangled mesh");
            return Ok(StateSolution::failed(x, 0, f64::NAN));
        }
        let bc = self.dirichlet(mesh, &space)?;
        for (&i, &g) in &bc {
            x[i] = g;
        }
        let mut r = self.residual_vector(mesh, &space, &x, &bc)?;
        let r0 = norm(&r);
        let mut rn = r0;
        if !r0.is_finite() {
            return Ok(StateSolution::failed(x, 0, r0));
        }
        let zero_increment: BTreeMap<usize, f64> = bc.keys().map(|&i| (i, 0.0)).collect();
        for it in 0..=NEWTON_MAX_ITER {
            if rn <= NEWTON_RTOL * r0 || rn <= NEWTON_ATOL {
                return Ok(StateSolution {
                    state: x,
                    converged: true,
                    iterations: it,
                    failed_to_solve: false,
                    residual_norm: rn,
                });
            }
            if it == NEWTON_MAX_ITER {
                break;
            }
            let jac = self.jacobian(mesh, &space, &x)?;
            let mut rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let a = apply_dirichlet(&jac, &mut rhs, &zero_increment, false);
            let dx = match solve_linear(&a, &rhs) {
                Ok(dx) => dx,
                Err(e) => {
                    log::debug!("Newton iteration {it}: {e}");
                    return Ok(StateSolution::failed(x, it + 1, rn));
                }
            };
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            r = self.residual_vector(mesh, &space, &x, &bc)?;
            rn = norm(&r);
            if !rn.is_finite() {
                return Ok(StateSolution::failed(x, it + 1, rn));
            }
            log::trace!("Newton iteration {}: residual {rn:e}", it + 1);
        }
        Ok(StateSolution::failed(x, NEWTON_MAX_ITER, rn))
    }

    /// Dual state `z` with `J_R(u)^T z = -dJ/du` on free dofs and `z = 0`
    /// on Dirichlet dofs.
    pub fn solve_adjoint(
        &self,
        objective: &FormExpr,
        mesh: &TriMesh,
        solution: &StateSolution,
    ) -> Result<Vec<f64>, PdeError> {
        if solution.failed_to_solve || !solution.converged {
            return Err(PdeError::StateNotSolved);
        }
        let space = FunctionSpace::new(mesh, self.family());
        let u = &solution.state;
        if u.len() != space.dim() {
            return Err(PdeError::StateLength {
                expected: space.dim(),
                got: u.len(),
            });
        }
        let jt = self.jacobian(mesh, &space, u)?.transpose();
        let mut rhs: Vec<f64> = forms::derivative(objective, FormInputs::new(mesh, &space, u), Var::State)?
            .into_iter()
            .map(|v| -v)
            .collect();
        let bc: BTreeMap<usize, f64> = self
            .dirichlet(mesh, &space)?
            .into_keys()
            .map(|i| (i, 0.0))
            .collect();
        let a = apply_dirichlet(&jt, &mut rhs, &bc, true);
        if rhs.iter().all(|&v| v == 0.0) {
            return Ok(rhs);
        }
        Ok(solve_linear(&a, &rhs)?)
    }

    /// `objective + <residual, dual>`, whose shape derivative at the state
    /// and adjoint is the reduced shape gradient.
    pub fn lagrangian(&self, objective: &FormExpr) -> FormExpr {
        objective.plus(1.0, &self.residual())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{gen_cantilever, gen_channel};
    use approx::assert_relative_eq;

    fn poiseuille_check(problem: &Problem, mesh: &TriMesh) -> (f64, f64) {
        let sol = problem.solve_state(mesh, None).unwrap();
        assert!(sol.converged && !sol.failed_to_solve);
        let space = FunctionSpace::new(mesh, Family::TaylorHood);
        let mut exact = vec![0.0; space.dim()];
        space.interpolate_into(mesh, 0, &mut exact, |p| [1.0 - 4.0 * p[1] * p[1], 0.0]);
        let vdim = space.block(0).dim();
        let err = (0..vdim).map(|i| (sol.state[i] - exact[i]).abs()).fold(0.0, f64::max);
        let j = forms::value(&problem.default_objective(), FormInputs::new(mesh, &space, &sol.state)).unwrap();
        (err, j)
    }

    #[test]
    fn poiseuille_is_reproduced() {
        let mesh = gen_channel(1.0, 1.0, 8, 8).unwrap();
        for problem in [FlowProblem::new(0.1).unwrap(), FlowProblem::new(0.1).unwrap().stokes()] {
            let (err, j) = poiseuille_check(&Problem::Flow(problem), &mesh);
            assert!(err < 1e-8, "profile error {err}");
            assert_relative_eq!(j, 0.1 * 8.0 / 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn stokes_converges_in_one_newton_step() {
        let mesh = gen_channel(2.0, 1.0, 6, 4).unwrap();
        let p = Problem::Flow(FlowProblem::new(1.0).unwrap().stokes().with_viscous(ViscousForm::Symmetric));
        let sol = p.solve_state(&mesh, None).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn tangled_mesh_reports_failure() {
        let mesh = gen_channel(1.0, 1.0, 2, 2).unwrap();
        // push the centre vertex far past the right wall
        let mut disp = vec![0.0; 2 * mesh.num_vertices()];
        disp[2 * 4] = 3.0;
        let tangled = mesh.deform_flat(&disp).unwrap();
        let p = Problem::Flow(FlowProblem::new(0.1).unwrap());
        let sol = p.solve_state(&tangled, None).unwrap();
        assert!(sol.failed_to_solve && !sol.converged);
        let obj = p.default_objective();
        assert!(matches!(p.solve_adjoint(&obj, &tangled, &sol), Err(PdeError::StateNotSolved)));
    }

    #[test]
    fn missing_outlet_is_rejected() {
        let mesh = gen_cantilever(1.0, 1.0, 2, 2).unwrap();
        let p = Problem::Flow(FlowProblem::new(0.1).unwrap());
        assert!(matches!(p.solve_state(&mesh, None), Err(PdeError::MissingMarker(10))));
        assert!(FlowProblem::new(-1.0).is_err());
        assert!(ElasticityProblem::new(1.0, 0.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn elasticity_identities() {
        let mesh = gen_cantilever(2.0, 1.0, 8, 4).unwrap();
        let p = Problem::Elasticity(ElasticityProblem::new(1.0, 1.0, [0.0, -1.0]).unwrap());
        let sol = p.solve_state(&mesh, None).unwrap();
        assert!(sol.converged);
        let space = FunctionSpace::new(&mesh, Family::P1Vector);
        // tip deflection follows the load
        let tip = mesh
            .vertices()
            .iter()
            .position(|v| v[0] == 2.0 && v[1] == 0.5)
            .unwrap();
        assert!(sol.state[2 * tip + 1] < 0.0);
        let compliance = forms::value(&p.default_objective(), FormInputs::new(&mesh, &space, &sol.state)).unwrap();
        let work = forms::value(
            &FormExpr::atom(Atom::BoundaryTraction {
                g: [0.0, -1.0],
                b: Arg::state(0),
                marker: cantilever_markers::LOADED,
            }),
            FormInputs::new(&mesh, &space, &sol.state),
        )
        .unwrap();
        assert_relative_eq!(compliance, work, max_relative = 1e-10);
        let dual = p.solve_adjoint(&p.default_objective(), &mesh, &sol).unwrap();
        for (z, u) in dual.iter().zip(&sol.state) {
            assert!((z + 2.0 * u).abs() <= 1e-10 * norm(&sol.state));
        }
        let vol = p.solve_adjoint(&FormExpr::atom(Atom::VolumeOne), &mesh, &sol).unwrap();
        assert!(vol.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn zero_load_gives_zero_displacement() {
        let mesh = gen_cantilever(2.0, 1.0, 4, 2).unwrap();
        let p = Problem::Elasticity(ElasticityProblem::new(1.0, 1.0, [0.0, 0.0]).unwrap());
        let sol = p.solve_state(&mesh, None).unwrap();
        assert!(sol.converged);
        assert!(sol.state.iter().all(|&u| u == 0.0));
    }
}
