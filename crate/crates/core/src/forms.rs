//! A small form language for the integrands used by the state equations,
//! the objectives and the metrics.
//!
//! A [`FormExpr`] is a weighted sum of [`Atom`]s. Every atom is a scalar
//! integrand of one or more field arguments, so a single expression serves
//! several purposes:
//!
//! * its value is an objective such as dissipation or compliance;
//! * its derivative with respect to the dual field is a PDE residual, and the
//!   derivative of that with respect to the state is the Jacobian;
//! * its derivative with respect to the state is the adjoint right-hand side;
//! * its shape derivative along P1 vertex displacements is the discrete
//!   shape gradient.
//!
//! Shape derivatives hold dof values fixed while vertices move. On affine
//! elements this only needs two rules at each quadrature point,
//! `d(dx) = div W dx` and `d(Du) = -Du DW`, combined with the product rule.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fem::{
    edge_gauss, quadrature, reference_basis, Degree, FunctionSpace, QuadratureRule,
    SparseMatrix, TripletBuilder,
};
use crate::mesh::{ElementGeometry, TriMesh};

#[derive(Debug, Error, PartialEq)]
pub enum FormError {
    #[error("form needs a dual field but none was supplied")]
    MissingDual,
    #[error("field length {got} does not match space dimension {expected}")]
    FieldLength { expected: usize, got: usize },
    #[error("{atom}: argument {arg} is incompatible with block {block} of the space ({reason})")]
    Incompatible {
        atom: &'static str,
        arg: usize,
        block: usize,
        reason: &'static str,
    },
    #[error("traction on marker {0}, which is not geometrically fixed")]
    TractionOnMovingBoundary(u32),
    #[error("marker {0} does not exist on the mesh")]
    UnknownMarker(u32),
    #[error("non-finite coefficient in form")]
    NonFinite,
}

/// Which coefficient vector an argument reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    State,
    Dual,
}

/// A field argument: variable plus block of the (mixed) space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arg {
    pub var: Var,
    pub block: usize,
}

impl Arg {
    pub const fn state(block: usize) -> Self {
        Self {
            var: Var::State,
            block,
        }
    }

    pub const fn dual(block: usize) -> Self {
        Self {
            var: Var::Dual,
            block,
        }
    }
}

/// Integrand atoms. Material parameters live in the atom, scalar weights
/// (viscosity, regularization) in the enclosing [`FormExpr`] term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Atom {
    /// `2 eps(a) : eps(b)`
    SymGradSymGrad(Arg, Arg),
    /// `grad a : grad b`
    GradGrad(Arg, Arg),
    /// `a . b`
    Mass(Arg, Arg),
    /// `sigma(a) : eps(b)` with `sigma(a) = lambda div(a) I + 2 mu eps(a)`
    StressStrain { lambda: f64, mu: f64, a: Arg, b: Arg },
    /// `-p div b`
    PressureDiv(Arg, Arg),
    /// `q div a`
    DivConstraint(Arg, Arg),
    /// `b . (grad a) a`
    Convection(Arg, Arg),
    /// `eps(a) : eps(a)`
    DissipationEnergy(Arg),
    /// `sigma(a) : eps(a)`
    ComplianceEnergy { lambda: f64, mu: f64, a: Arg },
    /// `(dx a1 - dy a2)(dx b1 - dy b2) + (dy a1 + dx a2)(dy b1 + dx b2)`
    CauchyRiemann(Arg, Arg),
    /// `1`
    VolumeOne,
    /// `g . b` on the edges carrying `marker`
    BoundaryTraction { g: [f64; 2], b: Arg, marker: u32 },
}

/// Value and gradient of a (scalar or 2-vector) field at a point;
/// `g[i][j] = d v_i / d x_j`. Scalars use component 0 only.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub v: [f64; 2],
    pub g: [[f64; 2]; 2],
}

#[inline]
fn div(a: &Jet) -> f64 {
    a.g[0][0] + a.g[1][1]
}

#[inline]
fn sym_contract(a: &Jet, b: &Jet) -> f64 {
    // eps(a) : eps(b)
    let a01 = 0.5 * (a.g[0][1] + a.g[1][0]);
    let b01 = 0.5 * (b.g[0][1] + b.g[1][0]);
    a.g[0][0] * b.g[0][0] + a.g[1][1] * b.g[1][1] + 2.0 * a01 * b01
}

#[inline]
fn grad_contract(a: &Jet, b: &Jet) -> f64 {
    a.g[0][0] * b.g[0][0] + a.g[0][1] * b.g[0][1] + a.g[1][0] * b.g[1][0] + a.g[1][1] * b.g[1][1]
}

#[inline]
fn stress_strain(lambda: f64, mu: f64, a: &Jet, b: &Jet) -> f64 {
    lambda * div(a) * div(b) + 2.0 * mu * sym_contract(a, b)
}

#[inline]
fn cauchy_riemann(a: &Jet, b: &Jet) -> f64 {
    (a.g[0][0] - a.g[1][1]) * (b.g[0][0] - b.g[1][1])
        + (a.g[0][1] + a.g[1][0]) * (b.g[0][1] + b.g[1][0])
}

/// `b . (grad a1) a2`
#[inline]
fn trilinear(b: &Jet, a1: &Jet, a2: &Jet) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        s += b.v[i] * (a1.g[i][0] * a2.v[0] + a1.g[i][1] * a2.v[1]);
    }
    s
}

impl Atom {
    pub fn name(&self) -> &'static str {
        match self {
            Atom::SymGradSymGrad(..) => "SymGradSymGrad",
            Atom::GradGrad(..) => "GradGrad",
            Atom::Mass(..) => "Mass",
            Atom::StressStrain { .. } => "StressStrain",
            Atom::PressureDiv(..) => "PressureDiv",
            Atom::DivConstraint(..) => "DivConstraint",
            Atom::Convection(..) => "Convection",
            Atom::DissipationEnergy(..) => "DissipationEnergy",
            Atom::ComplianceEnergy { .. } => "ComplianceEnergy",
            Atom::CauchyRiemann(..) => "CauchyRiemann",
            Atom::VolumeOne => "VolumeOne",
            Atom::BoundaryTraction { .. } => "BoundaryTraction",
        }
    }

    pub fn args(&self) -> Vec<Arg> {
        match *self {
            Atom::SymGradSymGrad(a, b)
            | Atom::GradGrad(a, b)
            | Atom::Mass(a, b)
            | Atom::StressStrain { a, b, .. }
            | Atom::PressureDiv(a, b)
            | Atom::DivConstraint(a, b)
            | Atom::Convection(a, b)
            | Atom::CauchyRiemann(a, b) => vec![a, b],
            Atom::DissipationEnergy(a) | Atom::ComplianceEnergy { a, .. } => vec![a],
            Atom::VolumeOne => vec![],
            Atom::BoundaryTraction { b, .. } => vec![b],
        }
    }

    /// Required number of components per argument (`None`: any).
    fn arg_components(&self) -> Vec<Option<usize>> {
        match self {
            Atom::GradGrad(..) | Atom::Mass(..) => vec![None, None],
            Atom::PressureDiv(..) | Atom::DivConstraint(..) => vec![Some(1), Some(2)],
            Atom::DissipationEnergy(..) | Atom::ComplianceEnergy { .. } => vec![Some(2)],
            Atom::BoundaryTraction { .. } => vec![Some(2)],
            Atom::VolumeOne => vec![],
            _ => vec![Some(2), Some(2)],
        }
    }

    fn is_boundary(&self) -> bool {
        matches!(self, Atom::BoundaryTraction { .. })
    }

    /// Quadrature degree used for value, derivatives and shape derivative.
    fn quadrature_degree(&self, space: &FunctionSpace) -> usize {
        let has_p2 = self
            .args()
            .iter()
            .any(|a| space.block(a.block).degree == Degree::P2);
        let nonlinear = matches!(
            self,
            Atom::Convection(..) | Atom::DissipationEnergy(..) | Atom::ComplianceEnergy { .. }
        );
        if has_p2 || nonlinear {
            4
        } else {
            2
        }
    }

    /// Integrand value.
    pub fn value(&self, j: &[Jet]) -> f64 {
        match *self {
            Atom::SymGradSymGrad(..) => 2.0 * sym_contract(&j[0], &j[1]),
            Atom::GradGrad(..) => grad_contract(&j[0], &j[1]),
            Atom::Mass(..) => j[0].v[0] * j[1].v[0] + j[0].v[1] * j[1].v[1],
            Atom::StressStrain { lambda, mu, .. } => stress_strain(lambda, mu, &j[0], &j[1]),
            Atom::PressureDiv(..) => -j[0].v[0] * div(&j[1]),
            Atom::DivConstraint(..) => j[0].v[0] * div(&j[1]),
            Atom::Convection(..) => trilinear(&j[0], &j[1], &j[1]),
            Atom::DissipationEnergy(..) => sym_contract(&j[0], &j[0]),
            Atom::ComplianceEnergy { lambda, mu, .. } => stress_strain(lambda, mu, &j[0], &j[0]),
            Atom::CauchyRiemann(..) => cauchy_riemann(&j[0], &j[1]),
            Atom::VolumeOne => 1.0,
            Atom::BoundaryTraction { g, .. } => g[0] * j[0].v[0] + g[1] * j[0].v[1],
        }
    }

    /// Partial derivative of the integrand with respect to argument `ia`
    /// in direction `d`.
    pub fn first(&self, j: &[Jet], ia: usize, d: &Jet) -> f64 {
        // bilinear atoms: replace argument `ia` by the direction
        let bilinear = |f: &dyn Fn(&Jet, &Jet) -> f64| {
            if ia == 0 {
                f(d, &j[1])
            } else {
                f(&j[0], d)
            }
        };
        match *self {
            Atom::SymGradSymGrad(..) => bilinear(&|a, b| 2.0 * sym_contract(a, b)),
            Atom::GradGrad(..) => bilinear(&grad_contract),
            Atom::Mass(..) => bilinear(&|a, b| a.v[0] * b.v[0] + a.v[1] * b.v[1]),
            Atom::StressStrain { lambda, mu, .. } => {
                bilinear(&|a, b| stress_strain(lambda, mu, a, b))
            }
            Atom::PressureDiv(..) => bilinear(&|p, b| -p.v[0] * div(b)),
            Atom::DivConstraint(..) => bilinear(&|q, a| q.v[0] * div(a)),
            Atom::CauchyRiemann(..) => bilinear(&cauchy_riemann),
            Atom::Convection(..) => {
                if ia == 0 {
                    trilinear(d, &j[1], &j[1])
                } else {
                    trilinear(&j[0], d, &j[1]) + trilinear(&j[0], &j[1], d)
                }
            }
            Atom::DissipationEnergy(..) => 2.0 * sym_contract(&j[0], d),
            Atom::ComplianceEnergy { lambda, mu, .. } => 2.0 * stress_strain(lambda, mu, &j[0], d),
            Atom::VolumeOne => 0.0,
            Atom::BoundaryTraction { g, .. } => g[0] * d.v[0] + g[1] * d.v[1],
        }
    }

    /// Second partial derivative with respect to arguments `ia` (direction
    /// `da`) and `ib` (direction `db`).
    pub fn second(&self, j: &[Jet], ia: usize, da: &Jet, ib: usize, db: &Jet) -> f64 {
        let bilinear = |f: &dyn Fn(&Jet, &Jet) -> f64| match (ia, ib) {
            (0, 1) => f(da, db),
            (1, 0) => f(db, da),
            _ => 0.0,
        };
        match *self {
            Atom::SymGradSymGrad(..) => bilinear(&|a, b| 2.0 * sym_contract(a, b)),
            Atom::GradGrad(..) => bilinear(&grad_contract),
            Atom::Mass(..) => bilinear(&|a, b| a.v[0] * b.v[0] + a.v[1] * b.v[1]),
            Atom::StressStrain { lambda, mu, .. } => {
                bilinear(&|a, b| stress_strain(lambda, mu, a, b))
            }
            Atom::PressureDiv(..) => bilinear(&|p, b| -p.v[0] * div(b)),
            Atom::DivConstraint(..) => bilinear(&|q, a| q.v[0] * div(a)),
            Atom::CauchyRiemann(..) => bilinear(&cauchy_riemann),
            Atom::Convection(..) => {
                let a = &j[1];
                match (ia, ib) {
                    (0, 0) => 0.0,
                    (0, 1) => trilinear(da, db, a) + trilinear(da, a, db),
                    (1, 0) => trilinear(db, da, a) + trilinear(db, a, da),
                    _ => trilinear(&j[0], da, db) + trilinear(&j[0], db, da),
                }
            }
            Atom::DissipationEnergy(..) => 2.0 * sym_contract(da, db),
            Atom::ComplianceEnergy { lambda, mu, .. } => 2.0 * stress_strain(lambda, mu, da, db),
            Atom::VolumeOne | Atom::BoundaryTraction { .. } => 0.0,
        }
    }
}

/// Weighted sum of atoms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FormExpr {
    terms: Vec<(f64, Atom)>,
}

impl FormExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn atom(atom: Atom) -> Self {
        Self::new().term(1.0, atom)
    }

    pub fn term(mut self, coefficient: f64, atom: Atom) -> Self {
        self.terms.push((coefficient, atom));
        self
    }

    pub fn terms(&self) -> &[(f64, Atom)] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `self + s * other` (terms are concatenated, not merged).
    pub fn plus(&self, s: f64, other: &FormExpr) -> FormExpr {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|&(c, a)| (s * c, a)));
        FormExpr { terms }
    }

    pub fn scaled(&self, s: f64) -> FormExpr {
        FormExpr::new().plus(s, self)
    }

    pub fn uses(&self, var: Var) -> bool {
        self.terms
            .iter()
            .any(|(_, a)| a.args().iter().any(|arg| arg.var == var))
    }

    /// Markers of all traction atoms.
    pub fn traction_markers(&self) -> BTreeSet<u32> {
        self.terms
            .iter()
            .filter_map(|(_, a)| match a {
                Atom::BoundaryTraction { marker, .. } => Some(*marker),
                _ => None,
            })
            .collect()
    }
}

/// Mesh, space and coefficient vectors a form is evaluated with.
#[derive(Debug, Clone, Copy)]
pub struct FormInputs<'a> {
    pub mesh: &'a TriMesh,
    pub space: &'a FunctionSpace,
    pub state: &'a [f64],
    pub dual: Option<&'a [f64]>,
}

impl<'a> FormInputs<'a> {
    pub fn new(mesh: &'a TriMesh, space: &'a FunctionSpace, state: &'a [f64]) -> Self {
        Self {
            mesh,
            space,
            state,
            dual: None,
        }
    }

    pub fn with_dual(mut self, dual: &'a [f64]) -> Self {
        self.dual = Some(dual);
        self
    }

    fn coefficients(&self, var: Var) -> Result<&'a [f64], FormError> {
        match var {
            Var::State => Ok(self.state),
            Var::Dual => self.dual.ok_or(FormError::MissingDual),
        }
    }
}

/// Assembly mode for [`assemble`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Scalar value.
    Value,
    /// Derivative with respect to the dual field (a residual vector).
    Residual,
    /// Derivative of the residual with respect to the state (rows: dual).
    Jacobian,
    /// Derivative with respect to the state.
    StatePartial,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Assembled {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(SparseMatrix),
}

pub fn assemble(form: &FormExpr, inputs: FormInputs<'_>, mode: Mode) -> Result<Assembled, FormError> {
    Ok(match mode {
        Mode::Value => Assembled::Scalar(value(form, inputs)?),
        Mode::Residual => Assembled::Vector(derivative(form, inputs, Var::Dual)?),
        Mode::StatePartial => Assembled::Vector(derivative(form, inputs, Var::State)?),
        Mode::Jacobian => Assembled::Matrix(second_derivative(form, inputs, Var::Dual, Var::State)?),
    })
}

/// Basis tables at the quadrature points of one rule, per degree.
struct Tables {
    rule: QuadratureRule,
    /// [degree][qp] -> (values, reference gradients)
    basis: [Vec<(Vec<f64>, Vec<[f64; 2]>)>; 2],
}

impl Tables {
    fn new(degree: usize) -> Self {
        let rule = quadrature(degree).expect("supported quadrature degree");
        let tab = |d: Degree| rule.points.iter().map(|&p| reference_basis(d, p)).collect();
        let basis = [tab(Degree::P1), tab(Degree::P2)];
        Self { rule, basis }
    }

    fn at(&self, degree: Degree, qp: usize) -> &(Vec<f64>, Vec<[f64; 2]>) {
        match degree {
            Degree::P1 => &self.basis[0][qp],
            Degree::P2 => &self.basis[1][qp],
        }
    }
}

/// Local basis of one argument at one quadrature point on one element.
struct LocalBasis {
    dofs: Vec<usize>,
    /// One jet per local dof (node-major, component-minor).
    jets: Vec<Jet>,
}

fn local_basis(
    space: &FunctionSpace,
    block: usize,
    t: usize,
    geo: &ElementGeometry,
    vals: &[f64],
    grads: &[[f64; 2]],
) -> LocalBasis {
    let b = space.block(block);
    let nodes = space.element_nodes(b.degree, t);
    let mut dofs = Vec::with_capacity(nodes.len() * b.components);
    let mut jets = Vec::with_capacity(nodes.len() * b.components);
    for (k, &n) in nodes.iter().enumerate() {
        let g = geo.push_gradient(grads[k]);
        for c in 0..b.components {
            dofs.push(b.dof(n, c));
            let mut jet = Jet::default();
            jet.v[c] = vals[k];
            jet.g[c] = g;
            jets.push(jet);
        }
    }
    LocalBasis { dofs, jets }
}

fn combine(basis: &LocalBasis, coefficients: &[f64]) -> Jet {
    let mut out = Jet::default();
    for (&dof, jet) in basis.dofs.iter().zip(&basis.jets) {
        let c = coefficients[dof];
        if c == 0.0 {
            continue;
        }
        for i in 0..2 {
            out.v[i] += c * jet.v[i];
            out.g[i][0] += c * jet.g[i][0];
            out.g[i][1] += c * jet.g[i][1];
        }
    }
    out
}

fn validate(form: &FormExpr, inputs: &FormInputs<'_>) -> Result<(), FormError> {
    let space = inputs.space;
    for (c, atom) in form.terms() {
        if !c.is_finite() {
            return Err(FormError::NonFinite);
        }
        for (i, (arg, comps)) in atom.args().iter().zip(atom.arg_components()).enumerate() {
            if arg.block >= space.blocks().len() {
                return Err(FormError::Incompatible {
                    atom: atom.name(),
                    arg: i,
                    block: arg.block,
                    reason: "no such block",
                });
            }
            if let Some(n) = comps {
                if space.block(arg.block).components != n {
                    return Err(FormError::Incompatible {
                        atom: atom.name(),
                        arg: i,
                        block: arg.block,
                        reason: if n == 1 {
                            "expects a scalar field"
                        } else {
                            "expects a vector field"
                        },
                    });
                }
            }
            let coeffs = inputs.coefficients(arg.var)?;
            if coeffs.len() != space.dim() {
                return Err(FormError::FieldLength {
                    expected: space.dim(),
                    got: coeffs.len(),
                });
            }
        }
        if let Atom::BoundaryTraction { marker, .. } = atom {
            if !space.has_marker(*marker) {
                return Err(FormError::UnknownMarker(*marker));
            }
        }
    }
    Ok(())
}

/// Calls `f(t, geo, qp_weight_times_det, bases, jets)` for every quadrature
/// point of every element, for one volume atom.
fn for_each_point(
    atom: &Atom,
    inputs: &FormInputs<'_>,
    tables: &Tables,
    mut f: impl FnMut(usize, &ElementGeometry, f64, &[LocalBasis], &[Jet]),
) -> Result<(), FormError> {
    let args = atom.args();
    let coeffs: Vec<&[f64]> = args
        .iter()
        .map(|a| inputs.coefficients(a.var))
        .collect::<Result<_, _>>()?;
    for t in 0..inputs.mesh.num_triangles() {
        let geo = inputs.mesh.geometry(t);
        for (q, w) in tables.rule.weights.iter().enumerate() {
            let bases: Vec<LocalBasis> = args
                .iter()
                .map(|a| {
                    let (vals, grads) = tables.at(inputs.space.block(a.block).degree, q);
                    local_basis(inputs.space, a.block, t, &geo, vals, grads)
                })
                .collect();
            let jets: Vec<Jet> = bases
                .iter()
                .zip(&coeffs)
                .map(|(b, c)| combine(b, c))
                .collect();
            f(t, &geo, w * geo.det, &bases, &jets);
        }
    }
    Ok(())
}

/// Owning triangle and local vertex positions of every boundary edge with
/// `marker`.
fn marked_edges(mesh: &TriMesh, marker: u32) -> Vec<(usize, usize, usize)> {
    let mut owner: BTreeMap<(usize, usize), (usize, usize, usize)> = BTreeMap::new();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            owner.insert((a, b), (t, k, (k + 1) % 3));
            owner.insert((b, a), (t, (k + 1) % 3, k));
        }
    }
    mesh.boundary_edges()
        .iter()
        .filter(|e| e.marker == marker)
        .map(|e| owner[&(e.vertices[0], e.vertices[1])])
        .collect()
}

const REF_VERTS: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

/// Calls `f(length_weight, basis, jet)` for every edge quadrature point of a
/// traction atom.
fn for_each_edge_point(
    atom: &Atom,
    inputs: &FormInputs<'_>,
    mut f: impl FnMut(f64, &LocalBasis, &Jet),
) -> Result<(), FormError> {
    let Atom::BoundaryTraction { b, marker, .. } = *atom else {
        return Ok(());
    };
    let coeffs = inputs.coefficients(b.var)?;
    let degree = inputs.space.block(b.block).degree;
    for (t, la, lb) in marked_edges(inputs.mesh, marker) {
        let tri = inputs.mesh.triangles()[t];
        let (p, q) = (inputs.mesh.vertices()[tri[la]], inputs.mesh.vertices()[tri[lb]]);
        let length = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        let geo = inputs.mesh.geometry(t);
        for (s, w) in edge_gauss() {
            let x = [
                (1.0 - s) * REF_VERTS[la][0] + s * REF_VERTS[lb][0],
                (1.0 - s) * REF_VERTS[la][1] + s * REF_VERTS[lb][1],
            ];
            let (vals, grads) = reference_basis(degree, x);
            let basis = local_basis(inputs.space, b.block, t, &geo, &vals, &grads);
            let jet = combine(&basis, coeffs);
            f(w * length, &basis, &jet);
        }
    }
    Ok(())
}

/// Scalar value of the form.
pub fn value(form: &FormExpr, inputs: FormInputs<'_>) -> Result<f64, FormError> {
    validate(form, &inputs)?;
    let mut total = 0.0;
    for (coef, atom) in form.terms() {
        let mut sum = 0.0;
        if atom.is_boundary() {
            for_each_edge_point(atom, &inputs, |w, _, jet| {
                sum += w * atom.value(std::slice::from_ref(jet));
            })?;
        } else {
            let tables = Tables::new(atom.quadrature_degree(inputs.space));
            for_each_point(atom, &inputs, &tables, |_, _, wdet, _, jets| {
                sum += wdet * atom.value(jets);
            })?;
        }
        total += coef * sum;
    }
    Ok(total)
}

/// Gradient of the form with respect to all dofs of `wrt`.
pub fn derivative(form: &FormExpr, inputs: FormInputs<'_>, wrt: Var) -> Result<Vec<f64>, FormError> {
    validate(form, &inputs)?;
    inputs.coefficients(wrt)?;
    let mut out = vec![0.0; inputs.space.dim()];
    for (coef, atom) in form.terms() {
        let args = atom.args();
        if atom.is_boundary() {
            if args[0].var == wrt {
                for_each_edge_point(atom, &inputs, |w, basis, jet| {
                    let jets = std::slice::from_ref(jet);
                    for (&dof, d) in basis.dofs.iter().zip(&basis.jets) {
                        out[dof] += coef * w * atom.first(jets, 0, d);
                    }
                })?;
            }
            continue;
        }
        if !args.iter().any(|a| a.var == wrt) {
            continue;
        }
        let tables = Tables::new(atom.quadrature_degree(inputs.space));
        for_each_point(atom, &inputs, &tables, |_, _, wdet, bases, jets| {
            for (ia, arg) in args.iter().enumerate() {
                if arg.var != wrt {
                    continue;
                }
                for (&dof, d) in bases[ia].dofs.iter().zip(&bases[ia].jets) {
                    out[dof] += coef * wdet * atom.first(jets, ia, d);
                }
            }
        })?;
    }
    Ok(out)
}

/// Matrix of second derivatives; rows follow `row`, columns follow `col`.
pub fn second_derivative(
    form: &FormExpr,
    inputs: FormInputs<'_>,
    row: Var,
    col: Var,
) -> Result<SparseMatrix, FormError> {
    validate(form, &inputs)?;
    inputs.coefficients(row)?;
    inputs.coefficients(col)?;
    let n = inputs.space.dim();
    let mut builder = TripletBuilder::new(n, n);
    for (coef, atom) in form.terms() {
        if atom.is_boundary() || matches!(atom, Atom::VolumeOne) {
            continue;
        }
        let args = atom.args();
        let pairs: Vec<(usize, usize)> = (0..args.len())
            .flat_map(|ia| (0..args.len()).map(move |ib| (ia, ib)))
            .filter(|&(ia, ib)| args[ia].var == row && args[ib].var == col)
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let tables = Tables::new(atom.quadrature_degree(inputs.space));
        // element matrices are accumulated over quadrature points first
        let mut current: Option<usize> = None;
        let mut local: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let flush = |local: &mut BTreeMap<(usize, usize), f64>, b: &mut TripletBuilder| {
            for ((i, j), v) in std::mem::take(local) {
                b.push(i, j, v);
            }
        };
        for_each_point(atom, &inputs, &tables, |t, _, wdet, bases, jets| {
            if current != Some(t) {
                flush(&mut local, &mut builder);
                current = Some(t);
            }
            for &(ia, ib) in &pairs {
                for (&di, da) in bases[ia].dofs.iter().zip(&bases[ia].jets) {
                    for (&dj, db) in bases[ib].dofs.iter().zip(&bases[ib].jets) {
                        let v = atom.second(jets, ia, da, ib, db);
                        if v != 0.0 {
                            *local.entry((di, dj)).or_default() += coef * wdet * v;
                        }
                    }
                }
            }
        })?;
        flush(&mut local, &mut builder);
    }
    Ok(builder.build())
}

/// Discrete shape derivative: entry `2k + c` is the derivative of the form
/// value when vertex `k` moves in direction `c`, dof values held fixed.
///
/// Traction atoms contribute nothing and are only allowed on markers listed
/// in `fixed_markers`.
pub fn shape_derivative(
    form: &FormExpr,
    inputs: FormInputs<'_>,
    fixed_markers: &BTreeSet<u32>,
) -> Result<Vec<f64>, FormError> {
    validate(form, &inputs)?;
    for m in form.traction_markers() {
        if !fixed_markers.contains(&m) {
            return Err(FormError::TractionOnMovingBoundary(m));
        }
    }
    let mesh = inputs.mesh;
    let mut out = vec![0.0; 2 * mesh.num_vertices()];
    for (coef, atom) in form.terms() {
        if atom.is_boundary() {
            continue;
        }
        let nargs = atom.args().len();
        let tables = Tables::new(atom.quadrature_degree(inputs.space));
        for_each_point(atom, &inputs, &tables, |t, geo, wdet, _, jets| {
            let f = atom.value(jets);
            let tri = mesh.triangles()[t];
            let grads = geo.p1_gradients();
            for (k, &vertex) in tri.iter().enumerate() {
                for c in 0..2 {
                    // W = lambda_k e_c: div W = d_c lambda_k, DW = e_c (x) grad lambda_k
                    let mut d = f * grads[k][c];
                    for ia in 0..nargs {
                        let g = &jets[ia].g;
                        let mut dj = Jet::default();
                        for i in 0..2 {
                            for jj in 0..2 {
                                dj.g[i][jj] = -g[i][c] * grads[k][jj];
                            }
                        }
                        d += atom.first(jets, ia, &dj);
                    }
                    out[2 * vertex + c] += coef * wdet * d;
                }
            }
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Family;
    use crate::mesh::{gen_cantilever, gen_channel, Point};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_right_triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![],
        )
        .unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn p1_mass_and_stiffness_on_reference_triangle() {
        let m = unit_right_triangle();
        let s = FunctionSpace::new(&m, Family::P1);
        let zero = vec![0.0; 3];
        let inputs = FormInputs::new(&m, &s, &zero).with_dual(&zero);
        let mass = FormExpr::atom(Atom::Mass(Arg::dual(0), Arg::state(0)));
        let mm = second_derivative(&mass, inputs, Var::Dual, Var::State).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 / 12.0 } else { 1.0 / 24.0 };
                assert_relative_eq!(mm[i][j], expected, epsilon = 1e-15);
            }
        }
        let stiff = FormExpr::atom(Atom::GradGrad(Arg::dual(0), Arg::state(0)));
        let k = second_derivative(&stiff, inputs, Var::Dual, Var::State).unwrap().to_dense();
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(k[i][j], expected[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn volume_of_unit_square() {
        let m = gen_cantilever(1.0, 1.0, 4, 4).unwrap();
        let s = FunctionSpace::new(&m, Family::P1);
        let z = vec![0.0; s.dim()];
        let v = value(&FormExpr::atom(Atom::VolumeOne), FormInputs::new(&m, &s, &z)).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn volume_shape_derivative() {
        let m = gen_cantilever(1.0, 1.0, 4, 4).unwrap();
        let s = FunctionSpace::new(&m, Family::P1);
        let z = vec![0.0; s.dim()];
        let vol = FormExpr::atom(Atom::VolumeOne);
        let dv = shape_derivative(&vol, FormInputs::new(&m, &s, &z), &BTreeSet::new()).unwrap();
        let along = |w: &dyn Fn(Point) -> [f64; 2]| -> f64 {
            m.vertices()
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let v = w(p);
                    dv[2 * k] * v[0] + dv[2 * k + 1] * v[1]
                })
                .sum()
        };
        assert_relative_eq!(along(&|p| [p[0], 0.0]), 1.0, epsilon = 1e-14);
        assert_relative_eq!(along(&|_| [0.3, -0.7]), 0.0, epsilon = 1e-14);
        // equals the assembled vector of int div(phi) over P1 vector basis functions
        let mut assembled = vec![0.0; 2 * m.num_vertices()];
        for t in 0..m.num_triangles() {
            let geo = m.geometry(t);
            let g = geo.p1_gradients();
            for (k, &v) in m.triangles()[t].iter().enumerate() {
                for c in 0..2 {
                    assembled[2 * v + c] += geo.area() * g[k][c];
                }
            }
        }
        for (a, b) in dv.iter().zip(&assembled) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobian_is_derivative_of_residual() {
        let m = gen_channel(1.0, 1.0, 3, 2).unwrap();
        let s = FunctionSpace::new(&m, Family::TaylorHood);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_vec(&mut rng, s.dim());
        let w = random_vec(&mut rng, s.dim());
        let zero = vec![0.0; s.dim()];
        let form = FormExpr::new()
            .term(0.3, Atom::SymGradSymGrad(Arg::state(0), Arg::dual(0)))
            .term(1.0, Atom::PressureDiv(Arg::state(1), Arg::dual(0)))
            .term(1.0, Atom::DivConstraint(Arg::dual(1), Arg::state(0)))
            .term(1.0, Atom::Convection(Arg::dual(0), Arg::state(0)));
        let jac = second_derivative(&form, FormInputs::new(&m, &s, &u).with_dual(&zero), Var::Dual, Var::State)
            .unwrap();
        let jw = jac.matvec(&w);
        let h = 1e-6;
        let up: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - h * b).collect();
        let rp = derivative(&form, FormInputs::new(&m, &s, &up).with_dual(&zero), Var::Dual).unwrap();
        let rm = derivative(&form, FormInputs::new(&m, &s, &um).with_dual(&zero), Var::Dual).unwrap();
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err: f64 = fd.iter().zip(&jw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = jw.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / scale < 1e-8, "relative error {}", err / scale);
    }

    #[test]
    fn state_partial_of_quadratic_energy() {
        let m = gen_cantilever(2.0, 1.0, 4, 2).unwrap();
        let s = FunctionSpace::new(&m, Family::P1Vector);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_vec(&mut rng, s.dim());
        let w = random_vec(&mut rng, s.dim());
        let energy = FormExpr::atom(Atom::ComplianceEnergy {
            lambda: 1.0,
            mu: 1.0,
            a: Arg::state(0),
        });
        let grad = derivative(&energy, FormInputs::new(&m, &s, &u), Var::State).unwrap();
        let pairing = FormExpr::atom(Atom::StressStrain {
            lambda: 1.0,
            mu: 1.0,
            a: Arg::state(0),
            b: Arg::dual(0),
        });
        let bilinear = value(&pairing, FormInputs::new(&m, &s, &u).with_dual(&w)).unwrap();
        let g_w: f64 = grad.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert_relative_eq!(g_w, 2.0 * bilinear, max_relative = 1e-13);
        let vol = derivative(&FormExpr::atom(Atom::VolumeOne), FormInputs::new(&m, &s, &u), Var::State)
            .unwrap();
        assert!(vol.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dissipation_state_partial_matches_finite_differences() {
        let m = gen_channel(1.0, 1.0, 3, 3).unwrap();
        let s = FunctionSpace::new(&m, Family::P2Vector);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_vec(&mut rng, s.dim());
        let w = random_vec(&mut rng, s.dim());
        let j = FormExpr::atom(Atom::DissipationEnergy(Arg::state(0)));
        let grad = derivative(&j, FormInputs::new(&m, &s, &u), Var::State).unwrap();
        let exact: f64 = grad.iter().zip(&w).map(|(a, b)| a * b).sum();
        let h = 1e-6;
        let at = |e: f64| {
            let x: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + e * b).collect();
            value(&j, FormInputs::new(&m, &s, &x)).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(((fd - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn incompatible_pairing_and_missing_dual() {
        let m = gen_channel(1.0, 1.0, 2, 2).unwrap();
        let s = FunctionSpace::new(&m, Family::TaylorHood);
        let z = vec![0.0; s.dim()];
        let bad = FormExpr::atom(Atom::PressureDiv(Arg::state(0), Arg::dual(0)));
        assert!(matches!(
            value(&bad, FormInputs::new(&m, &s, &z).with_dual(&z)),
            Err(FormError::Incompatible { .. })
        ));
        let needs_dual = FormExpr::atom(Atom::SymGradSymGrad(Arg::state(0), Arg::dual(0)));
        assert_eq!(
            value(&needs_dual, FormInputs::new(&m, &s, &z)),
            Err(FormError::MissingDual)
        );
    }

    #[test]
    fn traction_requires_fixed_marker() {
        let m = gen_cantilever(2.0, 1.0, 4, 2).unwrap();
        let s = FunctionSpace::new(&m, Family::P1Vector);
        let z = vec![0.0; s.dim()];
        let f = FormExpr::atom(Atom::BoundaryTraction {
            g: [0.0, -1.0],
            b: Arg::state(0),
            marker: 2,
        });
        let inputs = FormInputs::new(&m, &s, &z);
        assert_eq!(
            shape_derivative(&f, inputs, &BTreeSet::new()),
            Err(FormError::TractionOnMovingBoundary(2))
        );
        let d = shape_derivative(&f, inputs, &BTreeSet::from([2])).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        // traction work of a unit vertical field equals -height
        let up: Vec<f64> = (0..s.dim()).map(|i| (i % 2) as f64).collect();
        assert_relative_eq!(value(&f, FormInputs::new(&m, &s, &up)).unwrap(), -1.0, epsilon = 1e-14);
    }

    /// Value of `form` on the mesh moved by `eps * w`, dof values held fixed.
    fn moved_value(form: &FormExpr, m: &TriMesh, family: Family, u: &[f64], dual: &[f64], w: &[f64], eps: f64) -> f64 {
        let disp: Vec<f64> = w.iter().map(|x| eps * x).collect();
        let moved = m.deform_flat(&disp).unwrap();
        let s = FunctionSpace::new(&moved, family);
        value(form, FormInputs::new(&moved, &s, u).with_dual(dual)).unwrap()
    }

    fn flow_lagrangian() -> FormExpr {
        FormExpr::new()
            .term(0.1, Atom::DissipationEnergy(Arg::state(0)))
            .term(0.1, Atom::SymGradSymGrad(Arg::state(0), Arg::dual(0)))
            .term(1.0, Atom::Convection(Arg::dual(0), Arg::state(0)))
            .term(1.0, Atom::PressureDiv(Arg::state(1), Arg::dual(0)))
            .term(1.0, Atom::DivConstraint(Arg::dual(1), Arg::state(0)))
            .term(0.5, Atom::VolumeOne)
    }

    #[test]
    fn dissipation_shape_derivative_matches_finite_differences() {
        let m = gen_channel(1.0, 1.0, 4, 3).unwrap();
        let s = FunctionSpace::new(&m, Family::P2Vector);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_vec(&mut rng, s.dim());
        let w: Vec<f64> = random_vec(&mut rng, 2 * m.num_vertices()).iter().map(|x| 0.05 * x).collect();
        let j = FormExpr::atom(Atom::DissipationEnergy(Arg::state(0)));
        let dj = shape_derivative(&j, FormInputs::new(&m, &s, &u), &BTreeSet::new()).unwrap();
        let exact: f64 = dj.iter().zip(&w).map(|(a, b)| a * b).sum();
        let eps = 1e-6;
        let fd = (moved_value(&j, &m, Family::P2Vector, &u, &u, &w, eps)
            - moved_value(&j, &m, Family::P2Vector, &u, &u, &w, -eps))
            / (2.0 * eps);
        assert!(((fd - exact) / exact).abs() < 1e-6, "fd {fd} exact {exact}");
    }

    #[test]
    fn shape_remainder_is_second_order() {
        let m = gen_channel(1.0, 1.0, 3, 3).unwrap();
        let s = FunctionSpace::new(&m, Family::TaylorHood);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_vec(&mut rng, s.dim());
        let z = random_vec(&mut rng, s.dim());
        let w: Vec<f64> = random_vec(&mut rng, 2 * m.num_vertices()).iter().map(|x| 0.1 * x).collect();
        let form = flow_lagrangian();
        let dl = shape_derivative(&form, FormInputs::new(&m, &s, &u).with_dual(&z), &BTreeSet::new()).unwrap();
        let slope: f64 = dl.iter().zip(&w).map(|(a, b)| a * b).sum();
        let base = moved_value(&form, &m, Family::TaylorHood, &u, &z, &w, 0.0);
        let remainder = |eps: f64| {
            (moved_value(&form, &m, Family::TaylorHood, &u, &z, &w, eps) - base - eps * slope).abs()
        };
        let eps = 1e-2;
        let ratio = remainder(eps) / remainder(eps / 2.0);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn shape_derivative_is_linear_in_the_form() {
        let m = gen_channel(1.0, 1.0, 3, 2).unwrap();
        let s = FunctionSpace::new(&m, Family::TaylorHood);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = random_vec(&mut rng, s.dim());
        let z = random_vec(&mut rng, s.dim());
        let inputs = FormInputs::new(&m, &s, &u).with_dual(&z);
        let f = FormExpr::atom(Atom::DissipationEnergy(Arg::state(0)));
        let g = flow_lagrangian();
        let (a, b) = (0.7, -1.3);
        let combined = f.scaled(a).plus(b, &g);
        let lhs = shape_derivative(&combined, inputs, &BTreeSet::new()).unwrap();
        let df = shape_derivative(&f, inputs, &BTreeSet::new()).unwrap();
        let dg = shape_derivative(&g, inputs, &BTreeSet::new()).unwrap();
        for k in 0..lhs.len() {
            assert_relative_eq!(lhs[k], a * df[k] + b * dg[k], epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn p1_stiffness_is_symmetric_and_reorder_invariant() {
        let m = gen_cantilever(2.0, 1.0, 4, 3).unwrap();
        let mut tris = m.triangles().to_vec();
        tris.reverse();
        let r = TriMesh::new(m.vertices().to_vec(), tris, m.boundary_edges().to_vec()).unwrap();
        let k_of = |mesh: &TriMesh| {
            let s = FunctionSpace::new(mesh, Family::P1Vector);
            let z = vec![0.0; s.dim()];
            let f = FormExpr::atom(Atom::StressStrain { lambda: 1.0, mu: 1.0, a: Arg::state(0), b: Arg::dual(0) });
            second_derivative(&f, FormInputs::new(mesh, &s, &z).with_dual(&z), Var::Dual, Var::State).unwrap()
        };
        let (k, kr) = (k_of(&m), k_of(&r));
        assert!(k.asymmetry() < 1e-13);
        for (i, j, v) in k.triplets() {
            assert_relative_eq!(v, kr.get(i, j), epsilon = 1e-13);
        }
    }
}
