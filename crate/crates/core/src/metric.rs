//! Inner products on the control space and the Riesz map.
//!
//! The Gram matrix is the finite element operator on the base mesh pulled
//! back through the control map, `G = M^T A M + delta I`, factorized once.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::control::ControlMap;
use crate::fem::{apply_dirichlet, dot, Factorization, Family, FunctionSpace, SolveError, SparseMatrix};
use crate::forms::{self, Arg, Atom, FormError, FormExpr, FormInputs, Var};
use crate::mesh::TriMesh;

/// Relative size of the diagonal shift added to the projected operator.
pub const GRAM_SHIFT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("Gram matrix has non-finite entries")]
    NonFinite,
    #[error("Cauchy-Riemann weight must be finite and nonnegative, got {0}")]
    InvalidWeight(f64),
    #[error("Gram matrix is {rows}x{cols}, vector has length {len}")]
    Dimension { rows: usize, cols: usize, len: usize },
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricKind {
    H1,
    Laplace,
    #[default]
    Elasticity,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub cauchy_riemann_weight: f64,
    /// Markers whose vertex dofs are removed from the operator.
    pub fixed_markers: BTreeSet<u32>,
}

impl MetricSpec {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Bilinear form on the P1 vector space.
    pub fn form(&self) -> FormExpr {
        let (v, w) = (Arg::state(0), Arg::dual(0));
        let mut form = match self.kind {
            MetricKind::Laplace => FormExpr::atom(Atom::GradGrad(v, w)),
            MetricKind::H1 => FormExpr::atom(Atom::GradGrad(v, w)).term(1.0, Atom::Mass(v, w)),
            MetricKind::Elasticity => FormExpr::new().term(0.5, Atom::SymGradSymGrad(v, w)),
        };
        if self.cauchy_riemann_weight != 0.0 {
            form = form.term(self.cauchy_riemann_weight, Atom::CauchyRiemann(v, w));
        }
        form
    }

    /// Operator `A` on the P1 vector space of `mesh`, fixed rows and columns
    /// eliminated (unit diagonal there).
    pub fn assemble_operator(&self, mesh: &TriMesh) -> Result<SparseMatrix, MetricError> {
        if !(self.cauchy_riemann_weight.is_finite() && self.cauchy_riemann_weight >= 0.0) {
            return Err(MetricError::InvalidWeight(self.cauchy_riemann_weight));
        }
        let space = FunctionSpace::new(mesh, Family::P1Vector);
        let zero = vec![0.0; space.dim()];
        let a = forms::second_derivative(
            &self.form(),
            FormInputs::new(mesh, &space, &zero).with_dual(&zero),
            Var::Dual,
            Var::State,
        )?;
        let fixed: BTreeMap<usize, f64> = mesh
            .marked_vertices(&self.fixed_markers)
            .into_iter()
            .flat_map(|k| [(2 * k, 0.0), (2 * k + 1, 0.0)])
            .collect();
        if fixed.is_empty() {
            return Ok(a);
        }
        let mut rhs = zero;
        Ok(apply_dirichlet(&a, &mut rhs, &fixed, true))
    }
}

/// Symmetric positive definite Gram matrix with a cached factorization.
#[derive(Debug, Clone)]
pub struct GramOperator {
    matrix: SparseMatrix,
    shift: f64,
    factorization: Arc<Factorization>,
}

impl GramOperator {
    /// Uses `matrix` as is (no shift).
    pub fn from_matrix(matrix: SparseMatrix) -> Result<Self, MetricError> {
        Self::with_shift(matrix, 0.0)
    }

    fn with_shift(projected: SparseMatrix, shift: f64) -> Result<Self, MetricError> {
        let n = projected.nrows();
        let matrix = if shift > 0.0 {
            projected.add_scaled(&SparseMatrix::identity(n), shift)
        } else {
            projected
        };
        if !matrix.is_finite() {
            return Err(MetricError::NonFinite);
        }
        let factorization = Arc::new(Factorization::new(&matrix)?);
        Ok(Self {
            matrix,
            shift,
            factorization,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Diagonal shift `delta` included in [`Self::matrix`].
    pub fn shift(&self) -> f64 {
        self.shift
    }

    fn check(&self, v: &[f64]) -> Result<(), MetricError> {
        if v.len() != self.dim() {
            return Err(MetricError::Dimension {
                rows: self.dim(),
                cols: self.dim(),
                len: v.len(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.matvec(v)
    }

    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>, MetricError> {
        self.check(g)?;
        if g.iter().all(|&x| x == 0.0) {
            return Ok(vec![0.0; g.len()]);
        }
        Ok(self.factorization.solve(g)?)
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, &self.apply(b))
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    /// Norm of a dual vector, `sqrt(g^T G^{-1} g)`.
    pub fn dual_norm(&self, g: &[f64]) -> Result<f64, MetricError> {
        let r = self.solve(g)?;
        Ok(dot(g, &r).max(0.0).sqrt())
    }

    /// Riesz representative of `-g`: solves `G d = -g`.
    pub fn riesz_descent(&self, g: &[f64]) -> Result<Vec<f64>, MetricError> {
        Ok(self.solve(g)?.into_iter().map(|x| -x).collect())
    }
}

/// `M^T A M + delta I` with `delta = GRAM_SHIFT * trace / dim`.
pub fn assemble_gram(metric: &MetricSpec, map: &ControlMap, base: &TriMesh) -> Result<GramOperator, MetricError> {
    let projected = project(&metric.assemble_operator(base)?, map, &metric.fixed_markers, base);
    let n = projected.nrows();
    let shift = if n == 0 { 0.0 } else { GRAM_SHIFT * projected.trace() / n as f64 };
    GramOperator::with_shift(projected, shift)
}

/// `M^T A M`, skipping the unit diagonal left on eliminated rows.
fn project(a: &SparseMatrix, map: &ControlMap, fixed_markers: &BTreeSet<u32>, base: &TriMesh) -> SparseMatrix {
    let m = map.matrix();
    let fixed: BTreeSet<usize> = base
        .marked_vertices(fixed_markers)
        .into_iter()
        .flat_map(|k| [2 * k, 2 * k + 1])
        .collect();
    let mut cleaned = crate::fem::TripletBuilder::new(a.nrows(), a.ncols());
    for (i, j, v) in a.triplets() {
        if !fixed.contains(&i) && !fixed.contains(&j) {
            cleaned.push(i, j, v);
        }
    }
    let a = cleaned.build();
    m.transpose().matmul(&a.matmul(m))
}
