//! Augmented-Lagrangian outer loop around a trust-region solver with an
//! L-BFGS model and truncated (Steihaug) conjugate gradients. Every norm and
//! inner product is taken in the metric given by a [`GramOperator`].

use thiserror::Error;

use crate::fem::dot;
use crate::functional::{FunctionalError, ReducedFunctional, VolumeConstraint};
use crate::metric::{GramOperator, MetricError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective evaluation failed: {0}")]
    Evaluation(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("start vector has length {got}, metric has dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<FunctionalError> for OptimError {
    fn from(e: FunctionalError) -> Self {
        OptimError::Evaluation(e.to_string())
    }
}

/// Diagnostics attached to an accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub objective: f64,
    pub penalty: f64,
    pub min_det_ratio: f64,
}

/// A smooth objective with at most one equality constraint. `value` may
/// return NaN to signal an infeasible point.
pub trait OptProblem {
    fn dim(&self) -> usize;
    fn value(&mut self, x: &[f64]) -> Result<f64, OptimError>;
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError>;
    fn constraint(&mut self, _x: &[f64]) -> Result<f64, OptimError> {
        Ok(0.0)
    }
    fn constraint_gradient(&mut self, _x: &[f64]) -> Result<Vec<f64>, OptimError> {
        Ok(vec![0.0; self.dim()])
    }
    fn diagnostics(&mut self, x: &[f64]) -> Result<Diagnostics, OptimError> {
        Ok(Diagnostics {
            objective: self.value(x)?,
            penalty: f64::NAN,
            min_det_ratio: f64::NAN,
        })
    }
}

/// Reduced functional plus optional volume constraint.
#[derive(Debug, Clone)]
pub struct ShapeProblem {
    pub functional: ReducedFunctional,
    pub volume: Option<VolumeConstraint>,
}

impl OptProblem for ShapeProblem {
    fn dim(&self) -> usize {
        self.functional.dim()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64, OptimError> {
        Ok(self.functional.value(x)?)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError> {
        Ok(self.functional.gradient(x)?)
    }

    fn constraint(&mut self, x: &[f64]) -> Result<f64, OptimError> {
        match &self.volume {
            Some(v) => Ok(v.value(x)?),
            None => Ok(0.0),
        }
    }

    fn constraint_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError> {
        match &self.volume {
            Some(v) => Ok(v.gradient(x)?),
            None => Ok(vec![0.0; self.dim()]),
        }
    }

    fn diagnostics(&mut self, x: &[f64]) -> Result<Diagnostics, OptimError> {
        let ev = self.functional.evaluate(x)?;
        Ok(Diagnostics {
            objective: ev.objective,
            penalty: ev.penalty,
            min_det_ratio: ev.min_det_ratio,
        })
    }
}

/// Why a solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient (and constraint) tolerances met.
    Converged,
    /// Trust radius or accepted step fell below `step_min`.
    StepTooSmall,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionParams {
    /// Initial radius in the metric norm.
    pub initial_radius: f64,
    pub max_radius: f64,
    pub step_min: f64,
    pub accept: f64,
    pub shrink_below: f64,
    pub grow_above: f64,
    pub memory: usize,
    pub max_iterations: usize,
    pub max_cg_iterations: usize,
}

impl Default for TrustRegionParams {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            max_radius: 1e3,
            step_min: 1e-4,
            accept: 1e-4,
            shrink_below: 0.25,
            grow_above: 0.75,
            memory: 10,
            max_iterations: 100,
            max_cg_iterations: 200,
        }
    }
}

/// One accepted iterate (or the starting point).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub objective: f64,
    pub constraint: f64,
    pub penalty: f64,
    pub multiplier: f64,
    pub tr_radius: f64,
    pub step_norm: f64,
    pub grad_norm: f64,
    pub min_det_ratio: f64,
}

/// L-BFGS approximation `B = gamma G + sum (b b^T - a a^T)` in unrolled
/// form; pairs `(s, y)` with `s^T y > 0` only.
#[derive(Debug, Clone)]
pub struct LbfgsModel {
    memory: usize,
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    gamma: f64,
    scaled: bool,
    terms: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LbfgsModel {
    pub fn new(memory: usize) -> Self {
        Self {
            memory,
            pairs: Vec::new(),
            gamma: 1.0,
            scaled: false,
            terms: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Drops all pairs; the scaling of `B0` is kept.
    pub fn clear(&mut self) {
        self.pairs.clear();
        self.terms.clear();
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Whether `gamma` has been set by curvature or explicitly.
    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    /// Sets the scaling of `B0 = gamma G` while no pairs are stored.
    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
        self.scaled = true;
        self.rebuild_terms_with(None);
    }

    /// Stores `(s, y)` if `s^T y > 0`; returns whether it was kept.
    pub fn update(&mut self, g: &GramOperator, s: Vec<f64>, y: Vec<f64>) -> Result<bool, OptimError> {
        let sy = dot(&s, &y);
        let scale = g.norm(&s) * g.dual_norm(&y)?;
        if !(sy > f64::EPSILON * scale) {
            return Ok(false);
        }
        let yhy = dot(&y, &g.solve(&y)?);
        self.gamma = yhy / sy;
        self.scaled = true;
        if self.pairs.len() == self.memory {
            self.pairs.remove(0);
        }
        self.pairs.push((s, y));
        self.rebuild_terms_with(Some(g));
        Ok(true)
    }

    fn rebuild_terms_with(&mut self, g: Option<&GramOperator>) {
        self.terms.clear();
        let Some(g) = g else {
            return;
        };
        for k in 0..self.pairs.len() {
            let (s, y) = &self.pairs[k];
            let bs = self.apply_terms(g, s, k);
            let sbs = dot(s, &bs);
            let sy = dot(s, y);
            let a: Vec<f64> = bs.iter().map(|v| v / sbs.sqrt()).collect();
            let b: Vec<f64> = y.iter().map(|v| v / sy.sqrt()).collect();
            self.terms.push((a, b));
        }
    }

    fn apply_terms(&self, g: &GramOperator, v: &[f64], upto: usize) -> Vec<f64> {
        let mut out: Vec<f64> = g.apply(v).into_iter().map(|x| self.gamma * x).collect();
        for (a, b) in &self.terms[..upto] {
            let (ca, cb) = (dot(a, v), dot(b, v));
            for i in 0..out.len() {
                out[i] += cb * b[i] - ca * a[i];
            }
        }
        out
    }

    /// `B v`.
    pub fn apply(&self, g: &GramOperator, v: &[f64]) -> Vec<f64> {
        self.apply_terms(g, v, self.terms.len())
    }
}

/// Step `s` with `||s||_G = delta` along `p` from `s0`: the positive root of
/// `||s0 + tau p||^2 = delta^2`.
fn to_boundary(g: &GramOperator, s: &[f64], p: &[f64], delta: f64) -> Vec<f64> {
    let gp = g.apply(p);
    let pp = dot(p, &gp);
    let sp = dot(s, &gp);
    let ss = g.inner(s, s);
    let disc = (sp * sp + pp * (delta * delta - ss)).max(0.0);
    let tau = (-sp + disc.sqrt()) / pp;
    s.iter().zip(p).map(|(a, b)| a + tau * b).collect()
}

/// Truncated CG on `g^T s + s^T B s / 2` within `||s||_G <= delta`,
/// preconditioned with `G`. Returns the step and whether it hit the boundary.
pub fn steihaug_cg(
    model: &LbfgsModel,
    metric: &GramOperator,
    grad: &[f64],
    delta: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, bool), OptimError> {
    let n = grad.len();
    let mut s = vec![0.0; n];
    let mut r = grad.to_vec();
    let mut z = metric.solve(&r)?;
    let mut rz = dot(&r, &z);
    if rz <= 0.0 {
        return Ok((s, false));
    }
    let gnorm = rz.sqrt();
    let tol = gnorm * gnorm.sqrt().min(0.1);
    let mut p: Vec<f64> = z.iter().map(|v| -v).collect();
    for _ in 0..max_iterations.max(1) {
        let bp = model.apply(metric, &p);
        let kappa = dot(&p, &bp);
        if kappa <= 0.0 {
            return Ok((to_boundary(metric, &s, &p, delta), true));
        }
        let alpha = rz / kappa;
        let trial: Vec<f64> = s.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
        if metric.norm(&trial) >= delta {
            return Ok((to_boundary(metric, &s, &p, delta), true));
        }
        s = trial;
        for i in 0..n {
            r[i] += alpha * bp[i];
        }
        z = metric.solve(&r)?;
        let rz_new = dot(&r, &z);
        if rz_new.max(0.0).sqrt() <= tol {
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = -z[i] + beta * p[i];
        }
    }
    Ok((s, false))
}

/// State carried across inner solves.
#[derive(Debug, Clone)]
pub struct TrState {
    pub radius: f64,
    pub model: LbfgsModel,
}

impl TrState {
    pub fn new(params: &TrustRegionParams) -> Self {
        Self {
            radius: params.initial_radius,
            model: LbfgsModel::new(params.memory),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// The augmented objective `J + lambda c + mu c^2 / 2`.
struct Augmented<'a, P: OptProblem + ?Sized> {
    problem: &'a mut P,
    multiplier: f64,
    penalty: f64,
}

impl<P: OptProblem + ?Sized> Augmented<'_, P> {
    fn value(&mut self, x: &[f64]) -> Result<f64, OptimError> {
        let j = self.problem.value(x)?;
        if !j.is_finite() {
            return Ok(f64::NAN);
        }
        let c = self.problem.constraint(x)?;
        Ok(j + self.multiplier * c + 0.5 * self.penalty * c * c)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError> {
        let mut g = self.problem.gradient(x)?;
        let c = self.problem.constraint(x)?;
        let w = self.multiplier + self.penalty * c;
        if w != 0.0 {
            let gc = self.problem.constraint_gradient(x)?;
            for (a, b) in g.iter_mut().zip(gc) {
                *a += w * b;
            }
        }
        Ok(g)
    }
}

/// Context for records produced by [`inner_solve`].
pub struct InnerContext<'a> {
    pub outer_iter: usize,
    pub record: &'a mut Vec<ConvergenceRecord>,
    pub observer: &'a mut dyn FnMut(&ConvergenceRecord, &[f64]),
}

fn push_record<P: OptProblem + ?Sized>(
    problem: &mut P,
    ctx: &mut InnerContext<'_>,
    x: &[f64],
    inner_iter: usize,
    multiplier: f64,
    radius: f64,
    step_norm: f64,
    grad_norm: f64,
) -> Result<(), OptimError> {
    let d = problem.diagnostics(x)?;
    let rec = ConvergenceRecord {
        outer_iter: ctx.outer_iter,
        inner_iter,
        objective: d.objective,
        constraint: problem.constraint(x)?,
        penalty: d.penalty,
        multiplier,
        tr_radius: radius,
        step_norm,
        grad_norm,
        min_det_ratio: d.min_det_ratio,
    };
    (ctx.observer)(&rec, x);
    ctx.record.push(rec);
    Ok(())
}

/// Trust-region minimization of the augmented objective from `x0` until the
/// dual gradient norm is at most `omega`.
#[allow(clippy::too_many_arguments)]
pub fn inner_solve<P: OptProblem + ?Sized>(
    problem: &mut P,
    metric: &GramOperator,
    x0: &[f64],
    multiplier: f64,
    penalty: f64,
    omega: f64,
    tr: &mut TrState,
    params: &TrustRegionParams,
    ctx: &mut InnerContext<'_>,
) -> Result<InnerResult, OptimError> {
    if x0.len() != metric.dim() {
        return Err(OptimError::Dimension {
            expected: metric.dim(),
            got: x0.len(),
        });
    }
    let mut aug = Augmented {
        problem,
        multiplier,
        penalty,
    };
    let mut x = x0.to_vec();
    let mut f = aug.value(&x)?;
    if !f.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    let mut g = aug.gradient(&x)?;
    let mut gnorm = metric.dual_norm(&g)?;
    let mut accepted = 0;
    let mut iterations = 0;
    if ctx.record.is_empty() {
        push_record(aug.problem, ctx, &x, 0, multiplier, tr.radius, 0.0, gnorm)?;
    }
    let termination = loop {
        if gnorm <= omega {
            break Termination::Converged;
        }
        if tr.radius < params.step_min {
            break Termination::StepTooSmall;
        }
        if iterations >= params.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        if !tr.model.is_scaled() {
            // no curvature yet: the model minimizer is the Riesz step of length radius
            tr.model.set_gamma(gnorm / tr.radius);
        }
        let (s, on_boundary) = steihaug_cg(&tr.model, metric, &g, tr.radius, params.max_cg_iterations)?;
        let bs = tr.model.apply(metric, &s);
        let predicted = -(dot(&g, &s) + 0.5 * dot(&s, &bs));
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let f_new = aug.value(&x_new)?;
        let rho = if f_new.is_finite() && predicted > 0.0 {
            (f - f_new) / predicted
        } else {
            f64::NEG_INFINITY
        };
        let step_norm = metric.norm(&s);
        if !f_new.is_finite() {
            tr.radius *= 0.25;
        } else if rho < params.shrink_below {
            tr.radius = 0.25 * tr.radius.min(step_norm.max(f64::MIN_POSITIVE));
        } else if rho > params.grow_above && on_boundary {
            tr.radius = (2.0 * tr.radius).min(params.max_radius);
        }
        log::debug!(
            "inner {iterations}: f {f:.10e} -> {f_new:.10e}, rho {rho:.3e}, |s| {step_norm:.3e}, radius {:.3e}",
            tr.radius
        );
        if rho > params.accept {
            let g_new = aug.gradient(&x_new)?;
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            tr.model.update(metric, s, y)?;
            x = x_new;
            f = f_new;
            g = g_new;
            gnorm = metric.dual_norm(&g)?;
            accepted += 1;
            push_record(aug.problem, ctx, &x, accepted, multiplier, tr.radius, step_norm, gnorm)?;
            if step_norm < params.step_min && gnorm > omega {
                break Termination::StepTooSmall;
            }
        }
    };
    Ok(InnerResult {
        x,
        value: f,
        grad_norm: gnorm,
        iterations: accepted,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLagrangianParams {
    pub omega0: f64,
    pub eta0: f64,
    pub omega_star: f64,
    pub eta_star: f64,
    pub penalty0: f64,
    pub penalty_factor: f64,
    pub tighten: f64,
    pub max_outer: usize,
    pub trust_region: TrustRegionParams,
}

impl Default for AugmentedLagrangianParams {
    fn default() -> Self {
        Self {
            omega0: 1e-2,
            eta0: 1e-2,
            omega_star: 1e-6,
            eta_star: 1e-4,
            penalty0: 10.0,
            penalty_factor: 10.0,
            tighten: 0.5,
            max_outer: 10,
            trust_region: TrustRegionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLagrangianResult {
    pub x: Vec<f64>,
    pub multiplier: f64,
    pub penalty: f64,
    pub outer_iterations: usize,
    pub termination: Termination,
    pub history: Vec<ConvergenceRecord>,
}

/// Equality-constrained minimization. `observer` sees every accepted
/// iterate together with its record.
pub fn augmented_lagrangian_solve<P: OptProblem + ?Sized>(
    problem: &mut P,
    metric: &GramOperator,
    x0: &[f64],
    params: &AugmentedLagrangianParams,
    observer: &mut dyn FnMut(&ConvergenceRecord, &[f64]),
) -> Result<AugmentedLagrangianResult, OptimError> {
    let mut x = x0.to_vec();
    let mut multiplier = 0.0;
    let mut penalty = params.penalty0;
    let (mut omega, mut eta) = (params.omega0, params.eta0);
    let mut history = Vec::new();
    let mut tr = TrState::new(&params.trust_region);
    let mut termination = Termination::MaxIterations;
    let mut outer = 0;
    while outer < params.max_outer {
        tr.model.clear();
        if tr.radius < params.trust_region.step_min {
            tr.radius = params.trust_region.initial_radius;
        }
        let mut ctx = InnerContext {
            outer_iter: outer,
            record: &mut history,
            observer,
        };
        let inner = inner_solve(problem, metric, &x, multiplier, penalty, omega, &mut tr, &params.trust_region, &mut ctx)?;
        x = inner.x;
        outer += 1;
        let c = problem.constraint(&x)?;
        log::info!(
            "outer {outer}: value {:.10e}, constraint {c:.3e}, |grad| {:.3e}, multiplier {multiplier:.6e}, penalty {penalty:.1e}, inner {:?}",
            inner.value,
            inner.grad_norm,
            inner.termination
        );
        if c.abs() <= params.eta_star && inner.grad_norm <= params.omega_star {
            multiplier += penalty * c;
            termination = Termination::Converged;
            break;
        }
        if c.abs() <= eta {
            multiplier += penalty * c;
            omega = (omega * params.tighten).max(params.omega_star);
            eta = (eta * params.tighten).max(params.eta_star);
        } else {
            penalty *= params.penalty_factor;
        }
        termination = match inner.termination {
            Termination::Converged => Termination::MaxIterations,
            other => other,
        };
    }
    if let Some(last) = history.last_mut() {
        last.multiplier = multiplier;
    }
    Ok(AugmentedLagrangianResult {
        x,
        multiplier,
        penalty,
        outer_iterations: outer,
        termination,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::SparseMatrix;

    /// `x^T H x / 2 - b^T x` with an optional NaN region and linear constraint.
    struct Quadratic {
        h: Vec<Vec<f64>>,
        b: Vec<f64>,
        nan_outside: Option<f64>,
        constraint: Option<(Vec<f64>, f64)>,
    }

    impl Quadratic {
        fn new(h: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
            Self {
                h,
                b,
                nan_outside: None,
                constraint: None,
            }
        }
    }

    impl OptProblem for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }

        fn value(&mut self, x: &[f64]) -> Result<f64, OptimError> {
            if let Some(r) = self.nan_outside {
                if dot(x, x).sqrt() > r {
                    return Ok(f64::NAN);
                }
            }
            let hx = SparseMatrix::from_dense(&self.h).matvec(x);
            Ok(0.5 * dot(x, &hx) - dot(&self.b, x))
        }

        fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError> {
            let hx = SparseMatrix::from_dense(&self.h).matvec(x);
            Ok(hx.iter().zip(&self.b).map(|(a, b)| a - b).collect())
        }

        fn constraint(&mut self, x: &[f64]) -> Result<f64, OptimError> {
            Ok(self.constraint.as_ref().map_or(0.0, |(a, c)| dot(a, x) - c))
        }

        fn constraint_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OptimError> {
            Ok(self.constraint.as_ref().map_or(vec![0.0; x.len()], |(a, _)| a.clone()))
        }
    }

    fn run_inner(
        p: &mut Quadratic,
        g: &GramOperator,
        x0: &[f64],
        params: &TrustRegionParams,
    ) -> (InnerResult, Vec<ConvergenceRecord>) {
        let mut record = Vec::new();
        let mut tr = TrState::new(params);
        let mut obs = |_: &ConvergenceRecord, _: &[f64]| {};
        let mut ctx = InnerContext {
            outer_iter: 0,
            record: &mut record,
            observer: &mut obs,
        };
        let r = inner_solve(p, g, x0, 0.0, 0.0, 1e-10, &mut tr, params, &mut ctx).unwrap();
        (r, record)
    }

    #[test]
    fn quadratic_with_exact_metric() {
        let h = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let mut p = Quadratic::new(h.clone(), vec![1.0, 2.0]);
        let g = GramOperator::from_matrix(SparseMatrix::from_dense(&h)).unwrap();
        let (r, record) = run_inner(&mut p, &g, &[0.0, 0.0], &TrustRegionParams::default());
        let exact = [1.0 / 11.0, 7.0 / 11.0];
        assert!(r.termination == Termination::Converged);
        assert!(r.iterations <= 10);
        assert!((r.x[0] - exact[0]).abs() < 1e-8 && (r.x[1] - exact[1]).abs() < 1e-8);
        assert!(record.windows(2).all(|w| w[1].objective <= w[0].objective));
    }

    #[test]
    fn quadratic_with_identity_metric() {
        let h = vec![vec![10.0, 2.0], vec![2.0, 1.0]];
        let mut p = Quadratic::new(h, vec![1.0, -1.0]);
        let g = GramOperator::from_matrix(SparseMatrix::identity(2)).unwrap();
        let params = TrustRegionParams {
            step_min: 1e-12,
            ..TrustRegionParams::default()
        };
        let (r, _) = run_inner(&mut p, &g, &[0.0, 0.0], &params);
        let exact = [0.5, -2.0];
        assert!((r.x[0] - exact[0]).abs() < 1e-8 && (r.x[1] - exact[1]).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_gradient_returns_immediately() {
        let mut p = Quadratic::new(vec![vec![1.0]], vec![0.0]);
        let g = GramOperator::from_matrix(SparseMatrix::identity(1)).unwrap();
        let (r, _) = run_inner(&mut p, &g, &[0.0], &TrustRegionParams::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.termination, Termination::Converged);
    }

    #[test]
    fn nan_everywhere_but_start_stalls() {
        let mut p = Quadratic::new(vec![vec![1.0]], vec![1.0]);
        p.nan_outside = Some(0.0);
        let g = GramOperator::from_matrix(SparseMatrix::identity(1)).unwrap();
        let (r, record) = run_inner(&mut p, &g, &[0.0], &TrustRegionParams::default());
        assert_eq!(r.termination, Termination::StepTooSmall);
        assert_eq!(r.x, vec![0.0]);
        assert_eq!(record.len(), 1);
    }

    #[test]
    fn metric_scaling_leaves_iterates_unchanged() {
        let h = vec![vec![5.0, 1.0], vec![1.0, 2.0]];
        let gm = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let run = |s: f64| {
            let mut p = Quadratic::new(h.clone(), vec![1.0, 1.0]);
            let scaled: Vec<Vec<f64>> = gm.iter().map(|r| r.iter().map(|v| s * v).collect()).collect();
            let g = GramOperator::from_matrix(SparseMatrix::from_dense(&scaled)).unwrap();
            let params = TrustRegionParams {
                initial_radius: 0.05 * s.sqrt(),
                step_min: 1e-12,
                ..TrustRegionParams::default()
            };
            let mut record = Vec::new();
            let mut tr = TrState::new(&params);
            let mut xs = Vec::new();
            let mut obs = |_: &ConvergenceRecord, x: &[f64]| xs.push(x.to_vec());
            let mut ctx = InnerContext {
                outer_iter: 0,
                record: &mut record,
                observer: &mut obs,
            };
            inner_solve(&mut p, &g, &[0.0, 0.0], 0.0, 0.0, 0.0, &mut tr, &params, &mut ctx).unwrap();
            xs
        };
        let (a, b) = (run(1.0), run(4.0));
        assert!(a.len() > 3);
        assert_eq!(a.len(), b.len());
        for (xa, xb) in a.iter().zip(&b) {
            for (u, v) in xa.iter().zip(xb) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn toy_kkt() {
        let mut p = Quadratic::new(vec![vec![2.0]], vec![0.0]);
        p.constraint = Some((vec![1.0], 1.0));
        let g = GramOperator::from_matrix(SparseMatrix::identity(1)).unwrap();
        let r = augmented_lagrangian_solve(&mut p, &g, &[0.0], &AugmentedLagrangianParams::default(), &mut |_, _| {})
            .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{r:?}");
        assert!((r.multiplier + 2.0).abs() < 1e-4, "{r:?}");
        assert!(r.outer_iterations <= 10);
        assert_eq!(r.termination, Termination::Converged);
    }

    #[test]
    fn toy_kkt_tight_constraint_tolerance() {
        let mut p = Quadratic::new(vec![vec![2.0]], vec![0.0]);
        p.constraint = Some((vec![1.0], 1.0));
        let g = GramOperator::from_matrix(SparseMatrix::identity(1)).unwrap();
        let params = AugmentedLagrangianParams {
            eta_star: 1e-7,
            trust_region: TrustRegionParams {
                step_min: 1e-9,
                ..TrustRegionParams::default()
            },
            ..AugmentedLagrangianParams::default()
        };
        let r = augmented_lagrangian_solve(&mut p, &g, &[0.0], &params, &mut |_, _| {}).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{r:?}");
        assert!((r.multiplier + 2.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_constraint_keeps_multiplier() {
        let h = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let mut p = Quadratic::new(h, vec![1.0, 2.0]);
        let g = GramOperator::from_matrix(SparseMatrix::identity(2)).unwrap();
        let r = augmented_lagrangian_solve(&mut p, &g, &[0.0, 0.0], &AugmentedLagrangianParams::default(), &mut |_, _| {})
            .unwrap();
        assert_eq!(r.multiplier, 0.0);
        assert_eq!(r.penalty, 10.0);
    }
    #[test]
    fn nan_region_is_never_accepted() {
        let mut p = Quadratic::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![3.0, 0.0]);
        p.nan_outside = Some(2.0);
        let g = GramOperator::from_matrix(SparseMatrix::identity(2)).unwrap();
        let (r, record) = run_inner(&mut p, &g, &[0.0, 0.0], &TrustRegionParams::default());
        assert!(record.iter().all(|rec| rec.objective.is_finite()));
        assert!(dot(&r.x, &r.x).sqrt() <= 2.0);
        assert!(r.x[0] > 1.9);
    }

    proptest::proptest! {
        #[test]
        fn accepted_values_decrease(
            a in 0.5f64..5.0, b in -0.4f64..0.4, d in 0.5f64..5.0,
            b0 in -3.0f64..3.0, b1 in -3.0f64..3.0, radius in 0.01f64..3.0,
        ) {
            let h = vec![vec![a, b], vec![b, d]];
            let mut p = Quadratic::new(h, vec![b0, b1]);
            let g = GramOperator::from_matrix(SparseMatrix::identity(2)).unwrap();
            let params = TrustRegionParams { initial_radius: radius, ..TrustRegionParams::default() };
            let (_, record) = run_inner(&mut p, &g, &[0.0, 0.0], &params);
            for w in record.windows(2) {
                proptest::prop_assert!(w[1].objective <= w[0].objective);
                proptest::prop_assert!(w[1].objective.is_finite());
            }
        }
    }
}
