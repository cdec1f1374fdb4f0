//! Control spaces: linear maps from a coefficient vector to a displacement
//! of the base-mesh vertices, either nodal (one value per vertex) or through
//! tensor-product B-splines on a box.
//!
//! Displacements use the interleaved layout `[v0x, v0y, v1x, ...]`, the same
//! as shape gradients. B-spline coefficients are stored component-major,
//! then `i * ny + j` over the active basis functions in x and y.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::fem::{SparseMatrix, TripletBuilder};
use crate::mesh::TriMesh;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("invalid control space: {0}")]
    InvalidSpec(String),
    #[error("B-spline basis has no active functions along axis {axis}")]
    EmptyBasis { axis: usize },
    #[error("vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoundingBox {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }
}

/// Uniform clamped B-spline basis on an interval. `order` is the polynomial
/// degree; `boundary_regularity` basis functions are dropped at each end.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    pub order: usize,
    pub level: u32,
    pub boundary_regularity: usize,
    pub interval: [f64; 2],
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(order: usize, level: u32, boundary_regularity: usize, interval: [f64; 2]) -> Result<Self, ControlError> {
        if order < 2 {
            return Err(ControlError::InvalidSpec(format!("order must be at least 2, got {order}")));
        }
        if boundary_regularity > order - 1 {
            return Err(ControlError::InvalidSpec(format!(
                "boundary regularity {boundary_regularity} exceeds order - 1 = {}",
                order - 1
            )));
        }
        if level > 20 {
            return Err(ControlError::InvalidSpec(format!("level {level} is too fine")));
        }
        let [a, b] = interval;
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(ControlError::InvalidSpec(format!("degenerate interval [{a}, {b}]")));
        }
        let cells = 1usize << level;
        let h = (b - a) / cells as f64;
        let mut knots = vec![a; order + 1];
        knots.extend((1..cells).map(|k| a + k as f64 * h));
        knots.extend(std::iter::repeat(b).take(order + 1));
        Ok(Self {
            order,
            level,
            boundary_regularity,
            interval,
            knots,
        })
    }

    pub fn full_len(&self) -> usize {
        (1usize << self.level) + self.order
    }

    /// Number of active (kept) basis functions.
    pub fn len(&self) -> usize {
        self.full_len().saturating_sub(2 * self.boundary_regularity)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `full_len()` basis values at `x` by Cox-de Boor; zero outside the
    /// interval.
    pub fn eval_full(&self, x: f64) -> Vec<f64> {
        let n = self.full_len();
        let p = self.order;
        let mut out = vec![0.0; n];
        let [a, b] = self.interval;
        if !(x >= a && x <= b) {
            return out;
        }
        let t = &self.knots;
        // span index s with t[s] <= x < t[s+1], p <= s <= n-1
        let mut s = p;
        while s < n - 1 && x >= t[s + 1] {
            s += 1;
        }
        let mut nb = vec![0.0; p + 1];
        nb[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = nb[r] / (right[r + 1] + left[j - r]);
                nb[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            nb[j] = saved;
        }
        for (k, v) in nb.into_iter().enumerate() {
            out[s - p + k] = v;
        }
        out
    }

    /// Active basis values at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        if self.is_empty() {
            return Vec::new();
        }
        let full = self.eval_full(x);
        let r = self.boundary_regularity;
        full[r..full.len() - r].to_vec()
    }
}

/// Active B-spline values at `x`; zero vector if `x` is outside `interval`.
pub fn bspline_eval_1d(
    order: usize,
    level: u32,
    boundary_regularity: usize,
    interval: [f64; 2],
    x: f64,
) -> Result<Vec<f64>, ControlError> {
    Ok(BSplineBasis::new(order, level, boundary_regularity, interval)?.eval(x))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlSpec {
    /// One displacement vector per mesh vertex.
    NodalFe {
        fixed_markers: BTreeSet<u32>,
        fixed_dims: [bool; 2],
    },
    /// Tensor-product B-splines on `bbox`.
    BSpline {
        bbox: BoundingBox,
        level: [u32; 2],
        order: usize,
        boundary_regularity: [usize; 2],
        fixed_dims: [bool; 2],
    },
}

/// Linear map from control coefficients to base-mesh vertex displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    matrix: SparseMatrix,
}

impl ControlMap {
    pub fn new(spec: &ControlSpec, base: &TriMesh) -> Result<Self, ControlError> {
        let nv = base.num_vertices();
        let matrix = match spec {
            ControlSpec::NodalFe {
                fixed_markers,
                fixed_dims,
            } => {
                let fixed = base.marked_vertices(fixed_markers);
                let mut b = TripletBuilder::new(2 * nv, 2 * nv);
                for k in 0..nv {
                    if fixed.contains(&k) {
                        continue;
                    }
                    for d in 0..2 {
                        if !fixed_dims[d] {
                            b.push(2 * k + d, 2 * k + d, 1.0);
                        }
                    }
                }
                b.build()
            }
            ControlSpec::BSpline {
                bbox,
                level,
                order,
                boundary_regularity,
                fixed_dims,
            } => {
                let basis: Vec<BSplineBasis> = (0..2)
                    .map(|d| {
                        BSplineBasis::new(*order, level[d], boundary_regularity[d], [bbox.min[d], bbox.max[d]])
                    })
                    .collect::<Result<_, _>>()?;
                for (axis, bs) in basis.iter().enumerate() {
                    if bs.is_empty() {
                        return Err(ControlError::EmptyBasis { axis });
                    }
                }
                let (nx, ny) = (basis[0].len(), basis[1].len());
                let per_dim = nx * ny;
                let mut b = TripletBuilder::new(2 * nv, 2 * per_dim);
                for (k, p) in base.vertices().iter().enumerate() {
                    if !bbox.contains(*p) {
                        continue;
                    }
                    let bx = basis[0].eval(p[0]);
                    let by = basis[1].eval(p[1]);
                    for (i, &vx) in bx.iter().enumerate() {
                        if vx == 0.0 {
                            continue;
                        }
                        for (j, &vy) in by.iter().enumerate() {
                            let v = vx * vy;
                            if v == 0.0 {
                                continue;
                            }
                            for d in 0..2 {
                                if !fixed_dims[d] {
                                    b.push(2 * k + d, d * per_dim + i * ny + j, v);
                                }
                            }
                        }
                    }
                }
                b.build()
            }
        };
        Ok(Self { matrix })
    }

    /// Number of control coefficients.
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Length of the displacement vector (twice the vertex count).
    pub fn displacement_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn apply(&self, c: &[f64]) -> Result<Vec<f64>, ControlError> {
        if c.len() != self.dim() {
            return Err(ControlError::Dimension {
                expected: self.dim(),
                got: c.len(),
            });
        }
        Ok(self.matrix.matvec(c))
    }

    pub fn apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>, ControlError> {
        if g.len() != self.displacement_dim() {
            return Err(ControlError::Dimension {
                expected: self.displacement_dim(),
                got: g.len(),
            });
        }
        Ok(self.matrix.transpose_matvec(g))
    }

    /// Whether the displacement rows of vertex `k` are identically zero.
    pub fn is_vertex_fixed(&self, k: usize) -> bool {
        (0..2).all(|d| self.matrix.row(2 * k + d).all(|(_, v)| v == 0.0))
    }

    /// Markers whose vertices can never move.
    pub fn fixed_markers(&self, base: &TriMesh) -> BTreeSet<u32> {
        base.markers()
            .into_iter()
            .filter(|&m| {
                base.marked_vertices(&BTreeSet::from([m]))
                    .iter()
                    .all(|&k| self.is_vertex_fixed(k))
            })
            .collect()
    }
}
