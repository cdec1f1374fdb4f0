//! Unstructured triangular meshes in the plane.
//!
//! A [`TriMesh`] owns vertex coordinates, counterclockwise triangles and a
//! list of marked boundary edges. Deformations keep the connectivity and only
//! move vertices, so a deformed mesh shares every index with its base mesh.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

/// Point or vector in the plane.
pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {vertex}, but the mesh has {count} vertices")]
    VertexOutOfRange {
        triangle: usize,
        vertex: usize,
        count: usize,
    },
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("boundary edge ({0}, {1}) is not the edge of exactly one triangle")]
    NotABoundaryEdge(usize, usize),
    #[error("boundary edge ({0}, {1}) is listed more than once")]
    DuplicateBoundaryEdge(usize, usize),
    #[error("expected {expected} displacement vectors, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid generator parameter: {0}")]
    Parameter(String),
}

/// Boundary edge with its marker. The vertex pair is stored as given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub marker: u32,
}

/// Triangular mesh with marked boundary edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
}

/// Affine map from the reference triangle onto one element.
///
/// The reference triangle has vertices (0,0), (1,0), (0,1); `jacobian` has the
/// edge vectors `x1 - x0` and `x2 - x0` as columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementGeometry {
    pub jacobian: [[f64; 2]; 2],
    pub det: f64,
    pub inv_transpose: [[f64; 2]; 2],
}

impl ElementGeometry {
    pub fn new(p0: Point, p1: Point, p2: Point) -> Self {
        let jacobian = [[p1[0] - p0[0], p2[0] - p0[0]], [p1[1] - p0[1], p2[1] - p0[1]]];
        let det = jacobian[0][0] * jacobian[1][1] - jacobian[0][1] * jacobian[1][0];
        let inv_transpose = [
            [jacobian[1][1] / det, -jacobian[1][0] / det],
            [-jacobian[0][1] / det, jacobian[0][0] / det],
        ];
        Self {
            jacobian,
            det,
            inv_transpose,
        }
    }

    /// Area of the element (signed).
    pub fn area(&self) -> f64 {
        0.5 * self.det
    }

    /// Maps a gradient taken on the reference element to physical coordinates.
    #[inline]
    pub fn push_gradient(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv_transpose[0][0] * g[0] + self.inv_transpose[0][1] * g[1],
            self.inv_transpose[1][0] * g[0] + self.inv_transpose[1][1] * g[1],
        ]
    }

    /// Physical gradients of the three barycentric (P1) basis functions.
    pub fn p1_gradients(&self) -> [[f64; 2]; 3] {
        [
            self.push_gradient([-1.0, -1.0]),
            self.push_gradient([1.0, 0.0]),
            self.push_gradient([0.0, 1.0]),
        ]
    }
}

/// Mesh quality of a displacement applied to a base mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    /// Minimum over elements of deformed area / original area, i.e. det D(I+V).
    pub min_det_ratio: f64,
    /// Maximum over elements of the spectral norm of DV.
    pub max_displacement_gradient: f64,
    /// Per-element determinant of D(I+V).
    pub det_ratios: Vec<f64>,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Largest singular value of a 2x2 matrix.
pub fn spectral_norm(m: [[f64; 2]; 2]) -> f64 {
    let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let d = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (half_tr + disc).max(0.0).sqrt()
}

impl TriMesh {
    /// Builds and validates a mesh. Clockwise triangles are flipped to
    /// counterclockwise; zero-area triangles are rejected.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let count = vertices.len();
        let mut triangles = triangles;
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= count {
                    return Err(MeshError::VertexOutOfRange {
                        triangle: t,
                        vertex: v,
                        count,
                    });
                }
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area == 0.0 || !area.is_finite() {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for tri in &triangles {
            for k in 0..3 {
                *edge_count
                    .entry(edge_key(tri[k], tri[(k + 1) % 3]))
                    .or_default() += 1;
            }
        }
        let mut seen = BTreeSet::new();
        for e in &boundary_edges {
            let key = edge_key(e.vertices[0], e.vertices[1]);
            if edge_count.get(&key) != Some(&1) {
                return Err(MeshError::NotABoundaryEdge(e.vertices[0], e.vertices[1]));
            }
            if !seen.insert(key) {
                return Err(MeshError::DuplicateBoundaryEdge(e.vertices[0], e.vertices[1]));
            }
        }
        Ok(Self {
            vertices,
            triangles,
            boundary_edges,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn geometry(&self, t: usize) -> ElementGeometry {
        let [a, b, c] = self.triangles[t];
        ElementGeometry::new(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn signed_areas(&self) -> Vec<f64> {
        self.triangles
            .iter()
            .map(|&[a, b, c]| signed_area(self.vertices[a], self.vertices[b], self.vertices[c]))
            .collect()
    }

    /// True when every triangle has strictly positive signed area.
    pub fn is_untangled(&self) -> bool {
        self.signed_areas().iter().all(|&a| a > 0.0)
    }

    pub fn area(&self) -> f64 {
        self.signed_areas().iter().sum()
    }

    /// Sorted set of boundary markers.
    pub fn markers(&self) -> BTreeSet<u32> {
        self.boundary_edges.iter().map(|e| e.marker).collect()
    }

    /// Vertices lying on an edge carrying one of `markers`, sorted.
    pub fn marked_vertices(&self, markers: &BTreeSet<u32>) -> BTreeSet<usize> {
        self.boundary_edges
            .iter()
            .filter(|e| markers.contains(&e.marker))
            .flat_map(|e| e.vertices)
            .collect()
    }

    /// Unique edges sorted by vertex pair (smaller index first).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| edge_key(t[k], t[(k + 1) % 3])))
            .collect();
        set.into_iter().collect()
    }

    /// Returns a mesh with vertices `x_i + V_i` and the same connectivity.
    ///
    /// No orientation check is made: a deformation may tangle the mesh, which
    /// is what [`TriMesh::quality`] is for.
    pub fn deform(&self, displacement: &[Point]) -> Result<TriMesh, MeshError> {
        if displacement.len() != self.vertices.len() {
            return Err(MeshError::ShapeMismatch {
                expected: self.vertices.len(),
                got: displacement.len(),
            });
        }
        let vertices = self
            .vertices
            .iter()
            .zip(displacement)
            .map(|(x, v)| [x[0] + v[0], x[1] + v[1]])
            .collect();
        Ok(TriMesh {
            vertices,
            triangles: self.triangles.clone(),
            boundary_edges: self.boundary_edges.clone(),
        })
    }

    /// Same as [`TriMesh::deform`] with the displacement given as interleaved
    /// components `[v0x, v0y, v1x, ...]`.
    pub fn deform_flat(&self, displacement: &[f64]) -> Result<TriMesh, MeshError> {
        if displacement.len() != 2 * self.vertices.len() {
            return Err(MeshError::ShapeMismatch {
                expected: 2 * self.vertices.len(),
                got: displacement.len(),
            });
        }
        let pts: Vec<Point> = displacement.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        self.deform(&pts)
    }

    /// Per-element gradient of a P1 displacement field on this (base) mesh.
    pub fn displacement_gradient(&self, t: usize, displacement: &[Point]) -> [[f64; 2]; 2] {
        let g = self.geometry(t).p1_gradients();
        let tri = self.triangles[t];
        let mut dv = [[0.0; 2]; 2];
        for (k, &v) in tri.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    dv[i][j] += displacement[v][i] * g[k][j];
                }
            }
        }
        dv
    }

    /// Element-wise det D(I+V) of the piecewise affine transformation defined
    /// by `displacement` on this mesh. Exact, no quadrature involved.
    pub fn quality(&self, displacement: &[Point]) -> Result<QualityReport, MeshError> {
        if displacement.len() != self.vertices.len() {
            return Err(MeshError::ShapeMismatch {
                expected: self.vertices.len(),
                got: displacement.len(),
            });
        }
        let mut det_ratios = Vec::with_capacity(self.triangles.len());
        let mut max_grad = 0.0_f64;
        for t in 0..self.triangles.len() {
            let dv = self.displacement_gradient(t, displacement);
            let det = (1.0 + dv[0][0]) * (1.0 + dv[1][1]) - dv[0][1] * dv[1][0];
            det_ratios.push(det);
            max_grad = max_grad.max(spectral_norm(dv));
        }
        let min_det_ratio = det_ratios.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(QualityReport {
            min_det_ratio,
            max_displacement_gradient: max_grad,
            det_ratios,
        })
    }
}

/// Boundary markers of the channel generator.
pub mod channel_markers {
    pub const INLET: u32 = 10;
    pub const OUTLET: u32 = 11;
    pub const BOTTOM: u32 = 12;
    pub const TOP: u32 = 13;
}

/// Boundary markers of the cantilever generator.
pub mod cantilever_markers {
    pub const CLAMPED: u32 = 1;
    pub const LOADED: u32 = 2;
    pub const FREE: u32 = 3;
}

/// Structured rectangle `[x0, x0+length] x [y0, y0+height]` with `nx * ny`
/// cells, each split along a diagonal whose direction alternates in a
/// checkerboard pattern. Counts: `(nx+1)(ny+1)` vertices, `2 nx ny`
/// triangles, `2 (nx+ny)` boundary edges.
fn structured_rectangle(
    origin: Point,
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
    markers: [u32; 4], // left, right, bottom, top
) -> Result<TriMesh, MeshError> {
    if !(length > 0.0 && length.is_finite()) || !(height > 0.0 && height.is_finite()) {
        return Err(MeshError::Parameter(format!(
            "length and height must be positive, got {length} x {height}"
        )));
    }
    if nx < 2 || ny < 2 {
        return Err(MeshError::Parameter(format!(
            "need at least 2 cells per direction, got {nx} x {ny}"
        )));
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([
                origin[0] + length * i as f64 / nx as f64,
                origin[1] + height * j as f64 / ny as f64,
            ]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    let [left, right, bottom, top] = markers;
    let mut edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        edges.push(BoundaryEdge {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            marker: bottom,
        });
    }
    for j in 0..ny {
        edges.push(BoundaryEdge {
            vertices: [idx(nx, j), idx(nx, j + 1)],
            marker: right,
        });
    }
    for i in (0..nx).rev() {
        edges.push(BoundaryEdge {
            vertices: [idx(i + 1, ny), idx(i, ny)],
            marker: top,
        });
    }
    for j in (0..ny).rev() {
        edges.push(BoundaryEdge {
            vertices: [idx(0, j + 1), idx(0, j)],
            marker: left,
        });
    }
    TriMesh::new(vertices, triangles, edges)
}

/// Straight channel `[0, length] x [-height/2, height/2]`: inlet 10 at x = 0,
/// outlet 11 at x = length, bottom wall 12, top wall 13.
pub fn gen_channel(length: f64, height: f64, nx: usize, ny: usize) -> Result<TriMesh, MeshError> {
    use channel_markers::*;
    structured_rectangle(
        [0.0, -0.5 * height],
        length,
        height,
        nx,
        ny,
        [INLET, OUTLET, BOTTOM, TOP],
    )
}

/// Beam `[0, length] x [0, height]`: clamped wall 1 at x = 0, loaded edge 2 at
/// x = length, free boundary 3 elsewhere.
pub fn gen_cantilever(
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
) -> Result<TriMesh, MeshError> {
    use cantilever_markers::*;
    structured_rectangle([0.0, 0.0], length, height, nx, ny, [CLAMPED, LOADED, FREE, FREE])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn zero_displacement_is_identity() {
        let m = gen_channel(1.0, 1.0, 4, 3).unwrap();
        let d = m.deform(&vec![[0.0; 2]; m.num_vertices()]).unwrap();
        assert_eq!(d, m);
    }

    #[test]
    fn affine_stretch_moves_corner() {
        let m = gen_cantilever(1.0, 1.0, 2, 2).unwrap();
        let v: Vec<Point> = m.vertices().iter().map(|p| [p[0], 0.0]).collect();
        let d = m.deform(&v).unwrap();
        let k = m
            .vertices()
            .iter()
            .position(|p| p == &[1.0, 1.0])
            .unwrap();
        assert_eq!(d.vertices()[k], [2.0, 1.0]);
        let q = m.quality(&v).unwrap();
        for r in &q.det_ratios {
            assert_relative_eq!(*r, 2.0, epsilon = 1e-14);
        }
        assert_relative_eq!(q.max_displacement_gradient, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn moved_vertex_halves_area() {
        let m = unit_triangle();
        let v = vec![[0.0, 0.0], [0.0, 0.0], [0.5, -0.5]];
        let d = m.deform(&v).unwrap();
        assert_relative_eq!(d.area() / m.area(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.quality(&v).unwrap().min_det_ratio, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn collapsed_vertex_flags_tangling() {
        let m = unit_triangle();
        // vertex 2 onto the midpoint of the opposite edge
        let q = m.quality(&[[0.0; 2], [0.0; 2], [0.5, -1.0]]).unwrap();
        assert!(q.min_det_ratio <= 0.0);
        let q = m.quality(&[[0.0; 2], [0.0; 2], [0.5, -1.5]]).unwrap();
        assert!(q.min_det_ratio < 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = unit_triangle();
        assert!(matches!(
            m.deform(&[[0.0; 2]; 2]),
            Err(MeshError::ShapeMismatch { .. })
        ));
        assert!(m.quality(&[[0.0; 2]; 4]).is_err());
    }

    #[test]
    fn clockwise_triangles_are_flipped() {
        let m = TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 2, 1]],
            vec![],
        )
        .unwrap();
        assert!(m.geometry(0).det > 0.0);
    }

    #[test]
    fn rejects_degenerate_and_interior_edges() {
        assert_eq!(
            TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1, 2]], vec![]),
            Err(MeshError::DegenerateTriangle(0))
        );
        let m = gen_channel(1.0, 1.0, 2, 2).unwrap();
        let mut edges = m.boundary_edges().to_vec();
        // (0, 4) is a diagonal shared by two triangles
        edges.push(BoundaryEdge {
            vertices: [0, 4],
            marker: 1,
        });
        assert!(TriMesh::new(m.vertices().to_vec(), m.triangles().to_vec(), edges).is_err());
    }

    #[test]
    fn channel_counts_and_markers() {
        let m = gen_channel(1.0, 1.0, 2, 2).unwrap();
        assert_eq!(m.num_vertices(), 9);
        assert_eq!(m.num_triangles(), 8);
        assert_eq!(m.boundary_edges().len(), 8);
        for (nx, ny) in [(3, 2), (5, 4), (10, 7)] {
            let m = gen_channel(2.0, 0.5, nx, ny).unwrap();
            assert_eq!(m.num_vertices(), (nx + 1) * (ny + 1));
            assert_eq!(m.num_triangles(), 2 * nx * ny);
            assert_eq!(m.boundary_edges().len(), 2 * (nx + ny));
        }
        for e in m.boundary_edges() {
            let [a, b] = e.vertices;
            let on_left = m.vertices()[a][0] == 0.0 && m.vertices()[b][0] == 0.0;
            assert_eq!(on_left, e.marker == channel_markers::INLET);
        }
        assert_eq!(m.markers(), BTreeSet::from([10, 11, 12, 13]));
        let c = gen_cantilever(2.0, 1.0, 4, 2).unwrap();
        for e in c.boundary_edges() {
            let [a, b] = e.vertices;
            let on_left = c.vertices()[a][0] == 0.0 && c.vertices()[b][0] == 0.0;
            assert_eq!(on_left, e.marker == cantilever_markers::CLAMPED);
        }
        assert_eq!(c.markers(), BTreeSet::from([1, 2, 3]));
    }

    #[test]
    fn boundary_length_is_perimeter() {
        let m = gen_cantilever(2.0, 0.75, 6, 3).unwrap();
        let len: f64 = m
            .boundary_edges()
            .iter()
            .map(|e| {
                let [a, b] = e.vertices;
                let (p, q) = (m.vertices()[a], m.vertices()[b]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            })
            .sum();
        assert_relative_eq!(len, 2.0 * (2.0 + 0.75), epsilon = 1e-13);
        assert_relative_eq!(m.area(), 1.5, epsilon = 1e-14);
    }

    #[test]
    fn generator_rejects_bad_parameters() {
        assert!(gen_channel(0.0, 1.0, 2, 2).is_err());
        assert!(gen_channel(1.0, -1.0, 2, 2).is_err());
        assert!(gen_cantilever(1.0, 1.0, 1, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field(n: usize) -> impl Strategy<Value = Vec<Point>> {
            proptest::collection::vec(prop::array::uniform2(-0.05..0.05f64), n)
        }

        proptest! {
            #[test]
            fn displacements_compose_additively(v in field(12), w in field(12)) {
                let m = gen_channel(1.0, 1.0, 3, 2).unwrap();
                let a = m.deform(&v).unwrap().deform(&w).unwrap();
                let vw: Vec<Point> = v.iter().zip(&w).map(|(p, q)| [p[0] + q[0], p[1] + q[1]]).collect();
                let b = m.deform(&vw).unwrap();
                for (p, q) in a.vertices().iter().zip(b.vertices()) {
                    prop_assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
                }
            }

            #[test]
            fn quality_ignores_translation(v in field(12), t in prop::array::uniform2(-10.0..10.0f64)) {
                let m = gen_channel(1.0, 1.0, 3, 2).unwrap();
                let shifted: Vec<Point> = v.iter().map(|p| [p[0] + t[0], p[1] + t[1]]).collect();
                let a = m.quality(&v).unwrap().min_det_ratio;
                let b = m.quality(&shifted).unwrap().min_det_ratio;
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
