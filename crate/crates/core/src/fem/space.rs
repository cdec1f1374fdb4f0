//! Lagrangian P1/P2 spaces, vector versions, and the Taylor-Hood pair.
//!
//! Scalar node numbering: vertices first, then (for P2) edges in the order of
//! [`TriMesh::edges`]. A block with `c` components stores the value of
//! component `k` at node `n` at `offset + c * n + k`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::mesh::{Point, TriMesh};

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("marker {0} does not exist on the mesh")]
pub struct UnknownMarker(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Degree {
    P1,
    P2,
}

impl Degree {
    pub fn local_nodes(self) -> usize {
        match self {
            Degree::P1 => 3,
            Degree::P2 => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    P1,
    P2,
    P1Vector,
    P2Vector,
    /// P2 vector velocity followed by P1 scalar pressure.
    TaylorHood,
}

/// One variable inside a (possibly mixed) space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub degree: Degree,
    pub components: usize,
    pub offset: usize,
    pub num_nodes: usize,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.components * self.num_nodes
    }

    #[inline]
    pub fn dof(&self, node: usize, component: usize) -> usize {
        self.offset + self.components * node + component
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpace {
    family: Family,
    blocks: Vec<Block>,
    dim: usize,
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
    /// Local P2 node list per triangle: three vertices then edges (01, 12, 20).
    p2_nodes: Vec<[usize; 6]>,
    p1_nodes: Vec<[usize; 3]>,
    /// (marker, degree) -> scalar nodes on edges with that marker
    boundary_nodes: BTreeMap<u32, (BTreeSet<usize>, BTreeSet<usize>)>,
}

impl FunctionSpace {
    pub fn new(mesh: &TriMesh, family: Family) -> Self {
        let nv = mesh.num_vertices();
        let edges = mesh.edges();
        let edge_index: BTreeMap<(usize, usize), usize> =
            edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
        let p1_nodes: Vec<[usize; 3]> = mesh.triangles().to_vec();
        let p2_nodes: Vec<[usize; 6]> = mesh
            .triangles()
            .iter()
            .map(|&[a, b, c]| {
                [
                    a,
                    b,
                    c,
                    nv + edge_index[&key(a, b)],
                    nv + edge_index[&key(b, c)],
                    nv + edge_index[&key(c, a)],
                ]
            })
            .collect();
        let mut boundary_nodes: BTreeMap<u32, (BTreeSet<usize>, BTreeSet<usize>)> =
            BTreeMap::new();
        for e in mesh.boundary_edges() {
            let [a, b] = e.vertices;
            let entry = boundary_nodes.entry(e.marker).or_default();
            entry.0.extend([a, b]);
            entry.1.extend([a, b, nv + edge_index[&key(a, b)]]);
        }
        let p2n = nv + edges.len();
        let blocks = match family {
            Family::P1 => vec![(Degree::P1, 1)],
            Family::P2 => vec![(Degree::P2, 1)],
            Family::P1Vector => vec![(Degree::P1, 2)],
            Family::P2Vector => vec![(Degree::P2, 2)],
            Family::TaylorHood => vec![(Degree::P2, 2), (Degree::P1, 1)],
        };
        let mut offset = 0;
        let blocks: Vec<Block> = blocks
            .into_iter()
            .map(|(degree, components)| {
                let num_nodes = match degree {
                    Degree::P1 => nv,
                    Degree::P2 => p2n,
                };
                let b = Block {
                    degree,
                    components,
                    offset,
                    num_nodes,
                };
                offset += b.dim();
                b
            })
            .collect();
        Self {
            family,
            blocks,
            dim: offset,
            num_vertices: nv,
            edges,
            p2_nodes,
            p1_nodes,
            boundary_nodes,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Scalar nodes of triangle `t` for the given degree.
    pub fn element_nodes(&self, degree: Degree, t: usize) -> &[usize] {
        match degree {
            Degree::P1 => &self.p1_nodes[t],
            Degree::P2 => &self.p2_nodes[t],
        }
    }

    /// Global dofs of triangle `t` in block `b`, ordered node-major.
    pub fn element_dofs(&self, b: usize, t: usize) -> Vec<usize> {
        let block = &self.blocks[b];
        self.element_nodes(block.degree, t)
            .iter()
            .flat_map(|&n| (0..block.components).map(move |c| block.dof(n, c)))
            .collect()
    }

    pub fn has_marker(&self, marker: u32) -> bool {
        self.boundary_nodes.contains_key(&marker)
    }

    /// Scalar nodes of block `b` lying on edges with `marker`.
    pub fn boundary_nodes(&self, b: usize, marker: u32) -> Option<&BTreeSet<usize>> {
        self.boundary_nodes.get(&marker).map(|(p1, p2)| match self.blocks[b].degree {
            Degree::P1 => p1,
            Degree::P2 => p2,
        })
    }

    /// All dofs (every component) of block `b` on edges with `marker`.
    pub fn boundary_dofs(&self, b: usize, marker: u32) -> Option<BTreeSet<usize>> {
        let block = self.blocks[b];
        self.boundary_nodes(b, marker).map(|nodes| {
            nodes
                .iter()
                .flat_map(|&n| (0..block.components).map(move |c| block.dof(n, c)))
                .collect()
        })
    }

    /// Dirichlet data `dof -> value` interpolating `f` at the nodes of block
    /// `b` on edges with `marker`.
    pub fn boundary_values(
        &self,
        mesh: &TriMesh,
        b: usize,
        marker: u32,
        f: impl Fn(Point) -> [f64; 2],
    ) -> Result<BTreeMap<usize, f64>, UnknownMarker> {
        let block = self.blocks[b];
        let nodes = self.boundary_nodes(b, marker).ok_or(UnknownMarker(marker))?;
        let coords = self.node_coordinates(mesh, block.degree);
        let mut out = BTreeMap::new();
        for &n in nodes {
            let v = f(coords[n]);
            for c in 0..block.components {
                out.insert(block.dof(n, c), v[c]);
            }
        }
        Ok(out)
    }

    /// Coordinates of the scalar nodes of `degree` on `mesh`.
    pub fn node_coordinates(&self, mesh: &TriMesh, degree: Degree) -> Vec<Point> {
        let mut pts = mesh.vertices().to_vec();
        if degree == Degree::P2 {
            pts.extend(self.edges.iter().map(|&(a, b)| {
                let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
                [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
            }));
        }
        pts
    }

    /// Nodal interpolant of `f` into block `b`; other entries untouched.
    pub fn interpolate_into(
        &self,
        mesh: &TriMesh,
        b: usize,
        values: &mut [f64],
        f: impl Fn(Point) -> [f64; 2],
    ) {
        let block = self.blocks[b];
        for (n, p) in self.node_coordinates(mesh, block.degree).into_iter().enumerate() {
            let v = f(p);
            for c in 0..block.components {
                values[block.dof(n, c)] = v[c];
            }
        }
    }
}

/// Values and reference gradients of the local basis at a reference point.
pub fn reference_basis(degree: Degree, x: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let l = [1.0 - x[0] - x[1], x[0], x[1]];
    let g = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    match degree {
        Degree::P1 => (l.to_vec(), g.to_vec()),
        Degree::P2 => {
            let mut val = Vec::with_capacity(6);
            let mut grad = Vec::with_capacity(6);
            for i in 0..3 {
                val.push(l[i] * (2.0 * l[i] - 1.0));
                let s = 4.0 * l[i] - 1.0;
                grad.push([s * g[i][0], s * g[i][1]]);
            }
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                val.push(4.0 * l[a] * l[b]);
                grad.push([
                    4.0 * (l[a] * g[b][0] + l[b] * g[a][0]),
                    4.0 * (l[a] * g[b][1] + l[b] * g[a][1]),
                ]);
            }
            (val, grad)
        }
    }
}
