//! File formats: Gmsh MSH 2.2 ASCII ingest, a native round-trip mesh format,
//! legacy VTK output and CSV convergence histories.
//!
//! Native format, version 1:
//!
//! ```text
//! SHAPEOPT-MESH 1
//! vertices <n>
//! <x> <y>            (n lines)
//! triangles <m>
//! <a> <b> <c>        (m lines, 0-based, counterclockwise)
//! boundary_edges <k>
//! <a> <b> <marker>   (k lines)
//! ```
//!
//! Reals are written with 17 significant digits, so reading a written mesh
//! reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::{BoundaryEdge, MeshError, Point, TriMesh};
use crate::optim::ConvergenceRecord;

pub const NATIVE_HEADER: &str = "SHAPEOPT-MESH 1";
pub const HISTORY_HEADER: &str =
    "outer_iter,inner_iter,J,constraint,penalty,multiplier,tr_radius,step_norm,grad_norm,min_det_ratio";

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("unsupported MSH version {0:?}; only 2.2 ASCII is read")]
    UnsupportedVersion(String),
    #[error("line {line}: unsupported element type {kind}; only 2-node lines (1) and 3-node triangles (2) are read")]
    UnsupportedElement { line: usize, kind: u32 },
    #[error("line {line}: element references undefined node {node}")]
    DanglingNode { line: usize, node: u64 },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unexpected end of input: {0}")]
    Truncated(String),
    #[error("field {name:?} has {got} values, expected {expected}")]
    FieldLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid mesh: {0}")]
    Mesh(#[from] MeshError),
}

/// Formats a real with 17 significant digits; NaN becomes `nan`.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Line cursor that skips blank lines and reports 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str), MeshIoError> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let l = l.trim();
            if !l.is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(MeshIoError::Truncated(format!("expected {what} after line {}", self.last)))
    }

    fn expect(&mut self, token: &str) -> Result<(), MeshIoError> {
        let (line, l) = self.next(token)?;
        if l != token {
            return Err(MeshIoError::Syntax {
                line,
                message: format!("expected {token:?}, found {l:?}"),
            });
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, MeshIoError> {
    let tok = tok.ok_or_else(|| MeshIoError::Syntax {
        line,
        message: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| MeshIoError::Syntax {
        line,
        message: format!("invalid {what} {tok:?}"),
    })
}

fn parse_count(lines: &mut Lines<'_>, what: &str) -> Result<usize, MeshIoError> {
    let (line, l) = lines.next(what)?;
    let mut toks = l.split_whitespace();
    let n = parse_num(toks.next(), line, what)?;
    if toks.next().is_some() {
        return Err(MeshIoError::Syntax {
            line,
            message: format!("trailing data after {what}"),
        });
    }
    Ok(n)
}

/// Reads a Gmsh MSH 2.2 ASCII document. Type-2 elements become triangles,
/// type-1 elements boundary edges marked with their first tag.
pub fn parse_msh(text: &str) -> Result<TriMesh, MeshIoError> {
    let mut lines = Lines::new(text);
    lines.expect("$MeshFormat")?;
    let (line, header) = lines.next("format line")?;
    let mut toks = header.split_whitespace();
    let version = toks.next().unwrap_or_default();
    if version != "2.2" {
        return Err(MeshIoError::UnsupportedVersion(version.to_string()));
    }
    let file_type: u32 = parse_num(toks.next(), line, "file type")?;
    if file_type != 0 {
        return Err(MeshIoError::UnsupportedVersion(format!("{version} binary")));
    }
    lines.expect("$EndMeshFormat")?;

    let mut nodes: Vec<Point> = Vec::new();
    let mut node_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut triangles = Vec::new();
    let mut edges = Vec::new();
    let (mut have_nodes, mut have_elements) = (false, false);

    loop {
        let (line, l) = match lines.next("section") {
            Ok(v) => v,
            Err(_) if have_nodes && have_elements => break,
            Err(e) => return Err(e),
        };
        match l {
            "$Nodes" => {
                let n = parse_count(&mut lines, "node count")?;
                for _ in 0..n {
                    let (line, l) = lines.next("node")?;
                    let mut t = l.split_whitespace();
                    let id: u64 = parse_num(t.next(), line, "node id")?;
                    let x: f64 = parse_num(t.next(), line, "x coordinate")?;
                    let y: f64 = parse_num(t.next(), line, "y coordinate")?;
                    let z: f64 = parse_num(t.next(), line, "z coordinate")?;
                    if z != 0.0 {
                        log::warn!("line {line}: node {id} has z = {z}, ignored");
                    }
                    if node_index.insert(id, nodes.len()).is_some() {
                        return Err(MeshIoError::Syntax {
                            line,
                            message: format!("duplicate node id {id}"),
                        });
                    }
                    nodes.push([x, y]);
                }
                lines.expect("$EndNodes")?;
                have_nodes = true;
            }
            "$Elements" => {
                let n = parse_count(&mut lines, "element count")?;
                for _ in 0..n {
                    let (line, l) = lines.next("element")?;
                    let mut t = l.split_whitespace();
                    let _id: u64 = parse_num(t.next(), line, "element id")?;
                    let kind: u32 = parse_num(t.next(), line, "element type")?;
                    let ntags: usize = parse_num(t.next(), line, "tag count")?;
                    let mut tags = Vec::new();
                    for _ in 0..ntags {
                        tags.push(parse_num::<i64>(t.next(), line, "tag")?);
                    }
                    let nv = match kind {
                        1 => 2,
                        2 => 3,
                        _ => return Err(MeshIoError::UnsupportedElement { line, kind }),
                    };
                    let mut vs = [0usize; 3];
                    for v in vs.iter_mut().take(nv) {
                        let node: u64 = parse_num(t.next(), line, "node reference")?;
                        *v = *node_index.get(&node).ok_or(MeshIoError::DanglingNode { line, node })?;
                    }
                    if kind == 2 {
                        triangles.push(vs);
                    } else {
                        let marker = tags.first().copied().unwrap_or(0);
                        let marker = u32::try_from(marker).map_err(|_| MeshIoError::Syntax {
                            line,
                            message: format!("negative physical tag {marker}"),
                        })?;
                        edges.push(BoundaryEdge {
                            vertices: [vs[0], vs[1]],
                            marker,
                        });
                    }
                }
                lines.expect("$EndElements")?;
                have_elements = true;
            }
            s if s.starts_with('$') && !s.starts_with("$End") => {
                let end = format!("$End{}", &s[1..]);
                loop {
                    let (_, l) = lines.next(&end)?;
                    if l == end {
                        break;
                    }
                }
            }
            _ => {
                return Err(MeshIoError::Syntax {
                    line,
                    message: format!("unexpected {l:?} between sections"),
                })
            }
        }
    }
    Ok(TriMesh::new(nodes, triangles, edges)?)
}

/// Serializes `mesh` in the native format.
pub fn write_native(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{NATIVE_HEADER}");
    let _ = writeln!(s, "vertices {}", mesh.num_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {}", format_real(p[0]), format_real(p[1]));
    }
    let _ = writeln!(s, "triangles {}", mesh.num_triangles());
    for t in mesh.triangles() {
        let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "boundary_edges {}", mesh.boundary_edges().len());
    for e in mesh.boundary_edges() {
        let _ = writeln!(s, "{} {} {}", e.vertices[0], e.vertices[1], e.marker);
    }
    s
}

fn section_count(lines: &mut Lines<'_>, key: &str) -> Result<usize, MeshIoError> {
    let (line, l) = lines.next(key)?;
    let mut t = l.split_whitespace();
    if t.next() != Some(key) {
        return Err(MeshIoError::Syntax {
            line,
            message: format!("expected {key:?} section, found {l:?}"),
        });
    }
    parse_num(t.next(), line, &format!("{key} count"))
}

fn row<'a>(lines: &mut Lines<'a>, what: &str, n: usize) -> Result<(usize, Vec<&'a str>), MeshIoError> {
    let (line, l) = lines.next(what)?;
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() != n {
        return Err(MeshIoError::Syntax {
            line,
            message: format!("{what} needs {n} values, found {}", toks.len()),
        });
    }
    Ok((line, toks))
}

/// Reads the native format.
pub fn read_native(text: &str) -> Result<TriMesh, MeshIoError> {
    let mut lines = Lines::new(text);
    let (line, header) = lines.next("header")?;
    if header != NATIVE_HEADER {
        return Err(MeshIoError::Syntax {
            line,
            message: format!("expected header {NATIVE_HEADER:?}, found {header:?}"),
        });
    }
    let nv = section_count(&mut lines, "vertices")?;
    let mut vertices = Vec::with_capacity(nv.min(1 << 16));
    for _ in 0..nv {
        let (line, t) = row(&mut lines, "vertex", 2)?;
        vertices.push([
            parse_num(Some(t[0]), line, "coordinate")?,
            parse_num(Some(t[1]), line, "coordinate")?,
        ]);
    }
    let nt = section_count(&mut lines, "triangles")?;
    let mut triangles = Vec::with_capacity(nt.min(1 << 16));
    for _ in 0..nt {
        let (line, t) = row(&mut lines, "triangle", 3)?;
        let mut tri = [0usize; 3];
        for (k, v) in tri.iter_mut().enumerate() {
            *v = parse_num(Some(t[k]), line, "vertex index")?;
        }
        triangles.push(tri);
    }
    let ne = section_count(&mut lines, "boundary_edges")?;
    let mut edges = Vec::with_capacity(ne.min(1 << 16));
    for _ in 0..ne {
        let (line, t) = row(&mut lines, "boundary edge", 3)?;
        let vertices = [
            parse_num(Some(t[0]), line, "vertex index")?,
            parse_num(Some(t[1]), line, "vertex index")?,
        ];
        for &v in &vertices {
            if v >= nv {
                return Err(MeshIoError::Syntax {
                    line,
                    message: format!("vertex index {v} out of range"),
                });
            }
        }
        edges.push(BoundaryEdge {
            vertices,
            marker: parse_num(Some(t[2]), line, "marker")?,
        });
    }
    if let Ok((line, l)) = lines.next("end") {
        return Err(MeshIoError::Syntax {
            line,
            message: format!("trailing data {l:?}"),
        });
    }
    Ok(TriMesh::new(vertices, triangles, edges)?)
}

/// Per-vertex field written to VTK.
#[derive(Debug, Clone, PartialEq)]
pub enum PointField<'a> {
    Scalar(&'a [f64]),
    Vector(&'a [[f64; 2]]),
}

impl PointField<'_> {
    fn len(&self) -> usize {
        match self {
            PointField::Scalar(v) => v.len(),
            PointField::Vector(v) => v.len(),
        }
    }
}

/// Legacy ASCII VTK unstructured grid of triangles (cell type 5).
pub fn write_vtk(
    mesh: &TriMesh,
    point_fields: &[(&str, PointField<'_>)],
    cell_fields: &[(&str, &[f64])],
) -> Result<String, MeshIoError> {
    for (name, f) in point_fields {
        if f.len() != mesh.num_vertices() {
            return Err(MeshIoError::FieldLength {
                name: name.to_string(),
                expected: mesh.num_vertices(),
                got: f.len(),
            });
        }
    }
    for (name, f) in cell_fields {
        if f.len() != mesh.num_triangles() {
            return Err(MeshIoError::FieldLength {
                name: name.to_string(),
                expected: mesh.num_triangles(),
                got: f.len(),
            });
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "shapeopt");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", format_real(p[0]), format_real(p[1]), format_real(0.0));
    }
    let nt = mesh.num_triangles();
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "5");
    }
    if !point_fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.num_vertices());
        for (name, f) in point_fields {
            match f {
                PointField::Scalar(v) => {
                    let _ = writeln!(s, "SCALARS {name} double 1");
                    let _ = writeln!(s, "LOOKUP_TABLE default");
                    for x in *v {
                        let _ = writeln!(s, "{}", format_real(*x));
                    }
                }
                PointField::Vector(v) => {
                    let _ = writeln!(s, "VECTORS {name} double");
                    for x in *v {
                        let _ = writeln!(s, "{} {} {}", format_real(x[0]), format_real(x[1]), format_real(0.0));
                    }
                }
            }
        }
    }
    if !cell_fields.is_empty() {
        let _ = writeln!(s, "CELL_DATA {nt}");
        for (name, f) in cell_fields {
            let _ = writeln!(s, "SCALARS {name} double 1");
            let _ = writeln!(s, "LOOKUP_TABLE default");
            for x in *f {
                let _ = writeln!(s, "{}", format_real(*x));
            }
        }
    }
    Ok(s)
}

/// CSV with one row per record.
pub fn write_history_csv(records: &[ConvergenceRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HISTORY_HEADER}");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.outer_iter,
            r.inner_iter,
            format_real(r.objective),
            format_real(r.constraint),
            format_real(r.penalty),
            format_real(r.multiplier),
            format_real(r.tr_radius),
            format_real(r.step_norm),
            format_real(r.grad_norm),
            format_real(r.min_det_ratio),
        );
    }
    s
}
