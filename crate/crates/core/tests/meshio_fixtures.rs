use proptest::prelude::*;
use shapeopt::mesh::{gen_cantilever, gen_channel};
use shapeopt::meshio::{parse_msh, read_native, write_native, write_vtk, MeshIoError, PointField};

const TRIANGLE: &str = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
1
1 2 2 0 1 1 2 3
$EndElements
";

const TRIANGLE_WITH_EDGES: &str = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$PhysicalNames
1
1 10 \"inlet\"
$EndPhysicalNames
$Nodes
3
11 0 0 0
27 1 0 0
31 0 1 0
$EndNodes
$Elements
4
1 1 2 10 1 11 27
2 1 2 10 1 27 31
3 1 2 10 1 31 11
4 2 2 0 1 11 27 31
$EndElements
";

fn with_header(version: &str) -> String {
    TRIANGLE.replacen("2.2 0 8", version, 1)
}

#[test]
fn minimal_triangle() {
    let m = parse_msh(TRIANGLE).unwrap();
    assert_eq!((m.num_vertices(), m.num_triangles(), m.boundary_edges().len()), (3, 1, 0));
}

#[test]
fn line_elements_become_marked_edges() {
    let m = parse_msh(TRIANGLE_WITH_EDGES).unwrap();
    assert_eq!(m.boundary_edges().len(), 3);
    assert!(m.boundary_edges().iter().all(|e| e.marker == 10));
    assert_eq!(m.vertices(), &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(m.boundary_edges()[0].vertices, [0, 1]);
}

#[test]
fn clockwise_triangles_are_flipped() {
    let m = parse_msh(&TRIANGLE.replace("1 2 2 0 1 1 2 3", "1 2 2 0 1 1 3 2")).unwrap();
    assert!(m.signed_areas()[0] > 0.0);
}

#[test]
fn nonzero_z_is_ignored() {
    let m = parse_msh(&TRIANGLE.replace("3 0 1 0", "3 0 1 0.5")).unwrap();
    assert_eq!(m.vertices()[2], [0.0, 1.0]);
}

#[test]
fn version_four_is_rejected() {
    let e = parse_msh(&with_header("4.1 0 8")).unwrap_err();
    assert!(matches!(&e, MeshIoError::UnsupportedVersion(v) if v == "4.1"));
    assert!(e.to_string().contains("version"));
}

#[test]
fn binary_is_rejected() {
    let e = parse_msh(&with_header("2.2 1 8")).unwrap_err();
    assert!(matches!(e, MeshIoError::UnsupportedVersion(_)));
}

#[test]
fn unknown_element_type_is_rejected() {
    let e = parse_msh(&TRIANGLE.replace("1 2 2 0 1 1 2 3", "1 15 2 0 1 1")).unwrap_err();
    assert!(matches!(e, MeshIoError::UnsupportedElement { line: 12, kind: 15 }), "{e}");
}

#[test]
fn dangling_node_is_rejected() {
    let e = parse_msh(&TRIANGLE.replace("1 2 2 0 1 1 2 3", "1 2 2 0 1 1 2 9")).unwrap_err();
    assert!(matches!(e, MeshIoError::DanglingNode { line: 12, node: 9 }), "{e}");
}

#[test]
fn malformed_numbers_are_rejected() {
    let e = parse_msh(&TRIANGLE.replace("2 1 0 0", "2 one 0 0")).unwrap_err();
    assert!(matches!(e, MeshIoError::Syntax { line: 7, .. }), "{e}");
    let e = parse_msh(&TRIANGLE.replace("2 1 0 0", "1 1 0 0")).unwrap_err();
    assert!(e.to_string().contains("duplicate node"), "{e}");
}

#[test]
fn missing_sections_are_rejected() {
    let no_elements = TRIANGLE.split("$Elements").next().unwrap();
    assert!(matches!(parse_msh(no_elements), Err(MeshIoError::Truncated(_))));
    assert!(parse_msh("").is_err());
    assert!(parse_msh("$Nodes\n").is_err());
}

#[test]
fn boundary_edge_not_on_boundary_is_rejected() {
    let square = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
3
1 1 1 7 1 3
2 2 1 0 1 2 3
3 2 1 0 1 3 4
$EndElements
";
    assert!(matches!(parse_msh(square), Err(MeshIoError::Mesh(_))));
}

#[test]
fn every_truncated_prefix_is_rejected() {
    for fixture in [TRIANGLE, TRIANGLE_WITH_EDGES] {
        let end = fixture.trim_end().len();
        for cut in 0..end {
            assert!(parse_msh(&fixture[..cut]).is_err(), "prefix of length {cut} parsed");
        }
        assert!(parse_msh(&fixture[..end]).is_ok());
    }
}

#[test]
fn native_round_trip_of_generated_meshes() {
    for m in [gen_channel(3.0, 1.0, 9, 4).unwrap(), gen_cantilever(2.0, 1.0, 5, 3).unwrap()] {
        let text = write_native(&m);
        assert_eq!(read_native(&text).unwrap(), m);
        assert_eq!(write_native(&read_native(&text).unwrap()), text);
    }
}

#[test]
fn vtk_is_byte_deterministic() {
    let m = gen_channel(1.0, 1.0, 4, 4).unwrap();
    let u: Vec<[f64; 2]> = m.vertices().iter().map(|p| [p[1] * 0.3, -p[0] / 7.0]).collect();
    let det: Vec<f64> = (0..m.num_triangles()).map(|t| 1.0 + t as f64 / 3.0).collect();
    let a = write_vtk(&m, &[("u", PointField::Vector(&u))], &[("detDT", &det)]).unwrap();
    let b = write_vtk(&m.clone(), &[("u", PointField::Vector(&u.clone()))], &[("detDT", &det.clone())]).unwrap();
    assert_eq!(a.as_bytes(), b.as_bytes());
    assert!(a.contains(&format!("CELL_TYPES {}\n", m.num_triangles())));
}

proptest! {
    #[test]
    fn arbitrary_edits_never_panic(pos in 0usize..200, byte in proptest::num::u8::ANY) {
        let mut bytes = TRIANGLE_WITH_EDGES.as_bytes().to_vec();
        let p = pos % bytes.len();
        bytes[p] = byte;
        if let Ok(text) = String::from_utf8(bytes) {
            let _ = parse_msh(&text);
        }
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
        let _ = parse_msh(&text);
        let _ = read_native(&text);
    }
}
