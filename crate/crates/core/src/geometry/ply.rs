//! ASCII PLY export (meshes, point clouds) and a minimal point-cloud reader.
//!
//! Vertices are written as `property float x/y/z` (plus `nx/ny/nz` when
//! normals are present); faces as `property list uchar int vertex_indices`
//! with triangle rows `3 i j k`.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

fn fmt_f32(x: f64) -> String {
    // Values are stored as `float`; print the shortest f32 round-trip form.
    format!("{:?}", x as f32)
}

fn write_header(
    out: &mut impl Write,
    n_vertices: usize,
    with_normals: bool,
    n_faces: Option<usize>,
) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {n_vertices}")?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    if with_normals {
        writeln!(out, "property float nx")?;
        writeln!(out, "property float ny")?;
        writeln!(out, "property float nz")?;
    }
    if let Some(n) = n_faces {
        writeln!(out, "element face {n}")?;
        writeln!(out, "property list uchar int vertex_indices")?;
    }
    writeln!(out, "end_header")?;
    Ok(())
}

/// Writes a triangle mesh. Every triangle index must reference a vertex.
pub fn write_mesh_ply(
    path: &Path,
    vertices: &[Vector3<f64>],
    triangles: &[[usize; 3]],
) -> Result<()> {
    for (i, tri) in triangles.iter().enumerate() {
        for &idx in tri {
            if idx >= vertices.len() {
                return Err(Error::InvalidInput(format!(
                    "triangle {i} references vertex {idx} of {}",
                    vertices.len()
                )));
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, vertices.len(), false, Some(triangles.len()))?;
    for v in vertices {
        writeln!(out, "{} {} {}", fmt_f32(v.x), fmt_f32(v.y), fmt_f32(v.z))?;
    }
    for t in triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a point cloud, optionally with per-point normals (same length).
pub fn write_pointcloud_ply(
    path: &Path,
    points: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
) -> Result<()> {
    if let Some(n) = normals {
        if n.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} points",
                n.len(),
                points.len()
            )));
        }
    }
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, points.len(), normals.is_some(), None)?;
    for (i, p) in points.iter().enumerate() {
        match normals {
            Some(ns) => {
                let n = ns[i];
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    fmt_f32(p.x),
                    fmt_f32(p.y),
                    fmt_f32(p.z),
                    fmt_f32(n.x),
                    fmt_f32(n.y),
                    fmt_f32(n.z)
                )?;
            }
            None => writeln!(out, "{} {} {}", fmt_f32(p.x), fmt_f32(p.y), fmt_f32(p.z))?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads vertex positions (and normals when present) from an ASCII PLY
/// written by this crate or a compatible tool. Faces and extra vertex
/// properties are ignored; only `x y z [nx ny nz]` float properties leading
/// the vertex element are interpreted.
pub fn read_pointcloud_ply(path: &Path) -> Result<(Vec<Vector3<f64>>, Option<Vec<Vector3<f64>>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();

    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(path, "missing `ply` magic".to_string()));
    }

    let mut n_vertices: Option<usize> = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut ascii = false;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => {
                ascii = it.next() == Some("ascii");
            }
            Some("element") => {
                let kind = it.next().unwrap_or("");
                in_vertex_element = kind == "vertex";
                if in_vertex_element {
                    let count = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(path, "bad vertex count".to_string()))?;
                    n_vertices = Some(count);
                }
            }
            Some("property") if in_vertex_element => {
                let tokens: Vec<&str> = it.collect();
                if let [_, name] = tokens.as_slice() {
                    vertex_props.push((*name).to_string());
                }
            }
            _ => {}
        }
    }
    if !ascii {
        return Err(Error::parse(path, "only ascii PLY is supported".to_string()));
    }
    let n_vertices =
        n_vertices.ok_or_else(|| Error::parse(path, "no vertex element".to_string()))?;
    if vertex_props.len() < 3 || vertex_props[..3] != ["x", "y", "z"] {
        return Err(Error::parse(
            path,
            format!("vertex properties must start with x y z, got {vertex_props:?}"),
        ));
    }
    let has_normals = vertex_props.len() >= 6 && vertex_props[3..6] == ["nx", "ny", "nz"];

    let mut points = Vec::with_capacity(n_vertices);
    let mut normals = if has_normals {
        Some(Vec::with_capacity(n_vertices))
    } else {
        None
    };
    for _ in 0..n_vertices {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, "truncated vertex list".to_string()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, format!("bad vertex line `{line}`")))?;
        if vals.len() < vertex_props.len() {
            return Err(Error::parse(path, format!("short vertex line `{line}`")));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if let Some(ns) = normals.as_mut() {
            ns.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    Ok((points, normals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!(
            "radfield-ply-{tag}-{}-{:?}.ply",
            std::process::id(),
            std::thread::current().id()
        ))
    }

    #[test]
    fn mesh_header_and_rows() {
        let path = temp_path("mesh");
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.5),
        ];
        write_mesh_ply(&path, &vertices, &[[0, 1, 2]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            &lines[..10],
            &[
                "ply",
                "format ascii 1.0",
                "element vertex 3",
                "property float x",
                "property float y",
                "property float z",
                "element face 1",
                "property list uchar int vertex_indices",
                "end_header",
                "0.0 0.0 0.0",
            ]
        );
        assert_eq!(lines.last(), Some(&"3 0 1 2"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn mesh_rejects_out_of_range_indices() {
        let path = temp_path("badmesh");
        let vertices = vec![Vector3::zeros()];
        assert!(write_mesh_ply(&path, &vertices, &[[0, 0, 1]]).is_err());
    }

    #[test]
    fn pointcloud_roundtrip_with_normals() {
        let path = temp_path("cloud");
        let points = vec![
            Vector3::new(0.125, -2.5, 3.0),
            Vector3::new(1.0, 2.0, -0.75),
        ];
        let normals = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)];
        write_pointcloud_ply(&path, &points, Some(&normals)).unwrap();
        let (p, n) = read_pointcloud_ply(&path).unwrap();
        let n = n.expect("normals present");
        for i in 0..2 {
            assert_relative_eq!(p[i], points[i], epsilon = 1e-6);
            assert_relative_eq!(n[i], normals[i], epsilon = 1e-6);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn pointcloud_roundtrip_without_normals() {
        let path = temp_path("cloudplain");
        let points = vec![Vector3::new(7.0, 8.0, 9.0)];
        write_pointcloud_ply(&path, &points, None).unwrap();
        let (p, n) = read_pointcloud_ply(&path).unwrap();
        assert!(n.is_none());
        assert_relative_eq!(p[0], points[0], epsilon = 1e-6);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let path = temp_path("mismatch");
        let points = vec![Vector3::zeros(); 2];
        let normals = vec![Vector3::z()];
        assert!(write_pointcloud_ply(&path, &points, Some(&normals)).is_err());
    }
}
