//! Isosurface extraction: dense density grids and classic marching cubes.
//!
//! A trained field is polygonized by sampling its density on a regular
//! lattice spanning the scene bounds and running marching cubes at an
//! iso-level `tau`. Vertices on shared cell edges are emitted exactly once,
//! and triangles are wound so their normals point toward decreasing density
//! — outward from an opaque object.

mod tables;

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Volume;
use crate::geometry::colmap::ViewPose;
use tables::{EDGE_ENDPOINTS, TRIANGLE_TABLE};

/// Default lattice resolution per axis.
pub const DEFAULT_GRID_RESOLUTION: usize = 256;

/// Densities on a regular lattice whose nodes span `[min, max]` inclusive.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Nodes per axis; cells per axis are one fewer.
    pub resolution: [usize; 3],
    /// Node densities, x fastest: `values[(z * ny + y) * nx + x]`.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let [nx, ny, _] = self.resolution;
        self.values[(z * ny + y) * nx + x]
    }

    /// World position of node `(x, y, z)`; endpoint nodes land exactly on
    /// the bounds.
    pub fn node(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let t = Vector3::new(
            x as f64 / (self.resolution[0] - 1) as f64,
            y as f64 / (self.resolution[1] - 1) as f64,
            z as f64 / (self.resolution[2] - 1) as f64,
        );
        Vector3::new(
            self.min.x * (1.0 - t.x) + self.max.x * t.x,
            self.min.y * (1.0 - t.y) + self.max.y * t.y,
            self.min.z * (1.0 - t.z) + self.max.z * t.z,
        )
    }

    /// Cell edge lengths per axis.
    pub fn cell_size(&self) -> Vector3<f64> {
        Vector3::new(
            (self.max.x - self.min.x) / (self.resolution[0] - 1) as f64,
            (self.max.y - self.min.y) / (self.resolution[1] - 1) as f64,
            (self.max.z - self.min.z) / (self.resolution[2] - 1) as f64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::InvalidInput(format!(
                "grid resolution {:?} must be at least 2 per axis",
                self.resolution
            )));
        }
        for axis in 0..3 {
            if !(self.min[axis] < self.max[axis]) {
                return Err(Error::InvalidInput(format!(
                    "grid bounds must satisfy min < max, got {} .. {} on axis {axis}",
                    self.min[axis], self.max[axis]
                )));
            }
        }
        if self.values.len() != self.node_count() {
            return Err(Error::InvalidInput(format!(
                "{} values for a {:?} grid",
                self.values.len(),
                self.resolution
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid densities must be finite and non-negative, found {v}"
            )));
        }
        Ok(())
    }
}

/// Evaluates `vol` on every node of a `[min, max]` lattice. Slices along z
/// are evaluated in parallel.
pub fn sample_density_grid(
    vol: &impl Volume,
    min: Vector3<f64>,
    max: Vector3<f64>,
    resolution: [usize; 3],
) -> Result<DensityGrid> {
    let mut grid = DensityGrid {
        min,
        max,
        resolution,
        values: Vec::new(),
    };
    grid.values = vec![0.0; grid.node_count()];
    // Shape checks up front; the sampled values are validated at the end.
    grid.validate()?;

    let [nx, ny, nz] = resolution;
    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut points = Vec::with_capacity(nx * ny);
            for y in 0..ny {
                for x in 0..nx {
                    points.push(grid.node(x, y, z));
                }
            }
            vol.densities(&points)
        })
        .collect();
    grid.values = slices.concat();
    grid.validate()?;
    Ok(grid)
}

/// An indexed triangle mesh.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(Error::NonFinite(format!("mesh vertex {i}")));
            }
        }
        for (i, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::InvalidInput(format!(
                    "triangle {i} references a vertex beyond {}",
                    self.vertices.len()
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidInput(format!(
                    "triangle {i} repeats a vertex index"
                )));
            }
        }
        Ok(())
    }
}

/// Canonical identity of a cube edge: the lattice offset of its lower corner
/// within the cell, and the axis it runs along. Shared edges of neighboring
/// cells map to the same key, so each crossing vertex is created once.
const EDGE_CANONICAL: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Lattice offsets of the eight cube corners, in table order.
const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Triangles and crossing vertices produced by one z-layer of cells, with
/// vertices addressed by canonical edge key until the layers are merged.
struct LayerMesh {
    /// `(key, position)` in first-encounter order within the layer.
    vertices: Vec<(u64, Vector3<f64>)>,
    triangles: Vec<[u64; 3]>,
}

/// Classic marching cubes over `grid` at iso-level `tau`.
///
/// Returns an indexed mesh with one vertex per crossed lattice edge.
/// Winding follows the table convention that triangle normals (right-hand
/// rule) point from denser toward sparser space. Grids entirely above or
/// below `tau` produce an empty mesh. Ambiguous saddle configurations are
/// resolved by the single lookup table, which can leave isolated non-manifold
/// edges on saddle-heavy fields; smooth density fields are unaffected.
///
/// Cell layers are processed in parallel and merged in layer order, so the
/// result is identical for any thread count.
pub fn marching_cubes(grid: &DensityGrid, tau: f64) -> Result<TriangleMesh> {
    grid.validate()?;
    if !tau.is_finite() {
        return Err(Error::InvalidInput(format!("iso-level must be finite, got {tau}")));
    }

    let nz = grid.resolution[2];
    let layers: Vec<LayerMesh> = (0..nz - 1)
        .into_par_iter()
        .map(|z| process_layer(grid, tau, z))
        .collect();

    // Boundary edges between layers appear in both; the first layer's copy
    // wins (both compute bit-identical positions from the same nodes).
    let mut mesh = TriangleMesh::default();
    let mut index_of: HashMap<u64, usize> = HashMap::new();
    for layer in layers {
        for (key, position) in layer.vertices {
            index_of.entry(key).or_insert_with(|| {
                mesh.vertices.push(position);
                mesh.vertices.len() - 1
            });
        }
        for tri in layer.triangles {
            mesh.triangles.push([
                index_of[&tri[0]],
                index_of[&tri[1]],
                index_of[&tri[2]],
            ]);
        }
    }

    mesh.validate()?;
    Ok(mesh)
}

fn process_layer(grid: &DensityGrid, tau: f64, z: usize) -> LayerMesh {
    let [nx, ny, _] = grid.resolution;
    // Canonical identity of a lattice edge: lower node index and axis.
    let edge_key = |n: [usize; 3], axis: usize| (((n[2] * ny + n[1]) * nx + n[0]) * 3 + axis) as u64;

    let mut layer = LayerMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    let mut seen: HashSet<u64> = HashSet::new();
    for y in 0..ny - 1 {
        for x in 0..nx - 1 {
            let corner_values =
                CORNER_OFFSETS.map(|[dx, dy, dz]| grid.value(x + dx, y + dy, z + dz));
            let mut cube = 0usize;
            for (i, &v) in corner_values.iter().enumerate() {
                if v < tau {
                    cube |= 1 << i;
                }
            }
            if cube == 0 || cube == 255 {
                continue;
            }

            let mut cell_edges = [0u64; 12];
            for (edge, &[a, b]) in EDGE_ENDPOINTS.iter().enumerate() {
                if (corner_values[a] < tau) == (corner_values[b] < tau) {
                    continue;
                }
                let ([ox, oy, oz], axis) = EDGE_CANONICAL[edge];
                let lo = [x + ox, y + oy, z + oz];
                let mut hi = lo;
                hi[axis] += 1;
                let key = edge_key(lo, axis);
                if seen.insert(key) {
                    // Interpolate in the canonical +axis direction so the
                    // position is identical no matter which cell asks.
                    let p0 = grid.node(lo[0], lo[1], lo[2]);
                    let p1 = grid.node(hi[0], hi[1], hi[2]);
                    let v0 = grid.value(lo[0], lo[1], lo[2]);
                    let v1 = grid.value(hi[0], hi[1], hi[2]);
                    let t = ((tau - v0) / (v1 - v0)).clamp(0.0, 1.0);
                    layer.vertices.push((key, p0 + t * (p1 - p0)));
                }
                cell_edges[edge] = key;
            }

            let row = &TRIANGLE_TABLE[cube];
            for tri in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                layer.triangles.push([
                    cell_edges[tri[0] as usize],
                    cell_edges[tri[1] as usize],
                    cell_edges[tri[2] as usize],
                ]);
            }
        }
    }
    layer
}

/// Samples `vol` on a `[min, max]` lattice and polygonizes it at `tau`.
pub fn extract_mesh(
    vol: &impl Volume,
    min: Vector3<f64>,
    max: Vector3<f64>,
    resolution: [usize; 3],
    tau: f64,
) -> Result<TriangleMesh> {
    let grid = sample_density_grid(vol, min, max, resolution)?;
    marching_cubes(&grid, tau)
}

/// Default extraction bounds: the axis-aligned box enclosing every camera
/// frustum truncated at `t_far`, expanded by 5% about its center.
pub fn default_extraction_bounds(
    views: &[ViewPose],
    t_far: f64,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if views.is_empty() {
        return Err(Error::InvalidInput(
            "extraction bounds need at least one camera".into(),
        ));
    }
    if !(t_far.is_finite() && t_far > 0.0) {
        return Err(Error::InvalidInput(format!(
            "far plane must be positive and finite, got {t_far}"
        )));
    }

    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vector3<f64>| {
        min = min.inf(&p);
        max = max.sup(&p);
    };
    for view in views {
        let cam = &view.camera;
        grow(view.pose.camera_center());
        // Image-plane extents at unit depth; pixel centers sit at integer
        // coordinates, so the sensor edges are half a pixel outside them.
        let xs = [-cam.cx / cam.fx, (cam.width as f64 - cam.cx) / cam.fx];
        let ys = [-cam.cy / cam.fy, (cam.height as f64 - cam.cy) / cam.fy];
        for x in xs {
            for y in ys {
                let dir = view.pose.direction_to_world(&Vector3::new(x, y, 1.0));
                grow(view.pose.camera_center() + t_far * dir);
            }
        }
    }

    let center = (min + max) * 0.5;
    let half = (max - center) * 1.05;
    Ok((center - half, center + half))
}
