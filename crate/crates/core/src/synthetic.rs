//! Analytic test scenes with exact ground truth.
//!
//! The evaluation protocol needs a scene where *everything* is known in
//! closed form: images, depth maps, normal maps, and the true surface.
//! This module builds such scenes from spheres and axis-aligned boxes,
//! renders them with a tiny Lambertian raycaster, places a ring of posed
//! cameras around them, and derives pixel-exact geometric priors. A
//! corruption operator degrades those priors in controlled ways so the
//! confidence pipeline has something honest to detect.
//!
//! Everything here is deterministic: ground truth needs no randomness, and
//! the operators that do sample (surface sampling, prior corruption) take
//! explicit seeds.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::StandardNormal;

use crate::dataset::{Dataset, SceneMeta};
use crate::error::{Error, Result};
use crate::field::Volume;
use crate::geometry::colmap::ViewPose;
use crate::geometry::{
    depth_to_ray_scale, look_at, pixel_to_ray, CameraIntrinsics, ImageBuffer, Ray,
};
use crate::priors::PriorSet;
use crate::renderer::stream_rng;

/// Flat ambient term added to every shaded pixel.
pub const AMBIENT: f64 = 0.1;

/// Elevation angles (degrees) cycled through along the camera ring, so the
/// views are not coplanar and the top/bottom of the scene is observed.
pub const ELEVATION_CYCLE_DEG: [f64; 3] = [-25.0, 0.0, 25.0];

/// Margin applied to the scene's bounding sphere when fitting the field of
/// view: the scene fills roughly 1/margin of the image half-extent.
pub const RING_MARGIN: f64 = 1.15;

/// Default camera-ring radius for generated datasets.
pub const DEFAULT_RING_RADIUS: f64 = 2.0;

/// Near plane as a fraction of the ring radius.
pub const T_NEAR_FACTOR: f64 = 0.1;

/// Far plane as a fraction of the ring radius.
pub const T_FAR_FACTOR: f64 = 2.5;

/// A solid with an exact ray intersection and outward surface normal.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
        /// Linear RGB reflectance in [0, 1].
        albedo: Vector3<f64>,
    },
    /// Axis-aligned box.
    Cuboid {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
        albedo: Vector3<f64>,
    },
}

impl Primitive {
    pub fn albedo(&self) -> Vector3<f64> {
        match self {
            Self::Sphere { albedo, .. } | Self::Cuboid { albedo, .. } => *albedo,
        }
    }

    /// Axis-aligned bounds.
    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Self::Sphere { center, radius, .. } => {
                let r = Vector3::repeat(*radius);
                (center - r, center + r)
            }
            Self::Cuboid {
                center,
                half_extents,
                ..
            } => (center - half_extents, center + half_extents),
        }
    }

    /// Total surface area (used for area-weighted sampling).
    pub fn surface_area(&self) -> f64 {
        match self {
            Self::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Self::Cuboid { half_extents: h, .. } => {
                8.0 * (h.x * h.y + h.x * h.z + h.y * h.z)
            }
        }
    }

    /// Nearest intersection with `origin + t * dir` for `t` in
    /// `[t_near, t_far]`, as `(t, outward unit normal)`.
    ///
    /// Rays starting inside a primitive are treated as misses: the ground
    /// truth renderer only ever views scenes from outside.
    fn raycast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_near: f64,
        t_far: f64,
    ) -> Option<(f64, Vector3<f64>)> {
        match self {
            Self::Sphere { center, radius, .. } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t < t_near || t > t_far {
                    return None;
                }
                let normal = (origin + dir * t - center) / *radius;
                Some((t, normal))
            }
            Self::Cuboid {
                center,
                half_extents,
                ..
            } => {
                let bmin = center - half_extents;
                let bmax = center + half_extents;
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut axis = 0usize;
                for a in 0..3 {
                    let inv = 1.0 / dir[a];
                    let mut ta = (bmin[a] - origin[a]) * inv;
                    let mut tb = (bmax[a] - origin[a]) * inv;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t_enter {
                        t_enter = ta;
                        axis = a;
                    }
                    t_exit = t_exit.min(tb);
                }
                if t_enter > t_exit || t_enter < t_near || t_enter > t_far {
                    return None;
                }
                let mut normal = Vector3::zeros();
                normal[axis] = -dir[axis].signum();
                Some((t_enter, normal))
            }
        }
    }

    /// Euclidean gap to another primitive (negative when they overlap).
    fn gap_to(&self, other: &Primitive) -> f64 {
        // Distance from a point to an axis-aligned box's surface, negative
        // inside.
        fn point_box(p: &Vector3<f64>, c: &Vector3<f64>, h: &Vector3<f64>) -> f64 {
            let q = (p - c).abs() - h;
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            outside + q.max().min(0.0)
        }
        match (self, other) {
            (
                Self::Sphere {
                    center: c1,
                    radius: r1,
                    ..
                },
                Self::Sphere {
                    center: c2,
                    radius: r2,
                    ..
                },
            ) => (c1 - c2).norm() - r1 - r2,
            (
                Self::Sphere { center, radius, .. },
                Self::Cuboid {
                    center: bc,
                    half_extents: h,
                    ..
                },
            )
            | (
                Self::Cuboid {
                    center: bc,
                    half_extents: h,
                    ..
                },
                Self::Sphere { center, radius, .. },
            ) => point_box(center, bc, h) - radius,
            (
                Self::Cuboid {
                    center: c1,
                    half_extents: h1,
                    ..
                },
                Self::Cuboid {
                    center: c2,
                    half_extents: h2,
                    ..
                },
            ) => {
                // Largest per-axis separation decides the gap for AABBs.
                let d = (c1 - c2).abs() - (h1 + h2);
                d.max()
            }
        }
    }
}

/// One ground-truth surface hit.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceHit {
    /// Distance along the (normalized) ray.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Outward unit surface normal, world frame.
    pub normal: Vector3<f64>,
    /// Shaded linear RGB.
    pub color: Vector3<f64>,
}

/// A scene of non-overlapping primitives under one directional light.
#[derive(Debug, Clone)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    /// Unit direction pointing *toward* the light.
    pub light_dir: Vector3<f64>,
}

impl AnalyticScene {
    /// The default evaluation scene: a sphere and a box side by side, with
    /// a bounding-box diagonal of about 2 world units.
    pub fn fixture() -> Self {
        Self {
            primitives: vec![
                Primitive::Sphere {
                    center: Vector3::new(-0.35, 0.0, 0.0),
                    radius: 0.5,
                    albedo: Vector3::new(0.85, 0.30, 0.25),
                },
                Primitive::Cuboid {
                    center: Vector3::new(0.45, 0.0, 0.0),
                    half_extents: Vector3::new(0.22, 0.22, 0.22),
                    albedo: Vector3::new(0.25, 0.45, 0.85),
                },
            ],
            light_dir: Vector3::new(0.45, -0.35, 0.80).normalize(),
        }
    }

    /// A single origin-centered sphere; handy when closed-form checks need
    /// the simplest possible geometry.
    pub fn single_sphere() -> Self {
        Self {
            primitives: vec![Primitive::Sphere {
                center: Vector3::zeros(),
                radius: 0.5,
                albedo: Vector3::new(0.8, 0.8, 0.8),
            }],
            light_dir: Vector3::new(0.45, -0.35, 0.80).normalize(),
        }
    }

    /// Check scene invariants: at least one primitive, positive sizes,
    /// albedos in [0, 1], a usable light direction, and pairwise
    /// non-overlapping primitives (the raycaster and the sampler both
    /// assume disjoint surfaces).
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidInput("scene has no primitives".into()));
        }
        if !(self.light_dir.norm() > 1e-9) {
            return Err(Error::InvalidInput("light direction is degenerate".into()));
        }
        for (i, prim) in self.primitives.iter().enumerate() {
            let ok_size = match prim {
                Primitive::Sphere { radius, .. } => *radius > 0.0,
                Primitive::Cuboid { half_extents, .. } => half_extents.min() > 0.0,
            };
            if !ok_size {
                return Err(Error::InvalidInput(format!(
                    "primitive {i} has non-positive size"
                )));
            }
            let a = prim.albedo();
            if a.min() < 0.0 || a.max() > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "primitive {i} albedo {a:?} outside [0, 1]"
                )));
            }
        }
        for i in 0..self.primitives.len() {
            for j in i + 1..self.primitives.len() {
                let gap = self.primitives[i].gap_to(&self.primitives[j]);
                if gap <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "primitives {i} and {j} overlap (gap {gap:.4})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the whole scene.
    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for prim in &self.primitives {
            let (lo, hi) = prim.bbox();
            min = min.inf(&lo);
            max = max.sup(&hi);
        }
        (min, max)
    }

    /// Lambertian shading with a flat ambient floor:
    /// `min(1, albedo * max(0, n·l) + 0.1)` per channel.
    pub fn shade(&self, normal: &Vector3<f64>, albedo: &Vector3<f64>) -> Vector3<f64> {
        let lambert = normal.dot(&self.light_dir).max(0.0);
        (albedo * lambert).add_scalar(AMBIENT).map(|c| c.min(1.0))
    }

    /// Nearest surface hit along a ray, within the ray's `[t_near, t_far]`.
    pub fn raycast(&self, ray: &Ray) -> Option<SurfaceHit> {
        let dir = ray.direction.into_inner();
        let mut best: Option<(f64, Vector3<f64>, Vector3<f64>)> = None;
        for prim in &self.primitives {
            if let Some((t, normal)) = prim.raycast(&ray.origin, &dir, ray.t_near, ray.t_far) {
                if best.as_ref().is_none_or(|(bt, _, _)| t < *bt) {
                    best = Some((t, normal, prim.albedo()));
                }
            }
        }
        best.map(|(t, normal, albedo)| SurfaceHit {
            t,
            point: ray.origin + dir * t,
            normal,
            color: self.shade(&normal, &albedo),
        })
    }
}

/// Posed cameras on a ring around the scene, looking at its center.
///
/// View `i` sits at azimuth `2πi/n` with the elevation cycling through
/// [`ELEVATION_CYCLE_DEG`]. The focal length is fitted so the scene's
/// bounding sphere fills the image with a [`RING_MARGIN`] margin.
pub fn ring_views(
    scene: &AnalyticScene,
    n_views: usize,
    width: usize,
    height: usize,
    ring_radius: f64,
) -> Result<Vec<ViewPose>> {
    let (bmin, bmax) = scene.bbox();
    let target = (bmin + bmax) * 0.5;
    let r_scene = ((bmax - bmin) * 0.5).norm();
    if !(ring_radius > r_scene) {
        return Err(Error::InvalidInput(format!(
            "ring radius {ring_radius} must exceed the scene radius {r_scene:.3}"
        )));
    }
    let sin_half = (RING_MARGIN * r_scene / ring_radius).min(0.98);
    let tan_half = sin_half / (1.0 - sin_half * sin_half).sqrt();
    let focal = 0.5 * width.min(height) as f64 / tan_half;
    let cam = CameraIntrinsics::new(
        width,
        height,
        focal,
        focal,
        width as f64 / 2.0,
        height as f64 / 2.0,
    )?;
    let up = Vector3::new(0.0, 0.0, 1.0);
    (0..n_views)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n_views as f64;
            let el = ELEVATION_CYCLE_DEG[i % ELEVATION_CYCLE_DEG.len()].to_radians();
            let eye = target
                + ring_radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Ok(ViewPose {
                camera: cam.clone(),
                pose: look_at(&eye, &target, &up)?,
                name: format!("view_{i:03}"),
            })
        })
        .collect()
}

/// Raycast one view into its ground-truth image, depth map (camera-space
/// z), and world-frame normal map. Background pixels are black in the
/// image and invalid (NaN) in depth and normals.
pub fn render_view(
    scene: &AnalyticScene,
    view: &ViewPose,
    t_near: f64,
    t_far: f64,
) -> Result<(ImageBuffer, ImageBuffer, ImageBuffer)> {
    let (w, h) = (view.camera.width, view.camera.height);
    let mut image = ImageBuffer::new(w, h, 3);
    let mut depth = ImageBuffer::new(w, h, 1);
    let mut normal = ImageBuffer::new(w, h, 3);
    for v in 0..h {
        for u in 0..w {
            let ray = pixel_to_ray(&view.camera, &view.pose, u as f64, v as f64, t_near, t_far)?;
            match scene.raycast(&ray) {
                Some(hit) => {
                    let px = image.pixel_mut(u, v);
                    px[0] = hit.color.x as f32;
                    px[1] = hit.color.y as f32;
                    px[2] = hit.color.z as f32;
                    depth.pixel_mut(u, v)[0] =
                        (hit.t / depth_to_ray_scale(&view.camera, u as f64, v as f64)) as f32;
                    let npx = normal.pixel_mut(u, v);
                    npx[0] = hit.normal.x as f32;
                    npx[1] = hit.normal.y as f32;
                    npx[2] = hit.normal.z as f32;
                }
                None => {
                    depth.invalidate(u, v);
                    normal.invalidate(u, v);
                }
            }
        }
    }
    Ok((image, depth, normal))
}

/// Generate a complete synthetic dataset: ring views, ground-truth images,
/// and pixel-exact depth/normal priors (confidence left empty).
pub fn generate_dataset(
    scene: &AnalyticScene,
    n_views: usize,
    width: usize,
    height: usize,
    ring_radius: f64,
) -> Result<Dataset> {
    scene.validate()?;
    if n_views < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 views for multi-view supervision, got {n_views}"
        )));
    }
    let views = ring_views(scene, n_views, width, height, ring_radius)?;
    let t_near = T_NEAR_FACTOR * ring_radius;
    let t_far = T_FAR_FACTOR * ring_radius;
    let mut images = Vec::with_capacity(n_views);
    let mut depths = Vec::with_capacity(n_views);
    let mut normals = Vec::with_capacity(n_views);
    for view in &views {
        let (image, depth, normal) = render_view(scene, view, t_near, t_far)?;
        images.push(image);
        depths.push(depth);
        normals.push(normal);
    }
    let (bbox_min, bbox_max) = scene.bbox();
    Ok(Dataset {
        images,
        priors: PriorSet {
            views,
            depth: depths,
            normal: normals,
            confidence: Vec::new(),
        },
        meta: SceneMeta {
            t_near,
            t_far,
            bbox_min,
            bbox_max,
            ring_radius,
        },
    })
}

/// A rectangular image region given as fractions of the image size, so one
/// region applies uniformly across views and resolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl Region {
    pub fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&u0)
            && (0.0..=1.0).contains(&v0)
            && u0 < u1
            && v0 < v1
            && u1 <= 1.0
            && v1 <= 1.0;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "region ({u0}, {v0})..({u1}, {v1}) must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(Self { u0, v0, u1, v1 })
    }

    /// The whole image.
    pub fn full() -> Self {
        Self {
            u0: 0.0,
            v0: 0.0,
            u1: 1.0,
            v1: 1.0,
        }
    }

    /// Pixel ranges `(x0..x1, y0..y1)` covered in a `w` x `h` image.
    fn pixel_ranges(&self, w: usize, h: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let x0 = (self.u0 * w as f64).floor().max(0.0) as usize;
        let x1 = ((self.u1 * w as f64).ceil() as usize).min(w);
        let y0 = (self.v0 * h as f64).floor().max(0.0) as usize;
        let y1 = ((self.v1 * h as f64).ceil() as usize).min(h);
        (x0..x1.max(x0), y0..y1.max(y0))
    }

    /// Does the region contain pixel `(u, v)` of a `w` x `h` image?
    pub fn contains(&self, u: usize, v: usize, w: usize, h: usize) -> bool {
        let (xs, ys) = self.pixel_ranges(w, h);
        xs.contains(&u) && ys.contains(&v)
    }
}

/// Degrade priors inside a region: add iid Gaussian noise (std `sigma_d`,
/// world units) to valid depths, then invalidate a random
/// `invalid_fraction` of the region's pixels (depth and normal together).
///
/// The corruption is drawn once per call, deterministically from `seed`;
/// calling with `sigma_d = 0` and `invalid_fraction = 0` returns a
/// bit-identical copy. Corrupting twice with different regions composes
/// (e.g. mild global noise plus a heavily damaged patch).
pub fn corrupt_priors(
    priors: &PriorSet,
    region: &Region,
    sigma_d: f64,
    invalid_fraction: f64,
    seed: u64,
) -> Result<PriorSet> {
    if !(sigma_d >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "depth noise sigma must be >= 0, got {sigma_d}"
        )));
    }
    if !(0.0..=1.0).contains(&invalid_fraction) {
        return Err(Error::InvalidInput(format!(
            "invalid fraction must be in [0, 1], got {invalid_fraction}"
        )));
    }
    let mut out = priors.clone();
    for i in 0..out.len() {
        let (w, h) = (out.depth[i].width(), out.depth[i].height());
        let (xs, ys) = region.pixel_ranges(w, h);
        let mut rng = stream_rng(seed, i as u64, 0);
        for v in ys.clone() {
            for u in xs.clone() {
                if sigma_d > 0.0 {
                    let noise: f64 = rng.sample(StandardNormal);
                    if out.depth[i].is_valid(u, v) {
                        let z = out.depth[i].value(u, v) as f64 + sigma_d * noise;
                        // Keep corrupted depths physically usable.
                        out.depth[i].pixel_mut(u, v)[0] = z.max(1e-3) as f32;
                    }
                }
                if invalid_fraction > 0.0 && rng.random::<f64>() < invalid_fraction {
                    out.depth[i].invalidate(u, v);
                    out.normal[i].invalidate(u, v);
                }
            }
        }
    }
    Ok(out)
}

/// Draw `n` points uniformly over the scene's total surface area,
/// deterministically from `seed`. This is the reference point set that
/// extracted meshes are compared against.
pub fn surface_samples(scene: &AnalyticScene, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let areas: Vec<f64> = scene.primitives.iter().map(Primitive::surface_area).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut idx = 0;
        while idx + 1 < areas.len() && pick >= areas[idx] {
            pick -= areas[idx];
            idx += 1;
        }
        points.push(sample_primitive_surface(&scene.primitives[idx], &mut rng));
    }
    points
}

fn sample_primitive_surface(prim: &Primitive, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match prim {
        Primitive::Sphere { center, radius, .. } => {
            // Uniform over the sphere: z uniform in [-1, 1], azimuth uniform.
            let z = 1.0 - 2.0 * rng.random::<f64>();
            let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let rxy = (1.0 - z * z).max(0.0).sqrt();
            center + *radius * Vector3::new(rxy * phi.cos(), rxy * phi.sin(), z)
        }
        Primitive::Cuboid {
            center,
            half_extents: hf,
            ..
        } => {
            // Pick a face pair proportionally to its area, then a side.
            let weights = [hf.y * hf.z, hf.x * hf.z, hf.x * hf.y];
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 0;
            while axis + 1 < 3 && pick >= weights[axis] {
                pick -= weights[axis];
                axis += 1;
            }
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            let mut p = *center;
            p[axis] += sign * hf[axis];
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            p[a1] += (2.0 * rng.random::<f64>() - 1.0) * hf[a1];
            p[a2] += (2.0 * rng.random::<f64>() - 1.0) * hf[a2];
            p
        }
    }
}

/// Smooth analytic density field concentrated inside a sphere:
/// `σ(x) = amplitude · logistic((radius − |x − center|) / falloff)`.
///
/// The density passes through exactly `amplitude / 2` on the sphere
/// surface, so extracting the level set at half the amplitude recovers the
/// sphere, and rendering it with a large amplitude behaves like an opaque
/// ball. Its outward surface normal is radial by construction, which makes
/// it the standard oracle for normal and depth rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereDensityField {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub amplitude: f64,
    /// Transition width of the logistic shell, in world units.
    pub falloff: f64,
    pub albedo: [f64; 3],
}

impl SphereDensityField {
    pub fn density_at(&self, p: &Vector3<f64>) -> f64 {
        let d = (p - self.center).norm();
        self.amplitude / (1.0 + ((d - self.radius) / self.falloff).exp())
    }

    /// Exact outward unit normal of the level sets at `p` (radial).
    pub fn analytic_normal(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let d = p - self.center;
        let norm = d.norm();
        (norm > 1e-12).then(|| d / norm)
    }
}

impl Volume for SphereDensityField {
    fn densities(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        points.iter().map(|p| self.density_at(p)).collect()
    }

    fn radiance(&self, points: &[Vector3<f64>], _dir: &Vector3<f64>) -> (Vec<f64>, Vec<[f64; 3]>) {
        (self.densities(points), vec![self.albedo; points.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::volume_normal_at;
    use approx::assert_relative_eq;

    fn bits(map: &ImageBuffer) -> Vec<u32> {
        map.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn sphere_center_ray_hits_front() {
        let scene = AnalyticScene::single_sphere();
        let ray = Ray::new(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::new(0.0, 0.0, 1.0),
            0.1,
            10.0,
        )
        .unwrap();
        let hit = scene.raycast(&ray).unwrap();
        assert_relative_eq!(hit.t, 1.5, epsilon = 1e-12);
        assert_relative_eq!(hit.normal, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
        assert_relative_eq!(hit.point, Vector3::new(0.0, 0.0, -0.5), epsilon = 1e-12);
    }

    #[test]
    fn sphere_offset_ray_matches_quadratic() {
        // Ray x = 0.3 parallel to z: hits z = -sqrt(0.5² - 0.3²) = -0.4,
        // so t = 1.6 from z = -2 and the normal is (0.6, 0, -0.8).
        let scene = AnalyticScene::single_sphere();
        let ray = Ray::new(
            Vector3::new(0.3, 0.0, -2.0),
            Vector3::new(0.0, 0.0, 1.0),
            0.1,
            10.0,
        )
        .unwrap();
        let hit = scene.raycast(&ray).unwrap();
        assert_relative_eq!(hit.t, 1.6, epsilon = 1e-12);
        assert_relative_eq!(hit.normal, Vector3::new(0.6, 0.0, -0.8), epsilon = 1e-12);

        let miss = Ray::new(
            Vector3::new(0.51, 0.0, -2.0),
            Vector3::new(0.0, 0.0, 1.0),
            0.1,
            10.0,
        )
        .unwrap();
        assert!(scene.raycast(&miss).is_none());
    }

    #[test]
    fn cuboid_face_hit_and_normal() {
        let scene = AnalyticScene::fixture();
        let ray = Ray::new(
            Vector3::new(2.0, 0.05, 0.03),
            Vector3::new(-1.0, 0.0, 0.0),
            0.1,
            10.0,
        )
        .unwrap();
        let hit = scene.raycast(&ray).unwrap();
        assert_relative_eq!(hit.t, 2.0 - 0.67, epsilon = 1e-12);
        assert_relative_eq!(hit.normal, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);

        let miss = Ray::new(
            Vector3::new(2.0, 0.3, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            0.1,
            1.2,
        )
        .unwrap();
        assert!(scene.raycast(&miss).is_none());
    }

    #[test]
    fn nearest_primitive_wins() {
        let scene = AnalyticScene::fixture();
        // From +x the box face at x = 0.67 occludes the sphere.
        let from_right = Ray::new(
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            0.1,
            10.0,
        )
        .unwrap();
        let hit = scene.raycast(&from_right).unwrap();
        assert_relative_eq!(hit.point.x, 0.67, epsilon = 1e-12);
        // From -x the sphere front at x = -0.85 is hit first.
        let from_left = Ray::new(
            Vector3::new(-3.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            0.1,
            10.0,
        )
        .unwrap();
        let hit = scene.raycast(&from_left).unwrap();
        assert_relative_eq!(hit.point.x, -0.85, epsilon = 1e-12);
        assert_relative_eq!(hit.normal, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn shading_closed_forms() {
        let scene = AnalyticScene::single_sphere();
        let albedo = Vector3::new(0.8, 0.8, 0.8);
        // Normal facing the light: full Lambert plus ambient.
        let lit = scene.shade(&scene.light_dir.clone(), &albedo);
        assert_relative_eq!(lit, Vector3::repeat(0.9), epsilon = 1e-12);
        // Normal facing away: ambient floor only.
        let dark = scene.shade(&(-scene.light_dir), &albedo);
        assert_relative_eq!(dark, Vector3::repeat(AMBIENT), epsilon = 1e-12);
        // Channels clamp at 1.
        let bright = scene.shade(&scene.light_dir.clone(), &Vector3::repeat(1.0));
        assert_relative_eq!(bright, Vector3::repeat(1.0), epsilon = 1e-12);
    }

    #[test]
    fn fixture_bbox_and_diagonal() {
        let scene = AnalyticScene::fixture();
        scene.validate().unwrap();
        let (min, max) = scene.bbox();
        assert_relative_eq!(min, Vector3::new(-0.85, -0.5, -0.5), epsilon = 1e-12);
        assert_relative_eq!(max, Vector3::new(0.67, 0.5, 0.5), epsilon = 1e-12);
        let diag = (max - min).norm();
        assert!((2.0..2.2).contains(&diag), "diagonal {diag}");
    }

    #[test]
    fn validate_rejects_overlap() {
        let mut scene = AnalyticScene::single_sphere();
        scene.primitives.push(Primitive::Cuboid {
            center: Vector3::new(0.4, 0.0, 0.0),
            half_extents: Vector3::repeat(0.2),
            albedo: Vector3::repeat(0.5),
        });
        assert!(scene.validate().is_err());
        // Moving the box away fixes it.
        scene.primitives[1] = Primitive::Cuboid {
            center: Vector3::new(1.0, 0.0, 0.0),
            half_extents: Vector3::repeat(0.2),
            albedo: Vector3::repeat(0.5),
        };
        scene.validate().unwrap();
    }

    #[test]
    fn dataset_depth_at_principal_pixel() {
        // Odd resolution puts a pixel center exactly on the optical axis;
        // the camera looks at the sphere center from ring distance, so the
        // depth there is ring_radius - radius.
        let scene = AnalyticScene::single_sphere();
        let data = generate_dataset(&scene, 3, 33, 33, 2.0).unwrap();
        assert_eq!(data.images.len(), 3);
        assert_eq!(data.priors.len(), 3);
        assert!(data.priors.confidence.is_empty());
        assert_relative_eq!(data.meta.t_near, 0.2);
        assert_relative_eq!(data.meta.t_far, 5.0);
        data.priors.validate().unwrap();
        for i in 0..3 {
            let z = data.priors.depth[i].value(16, 16) as f64;
            assert_relative_eq!(z, 1.5, epsilon = 1e-9);
            // The surface normal there points back at the camera.
            let n = data.priors.normal[i].pixel(16, 16);
            let n = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            let to_cam = (data.priors.views[i].pose.camera_center() - Vector3::zeros()).normalize();
            assert_relative_eq!(n.dot(&to_cam), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn dataset_needs_two_views() {
        let scene = AnalyticScene::single_sphere();
        assert!(generate_dataset(&scene, 1, 16, 16, 2.0).is_err());
    }

    #[test]
    fn background_pixels_are_black_and_invalid() {
        let scene = AnalyticScene::single_sphere();
        let data = generate_dataset(&scene, 2, 33, 33, 2.0).unwrap();
        // Corner pixels look past the sphere.
        let img = &data.images[0];
        assert_eq!(img.pixel(0, 0), &[0.0, 0.0, 0.0]);
        assert!(!data.priors.depth[0].is_valid(0, 0));
        assert!(!data.priors.normal[0].is_valid(0, 0));
        // And some pixels do hit.
        assert!(data.priors.depth[0].valid_count() > 0);
    }

    #[test]
    fn corruption_zero_params_is_identity() {
        let scene = AnalyticScene::single_sphere();
        let data = generate_dataset(&scene, 2, 17, 17, 2.0).unwrap();
        let out = corrupt_priors(&data.priors, &Region::full(), 0.0, 0.0, 7).unwrap();
        for i in 0..2 {
            assert_eq!(bits(&out.depth[i]), bits(&data.priors.depth[i]));
            assert_eq!(bits(&out.normal[i]), bits(&data.priors.normal[i]));
        }
    }

    #[test]
    fn corruption_full_invalidation_clears_region() {
        let scene = AnalyticScene::single_sphere();
        let data = generate_dataset(&scene, 2, 17, 17, 2.0).unwrap();
        let region = Region::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let out = corrupt_priors(&data.priors, &region, 0.0, 1.0, 7).unwrap();
        for i in 0..2 {
            for v in 0..17 {
                for u in 0..17 {
                    if region.contains(u, v, 17, 17) {
                        assert!(!out.depth[i].is_valid(u, v));
                        assert!(!out.normal[i].is_valid(u, v));
                    } else {
                        assert_eq!(
                            out.depth[i].is_valid(u, v),
                            data.priors.depth[i].is_valid(u, v)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn corruption_is_seeded_and_noisy() {
        let scene = AnalyticScene::single_sphere();
        let data = generate_dataset(&scene, 2, 17, 17, 2.0).unwrap();
        let a = corrupt_priors(&data.priors, &Region::full(), 0.05, 0.1, 3).unwrap();
        let b = corrupt_priors(&data.priors, &Region::full(), 0.05, 0.1, 3).unwrap();
        let c = corrupt_priors(&data.priors, &Region::full(), 0.05, 0.1, 4).unwrap();
        assert_eq!(bits(&a.depth[0]), bits(&b.depth[0]));
        assert_eq!(bits(&a.depth[1]), bits(&b.depth[1]));
        assert_ne!(bits(&a.depth[0]), bits(&c.depth[0]));
        // Noise actually moved valid depths.
        let moved = (0..17 * 17)
            .filter(|&i| {
                let (u, v) = (i % 17, i / 17);
                data.priors.depth[0].is_valid(u, v)
                    && a.depth[0].is_valid(u, v)
                    && a.depth[0].value(u, v) != data.priors.depth[0].value(u, v)
            })
            .count();
        assert!(moved > 0);
        // And parameter validation holds.
        assert!(corrupt_priors(&data.priors, &Region::full(), -1.0, 0.0, 0).is_err());
        assert!(corrupt_priors(&data.priors, &Region::full(), 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn surface_samples_lie_on_sphere() {
        let scene = AnalyticScene::single_sphere();
        let pts = surface_samples(&scene, 8000, 11);
        assert_eq!(pts.len(), 8000);
        let mut octants = [0usize; 8];
        for p in &pts {
            assert_relative_eq!(p.norm(), 0.5, epsilon = 1e-9);
            let idx = (p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1
                | ((p.z > 0.0) as usize) << 2;
            octants[idx] += 1;
        }
        // Binomial 3-sigma bound around n/8.
        let sigma = (8000.0f64 * 0.125 * 0.875).sqrt();
        for (i, &count) in octants.iter().enumerate() {
            assert!(
                (count as f64 - 1000.0).abs() < 3.0 * sigma,
                "octant {i}: {count}"
            );
        }
        assert!(surface_samples(&scene, 0, 11).is_empty());
        assert_eq!(surface_samples(&scene, 100, 5), surface_samples(&scene, 100, 5));
    }

    #[test]
    fn surface_samples_split_by_area() {
        let scene = AnalyticScene::fixture();
        let pts = surface_samples(&scene, 5000, 2);
        let sphere_area = 4.0 * std::f64::consts::PI * 0.25;
        let box_area = 8.0 * 3.0 * 0.22 * 0.22;
        let p_sphere = sphere_area / (sphere_area + box_area);
        let on_sphere = pts
            .iter()
            .filter(|p| ((*p - Vector3::new(-0.35, 0.0, 0.0)).norm() - 0.5).abs() < 1e-9)
            .count();
        // Everything not on the sphere must sit on the box's surface.
        for p in &pts {
            let on_s = ((p - Vector3::new(-0.35, 0.0, 0.0)).norm() - 0.5).abs() < 1e-9;
            if !on_s {
                let q = (p - Vector3::new(0.45, 0.0, 0.0)).abs();
                let to_face = (q - Vector3::repeat(0.22)).abs().min();
                assert!(to_face < 1e-9, "stray sample {p:?}");
            }
        }
        let mean = 5000.0 * p_sphere;
        let sigma = (5000.0 * p_sphere * (1.0 - p_sphere)).sqrt();
        assert!(
            (on_sphere as f64 - mean).abs() < 3.0 * sigma,
            "{on_sphere} sphere samples, expected ~{mean:.0}"
        );
    }

    #[test]
    fn sphere_density_field_levels() {
        let field = SphereDensityField {
            center: Vector3::new(0.1, -0.2, 0.05),
            radius: 0.4,
            amplitude: 100.0,
            falloff: 0.02,
            albedo: [0.6, 0.7, 0.8],
        };
        // Half amplitude exactly on the surface.
        let on_surface = field.center + Vector3::new(0.4, 0.0, 0.0);
        assert_relative_eq!(field.density_at(&on_surface), 50.0, epsilon = 1e-9);
        // Deep inside ≈ amplitude, far outside ≈ 0.
        assert_relative_eq!(field.density_at(&field.center), 100.0, epsilon = 1e-4);
        let far = field.center + Vector3::new(1.0, 0.0, 0.0);
        assert!(field.density_at(&far) < 1e-8);
        // Numeric normal of the level set is radial.
        let n = volume_normal_at(&field, &on_surface, 1e-4).unwrap();
        assert_relative_eq!(n, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-6);
        // Radiance is the constant albedo.
        let (sig, col) = field.radiance(&[field.center], &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(sig.len(), 1);
        assert_eq!(col[0], [0.6, 0.7, 0.8]);
    }
}
