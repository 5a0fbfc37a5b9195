//! Geometric priors: per-view depth/normal maps, reprojection-based
//! confidence, and point-cloud fusion.
//!
//! Depth and normal maps arrive from an external source (here, the
//! synthetic generator; in practice an MVS pipeline). Before they are used
//! to supervise training, each pixel receives a confidence weight derived
//! from forward-backward reprojection consistency: a reference pixel is
//! lifted to 3D using its depth, projected into a source view, re-lifted
//! using the *source* depth map, and projected back. The squared pixel
//! distance between start and end measures how well the two depth maps
//! agree. Per-pixel errors are aggregated over the K most consistent
//! sources and normalized by the reference view's mean error `ē`:
//!
//! ```text
//! c = exp(-(e / ē)²)
//! ```
//!
//! so c = 1 for perfectly consistent pixels and decays smoothly with
//! inconsistency. A binary variant thresholds instead of decaying.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::colmap::ViewPose;
use crate::geometry::{backproject, project, ImageBuffer};

/// Number of most-consistent source views averaged into a pixel's error.
pub const DEFAULT_TOP_K: usize = 4;

/// Round-trip error (in pixels) under which a source counts as a match for
/// the binary confidence variant.
pub const BINARY_MATCH_THRESHOLD_PX: f64 = 1.0;

/// Floor applied to the per-view mean squared error `ē`.
///
/// On exactly-consistent depth maps the round trip reproduces the starting
/// pixel up to floating-point noise (~1e-13 px), so the raw mean would be
/// dominated by rounding and the ratio e/ē would be meaningless. Flooring
/// ē at 0.01 px (squared: 1e-4) keeps confidence ≈ 1 in that regime while
/// leaving any genuinely noisy scene (ē ≫ 0.01 px) untouched.
pub const MIN_MEAN_ERROR_PX2: f64 = 1e-4;

/// How per-pixel confidence is derived from reprojection consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceMode {
    /// `c = exp(-(e/ē)²)`: smooth decay with error, normalized per view.
    Continuous,
    /// `c = 1` iff at least K sources round-trip within 1 px, else 0.
    Binary,
}

impl ConfidenceMode {
    /// Parse from the config/CLI token (`continuous` or `binary`).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "binary" => Ok(Self::Binary),
            other => Err(Error::InvalidInput(format!(
                "unknown confidence mode `{other}` (expected `continuous` or `binary`)"
            ))),
        }
    }
}

impl std::fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Continuous => write!(f, "continuous"),
            Self::Binary => write!(f, "binary"),
        }
    }
}

/// Per-view geometric priors for one scene.
///
/// All vectors are indexed by view. Depth maps store camera-space z in
/// world units (1 channel), normal maps store unit world-frame normals
/// (3 channels), confidence maps store weights in `[0, 1]` (1 channel).
/// Invalid pixels are encoded as NaN in every channel. `confidence` may
/// be empty until [`build_confidence_maps`] fills it.
#[derive(Debug, Clone)]
pub struct PriorSet {
    pub views: Vec<ViewPose>,
    pub depth: Vec<ImageBuffer>,
    pub normal: Vec<ImageBuffer>,
    pub confidence: Vec<ImageBuffer>,
}

impl PriorSet {
    /// Number of views.
    pub fn len(&self) -> usize {
        self.views.len()
    }

    /// True when the set holds no views.
    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Check structural consistency: map counts match the view count,
    /// per-view map dimensions match the camera, channel counts are right,
    /// and valid pixels satisfy the value invariants (depth > 0, normals
    /// unit within 1e-3, confidence in [0, 1]).
    pub fn validate(&self) -> Result<()> {
        let n = self.views.len();
        if self.depth.len() != n || self.normal.len() != n {
            return Err(Error::InvalidInput(format!(
                "prior set has {n} views but {} depth / {} normal maps",
                self.depth.len(),
                self.normal.len()
            )));
        }
        if !self.confidence.is_empty() && self.confidence.len() != n {
            return Err(Error::InvalidInput(format!(
                "prior set has {n} views but {} confidence maps",
                self.confidence.len()
            )));
        }
        for (i, view) in self.views.iter().enumerate() {
            let (w, h) = (view.camera.width, view.camera.height);
            let check = |map: &ImageBuffer, channels: usize, kind: &str| -> Result<()> {
                if map.width() != w || map.height() != h || map.channels() != channels {
                    return Err(Error::InvalidInput(format!(
                        "view {i} ({}): {kind} map is {}x{}x{}, expected {w}x{h}x{channels}",
                        view.name,
                        map.width(),
                        map.height(),
                        map.channels()
                    )));
                }
                Ok(())
            };
            check(&self.depth[i], 1, "depth")?;
            check(&self.normal[i], 3, "normal")?;
            if let Some(conf) = self.confidence.get(i) {
                check(conf, 1, "confidence")?;
            }
            for v in 0..h {
                for u in 0..w {
                    if self.depth[i].is_valid(u, v) {
                        let z = self.depth[i].value(u, v) as f64;
                        if z <= 0.0 {
                            return Err(Error::InvalidInput(format!(
                                "view {i}: non-positive depth {z} at ({u}, {v})"
                            )));
                        }
                    }
                    if self.normal[i].is_valid(u, v) {
                        let p = self.normal[i].pixel(u, v);
                        let norm = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
                        if (norm - 1.0).abs() > 1e-3 {
                            return Err(Error::InvalidInput(format!(
                                "view {i}: normal at ({u}, {v}) has norm {norm:.6}"
                            )));
                        }
                    }
                    if let Some(conf) = self.confidence.get(i) {
                        if conf.is_valid(u, v) {
                            let c = conf.value(u, v);
                            if !(0.0..=1.0).contains(&c) {
                                return Err(Error::InvalidInput(format!(
                                    "view {i}: confidence {c} at ({u}, {v}) outside [0, 1]"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bilinearly sample a 1-channel map at continuous pixel coordinates.
///
/// Integer coordinates address pixel centers (the same convention the
/// projection functions use). Samples outside the center grid, or with a
/// NaN corner that carries weight, return NaN — an invalid neighbor poisons
/// the lookup rather than silently blending garbage. Corners with zero
/// weight are ignored, so an exactly-on-grid sample only needs its own
/// pixel to be valid.
fn sample_bilinear(map: &ImageBuffer, u: f64, v: f64) -> f64 {
    let (w, h) = (map.width(), map.height());
    if !u.is_finite() || !v.is_finite() {
        return f64::NAN;
    }
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return f64::NAN;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let at = |x: usize, y: usize| map.value(x, y) as f64;
    let blend = |a: f64, b: f64, f: f64| if f > 0.0 { (1.0 - f) * a + f * b } else { a };
    let top = blend(at(x0, y0), at(x1, y0), fx);
    let bottom = blend(at(x0, y1), at(x1, y1), fx);
    blend(top, bottom, fy)
}

/// Forward-backward round trip of one reference pixel through one source
/// view. Returns the squared pixel error, or `None` when the trip fails
/// (projection behind a camera, sample off the source grid, or invalid
/// source depth).
fn round_trip(priors: &PriorSet, ref_idx: usize, src_idx: usize, u: usize, v: usize) -> Option<f64> {
    let ref_view = &priors.views[ref_idx];
    let src_view = &priors.views[src_idx];
    let z_ref = priors.depth[ref_idx].value(u, v) as f64;
    if !z_ref.is_finite() || z_ref <= 0.0 {
        return None;
    }
    // Lift the reference pixel to 3D and drop it into the source view.
    let world = backproject(&ref_view.camera, &ref_view.pose, u as f64, v as f64, z_ref).ok()?;
    let (su, sv, _) = project(&src_view.camera, &src_view.pose, &world).ok()?;
    // Re-lift using the source's own depth estimate at that (continuous)
    // location, then project back into the reference view.
    let z_src = sample_bilinear(&priors.depth[src_idx], su, sv);
    if !z_src.is_finite() || z_src <= 0.0 {
        return None;
    }
    let world_back = backproject(&src_view.camera, &src_view.pose, su, sv, z_src).ok()?;
    let (ru, rv, _) = project(&ref_view.camera, &ref_view.pose, &world_back).ok()?;
    let (du, dv) = (ru - u as f64, rv - v as f64);
    Some(du * du + dv * dv)
}

/// Squared round-trip errors of one reference pixel against every other
/// view, in view order, keeping only sources where the trip succeeded.
pub fn per_source_errors(priors: &PriorSet, ref_idx: usize, u: usize, v: usize) -> Vec<f64> {
    (0..priors.len())
        .filter(|&s| s != ref_idx)
        .filter_map(|s| round_trip(priors, ref_idx, s, u, v))
        .collect()
}

/// Mean of the K smallest per-source round-trip errors for one pixel.
///
/// Averaging the *most consistent* sources keeps occluded or oblique views
/// from poisoning a pixel that several other views corroborate. Returns
/// `None` when the reference pixel is invalid or fewer than K sources
/// complete the round trip.
pub fn reprojection_error(
    priors: &PriorSet,
    ref_idx: usize,
    u: usize,
    v: usize,
    k: usize,
) -> Option<f64> {
    if k == 0 {
        return None;
    }
    let mut errs = per_source_errors(priors, ref_idx, u, v);
    if errs.len() < k {
        return None;
    }
    errs.sort_unstable_by(f64::total_cmp);
    Some(errs[..k].iter().sum::<f64>() / k as f64)
}

/// Mean of the finite entries of a per-pixel error map.
pub fn mean_error(errors: &ImageBuffer) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..errors.height() {
        for u in 0..errors.width() {
            let e = errors.value(u, v) as f64;
            if e.is_finite() {
                sum += e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "mean_error: no valid entries in error map".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Soft confidence of one pixel given its error `e` and the reference
/// view's mean error `e_bar` (already floored by the caller; see
/// [`MIN_MEAN_ERROR_PX2`]): `exp(-(e/ē)²)`.
pub fn confidence(e: f64, e_bar: f64) -> f64 {
    if !e.is_finite() || e < 0.0 {
        return 0.0;
    }
    if e == 0.0 {
        // Avoids 0/0 when an entire view is exactly consistent.
        return 1.0;
    }
    let ratio = e / e_bar;
    (-ratio * ratio).exp()
}

/// Binary confidence: 1 when the pixel contributed a multi-view-consistent
/// point (enough sources round-trip within the pixel threshold), else 0.
pub fn binary_confidence(contributed: bool) -> f64 {
    if contributed {
        1.0
    } else {
        0.0
    }
}

/// Compute a confidence map for every view, returning a new `PriorSet`
/// with `confidence` filled. Invalid pixels (and pixels with fewer than
/// `k` usable sources) get confidence 0.
///
/// Requires at least `k + 1` views so every reference pixel can see `k`
/// sources. Rows are processed in parallel; the result is independent of
/// the thread count.
pub fn build_confidence_maps(priors: &PriorSet, k: usize, mode: ConfidenceMode) -> Result<PriorSet> {
    priors.validate()?;
    if k == 0 {
        return Err(Error::InvalidInput("confidence: K must be >= 1".into()));
    }
    if priors.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "confidence: need at least {} views for K = {k}, got {}",
            k + 1,
            priors.len()
        )));
    }
    let mut out = priors.clone();
    out.confidence = Vec::with_capacity(priors.len());
    for ref_idx in 0..priors.len() {
        let (w, h) = (priors.depth[ref_idx].width(), priors.depth[ref_idx].height());
        let conf = match mode {
            ConfidenceMode::Continuous => {
                let rows: Vec<Vec<f64>> = (0..h)
                    .into_par_iter()
                    .map(|v| {
                        (0..w)
                            .map(|u| {
                                reprojection_error(priors, ref_idx, u, v, k)
                                    .unwrap_or(f64::NAN)
                            })
                            .collect()
                    })
                    .collect();
                let mut errors = ImageBuffer::new(w, h, 1);
                for (v, row) in rows.iter().enumerate() {
                    for (u, &e) in row.iter().enumerate() {
                        errors.pixel_mut(u, v)[0] = e as f32;
                    }
                }
                let mut conf = ImageBuffer::new(w, h, 1);
                if errors.valid_count() == 0 {
                    // All-invalid view: zero confidence everywhere, no error.
                    conf
                } else {
                    let e_bar = mean_error(&errors)?.max(MIN_MEAN_ERROR_PX2);
                    for (v, row) in rows.iter().enumerate() {
                        for (u, &e) in row.iter().enumerate() {
                            let c = if e.is_finite() { confidence(e, e_bar) } else { 0.0 };
                            conf.pixel_mut(u, v)[0] = c as f32;
                        }
                    }
                    conf
                }
            }
            ConfidenceMode::Binary => {
                let rows: Vec<Vec<f64>> = (0..h)
                    .into_par_iter()
                    .map(|v| {
                        (0..w)
                            .map(|u| {
                                if !priors.depth[ref_idx].is_valid(u, v) {
                                    return 0.0;
                                }
                                let matches = per_source_errors(priors, ref_idx, u, v)
                                    .iter()
                                    .filter(|&&e| {
                                        e < BINARY_MATCH_THRESHOLD_PX * BINARY_MATCH_THRESHOLD_PX
                                    })
                                    .count();
                                binary_confidence(matches >= k)
                            })
                            .collect()
                    })
                    .collect();
                let mut conf = ImageBuffer::new(w, h, 1);
                for (v, row) in rows.iter().enumerate() {
                    for (u, &c) in row.iter().enumerate() {
                        conf.pixel_mut(u, v)[0] = c as f32;
                    }
                }
                conf
            }
        };
        out.confidence.push(conf);
    }
    Ok(out)
}

/// Backproject every pixel with valid depth, valid normal, and confidence
/// ≥ `min_conf` into a world-space point cloud with attached normals.
///
/// When no confidence maps have been built, all pixels are treated as
/// fully confident. Intended as an inspection artifact (`fused.ply`), not
/// as a training input.
pub fn fuse_pointcloud(priors: &PriorSet, min_conf: f64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (i, view) in priors.views.iter().enumerate() {
        let depth = &priors.depth[i];
        let normal = &priors.normal[i];
        let conf = priors.confidence.get(i);
        for v in 0..depth.height() {
            for u in 0..depth.width() {
                if !depth.is_valid(u, v) || !normal.is_valid(u, v) {
                    continue;
                }
                let c = conf.map_or(1.0, |m| m.value(u, v) as f64);
                if !(c >= min_conf) {
                    continue;
                }
                let z = depth.value(u, v) as f64;
                let Ok(point) = backproject(&view.camera, &view.pose, u as f64, v as f64, z)
                else {
                    continue;
                };
                points.push(point);
                let n = normal.pixel(u, v);
                normals.push(Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64));
            }
        }
    }
    (points, normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn constant_map(w: usize, h: usize, px: &[f32]) -> ImageBuffer {
        ImageBuffer::from_data(w, h, px.len(), px.repeat(w * h)).unwrap()
    }

    /// Two identity-rotation cameras separated along x, both seeing the
    /// world plane z = plane_z. Depth maps are analytically constant, so
    /// bilinear interpolation is exact and round trips close perfectly.
    fn plane_rig(plane_z: f32, baseline: f64) -> PriorSet {
        let cam = CameraIntrinsics::new(64, 64, 100.0, 100.0, 32.0, 32.0).unwrap();
        let make_view = |tx: f64, name: &str| ViewPose {
            camera: cam.clone(),
            pose: Pose::new(Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap(),
            name: name.to_string(),
        };
        let depth = constant_map(64, 64, &[plane_z]);
        let normal = constant_map(64, 64, &[0.0, 0.0, -1.0]);
        PriorSet {
            views: vec![make_view(0.0, "a"), make_view(-baseline, "b")],
            depth: vec![depth.clone(), depth],
            normal: vec![normal.clone(), normal],
            confidence: Vec::new(),
        }
    }

    #[test]
    fn consistent_plane_round_trips_exactly() {
        // The rig's disparity is fx * b / z = 15 px, so reference pixels
        // with u >= 15 land on the source grid.
        let priors = plane_rig(2.0, 0.3);
        for &(u, v) in &[(20usize, 7usize), (31, 31), (60, 12)] {
            let e = reprojection_error(&priors, 0, u, v, 1).unwrap();
            assert!(e < 1e-6, "error {e} at ({u}, {v})");
        }
        // Left of the disparity band the source sample falls off-grid.
        assert!(reprojection_error(&priors, 0, 5, 7, 1).is_none());
    }

    #[test]
    fn known_depth_shift_gives_error_four() {
        // With cameras at x = 0 and x = -b (baseline b = 0.3, fx = 100) and
        // the source depth overestimated from 2 to 2 + 4/13, the round trip
        // lands exactly 2 px away in u: fx·b·(1/2 − 13/30) = 2.
        let mut priors = plane_rig(2.0, 0.3);
        let shifted = 2.0 + 4.0 / 13.0;
        priors.depth[1] = constant_map(64, 64, &[shifted as f32]);
        let e = reprojection_error(&priors, 0, 31, 31, 1).unwrap();
        assert_relative_eq!(e, 4.0, max_relative = 1e-5);
    }

    #[test]
    fn source_behind_camera_is_invalid() {
        let mut priors = plane_rig(2.0, 0.3);
        // Rotate the source camera 180° about y: it now looks down -z and
        // the plane projects behind it.
        let about_face = Matrix3::new(
            -1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, -1.0,
        );
        priors.views[1].pose = Pose::new(about_face, Vector3::zeros()).unwrap();
        assert!(reprojection_error(&priors, 0, 31, 31, 1).is_none());
    }

    #[test]
    fn invalid_reference_pixel_is_invalid() {
        let mut priors = plane_rig(2.0, 0.3);
        priors.depth[0].invalidate(31, 31);
        assert!(reprojection_error(&priors, 0, 31, 31, 1).is_none());
        assert!(reprojection_error(&priors, 0, 32, 31, 1).is_some());
    }

    #[test]
    fn mean_error_averages_valid_entries() {
        let mut errors = ImageBuffer::new(2, 2, 1);
        errors.pixel_mut(0, 0)[0] = 1.0;
        errors.pixel_mut(1, 0)[0] = 3.0;
        errors.invalidate(0, 1);
        errors.invalidate(1, 1);
        assert_relative_eq!(mean_error(&errors).unwrap(), 2.0);
        let mut empty = ImageBuffer::new(1, 2, 1);
        empty.invalidate(0, 0);
        empty.invalidate(0, 1);
        assert!(mean_error(&empty).is_err());
    }

    #[test]
    fn confidence_closed_forms() {
        let e_bar = 0.37;
        assert_eq!(confidence(0.0, e_bar), 1.0);
        assert_relative_eq!(confidence(e_bar, e_bar), (-1.0f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(
            confidence(2.0 * e_bar, e_bar),
            (-4.0f64).exp(),
            epsilon = 1e-9
        );
        assert_eq!(confidence(f64::NAN, e_bar), 0.0);
    }

    #[test]
    fn confidence_monotone_in_error() {
        let e_bar = 1.3;
        let mut prev = confidence(0.0, e_bar);
        assert_eq!(prev, 1.0);
        for i in 1..200 {
            let c = confidence(0.05 * i as f64, e_bar);
            assert!(c <= prev, "confidence increased at step {i}");
            assert!((0.0..=1.0).contains(&c));
            prev = c;
        }
    }

    #[test]
    fn binary_confidence_passthrough() {
        assert_eq!(binary_confidence(true), 1.0);
        assert_eq!(binary_confidence(false), 0.0);
    }

    #[test]
    fn scene_scale_leaves_errors_unchanged() {
        // Projection divides by depth, so scaling all geometry (camera
        // translations and depth values) by s cancels exactly.
        let base = plane_rig(2.0, 0.3);
        // Perturb the source depth so the errors are non-trivial.
        let mut perturbed = base.clone();
        perturbed.depth[1] = constant_map(64, 64, &[2.13]);
        let scale = 7.5f64;
        let mut scaled = perturbed.clone();
        for view in &mut scaled.views {
            let r = *view.pose.rotation();
            let t = view.pose.translation() * scale;
            view.pose = Pose::new(r, t).unwrap();
        }
        for map in &mut scaled.depth {
            for value in map.data_mut() {
                *value *= scale as f32;
            }
        }
        for &(u, v) in &[(20usize, 40usize), (31, 31), (55, 20)] {
            let e0 = reprojection_error(&perturbed, 0, u, v, 1).unwrap();
            let e1 = reprojection_error(&scaled, 0, u, v, 1).unwrap();
            assert_relative_eq!(e0, e1, epsilon = 1e-6);
        }
    }

    #[test]
    fn build_needs_k_plus_one_views() {
        let priors = plane_rig(2.0, 0.3);
        assert!(build_confidence_maps(&priors, 2, ConfidenceMode::Continuous).is_err());
        assert!(build_confidence_maps(&priors, 0, ConfidenceMode::Continuous).is_err());
        assert!(build_confidence_maps(&priors, 1, ConfidenceMode::Continuous).is_ok());
    }

    #[test]
    fn consistent_depths_build_to_full_confidence_where_sources_exist() {
        // With a 15 px disparity, view 0 pixels left of u = 15 (and view 1
        // pixels right of u = 48) project off the other grid and must get
        // confidence 0; everything else round-trips exactly.
        let priors = plane_rig(2.0, 0.3);
        let covered = |view: usize, u: usize| {
            if view == 0 {
                u >= 15
            } else {
                u <= 48
            }
        };
        for mode in [ConfidenceMode::Continuous, ConfidenceMode::Binary] {
            let built = build_confidence_maps(&priors, 1, mode).unwrap();
            built.validate().unwrap();
            for (i, conf) in built.confidence.iter().enumerate() {
                for v in 0..conf.height() {
                    for u in 0..conf.width() {
                        let c = conf.value(u, v);
                        if covered(i, u) {
                            assert!(c >= 0.999, "{mode}: confidence {c} at ({u}, {v}) of view {i}");
                        } else {
                            assert_eq!(c, 0.0, "{mode}: uncovered ({u}, {v}) of view {i}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_invalid_view_gets_zero_confidence() {
        let mut priors = plane_rig(2.0, 0.3);
        let mut dead = ImageBuffer::new(64, 64, 1);
        for v in 0..64 {
            for u in 0..64 {
                dead.invalidate(u, v);
            }
        }
        priors.depth[0] = dead;
        let built = build_confidence_maps(&priors, 1, ConfidenceMode::Continuous).unwrap();
        for v in 0..64 {
            for u in 0..64 {
                assert_eq!(built.confidence[0].value(u, v), 0.0);
                // The healthy view's only source is dead, so it cannot
                // round-trip either — zero as well, but no crash.
                assert_eq!(built.confidence[1].value(u, v), 0.0);
            }
        }
    }

    #[test]
    fn fusion_respects_threshold_and_validity() {
        let priors = plane_rig(2.0, 0.3);
        let built = build_confidence_maps(&priors, 1, ConfidenceMode::Continuous).unwrap();
        let (points, normals) = fuse_pointcloud(&built, 1.1);
        assert!(points.is_empty() && normals.is_empty());
        let (points, normals) = fuse_pointcloud(&built, 0.0);
        assert_eq!(points.len(), 2 * 64 * 64);
        assert_eq!(normals.len(), points.len());
        // Every fused point lies on the z = 2 plane.
        for p in &points {
            assert_relative_eq!(p.z, 2.0, epsilon = 1e-9);
        }
        // Invalidating some pixels removes exactly those points.
        let mut holes = built.clone();
        holes.depth[0].invalidate(0, 0);
        holes.normal[0].invalidate(1, 0);
        let (points, _) = fuse_pointcloud(&holes, 0.0);
        assert_eq!(points.len(), 2 * 64 * 64 - 2);
    }

    #[test]
    fn bilinear_poisons_on_nan_and_bounds() {
        let mut map = ImageBuffer::new(4, 4, 1);
        for v in 0..4 {
            for u in 0..4 {
                map.pixel_mut(u, v)[0] = (u + 4 * v) as f32;
            }
        }
        assert_relative_eq!(sample_bilinear(&map, 1.0, 2.0), 9.0);
        assert_relative_eq!(sample_bilinear(&map, 1.5, 2.0), 9.5);
        assert_relative_eq!(sample_bilinear(&map, 1.25, 2.5), 11.25);
        assert_relative_eq!(sample_bilinear(&map, 3.0, 3.0), 15.0);
        assert!(sample_bilinear(&map, -0.1, 1.0).is_nan());
        assert!(sample_bilinear(&map, 3.1, 1.0).is_nan());
        map.invalidate(2, 2);
        assert!(sample_bilinear(&map, 1.5, 2.0).is_nan());
        assert!(sample_bilinear(&map, 1.0, 2.0).is_finite());
    }
}
