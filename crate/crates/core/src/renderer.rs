//! Volumetric rendering: stratified + importance sampling along rays,
//! quadrature compositing of color / expected depth / surface normals, and
//! the exact backward pass through the compositing chain.
//!
//! Weights follow the standard emission-absorption quadrature: with
//! `a_i = sigma_i * delta_i`, opacity `alpha_i = 1 - exp(-a_i)` and
//! transmittance `T_i = prod_{j<i} (1 - alpha_j)`, the sample weight is
//! `w_i = T_i * alpha_i`. Empty space therefore renders to black with
//! `acc = sum w_i ~ 0`; no background color is composited.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{
    central_difference_gradient, gradient_probes, normal_from_gradient, FieldParams, Mlp,
    StageTrace, Volume, MIN_GRADIENT_NORM,
};
use crate::geometry::{depth_to_ray_scale, pixel_to_ray, CameraIntrinsics, ImageBuffer, Pose, Ray};

/// Per-bin probability floor added during importance resampling so no bin is
/// ever completely starved.
pub const RESAMPLE_WEIGHT_FLOOR: f64 = 1e-5;

/// Rays with accumulated opacity below this are treated as "hit nothing":
/// their depth/normal outputs are not meaningful.
pub const MIN_ACCUMULATION: f64 = 0.01;

/// Rendering hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Stratified samples for the coarse stage.
    pub n_coarse: usize,
    /// Importance samples added for the fine stage (evaluated together with
    /// the coarse samples).
    pub n_fine: usize,
    /// Central-difference step for density-gradient normals.
    pub normal_step: f64,
    /// Per-sample normals are only computed where the quadrature weight
    /// exceeds this (0 probes every sample).
    pub normal_weight_threshold: f64,
    /// Whether the fine stage computes normals at all.
    pub compute_normals: bool,
}

impl RenderConfig {
    /// Full-size preset: 64 coarse + 128 fine samples.
    pub fn full() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            normal_step: 1e-3,
            normal_weight_threshold: 1e-4,
            compute_normals: true,
        }
    }

    /// Reduced preset for fast iteration: 24 coarse + 48 fine samples and a
    /// higher normal threshold (fewer gradient probes).
    pub fn small() -> Self {
        Self {
            n_coarse: 24,
            n_fine: 48,
            normal_step: 1e-3,
            normal_weight_threshold: 1e-2,
            compute_normals: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 || self.n_fine == 0 {
            return Err(Error::InvalidInput("sample counts must be positive".into()));
        }
        if !(self.normal_step > 0.0) || !self.normal_step.is_finite() {
            return Err(Error::InvalidInput("normal_step must be positive".into()));
        }
        if self.normal_weight_threshold < 0.0 {
            return Err(Error::InvalidInput("normal threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic per-stream RNG: the same `(seed, a, b)` triple always yields
/// the same generator, independent of thread scheduling.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(
        splitmix(splitmix(seed).wrapping_add(a)).wrapping_add(b),
    ))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stratified placement from explicit per-bin jitters in `[0, 1)`: bin `i` of
/// `[t_near, t_far]` receives `t_near + (i + jitter_i) * span / n`.
pub fn stratified_with_jitter(ray: &Ray, jitter: &[f64]) -> Vec<f64> {
    let n = jitter.len();
    let span = (ray.t_far - ray.t_near) / n as f64;
    jitter
        .iter()
        .enumerate()
        .map(|(i, &u)| ray.t_near + (i as f64 + u) * span)
        .collect()
}

/// One uniform draw per equal-width bin.
pub fn stratified_samples(ray: &Ray, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let jitter: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    stratified_with_jitter(ray, &jitter)
}

/// Quadrature weights for densities `sigma` over segment lengths `delta`.
/// Both must be the same nonempty length; densities must be finite and
/// non-negative.
pub fn quadrature_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    Ok(weights_and_transmittance(sigma, delta)?.0)
}

/// Weights plus the transmittance *after* each sample
/// (`T_{i+1} = T_i * exp(-a_i)`), needed by the backward pass.
fn weights_and_transmittance(sigma: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma.is_empty() || sigma.len() != delta.len() {
        return Err(Error::InvalidInput(format!(
            "quadrature needs matching nonempty sigma/delta, got {}/{}",
            sigma.len(),
            delta.len()
        )));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut trans_after = Vec::with_capacity(sigma.len());
    let mut t = 1.0f64;
    for (&s, &d) in sigma.iter().zip(delta) {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::NonFinite(format!("density {s}")));
        }
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::InvalidInput(format!("segment length {d}")));
        }
        let a = s * d;
        let alpha = -(-a).exp_m1(); // 1 - exp(-a), accurate for small a
        weights.push(t * alpha);
        t *= (-a).exp();
        trans_after.push(t);
    }
    Ok((weights, trans_after))
}

/// Backward pass through the quadrature: given seeds `d_weights` on the
/// weights, returns the gradient with respect to each `sigma_i` (the sample
/// positions, and hence `delta`, are treated as constants).
pub fn quadrature_backward(sigma: &[f64], delta: &[f64], d_weights: &[f64]) -> Result<Vec<f64>> {
    let (weights, trans_after) = weights_and_transmittance(sigma, delta)?;
    if d_weights.len() != weights.len() {
        return Err(Error::InvalidInput("d_weights length mismatch".into()));
    }
    let n = weights.len();
    // suffix[j] = sum_{i>j} d_w_i * w_i
    let mut suffix = vec![0.0; n];
    for j in (0..n - 1).rev() {
        suffix[j] = suffix[j + 1] + d_weights[j + 1] * weights[j + 1];
    }
    Ok((0..n)
        .map(|j| (d_weights[j] * trans_after[j] - suffix[j]) * delta[j])
        .collect())
}

/// The per-sample data of one ray evaluation, ready for compositing.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub t: Vec<f64>,
    /// `delta_i = t_{i+1} - t_i`, with the final segment closed by `t_far`.
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Per-sample surface normals, when computed; `None` entries mark samples
    /// whose density gradient was degenerate or that were not probed.
    pub normal: Option<Vec<Option<Vector3<f64>>>>,
}

impl SampleSet {
    pub fn new(
        t: Vec<f64>,
        t_far: f64,
        sigma: Vec<f64>,
        color: Vec<[f64; 3]>,
        normal: Option<Vec<Option<Vector3<f64>>>>,
    ) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::InvalidInput("sample set is empty".into()));
        }
        if sigma.len() != t.len() || color.len() != t.len() {
            return Err(Error::InvalidInput("sample arrays have mismatched lengths".into()));
        }
        if let Some(n) = &normal {
            if n.len() != t.len() {
                return Err(Error::InvalidInput("normal array length mismatch".into()));
            }
        }
        if t.windows(2).any(|w| w[1] < w[0]) || !t.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("sample distances must be sorted and finite".into()));
        }
        if *t.last().unwrap() > t_far {
            return Err(Error::InvalidInput("samples exceed t_far".into()));
        }
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        delta.push(t_far - t.last().unwrap());
        Ok(Self {
            t,
            delta,
            sigma,
            color,
            normal,
        })
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        quadrature_weights(&self.sigma, &self.delta)
    }
}

/// Composited outputs of one ray for one stage.
#[derive(Debug, Clone)]
pub struct RenderResult {
    pub color: [f64; 3],
    /// Expected distance along the (unit-direction) ray. Only meaningful
    /// when `acc >= MIN_ACCUMULATION`.
    pub depth: f64,
    /// Renormalized weighted normal; `None` when no valid sample normals
    /// contributed or their weighted sum was degenerate.
    pub normal: Option<Vector3<f64>>,
    /// Accumulated opacity `sum w_i` in `[0, 1]`.
    pub acc: f64,
    pub weights: Vec<f64>,
}

/// Weighted-sum color over a sample set.
pub fn render_color(samples: &SampleSet) -> Result<[f64; 3]> {
    let w = samples.weights()?;
    let mut out = [0.0; 3];
    for (wi, c) in w.iter().zip(&samples.color) {
        for ch in 0..3 {
            out[ch] += wi * c[ch];
        }
    }
    Ok(out)
}

/// Expected termination distance `sum w_i t_i`.
pub fn render_depth(samples: &SampleSet) -> Result<f64> {
    let w = samples.weights()?;
    Ok(w.iter().zip(&samples.t).map(|(wi, ti)| wi * ti).sum())
}

/// Weighted, renormalized surface normal.
pub fn render_normal(samples: &SampleSet) -> Result<Option<Vector3<f64>>> {
    let w = samples.weights()?;
    let Some(normals) = &samples.normal else {
        return Ok(None);
    };
    let mut sum = Vector3::zeros();
    for (wi, n) in w.iter().zip(normals) {
        if let Some(n) = n {
            sum += *wi * n;
        }
    }
    let norm = sum.norm();
    Ok((norm > MIN_GRADIENT_NORM).then(|| sum / norm))
}

/// Single-pass compositing of color, depth, normal, and accumulation.
pub fn composite(samples: &SampleSet) -> Result<RenderResult> {
    let weights = samples.weights()?;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut acc = 0.0;
    let mut normal_sum = Vector3::zeros();
    for (i, wi) in weights.iter().enumerate() {
        for ch in 0..3 {
            color[ch] += wi * samples.color[i][ch];
        }
        depth += wi * samples.t[i];
        acc += wi;
        if let Some(normals) = &samples.normal {
            if let Some(n) = &normals[i] {
                normal_sum += *wi * n;
            }
        }
    }
    let norm = normal_sum.norm();
    let normal = (samples.normal.is_some() && norm > MIN_GRADIENT_NORM)
        .then(|| normal_sum / norm);
    Ok(RenderResult {
        color,
        depth,
        normal,
        acc,
        weights,
    })
}

/// Draws `n_fine` samples from the piecewise-constant density proportional to
/// `coarse_weights + RESAMPLE_WEIGHT_FLOOR` over bins whose edges are the
/// midpoints of `coarse_t` (closed by `t_near`/`t_far`). All-zero weights
/// fall back to plain stratified placement. The result is sorted.
pub fn hierarchical_resample(
    ray: &Ray,
    coarse_t: &[f64],
    coarse_weights: &[f64],
    n_fine: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = coarse_t.len();
    if n == 0 || coarse_weights.len() != n {
        return Err(Error::InvalidInput(
            "resampling needs matching nonempty t/weights".into(),
        ));
    }
    if coarse_t.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("coarse t values must be sorted".into()));
    }
    if coarse_t[0] < ray.t_near || *coarse_t.last().unwrap() > ray.t_far {
        return Err(Error::InvalidInput("coarse t values outside ray interval".into()));
    }
    if coarse_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::NonFinite("coarse weights".into()));
    }

    if coarse_weights.iter().all(|&w| w == 0.0) {
        let mut t = stratified_samples(ray, n_fine, rng);
        t.sort_by(f64::total_cmp);
        return Ok(t);
    }

    // Bin edges: t_near, midpoints, t_far.
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(ray.t_near);
    for w in coarse_t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(ray.t_far);

    // CDF over floored weights.
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut total = 0.0;
    for &w in coarse_weights {
        total += w + RESAMPLE_WEIGHT_FLOOR;
        cdf.push(total);
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }

    let mut out = Vec::with_capacity(n_fine);
    for _ in 0..n_fine {
        let u = rng.random::<f64>();
        // Find the bin with cdf[bin] <= u < cdf[bin+1].
        let bin = match cdf.partition_point(|&c| c <= u) {
            0 => 0,
            idx => (idx - 1).min(n - 1),
        };
        let lo = cdf[bin];
        let hi = cdf[bin + 1];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Merges two sorted slices into one sorted vector.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Density-gradient normal data for the samples of one stage that exceeded
/// the probing threshold.
pub struct NormalData {
    /// Indices (into the stage's sample arrays) that were probed.
    pub probed: Vec<usize>,
    /// Raw central-difference gradients, one per probed sample.
    pub gradients: Vec<Vector3<f64>>,
    /// `-g/|g|` per probed sample; `None` where the gradient was degenerate.
    pub normals: Vec<Option<Vector3<f64>>>,
    /// Trace of the probe evaluations (6 per probed sample), present when
    /// traces were requested.
    pub trace: Option<StageTrace>,
    /// The central-difference step the probes were evaluated with; the
    /// backward pass must use the same step.
    pub step: f64,
}

/// Everything computed while rendering one stage of one ray, sufficient for
/// an exact backward pass.
pub struct StageForward {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub acc: f64,
    pub out_color: [f64; 3],
    pub out_depth: f64,
    /// Weighted normal sum before renormalization.
    pub normal_sum: Vector3<f64>,
    /// Renormalized output normal (see [`RenderResult::normal`]).
    pub out_normal: Option<Vector3<f64>>,
    pub normals: Option<NormalData>,
    pub trace: Option<StageTrace>,
}

impl StageForward {
    pub fn to_result(&self) -> RenderResult {
        RenderResult {
            color: self.out_color,
            depth: self.out_depth,
            normal: self.out_normal,
            acc: self.acc,
            weights: self.weights.clone(),
        }
    }
}

/// Both stages of one ray.
pub struct RayForward {
    pub coarse: StageForward,
    pub fine: StageForward,
}

fn forward_stage(
    mlp: &Mlp,
    ray: &Ray,
    t: Vec<f64>,
    cfg: &RenderConfig,
    want_traces: bool,
    want_normals: bool,
) -> Result<StageForward> {
    let points: Vec<Vector3<f64>> = t.iter().map(|&ti| ray.point_at(ti)).collect();
    let dir = ray.direction.into_inner();
    let mut eval = mlp.forward_batch(&points, Some(&dir), want_traces);

    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.t_far - t.last().copied().unwrap_or(ray.t_far));
    let (weights, _) = weights_and_transmittance(&eval.sigma, &delta)?;

    let mut out_color = [0.0; 3];
    let mut out_depth = 0.0;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        for ch in 0..3 {
            out_color[ch] += w * eval.color[i][ch];
        }
        out_depth += w * t[i];
        acc += w;
    }

    let mut normal_sum = Vector3::zeros();
    let mut out_normal = None;
    let mut normals = None;
    if want_normals {
        let probed: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > cfg.normal_weight_threshold)
            .map(|(i, _)| i)
            .collect();
        let mut probe_points = Vec::with_capacity(probed.len() * 6);
        for &i in &probed {
            probe_points.extend_from_slice(&gradient_probes(&points[i], cfg.normal_step));
        }
        let probe_eval = if probe_points.is_empty() {
            None
        } else {
            Some(mlp.forward_batch(&probe_points, None, want_traces))
        };
        let mut gradients = Vec::with_capacity(probed.len());
        let mut per_probe_normals = Vec::with_capacity(probed.len());
        if let Some(pe) = &probe_eval {
            for (k, &i) in probed.iter().enumerate() {
                let g = central_difference_gradient(
                    &pe.sigma[6 * k..6 * (k + 1)],
                    cfg.normal_step,
                );
                let n = normal_from_gradient(&g);
                if let Some(n) = &n {
                    normal_sum += weights[i] * n;
                }
                gradients.push(g);
                per_probe_normals.push(n);
            }
        }
        let norm = normal_sum.norm();
        if norm > MIN_GRADIENT_NORM {
            out_normal = Some(normal_sum / norm);
        }
        normals = Some(NormalData {
            probed,
            gradients,
            normals: per_probe_normals,
            trace: probe_eval.and_then(|pe| pe.trace),
            step: cfg.normal_step,
        });
    }

    Ok(StageForward {
        t,
        delta,
        sigma: std::mem::take(&mut eval.sigma),
        color: std::mem::take(&mut eval.color),
        weights,
        acc,
        out_color,
        out_depth,
        normal_sum,
        out_normal,
        normals,
        trace: eval.trace,
    })
}

/// Renders one ray at fixed, caller-supplied sample distances. `t_coarse`
/// feeds the coarse network; `t_fine` (typically the sorted union of coarse
/// and importance samples) feeds the fine network. Used directly by gradient
/// checks, which need sample placement frozen across evaluations.
pub fn render_ray_frozen(
    params: &FieldParams,
    ray: &Ray,
    t_coarse: &[f64],
    t_fine: &[f64],
    cfg: &RenderConfig,
    want_traces: bool,
) -> Result<RayForward> {
    let coarse = forward_stage(
        &params.coarse,
        ray,
        t_coarse.to_vec(),
        cfg,
        want_traces,
        false,
    )?;
    let fine = forward_stage(
        &params.fine,
        ray,
        t_fine.to_vec(),
        cfg,
        want_traces,
        cfg.compute_normals,
    )?;
    Ok(RayForward { coarse, fine })
}

/// Full two-stage rendering of one ray: stratified coarse samples, an
/// importance redraw from the coarse weights (treated as constants — the
/// redraw is not differentiated), and a fine pass over the union.
pub fn render_ray_traced(
    params: &FieldParams,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
    want_traces: bool,
) -> Result<RayForward> {
    cfg.validate()?;
    let t_coarse = stratified_samples(ray, cfg.n_coarse, rng);
    let coarse = forward_stage(&params.coarse, ray, t_coarse, cfg, want_traces, false)?;
    let t_extra = hierarchical_resample(ray, &coarse.t, &coarse.weights, cfg.n_fine, rng)?;
    let t_union = merge_sorted(&coarse.t, &t_extra);
    let fine = forward_stage(
        &params.fine,
        ray,
        t_union,
        cfg,
        want_traces,
        cfg.compute_normals,
    )?;
    Ok(RayForward { coarse, fine })
}

/// Inference-path rendering: returns the composited coarse and fine results.
pub fn render_ray(
    params: &FieldParams,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<(RenderResult, RenderResult)> {
    let fwd = render_ray_traced(params, ray, cfg, rng, false)?;
    Ok((fwd.coarse.to_result(), fwd.fine.to_result()))
}

/// Per-sample density-gradient normals for the samples whose weight exceeds
/// the probing threshold; all other entries are `None`.
pub fn probe_normals(
    vol: &impl Volume,
    points: &[Vector3<f64>],
    weights: &[f64],
    cfg: &RenderConfig,
) -> Vec<Option<Vector3<f64>>> {
    let mut out = vec![None; points.len()];
    let probed: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > cfg.normal_weight_threshold)
        .map(|(i, _)| i)
        .collect();
    if probed.is_empty() {
        return out;
    }
    let mut probe_points = Vec::with_capacity(probed.len() * 6);
    for &i in &probed {
        probe_points.extend_from_slice(&gradient_probes(&points[i], cfg.normal_step));
    }
    let sigma = vol.densities(&probe_points);
    for (k, &i) in probed.iter().enumerate() {
        let g = central_difference_gradient(&sigma[6 * k..6 * (k + 1)], cfg.normal_step);
        out[i] = normal_from_gradient(&g);
    }
    out
}

/// Two-stage rendering against arbitrary volumes (the MLP stages or analytic
/// stand-ins). Follows exactly the same sampling schedule as [`render_ray`];
/// for MLP inputs the two agree bit-for-bit given equal RNG state.
pub fn render_ray_volume(
    coarse_vol: &impl Volume,
    fine_vol: &impl Volume,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<(RenderResult, RenderResult)> {
    cfg.validate()?;
    let dir = ray.direction.into_inner();
    let points_at = |t: &[f64]| -> Vec<Vector3<f64>> {
        t.iter().map(|&ti| ray.point_at(ti)).collect()
    };

    let t_coarse = stratified_samples(ray, cfg.n_coarse, rng);
    let (sigma_c, color_c) = coarse_vol.radiance(&points_at(&t_coarse), &dir);
    let set_c = SampleSet::new(t_coarse, ray.t_far, sigma_c, color_c, None)?;
    let res_c = composite(&set_c)?;

    let t_extra = hierarchical_resample(ray, &set_c.t, &res_c.weights, cfg.n_fine, rng)?;
    let t_union = merge_sorted(&set_c.t, &t_extra);
    let fine_points = points_at(&t_union);
    let (sigma_f, color_f) = fine_vol.radiance(&fine_points, &dir);

    let mut delta: Vec<f64> = t_union.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.t_far - t_union.last().unwrap());
    let weights_f = quadrature_weights(&sigma_f, &delta)?;
    let normals = cfg
        .compute_normals
        .then(|| probe_normals(fine_vol, &fine_points, &weights_f, cfg));

    let set_f = SampleSet::new(t_union, ray.t_far, sigma_f, color_f, normals)?;
    let res_f = composite(&set_f)?;
    Ok((res_c, res_f))
}

/// Color, depth, normal, and accumulation maps rendered with the fine
/// network. Depth is stored as camera-space z; depth and normal pixels are
/// invalidated (NaN) where the ray accumulated less than
/// [`MIN_ACCUMULATION`] opacity or the normal was degenerate.
pub struct ImageRender {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub normal: ImageBuffer,
    pub acc: ImageBuffer,
}

/// Renders a full view. Each pixel draws from its own RNG stream keyed by
/// `(seed, v, u)`, so the output is identical for any thread count.
pub fn render_image(
    params: &FieldParams,
    cam: &CameraIntrinsics,
    pose: &Pose,
    t_near: f64,
    t_far: f64,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<ImageRender> {
    use rayon::prelude::*;
    cfg.validate()?;
    let (w, h) = (cam.width, cam.height);

    struct PixelOut {
        color: [f64; 3],
        depth_z: f64,
        normal: Option<Vector3<f64>>,
        acc: f64,
    }

    let rows: Vec<Vec<PixelOut>> = (0..h)
        .into_par_iter()
        .map(|v| -> Result<Vec<PixelOut>> {
            let mut row = Vec::with_capacity(w);
            for u in 0..w {
                let ray = pixel_to_ray(cam, pose, u as f64, v as f64, t_near, t_far)?;
                let mut rng = stream_rng(seed, v as u64, u as u64);
                let (_, fine) = render_ray(params, &ray, cfg, &mut rng)?;
                let scale = depth_to_ray_scale(cam, u as f64, v as f64);
                row.push(PixelOut {
                    color: fine.color,
                    depth_z: fine.depth / scale,
                    normal: fine.normal,
                    acc: fine.acc,
                });
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut out = ImageRender {
        color: ImageBuffer::new(w, h, 3),
        depth: ImageBuffer::new(w, h, 1),
        normal: ImageBuffer::new(w, h, 3),
        acc: ImageBuffer::new(w, h, 1),
    };
    for (v, row) in rows.iter().enumerate() {
        for (u, px) in row.iter().enumerate() {
            for ch in 0..3 {
                out.color.pixel_mut(u, v)[ch] = px.color[ch] as f32;
            }
            out.acc.pixel_mut(u, v)[0] = px.acc as f32;
            if px.acc >= MIN_ACCUMULATION {
                out.depth.pixel_mut(u, v)[0] = px.depth_z as f32;
            } else {
                out.depth.invalidate(u, v);
            }
            match (px.acc >= MIN_ACCUMULATION, &px.normal) {
                (true, Some(n)) => {
                    out.normal.pixel_mut(u, v)[0] = n.x as f32;
                    out.normal.pixel_mut(u, v)[1] = n.y as f32;
                    out.normal.pixel_mut(u, v)[2] = n.z as f32;
                }
                _ => out.normal.invalidate(u, v),
            }
        }
    }
    Ok(out)
}

/// Loss gradients seeding the backward pass of one ray.
#[derive(Debug, Clone, Default)]
pub struct RaySeeds {
    pub d_color_coarse: [f64; 3],
    pub d_color_fine: [f64; 3],
    pub d_depth_fine: f64,
    /// Seed on the renormalized fine output normal.
    pub d_normal_fine: Option<Vector3<f64>>,
}

/// Accumulates parameter gradients for one rendered ray into `grads`.
///
/// The forward pass must have been run with traces. Sample placement, segment
/// lengths, and the importance redraw are constants of the backward pass.
pub fn backward_ray(
    params: &FieldParams,
    fwd: &RayForward,
    seeds: &RaySeeds,
    grads: &mut FieldParams,
) -> Result<()> {
    backward_stage(
        &params.coarse,
        &fwd.coarse,
        &seeds.d_color_coarse,
        0.0,
        None,
        &mut grads.coarse,
    )?;
    backward_stage(
        &params.fine,
        &fwd.fine,
        &seeds.d_color_fine,
        seeds.d_depth_fine,
        seeds.d_normal_fine.as_ref(),
        &mut grads.fine,
    )
}

fn backward_stage(
    mlp: &Mlp,
    fwd: &StageForward,
    d_color: &[f64; 3],
    d_depth: f64,
    d_normal: Option<&Vector3<f64>>,
    grads: &mut Mlp,
) -> Result<()> {
    let trace = fwd
        .trace
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("backward_ray requires a traced forward pass".into()))?;
    let n = fwd.t.len();

    // Seed on the weighted normal sum S, via d(S/|S|) = (I - nn^T)/|S| dN.
    let d_normal_sum = match d_normal {
        Some(dn) => {
            let norm = fwd.normal_sum.norm();
            if norm > MIN_GRADIENT_NORM {
                let unit = fwd.normal_sum / norm;
                Some((dn - unit * unit.dot(dn)) / norm)
            } else {
                None
            }
        }
        None => None,
    };

    // Per-sample seeds on colors and weights.
    let mut d_weights = vec![0.0; n];
    let mut d_color_samples = vec![0.0; 3 * n]; // feature-major 3 x n
    for i in 0..n {
        let mut dw = d_depth * fwd.t[i];
        for ch in 0..3 {
            dw += d_color[ch] * fwd.color[i][ch];
            d_color_samples[ch * n + i] = d_color[ch] * fwd.weights[i];
        }
        d_weights[i] = dw;
    }
    if let (Some(ds), Some(nd)) = (&d_normal_sum, &fwd.normals) {
        for (k, &i) in nd.probed.iter().enumerate() {
            if let Some(n_i) = &nd.normals[k] {
                d_weights[i] += ds.dot(n_i);
            }
        }
    }

    // Through the quadrature into densities, then through the MLP.
    let d_sigma = quadrature_backward(&fwd.sigma, &fwd.delta, &d_weights)?;
    mlp.backward_batch(trace, &d_sigma, Some(&d_color_samples), grads);

    // Normal chain: seeds on per-sample unit normals -> raw gradients ->
    // probe densities -> probe MLP trace.
    if let (Some(ds), Some(nd)) = (&d_normal_sum, &fwd.normals) {
        if let Some(probe_trace) = &nd.trace {
            let n_probes = nd.probed.len() * 6;
            let mut d_probe_sigma = vec![0.0; n_probes];
            let inv_2h = 1.0 / (2.0 * nd.step);
            let mut any = false;
            for (k, &i) in nd.probed.iter().enumerate() {
                let Some(unit_n) = &nd.normals[k] else {
                    continue;
                };
                // d n_i = w_i * dS; n = -g/|g| so dg = -(I - gg^T/|g|^2)/|g| dn.
                let d_n = fwd.weights[i] * ds;
                let g = &nd.gradients[k];
                let g_norm = g.norm();
                // unit_n = -g/|g|; (I - nn^T) == (I - gg^T/|g|^2)
                let d_g = -(d_n - unit_n * unit_n.dot(&d_n)) / g_norm;
                for axis in 0..3 {
                    d_probe_sigma[6 * k + 2 * axis] += d_g[axis] * inv_2h;
                    d_probe_sigma[6 * k + 2 * axis + 1] -= d_g[axis] * inv_2h;
                }
                any = true;
            }
            if any {
                mlp.backward_batch(probe_trace, &d_probe_sigma, None, grads);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use approx::assert_relative_eq;

    fn unit_ray(t_near: f64, t_far: f64) -> Ray {
        Ray::new(Vector3::zeros(), Vector3::z(), t_near, t_far).unwrap()
    }

    #[test]
    fn two_sample_reference_fixture() {
        // sigma = (1, 1), delta = (1, 1), t = (1, 2), t_far = 3.
        let samples = SampleSet::new(
            vec![1.0, 2.0],
            3.0,
            vec![1.0, 1.0],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            None,
        )
        .unwrap();
        let w = samples.weights().unwrap();
        assert_relative_eq!(w[0], 0.63212, epsilon = 1e-5);
        assert_relative_eq!(w[1], 0.23254, epsilon = 1e-5);
        let color = render_color(&samples).unwrap();
        assert_relative_eq!(color[0], 0.63212, epsilon = 1e-5);
        assert_relative_eq!(color[1], 0.23254, epsilon = 1e-5);
        assert_relative_eq!(color[2], 0.0, epsilon = 1e-12);
        let depth = render_depth(&samples).unwrap();
        assert_relative_eq!(depth, 1.09720, epsilon = 1e-4);
        assert_relative_eq!(depth, w[0] + 2.0 * w[1], epsilon = 1e-15);
    }

    #[test]
    fn zero_density_renders_black() {
        let samples = SampleSet::new(
            vec![0.5, 1.0, 1.5],
            2.0,
            vec![0.0, 0.0, 0.0],
            vec![[1.0, 1.0, 1.0]; 3],
            None,
        )
        .unwrap();
        let out = composite(&samples).unwrap();
        assert_eq!(out.color, [0.0, 0.0, 0.0]);
        assert_eq!(out.acc, 0.0);
        assert_eq!(out.depth, 0.0);
        assert!(out.normal.is_none());
    }

    #[test]
    fn opaque_sample_dominates_depth() {
        let samples = SampleSet::new(
            vec![0.5, 1.2, 1.9],
            2.5,
            vec![0.0, 500.0, 0.0],
            vec![[0.2, 0.3, 0.4]; 3],
            None,
        )
        .unwrap();
        let out = composite(&samples).unwrap();
        assert_relative_eq!(out.depth, 1.2, epsilon = 1e-6);
        assert_relative_eq!(out.acc, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn weight_sum_identity() {
        // sum w_i == 1 - exp(-sum sigma_i delta_i), here spot-checked; the
        // property test below covers random vectors.
        let sigma = vec![0.3, 2.0, 0.7, 5.0];
        let delta = vec![0.2, 0.1, 0.5, 0.3];
        let w = quadrature_weights(&sigma, &delta).unwrap();
        let total: f64 = w.iter().sum();
        let expected = 1.0 - (-sigma.iter().zip(&delta).map(|(s, d)| s * d).sum::<f64>()).exp();
        assert_relative_eq!(total, expected, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_rejects_bad_input() {
        assert!(quadrature_weights(&[], &[]).is_err());
        assert!(quadrature_weights(&[1.0], &[1.0, 2.0]).is_err());
        assert!(quadrature_weights(&[-1.0], &[1.0]).is_err());
        assert!(quadrature_weights(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn quadrature_backward_matches_finite_differences() {
        let sigma = vec![0.4, 1.3, 0.05, 2.2, 0.9];
        let delta = vec![0.3, 0.2, 0.4, 0.1, 0.25];
        let seeds = vec![0.7, -1.1, 0.3, 0.9, -0.2];
        let f = |s: &[f64]| -> f64 {
            quadrature_weights(s, &delta)
                .unwrap()
                .iter()
                .zip(&seeds)
                .map(|(w, c)| w * c)
                .sum()
        };
        let d_sigma = quadrature_backward(&sigma, &delta, &seeds).unwrap();
        for i in 0..sigma.len() {
            let h = 1e-6;
            let mut plus = sigma.clone();
            plus[i] += h;
            let mut minus = sigma.clone();
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert_relative_eq!(d_sigma[i], fd, epsilon = 1e-8, max_relative = 1e-7);
        }
    }

    #[test]
    fn stratified_midpoints_are_bin_centers() {
        let ray = unit_ray(0.0, 1.0);
        let t = stratified_with_jitter(&ray, &[0.5, 0.5, 0.5, 0.5]);
        let expected = [0.125, 0.375, 0.625, 0.875];
        for (a, b) in t.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let ray = unit_ray(0.2, 5.0);
        let mut rng = stream_rng(1, 2, 3);
        for _ in 0..20 {
            let n = 16;
            let t = stratified_samples(&ray, n, &mut rng);
            let span = (ray.t_far - ray.t_near) / n as f64;
            for (i, &ti) in t.iter().enumerate() {
                let lo = ray.t_near + i as f64 * span;
                assert!(ti >= lo && ti < lo + span, "sample {ti} escaped bin {i}");
            }
        }
    }

    #[test]
    fn resample_concentrates_on_heavy_bin() {
        let ray = unit_ray(0.0, 1.0);
        let coarse_t = vec![0.125, 0.375, 0.625, 0.875];
        let weights = vec![0.0, 1.0, 0.0, 0.0];
        let mut rng = stream_rng(7, 0, 0);
        let fine = hierarchical_resample(&ray, &coarse_t, &weights, 128, &mut rng).unwrap();
        // Bin 1 spans (0.25, 0.5) (midpoint edges).
        let in_heavy = fine.iter().filter(|&&t| (0.25..0.5).contains(&t)).count();
        assert!(
            in_heavy >= 102,
            "only {in_heavy}/128 samples landed in the heavy bin"
        );
        assert!(fine.iter().all(|&t| (0.0..=1.0).contains(&t)));
        assert!(fine.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn resample_matches_expected_histogram() {
        // Two bins with weights 3:1 -> probabilities 0.75 / 0.25.
        let ray = unit_ray(0.0, 1.0);
        let coarse_t = vec![0.25, 0.75];
        let weights = vec![3.0, 1.0];
        let mut rng = stream_rng(42, 0, 0);
        let draws = 100_000;
        let fine = hierarchical_resample(&ray, &coarse_t, &weights, draws, &mut rng).unwrap();
        let in_first = fine.iter().filter(|&&t| t < 0.5).count() as f64 / draws as f64;
        assert!(
            (in_first - 0.75).abs() < 0.02,
            "first-bin share {in_first} not within 2% of 0.75"
        );
    }

    #[test]
    fn resample_zero_weights_falls_back_to_stratified() {
        let ray = unit_ray(0.0, 2.0);
        let coarse_t = vec![0.5, 1.0, 1.5];
        let weights = vec![0.0, 0.0, 0.0];
        let n = 12;
        let mut rng_a = stream_rng(5, 0, 0);
        let fine = hierarchical_resample(&ray, &coarse_t, &weights, n, &mut rng_a).unwrap();
        // Must match a plain stratified draw from an identically-seeded rng.
        let mut rng_b = stream_rng(5, 0, 0);
        let mut expected = stratified_samples(&ray, n, &mut rng_b);
        expected.sort_by(f64::total_cmp);
        assert_eq!(fine, expected);
    }

    #[test]
    fn resample_is_deterministic() {
        let ray = unit_ray(0.1, 3.0);
        let coarse_t: Vec<f64> = (0..8).map(|i| 0.2 + i as f64 * 0.35).collect();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).sin().abs()).collect();
        let a = hierarchical_resample(&ray, &coarse_t, &weights, 32, &mut stream_rng(9, 1, 2))
            .unwrap();
        let b = hierarchical_resample(&ray, &coarse_t, &weights, 32, &mut stream_rng(9, 1, 2))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn composite_normal_renormalizes() {
        let normals = vec![
            Some(Vector3::new(1.0, 0.0, 0.0)),
            Some(Vector3::new(0.0, 1.0, 0.0)),
            None,
        ];
        let samples = SampleSet::new(
            vec![0.5, 0.6, 0.7],
            1.0,
            vec![2.0, 2.0, 2.0],
            vec![[0.5; 3]; 3],
            Some(normals),
        )
        .unwrap();
        let n = render_normal(&samples).unwrap().unwrap();
        assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-12);
        // Weighted sum of +x and +y with w0 > w1 leans toward +x.
        assert!(n.x > n.y && n.y > 0.0 && n.z == 0.0);
        // Without any normals: None.
        let plain = SampleSet::new(
            vec![0.5],
            1.0,
            vec![1.0],
            vec![[0.1; 3]],
            None,
        )
        .unwrap();
        assert!(render_normal(&plain).unwrap().is_none());
    }

    #[test]
    fn merge_sorted_interleaves() {
        assert_eq!(
            merge_sorted(&[0.1, 0.5, 0.9], &[0.2, 0.55]),
            vec![0.1, 0.2, 0.5, 0.55, 0.9]
        );
        assert_eq!(merge_sorted(&[], &[1.0]), vec![1.0]);
    }

    #[test]
    fn render_ray_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params =
            FieldParams::init(FieldConfig { levels_pos: 2, levels_dir: 1, trunk_depth: 2, trunk_width: 8, skip_layer: 1, color_hidden: 6 }, &mut rng)
                .unwrap();
        let ray = unit_ray(0.2, 4.0);
        let cfg = RenderConfig {
            n_coarse: 8,
            n_fine: 16,
            normal_step: 1e-3,
            normal_weight_threshold: 0.0,
            compute_normals: true,
        };
        let (c1, f1) = render_ray(&params, &ray, &cfg, &mut stream_rng(11, 0, 0)).unwrap();
        let (c2, f2) = render_ray(&params, &ray, &cfg, &mut stream_rng(11, 0, 0)).unwrap();
        assert_eq!(c1.color, c2.color);
        assert_eq!(f1.color, f2.color);
        assert_eq!(f1.depth, f2.depth);
        assert_eq!(f1.weights, f2.weights);
        assert!(f1.acc >= 0.0 && f1.acc <= 1.0 + 1e-12);
        // Fine stage evaluates the union of coarse and importance samples.
        assert_eq!(f1.weights.len(), cfg.n_coarse + cfg.n_fine);
    }

    #[test]
    fn volume_path_matches_mlp_path() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = FieldParams::init(
            FieldConfig {
                levels_pos: 2,
                levels_dir: 1,
                trunk_depth: 2,
                trunk_width: 8,
                skip_layer: 1,
                color_hidden: 6,
            },
            &mut rng,
        )
        .unwrap();
        let ray = unit_ray(0.3, 3.0);
        let cfg = RenderConfig {
            n_coarse: 6,
            n_fine: 10,
            normal_step: 1e-3,
            normal_weight_threshold: 0.0,
            compute_normals: true,
        };
        let (c_a, f_a) = render_ray(&params, &ray, &cfg, &mut stream_rng(4, 4, 4)).unwrap();
        let (c_b, f_b) =
            render_ray_volume(&params.coarse, &params.fine, &ray, &cfg, &mut stream_rng(4, 4, 4))
                .unwrap();
        assert_eq!(c_a.color, c_b.color);
        assert_eq!(c_a.weights, c_b.weights);
        assert_eq!(f_a.color, f_b.color);
        assert_eq!(f_a.depth, f_b.depth);
        assert_eq!(f_a.normal.is_some(), f_b.normal.is_some());
        if let (Some(na), Some(nb)) = (f_a.normal, f_b.normal) {
            assert_eq!(na, nb);
        }
    }

    /// Property: the quadrature weight sum equals `1 - exp(-sum sigma delta)`
    /// for random density/segment vectors.
    #[test]
    fn weight_sum_identity_random_vectors() {
        let mut rng = stream_rng(123, 0, 0);
        for _ in 0..1000 {
            let n = rng.random_range(1..64);
            let sigma: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.5 + 1e-4).collect();
            let w = quadrature_weights(&sigma, &delta).unwrap();
            let total: f64 = w.iter().sum();
            let opt: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
            let expected = -(-opt).exp_m1();
            assert!(
                (total - expected).abs() <= 1e-12,
                "identity violated: {total} vs {expected}"
            );
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(total <= 1.0 + 1e-12);
        }
    }
}
