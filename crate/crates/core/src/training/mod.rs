//! Field fitting with photometric and confidence-weighted geometric
//! supervision.
//!
//! Each iteration draws a fresh pixel batch across all views, renders both
//! stages per ray, and applies one Adam step with an exponentially decayed
//! learning rate. Losses are sums over the batch: squared color error on both
//! stages, plus Huber depth and normal terms on the fine stage only, each
//! scaled by the ray's prior confidence. Rays whose accumulated opacity falls
//! below [`MIN_ACCUMULATION`] skip the geometric terms — a ray that hit
//! nothing has no meaningful depth or normal to supervise.
//!
//! Training is bitwise deterministic for a fixed seed regardless of thread
//! count: parameter init, per-iteration batch sampling, and every ray's
//! sample placement draw from counter-keyed RNG streams, and per-chunk
//! gradients are reduced in a fixed order.

mod adam;

pub use adam::Adam;

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::field::{checkpoint::save_checkpoint, FieldConfig, FieldParams};
use crate::geometry::{depth_to_ray_scale, pixel_to_ray, Ray};
use crate::renderer::{
    backward_ray, render_ray_traced, stream_rng, RayForward, RaySeeds, RenderConfig,
    MIN_ACCUMULATION,
};

pub const DEFAULT_BATCH_SIZE: usize = 1024;
pub const DEFAULT_LR_START: f64 = 5e-4;
pub const DEFAULT_LR_END: f64 = 5e-5;
pub const DEFAULT_LAMBDA_GEOM: f64 = 0.1;
pub const DEFAULT_HUBER_DELTA_NORMAL: f64 = 1.0;
/// When no depth Huber threshold is given, use scene diagonal divided by this.
pub const DEPTH_DELTA_DIAG_DIVISOR: f64 = 20.0;

/// Rays per parallel gradient chunk. Chunks are reduced in index order, so
/// the summed gradient is identical for any thread count.
const GRAD_CHUNK: usize = 64;

/// Everything that controls a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Rays per iteration, drawn without replacement across all views.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Weight on the geometric (depth + normal) losses; 0 recovers purely
    /// photometric training.
    pub lambda_geom: f64,
    /// Huber threshold for the depth term, in world units. `None` derives
    /// scene diagonal / [`DEPTH_DELTA_DIAG_DIVISOR`] from the dataset.
    pub huber_delta_depth: Option<f64>,
    /// Huber threshold for the per-component normal term.
    pub huber_delta_normal: f64,
    pub seed: u64,
    /// Write `checkpoint_NNNNNN.bin` every this many iterations when an
    /// output directory is given; 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    /// Replace every confidence that has usable supervision with 1 (the
    /// unweighted ablation). Rays lacking depth or normal stay at 0.
    pub ignore_confidence: bool,
    /// Include the normal term in the geometric loss. `false` gives the
    /// depth-only ablation: `lambda_geom` then weights depth alone, and the
    /// renderer skips its gradient probes entirely.
    pub supervise_normals: bool,
    /// Log a progress line to stderr every 100 iterations.
    pub verbose: bool,
    pub field: FieldConfig,
    pub render: RenderConfig,
}

impl TrainConfig {
    /// Full-size run: 1024-ray batches, lr 5e-4 decayed to 5e-5, geometric
    /// weight 0.1, full field and render presets.
    pub fn full(iterations: usize) -> Self {
        Self {
            iterations,
            batch_size: DEFAULT_BATCH_SIZE,
            lr_start: DEFAULT_LR_START,
            lr_end: DEFAULT_LR_END,
            lambda_geom: DEFAULT_LAMBDA_GEOM,
            huber_delta_depth: None,
            huber_delta_normal: DEFAULT_HUBER_DELTA_NORMAL,
            seed: 0,
            checkpoint_interval: 0,
            ignore_confidence: false,
            supervise_normals: true,
            verbose: false,
            field: FieldConfig::full(),
            render: RenderConfig::full(),
        }
    }

    /// Same schedule with the reduced field and render presets, for small
    /// scenes and tests.
    pub fn small(iterations: usize) -> Self {
        Self {
            field: FieldConfig::small(),
            render: RenderConfig::small(),
            ..Self::full(iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_end", self.lr_end)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_geom >= 0.0) || !self.lambda_geom.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda_geom must be >= 0, got {}",
                self.lambda_geom
            )));
        }
        let deltas = [
            ("huber_delta_depth", self.huber_delta_depth.unwrap_or(1.0)),
            ("huber_delta_normal", self.huber_delta_normal),
        ];
        for (name, v) in deltas {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        self.field.validate()?;
        self.render.validate()
    }
}

/// One training batch: a ray per entry plus its supervision.
///
/// `gt_depth` holds distances along the normalized ray (not camera-space z);
/// NaN marks missing supervision, likewise an all-NaN `gt_normal`. The
/// structural invariant is `confidence[i] == 0` whenever either is missing,
/// so loss code never supervises an invalid pixel.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub gt_color: Vec<[f64; 3]>,
    pub gt_depth: Vec<f64>,
    pub gt_normal: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rays.len();
        if [
            self.gt_color.len(),
            self.gt_depth.len(),
            self.gt_normal.len(),
            self.confidence.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::InvalidInput("batch columns disagree in length".into()));
        }
        for i in 0..n {
            let c = self.confidence[i];
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidInput(format!(
                    "confidence {c} at ray {i} outside [0, 1]"
                )));
            }
            let missing = !self.gt_depth[i].is_finite() || !self.gt_normal[i].x.is_finite();
            if missing && c != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "ray {i} has confidence {c} but no depth/normal supervision"
                )));
            }
        }
        Ok(())
    }

    /// Sets every confidence that has usable supervision to 1; rays without
    /// depth or normal supervision stay at 0.
    pub fn force_full_confidence(&mut self) {
        for i in 0..self.rays.len() {
            let missing = !self.gt_depth[i].is_finite() || !self.gt_normal[i].x.is_finite();
            self.confidence[i] = if missing { 0.0 } else { 1.0 };
        }
    }
}

/// Draws `n` distinct pixels uniformly across all views (without
/// replacement) and assembles their rays and supervision. Depth supervision
/// is converted from camera-space z to distance along the ray; pixels whose
/// depth or normal prior is invalid get confidence 0. Views without
/// confidence maps supervise at full weight.
pub fn sample_batch(data: &Dataset, n: usize, rng: &mut impl Rng) -> Result<RayBatch> {
    let mut offsets = Vec::with_capacity(data.view_count() + 1);
    offsets.push(0usize);
    for view in &data.priors.views {
        let px = view.camera.width * view.camera.height;
        offsets.push(offsets.last().unwrap() + px);
    }
    let total = *offsets.last().unwrap();
    if n > total {
        return Err(Error::InvalidInput(format!(
            "batch of {n} rays exceeds {total} available pixels"
        )));
    }

    let mut batch = RayBatch {
        rays: Vec::with_capacity(n),
        gt_color: Vec::with_capacity(n),
        gt_depth: Vec::with_capacity(n),
        gt_normal: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
    };
    for flat in rand::seq::index::sample(rng, total, n) {
        let v = offsets.partition_point(|&o| o <= flat) - 1;
        let view = &data.priors.views[v];
        let (u, pv) = (
            (flat - offsets[v]) % view.camera.width,
            (flat - offsets[v]) / view.camera.width,
        );

        batch.rays.push(pixel_to_ray(
            &view.camera,
            &view.pose,
            u as f64,
            pv as f64,
            data.meta.t_near,
            data.meta.t_far,
        )?);
        let px = data.images[v].pixel(u, pv);
        batch
            .gt_color
            .push([px[0] as f64, px[1] as f64, px[2] as f64]);

        let z = data.priors.depth[v].value(u, pv) as f64;
        let depth_t = if z.is_finite() && z > 0.0 {
            z * depth_to_ray_scale(&view.camera, u as f64, pv as f64)
        } else {
            f64::NAN
        };
        let npx = data.priors.normal[v].pixel(u, pv);
        let normal = if npx.iter().all(|c| c.is_finite()) {
            Vector3::new(npx[0] as f64, npx[1] as f64, npx[2] as f64)
        } else {
            Vector3::repeat(f64::NAN)
        };
        let mut conf = if data.priors.confidence.is_empty() {
            1.0
        } else {
            let c = data.priors.confidence[v].value(u, pv) as f64;
            if c.is_finite() {
                c.clamp(0.0, 1.0)
            } else {
                0.0
            }
        };
        if !depth_t.is_finite() || !normal.x.is_finite() {
            conf = 0.0;
        }
        batch.gt_depth.push(depth_t);
        batch.gt_normal.push(normal);
        batch.confidence.push(conf);
    }
    Ok(batch)
}

/// The per-ray render outputs the losses consume, split out from
/// [`RayForward`] so loss terms can be exercised on hand-built values.
#[derive(Debug, Clone)]
pub struct RayOutputs {
    pub color_coarse: [f64; 3],
    pub color_fine: [f64; 3],
    /// Expected distance along the ray from the fine stage.
    pub depth_fine: f64,
    pub normal_fine: Option<Vector3<f64>>,
    pub acc_fine: f64,
}

impl From<&RayForward> for RayOutputs {
    fn from(fwd: &RayForward) -> Self {
        Self {
            color_coarse: fwd.coarse.out_color,
            color_fine: fwd.fine.out_color,
            depth_fine: fwd.fine.out_depth,
            normal_fine: fwd.fine.out_normal,
            acc_fine: fwd.fine.acc,
        }
    }
}

/// Huber penalty: quadratic `e²/2` for `|e| < delta`, linear
/// `delta·(|e| − delta/2)` beyond, continuous at the knee.
pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() < delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `e`: the error clamped to
/// `[-delta, delta]`.
pub fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

/// Component-wise Huber penalty summed over a difference vector.
pub fn huber_vec3(e: &Vector3<f64>, delta: f64) -> f64 {
    huber(e.x, delta) + huber(e.y, delta) + huber(e.z, delta)
}

/// Squared color error over the three channels for one stage of one ray.
pub fn color_sq_error(pred: &[f64; 3], gt: &[f64; 3]) -> f64 {
    (0..3).map(|ch| (pred[ch] - gt[ch]).powi(2)).sum()
}

/// Per-ray photometric term and its seeds: squared error on both stages.
fn ray_rgb(gt: &[f64; 3], out: &RayOutputs) -> (f64, [f64; 3], [f64; 3]) {
    let mut seed_coarse = [0.0; 3];
    let mut seed_fine = [0.0; 3];
    for ch in 0..3 {
        seed_coarse[ch] = 2.0 * (out.color_coarse[ch] - gt[ch]);
        seed_fine[ch] = 2.0 * (out.color_fine[ch] - gt[ch]);
    }
    let loss = color_sq_error(&out.color_coarse, gt) + color_sq_error(&out.color_fine, gt);
    (loss, seed_coarse, seed_fine)
}

/// Per-ray depth term: confidence-weighted Huber on the fine expected depth,
/// skipped when confidence or supervision is missing or the ray accumulated
/// less than [`MIN_ACCUMULATION`] opacity. Returns `(loss, d loss/d depth)`.
fn ray_depth(gt_t: f64, conf: f64, out: &RayOutputs, delta: f64) -> (f64, f64) {
    if !(conf > 0.0) || !gt_t.is_finite() || out.acc_fine < MIN_ACCUMULATION {
        return (0.0, 0.0);
    }
    let e = out.depth_fine - gt_t;
    (conf * huber(e, delta), conf * huber_grad(e, delta))
}

/// Per-ray normal term: confidence-weighted component-wise Huber between the
/// fine output normal and the prior, under the same gates as [`ray_depth`]
/// plus the existence of an output normal.
fn ray_normal(
    gt: &Vector3<f64>,
    conf: f64,
    out: &RayOutputs,
    delta: f64,
) -> (f64, Option<Vector3<f64>>) {
    let n = match &out.normal_fine {
        Some(n) if out.acc_fine >= MIN_ACCUMULATION => n,
        _ => return (0.0, None),
    };
    if !(conf > 0.0) || !gt.x.is_finite() {
        return (0.0, None);
    }
    let e = n - gt;
    let grad = Vector3::new(
        huber_grad(e.x, delta),
        huber_grad(e.y, delta),
        huber_grad(e.z, delta),
    );
    (conf * huber_vec3(&e, delta), Some(conf * grad))
}

/// Photometric loss: squared color error summed over rays and both stages.
pub fn loss_rgb(batch: &RayBatch, outputs: &[RayOutputs]) -> f64 {
    batch
        .gt_color
        .iter()
        .zip(outputs)
        .map(|(gt, out)| ray_rgb(gt, out).0)
        .sum()
}

/// Confidence-weighted Huber depth loss on the fine stage, summed over rays.
pub fn loss_depth(batch: &RayBatch, outputs: &[RayOutputs], delta: f64) -> f64 {
    (0..batch.len())
        .map(|i| ray_depth(batch.gt_depth[i], batch.confidence[i], &outputs[i], delta).0)
        .sum()
}

/// Confidence-weighted Huber normal loss on the fine stage, summed over rays.
pub fn loss_norm(batch: &RayBatch, outputs: &[RayOutputs], delta: f64) -> f64 {
    (0..batch.len())
        .map(|i| ray_normal(&batch.gt_normal[i], batch.confidence[i], &outputs[i], delta).0)
        .sum()
}

/// The three loss sums and their weighted total
/// `l_rgb + lambda·(l_depth + l_norm)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_norm: f64,
    pub total: f64,
}

pub fn total_loss(
    batch: &RayBatch,
    outputs: &[RayOutputs],
    lambda: f64,
    delta_depth: f64,
    delta_norm: f64,
) -> LossBreakdown {
    let l_rgb = loss_rgb(batch, outputs);
    let l_depth = loss_depth(batch, outputs, delta_depth);
    let l_norm = loss_norm(batch, outputs, delta_norm);
    LossBreakdown {
        l_rgb,
        l_depth,
        l_norm,
        total: l_rgb + lambda * (l_depth + l_norm),
    }
}

/// Learning rate for `iteration`: exponential decay from `lr_start` at
/// iteration 0 to exactly `lr_end` at the final iteration.
pub fn learning_rate(cfg: &TrainConfig, iteration: usize) -> f64 {
    if cfg.iterations <= 1 {
        return cfg.lr_start;
    }
    let f = iteration as f64 / (cfg.iterations - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(f)
}

/// Loss sums recorded after each iteration (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_norm: f64,
    pub total: f64,
}

/// Trained parameters plus the per-iteration loss history.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: FieldParams,
    pub history: Vec<LossRecord>,
}

/// Serializes a loss history as `iteration,l_rgb,l_depth,l_norm,total` CSV.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,l_rgb,l_depth,l_norm,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.iteration, r.l_rgb, r.l_depth, r.l_norm, r.total
        ));
    }
    out
}

/// Parameter-init stream. Per-ray streams use slot indices below the batch
/// size and the batch sampler uses slot `u64::MAX`, so reserving iteration
/// `u64::MAX` here cannot collide with either.
fn init_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, u64::MAX, u64::MAX)
}

fn batch_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    stream_rng(seed, iteration as u64, u64::MAX)
}

struct ChunkGrad {
    grads: FieldParams,
    l_rgb: f64,
    l_depth: f64,
    l_norm: f64,
}

/// Fits a field to `data`. When `out_dir` is given, periodic checkpoints, a
/// final `checkpoint_final.bin`, and `loss.csv` are written there.
///
/// Fails with [`Error::Training`] as soon as a loss turns non-finite, so a
/// divergent run cannot silently write garbage checkpoints.
pub fn train(data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    data.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let delta_depth = cfg.huber_delta_depth.unwrap_or_else(|| {
        (data.meta.bbox_max - data.meta.bbox_min).norm() / DEPTH_DELTA_DIAG_DIVISOR
    });
    if !(delta_depth > 0.0) {
        return Err(Error::InvalidInput(format!(
            "derived depth Huber threshold {delta_depth} is not positive; check scene bounds"
        )));
    }

    let mut params = FieldParams::init(cfg.field, &mut init_rng(cfg.seed))?;
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.iterations);

    // Normal probes are pure cost when no loss consumes their output; the
    // forward color/depth results and RNG streams are unaffected, so this
    // changes nothing downstream.
    let render_cfg = RenderConfig {
        compute_normals: cfg.render.compute_normals
            && cfg.supervise_normals
            && cfg.lambda_geom != 0.0,
        ..cfg.render
    };

    for iter in 0..cfg.iterations {
        let mut batch = sample_batch(data, cfg.batch_size, &mut batch_rng(cfg.seed, iter))?;
        if cfg.ignore_confidence {
            batch.force_full_confidence();
        }

        let chunks: Vec<Result<ChunkGrad>> = batch
            .rays
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(ci, rays)| {
                let mut out = ChunkGrad {
                    grads: params.zeros_like(),
                    l_rgb: 0.0,
                    l_depth: 0.0,
                    l_norm: 0.0,
                };
                for (j, ray) in rays.iter().enumerate() {
                    let slot = ci * GRAD_CHUNK + j;
                    let mut rng = stream_rng(cfg.seed, iter as u64, slot as u64);
                    let fwd = render_ray_traced(&params, ray, &render_cfg, &mut rng, true)?;
                    let outs = RayOutputs::from(&fwd);

                    let (lr, seed_coarse, seed_fine) = ray_rgb(&batch.gt_color[slot], &outs);
                    let (ld, gd) =
                        ray_depth(batch.gt_depth[slot], batch.confidence[slot], &outs, delta_depth);
                    let (ln, gn) = if cfg.supervise_normals {
                        ray_normal(
                            &batch.gt_normal[slot],
                            batch.confidence[slot],
                            &outs,
                            cfg.huber_delta_normal,
                        )
                    } else {
                        (0.0, None)
                    };
                    // With lambda exactly 0 the geometric seeds are dropped
                    // rather than scaled, keeping the run bit-identical to
                    // one with no geometric supervision at all.
                    let (d_depth_fine, d_normal_fine) = if cfg.lambda_geom != 0.0 {
                        (cfg.lambda_geom * gd, gn.map(|g| cfg.lambda_geom * g))
                    } else {
                        (0.0, None)
                    };
                    let seeds = RaySeeds {
                        d_color_coarse: seed_coarse,
                        d_color_fine: seed_fine,
                        d_depth_fine,
                        d_normal_fine,
                    };
                    backward_ray(&params, &fwd, &seeds, &mut out.grads)?;
                    out.l_rgb += lr;
                    out.l_depth += ld;
                    out.l_norm += ln;
                }
                Ok(out)
            })
            .collect();

        let mut grads = params.zeros_like();
        let (mut l_rgb, mut l_depth, mut l_norm) = (0.0, 0.0, 0.0);
        for chunk in chunks {
            let chunk = chunk?;
            grads.accumulate(&chunk.grads);
            l_rgb += chunk.l_rgb;
            l_depth += chunk.l_depth;
            l_norm += chunk.l_norm;
        }
        let total = l_rgb + cfg.lambda_geom * (l_depth + l_norm);
        if !total.is_finite() {
            return Err(Error::Training {
                iteration: iter,
                msg: format!(
                    "non-finite loss (rgb {l_rgb}, depth {l_depth}, normal {l_norm})"
                ),
            });
        }
        adam.step(&mut params, &grads, learning_rate(cfg, iter));
        history.push(LossRecord {
            iteration: iter,
            l_rgb,
            l_depth,
            l_norm,
            total,
        });

        if cfg.verbose && (iter % 100 == 0 || iter + 1 == cfg.iterations) {
            eprintln!(
                "iter {iter:6}  rgb {l_rgb:10.5}  depth {l_depth:10.5}  normal {l_norm:10.5}  total {total:10.5}"
            );
        }
        if let Some(dir) = out_dir {
            let done = iter + 1;
            if cfg.checkpoint_interval > 0
                && done % cfg.checkpoint_interval == 0
                && done != cfg.iterations
            {
                save_checkpoint(&dir.join(format!("checkpoint_{done:06}.bin")), &params)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint_final.bin"), &params)?;
        std::fs::write(dir.join("loss.csv"), loss_csv(&history))?;
    }
    Ok(TrainResult { params, history })
}
