//! Command-line driver for the radiance-field pipeline.
//!
//! Six subcommands chain into the full workflow: `gen-scene` renders the
//! analytic fixture into a dataset directory, `confidence` derives
//! reprojection-consistency weights for its depth/normal maps, `train` fits
//! the coarse/fine fields, `render` and `extract` turn a checkpoint into
//! images and a mesh, and `eval` scores renders and meshes against ground
//! truth:
//!
//! ```text
//! radfield gen-scene --out d/
//! radfield confidence --data d/
//! radfield train --data d/ --iters 2000 --preset small
//! radfield render --data d/ --ckpt d/ckpt --out d/renders
//! radfield extract --ckpt d/ckpt --data d/ --out d/mesh.ply
//! radfield eval --data d/ --ckpt d/ckpt --mesh d/mesh.ply
//! ```
//!
//! Every tunable flag mirrors a `key = value` entry in an optional
//! `--config` file, flags winning on conflict, and each subcommand writes a
//! manifest recording its input paths, the resolved configuration, a CRC-32
//! fingerprint of that configuration, and the tool version. Rerunning a
//! subcommand with the manifest's configuration and seed reproduces its
//! outputs bit for bit (guaranteed with `--threads 1`; the gradient
//! reduction, per-pixel RNG streams, and layer-merged marching cubes make it
//! hold for any thread count in practice). No subcommand modifies the files
//! it reads. Progress goes to stderr and data to files; exit code 0 on
//! success, 1 with a one-line `error: ...` on stderr otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use radfield::config::{crc32, format_kv, write_kv, KvMap};
use radfield::dataset::{load_dataset, write_dataset, write_image_png};
use radfield::error::{Error, Result};
use radfield::extraction::{default_extraction_bounds, extract_mesh};
use radfield::field::checkpoint::load_checkpoint;
use radfield::field::Stage;
use radfield::geometry::pfm::write_pfm;
use radfield::geometry::ply::{read_pointcloud_ply, write_mesh_ply, write_pointcloud_ply};
use radfield::metrics::{chamfer_distance, eval_views, mesh_csv, views_csv};
use radfield::priors::{build_confidence_maps, ConfidenceMode, DEFAULT_TOP_K};
use radfield::renderer::{render_image, RenderConfig};
use radfield::synthetic::{
    corrupt_priors, generate_dataset, surface_samples, AnalyticScene, Region,
    DEFAULT_RING_RADIUS,
};
use radfield::training::{train, TrainConfig};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        // One line, machine-parsable: everything after `error: ` is the cause.
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(args) => run_gen_scene(args),
        Command::Confidence(args) => run_confidence(args),
        Command::Train(args) => run_train(args),
        Command::Render(args) => run_render(args),
        Command::Extract(args) => run_extract(args),
        Command::Eval(args) => run_eval(args),
    }
}

#[derive(Parser)]
#[command(
    name = "radfield",
    version,
    about = "Geometry-supervised radiance fields: synthetic data, training, rendering, meshing, evaluation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the analytic benchmark dataset (images, poses, exact priors).
    GenScene(GenSceneArgs),
    /// Build reprojection-consistency confidence maps for a dataset.
    Confidence(ConfidenceArgs),
    /// Train the coarse/fine radiance fields on a dataset.
    Train(TrainArgs),
    /// Render color/depth/normal maps for dataset views from a checkpoint.
    Render(RenderArgs),
    /// Extract a triangle mesh from a checkpoint's density field.
    Extract(ExtractArgs),
    /// Score rendered views (PSNR/SSIM) and an extracted mesh (Chamfer).
    Eval(EvalArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Optional `key = value` config file; explicit flags override its
    /// entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores; 1
    /// guarantees bitwise-reproducible outputs).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Flag/config resolution
// ---------------------------------------------------------------------------

/// Resolves each setting as: explicit flag, else config-file key, else
/// built-in default, and records the winning value so the run manifest can
/// state the exact configuration. Config keys spell their flag with
/// underscores (`--lambda-geom` is `lambda_geom`).
struct Settings {
    file: KvMap,
    resolved: BTreeMap<String, String>,
    consulted: std::collections::HashSet<String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(path) => KvMap::read(path)?,
            None => KvMap::default(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
            consulted: std::collections::HashSet::new(),
        })
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.insert(key.to_string(), value);
    }

    fn usize_(&mut self, flag: Option<usize>, key: &str, default: usize) -> Result<usize> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.file.get_usize(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    fn u64_(&mut self, flag: Option<u64>, key: &str, default: u64) -> Result<u64> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.file.get_u64(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    fn f64_(&mut self, flag: Option<f64>, key: &str, default: f64) -> Result<f64> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.file.get_f64(key)?.unwrap_or(default),
        };
        self.record(key, format!("{v:?}"));
        Ok(v)
    }

    /// A float with no default; absent everywhere stays `None` and is
    /// recorded as `auto`.
    fn f64_opt(&mut self, flag: Option<f64>, key: &str) -> Result<Option<f64>> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.file.get_f64(key)?,
        };
        self.record(key, v.map_or("auto".to_string(), |v| format!("{v:?}")));
        Ok(v)
    }

    /// A true-only switch: the flag can assert it, the config key can set
    /// either way, and the flag wins.
    fn switch(&mut self, flag: bool, key: &str) -> Result<bool> {
        self.consulted.insert(key.to_string());
        let v = flag || self.file.get_bool(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    fn string(&mut self, flag: Option<String>, key: &str, default: &str) -> Result<String> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self
                .file
                .get(key)
                .map(str::to_string)
                .unwrap_or_else(|| default.to_string()),
        };
        self.record(key, v.clone());
        Ok(v)
    }

    fn string_opt(&mut self, flag: Option<String>, key: &str) -> Result<Option<String>> {
        self.consulted.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(str::to_string),
        };
        if let Some(v) = &v {
            self.record(key, v.clone());
        }
        Ok(v)
    }

    /// `x,y,z` triple, optional everywhere.
    fn vec3_opt(&mut self, flag: Option<String>, key: &str) -> Result<Option<Vector3<f64>>> {
        let v = self.string_opt(flag, key)?;
        v.map(|s| parse_triple(&s, key)).transpose()
    }

    /// A path the subcommand cannot run without.
    fn path_req(&mut self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.path_opt(flag, key)?.ok_or_else(|| {
            Error::InvalidInput(format!(
                "missing `--{}`; pass the flag or set `{key}` in the --config file",
                key.replace('_', "-")
            ))
        })
    }

    fn path_opt(&mut self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
        self.consulted.insert(key.to_string());
        Ok(match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(PathBuf::from),
        })
    }

    /// Resolve `--threads`, install the global worker pool, and record the
    /// choice (0 = all cores). Must run before any parallel work.
    fn apply_threads(&mut self, common: &Common) -> Result<()> {
        let n = self.usize_(common.threads, "threads", 0)?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidInput(format!("cannot set thread count: {e}")))?;
        }
        Ok(())
    }

    /// Warn about config keys nothing consulted, so typos in a config file
    /// cannot silently fall back to defaults.
    fn warn_unused(&self) {
        for (key, _) in self.file.iter() {
            if !self.consulted.contains(key) {
                eprintln!("warning: config key `{key}` is not used by this subcommand");
            }
        }
    }
}

fn parse_triple(s: &str, what: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().ok())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidInput(format!("{what}: expected `x,y,z`, got `{s}`")))?;
    let [x, y, z] = <[f64; 3]>::try_from(parts)
        .map_err(|_| Error::InvalidInput(format!("{what}: expected 3 components, got `{s}`")))?;
    Ok(Vector3::new(x, y, z))
}

fn parse_region(s: &str) -> Result<Region> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().ok())
        .collect::<Option<_>>()
        .ok_or_else(|| {
            Error::InvalidInput(format!("corrupt_region: expected `u0,v0,u1,v1`, got `{s}`"))
        })?;
    let [u0, v0, u1, v1] = <[f64; 4]>::try_from(parts).map_err(|_| {
        Error::InvalidInput(format!("corrupt_region: expected 4 components, got `{s}`"))
    })?;
    Region::new(u0, v0, u1, v1)
}

/// Accept either a checkpoint file or a training output directory (which
/// means its `checkpoint_final.bin`).
fn resolve_checkpoint(path: PathBuf) -> Result<PathBuf> {
    let resolved = if path.is_dir() {
        path.join("checkpoint_final.bin")
    } else {
        path
    };
    if !resolved.is_file() {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} does not exist; point --ckpt at a checkpoint file or a train output directory",
            resolved.display()
        )));
    }
    Ok(resolved)
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Writes the run manifest: what ran, on which inputs, with which resolved
/// configuration. `config_crc32` fingerprints the configuration block
/// (sorted `key = value` lines), so two manifests describe the same run iff
/// their fingerprints and inputs match.
fn write_manifest(
    path: &Path,
    subcommand: &str,
    paths: &[(&str, &Path)],
    settings: &Settings,
) -> Result<()> {
    let config_pairs: Vec<(String, String)> = settings
        .resolved
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let fingerprint = crc32(format_kv(&config_pairs).as_bytes());
    let mut pairs = vec![
        ("subcommand".to_string(), subcommand.to_string()),
        (
            "tool_version".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        ),
        ("config_crc32".to_string(), format!("{fingerprint:08x}")),
    ];
    for (key, p) in paths {
        pairs.push((format!("path_{key}"), p.display().to_string()));
    }
    pairs.extend(config_pairs);
    write_kv(path, &pairs)?;
    settings.warn_unused();
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-scene
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenSceneArgs {
    #[command(flatten)]
    common: Common,

    /// Output dataset directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Scene preset: `sphere-box` (default) or `sphere`.
    #[arg(long, value_name = "NAME")]
    scene: Option<String>,

    /// Number of cameras on the viewing ring.
    #[arg(long, value_name = "N")]
    views: Option<usize>,

    /// Image width in pixels.
    #[arg(long, value_name = "PX")]
    width: Option<usize>,

    /// Image height in pixels.
    #[arg(long, value_name = "PX")]
    height: Option<usize>,

    /// Camera ring radius in world units.
    #[arg(long, value_name = "R")]
    ring_radius: Option<f64>,

    /// Analytic surface samples written to gt_points.ply (0 skips the file).
    #[arg(long, value_name = "N")]
    gt_points: Option<usize>,

    /// Image region to corrupt, as `u0,v0,u1,v1` fractions of the image.
    #[arg(long, value_name = "U0,V0,U1,V1")]
    corrupt_region: Option<String>,

    /// Gaussian depth noise sigma inside the corrupted region (world units).
    #[arg(long, value_name = "SIGMA")]
    corrupt_sigma: Option<f64>,

    /// Fraction of corrupted-region pixels invalidated (NaN depth + normal).
    #[arg(long, value_name = "F")]
    corrupt_invalid_frac: Option<f64>,

    /// Gaussian depth noise sigma applied over the whole image.
    #[arg(long, value_name = "SIGMA")]
    corrupt_global_sigma: Option<f64>,

    /// Seed for surface sampling and prior corruption.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

fn run_gen_scene(args: GenSceneArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let out = s.path_req(args.out, "out")?;
    let scene_name = s.string(args.scene, "scene", "sphere-box")?;
    let n_views = s.usize_(args.views, "views", 20)?;
    let width = s.usize_(args.width, "width", 64)?;
    let height = s.usize_(args.height, "height", 64)?;
    let ring_radius = s.f64_(args.ring_radius, "ring_radius", DEFAULT_RING_RADIUS)?;
    let n_gt = s.usize_(args.gt_points, "gt_points", 10_000)?;
    let region = s.string_opt(args.corrupt_region, "corrupt_region")?;
    let sigma = s.f64_(args.corrupt_sigma, "corrupt_sigma", 0.0)?;
    let invalid_frac = s.f64_(args.corrupt_invalid_frac, "corrupt_invalid_frac", 0.0)?;
    let global_sigma = s.f64_(args.corrupt_global_sigma, "corrupt_global_sigma", 0.0)?;
    let seed = s.u64_(args.seed, "seed", 0)?;

    let scene = match scene_name.as_str() {
        "sphere-box" => AnalyticScene::fixture(),
        "sphere" => AnalyticScene::single_sphere(),
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown scene `{other}`; expected `sphere-box` or `sphere`"
            )))
        }
    };

    eprintln!("rendering {n_views} views of `{scene_name}` at {width}x{height}...");
    let mut data = generate_dataset(&scene, n_views, width, height, ring_radius)?;

    // Corruption emulates an unreliable depth/normal source: optional mild
    // noise everywhere, then a heavily damaged rectangle. The two passes use
    // distinct seeds so their noise fields are independent.
    if global_sigma > 0.0 {
        data.priors = corrupt_priors(
            &data.priors,
            &Region::full(),
            global_sigma,
            0.0,
            seed.wrapping_add(1),
        )?;
    }
    if let Some(region) = &region {
        let region = parse_region(region)?;
        data.priors = corrupt_priors(&data.priors, &region, sigma, invalid_frac, seed)?;
    } else if sigma > 0.0 || invalid_frac > 0.0 {
        return Err(Error::InvalidInput(
            "corrupt_sigma/corrupt_invalid_frac need --corrupt-region; use corrupt_global_sigma for whole-image noise"
                .into(),
        ));
    }

    write_dataset(&out, &data)?;
    if n_gt > 0 {
        let points = surface_samples(&scene, n_gt, seed);
        write_pointcloud_ply(&out.join("gt_points.ply"), &points, None)?;
    }
    write_manifest(
        &out.join("manifest_gen_scene.txt"),
        "gen-scene",
        &[("out", &out)],
        &s,
    )?;
    eprintln!(
        "wrote {n_views} views and {n_gt} surface samples to {}",
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// confidence
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ConfidenceArgs {
    #[command(flatten)]
    common: Common,

    /// Dataset directory with images, poses, and depth/normal maps.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Where to write `confidence/<view>.pfm` (default: the dataset).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Number of lowest-error source views averaged per pixel.
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,

    /// Confidence mode: `continuous` (default) or `binary`.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,

    /// Interpret stored normal maps as camera-frame vectors.
    #[arg(long)]
    camera_normals: bool,
}

fn run_confidence(args: ConfidenceArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let data_dir = s.path_req(args.data, "data")?;
    let out = s
        .path_opt(args.out, "out")?
        .unwrap_or_else(|| data_dir.clone());
    let top_k = s.usize_(args.top_k, "top_k", DEFAULT_TOP_K)?;
    let mode_name = s.string(args.mode, "mode", "continuous")?;
    let camera_normals = s.switch(args.camera_normals, "camera_normals")?;

    let mode = ConfidenceMode::parse(&mode_name)?;
    let data = load_dataset(&data_dir, camera_normals)?;
    eprintln!(
        "building {mode_name} confidence for {} views (top-{top_k} sources)...",
        data.view_count()
    );
    let priors = build_confidence_maps(&data.priors, top_k, mode)?;

    std::fs::create_dir_all(out.join("confidence"))?;
    for (view, conf) in priors.views.iter().zip(&priors.confidence) {
        write_pfm(
            &out.join("confidence").join(format!("{}.pfm", view.name)),
            conf,
        )?;
    }
    write_manifest(
        &out.join("manifest_confidence.txt"),
        "confidence",
        &[("data", &data_dir), ("out", &out)],
        &s,
    )?;
    eprintln!(
        "wrote {} confidence maps to {}",
        priors.confidence.len(),
        out.join("confidence").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,

    /// Dataset directory to train on.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Output directory for checkpoints and loss.csv (default: `<data>/ckpt`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Training iterations.
    #[arg(long, value_name = "N")]
    iters: Option<usize>,

    /// Network/sampling preset: `full` (default) or `small`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Rays per iteration.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,

    /// Initial learning rate.
    #[arg(long, value_name = "LR")]
    lr_start: Option<f64>,

    /// Final learning rate (exponential decay over the run).
    #[arg(long, value_name = "LR")]
    lr_end: Option<f64>,

    /// Weight on the depth+normal losses; 0 trains photometric-only.
    #[arg(long, value_name = "W")]
    lambda_geom: Option<f64>,

    /// Huber threshold for depth residuals, world units (default:
    /// scene diagonal / 20).
    #[arg(long, value_name = "D")]
    huber_delta_depth: Option<f64>,

    /// Huber threshold for per-component normal residuals.
    #[arg(long, value_name = "D")]
    huber_delta_normal: Option<f64>,

    /// Write `checkpoint_NNNNNN.bin` every N iterations (0: final only).
    #[arg(long, value_name = "N")]
    checkpoint_interval: Option<usize>,

    /// Force every supervised confidence to 1 (the unweighted ablation).
    #[arg(long)]
    ignore_confidence: bool,

    /// Drop the normal loss term (the depth-only ablation).
    #[arg(long)]
    no_normal_loss: bool,

    /// Interpret stored normal maps as camera-frame vectors.
    #[arg(long)]
    camera_normals: bool,

    /// Suppress per-100-iteration progress lines.
    #[arg(long)]
    quiet: bool,

    /// Seed for parameter init and ray sampling.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let data_dir = s.path_req(args.data, "data")?;
    let out = s
        .path_opt(args.out, "out")?
        .unwrap_or_else(|| data_dir.join("ckpt"));
    let iters = s.usize_(args.iters, "iters", 5000)?;
    let preset = s.string(args.preset, "preset", "full")?;
    let mut cfg = match preset.as_str() {
        "full" => TrainConfig::full(iters),
        "small" => TrainConfig::small(iters),
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown preset `{other}`; expected `full` or `small`"
            )))
        }
    };
    cfg.batch_size = s.usize_(args.batch_size, "batch_size", cfg.batch_size)?;
    cfg.lr_start = s.f64_(args.lr_start, "lr_start", cfg.lr_start)?;
    cfg.lr_end = s.f64_(args.lr_end, "lr_end", cfg.lr_end)?;
    cfg.lambda_geom = s.f64_(args.lambda_geom, "lambda_geom", cfg.lambda_geom)?;
    cfg.huber_delta_depth = s.f64_opt(args.huber_delta_depth, "huber_delta_depth")?;
    cfg.huber_delta_normal =
        s.f64_(args.huber_delta_normal, "huber_delta_normal", cfg.huber_delta_normal)?;
    cfg.checkpoint_interval =
        s.usize_(args.checkpoint_interval, "checkpoint_interval", 0)?;
    cfg.ignore_confidence = s.switch(args.ignore_confidence, "ignore_confidence")?;
    cfg.supervise_normals = !s.switch(args.no_normal_loss, "no_normal_loss")?;
    let camera_normals = s.switch(args.camera_normals, "camera_normals")?;
    cfg.verbose = !s.switch(args.quiet, "quiet")?;
    cfg.seed = s.u64_(args.seed, "seed", 0)?;

    let data = load_dataset(&data_dir, camera_normals)?;
    if data.priors.confidence.is_empty() {
        eprintln!(
            "note: no confidence maps; geometric supervision runs unweighted (run `confidence` first to weight it)"
        );
    }
    eprintln!(
        "training {preset} preset for {iters} iterations on {} views...",
        data.view_count()
    );
    let result = train(&data, &cfg, Some(&out))?;
    write_manifest(
        &out.join("manifest_train.txt"),
        "train",
        &[("data", &data_dir), ("out", &out)],
        &s,
    )?;
    if let Some(last) = result.history.last() {
        eprintln!(
            "done: final loss {:.6} (rgb {:.6}, depth {:.6}, normal {:.6})",
            last.total, last.l_rgb, last.l_depth, last.l_norm
        );
    }
    eprintln!("checkpoints and loss.csv in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint file, or a train output directory holding one.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,

    /// Dataset directory providing cameras, poses, and ray bounds.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Output directory for `<view>_{color,depth,normal,acc}` maps.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// View name to render (repeatable; default: all views).
    #[arg(long, value_name = "NAME")]
    view: Vec<String>,

    /// Sampling preset: `full` (default) or `small`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Stratified samples per ray for the coarse stage.
    #[arg(long, value_name = "N")]
    n_coarse: Option<usize>,

    /// Importance samples added for the fine stage.
    #[arg(long, value_name = "N")]
    n_fine: Option<usize>,

    /// Central-difference step for density-gradient normals.
    #[arg(long, value_name = "H")]
    normal_step: Option<f64>,

    /// Skip normal computation (depth and color only).
    #[arg(long)]
    no_normals: bool,

    /// Base seed for per-pixel sampling jitter (view i adds i).
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

/// Shared by `render` and `eval`: resolve the sampling configuration.
fn resolve_render_config(
    s: &mut Settings,
    preset: Option<String>,
    n_coarse: Option<usize>,
    n_fine: Option<usize>,
    normal_step: Option<f64>,
    no_normals: bool,
) -> Result<RenderConfig> {
    let preset = s.string(preset, "preset", "full")?;
    let mut cfg = match preset.as_str() {
        "full" => RenderConfig::full(),
        "small" => RenderConfig::small(),
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown preset `{other}`; expected `full` or `small`"
            )))
        }
    };
    cfg.n_coarse = s.usize_(n_coarse, "n_coarse", cfg.n_coarse)?;
    cfg.n_fine = s.usize_(n_fine, "n_fine", cfg.n_fine)?;
    cfg.normal_step = s.f64_(normal_step, "normal_step", cfg.normal_step)?;
    cfg.compute_normals = !s.switch(no_normals, "no_normals")?;
    Ok(cfg)
}

fn run_render(args: RenderArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let ckpt = resolve_checkpoint(s.path_req(args.ckpt, "ckpt")?)?;
    let data_dir = s.path_req(args.data, "data")?;
    let out = s.path_req(args.out, "out")?;
    let view_filter = if args.view.is_empty() {
        s.string_opt(None, "view")?
            .map(|v| v.split(',').map(|t| t.trim().to_string()).collect())
    } else {
        s.record("view", args.view.join(","));
        Some(args.view.clone())
    };
    let cfg = resolve_render_config(
        &mut s,
        args.preset,
        args.n_coarse,
        args.n_fine,
        args.normal_step,
        args.no_normals,
    )?;
    let seed = s.u64_(args.seed, "seed", 0)?;

    let params = load_checkpoint(&ckpt)?;
    let data = load_dataset(&data_dir, false)?;

    // Views keep their dataset index in the seed so a filtered render equals
    // the same view out of a full render.
    let selected: Vec<usize> = match &view_filter {
        None => (0..data.view_count()).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                data.priors
                    .views
                    .iter()
                    .position(|v| &v.name == name)
                    .ok_or_else(|| {
                        let known: Vec<&str> =
                            data.priors.views.iter().map(|v| v.name.as_str()).collect();
                        Error::InvalidInput(format!(
                            "view `{name}` not in dataset (views: {})",
                            known.join(", ")
                        ))
                    })
            })
            .collect::<Result<_>>()?,
    };

    std::fs::create_dir_all(&out)?;
    for &i in &selected {
        let view = &data.priors.views[i];
        eprintln!("rendering view {}...", view.name);
        let render = render_image(
            &params,
            &view.camera,
            &view.pose,
            data.meta.t_near,
            data.meta.t_far,
            &cfg,
            seed.wrapping_add(i as u64),
        )?;
        let name = &view.name;
        write_image_png(&out.join(format!("{name}_color.png")), &render.color)?;
        write_pfm(&out.join(format!("{name}_depth.pfm")), &render.depth)?;
        if cfg.compute_normals {
            write_pfm(&out.join(format!("{name}_normal.pfm")), &render.normal)?;
        }
        write_pfm(&out.join(format!("{name}_acc.pfm")), &render.acc)?;
    }
    write_manifest(
        &out.join("manifest_render.txt"),
        "render",
        &[("ckpt", &ckpt), ("data", &data_dir), ("out", &out)],
        &s,
    )?;
    eprintln!("rendered {} views to {}", selected.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint file, or a train output directory holding one.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,

    /// Output mesh path (ASCII PLY).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Dataset directory; supplies the default bounds (cameras + far plane).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Lower bounds corner `x,y,z` (with --bbox-max, overrides --data bounds).
    #[arg(long, value_name = "X,Y,Z")]
    bbox_min: Option<String>,

    /// Upper bounds corner `x,y,z`.
    #[arg(long, value_name = "X,Y,Z")]
    bbox_max: Option<String>,

    /// Grid nodes per axis.
    #[arg(long, value_name = "N")]
    resolution: Option<usize>,

    /// Density threshold defining the surface.
    #[arg(long, value_name = "TAU")]
    tau: Option<f64>,
}

fn run_extract(args: ExtractArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let ckpt = resolve_checkpoint(s.path_req(args.ckpt, "ckpt")?)?;
    let out = s.path_req(args.out, "out")?;
    let data_dir = s.path_opt(args.data, "data")?;
    let bbox_min = s.vec3_opt(args.bbox_min, "bbox_min")?;
    let bbox_max = s.vec3_opt(args.bbox_max, "bbox_max")?;
    let resolution = s.usize_(args.resolution, "resolution", 256)?;
    let tau = s.f64_(args.tau, "tau", 50.0)?;

    let (min, max) = match (bbox_min, bbox_max) {
        (Some(min), Some(max)) => (min, max),
        (None, None) => {
            let Some(data_dir) = &data_dir else {
                return Err(Error::InvalidInput(
                    "extraction bounds unknown: pass --bbox-min/--bbox-max, or --data to derive them from the cameras"
                        .into(),
                ));
            };
            let data = load_dataset(data_dir, false)?;
            default_extraction_bounds(&data.priors.views, data.meta.t_far)?
        }
        _ => {
            return Err(Error::InvalidInput(
                "--bbox-min and --bbox-max must be given together".into(),
            ))
        }
    };
    // The derived corners go into the manifest so the run is reproducible
    // without the dataset.
    let fmt = |v: &Vector3<f64>| format!("{:?},{:?},{:?}", v.x, v.y, v.z);
    s.record("bbox_min", fmt(&min));
    s.record("bbox_max", fmt(&max));

    let params = load_checkpoint(&ckpt)?;
    eprintln!(
        "sampling density on a {resolution}^3 grid in [{}] .. [{}]...",
        fmt(&min),
        fmt(&max)
    );
    let mesh = extract_mesh(
        params.stage(Stage::Fine),
        min,
        max,
        [resolution; 3],
        tau,
    )?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_mesh_ply(&out, &mesh.vertices, &mesh.triangles)?;
    let manifest = out.with_extension("manifest.txt");
    let mut manifest_paths: Vec<(&str, &Path)> = vec![("ckpt", &ckpt), ("out", &out)];
    if let Some(d) = &data_dir {
        manifest_paths.insert(1, ("data", d));
    }
    write_manifest(&manifest, "extract", &manifest_paths, &s)?;
    eprintln!(
        "wrote {} vertices / {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,

    /// Dataset directory with ground-truth images.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Checkpoint file, or a train output directory holding one.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,

    /// Extracted mesh to score against reference surface points.
    #[arg(long, value_name = "FILE")]
    mesh: Option<PathBuf>,

    /// Reference point cloud (default: `<data>/gt_points.ply`).
    #[arg(long, value_name = "FILE")]
    gt_points: Option<PathBuf>,

    /// Output directory for views.csv / mesh.csv (default: the dataset).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Sampling preset: `full` (default) or `small`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Stratified samples per ray for the coarse stage.
    #[arg(long, value_name = "N")]
    n_coarse: Option<usize>,

    /// Importance samples added for the fine stage.
    #[arg(long, value_name = "N")]
    n_fine: Option<usize>,

    /// Base seed for per-pixel sampling jitter (view i adds i).
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut s = Settings::load(&args.common)?;
    s.apply_threads(&args.common)?;
    let data_dir = s.path_req(args.data, "data")?;
    let ckpt = resolve_checkpoint(s.path_req(args.ckpt, "ckpt")?)?;
    let mesh_path = s.path_opt(args.mesh, "mesh")?;
    let gt_path = s
        .path_opt(args.gt_points, "gt_points")?
        .unwrap_or_else(|| data_dir.join("gt_points.ply"));
    let out = s
        .path_opt(args.out, "out")?
        .unwrap_or_else(|| data_dir.clone());
    // Image metrics need color only; normal probes would triple the cost.
    let mut cfg = resolve_render_config(&mut s, args.preset, args.n_coarse, args.n_fine, None, true)?;
    cfg.compute_normals = false;
    let seed = s.u64_(args.seed, "seed", 0)?;

    let params = load_checkpoint(&ckpt)?;
    let data = load_dataset(&data_dir, false)?;
    std::fs::create_dir_all(&out)?;

    eprintln!("scoring {} views...", data.view_count());
    let scores = eval_views(&params, &data, &cfg, seed)?;
    std::fs::write(out.join("views.csv"), views_csv(&scores))?;
    let n = scores.len() as f64;
    eprintln!(
        "mean psnr {:.3} dB, mean ssim {:.4}",
        scores.iter().map(|v| v.psnr).sum::<f64>() / n,
        scores.iter().map(|v| v.ssim).sum::<f64>() / n,
    );

    if let Some(mesh_path) = &mesh_path {
        if !gt_path.is_file() {
            return Err(Error::InvalidInput(format!(
                "reference points {} do not exist; pass --gt-points or generate the dataset with gt_points > 0",
                gt_path.display()
            )));
        }
        let (vertices, _) = read_pointcloud_ply(mesh_path)?;
        if vertices.is_empty() {
            return Err(Error::InvalidInput(format!(
                "mesh {} has no vertices to score; extraction likely found no surface at its tau",
                mesh_path.display()
            )));
        }
        let (gt, _) = read_pointcloud_ply(&gt_path)?;
        let chamfer = chamfer_distance(&gt, &vertices)?;
        std::fs::write(out.join("mesh.csv"), mesh_csv(chamfer))?;
        eprintln!("chamfer distance {chamfer:.6e} over {} mesh vertices", vertices.len());
    }

    let mut manifest_paths: Vec<(&str, &Path)> =
        vec![("data", &data_dir), ("ckpt", &ckpt), ("out", &out)];
    if let Some(m) = &mesh_path {
        manifest_paths.push(("mesh", m));
        manifest_paths.push(("gt_points", &gt_path));
    }
    write_manifest(&out.join("manifest_eval.txt"), "eval", &manifest_paths, &s)?;
    eprintln!("wrote CSV tables to {}", out.display());
    Ok(())
}
