//! On-disk dataset layout shared by the generator, the trainer, and the
//! CLI.
//!
//! A dataset directory looks like:
//!
//! ```text
//! scene/
//!   cameras.txt          pinhole intrinsics (text pose format)
//!   images.txt           world-to-camera poses (text pose format)
//!   scene.txt            key = value metadata (near/far, bbox, ring radius)
//!   images/<name>.png    8-bit sRGB renderings
//!   depth/<name>.pfm     camera-space z, world units (1 channel)
//!   normal/<name>.pfm    world-frame unit normals (3 channels)
//!   confidence/<name>.pfm  optional weights in [0, 1] (1 channel)
//!   gt_points.ply        optional reference surface samples
//! ```
//!
//! PNG pixels are sRGB-encoded on write and linearized on read; all float
//! maps round-trip bit-exactly through PFM, including NaN-invalid pixels.

use std::path::Path;

use nalgebra::Vector3;

use crate::config::{self, KvMap};
use crate::error::{Error, Result};
use crate::geometry::colmap::{read_poses, write_poses};
use crate::geometry::pfm::{read_pfm, write_pfm};
use crate::geometry::ImageBuffer;
use crate::priors::PriorSet;

/// Scene-level metadata stored in `scene.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    /// Near bound for ray marching, world units.
    pub t_near: f64,
    /// Far bound for ray marching, world units.
    pub t_far: f64,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    /// Radius of the camera ring the views were generated on.
    pub ring_radius: f64,
}

impl SceneMeta {
    fn to_pairs(&self) -> Vec<(String, String)> {
        let vec3 = |v: &Vector3<f64>| format!("{:?},{:?},{:?}", v.x, v.y, v.z);
        vec![
            ("bbox_max".into(), vec3(&self.bbox_max)),
            ("bbox_min".into(), vec3(&self.bbox_min)),
            ("ring_radius".into(), format!("{:?}", self.ring_radius)),
            ("t_far".into(), format!("{:?}", self.t_far)),
            ("t_near".into(), format!("{:?}", self.t_near)),
        ]
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let req_f64 = |key: &str| -> Result<f64> {
            kv.get_f64(key)?
                .ok_or_else(|| Error::InvalidInput(format!("scene metadata missing `{key}`")))
        };
        let req_vec3 = |key: &str| -> Result<Vector3<f64>> {
            let [x, y, z] = kv
                .get_vec3(key)?
                .ok_or_else(|| Error::InvalidInput(format!("scene metadata missing `{key}`")))?;
            Ok(Vector3::new(x, y, z))
        };
        let meta = Self {
            t_near: req_f64("t_near")?,
            t_far: req_f64("t_far")?,
            bbox_min: req_vec3("bbox_min")?,
            bbox_max: req_vec3("bbox_max")?,
            ring_radius: req_f64("ring_radius")?,
        };
        if !(meta.t_near > 0.0 && meta.t_near < meta.t_far) {
            return Err(Error::InvalidInput(format!(
                "scene metadata requires 0 < t_near < t_far, got [{}, {}]",
                meta.t_near, meta.t_far
            )));
        }
        Ok(meta)
    }
}

/// A fully loaded dataset: images plus geometric priors plus metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Linear RGB images in [0, 1], one per view.
    pub images: Vec<ImageBuffer>,
    /// Views, depth/normal maps, and (possibly empty) confidence maps.
    pub priors: PriorSet,
    pub meta: SceneMeta,
}

impl Dataset {
    pub fn view_count(&self) -> usize {
        self.priors.len()
    }

    /// Structural checks across images, priors, and metadata.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.priors.len() {
            return Err(Error::InvalidInput(format!(
                "{} images for {} views",
                self.images.len(),
                self.priors.len()
            )));
        }
        for (i, (img, view)) in self.images.iter().zip(&self.priors.views).enumerate() {
            if img.width() != view.camera.width
                || img.height() != view.camera.height
                || img.channels() != 3
            {
                return Err(Error::InvalidInput(format!(
                    "view {i} ({}): image is {}x{}x{}, camera expects {}x{}x3",
                    view.name,
                    img.width(),
                    img.height(),
                    img.channels(),
                    view.camera.width,
                    view.camera.height
                )));
            }
        }
        self.priors.validate()
    }
}

/// sRGB transfer function (signal from linear), both in [0, 1].
pub fn linear_to_srgb(linear: f32) -> f32 {
    let l = linear.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse sRGB transfer function (linear from signal), both in [0, 1].
pub fn srgb_to_linear(signal: f32) -> f32 {
    let s = signal.clamp(0.0, 1.0);
    if s <= 0.040_45 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// Write a linear-RGB buffer as an 8-bit sRGB PNG.
pub fn write_image_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(format!(
            "png output expects 3 channels, got {}",
            image.channels()
        )));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (linear_to_srgb(v) * 255.0).round() as u8)
        .collect();
    let rgb = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer size matches dimensions by construction");
    rgb.save(path)
        .map_err(|e| Error::parse(path, format!("png encode failed: {e}")))
}

/// Read an 8-bit sRGB PNG into a linear-RGB buffer.
pub fn read_image_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img
        .into_raw()
        .into_iter()
        .map(|b| srgb_to_linear(b as f32 / 255.0))
        .collect();
    ImageBuffer::from_data(w, h, 3, data)
}

/// Write a dataset directory (see the module docs for the layout).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("normal"))?;
    let has_confidence = !data.priors.confidence.is_empty();
    if has_confidence {
        std::fs::create_dir_all(dir.join("confidence"))?;
    }
    write_poses(dir, &data.priors.views)?;
    config::write_kv(&dir.join("scene.txt"), &data.meta.to_pairs())?;
    for (i, view) in data.priors.views.iter().enumerate() {
        let name = &view.name;
        write_image_png(&dir.join("images").join(format!("{name}.png")), &data.images[i])?;
        write_pfm(&dir.join("depth").join(format!("{name}.pfm")), &data.priors.depth[i])?;
        write_pfm(&dir.join("normal").join(format!("{name}.pfm")), &data.priors.normal[i])?;
        if has_confidence {
            write_pfm(
                &dir.join("confidence").join(format!("{name}.pfm")),
                &data.priors.confidence[i],
            )?;
        }
    }
    Ok(())
}

/// Load a dataset directory.
///
/// Confidence maps are optional, but must be present for either all views
/// or none. When `normals_in_camera_frame` is set, normal maps are
/// interpreted as camera-frame vectors and rotated into the world frame on
/// load (some MVS exporters store them per-camera).
pub fn load_dataset(dir: &Path, normals_in_camera_frame: bool) -> Result<Dataset> {
    let views = read_poses(dir)?;
    if views.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no views found in {}",
            dir.display()
        )));
    }
    let meta = SceneMeta::from_kv(&KvMap::read(&dir.join("scene.txt"))?)?;
    let mut images = Vec::with_capacity(views.len());
    let mut depths = Vec::with_capacity(views.len());
    let mut normals = Vec::with_capacity(views.len());
    let mut confidences = Vec::new();
    for view in &views {
        let name = &view.name;
        let (w, h) = (view.camera.width, view.camera.height);
        let expect = |map: &ImageBuffer, channels: usize, what: &str| -> Result<()> {
            if map.width() != w || map.height() != h || map.channels() != channels {
                return Err(Error::InvalidInput(format!(
                    "view {name}: {what} is {}x{}x{}, camera expects {w}x{h}x{channels}",
                    map.width(),
                    map.height(),
                    map.channels()
                )));
            }
            Ok(())
        };
        let image = read_image_png(&dir.join("images").join(format!("{name}.png")))?;
        expect(&image, 3, "image")?;
        let depth = read_pfm(&dir.join("depth").join(format!("{name}.pfm")))?;
        expect(&depth, 1, "depth map")?;
        let mut normal = read_pfm(&dir.join("normal").join(format!("{name}.pfm")))?;
        expect(&normal, 3, "normal map")?;
        if normals_in_camera_frame {
            for v in 0..h {
                for u in 0..w {
                    if normal.is_valid(u, v) {
                        let px = normal.pixel(u, v);
                        let n_cam = Vector3::new(px[0] as f64, px[1] as f64, px[2] as f64);
                        let n_world = view.pose.direction_to_world(&n_cam);
                        let px = normal.pixel_mut(u, v);
                        px[0] = n_world.x as f32;
                        px[1] = n_world.y as f32;
                        px[2] = n_world.z as f32;
                    }
                }
            }
        }
        let conf_path = dir.join("confidence").join(format!("{name}.pfm"));
        if conf_path.exists() {
            let conf = read_pfm(&conf_path)?;
            expect(&conf, 1, "confidence map")?;
            confidences.push(conf);
        }
        images.push(image);
        depths.push(depth);
        normals.push(normal);
    }
    if !confidences.is_empty() && confidences.len() != views.len() {
        return Err(Error::InvalidInput(format!(
            "confidence maps exist for {} of {} views; expected all or none",
            confidences.len(),
            views.len()
        )));
    }
    let data = Dataset {
        images,
        priors: PriorSet {
            views,
            depth: depths,
            normal: normals,
            confidence: confidences,
        },
        meta,
    };
    data.validate()?;
    Ok(data)
}
