//! COLMAP-style text pose files.
//!
//! A dataset directory holds two files:
//!
//! `cameras.txt`, one camera per line:
//! ```text
//! CAM_ID PINHOLE WIDTH HEIGHT fx fy cx cy
//! ```
//!
//! `images.txt`, one image per line:
//! ```text
//! IMG_ID qw qx qy qz tx ty tz CAM_ID NAME
//! ```
//!
//! The quaternion and translation are world-to-camera. Lines starting with
//! `#` and blank lines are ignored in both files. Only the PINHOLE model is
//! supported.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

/// One posed image: intrinsics, world-to-camera pose, and the image file name.
#[derive(Debug, Clone)]
pub struct ViewPose {
    pub camera: CameraIntrinsics,
    pub pose: Pose,
    pub name: String,
}

/// Maximum deviation from unit norm tolerated for stored quaternions.
const QUAT_NORM_TOL: f64 = 1e-6;

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_field<T: std::str::FromStr>(
    file: &Path,
    line_no: usize,
    token: Option<&str>,
    what: &str,
) -> Result<T> {
    let tok = token.ok_or_else(|| {
        Error::parse(file, format!("line {line_no}: missing field `{what}`"))
    })?;
    tok.parse().map_err(|_| {
        Error::parse(
            file,
            format!("line {line_no}: cannot parse `{tok}` as {what}"),
        )
    })
}

/// Reads `cameras.txt` + `images.txt` from `dir`. Views are returned sorted
/// by image id so downstream processing is order-deterministic.
pub fn read_poses(dir: &Path) -> Result<Vec<ViewPose>> {
    let cam_path = dir.join("cameras.txt");
    let img_path = dir.join("images.txt");
    let cam_text = std::fs::read_to_string(&cam_path)?;
    let img_text = std::fs::read_to_string(&img_path)?;

    let mut cameras: BTreeMap<u64, CameraIntrinsics> = BTreeMap::new();
    for (line_no, line) in data_lines(&cam_text) {
        let mut it = line.split_whitespace();
        let id: u64 = parse_field(&cam_path, line_no, it.next(), "camera id")?;
        let model: String = parse_field(&cam_path, line_no, it.next(), "camera model")?;
        if model != "PINHOLE" {
            return Err(Error::parse(
                &cam_path,
                format!("line {line_no}: unsupported camera model `{model}` (only PINHOLE)"),
            ));
        }
        let width: usize = parse_field(&cam_path, line_no, it.next(), "width")?;
        let height: usize = parse_field(&cam_path, line_no, it.next(), "height")?;
        let fx: f64 = parse_field(&cam_path, line_no, it.next(), "fx")?;
        let fy: f64 = parse_field(&cam_path, line_no, it.next(), "fy")?;
        let cx: f64 = parse_field(&cam_path, line_no, it.next(), "cx")?;
        let cy: f64 = parse_field(&cam_path, line_no, it.next(), "cy")?;
        if it.next().is_some() {
            return Err(Error::parse(
                &cam_path,
                format!("line {line_no}: trailing fields after cy"),
            ));
        }
        let cam = CameraIntrinsics::new(width, height, fx, fy, cx, cy).map_err(|e| {
            Error::parse(&cam_path, format!("line {line_no}: {e}"))
        })?;
        if cameras.insert(id, cam).is_some() {
            return Err(Error::parse(
                &cam_path,
                format!("line {line_no}: duplicate camera id {id}"),
            ));
        }
    }
    if cameras.is_empty() {
        return Err(Error::parse(&cam_path, "no cameras defined".to_string()));
    }

    let mut views: BTreeMap<u64, ViewPose> = BTreeMap::new();
    for (line_no, line) in data_lines(&img_text) {
        let mut it = line.split_whitespace();
        let id: u64 = parse_field(&img_path, line_no, it.next(), "image id")?;
        let qw: f64 = parse_field(&img_path, line_no, it.next(), "qw")?;
        let qx: f64 = parse_field(&img_path, line_no, it.next(), "qx")?;
        let qy: f64 = parse_field(&img_path, line_no, it.next(), "qy")?;
        let qz: f64 = parse_field(&img_path, line_no, it.next(), "qz")?;
        let tx: f64 = parse_field(&img_path, line_no, it.next(), "tx")?;
        let ty: f64 = parse_field(&img_path, line_no, it.next(), "ty")?;
        let tz: f64 = parse_field(&img_path, line_no, it.next(), "tz")?;
        let cam_id: u64 = parse_field(&img_path, line_no, it.next(), "camera id")?;
        let name: String = parse_field(&img_path, line_no, it.next(), "image name")?;
        if it.next().is_some() {
            return Err(Error::parse(
                &img_path,
                format!("line {line_no}: trailing fields after image name"),
            ));
        }

        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::parse(
                &img_path,
                format!(
                    "line {line_no}: quaternion norm {norm:.9} deviates from 1 by more than {QUAT_NORM_TOL:e}"
                ),
            ));
        }
        let camera = cameras.get(&cam_id).ok_or_else(|| {
            Error::parse(
                &img_path,
                format!("line {line_no}: unknown camera id {cam_id}"),
            )
        })?;
        let pose = Pose::from_quaternion(qw, qx, qy, qz, Vector3::new(tx, ty, tz))
            .map_err(|e| Error::parse(&img_path, format!("line {line_no}: {e}")))?;
        let view = ViewPose {
            camera: camera.clone(),
            pose,
            name,
        };
        if views.insert(id, view).is_some() {
            return Err(Error::parse(
                &img_path,
                format!("line {line_no}: duplicate image id {id}"),
            ));
        }
    }
    if views.is_empty() {
        return Err(Error::parse(&img_path, "no images defined".to_string()));
    }

    Ok(views.into_values().collect())
}

/// Writes `cameras.txt` + `images.txt` into `dir`. Each view gets its own
/// camera entry with matching ids, numbered from 1 in input order.
pub fn write_poses(dir: &Path, views: &[ViewPose]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::InvalidInput("cannot write an empty pose set".into()));
    }
    std::fs::create_dir_all(dir)?;

    let mut cam_out = Vec::new();
    writeln!(cam_out, "# CAM_ID MODEL WIDTH HEIGHT fx fy cx cy")?;
    for (i, view) in views.iter().enumerate() {
        let c = &view.camera;
        writeln!(
            cam_out,
            "{} PINHOLE {} {} {} {} {} {}",
            i + 1,
            c.width,
            c.height,
            fmt_f64(c.fx),
            fmt_f64(c.fy),
            fmt_f64(c.cx),
            fmt_f64(c.cy),
        )?;
    }
    std::fs::write(dir.join("cameras.txt"), cam_out)?;

    let mut img_out = Vec::new();
    writeln!(img_out, "# IMG_ID qw qx qy qz tx ty tz CAM_ID NAME")?;
    for (i, view) in views.iter().enumerate() {
        let [qw, qx, qy, qz] = view.pose.quaternion();
        let t = view.pose.translation();
        writeln!(
            img_out,
            "{} {} {} {} {} {} {} {} {} {}",
            i + 1,
            fmt_f64(qw),
            fmt_f64(qx),
            fmt_f64(qy),
            fmt_f64(qz),
            fmt_f64(t.x),
            fmt_f64(t.y),
            fmt_f64(t.z),
            i + 1,
            view.name,
        )?;
    }
    std::fs::write(dir.join("images.txt"), img_out)?;
    Ok(())
}

/// Shortest decimal representation that round-trips through f64 parsing.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use approx::assert_relative_eq;

    fn sample_views() -> Vec<ViewPose> {
        (0..3)
            .map(|i| {
                let angle = i as f64 * 2.1;
                let eye = Vector3::new(2.0 * angle.cos(), 2.0 * angle.sin(), 0.7);
                ViewPose {
                    camera: CameraIntrinsics::centered(64, 48, 70.0).unwrap(),
                    pose: look_at(&eye, &Vector3::zeros(), &Vector3::z()).unwrap(),
                    name: format!("view_{i:03}.png"),
                }
            })
            .collect()
    }

    #[test]
    fn roundtrip_preserves_poses() {
        let dir = tempdir();
        let views = sample_views();
        write_poses(&dir, &views).unwrap();
        let back = read_poses(&dir).unwrap();
        assert_eq!(back.len(), views.len());
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.camera, b.camera);
            assert_relative_eq!(a.pose.rotation(), b.pose.rotation(), epsilon = 1e-9);
            assert_relative_eq!(a.pose.translation(), b.pose.translation(), epsilon = 1e-9);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn parses_reference_lines() {
        let dir = tempdir();
        std::fs::write(
            dir.join("cameras.txt"),
            "# comment\n\n1 PINHOLE 100 100 100.0 100.0 50.0 50.0\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("images.txt"),
            "# comment\n1 1.0 0.0 0.0 0.0 0.25 -0.5 2.0 1 foo.png\n",
        )
        .unwrap();
        let views = read_poses(&dir).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].name, "foo.png");
        assert_eq!(views[0].camera.width, 100);
        // Identity quaternion: rotation is the identity.
        assert_relative_eq!(
            *views[0].pose.rotation(),
            nalgebra::Matrix3::identity(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            *views[0].pose.translation(),
            Vector3::new(0.25, -0.5, 2.0),
            epsilon = 1e-12
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_bad_records() {
        let dir = tempdir();
        // Unsupported model.
        std::fs::write(dir.join("cameras.txt"), "1 OPENCV 10 10 5 5 5 5 0 0 0 0\n").unwrap();
        std::fs::write(dir.join("images.txt"), "1 1 0 0 0 0 0 0 1 a.png\n").unwrap();
        assert!(matches!(read_poses(&dir), Err(Error::Parse { .. })));

        // Non-unit quaternion.
        std::fs::write(dir.join("cameras.txt"), "1 PINHOLE 10 10 5.0 5.0 5.0 5.0\n").unwrap();
        std::fs::write(dir.join("images.txt"), "1 1.1 0 0 0 0 0 0 1 a.png\n").unwrap();
        let err = read_poses(&dir).unwrap_err();
        assert!(err.to_string().contains("quaternion norm"), "{err}");

        // Unknown camera reference.
        std::fs::write(dir.join("images.txt"), "1 1 0 0 0 0 0 0 9 a.png\n").unwrap();
        let err = read_poses(&dir).unwrap_err();
        assert!(err.to_string().contains("unknown camera id"), "{err}");

        // Truncated image line.
        std::fs::write(dir.join("images.txt"), "1 1 0 0 0 0 0\n").unwrap();
        let err = read_poses(&dir).unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "radfield-colmap-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
