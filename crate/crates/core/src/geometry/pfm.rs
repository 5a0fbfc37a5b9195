//! PFM (portable float map) reader/writer.
//!
//! Layout: a text header of three whitespace-separated records — `Pf`
//! (1 channel) or `PF` (3 channels), then `width height`, then a scale whose
//! sign encodes endianness (negative = little-endian) — followed by raw f32
//! scanlines stored bottom-to-top. We always write `-1.0` (little-endian,
//! unit scale) and preserve NaN bit patterns, which encode invalid pixels.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;

pub fn write_pfm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let magic = match image.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidInput(format!(
                "PFM supports 1 or 3 channels, image has {c}"
            )))
        }
    };
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = Vec::with_capacity(32 + w * h * c * 4);
    write!(out, "{magic}\n{w} {h}\n-1.0\n")?;
    // PFM scanlines run bottom-to-top.
    for v in (0..h).rev() {
        for u in 0..w {
            for &x in image.pixel(u, v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated header".to_string()));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::parse(path, "non-UTF8 header".to_string()))?
            .to_string();
        // Consume exactly one whitespace byte after the token; the header is
        // terminated by a single whitespace before the binary payload.
        if pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(tok)
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1usize,
        "PF" => 3usize,
        other => {
            return Err(Error::parse(
                path,
                format!("bad magic `{other}` (expected Pf or PF)"),
            ))
        }
    };
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad width".to_string()))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad height".to_string()))?;
    let scale: f64 = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad scale".to_string()))?;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, format!("empty image {width}x{height}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(path, format!("bad scale {scale}")));
    }
    let little_endian = scale < 0.0;

    let expected = width * height * channels * 4;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!(
                "payload is {} bytes, expected {expected} for {width}x{height}x{channels}",
                payload.len()
            ),
        ));
    }

    let mut image = ImageBuffer::new(width, height, channels);
    let mut offset = 0usize;
    for v in (0..height).rev() {
        for u in 0..width {
            let px = image.pixel_mut(u, v);
            for x in px.iter_mut() {
                let raw: [u8; 4] = payload[offset..offset + 4].try_into().unwrap();
                *x = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                offset += 4;
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!(
            "radfield-pfm-{tag}-{}-{:?}.pfm",
            std::process::id(),
            std::thread::current().id()
        ))
    }

    #[test]
    fn roundtrip_is_bit_exact_including_nan() {
        let mut img = ImageBuffer::new(5, 4, 1);
        for v in 0..4 {
            for u in 0..5 {
                img.pixel_mut(u, v)[0] = (u as f32 + 10.0 * v as f32) * 0.125 - 1.0;
            }
        }
        img.invalidate(2, 1);
        let path = temp_path("gray");
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.height(), 4);
        assert_eq!(back.channels(), 1);
        for v in 0..4 {
            for u in 0..5 {
                let a = img.value(u, v);
                let b = back.value(u, v);
                assert_eq!(a.to_bits(), b.to_bits(), "pixel ({u},{v})");
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn roundtrip_three_channels() {
        let mut img = ImageBuffer::new(3, 2, 3);
        for (i, x) in img.data_mut().iter_mut().enumerate() {
            *x = i as f32 * 0.5 - 3.0;
        }
        let path = temp_path("rgb");
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn header_matches_convention() {
        let img = ImageBuffer::filled(2, 2, 1, 7.0);
        let path = temp_path("header");
        write_pfm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        // 12-byte header + 16 bytes of payload.
        assert_eq!(bytes.len(), 12 + 16);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn scanlines_are_bottom_to_top() {
        let mut img = ImageBuffer::new(1, 2, 1);
        img.pixel_mut(0, 0)[0] = 1.0; // top row
        img.pixel_mut(0, 1)[0] = 2.0; // bottom row
        let path = temp_path("rows");
        write_pfm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        // Bottom row first in the file.
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), 1.0);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn big_endian_scale_is_honored() {
        let path = temp_path("be");
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&3.5f32.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!(img.value(0, 0), 3.5);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_malformed_files() {
        let path = temp_path("bad");
        std::fs::write(&path, b"P5\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&path).is_err());
        // Payload size mismatch.
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }
}
