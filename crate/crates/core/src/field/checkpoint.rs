//! Versioned binary checkpoints for [`FieldParams`].
//!
//! Layout (all integers little-endian u32, all parameters little-endian f32):
//!
//! ```text
//! magic "RFCKPT01" (8 bytes)
//! levels_pos levels_dir trunk_depth trunk_width skip_layer color_hidden
//! for each stage (coarse, fine):
//!     layer_count
//!     for each layer (canonical order): rows cols w[rows*cols] b[rows]
//! crc32 of everything above
//! ```
//!
//! Parameters are quantized to f32 on save and widened back to f64 on load,
//! so save -> load -> save is byte-identical.

use std::path::Path;

use crate::config::crc32;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, Linear, Mlp};

const MAGIC: &[u8; 8] = b"RFCKPT01";

pub fn save_checkpoint(path: &Path, params: &FieldParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = params.config();
    for v in [
        cfg.levels_pos,
        cfg.levels_dir,
        cfg.trunk_depth,
        cfg.trunk_width,
        cfg.skip_layer,
        cfg.color_hidden,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for mlp in [&params.coarse, &params.fine] {
        let layers = mlp.layers();
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for layer in layers {
            out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
            for &w in &layer.w {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
            for &b in &layer.b {
                out.extend_from_slice(&(b as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<FieldParams> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short",
            path.display()
        )));
    }

    // Verify the trailing checksum before interpreting anything else.
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32(body);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})",
            path.display()
        )));
    }

    let mut r = Reader {
        bytes: body,
        pos: 0,
        path,
    };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }

    let cfg = FieldConfig {
        levels_pos: r.u32()? as usize,
        levels_dir: r.u32()? as usize,
        trunk_depth: r.u32()? as usize,
        trunk_width: r.u32()? as usize,
        skip_layer: r.u32()? as usize,
        color_hidden: r.u32()? as usize,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;

    let read_mlp = |r: &mut Reader| -> Result<Mlp> {
        // Build a template to know the expected shapes, then fill it.
        let mut template = {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            Mlp::init(cfg, &mut rng)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        };
        let expected_layers = template.layers().len();
        let count = r.u32()? as usize;
        if count != expected_layers {
            return Err(Error::Checkpoint(format!(
                "{}: {count} layers, expected {expected_layers}",
                path.display()
            )));
        }
        for layer in template.layers_mut() {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows != layer.rows || cols != layer.cols {
                return Err(Error::Checkpoint(format!(
                    "{}: layer shape {rows}x{cols} does not match config ({}x{})",
                    path.display(),
                    layer.rows,
                    layer.cols
                )));
            }
            let filled = Linear {
                rows,
                cols,
                w: (0..rows * cols)
                    .map(|_| r.f32().map(f64::from))
                    .collect::<Result<_>>()?,
                b: (0..rows).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?,
            };
            *layer = filled;
        }
        Ok(template)
    };

    let coarse = read_mlp(&mut r)?;
    let fine = read_mlp(&mut r)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            body.len() - r.pos
        )));
    }
    Ok(FieldParams { coarse, fine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!(
            "radfield-ckpt-{tag}-{}-{:?}.bin",
            std::process::id(),
            std::thread::current().id()
        ))
    }

    fn small_params(seed: u64) -> FieldParams {
        let cfg = FieldConfig {
            levels_pos: 2,
            levels_dir: 1,
            trunk_depth: 2,
            trunk_width: 6,
            skip_layer: 1,
            color_hidden: 4,
        };
        FieldParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let params = small_params(1);
        let p1 = temp_path("rt1");
        let p2 = temp_path("rt2");
        save_checkpoint(&p1, &params).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.config(), params.config());
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // Loaded values equal the f32-quantized originals.
        for i in (0..params.param_count()).step_by(17) {
            assert_eq!(loaded.param(i), params.param(i) as f32 as f64);
        }
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let params = small_params(2);
        let path = temp_path("corrupt");
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = temp_path("magic");
        let mut bytes = b"NOTMAGIC".to_vec();
        bytes.extend_from_slice(&[0u8; 24]);
        let crc = crate::config::crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_is_detected() {
        let params = small_params(3);
        let path = temp_path("trunc");
        save_checkpoint(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
