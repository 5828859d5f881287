//! Binary model format.
//!
//! ```text
//! "NLSFCNN1"
//! per layer: out, in, kh, kw            (u32 LE each)
//!            out*in*kh*kw weights       (f32 LE, out-major)
//!            out biases                 (f32 LE)
//! seed (u64 LE), steps (u32 LE), density (f32 LE)
//! ```

use std::path::Path;

use super::{Architecture, CnnError, CnnModel, ConvLayer, ModelMeta, Result};
use crate::image::write_atomic;

pub const MODEL_MAGIC: &[u8; 8] = b"NLSFCNN1";

pub fn encode_model(model: &CnnModel) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    for l in &model.layers {
        for d in [l.out_channels, l.in_channels, l.kernel, l.kernel] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in l.weights.iter().chain(&l.biases) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    out.extend_from_slice(&model.meta.steps.to_le_bytes());
    out.extend_from_slice(&model.meta.density.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CnnError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or(CnnError::Truncated {
            expected: usize::MAX,
            found: self.bytes.len(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

/// Parses a model; when `expected` is given the layer shapes must match it.
pub fn decode_model(bytes: &[u8], expected: Option<&Architecture>) -> Result<CnnModel> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(CnnError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MODEL_MAGIC.len(),
    };
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        let (out, inp, kh, kw) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if kh != kw {
            return Err(CnnError::Architecture(format!(
                "layer {} kernel {kh}x{kw} is not square",
                i + 1
            )));
        }
        let (out, inp, k) = (out as usize, inp as usize, kh as usize);
        let n = out
            .checked_mul(inp)
            .and_then(|v| v.checked_mul(k * k))
            .ok_or_else(|| CnnError::Architecture(format!("layer {} too large", i + 1)))?;
        let weights = r.f32s(n)?;
        let biases = r.f32s(out)?;
        layers.push(ConvLayer::new(out, inp, k, weights, biases)?);
    }
    let seed = r.u64()?;
    let steps = r.u32()?;
    let density = f32::from_bits(r.u32()?);
    let layers: [ConvLayer; 3] = layers.try_into().expect("three layers");
    let model = CnnModel::from_layers(
        layers,
        ModelMeta {
            density,
            seed,
            steps,
        },
    )?;
    if let Some(arch) = expected {
        let found = model.architecture()?;
        if &found != arch {
            return Err(CnnError::Architecture(format!(
                "file holds {found:?}, expected {arch:?}"
            )));
        }
    }
    Ok(model)
}

pub fn save_model(model: &CnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_model(model)).map_err(|source| CnnError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a model with the standard 64/32 channel, 9/1/5 kernel layout.
pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CnnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_model(&bytes, Some(&Architecture::STANDARD))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> CnnModel {
        let mut m = CnnModel::init(Architecture::STANDARD, 17, 0.01);
        m.meta = ModelMeta {
            density: 0.5,
            seed: 17,
            steps: 1234,
        };
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = sample_model();
        save_model(&m, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.meta, m.meta);
        save_model(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn layout_sizes() {
        let bytes = encode_model(&sample_model());
        let params = sample_model().param_count();
        assert_eq!(bytes.len(), 8 + 3 * 16 + 4 * params + 16);
        assert_eq!(&bytes[..8], b"NLSFCNN1");
        assert_eq!(&bytes[8..12], &64u32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_model(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(
            decode_model(&bytes, None),
            Err(CnnError::BadMagic)
        ));
    }

    #[test]
    fn truncation() {
        let bytes = encode_model(&sample_model());
        for cut in [9, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_model(&bytes[..cut], None),
                Err(CnnError::Truncated { .. })
            ));
        }
    }

    #[test]
    fn architecture_mismatch() {
        let small = CnnModel::init(
            Architecture {
                n1: 2,
                n2: 2,
                f1: 3,
                f2: 1,
                f3: 3,
            },
            1,
            0.1,
        );
        let bytes = encode_model(&small);
        assert!(decode_model(&bytes, None).is_ok());
        assert!(matches!(
            decode_model(&bytes, Some(&Architecture::STANDARD)),
            Err(CnnError::Architecture(_))
        ));
    }
}
