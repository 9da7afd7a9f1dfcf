//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"CCDLMWTS"
//! 8       4     format version (u32, currently 1)
//! 12      4     d_model
//! 16      4     n_layers
//! 20      4     n_heads
//! 24      4     d_ff
//! 28      4     max_positions
//! 32      4     vocabulary size
//! 36      4     mask id
//! 40      4     eos id
//! 44      4     tensor count
//! 48      ...   per tensor: rows (u32), cols (u32), rows*cols f64 values, row-major
//! ```
//!
//! Tensors appear in the model's declaration order; names are implied by it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::transformer::{parameter_shapes, DiffusionModel, ModelConfig};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::neural::{Matrix, ParamStore};

pub const MAGIC: &[u8; 8] = b"CCDLMWTS";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(model: &DiffusionModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let header = [
        FORMAT_VERSION,
        cfg.d_model as u32,
        cfg.n_layers as u32,
        cfg.n_heads as u32,
        cfg.d_ff as u32,
        cfg.max_positions as u32,
        cfg.vocab.size() as u32,
        cfg.vocab.mask_id(),
        cfg.vocab.eos_id(),
        model.params().len() as u32,
    ];
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.params().iter() {
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(model: &DiffusionModel, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_weights(model))?;
    file.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WeightFormat("file truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<DiffusionModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::WeightFormat("bad magic; not a weight file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [d_model, n_layers, n_heads, d_ff, max_positions, vocab_size, mask_id, eos_id, count] =
        dims;
    let vocab = Vocabulary::new(vocab_size, mask_id as u32, eos_id as u32)
        .map_err(|e| Error::WeightFormat(format!("header vocabulary: {e}")))?;
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_positions,
        vocab,
    };
    config
        .validate()
        .map_err(|e| Error::WeightFormat(format!("header config: {e}")))?;
    let shapes = parameter_shapes(&config);
    if count != shapes.len() {
        return Err(Error::WeightFormat(format!(
            "{count} tensors in file, config implies {}",
            shapes.len()
        )));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in shapes {
        let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
        if (fr, fc) != (rows, cols) {
            return Err(Error::WeightFormat(format!(
                "tensor {name} is {fr}x{fc}, expected {rows}x{cols}"
            )));
        }
        let data = (0..rows * cols)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::WeightFormat(format!("non-finite value in {name}")));
        }
        store.insert(name, Matrix::from_vec(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(
            "trailing bytes after last tensor".into(),
        ));
    }
    DiffusionModel::from_params(config, store)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_weights(&bytes)
}

/// Loads weights and rejects files whose vocabulary differs from `expected`.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &Vocabulary) -> Result<DiffusionModel> {
    let model = load_weights(path)?;
    if model.vocab() != expected {
        return Err(Error::WeightFormat(format!(
            "file vocabulary (size {}, mask {}, eos {}) does not match expected (size {}, mask {}, eos {})",
            model.vocab().size(),
            model.vocab().mask_id(),
            model.vocab().eos_id(),
            expected.size(),
            expected.mask_id(),
            expected.eos_id()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DiffusionModel {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_positions: 12,
            vocab: Vocabulary::synthetic(),
        };
        DiffusionModel::new(cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        save_weights(&m, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        let tokens = [3, 20, 8, 0, 0, 0];
        assert_eq!(
            m.forward_tokens(&tokens).unwrap(),
            loaded.forward_tokens(&tokens).unwrap()
        );
        assert_eq!(encode_weights(&loaded), encode_weights(&m));
    }

    #[test]
    fn corrupted_magic_fails_cleanly() {
        let mut bytes = encode_weights(&model());
        bytes[0] = b'X';
        assert!(matches!(
            decode_weights(&bytes),
            Err(Error::WeightFormat(_))
        ));
        assert!(matches!(
            decode_weights(&bytes[..20]),
            Err(Error::WeightFormat(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode_weights(&model());
        bytes[8] = 9;
        assert!(matches!(
            decode_weights(&bytes),
            Err(Error::WeightFormat(_))
        ));
    }

    #[test]
    fn different_vocabulary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_weights(&model(), &path).unwrap();
        let other = Vocabulary::new(32, 0, 1).unwrap();
        assert!(matches!(
            load_weights_for(&path, &other),
            Err(Error::WeightFormat(_))
        ));
        assert!(load_weights_for(&path, &Vocabulary::synthetic()).is_ok());
    }
}
