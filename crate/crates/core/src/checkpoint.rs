//! Binary checkpoint: parameters plus vocabulary.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SANCKPT1" version
//! { name_len name rank dims… f64… }*   sorted by name
//! 0                                    end of records
//! vocabulary as "token\tid" lines
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::model::SanModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"SANCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn of(model: &SanModel) -> Self {
        Checkpoint {
            params: model.params.clone(),
            vocab: model.vocab.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(self.vocab.to_text().as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(SanError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SanError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut params = ParamStore::new();
        loop {
            let len = r.u32()? as usize;
            if len == 0 {
                break;
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| SanError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| SanError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| SanError::Checkpoint(format!("{name}: {e}")))?;
            if params.contains(&name) {
                return Err(SanError::Checkpoint(format!("duplicate parameter {name:?}")));
            }
            params.insert(&name, t);
        }
        let text = std::str::from_utf8(&bytes[r.pos..])
            .map_err(|_| SanError::Checkpoint("vocabulary block is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(text).map_err(|e| SanError::Checkpoint(e.to_string()))?;
        Ok(Checkpoint { params, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SanError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| SanError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Builds a model, checking every parameter against `config`.
    pub fn into_model(self, config: ModelConfig) -> Result<SanModel> {
        config.validate()?;
        SanModel::initial_params(&config, self.vocab.len(), 0).check_compatible(&self.params)?;
        Ok(SanModel {
            config,
            vocab: self.vocab,
            params: self.params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SanError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SanModel {
        let vocab = Vocabulary::build(["a red circle", "the blue square"], 1);
        SanModel::new(ModelConfig::tiny(), vocab, 9).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let ck = Checkpoint::of(&model());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::of(&model()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(SanError::Checkpoint(_))));
    }

    #[test]
    fn dimension_mismatch_is_checkpoint_error() {
        let ck = Checkpoint::of(&model());
        let cfg = ModelConfig {
            joint_dim: 7,
            ..ModelConfig::tiny()
        };
        assert!(matches!(ck.into_model(cfg), Err(SanError::Checkpoint(_))));
    }
}
