use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, SeqModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CRLSUMCK";
const DIGEST_LEN: usize = 32;

/// Model parameters plus the training state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub step: u64,
    /// ChaCha seed and word position of the training RNG.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn from_model(model: &SeqModel, step: u64, rng_seed: [u8; 32], rng_word_pos: u128) -> Self {
        Checkpoint {
            config: *model.config(),
            params: model.params().to_vec(),
            step,
            rng_seed,
            rng_word_pos,
        }
    }

    /// Rebuilds the model, refusing a checkpoint whose config differs from `expected`.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<SeqModel> {
        if let Some(exp) = expected {
            if exp != &self.config {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint has {:?}, expected {:?}",
                    self.config, exp
                )));
            }
        }
        SeqModel::from_params(self.config, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.config.hidden_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.config.context_window as u64).to_le_bytes());
        out.extend_from_slice(&self.config.temperature.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config = ModelConfig {
            vocab_size: r.u64()? as usize,
            hidden_size: r.u64()? as usize,
            context_window: r.u64()? as usize,
            temperature: f64::from_le_bytes(r.array()?),
        };
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.array()?;
        let rng_word_pos = u128::from_le_bytes(r.array()?);
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(f64::from_le_bytes(r.array()?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            step,
            rng_seed,
            rng_word_pos,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 9,
            hidden_size: 4,
            context_window: 6,
            temperature: 1.0,
        };
        let m = SeqModel::new(cfg, 3).unwrap();
        Checkpoint::from_model(&m, 17, [5; 32], 99)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let bits: Vec<u64> = back.params.iter().map(|p| p.to_bits()).collect();
        let orig: Vec<u64> = ck.params.iter().map(|p| p.to_bits()).collect();
        assert_eq!(bits, orig);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Checksum)
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checksum)));
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_mismatch_is_reported() {
        let ck = sample();
        let other = ModelConfig {
            vocab_size: 12,
            ..ck.config
        };
        assert!(matches!(ck.to_model(Some(&other)), Err(Error::ConfigMismatch(_))));
        assert!(ck.to_model(Some(&ck.config)).is_ok());
    }
}
