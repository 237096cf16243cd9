//! Binary checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "GUMMP"                      5 bytes
//! format version               u32
//! metadata length, metadata    u64, UTF-8 JSON
//! record count                 u64
//! per record:
//!   name length, name          u64, UTF-8
//!   rank, extents              u64, rank × u64
//!   values                     f64 × product(extents)
//! checksum                     u64: first 8 bytes of SHA-256 over all
//!                              preceding bytes
//! ```
//!
//! Parameters are stored under their own names and Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::GumMp;
use crate::numerics::{NdArray, SeededRng};
use crate::training::{Adam, Trainer};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 5] = b"GUMMP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub rng_state: u64,
    pub adam_step: u64,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub tensors: Vec<(String, NdArray)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
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
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Integrity("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "file has format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.len()?;
        let metadata: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Integrity("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, NdArray::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after records".into()));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Snapshot of a trainer, including optimizer moments and RNG state.
    pub fn from_trainer(trainer: &Trainer, init_seed: u64) -> Self {
        let model = &trainer.model;
        let mut tensors: Vec<(String, NdArray)> =
            model.store.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect();
        for (prefix, moments) in [("adam.m/", &trainer.adam.m), ("adam.v/", &trainer.adam.v)] {
            for ((name, _), t) in model.store.iter().zip(moments.iter()) {
                tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        Checkpoint {
            metadata: Metadata {
                config: ExperimentConfig {
                    model: model.config.clone(),
                    train: trainer.train.clone(),
                },
                epoch: trainer.epoch,
                rng_state: trainer.rng.state(),
                adam_step: trainer.adam.step,
                init_seed,
                vocab: model.vocab.tokens().to_vec(),
            },
            tensors,
        }
    }

    /// Parameters only, with no optimizer state.
    pub fn from_model(model: &GumMp, train: &crate::config::TrainConfig, init_seed: u64) -> Self {
        Checkpoint {
            metadata: Metadata {
                config: ExperimentConfig {
                    model: model.config.clone(),
                    train: train.clone(),
                },
                epoch: 0,
                rng_state: 0,
                adam_step: 0,
                init_seed,
                vocab: model.vocab.tokens().to_vec(),
            },
            tensors: model.store.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    fn split(&self) -> (Vec<(String, NdArray)>, Vec<(String, NdArray)>, Vec<(String, NdArray)>) {
        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix("adam.m/") {
                m.push((rest.to_owned(), t.clone()));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.push((rest.to_owned(), t.clone()));
            } else {
                params.push((name.clone(), t.clone()));
            }
        }
        (params, m, v)
    }

    /// Rebuilds the model, checking every tensor against the configured
    /// architecture.
    pub fn to_model(&self) -> Result<GumMp> {
        let vocab = Vocabulary::from_tokens(self.metadata.vocab.clone())
            .map_err(|e| Error::Version(format!("vocabulary: {e}")))?;
        let mut model = GumMp::new(self.metadata.config.model.clone(), vocab, self.metadata.init_seed)?;
        let (params, _, _) = self.split();
        model.store.load_from(&params)?;
        Ok(model)
    }

    /// Rebuilds the trainer; a checkpoint without moments resumes with a
    /// fresh optimizer.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let model = self.to_model()?;
        let mut trainer = Trainer::new(model, self.metadata.config.train.clone())?;
        let (_, m, v) = self.split();
        if !m.is_empty() || !v.is_empty() {
            let mut adam: Adam = trainer.adam.clone();
            let mut ms = trainer.model.store.clone();
            ms.load_from(&m)?;
            adam.m = ms.iter().map(|(_, t)| t.clone()).collect();
            ms.load_from(&v)?;
            adam.v = ms.iter().map(|(_, t)| t.clone()).collect();
            adam.step = self.metadata.adam_step;
            trainer.adam = adam;
        }
        trainer.epoch = self.metadata.epoch;
        trainer.rng = SeededRng::new(self.metadata.rng_state);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, TrainConfig};
    use crate::vocab::tokenize;

    fn trainer() -> Trainer {
        let vocab = Vocabulary::build(&[tokenize("a b c d e f")], 20).unwrap();
        let cfg = ModelConfig {
            embed_dim: 3,
            perspectives: 2,
            pam_width: 2,
            decoder_hidden: 4,
            max_passage_len: 5,
            ..ModelConfig::desk()
        };
        let mut t = Trainer::new(GumMp::new(cfg, vocab, 5).unwrap(), TrainConfig::default()).unwrap();
        t.adam.step = 3;
        t.adam.m[0].data_mut()[1] = 0.25;
        t.epoch = 2;
        t
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = trainer();
        let bytes = Checkpoint::from_trainer(&t, 5).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let t2 = back.to_trainer().unwrap();
        assert_eq!(t2.model.store, t.model.store);
        assert_eq!(t2.adam, t.adam);
        assert_eq!(t2.epoch, 2);
        assert_eq!(t2.rng, t.rng);
    }

    #[test]
    fn corruption_and_version_errors() {
        let bytes = Checkpoint::from_trainer(&trainer(), 5).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Integrity(_))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));

        let mut v2 = bytes[..bytes.len() - 8].to_vec();
        v2[5..9].copy_from_slice(&2u32.to_le_bytes());
        let sum = checksum(&v2);
        v2.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version(_))));
    }

    #[test]
    fn architecture_mismatch_is_version_error() {
        let t = trainer();
        let mut ck = Checkpoint::from_trainer(&t, 5);
        ck.metadata.config.model.pam_width = 7;
        assert!(matches!(ck.to_model(), Err(Error::Version(_))));
    }
}
