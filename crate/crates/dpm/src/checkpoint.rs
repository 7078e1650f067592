//! Model checkpoint files.
//!
//! Layout (little-endian):
//!
//! | field                                    | encoding                 |
//! |------------------------------------------|--------------------------|
//! | magic `PDIFMDL1`                         | 8 bytes                  |
//! | width, depth, n_embed                    | `u32` ×3                 |
//! | T, schedule kind, beta_start, beta_end   | `u32`, `u8`, `f64` ×2    |
//! | mri_min, mri_max, pet_scale              | `f64` ×3                 |
//! | epochs, batch size                       | `u32` ×2                 |
//! | learning rate, EMA decay, λ              | `f64` ×3                 |
//! | seed                                     | `u64`                    |
//! | condition recon identity                 | `u32` length + UTF-8     |
//! | parameter count n                        | `u32`                    |
//! | parameters, then EMA parameters          | `f64` ×2n                |

use std::path::Path;

use petdiff_core::io::{write_atomic, Reader};
use petdiff_core::{Error, Result};

use crate::net::{Architecture, ConvNet};
use crate::norm::Normalization;
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::train::TrainConfig;

pub const MODEL_MAGIC: &[u8; 8] = b"PDIFMDL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub schedule: NoiseSchedule,
    pub normalization: Normalization,
    pub train: TrainConfig,
    /// Identifies the reconstruction that produced the training conditions.
    pub condition_recon: String,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
}

impl Checkpoint {
    /// Network with the averaged parameters.
    pub fn ema_net(&self) -> Result<ConvNet> {
        ConvNet::from_params(self.arch, self.ema.clone())
    }

    pub fn net(&self) -> Result<ConvNet> {
        ConvNet::from_params(self.arch, self.params.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(128 + 16 * self.params.len());
        b.extend_from_slice(MODEL_MAGIC);
        for v in [self.arch.width, self.arch.depth, self.arch.n_embed, self.schedule.t_max()] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.push(self.schedule.kind.tag());
        let n = &self.normalization;
        for v in [self.schedule.beta_start, self.schedule.beta_end, n.mri_min, n.mri_max, n.pet_scale] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.train.n_epochs as u32).to_le_bytes());
        b.extend_from_slice(&(self.train.batch_size as u32).to_le_bytes());
        for v in [self.train.learning_rate, self.train.ema_decay, self.train.vlb_weight] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.train.seed.to_le_bytes());
        b.extend_from_slice(&(self.condition_recon.len() as u32).to_le_bytes());
        b.extend_from_slice(self.condition_recon.as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in self.params.iter().chain(&self.ema) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(MODEL_MAGIC)?;
        let arch = Architecture {
            width: r.u32()? as usize,
            depth: r.u32()? as usize,
            n_embed: r.u32()? as usize,
        };
        let t_max = r.u32()? as usize;
        let tag = r.u8()?;
        let kind = ScheduleKind::from_tag(tag)
            .ok_or_else(|| Error::Invalid(format!("{}: unknown schedule kind tag {tag}", path.display())))?;
        let (beta_start, beta_end) = (r.f64()?, r.f64()?);
        let normalization = Normalization {
            mri_min: r.f64()?,
            mri_max: r.f64()?,
            pet_scale: r.f64()?,
        };
        let train = TrainConfig {
            n_epochs: r.u32()? as usize,
            batch_size: r.u32()? as usize,
            learning_rate: r.f64()?,
            ema_decay: r.f64()?,
            vlb_weight: r.f64()?,
            seed: u64::from_le_bytes(r.take(8)?.try_into().unwrap()),
        };
        let len = r.u32()? as usize;
        let condition_recon = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Invalid(format!("{}: condition identity is not UTF-8", path.display())))?;
        let n = r.u32()? as usize;
        arch.validate()?;
        ensure!(
            n == arch.n_params(),
            Shape,
            "{}: {n} parameters stored, architecture {arch:?} needs {}",
            path.display(),
            arch.n_params()
        );
        let mut all = r.f64_payload(2 * n)?;
        let ema = all.split_off(n);
        normalization.validate()?;
        Ok(Checkpoint {
            arch,
            schedule: make_schedule(t_max, kind, beta_start, beta_end)?,
            normalization,
            train,
            condition_recon,
            params: all,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let arch = Architecture {
            width: 3,
            depth: 2,
            n_embed: 2,
        };
        let net = ConvNet::new(arch, 4).unwrap();
        Checkpoint {
            arch,
            schedule: make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap(),
            normalization: Normalization {
                mri_min: 0.0,
                mri_max: 0.95,
                pet_scale: 3.5,
            },
            train: TrainConfig {
                seed: u64::MAX - 3,
                ..Default::default()
            },
            condition_recon: "osem:8x4:abc".into(),
            params: net.params().to_vec(),
            ema: net.params().iter().map(|p| p * 0.5).collect(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pdm");
        let c = checkpoint();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.ema_net().unwrap().params(), &c.ema[..]);
    }

    #[test]
    fn corrupt_files_fail() {
        let c = checkpoint();
        let bytes = c.encode();
        let p = Path::new("m");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::BadMagic { .. })));
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::decode(&extra, p).is_err());
    }
}
