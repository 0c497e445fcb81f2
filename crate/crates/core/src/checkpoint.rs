//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "CHFGCKPT"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of JSON (see `Header`)
//! tensors   f64 values of every listed tensor, in header order
//! sha256    32 bytes over everything above
//! ```
//!
//! Tensor groups are written in a fixed order: generator, discriminator,
//! Adam first moments, Adam second moments, then the anchor generator and
//! discriminator when fine-tuning. Saving a loaded checkpoint reproduces
//! the original bytes.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::NormalizationStats;
use crate::diffnet::{ArchConfig, ParamStore, Tensor, TensorInfo};
use crate::error::CheckpointError;
use crate::tgan::{Discriminator, Generator};
use crate::train::{AdamState, Anchor, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CHFGCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Pretrained,
    Finetuned {
        /// Hex SHA-256 of the pretrained checkpoint the run started from.
        anchor_hash: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub provenance: Provenance,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    config: TrainConfig,
    provenance: Provenance,
    norm: NormalizationStats,
    epoch: u64,
    d_steps: u64,
    g_steps: u64,
    adam_t: u64,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    groups: Vec<Group>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Group {
    name: String,
    tensors: Vec<TensorInfo>,
}

const GROUPS: [&str; 6] = [
    "generator",
    "discriminator",
    "adam_m",
    "adam_v",
    "anchor_generator",
    "anchor_discriminator",
];

impl Checkpoint {
    pub fn new(config: TrainConfig, provenance: Provenance, state: TrainState) -> Self {
        Checkpoint {
            config,
            provenance,
            state,
        }
    }

    pub fn is_pretrained(&self) -> bool {
        self.provenance == Provenance::Pretrained
    }

    fn stores(&self) -> Vec<&ParamStore> {
        let s = &self.state;
        let mut v = vec![&s.generator.params, &s.discriminator.params, &s.adam.m, &s.adam.v];
        if let Some(a) = &s.anchor {
            v.push(&a.generator);
            v.push(&a.discriminator);
        }
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let stores = self.stores();
        let header = Header {
            arch: s.generator.arch.clone(),
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            norm: s.norm.clone(),
            epoch: s.epoch,
            d_steps: s.d_steps,
            g_steps: s.g_steps,
            adam_t: s.adam.t,
            rng: s.rng.clone(),
            history: s.history.clone(),
            groups: stores
                .iter()
                .zip(GROUPS)
                .map(|(p, name)| Group {
                    name: name.to_string(),
                    tensors: p.layout(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let values: usize = stores.iter().map(|p| p.num_values()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * values + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in stores {
            for (_, t) in p.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Hex SHA-256 of the serialized checkpoint (the trailer).
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - HASH_LEN..])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hdr_end = usize::try_from(hdr_len)
            .ok()
            .and_then(|l| l.checked_add(PREAMBLE))
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < hdr_end {
            return Err(CheckpointError::Truncated);
        }
        let hash_ok = || {
            bytes.len() >= PREAMBLE + HASH_LEN && {
                let split = bytes.len() - HASH_LEN;
                Sha256::digest(&bytes[..split])[..] == bytes[split..]
            }
        };
        let header: Header = match serde_json::from_slice(&bytes[PREAMBLE..hdr_end]) {
            Ok(h) => h,
            Err(e) if hash_ok() => return Err(CheckpointError::Malformed(e.to_string())),
            Err(_) => return Err(CheckpointError::HashMismatch),
        };
        let values: usize = header
            .groups
            .iter()
            .flat_map(|g| &g.tensors)
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let expected = hdr_end + 8 * values + HASH_LEN;
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > expected {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - expected
            )));
        }
        if !hash_ok() {
            return Err(CheckpointError::HashMismatch);
        }
        Self::assemble(header, &bytes[hdr_end..expected - HASH_LEN])
    }

    fn assemble(header: Header, mut data: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: String| CheckpointError::Malformed(m);
        let names: Vec<&str> = header.groups.iter().map(|g| g.name.as_str()).collect();
        if names != GROUPS[..4] && names != GROUPS[..] {
            return Err(malformed(format!("unexpected tensor groups {names:?}")));
        }
        let mut stores = Vec::with_capacity(header.groups.len());
        for group in &header.groups {
            let mut store = ParamStore::new();
            for info in &group.tensors {
                let n: usize = info.shape.iter().product();
                let (head, rest) = data.split_at(8 * n);
                data = rest;
                let values = head
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(info.shape, values).map_err(|e| malformed(e.to_string()))?;
                store
                    .insert(info.name.clone(), t)
                    .map_err(|e| malformed(e.to_string()))?;
            }
            stores.push(store);
        }
        let (arch, config) = (header.arch, header.config);
        arch.validate().map_err(|e| malformed(e.to_string()))?;
        let (expect_g, expect_d) = crate::tgan::init_model(&arch, 0).map_err(|e| malformed(e.to_string()))?;
        let mut it = stores.into_iter();
        let mut next = || it.next().expect("group count checked");
        let (gp, dp, m, v) = (next(), next(), next(), next());
        let check = |a: &ParamStore, b: &ParamStore, what: &str| {
            a.check_structure(b).map_err(|e| malformed(format!("{what}: {e}")))
        };
        check(&expect_g.params, &gp, "generator")?;
        check(&expect_d.params, &dp, "discriminator")?;
        check(&dp, &m, "adam_m")?;
        check(&dp, &v, "adam_v")?;
        let anchor = if names.len() == GROUPS.len() {
            let (ag, ad) = (next(), next());
            check(&gp, &ag, "anchor_generator")?;
            check(&dp, &ad, "anchor_discriminator")?;
            Some(Anchor {
                generator: ag,
                discriminator: ad,
            })
        } else {
            None
        };
        let finetuned = matches!(header.provenance, Provenance::Finetuned { .. });
        if finetuned != anchor.is_some() {
            return Err(malformed(
                "anchor weights must be present exactly when fine-tuned".into(),
            ));
        }
        header.norm.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(Checkpoint {
            config,
            provenance: header.provenance,
            state: TrainState {
                generator: Generator {
                    arch: arch.clone(),
                    params: gp,
                },
                discriminator: Discriminator { arch, params: dp },
                adam: AdamState { m, v, t: header.adam_t },
                norm: header.norm,
                epoch: header.epoch,
                d_steps: header.d_steps,
                g_steps: header.g_steps,
                history: header.history,
                rng: header.rng,
                anchor,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
