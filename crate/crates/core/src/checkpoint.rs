//! Binary checkpoints for trained components.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BMRD" | version u32 | tag len u32 | tag utf8
//!        | config hash [32] | model hash [32]
//!        | config len u64 | config json
//!        | array count u64
//!        | per array: name len u32 | name | dtype u8 (0 = f64, 1 = f32)
//!                     | rows u64 | cols u64 | values
//! ```
//!
//! The config hash is SHA-256 of the config JSON bytes. The model hash is
//! SHA-256 over the arrays as returned by [`ParamStore::content_hash`], so
//! both are checked on load.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, ParamStore};
use crate::crosslingual::{TextEncoder, TextEncoderConfig};
use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::fsutil::write_atomic;
use crate::guidance::{IndexEntry, RetrievalIndex};
use crate::reward::{RewardModel, RewardModelConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BMRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextEncoder,
    RewardModel,
    Denoiser,
    RetrievalIndex,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Self::TextEncoder => "text_encoder",
            Self::RewardModel => "reward_model",
            Self::Denoiser => "denoiser",
            Self::RetrievalIndex => "retrieval_index",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        [Self::TextEncoder, Self::RewardModel, Self::Denoiser, Self::RetrievalIndex]
            .into_iter()
            .find(|c| c.tag() == tag)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    /// Halves file size. Values are rounded, so the round trip is no longer exact.
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub config_json: String,
    pub arrays: Vec<(String, Matrix)>,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(hash: &[u8]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn arrays_hash(arrays: &[(String, Matrix)]) -> [u8; 32] {
    let mut s = ParamStore::new();
    for (n, m) in arrays {
        s.add(n.clone(), m.clone());
    }
    s.content_hash()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
}

impl Checkpoint {
    pub fn config_hash(&self) -> [u8; 32] {
        sha256(self.config_json.as_bytes())
    }

    pub fn model_hash(&self) -> [u8; 32] {
        arrays_hash(&self.arrays)
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let tag = self.component.tag().as_bytes();
        out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        out.extend_from_slice(tag);
        out.extend_from_slice(&self.config_hash());
        // The stored model hash always describes the values as written.
        let written: Vec<(String, Matrix)> = match precision {
            Precision::F64 => self.arrays.clone(),
            Precision::F32 => self
                .arrays
                .iter()
                .map(|(n, m)| (n.clone(), m.map(|v| v as f32 as f64)))
                .collect(),
        };
        out.extend_from_slice(&arrays_hash(&written));
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(written.len() as u64).to_le_bytes());
        for (name, m) in &written {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match precision {
                Precision::F64 => 0,
                Precision::F32 => 1,
            });
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &v in m.data() {
                match precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    /// Parses and verifies both hashes. `expect` guards against loading,
    /// say, a denoiser file where a reward model is wanted.
    pub fn from_bytes(bytes: &[u8], expect: Option<Component>) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let tag = r.string(false)?;
        let component =
            Component::from_tag(&tag).ok_or_else(|| Error::Checkpoint(format!("unknown component tag `{tag}`")))?;
        if let Some(want) = expect {
            if want != component {
                return Err(Error::Checkpoint(format!("expected a {want} checkpoint, found {component}")));
            }
        }
        let config_hash = r.hash()?;
        let model_hash = r.hash()?;
        let config_json = r.string(true)?;
        let n = r.len(true)?;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string(false)?;
            let dtype = r.u8()?;
            let rows = r.len(true)?;
            let cols = r.len(true)?;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("array `{name}` is too large")))?;
            let data: Vec<f64> = match dtype {
                0 => r
                    .take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                1 => r
                    .take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                d => return Err(Error::Checkpoint(format!("array `{name}` has unknown dtype {d}"))),
            };
            arrays.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Self {
            component,
            config_json,
            arrays,
        };
        if ck.config_hash() != config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        if ck.model_hash() != model_hash {
            return Err(Error::Checkpoint("model hash mismatch, file is corrupt".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(Precision::F64))
    }

    pub fn load(path: &Path, expect: Option<Component>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expect)
    }

    fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }
}

/// Components that can be written to and read from a [`Checkpoint`].
pub trait Persist: Sized {
    const COMPONENT: Component;

    fn to_checkpoint(&self) -> Checkpoint;

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, Some(Self::COMPONENT))?)
    }
}

fn store_arrays(store: &ParamStore) -> Vec<(String, Matrix)> {
    store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
}

fn check_component(ck: &Checkpoint, want: Component) -> Result<()> {
    if ck.component != want {
        return Err(Error::Checkpoint(format!("expected a {want} checkpoint, found {}", ck.component)));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    config: TextEncoderConfig,
    frozen: bool,
}

impl Persist for TextEncoder {
    const COMPONENT: Component = Component::TextEncoder;

    fn to_checkpoint(&self) -> Checkpoint {
        let meta = EncoderMeta {
            config: self.config().clone(),
            frozen: self.is_frozen(),
        };
        Checkpoint {
            component: Self::COMPONENT,
            config_json: serde_json::to_string(&meta).expect("config serializes"),
            arrays: store_arrays(self.params()),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_component(ck, Self::COMPONENT)?;
        let meta: EncoderMeta = ck.config()?;
        let mut enc = TextEncoder::new(meta.config, 0);
        enc.params_mut()?.load_named(&ck.arrays).map_err(Error::Checkpoint)?;
        Ok(if meta.frozen { enc.freeze() } else { enc })
    }
}

impl Persist for RewardModel {
    const COMPONENT: Component = Component::RewardModel;

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            component: Self::COMPONENT,
            config_json: serde_json::to_string(self.config()).expect("config serializes"),
            arrays: store_arrays(self.params()),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_component(ck, Self::COMPONENT)?;
        let cfg: RewardModelConfig = ck.config()?;
        let mut m = RewardModel::new(cfg, 0);
        m.params_mut().load_named(&ck.arrays).map_err(Error::Checkpoint)?;
        Ok(m)
    }
}

impl Persist for Denoiser {
    const COMPONENT: Component = Component::Denoiser;

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            component: Self::COMPONENT,
            config_json: serde_json::to_string(self.config()).expect("config serializes"),
            arrays: store_arrays(self.params()),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_component(ck, Self::COMPONENT)?;
        let cfg: DenoiserConfig = ck.config()?;
        let mut m = Denoiser::new(cfg, 0);
        m.params_mut().load_named(&ck.arrays).map_err(Error::Checkpoint)?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    motion_ids: Vec<String>,
    reward_model_hash: String,
}

impl Persist for RetrievalIndex {
    const COMPONENT: Component = Component::RetrievalIndex;

    fn to_checkpoint(&self) -> Checkpoint {
        let meta = IndexMeta {
            motion_ids: self.entries().iter().map(|e| e.motion_id.clone()).collect(),
            reward_model_hash: hex(&self.model_hash()),
        };
        let rows: Vec<Vec<f64>> = self.entries().iter().map(|e| e.latent.clone()).collect();
        Checkpoint {
            component: Self::COMPONENT,
            config_json: serde_json::to_string(&meta).expect("meta serializes"),
            arrays: vec![("latents".into(), Matrix::from_rows(&rows))],
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_component(ck, Self::COMPONENT)?;
        let meta: IndexMeta = ck.config()?;
        let latents = match ck.arrays.as_slice() {
            [(name, m)] if name == "latents" => m,
            _ => return Err(Error::Checkpoint("index checkpoint must hold exactly one `latents` array".into())),
        };
        if latents.rows() != meta.motion_ids.len() {
            return Err(Error::Checkpoint(format!(
                "{} latents for {} motion ids",
                latents.rows(),
                meta.motion_ids.len()
            )));
        }
        let hash_bytes: Vec<u8> = (0..meta.reward_model_hash.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(meta.reward_model_hash.get(i..i + 2).unwrap_or("zz"), 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("reward model hash is not hex".into()))?;
        let hash: [u8; 32] = hash_bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("reward model hash must be 32 bytes".into()))?;
        let entries = meta
            .motion_ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| IndexEntry {
                motion_id: id,
                latent: latents.row(i).to_vec(),
            })
            .collect();
        RetrievalIndex::from_parts(entries, hash).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::LatentReward;

    fn bits(store: &ParamStore) -> Vec<u64> {
        store.values().iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn every_component_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let enc = TextEncoder::new(TextEncoderConfig::desk(20), 3).freeze();
        enc.save(&dir.path().join("e.bin")).unwrap();
        let e2 = TextEncoder::load(&dir.path().join("e.bin")).unwrap();
        assert_eq!(bits(enc.params()), bits(e2.params()));
        assert!(e2.is_frozen());

        let rm = RewardModel::new(RewardModelConfig::desk(4, 8, 20, 10), 5);
        rm.save(&dir.path().join("r.bin")).unwrap();
        let r2 = RewardModel::load(&dir.path().join("r.bin")).unwrap();
        assert_eq!(bits(rm.params()), bits(r2.params()));
        assert_eq!(rm.fingerprint(), r2.fingerprint());

        let dn = Denoiser::new(DenoiserConfig::desk(4, 8, 8), 7);
        dn.save(&dir.path().join("d.bin")).unwrap();
        let d2 = Denoiser::load(&dir.path().join("d.bin")).unwrap();
        assert_eq!(bits(dn.params()), bits(d2.params()));

        let idx = RetrievalIndex::from_parts(
            vec![
                IndexEntry {
                    motion_id: "a".into(),
                    latent: vec![0.1, -0.0, f64::MIN_POSITIVE],
                },
                IndexEntry {
                    motion_id: "b".into(),
                    latent: vec![1.0 / 3.0, 2.0, -7.5],
                },
            ],
            rm.fingerprint(),
        )
        .unwrap();
        idx.save(&dir.path().join("i.bin")).unwrap();
        let i2 = RetrievalIndex::load(&dir.path().join("i.bin")).unwrap();
        assert_eq!(i2, idx);
        assert_eq!(i2.entries()[0].latent[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn mismatched_component_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dn = Denoiser::new(DenoiserConfig::desk(4, 8, 8), 7);
        let p = dir.path().join("d.bin");
        dn.save(&p).unwrap();
        let err = RewardModel::load(&p).unwrap_err();
        assert!(err.to_string().contains("expected a reward_model checkpoint"), "{err}");
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let dn = Denoiser::new(DenoiserConfig::desk(4, 8, 8), 7);
        let bytes = dn.to_checkpoint().to_bytes(Precision::F64);
        assert_eq!(&bytes[..4], b"BMRD");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(Checkpoint::from_bytes(&flipped, None).unwrap_err().to_string().contains("model hash"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, None).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, None).is_err());
    }

    #[test]
    fn f32_payload_loads_with_rounding() {
        let dn = Denoiser::new(DenoiserConfig::desk(4, 8, 8), 7);
        let ck = dn.to_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes(Precision::F32), Some(Component::Denoiser)).unwrap();
        let d2 = Denoiser::from_checkpoint(&back).unwrap();
        for (a, b) in dn.params().values().iter().zip(d2.params().values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }
}
