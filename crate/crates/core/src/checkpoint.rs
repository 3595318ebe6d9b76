//! Binary checkpoints: magic, format version, a JSON header (config text,
//! model and adapter specs, tensor manifest), a little-endian f32 payload
//! and a SHA-256 trailer over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{inject, AdapterMode, AdapterSet, AdapterSpec};
use crate::autodiff::Tensor;
use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"MOEICKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub const BACKBONE: &str = "backbone";
pub const ADAPTERS: &str = "adapters";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: String,
    pub model: ModelConfig,
    pub adapters: Option<AdapterSpec>,
    pub tensors: Vec<ManifestEntry>,
}

/// A parsed and verified checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    payload: Vec<u8>,
}

fn push_tensor(name: String, t: &Tensor, tensors: &mut Vec<ManifestEntry>, payload: &mut Vec<u8>) {
    tensors.push(ManifestEntry {
        name,
        shape: t.shape().to_vec(),
        offset: payload.len(),
    });
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Backbone, adapters: Option<&AdapterSet>, config: &str) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.named_params() {
        push_tensor(format!("{BACKBONE}.{name}"), t, &mut tensors, &mut payload);
    }
    if let Some(set) = adapters {
        for (name, t) in set.named_params() {
            push_tensor(format!("{ADAPTERS}.{name}"), t, &mut tensors, &mut payload);
        }
    }
    let header = Header {
        config: config.to_string(),
        model: *model.config(),
        adapters: adapters.map(|a| a.spec.clone()),
        tensors,
    };
    let header = serde_json::to_vec_pretty(&header).map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save(path: &Path, model: &Backbone, adapters: Option<&AdapterSet>, config: &str) -> Result<()> {
    write_atomic(path, &to_bytes(model, adapters, config)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("file ends inside the {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Corrupt(format!("{what} does not fit in memory")))
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < c.pos + DIGEST_LEN {
            return Err(Error::Corrupt("file ends before the checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let mut c = Cursor { bytes: body, pos: c.pos };
        let header_len = c.u64("header length")?;
        let header: Header =
            serde_json::from_slice(c.take(header_len, "header")?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let payload_len = c.u64("payload length")?;
        let payload = c.take(payload_len, "payload")?.to_vec();
        if c.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after the payload".into()));
        }
        let ckpt = Checkpoint { header, payload };
        ckpt.check_manifest()?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Offsets must tile the payload exactly, in manifest order.
    fn check_manifest(&self) -> Result<()> {
        let mut next = 0usize;
        for e in &self.header.tensors {
            if e.offset != next {
                return Err(Error::Corrupt(format!("tensor {} starts at {} instead of {next}", e.name, e.offset)));
            }
            next += e.shape.iter().product::<usize>() * 4;
        }
        if next != self.payload.len() {
            return Err(Error::Corrupt(format!("manifest covers {next} bytes of a {}-byte payload", self.payload.len())));
        }
        Ok(())
    }

    fn entries<'a>(&'a self, section: &'a str) -> impl Iterator<Item = (&'a str, &'a ManifestEntry)> + 'a {
        self.header
            .tensors
            .iter()
            .filter_map(move |e| e.name.strip_prefix(section).and_then(|n| n.strip_prefix('.')).map(|n| (n, e)))
    }

    fn raw(&self, e: &ManifestEntry) -> &[u8] {
        &self.payload[e.offset..e.offset + e.shape.iter().product::<usize>() * 4]
    }

    /// The raw payload bytes of one section (`backbone` or `adapters`).
    pub fn section_bytes(&self, section: &str) -> Vec<u8> {
        self.entries(section).flat_map(|(_, e)| self.raw(e).iter().copied()).collect()
    }

    fn fill(&self, section: &str, dst: Vec<(String, &mut Tensor)>) -> Result<()> {
        let stored: Vec<(&str, &ManifestEntry)> = self.entries(section).collect();
        if stored.len() != dst.len() {
            return Err(Error::Corrupt(format!(
                "{section} section holds {} tensors, the model has {}",
                stored.len(),
                dst.len()
            )));
        }
        for (name, t) in dst {
            let (_, e) = stored
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Corrupt(format!("{section} section lacks tensor {name}")))?;
            if e.shape != t.shape() {
                let site = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
                return Err(Error::SiteShape {
                    site: site.to_string(),
                    found: e.shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            for (v, b) in t.data_mut().iter_mut().zip(self.raw(e).chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
        }
        Ok(())
    }

    /// The stored backbone, trainable flags off.
    pub fn backbone(&self) -> Result<Backbone> {
        let mut model = Backbone::new(self.header.model, &mut Rng::new(0))?;
        self.fill(BACKBONE, model.named_params_mut())?;
        model.freeze();
        Ok(model)
    }

    /// The stored adapters attached to `model`, which need not be the stored
    /// backbone but must have matching site shapes.
    pub fn adapters_for(&self, model: &Backbone) -> Result<Option<AdapterSet>> {
        let Some(spec) = &self.header.adapters else {
            return Ok(None);
        };
        let mut set = inject(model, spec, &mut Rng::new(0))?;
        if spec.mode != AdapterMode::None {
            self.fill(ADAPTERS, set.named_params_mut())?;
        }
        Ok(Some(set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Gate;
    use crate::backbone::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn trained_like(cfg: ModelConfig) -> (Backbone, AdapterSet) {
        let mut rng = Rng::new(3);
        let model = Backbone::new(cfg, &mut rng).unwrap();
        let mut set = inject(&model, &AdapterSpec::molora(3, 2, Gate::Softmax), &mut rng).unwrap();
        for (_, t) in set.named_params_mut() {
            for v in t.data_mut() {
                *v = rng.uniform(-0.5, 0.5) as f32;
            }
        }
        (model, set)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (model, set) = trained_like(small());
        let bytes = to_bytes(&model, Some(&set), "train.lambda = 1\n").unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.header.config, "train.lambda = 1\n");
        let m2 = ck.backbone().unwrap();
        let s2 = ck.adapters_for(&m2).unwrap().unwrap();
        let probe = [3usize, 7, 1, 0, 39, 12];
        let a = model.logits(&probe, Some(&set)).unwrap();
        let b = m2.logits(&probe, Some(&s2)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(to_bytes(&m2, Some(&s2), "train.lambda = 1\n").unwrap(), bytes);
    }

    #[test]
    fn truncation_and_tampering_are_corruption() {
        let (model, _) = trained_like(small());
        let bytes = to_bytes(&model, None, "").unwrap();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_versions_are_refused() {
        let (model, _) = trained_like(small());
        let mut bytes = to_bytes(&model, None, "").unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 2, expected: 1 }), "{err}");
    }

    #[test]
    fn mismatched_width_names_the_site() {
        let (model, set) = trained_like(small());
        let bytes = to_bytes(&model, Some(&set), "").unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let wider = Backbone::new(ModelConfig { d_model: 32, ..small() }, &mut Rng::new(1)).unwrap();
        let err = ck.adapters_for(&wider).unwrap_err();
        assert!(err.to_string().contains("layer0.q_proj"), "{err}");
        assert!(matches!(err, Error::SiteShape { .. }));
    }

    #[test]
    fn sections_split_backbone_from_adapters() {
        let (model, set) = trained_like(small());
        let plain = Checkpoint::from_bytes(&to_bytes(&model, None, "").unwrap()).unwrap();
        let with = Checkpoint::from_bytes(&to_bytes(&model, Some(&set), "").unwrap()).unwrap();
        assert_eq!(plain.section_bytes(BACKBONE), with.section_bytes(BACKBONE));
        assert_eq!(plain.section_bytes(ADAPTERS).len(), 0);
        let n: usize = set.named_params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(with.section_bytes(ADAPTERS).len(), 4 * n);
        assert!(plain.adapters_for(&model).unwrap().is_none());
    }
}
