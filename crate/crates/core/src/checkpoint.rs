//! Checkpoint archives: a JSON manifest plus named f32 tensors in one file.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"LGPK"
//! u32    format version (1)
//! u32    manifest length, then that many bytes of JSON
//! u32    tensor count
//! per tensor:
//!   u32  name length, then the UTF-8 name
//!   u32  rank, then rank u32 dims
//!   f32  data, product(dims) entries
//! ```
//!
//! Writing the same archive twice yields identical bytes: tensor order is
//! the insertion order, metadata keys are sorted, and nothing records wall
//! time.

use crate::data::Cursor;
use crate::error::{Error, Result};
use crate::pool::StitchInit;
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, VitModel};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"LGPK";
pub const ARCHIVE_VERSION: u32 = 1;

/// What the archive holds. The variants carry enough architecture to rebuild
/// the stored object without guessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestKind {
    /// One standalone transformer.
    Model { config: ModelConfig },
    /// Two rows of harvested instances plus stitch layers.
    Pool {
        low: ModelConfig,
        high: ModelConfig,
        stitch_init: Option<StitchInit>,
    },
    /// One assembled path through a pool.
    Descendant {
        low: ModelConfig,
        high: ModelConfig,
        path_k: usize,
        path_m: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Pixel normalization the stored weights assume, unit scale.
    pub norm_mean: f32,
    pub norm_std: f32,
    #[serde(flatten)]
    pub kind: ManifestKind,
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(kind: ManifestKind, seed: u64) -> Self {
        Manifest {
            format_version: ARCHIVE_VERSION,
            seed,
            norm_mean: crate::data::NORM_MEAN,
            norm_std: crate::data::NORM_STD,
            kind,
            metadata: BTreeMap::new(),
        }
    }
}

pub struct Archive {
    pub manifest: Manifest,
    tensors: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new(manifest: Manifest) -> Self {
        Archive {
            manifest,
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateTensor { name });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i].1)
            .ok_or_else(|| Error::MissingTensor { name: name.into() })
    }

    /// Lookup that also pins the expected shape, naming the tensor on error.
    pub fn tensor_expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.into(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&ARCHIVE_MAGIC);
        buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        buf.extend_from_slice(&manifest);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut r = Cursor::new(bytes);
        let magic = r.take_array::<4>("archive magic")?;
        if magic != ARCHIVE_MAGIC {
            return Err(Error::BadMagic {
                expected: ARCHIVE_MAGIC,
                found: magic,
            });
        }
        let version = r.take_u32("archive version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: ARCHIVE_VERSION,
            });
        }
        let mlen = r.take_u32("manifest length")? as usize;
        let mbytes = r.take_bytes(mlen, "manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let count = r.take_u32("tensor count")? as usize;
        let mut ar = Archive::new(manifest);
        for _ in 0..count {
            let nlen = r.take_u32("tensor name length")? as usize;
            let nbytes = r.take_bytes(nlen, "tensor name")?;
            let name = std::str::from_utf8(nbytes)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take_u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.take_u32("tensor dim")? as u64;
                numel = numel.checked_mul(d).ok_or(Error::Format(format!(
                    "tensor {name}: dimension overflow"
                )))?;
                shape.push(d as usize);
            }
            let byte_len = numel.checked_mul(4).ok_or(Error::Format(format!(
                "tensor {name}: size overflow"
            )))? as usize;
            if r.remaining() < byte_len {
                return Err(Error::Truncated {
                    what: "tensor data",
                    needed: byte_len,
                });
            }
            let raw = r.take_bytes(byte_len, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ar.push(name, Tensor::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Ok(ar)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// FNV-1a over raw bytes; used to fingerprint archives and configs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Serializes a standalone model with its architecture.
pub fn model_to_archive(model: &VitModel<f32>, seed: u64) -> Result<Archive> {
    let manifest = Manifest::new(
        ManifestKind::Model {
            config: model.config.clone(),
        },
        seed,
    );
    let mut ar = Archive::new(manifest);
    for (name, t) in model.named_params() {
        ar.push(name, t.clone())?;
    }
    Ok(ar)
}

/// Rebuilds a standalone model, validating every tensor shape by name.
pub fn model_from_archive(ar: &Archive) -> Result<VitModel<f32>> {
    let config = match &ar.manifest.kind {
        ManifestKind::Model { config } => config.clone(),
        _ => {
            return Err(Error::invalid(
                "archive",
                "expected a standalone model archive",
            ))
        }
    };
    let mut model = VitModel::<f32>::init(config, 0)?;
    for (name, slot) in model.named_params_mut() {
        let stored = ar.tensor_expect(&name, slot.shape())?;
        *slot = stored.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::mini_ancestry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_roundtrip_is_bitwise() {
        let cfg = mini_ancestry().with_depth(2);
        let m = VitModel::<f32>::init(cfg, 4).unwrap();
        let ar = model_to_archive(&m, 4).unwrap();
        let bytes = ar.to_bytes().unwrap();
        let back = model_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        for ((na, ta), (nb, tb)) in m.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} changed across roundtrip");
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let m = VitModel::<f32>::init(mini_ancestry().with_depth(1), 9).unwrap();
        let mut ar = model_to_archive(&m, 9).unwrap();
        ar.manifest.metadata.insert("b".into(), "2".into());
        ar.manifest.metadata.insert("a".into(), "1".into());
        let one = ar.to_bytes().unwrap();
        let two = ar.to_bytes().unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn duplicate_tensor_names_are_rejected() {
        let manifest = Manifest::new(
            ManifestKind::Model {
                config: mini_ancestry(),
            },
            0,
        );
        let mut ar = Archive::new(manifest);
        ar.push("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            ar.push("w", Tensor::zeros(&[2])),
            Err(Error::DuplicateTensor { .. })
        ));
    }

    #[test]
    fn missing_and_misshapen_tensors_name_the_culprit() {
        let m = VitModel::<f32>::init(mini_ancestry().with_depth(1), 2).unwrap();
        let ar = model_to_archive(&m, 2).unwrap();
        let err = ar.tensor("block.7.wq").unwrap_err().to_string();
        assert!(err.contains("block.7.wq"), "{err}");
        let err = ar.tensor_expect("block.0.wq", &[1, 1]).unwrap_err().to_string();
        assert!(err.contains("block.0.wq") && err.contains("[1, 1]"), "{err}");
    }

    #[test]
    fn wrong_kind_is_refused_by_model_loader() {
        let manifest = Manifest::new(
            ManifestKind::Pool {
                low: mini_ancestry(),
                high: mini_ancestry(),
                stitch_init: None,
            },
            0,
        );
        let ar = Archive::new(manifest);
        assert!(model_from_archive(&ar).is_err());
    }

    #[test]
    fn fuzzed_bytes_never_panic_the_loader() {
        let m = VitModel::<f32>::init(mini_ancestry().with_depth(1), 6).unwrap();
        let good = model_to_archive(&m, 6).unwrap().to_bytes().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut bytes = good.clone();
            for _ in 0..rng.gen_range(1..10) {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = rng.gen();
            }
            let _ = Archive::from_bytes(&bytes);
            let cut = rng.gen_range(0..bytes.len());
            let _ = Archive::from_bytes(&bytes[..cut]);
        }
    }

    #[test]
    fn manifest_kinds_serialize_with_tags() {
        let manifest = Manifest::new(
            ManifestKind::Descendant {
                low: mini_ancestry(),
                high: mini_ancestry(),
                path_k: 2,
                path_m: 3,
            },
            5,
        );
        let json = serde_json::to_string(&manifest).unwrap();
        assert!(json.contains("\"kind\":\"descendant\""), "{json}");
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(manifest, back);
    }
}
