//! `TRKC` tensor container.
//!
//! Layout, all integers little-endian:
//! `"TRKC" | u32 version | u32 n_meta | (str key, str value)* |
//!  u32 n_tensors | (str name, u32 ndim, u64 dim*, f32 value*)*`
//! where `str` is a u32 byte length followed by UTF-8 bytes. Metadata is
//! written in key order and tensors in insertion order, so saving the same
//! contents twice gives identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::collab::CollabModel;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lm::{LmConfig, LmParams, LoraAdapter, LoraConfig, LoraLayer, LoraPair};
use crate::projector::Projector;

pub const MAGIC: &[u8; 4] = b"TRKC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Mat)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Checkpoint {
    pub fn new(stage: &str) -> Self {
        let mut c = Self::default();
        c.meta.insert("stage".into(), stage.into());
        c
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn put(&mut self, name: &str, m: &Mat) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate tensor `{name}`")));
        }
        self.tensors.push((name.into(), m.clone()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    fn get_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let m = self.get(name)?;
        if m.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        Ok(m.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols as u64).to_le_bytes());
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a TRKC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut c = Self::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            c.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions"))),
            };
            let count = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
            c.put(&name, &Mat::from_vec(rows, cols, data))?;
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(c)
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Missing files are a prerequisite error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Prerequisite(format!("missing checkpoint {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn put_lm(&mut self, prefix: &str, params: &LmParams) -> Result<()> {
        self.set_meta(&format!("{prefix}config"), toml_string(&params.config)?);
        let mut res = Ok(());
        params.visit(|n, m| {
            if res.is_ok() {
                res = self.put(&format!("{prefix}{n}"), m);
            }
        });
        res
    }

    pub fn get_lm(&self, prefix: &str) -> Result<LmParams> {
        let config: LmConfig = from_toml(self.meta(&format!("{prefix}config"))?)?;
        let mut params = LmParams::init(&config)?;
        let mut res = Ok(());
        params.visit_mut(|n, m| {
            if res.is_ok() {
                match self.get_shaped(&format!("{prefix}{n}"), m.rows, m.cols) {
                    Ok(t) => *m = t,
                    Err(e) => res = Err(e),
                }
            }
        });
        res.map(|_| params)
    }

    pub fn put_adapter(&mut self, prefix: &str, adapter: &LoraAdapter) -> Result<()> {
        self.set_meta(&format!("{prefix}lora_config"), toml_string(&adapter.config)?);
        self.set_meta(&format!("{prefix}lora_layers"), adapter.layers.len());
        let mut res = Ok(());
        adapter.visit(|n, _, m| {
            if res.is_ok() {
                res = self.put(&format!("{prefix}{n}"), m);
            }
        });
        res
    }

    pub fn get_adapter(&self, prefix: &str) -> Result<LoraAdapter> {
        let config: LoraConfig = from_toml(self.meta(&format!("{prefix}lora_config"))?)?;
        let n: usize = parse_meta(self.meta(&format!("{prefix}lora_layers"))?)?;
        let t = |l: usize, s: &str| self.get(&format!("{prefix}lora.{l}.{s}")).cloned();
        let layers = (0..n)
            .map(|l| {
                Ok(LoraLayer {
                    q: LoraPair { a: t(l, "q.a")?, b: t(l, "q.b")? },
                    v: LoraPair { a: t(l, "v.a")?, b: t(l, "v.b")? },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoraAdapter { config, layers })
    }

    pub fn put_projector(&mut self, prefix: &str, p: &Projector) -> Result<()> {
        let mut res = Ok(());
        p.visit(|n, m| {
            if res.is_ok() {
                res = self.put(&format!("{prefix}{n}"), m);
            }
        });
        res
    }

    pub fn get_projector(&self, prefix: &str) -> Result<Projector> {
        let g = |n: &str| self.get(&format!("{prefix}{n}")).cloned();
        let p = Projector { w1: g("w1")?, b1: g("b1")?, w2: g("w2")?, b2: g("b2")? };
        let (d1, h) = p.w1.shape();
        let d2 = p.w2.cols;
        if p.b1.shape() != (1, h) || p.w2.rows != h || p.b2.shape() != (1, d2) || d1 == 0 {
            return Err(Error::Format("projector tensors have inconsistent shapes".into()));
        }
        Ok(p)
    }

    pub fn put_collab(&mut self, model: &CollabModel) -> Result<()> {
        self.put("collab.users", &model.user_vectors)?;
        self.put("collab.items", &model.item_vectors)
    }

    pub fn get_collab(&self) -> Result<CollabModel> {
        let model = CollabModel {
            user_vectors: self.get("collab.users")?.clone(),
            item_vectors: self.get("collab.items")?.clone(),
        };
        if model.user_vectors.cols != model.item_vectors.cols {
            return Err(Error::Format("user and item factors differ in width".into()));
        }
        Ok(model)
    }
}

fn toml_string<T: serde::Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_toml<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_meta<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad checkpoint metadata value `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lm() -> LmParams {
        LmParams::init(&LmConfig { d_model: 8, n_layers: 2, n_heads: 2, context_len: 12, vocab_size: 300, mlp_ratio: 2, tie_embeddings: false, seed: 3 }).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_after_f32_rounding() {
        let lm = small_lm();
        let adapter = LoraAdapter::init(&lm.config, LoraConfig::default(), 4).unwrap();
        let mut c = Checkpoint::new("global");
        c.set_meta("seed", 42);
        c.put_lm("base.", &lm).unwrap();
        c.put_adapter("global.", &adapter).unwrap();
        c.put_projector("proj.", &Projector::init(4, 8, 1)).unwrap();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let lm2 = back.get_lm("base.").unwrap();
        let mut k = 0;
        let mut orig = Vec::new();
        lm.visit(|_, m| orig.push(m.data.clone()));
        lm2.visit(|_, m| {
            for (a, b) in m.data.iter().zip(&orig[k]) {
                assert_eq!(*a, (*b as f32) as f64);
            }
            k += 1;
        });
        assert_eq!(back.get_adapter("global.").unwrap().layers.len(), 2);
        assert_eq!(back.meta("stage").unwrap(), "global");
        assert_eq!(back.get_projector("proj.").unwrap().output_dim(), 8);
    }

    #[test]
    fn malformed_input_is_rejected() {
        let mut bytes = Checkpoint::new("x").to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version 9")));
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut c = Checkpoint::new("x");
        c.put("t", &Mat::zeros(2, 3)).unwrap();
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(c.put("t", &Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn missing_file_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(&dir.path().join("global.trkc")).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(ref m) if m.contains("global.trkc")));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn save_reports_the_file_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.trkc");
        let mut c = Checkpoint::new("collab");
        c.put_collab(&CollabModel::init(3, 4, 2, 1)).unwrap();
        let h = c.save(&path).unwrap();
        assert_eq!(h, file_hash(&path).unwrap());
        assert_eq!(h.len(), 64);
        assert_eq!(Checkpoint::load(&path).unwrap().get_collab().unwrap().user_vectors.rows, 3);
    }
}
