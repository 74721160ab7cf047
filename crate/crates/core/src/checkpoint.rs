//! Checkpoint container.
//!
//! Layout: magic `FCKP`, `u8` version, a `u64`-length-prefixed UTF-8
//! manifest in config syntax (model and NMF settings, seed, step, names),
//! then the parameters and optional AdamW moments as FTensor records in
//! manifest order, each prefixed by its `u64` byte length.

use std::path::Path;

use factorizer_tensor::{io as ftio, Real, Tensor};
use sha2::{Digest, Sha256};

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::network::{Factorizer, FactorizerConfig};
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u8 = 1;

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: FactorizerConfig,
    pub seed: u64,
    pub step: usize,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub optimizer: Option<AdamW>,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(model: &Factorizer<T>, step: usize, optimizer: Option<&AdamW>) -> Self {
        let entries = model.params.entries();
        Self {
            config: model.config.clone(),
            seed: model.seed,
            step,
            names: entries.iter().map(|e| e.name.clone()).collect(),
            params: entries.iter().map(|e| e.value.clone()).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model and installs the stored parameters, matching by name.
    pub fn restore(&self) -> Result<Factorizer<T>> {
        let mut model = Factorizer::build(self.config.clone(), self.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Structural(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in self.names.iter().zip(&self.params) {
            let id = model.params.find(name).ok_or_else(|| Error::Structural(format!("model has no parameter `{name}`")))?;
            model.params.set(id, value.clone())?;
        }
        Ok(model)
    }

    fn manifest(&self) -> ConfigMap {
        let mut m = self.config.to_map();
        m.set("checkpoint.seed", self.seed);
        m.set("checkpoint.step", self.step);
        m.set("checkpoint.dtype", T::DTYPE.name());
        m.set("checkpoint.params", self.names.join(","));
        if let Some(opt) = &self.optimizer {
            m.set("optimizer.beta1", opt.beta1);
            m.set("optimizer.beta2", opt.beta2);
            m.set("optimizer.eps", opt.eps);
            m.set("optimizer.weight_decay", opt.weight_decay);
            m.set("optimizer.t", opt.t);
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let text = self.manifest().to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut record = |bytes: Vec<u8>| {
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        };
        for p in &self.params {
            record(ftio::encode(p));
        }
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                let shape = p.shape().to_vec();
                record(ftio::encode(&Tensor::new(shape.clone(), m.clone()).expect("moment matches parameter")));
                record(ftio::encode(&Tensor::new(shape, v.clone()).expect("moment matches parameter")));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| malformed(e.to_string()))?;
        let manifest = ConfigMap::parse(text)?;
        let config = FactorizerConfig::from_map(&manifest)?;
        let dtype = manifest.raw("checkpoint.dtype").unwrap_or_default();
        if dtype != T::DTYPE.name() {
            return Err(malformed(format!("stored as {dtype}, requested {}", T::DTYPE.name())));
        }
        let need = |key: &str| manifest.get::<u64>(key)?.ok_or_else(|| malformed(format!("missing `{key}`")));
        let seed = need("checkpoint.seed")?;
        let step = need("checkpoint.step")? as usize;
        let names: Vec<String> = manifest.raw("checkpoint.params").unwrap_or_default().split(',').map(str::to_string).collect();
        let mut params = Vec::with_capacity(names.len());
        for _ in &names {
            params.push(r.tensor::<T>()?);
        }
        let optimizer = if manifest.contains("optimizer.t") {
            let f = |key: &str| manifest.get::<f64>(key)?.ok_or_else(|| malformed(format!("missing `{key}`")));
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for _ in &names {
                m.push(r.tensor::<f64>()?.into_vec());
                v.push(r.tensor::<f64>()?.into_vec());
            }
            Some(AdamW {
                beta1: f("optimizer.beta1")?,
                beta2: f("optimizer.beta2")?,
                eps: f("optimizer.eps")?,
                weight_decay: f("optimizer.weight_decay")?,
                t: need("optimizer.t")?,
                m,
                v,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, seed, step, names, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn tensor<U: Real>(&mut self) -> Result<Tensor<U>> {
        let len = self.u64()? as usize;
        let (t, used) = ftio::decode::<U>(self.take(len)?)?;
        if used != len {
            return Err(malformed("tensor record length mismatch"));
        }
        Ok(t)
    }
}
