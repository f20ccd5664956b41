//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MPCLCKPT"
//! version    u32
//! header_len u64
//! header     UTF-8 JSON (architecture, section lengths, pruned indices, ...)
//! payload    f64 LE values, sections in header order
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elbo::{KLWeights, PriorStore};
use crate::error::{Error, Result};
use crate::model::{Architecture, MPModel};
use crate::report::write_atomic;
use crate::tensor::SeededRng;
use crate::train::LearningRates;

pub const MAGIC: &[u8; 8] = b"MPCLCKPT";
pub const VERSION: u32 = 1;

/// A model plus the continual-learning state needed to resume from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MPModel,
    pub prior: Option<PriorStore>,
    pub alpha: Option<LearningRates>,
    pub weights: Option<KLWeights>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    endianness: String,
    architecture: Architecture,
    pruned: Vec<usize>,
    bn_updates: Vec<u64>,
    sections: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    len: usize,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Checkpoint(what.into())
}

impl Checkpoint {
    pub fn from_model(model: MPModel) -> Self {
        Self {
            model,
            prior: None,
            alpha: None,
            weights: None,
        }
    }

    fn sections(&self) -> Vec<(String, Vec<f64>)> {
        let m = &self.model;
        let mut out = Vec::new();
        for (k, p) in m.params().iter().enumerate() {
            out.push((format!("mu.{k}"), p.mu.data().to_vec()));
            out.push((format!("rho.{k}"), p.rho.data().to_vec()));
        }
        for (k, s) in m.batchnorm_states().iter().enumerate() {
            out.push((format!("bn.{k}.gamma"), s.gamma.data().to_vec()));
            out.push((format!("bn.{k}.beta"), s.beta.data().to_vec()));
            out.push((
                format!("bn.{k}.running_mean"),
                s.running_mean.data().to_vec(),
            ));
            out.push((format!("bn.{k}.running_var"), s.running_var.data().to_vec()));
        }
        if let Some(p) = &self.prior {
            out.push(("prior.mu".into(), p.mu.clone()));
            out.push(("prior.sigma2".into(), p.sigma2.clone()));
        }
        if let Some(a) = &self.alpha {
            out.push(("alpha".into(), a.alpha.clone()));
            out.push(("alpha.aux".into(), a.aux.clone()));
        }
        if let Some(w) = &self.weights {
            out.push(("tau".into(), w.tau.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sections = self.sections();
        let header = Header {
            endianness: "little".into(),
            architecture: self.model.architecture().clone(),
            pruned: self.model.pruned().to_vec(),
            bn_updates: self
                .model
                .batchnorm_states()
                .iter()
                .map(|s| s.updates)
                .collect(),
            sections: sections
                .iter()
                .map(|(name, v)| Section {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, v) in &sections {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!(
                "version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &body[20..];
        if hlen > rest.len() {
            return Err(corrupt("header runs past the payload"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])?;
        if header.endianness != "little" {
            return Err(corrupt(format!(
                "unsupported endianness {:?}",
                header.endianness
            )));
        }
        let payload = &rest[hlen..];
        let want: usize = header.sections.iter().map(|s| s.len).sum();
        if payload.len() != want * 8 {
            return Err(corrupt(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                want * 8
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut sections = std::collections::HashMap::new();
        let mut at = 0;
        for s in &header.sections {
            sections.insert(s.name.as_str(), &values[at..at + s.len]);
            at += s.len;
        }
        let take = |name: &str, len: usize| -> Result<&[f64]> {
            match sections.get(name) {
                Some(v) if v.len() == len => Ok(v),
                Some(v) => Err(corrupt(format!(
                    "section {name} has {} values, want {len}",
                    v.len()
                ))),
                None => Err(corrupt(format!("missing section {name}"))),
            }
        };

        let mut model = MPModel::new(header.architecture, 0.0, &mut SeededRng::new(0))?;
        for (k, p) in model.params_mut().into_iter().enumerate() {
            let n = p.len();
            p.mu.data_mut()
                .copy_from_slice(take(&format!("mu.{k}"), n)?);
            p.rho
                .data_mut()
                .copy_from_slice(take(&format!("rho.{k}"), n)?);
        }
        let bn = model.batchnorm_states_mut();
        if bn.len() != header.bn_updates.len() {
            return Err(corrupt("batch-norm layer count mismatch"));
        }
        for (k, s) in bn.into_iter().enumerate() {
            let c = s.channels();
            s.gamma
                .data_mut()
                .copy_from_slice(take(&format!("bn.{k}.gamma"), c)?);
            s.beta
                .data_mut()
                .copy_from_slice(take(&format!("bn.{k}.beta"), c)?);
            s.running_mean
                .data_mut()
                .copy_from_slice(take(&format!("bn.{k}.running_mean"), c)?);
            s.running_var
                .data_mut()
                .copy_from_slice(take(&format!("bn.{k}.running_var"), c)?);
            s.updates = header.bn_updates[k];
        }
        for p in model.params() {
            p.mu.ensure_finite("checkpoint mu")?;
            p.rho.ensure_finite("checkpoint rho")?;
        }
        let trunk_len = model.layout().trunk_len;
        if header.pruned.iter().any(|&i| i >= trunk_len) {
            return Err(corrupt("pruned index outside the trunk"));
        }
        model.set_pruned(header.pruned);

        let total = model.layout().total;
        let naux = model.layout().aux.len();
        let prior = if sections.contains_key("prior.mu") {
            let p = PriorStore {
                mu: take("prior.mu", total)?.to_vec(),
                sigma2: take("prior.sigma2", total)?.to_vec(),
            };
            p.validate(model.layout())?;
            Some(p)
        } else {
            None
        };
        let alpha = if sections.contains_key("alpha") {
            let a = LearningRates {
                alpha: take("alpha", total)?.to_vec(),
                aux: take("alpha.aux", naux)?.to_vec(),
            };
            a.validate(&model)?;
            Some(a)
        } else {
            None
        };
        let weights = if sections.contains_key("tau") {
            let w = KLWeights {
                tau: take("tau", total)?.to_vec(),
            };
            w.validate(model.layout())?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            model,
            prior,
            alpha,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
