//! Versioned binary container for a system and its optimizer state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Codebook;
use crate::system::System;
use crate::tensor::Tensor;
use crate::training::{LossComponents, Moments, TrainConfig, TrainState};
use crate::transformer::{LanguageModule, ModelConfig};

pub const MAGIC: &[u8; 8] = b"ILCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub system: System,
    pub state: TrainState,
    pub train: TrainConfig,
    /// Set on the checkpoint written at the end of a run.
    pub is_final: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    languages: BTreeMap<String, LanguageEntry>,
    codebook: Option<CodebookEntry>,
    step: u64,
    is_final: bool,
    tensors: Vec<TensorEntry>,
    history: Vec<LossComponents>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageEntry {
    vocab_len: usize,
    vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookEntry {
    n_tables: usize,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sys = &self.system;
        let mut entries: Vec<TensorEntry> = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            entries.push(TensorEntry { name, shape: t.shape().to_vec() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        sys.visit_params(&mut |name, t| push(name.to_string(), t));
        for (name, m) in &self.state.moments {
            push(format!("{MOMENT_M}{name}"), &m.m);
            push(format!("{MOMENT_V}{name}"), &m.v);
        }
        let languages = sys
            .modules
            .iter()
            .map(|(lang, m)| {
                let vocab_hash = sys.vocab_hashes.get(lang).cloned().unwrap_or_default();
                (lang.clone(), LanguageEntry { vocab_len: m.vocab_len(), vocab_hash })
            })
            .collect();
        let header = Header {
            model: sys.model.clone(),
            train: self.train.clone(),
            languages,
            codebook: sys.codebook.as_ref().map(|c| CodebookEntry { n_tables: c.n_tables(), entries: c.entries() }),
            step: self.state.step,
            is_final: self.is_final,
            tensors: entries,
            history: self.state.history.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut payload = &body[hlen..];
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(Error::Checkpoint(format!("payload truncated at tensor '{}'", entry.name)));
            }
            let data = payload[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            payload = &payload[n * 8..];
            let t = Tensor::new(entry.shape.clone(), data)?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{}'", entry.name)));
            }
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len())));
        }

        let mut system = System::new(header.model.clone())?;
        // Shapes are rebuilt from the config; values come from the file.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        for (lang, entry) in &header.languages {
            let module = LanguageModule::new(lang, entry.vocab_len, &header.model, &mut scratch)?;
            system.add_module(module, entry.vocab_hash.clone())?;
        }
        if let Some(cb) = &header.codebook {
            system.codebook = Some(Codebook::new(cb.n_tables, cb.entries, header.model.d_model, &mut scratch)?);
        }
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        system.visit_params_mut(&mut |name, param| match tensors.remove(name) {
            Some(t) if t.shape() == param.shape() => *param = t,
            Some(t) => mismatched.push(format!("{name}: file {:?} vs model {:?}", t.shape(), param.shape())),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensors {missing:?}, shape mismatches {mismatched:?}")));
        }

        let mut moments = BTreeMap::new();
        let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix(MOMENT_M)).map(String::from).collect();
        for name in names {
            let m = tensors.remove(&format!("{MOMENT_M}{name}")).unwrap();
            let v = tensors
                .remove(&format!("{MOMENT_V}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("first moment of '{name}' has no second moment")))?;
            moments.insert(name, Moments { m, v });
        }
        if let Some(stray) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{stray}'")));
        }
        let mut shapes = BTreeMap::new();
        system.visit_params(&mut |name, t| {
            shapes.insert(name.to_string(), t.shape().to_vec());
        });
        for (name, m) in &moments {
            match shapes.get(name) {
                Some(s) if s == m.m.shape() && s == m.v.shape() => {}
                _ => return Err(Error::Checkpoint(format!("moments for '{name}' do not match any parameter"))),
            }
        }
        let state = TrainState { step: header.step, moments, history: header.history };
        Ok(Checkpoint { system, state, train: header.train, is_final: header.is_final })
    }

    /// Writes through a temporary file so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads `path`; with `expected_vocab`, every listed language must carry
    /// the same vocabulary hash as the file.
    pub fn load(path: &Path, expected_vocab: Option<&BTreeMap<String, String>>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        if let Some(expected) = expected_vocab {
            ckpt.check_vocab(expected)?;
        }
        Ok(ckpt)
    }

    pub fn check_vocab(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        for (lang, hash) in expected {
            match self.system.vocab_hashes.get(lang) {
                Some(h) if h == hash => {}
                Some(h) => {
                    return Err(Error::Checkpoint(format!(
                        "language '{lang}' was trained with vocabulary {h}, current vocabulary is {hash}"
                    )))
                }
                None => return Err(Error::Checkpoint(format!("checkpoint has no language '{lang}'"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{init_system, DistanceMode};

    fn sample() -> Checkpoint {
        let model = ModelConfig { num_blocks: 1, d_model: 8, d_ff: 16, vocab_size: 16, max_len: 10, ..Default::default() };
        let train = TrainConfig { quantize: true, n_tables: 2, codebook_entries: 3, distance: DistanceMode::Max, ..TrainConfig::default() };
        let langs = [("x", 12, "aa".to_string()), ("y", 9, "bb".to_string())];
        let system = init_system(&model, &train, &langs).unwrap();
        let mut moments = BTreeMap::new();
        system.visit_params(&mut |name, t| {
            if name.starts_with("y.") {
                moments.insert(name.to_string(), Moments { m: t.map(|v| v * 0.5), v: t.map(|v| v * v) });
            }
        });
        let history = vec![LossComponents { total: 1.0 / 3.0, src_auto: Some(0.1), ..Default::default() }];
        Checkpoint { system, state: TrainState { step: 7, moments, history }, train, is_final: true }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_version_and_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let full = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&full[..full.len() - 8]).is_err());
    }

    #[test]
    fn vocab_guard() {
        let c = sample();
        let ok = BTreeMap::from([("x".to_string(), "aa".to_string())]);
        assert!(c.check_vocab(&ok).is_ok());
        let bad = BTreeMap::from([("x".to_string(), "zz".to_string())]);
        assert!(matches!(c.check_vocab(&bad), Err(Error::Checkpoint(_))));
    }
}
