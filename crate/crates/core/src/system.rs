//! A set of language modules sharing one latent space.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::{pool, quantize, Codebook, CODEBOOK_PREFIX};
use crate::tensor::{Tape, Tensor};
use crate::transformer::{encode, greedy_decode, Dropout, LanguageModule, ModelConfig, Params, TokenBatch, TokenId};

/// Rows per inference chunk.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub model: ModelConfig,
    pub modules: BTreeMap<String, LanguageModule>,
    pub codebook: Option<Codebook>,
    /// Content hash of the vocabulary each module was built for.
    pub vocab_hashes: BTreeMap<String, String>,
}

/// Encoder states consumed by decoders, with the source keep-mask that
/// travels alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// `[B, T, d_model]`
    pub raw: Tensor,
    pub keep: Vec<bool>,
}

impl System {
    pub fn new(model: ModelConfig) -> Result<Self> {
        model.validate()?;
        Ok(System { model, modules: BTreeMap::new(), codebook: None, vocab_hashes: BTreeMap::new() })
    }

    pub fn add_module(&mut self, module: LanguageModule, vocab_hash: String) -> Result<()> {
        if module.d_model() != self.model.d_model {
            return Err(Error::Compatibility(format!(
                "module '{}' has d_model {} but the system uses {}",
                module.language,
                module.d_model(),
                self.model.d_model
            )));
        }
        if self.modules.contains_key(&module.language) {
            return Err(Error::Config(format!("language '{}' already present", module.language)));
        }
        self.vocab_hashes.insert(module.language.clone(), vocab_hash);
        self.modules.insert(module.language.clone(), module);
        Ok(())
    }

    pub fn module(&self, lang: &str) -> Result<&LanguageModule> {
        self.modules.get(lang).ok_or_else(|| {
            let known: Vec<&str> = self.modules.keys().map(String::as_str).collect();
            Error::Config(format!("unknown language '{lang}' (known: {known:?})"))
        })
    }

    fn encode_states(&self, lang: &str, seqs: &[Vec<TokenId>], quantized: bool) -> Result<Latent> {
        let m = self.module(lang)?;
        let batch = TokenBatch::from_sequences(seqs)?;
        let keep = batch.keep_mask();
        let mut tape = Tape::new();
        let (bound, _) = m.bind(&mut tape, false);
        let mut raw = encode(&mut tape, &bound, &self.model, &batch, &mut Dropout::off())?;
        if let (true, Some(cb)) = (quantized, &self.codebook) {
            let (cb, _) = cb.bind(&mut tape, false);
            raw = quantize(&mut tape, &cb, raw, Some(&keep))?.output;
        }
        Ok(Latent { raw: tape.value(raw).clone(), keep })
    }

    /// States as the decoders see them (quantized when a codebook is present).
    pub fn encode_latent(&self, lang: &str, seqs: &[Vec<TokenId>]) -> Result<Latent> {
        self.encode_states(lang, seqs, true)
    }

    /// Mean-pooled pre-quantization sentence vectors `[B, d_model]`.
    pub fn pooled(&self, lang: &str, seqs: &[Vec<TokenId>]) -> Result<Tensor> {
        let latent = self.encode_states(lang, seqs, false)?;
        let mut tape = Tape::new();
        let raw = tape.constant(latent.raw);
        let p = pool(&mut tape, raw, &latent.keep)?;
        Ok(tape.value(p).clone())
    }

    /// Greedy decoding with `lang`'s decoder. Rows keep `BOS`/`EOS`.
    pub fn decode(&self, lang: &str, latent: &Latent) -> Result<Vec<Vec<TokenId>>> {
        let m = self.module(lang)?;
        greedy_decode(m, &self.model, &latent.raw, &latent.keep, self.model.max_len)
    }

    /// Encodes with `src` and greedily decodes with `tgt`, in chunks.
    pub fn translate(&self, src: &str, tgt: &str, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<TokenId>>> {
        self.module(tgt)?;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let latent = self.encode_latent(src, chunk)?;
            out.extend(self.decode(tgt, &latent)?);
        }
        Ok(out)
    }

    /// Visits every parameter as `(name, tensor)` in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (lang, m) in &self.modules {
            m.visit(lang, f);
        }
        if let Some(cb) = &self.codebook {
            cb.visit(CODEBOOK_PREFIX, f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (lang, m) in &mut self.modules {
            m.visit_mut(lang, f);
        }
        if let Some(cb) = &mut self.codebook {
            cb.visit_mut(CODEBOOK_PREFIX, f);
        }
    }

    /// SHA-256 over parameter names, shapes and bit patterns (first 16 hex digits).
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |name, t| {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        hex::encode(&h.finalize()[..8])
    }
}
