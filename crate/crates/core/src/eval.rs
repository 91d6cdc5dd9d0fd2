//! Corpus BLEU and the interlingua evaluation: decode one language's decoder
//! from both encoders and compare the outputs with each other and with the
//! reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LanguageData, ParallelCorpus};
use crate::error::{Error, Result};
use crate::system::{Latent, System};
use crate::transformer::TokenId;

const MAX_ORDER: usize = 4;
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> BTreeMap<&'a [&'a str], u64> {
    let mut counts = BTreeMap::new();
    for g in words.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

/// Corpus-level BLEU over already-tokenized lines, with clipped 1..4-gram
/// precisions and no smoothing.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::Contract("BLEU needs at least one hypothesis line".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!("{} hypothesis lines vs {} reference lines", hyps.len(), refs.len())));
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
        }
    }
    let precisions: [f64; MAX_ORDER] =
        std::array::from_fn(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * brevity_penalty * log_mean.exp()).min(100.0)
    };
    Ok(BleuReport { score, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

/// BLEU over whitespace-separated lines.
pub fn bleu_lines<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<BleuReport> {
    let split = |lines: &[S]| -> Vec<Vec<String>> {
        lines.iter().map(|l| l.as_ref().split_whitespace().map(String::from).collect()).collect()
    };
    bleu(&split(hyps), &split(refs))
}

/// The three scores for one decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Language whose decoder produced both outputs.
    pub decoder: String,
    /// The other language, whose encoder feeds the translation output.
    pub other: String,
    /// Own encoder output vs the reference.
    pub autoencoder: BleuReport,
    /// Other encoder output vs the reference.
    pub mt: BleuReport,
    /// Translation output scored with the autoencoding output as reference.
    pub at: BleuReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterlinguaReport {
    pub directions: Vec<DirectionReport>,
}

impl InterlinguaReport {
    /// One JSON object per decoder direction, newline-separated.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for d in &self.directions {
            out.push_str(&serde_json::to_string(d).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>12} {:>8} {:>8}\n", "decoder", "Autoencoder", "MT", "A-T");
        for d in &self.directions {
            writeln!(
                out,
                "{:<10} {:>12.2} {:>8.2} {:>8.2}",
                d.decoder, d.autoencoder.score, d.mt.score, d.at.score
            )
            .unwrap();
        }
        out
    }
}

/// Scores autoencoding and translation outputs of one decoder.
pub fn score_interlingua(
    decoder: &str,
    other: &str,
    autoencoded: &[String],
    translated: &[String],
    references: &[String],
) -> Result<DirectionReport> {
    Ok(DirectionReport {
        decoder: decoder.to_string(),
        other: other.to_string(),
        autoencoder: bleu_lines(autoencoded, references)?,
        mt: bleu_lines(translated, references)?,
        at: bleu_lines(translated, autoencoded)?,
    })
}

fn decode_words(system: &System, data: &LanguageData, latent: &Latent) -> Result<Vec<String>> {
    Ok(system.decode(&data.language, latent)?.iter().map(|ids| data.decode_ids(ids)).collect())
}

/// Runs the interlingua measure from precomputed encodings `e_own` (from the
/// decoder's language) and `e_other` (from the other language).
pub fn interlingua_from_latents(
    system: &System,
    decoder: &LanguageData,
    other: &str,
    e_own: &Latent,
    e_other: &Latent,
    references: &[String],
) -> Result<DirectionReport> {
    let auto = decode_words(system, decoder, e_own)?;
    let mt = decode_words(system, decoder, e_other)?;
    score_interlingua(&decoder.language, other, &auto, &mt, references)
}

/// Encodes both sides of `test`, greedy-decodes `decoder`'s language from
/// each, and scores the three BLEUs. References are read only for scoring.
pub fn interlingua_eval(system: &System, decoder: &LanguageData, test: &ParallelCorpus) -> Result<DirectionReport> {
    let lang = decoder.language.as_str();
    system.module(lang)?;
    let own = test
        .side(lang)
        .ok_or_else(|| Error::Config(format!("test corpus ({}, {}) has no side '{lang}'", test.src_lang, test.tgt_lang)))?;
    let other_lang = if lang == test.src_lang { &test.tgt_lang } else { &test.src_lang };
    let other = test.side(other_lang).expect("corpus has both sides");
    let (mut auto, mut mt) = (Vec::new(), Vec::new());
    for start in (0..test.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(test.len());
        auto.extend(decode_words(system, decoder, &system.encode_latent(lang, &own[start..end])?)?);
        mt.extend(decode_words(system, decoder, &system.encode_latent(other_lang, &other[start..end])?)?);
    }
    let references: Vec<String> = own.iter().map(|ids| decoder.decode_ids(ids)).collect();
    score_interlingua(lang, other_lang, &auto, &mt, &references)
}

/// Both decoder directions of a two-language test set.
pub fn interlingua_eval_both(
    system: &System,
    src: &LanguageData,
    tgt: &LanguageData,
    test: &ParallelCorpus,
) -> Result<InterlinguaReport> {
    Ok(InterlinguaReport { directions: vec![interlingua_eval(system, tgt, test)?, interlingua_eval(system, src, test)?] })
}

/// Translates `src_ids` from `src` into `tgt`, returning word-level lines.
pub fn translate_words(
    system: &System,
    src: &str,
    tgt: &LanguageData,
    src_ids: &[Vec<TokenId>],
) -> Result<Vec<String>> {
    Ok(system.translate(src, &tgt.language, src_ids)?.iter().map(|ids| tgt.decode_ids(ids)).collect())
}

/// BLEU of translating `src_ids` against `ref_ids`, plus the hypotheses.
pub fn evaluate_direction(
    system: &System,
    src: &str,
    tgt: &LanguageData,
    src_ids: &[Vec<TokenId>],
    ref_ids: &[Vec<TokenId>],
) -> Result<(BleuReport, Vec<String>)> {
    let hyps = translate_words(system, src, tgt, src_ids)?;
    let refs: Vec<String> = ref_ids.iter().map(|ids| tgt.decode_ids(ids)).collect();
    Ok((bleu_lines(&hyps, &refs)?, hyps))
}
