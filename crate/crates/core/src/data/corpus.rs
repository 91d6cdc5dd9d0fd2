use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::bpe::{detokenize, BpeModel};
use crate::data::text::tokenize;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::transformer::{TokenId, EOS};

/// Everything needed to turn raw lines of one language into ids and back.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageData {
    pub language: String,
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl LanguageData {
    /// Learns BPE and a capped vocabulary from raw `lines`.
    pub fn learn<S: AsRef<str>>(language: &str, lines: &[S], num_merges: i64, vocab_cap: usize) -> Result<Self> {
        let bpe = BpeModel::learn(lines, num_merges)?;
        let segmented: Vec<Vec<String>> = lines.iter().map(|l| bpe.apply(l.as_ref())).collect();
        let vocab = Vocabulary::build(&segmented, vocab_cap)?;
        Ok(LanguageData { language: language.to_string(), bpe, vocab })
    }

    /// Subword ids for `line`, terminated by `EOS`.
    pub fn encode_line(&self, line: &str) -> Vec<TokenId> {
        let mut ids = self.vocab.encode(&self.bpe.apply(line));
        ids.push(EOS);
        ids
    }

    /// Word-level text for `ids` with subwords rejoined.
    pub fn decode_ids(&self, ids: &[TokenId]) -> String {
        detokenize(&self.vocab.decode(ids))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Pairs with more words than this on either side are dropped.
    pub max_words: usize,
    /// Pairs whose id sequence (with `EOS`) is longer than this are dropped.
    pub max_tokens: Option<usize>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { max_words: 50, max_tokens: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub src_path: Option<PathBuf>,
    pub tgt_path: Option<PathBuf>,
    pub total_pairs: usize,
    pub dropped_too_long: usize,
    pub dropped_too_many_tokens: usize,
    pub dropped_empty: usize,
    /// Zero-based input line of each retained pair.
    pub line_numbers: Vec<usize>,
}

impl Provenance {
    pub fn dropped(&self) -> usize {
        self.dropped_too_long + self.dropped_too_many_tokens + self.dropped_empty
    }
}

/// Line-aligned id sequences for two languages.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
    pub provenance: Provenance,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Side of the corpus written in `lang`.
    pub fn side(&self, lang: &str) -> Option<&[Vec<TokenId>]> {
        if lang == self.src_lang {
            Some(&self.src)
        } else if lang == self.tgt_lang {
            Some(&self.tgt)
        } else {
            None
        }
    }

    pub fn from_lines<S: AsRef<str>>(
        src_lines: &[S],
        tgt_lines: &[S],
        src: &LanguageData,
        tgt: &LanguageData,
        opts: FilterOptions,
    ) -> Result<Self> {
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Alignment(format!(
                "{} source lines vs {} target lines",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let mut out = ParallelCorpus {
            src_lang: src.language.clone(),
            tgt_lang: tgt.language.clone(),
            src: Vec::new(),
            tgt: Vec::new(),
            provenance: Provenance { total_pairs: src_lines.len(), ..Provenance::default() },
        };
        for (i, (a, b)) in src_lines.iter().zip(tgt_lines).enumerate() {
            let (a, b) = (a.as_ref(), b.as_ref());
            let (wa, wb) = (tokenize(a).len(), tokenize(b).len());
            if wa == 0 || wb == 0 {
                out.provenance.dropped_empty += 1;
                continue;
            }
            if wa > opts.max_words || wb > opts.max_words {
                out.provenance.dropped_too_long += 1;
                continue;
            }
            let (ia, ib) = (src.encode_line(a), tgt.encode_line(b));
            if opts.max_tokens.is_some_and(|m| ia.len() > m || ib.len() > m) {
                out.provenance.dropped_too_many_tokens += 1;
                continue;
            }
            out.src.push(ia);
            out.tgt.push(ib);
            out.provenance.line_numbers.push(i);
        }
        Ok(out)
    }

    /// Reads two line-aligned UTF-8 files.
    pub fn load(
        src_path: &Path,
        tgt_path: &Path,
        src: &LanguageData,
        tgt: &LanguageData,
        opts: FilterOptions,
    ) -> Result<Self> {
        let (a, b) = (read_lines(src_path)?, read_lines(tgt_path)?);
        if a.len() != b.len() {
            return Err(Error::Alignment(format!(
                "{} has {} lines but {} has {} (first unmatched line {})",
                src_path.display(),
                a.len(),
                tgt_path.display(),
                b.len(),
                a.len().min(b.len()) + 1
            )));
        }
        let mut corpus = Self::from_lines(&a, &b, src, tgt, opts)?;
        corpus.provenance.src_path = Some(src_path.to_path_buf());
        corpus.provenance.tgt_path = Some(tgt_path.to_path_buf());
        Ok(corpus)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}
