//! Byte-pair-encoding subword segmentation.
//!
//! Merges are learned greedily: the most frequent adjacent symbol pair is
//! merged first, ties going to the lexicographically smallest pair. Applied
//! segmentations mark every non-final subword of a word with `@@`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::text::tokenize;
use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";
const HEADER: &str = "#version: bpe-merges";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: BTreeMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges from whitespace-tokenized `lines`.
    /// Stops early once no adjacent pair remains.
    pub fn learn<S: AsRef<str>>(lines: &[S], num_merges: i64) -> Result<Self> {
        if num_merges < 0 {
            return Err(Error::Config(format!("num_merges must be >= 0, got {num_merges}")));
        }
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in lines {
            for w in tokenize(line.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Degenerate("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, u64)> =
            word_counts.into_iter().map(|(w, c)| (w.chars().map(String::from).collect(), c)).collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (symbols, count) in &words {
                for p in symbols.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += count;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let Some(best) = pairs.iter().fold(None, |best: Option<(&(&str, &str), u64)>, (p, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            }) else {
                break;
            };
            let pair = (best.0 .0.to_string(), best.0 .1.to_string());
            for (symbols, _) in &mut words {
                merge_pair(symbols, &pair);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(merges))
    }

    /// Subword segmentation of one word, continuation markers included.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r);
            let Some((_, p)) = best else { break };
            let pair = (p[0].clone(), p[1].clone());
            merge_pair(&mut symbols, &pair);
        }
        let last = symbols.len().saturating_sub(1);
        symbols.into_iter().enumerate().map(|(i, s)| if i < last { s + CONTINUATION } else { s }).collect()
    }

    /// Tokenizes `line` and segments every word.
    pub fn apply(&self, line: &str) -> Vec<String> {
        tokenize(line).iter().flat_map(|w| self.segment_word(w)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.merges.len());
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err("missing header".into()))?;
        let count: usize = header
            .strip_prefix(HEADER)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| parse_err(format!("bad header {header:?}")))?;
        let merges = lines
            .enumerate()
            .map(|(i, l)| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                    _ => Err(parse_err(format!("line {}: expected two symbols, got {l:?}", i + 2))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if merges.len() != count {
            return Err(parse_err(format!("header announces {count} merges, found {}", merges.len())));
        }
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn merge_pair(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Joins subwords back into words, removing continuation markers.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn most_frequent_pair_first() {
        let m = BpeModel::learn(&["aaab aaab"], 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "a")]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = BpeModel::learn(&["ba dc"], 1).unwrap();
        assert_eq!(m.merges(), &[pair("b", "a")]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::learn(&["abc"], 0).unwrap();
        assert_eq!(m.apply("abc"), vec!["a@@", "b@@", "c"]);
        assert!(matches!(BpeModel::learn(&["abc"], -1), Err(Error::Config(_))));
        assert!(BpeModel::learn(&[""], 3).is_err());
    }

    #[test]
    fn hand_application() {
        let m = BpeModel::from_merges(vec![pair("a", "a")]);
        assert_eq!(m.apply("aaab"), vec!["aa@@", "a@@", "b"]);
    }

    #[test]
    fn learned_word_is_one_token() {
        let m = BpeModel::learn(&["hello hello world"], 100).unwrap();
        assert_eq!(m.apply("hello"), vec!["hello"]);
        assert_eq!(m.apply("world"), vec!["world"]);
    }

    #[test]
    fn unknown_chars_pass_through() {
        let m = BpeModel::learn(&["ab ab"], 5).unwrap();
        assert_eq!(m.apply("abz"), vec!["ab@@", "z"]);
    }

    #[test]
    fn reapplication_is_a_fixed_point() {
        let corpus = ["the cat sat on the mat", "the dog sat"];
        let m = BpeModel::learn(&corpus, 8).unwrap();
        for line in corpus {
            let once = detokenize(&m.apply(line));
            assert_eq!(once, line);
            assert_eq!(m.apply(&once), m.apply(line));
        }
    }

    #[test]
    fn text_round_trip() {
        let m = BpeModel::learn(&["low lower lowest newer wider"], 10).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("#version: bpe-merges 10\n"));
        let back = BpeModel::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::from_text("#version: bpe-merges 2\na b\n", Path::new("mem")).is_err());
    }

    #[test]
    fn detokenize_joins_markers() {
        assert_eq!(detokenize(&["aa@@", "a@@", "b", "c@@", "d"]), "aaab cd");
        assert_eq!(detokenize::<&str>(&[]), "");
    }
}
