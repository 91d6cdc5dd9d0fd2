use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transformer::{TokenId, BOS, EOS, NUM_RESERVED, PAD, UNK};

pub const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id mapping. Ids `0..4` are the reserved pad, bos, eos and unk
/// entries; the vocabulary file lists only the tokens after them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, TokenId> =
            all.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        for t in tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Contract(format!("vocabulary token {t:?} is empty or has whitespace")));
            }
            if index.insert(t.clone(), all.len() as TokenId).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            all.push(t);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Most frequent tokens first (ties in lexicographic order), capped so that
    /// the total size including reserved ids is at most `max_size`.
    pub fn build<S: AsRef<str>>(streams: &[Vec<S>], max_size: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::Config(format!("vocabulary cap {max_size} leaves no room for tokens")));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for s in streams {
            for t in s {
                let t = t.as_ref();
                if !RESERVED.contains(&t) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().take(max_size - NUM_RESERVED).map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens for `ids`, skipping pad, bos and eos. Unknown ids map to `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[NUM_RESERVED..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(String::from))
    }

    /// Leading 16 hex digits of the SHA-256 of the vocabulary file contents.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn frequency_order_and_cap() {
        let v = Vocabulary::build(&[toks("b a c a b a")], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), UNK);
        assert!(Vocabulary::build(&[toks("a")], 4).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&[toks("x y")], 10).unwrap();
        let ids = v.encode(&["y", "q", "x"]);
        assert_eq!(ids, vec![5, UNK, 4]);
        assert_eq!(v.decode(&[BOS, 5, 4, EOS]), vec!["y", "x"]);
    }

    #[test]
    fn text_round_trip_keeps_hash() {
        let v = Vocabulary::build(&[toks("the cat on the mat")], 50).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert_eq!(v.content_hash().len(), 16);
        let other = Vocabulary::build(&[toks("the dog")], 50).unwrap();
        assert_ne!(other.content_hash(), v.content_hash());
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::from_text("a\na\n").is_err());
        assert!(Vocabulary::from_text("<s>\n").is_err());
    }
}
