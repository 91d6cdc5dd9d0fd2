//! Bundled synthetic parallel task.
//!
//! Language `x` draws sentences from a small lexicon. Language `y` is `x`
//! with every word substituted through a fixed dictionary and the word order
//! reversed. Language `z` is `x` with words renamed but order kept.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X_WORDS: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ro", "si", "tu", "va", "we", "yo", "zi"];
const Y_WORDS: [&str; 12] = ["bar", "cel", "dun", "fok", "gim", "hal", "jor", "kes", "lun", "mor", "nis", "pol"];
const Z_WORDS: [&str; 12] = ["qa", "qe", "qi", "qo", "qu", "xa", "xe", "xi", "xo", "xu", "ja", "je"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub z: Vec<String>,
}

impl ToyTask {
    /// `pairs` distinct `x` sentences of 4 to 6 words.
    pub fn generate(pairs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(pairs);
        while sentences.len() < pairs {
            let len = rng.random_range(4..=6);
            let s: Vec<usize> = (0..len).map(|_| rng.random_range(0..X_WORDS.len())).collect();
            if seen.insert(s.clone()) {
                sentences.push(s);
            }
        }
        let render = |words: &[&str], s: &mut dyn Iterator<Item = usize>| {
            s.map(|i| words[i]).collect::<Vec<_>>().join(" ")
        };
        ToyTask {
            x: sentences.iter().map(|s| render(&X_WORDS, &mut s.iter().copied())).collect(),
            y: sentences.iter().map(|s| render(&Y_WORDS, &mut s.iter().rev().copied())).collect(),
            z: sentences.iter().map(|s| render(&Z_WORDS, &mut s.iter().copied())).collect(),
        }
    }
}
