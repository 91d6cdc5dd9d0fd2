mod common;

use common::*;
use interlingua::tensor::{Tape, Tensor};
use interlingua::transformer::{
    decode_teacher_forced, encode, greedy_decode, positional_encoding, Dropout, LanguageModule, TokenBatch, TokenId,
    BOS, PAD,
};
use interlingua::Error;
use proptest::prelude::*;

const VOCAB: usize = 12;

fn module(lang: &str, seed: u64) -> LanguageModule {
    LanguageModule::new(lang, VOCAB, &tiny_model(), &mut rng(seed)).unwrap()
}

fn encoded(m: &LanguageModule, seqs: &[Vec<TokenId>]) -> Tensor {
    let mut tape = Tape::new();
    let (b, _) = m.bind(&mut tape, false);
    let batch = TokenBatch::from_sequences(seqs).unwrap();
    let h = encode(&mut tape, &b, &tiny_model(), &batch, &mut Dropout::off()).unwrap();
    tape.value(h).clone()
}

fn decoder_logits(m: &LanguageModule, latent: &Tensor, keep: &[bool], target_in: &[Vec<TokenId>]) -> Tensor {
    let mut tape = Tape::new();
    let (b, _) = m.bind(&mut tape, false);
    let l = tape.constant(latent.clone());
    let batch = TokenBatch::from_sequences(target_in).unwrap();
    let out = decode_teacher_forced(&mut tape, &b, &tiny_model(), l, keep, &batch, &mut Dropout::off()).unwrap();
    tape.value(out.logits).clone()
}

fn sentence() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(4u32..VOCAB as u32, 1..6)
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding(10, 8).unwrap();
    assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1., 0., 1.]);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
}

#[test]
fn encode_shape_and_batch_independence() {
    let m = module("x", 0);
    let s = vec![5u32, 6, 7];
    let h = encoded(&m, &[s.clone(), vec![4, 9], s]);
    assert_eq!(h.shape(), &[3, 3, 8]);
    let row = 3 * 8;
    assert_eq!(&h.data()[..row], &h.data()[2 * row..]);
}

#[test]
fn overlong_input_is_rejected() {
    let m = module("x", 0);
    let mut tape = Tape::new();
    let (b, _) = m.bind(&mut tape, false);
    let long = vec![vec![5u32; 13]];
    let batch = TokenBatch::from_sequences(&long).unwrap();
    let r = encode(&mut tape, &b, &tiny_model(), &batch, &mut Dropout::off());
    assert!(matches!(r, Err(Error::Length { len: 13, max_len: 12 })));
}

#[test]
fn modules_compose_across_languages() {
    let (x, y) = (module("x", 1), module("y", 2));
    let src = vec![vec![5u32, 6, 7, 8]];
    let h = encoded(&x, &src);
    let out = greedy_decode(&y, &tiny_model(), &h, &[true; 4], 6).unwrap();
    assert_eq!(out[0][0], BOS);

    let wide = interlingua::transformer::ModelConfig { d_model: 12, num_heads: 2, ..tiny_model() };
    let z = LanguageModule::new("z", VOCAB, &wide, &mut rng(3)).unwrap();
    let r = greedy_decode(&z, &wide, &h, &[true; 4], 6);
    assert!(matches!(r, Err(Error::Compatibility(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoder_is_causal(target in prop::collection::vec(4u32..VOCAB as u32, 2..7), t_pick in 0usize..6, seed in 0u64..50, replacement in 4u32..VOCAB as u32) {
        let m = module("y", seed);
        let latent = randn(&[1, 3, 8], &mut rng(seed + 100));
        let keep = [true; 3];
        let t = t_pick % (target.len() - 1);
        let mut perturbed = target.clone();
        for (k, tok) in perturbed.iter_mut().enumerate().skip(t + 1) {
            *tok = (replacement + k as u32) % (VOCAB as u32 - 4) + 4;
        }
        let a = decoder_logits(&m, &latent, &keep, &[target.clone()]);
        let b = decoder_logits(&m, &latent, &keep, &[perturbed]);
        for pos in 0..=t {
            let span = pos * VOCAB..(pos + 1) * VOCAB;
            prop_assert_eq!(&a.data()[span.clone()], &b.data()[span]);
        }
    }

    #[test]
    fn padding_leaves_states_unchanged(s in sentence(), other_len in 1usize..8, seed in 0u64..50) {
        let m = module("x", seed);
        let alone = encoded(&m, &[s.clone()]);
        // Batching with a longer sentence pads `s` on the right.
        let longer = vec![4u32; s.len() + other_len];
        let padded = encoded(&m, &[s.clone(), longer]);
        let width = s.len() + other_len;
        for pos in 0..s.len() {
            for d in 0..8 {
                let diff = (alone.data()[pos * 8 + d] - padded.data()[pos * 8 + d]).abs();
                prop_assert!(diff <= 1e-9, "position {} dim {} differs by {}", pos, d, diff);
            }
        }
        prop_assert_eq!(padded.shape(), &[2, width, 8]);
    }

    #[test]
    fn pad_ids_never_leak(s in sentence(), seed in 0u64..50) {
        let m = module("x", seed);
        let mut with_pad = s.clone();
        with_pad.push(PAD);
        with_pad.push(PAD);
        let a = encoded(&m, &[s.clone()]);
        let b = encoded(&m, &[with_pad]);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-9));
    }
}
