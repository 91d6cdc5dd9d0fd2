use interlingua::data::{
    detokenize, normalize, tokenize, BpeModel, FilterOptions, LanguageData, ParallelCorpus, ToyTask,
};
use interlingua::Error;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,6}"
}

fn line() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
}

#[test]
fn bpe_examples() {
    let m = BpeModel::learn(&["aaab aaab"], 1).unwrap();
    assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
    assert_eq!(m.apply("aaab"), vec!["aa@@", "a@@", "b"]);
    let chars = BpeModel::learn(&["abc"], 0).unwrap();
    assert_eq!(chars.apply("abc"), vec!["a@@", "b@@", "c"]);
    let full = BpeModel::learn(&["abc abc abc"], 10).unwrap();
    assert_eq!(full.apply("abc"), vec!["abc"]);
}

#[test]
fn length_filter_drops_both_sides() {
    let long = vec!["w"; 51].join(" ");
    let src = vec!["a b".to_string(), long.clone(), "c d".to_string()];
    let tgt = vec!["x y".to_string(), "z".to_string(), "u v".to_string()];
    let (ls, lt) = (LanguageData::learn("s", &src, 10, 64).unwrap(), LanguageData::learn("t", &tgt, 10, 64).unwrap());
    let c = ParallelCorpus::from_lines(&src, &tgt, &ls, &lt, FilterOptions::default()).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.provenance.dropped_too_long, 1);
    assert_eq!(c.provenance.line_numbers, vec![0, 2]);
    assert_eq!(c.src[1], ls.encode_line("c d"));
    assert_eq!(c.tgt[1], lt.encode_line("u v"));

    let short = ParallelCorpus::from_lines(&src[..1], &tgt[..1], &ls, &lt, FilterOptions::default()).unwrap();
    assert_eq!(short.provenance.dropped(), 0);
    assert!(matches!(
        ParallelCorpus::from_lines(&src, &tgt[..2], &ls, &lt, FilterOptions::default()),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn vocabulary_respects_cap() {
    let task = ToyTask::generate(64, 0);
    let data = LanguageData::learn("x", &task.x, 200, 40).unwrap();
    assert!(data.vocab.len() <= 40);
}

#[test]
fn toy_languages_are_related() {
    let task = ToyTask::generate(16, 3);
    assert_eq!(task, ToyTask::generate(16, 3));
    assert_eq!((task.x.len(), task.y.len(), task.z.len()), (16, 16, 16));
    for (x, z) in task.x.iter().zip(&task.z) {
        assert_eq!(tokenize(x).len(), tokenize(z).len());
    }
}

proptest! {
    #[test]
    fn detokenize_inverts_tokenize_on_normalized_lines(l in line()) {
        let n = normalize(&l);
        prop_assert_eq!(detokenize(&tokenize(&n)), n);
    }

    #[test]
    fn detokenize_inverts_bpe(lines in prop::collection::vec(line(), 1..6), merges in 0i64..30) {
        let m = BpeModel::learn(&lines, merges).unwrap();
        for l in &lines {
            let n = normalize(l);
            prop_assert_eq!(detokenize(&m.apply(&n)), n);
        }
    }

    #[test]
    fn bpe_learning_is_deterministic(lines in prop::collection::vec(line(), 1..6), merges in 0i64..30) {
        let (a, b) = (BpeModel::learn(&lines, merges).unwrap(), BpeModel::learn(&lines, merges).unwrap());
        prop_assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn filtering_keeps_pairs_aligned(pairs in prop::collection::vec((line(), line(), 0usize..3), 1..20), max_words in 1usize..8) {
        let src: Vec<String> = pairs.iter().map(|(a, _, e)| if *e == 0 { String::new() } else { a.clone() }).collect();
        let tgt: Vec<String> = pairs.iter().map(|(_, b, _)| b.clone()).collect();
        let full: Vec<&String> = pairs.iter().map(|(a, _, _)| a).collect();
        let ls = LanguageData::learn("s", &full, 10, 256).unwrap();
        let lt = LanguageData::learn("t", &tgt, 10, 256).unwrap();
        let c = ParallelCorpus::from_lines(&src, &tgt, &ls, &lt, FilterOptions { max_words, max_tokens: None }).unwrap();
        prop_assert_eq!(c.len() + c.provenance.dropped(), src.len());
        for (i, &line_no) in c.provenance.line_numbers.iter().enumerate() {
            prop_assert_eq!(&c.src[i], &ls.encode_line(&src[line_no]));
            prop_assert_eq!(&c.tgt[i], &lt.encode_line(&tgt[line_no]));
        }
        prop_assert!(c.provenance.line_numbers.windows(2).all(|w| w[0] < w[1]));
    }
}
