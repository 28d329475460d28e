#![allow(clippy::needless_range_loop)]

use nsm_core::concepts::{build_vocabulary, build_vocabulary_with_std, concept_matrix};
use nsm_core::diffmath::gradcheck::{max_relative_error, numerical_gradient, DEFAULT_EPS};
use nsm_core::diffmath::{lstm_cell, lstm_init, LstmVars, Tape, Tensor};
use nsm_core::instructor::{
    decode_instructions, encode_question, tag_words, tokenize, Lexicon, DEFAULT_CONTENT_NOISE,
    DEFAULT_FUNCTION_NOISE,
};
use nsm_core::synthgen::{default_ontology, function_words};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn lstm_params(rng: &mut ChaCha8Rng, d: usize) -> [Tensor; 3] {
    let [a, b, mut c] = lstm_init(d, d, || rng.random_range(-0.5..0.5));
    for x in c.data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    [a, b, c]
}

fn lstm_vars(tape: &mut Tape<'_>, p: &[Tensor; 3]) -> LstmVars {
    LstmVars {
        w_input: tape.constant(p[0].clone()),
        w_hidden: tape.constant(p[1].clone()),
        bias: tape.constant(p[2].clone()),
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn tagging_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 5;
    // three concepts plus c′ in the last row
    let c = random(&mut rng, &[4, d], 1.0);
    let w = random(&mut rng, &[d, d], 1.0);
    let words = random(&mut rng, &[2, d], 1.0);
    let mut tape = Tape::new();
    let (cv, wv, xv) = (
        tape.constant(c.clone()),
        tape.constant(w.clone()),
        tape.constant(words.clone()),
    );
    let tagged = tag_words(&mut tape, xv, wv, cv).unwrap();
    for i in 0..2 {
        let x = words.row(i);
        let mut scores = Vec::new();
        for k in 0..4 {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += x[a] * w.at(a, b) * c.at(k, b);
                }
            }
            scores.push(s);
        }
        let p = softmax(&scores);
        let mut expect = vec![0.0; d];
        for a in 0..d {
            expect[a] = p[3] * x[a];
            for k in 0..3 {
                expect[a] += p[k] * c.at(k, a);
            }
        }
        let got = tape.value(tagged.words).row(i);
        for a in 0..d {
            assert!((got[a] - expect[a]).abs() < 1e-12, "word {i} coord {a}");
        }
        let tags = tape.value(tagged.tags).row(i);
        for k in 0..4 {
            assert!((tags[k] - p[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_question_is_rejected() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::identity(3));
    let w = tape.constant(Tensor::identity(3));
    let words = tape.constant(Tensor::zeros(&[0]));
    assert!(tag_words(&mut tape, words, w, c).is_err());
}

#[test]
fn single_word_summary_is_one_lstm_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let p = lstm_params(&mut rng, d);
    let v = random(&mut rng, &[1, d], 1.0);
    let mut tape = Tape::new();
    let lstm = lstm_vars(&mut tape, &p);
    let vv = tape.constant(v.clone());
    let (q, _) = encode_question(&mut tape, &lstm, vv).unwrap();
    let mut t2 = Tape::new();
    let l2 = lstm_vars(&mut t2, &p);
    let x = t2.constant(Tensor::vector(v.row(0).to_vec()));
    let h = t2.constant(Tensor::zeros(&[d]));
    let c = t2.constant(Tensor::zeros(&[d]));
    let (h1, _) = lstm_cell(&mut t2, &l2, x, h, c).unwrap();
    assert_eq!(tape.value(q).data(), t2.value(h1).data());
}

#[test]
fn encoder_gradient_wrt_words_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 8;
    let p = lstm_params(&mut rng, d);
    let head = random(&mut rng, &[d], 1.0);
    let words = random(&mut rng, &[3, d], 1.0);
    let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let lstm = lstm_vars(&mut tape, &p);
        let xv = tape.param(x);
        let (q, _) = encode_question(&mut tape, &lstm, xv).unwrap();
        let hv = tape.constant(head.clone());
        let prod = tape.mul(q, hv).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap().get(xv).cloned();
        (tape.value(loss).item(), g)
    };
    let analytic = eval(&words).1.unwrap();
    let numeric = numerical_gradient(&words, DEFAULT_EPS, |x| eval(x).0);
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn reversing_the_question_changes_the_summary() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d = 6;
    let p = lstm_params(&mut rng, d);
    let words = random(&mut rng, &[4, d], 1.0);
    let reversed = Tensor::from_rows(
        &(0..4)
            .rev()
            .map(|i| words.row(i).to_vec())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let summary = |v: &Tensor| {
        let mut tape = Tape::new();
        let lstm = lstm_vars(&mut tape, &p);
        let vv = tape.constant(v.clone());
        let (q, _) = encode_question(&mut tape, &lstm, vv).unwrap();
        tape.value(q).data().to_vec()
    };
    let (a, b) = (summary(&words), summary(&reversed));
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn function_words_tag_mostly_as_default_concept() {
    let ontology = default_ontology();
    let vocab = build_vocabulary(&ontology, 32, 9).unwrap();
    let fw = function_words(&vocab);
    let lexicon = Lexicon::build(
        &vocab,
        &fw,
        9,
        DEFAULT_CONTENT_NOISE,
        DEFAULT_FUNCTION_NOISE,
    )
    .unwrap();
    let text: Vec<String> = fw.clone();
    let ids = lexicon.encode(&text).unwrap();
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| lexicon.entries()[i].offset.clone())
        .collect();
    let mut tape = Tape::new();
    let c = tape.constant(concept_matrix(&vocab));
    let w = tape.constant(Tensor::identity(32));
    let words = tape.constant(Tensor::from_rows(&rows).unwrap());
    let tagged = tag_words(&mut tape, words, w, c).unwrap();
    let tags = tape.value(tagged.tags);
    let k = tags.cols();
    for i in 0..tags.rows() {
        let row = tags.row(i);
        let best_concept = row[..k - 1].iter().cloned().fold(0.0, f64::max);
        assert!(row[k - 1] > best_concept, "word `{}`", text[i]);
    }
}

#[test]
fn group_names_start_at_default_plus_property_embedding() {
    let vocab = build_vocabulary_with_std(&default_ontology(), 16, 4, 0.5).unwrap();
    let lexicon = Lexicon::build(
        &vocab,
        &function_words(&vocab),
        4,
        DEFAULT_CONTENT_NOISE,
        DEFAULT_FUNCTION_NOISE,
    )
    .unwrap();
    let mut named = 0;
    for (g, group) in vocab.groups().iter().enumerate() {
        let Some(id) = lexicon.token_id(&group.name) else {
            continue;
        };
        named += 1;
        for (k, x) in lexicon.entries()[id].offset.iter().enumerate() {
            let want = vocab.default_embedding()[k] + vocab.property_embeddings()[g][k];
            assert_eq!(*x, want, "{} dim {k}", group.name);
        }
    }
    assert!(
        named >= vocab.attribute_count(),
        "{named} group names in the lexicon"
    );
}

#[test]
fn tokenizer_lowercases_and_strips_punctuation() {
    assert_eq!(
        tokenize("What color is the Cat?"),
        vec!["what", "color", "is", "the", "cat"]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instructions_lie_in_the_hull_of_the_words(seed in any::<u64>(), p in 1usize..6, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let params = lstm_params(&mut rng, d);
        let v = random(&mut rng, &[p, d], 2.0);
        let inputs = random(&mut rng, &[n + 1, d], 1.0);
        let mut tape = Tape::new();
        let lstm = lstm_vars(&mut tape, &params);
        let vv = tape.constant(v.clone());
        let iv = tape.constant(inputs);
        let (q, _) = encode_question(&mut tape, &lstm, vv).unwrap();
        let dec = decode_instructions(&mut tape, &lstm, iv, q, vv, n).unwrap();
        prop_assert_eq!(dec.instructions.len(), n + 1);
        for (r, a) in dec.instructions.iter().zip(&dec.attention) {
            let attn: &Tensor = tape.value(*a);
            prop_assert!((attn.sum() - 1.0).abs() < 1e-6);
            let r = tape.value(*r);
            for col in 0..d {
                let lo = (0..p).map(|i| v.at(i, col)).fold(f64::INFINITY, f64::min);
                let hi = (0..p).map(|i| v.at(i, col)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.data()[col] >= lo - 1e-12 && r.data()[col] <= hi + 1e-12);
            }
        }
    }
}
