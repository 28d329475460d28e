//! Question → instruction sequence: tagging words against the concept
//! vocabulary, LSTM encoding, and an attention decoder that emits `N+1`
//! instructions.

mod lexicon;

pub use lexicon::{
    tokenize, LexEntry, Lexicon, DEFAULT_CONTENT_NOISE, DEFAULT_FUNCTION_NOISE,
    LEXICON_FORMAT_VERSION,
};

use serde::Serialize;

use crate::diffmath::{lstm_cell, LstmVars, MathError, Tape, Tensor, Var};

/// Tagged words `V` (P×d) and the per-word distributions over concepts
/// followed by `c′` (P×(|C|+1)).
#[derive(Debug, Clone, Copy)]
pub struct Tagged {
    pub words: Var,
    pub tags: Var,
}

/// `P_i = softmax(w_iᵀ W C)`, `v_i = P_i(c′)·w_i + Σ_c P_i(c)·c`.
///
/// `concepts` holds one row per concept with `c′` as the last row.
pub fn tag_words(
    tape: &mut Tape<'_>,
    words: Var,
    tagger: Var,
    concepts: Var,
) -> Result<Tagged, MathError> {
    let w = tape.value(words);
    if w.rank() != 2 {
        return Err(MathError::Contract("tag_words: empty question".into()));
    }
    let k = tape.value(concepts).rows();
    let projected = tape.matmul(words, tagger)?;
    let logits = tape.matmul_bt(projected, concepts)?;
    let tags = tape.softmax(logits)?;
    let d = tape.value(concepts).cols();
    let mut mask = vec![1.0; k * d];
    mask[(k - 1) * d..].fill(0.0);
    let content = tape.mask_mul(concepts, mask)?;
    let blended = tape.matmul(tags, content)?;
    let mut pick = vec![0.0; k];
    pick[k - 1] = 1.0;
    let pick = tape.constant(Tensor::vector(pick));
    let keep = tape.matvec(tags, pick)?;
    let own = tape.scale_rows(words, keep)?;
    let v = tape.add(blended, own)?;
    Ok(Tagged { words: v, tags })
}

/// Runs the encoder over the rows of `v`; returns `q` and every hidden state.
pub fn encode_question(
    tape: &mut Tape<'_>,
    lstm: &LstmVars,
    v: Var,
) -> Result<(Var, Vec<Var>), MathError> {
    let t = tape.value(v);
    if t.rank() != 2 {
        return Err(MathError::Contract(
            "encode_question: empty question".into(),
        ));
    }
    let (p, d) = (t.rows(), tape.value(lstm.w_hidden).cols());
    let mut h = tape.constant(Tensor::zeros(&[d]));
    let mut c = tape.constant(Tensor::zeros(&[d]));
    let mut states = Vec::with_capacity(p);
    for i in 0..p {
        let x = tape.row(v, i)?;
        (h, c) = lstm_cell(tape, lstm, x, h, c)?;
        states.push(h);
    }
    Ok((h, states))
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// `r_0 … r_N`.
    pub instructions: Vec<Var>,
    /// Attention over words at each step.
    pub attention: Vec<Var>,
}

/// Rolls the decoder out for `n_steps + 1` steps from `h = q, c = 0`; step
/// `i` reads row `i` of `step_inputs` and attends over `v`.
pub fn decode_instructions(
    tape: &mut Tape<'_>,
    lstm: &LstmVars,
    step_inputs: Var,
    q: Var,
    v: Var,
    n_steps: usize,
) -> Result<Decoded, MathError> {
    if n_steps == 0 {
        return Err(MathError::Contract(
            "decode_instructions: N must be at least 1".into(),
        ));
    }
    let rows = tape.value(step_inputs).rows();
    if rows < n_steps + 1 {
        return Err(MathError::Contract(format!(
            "decode_instructions: {rows} step inputs for {} steps",
            n_steps + 1
        )));
    }
    let d = tape.value(q).len();
    let mut h = q;
    let mut c = tape.constant(Tensor::zeros(&[d]));
    let mut out = Decoded {
        instructions: Vec::with_capacity(n_steps + 1),
        attention: Vec::with_capacity(n_steps + 1),
    };
    for i in 0..=n_steps {
        let x = tape.row(step_inputs, i)?;
        (h, c) = lstm_cell(tape, lstm, x, h, c)?;
        let scores = tape.matvec(v, h)?;
        let attn = tape.softmax(scores)?;
        let r = tape.vecmat(attn, v)?;
        out.instructions.push(r);
        out.attention.push(attn);
    }
    Ok(out)
}

/// Values of one question's instruction pass, for inspection and tracing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstructionSequence {
    pub instructions: Vec<Vec<f64>>,
    pub question_summary: Vec<f64>,
    pub normalized_words: Vec<Vec<f64>>,
    pub word_attention: Vec<Vec<f64>>,
    pub tag_dists: Vec<Vec<f64>>,
}

impl InstructionSequence {
    pub fn read(tape: &Tape<'_>, tagged: &Tagged, q: Var, decoded: &Decoded) -> Self {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        Self {
            instructions: decoded
                .instructions
                .iter()
                .map(|&r| tape.value(r).data().to_vec())
                .collect(),
            question_summary: tape.value(q).data().to_vec(),
            normalized_words: rows(tape.value(tagged.words)),
            word_attention: decoded
                .attention
                .iter()
                .map(|&a| tape.value(a).data().to_vec())
                .collect(),
            tag_dists: rows(tape.value(tagged.tags)),
        }
    }

    pub fn step_count(&self) -> usize {
        self.instructions.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::lstm_init;

    fn lstm_zero(tape: &mut Tape<'_>, d: usize) -> LstmVars {
        let [a, b, c] = lstm_init(d, d, || 0.0);
        LstmVars {
            w_input: tape.constant(a),
            w_hidden: tape.constant(b),
            bias: tape.constant(c),
        }
    }

    #[test]
    fn exact_match_word_maps_to_its_concept() {
        let mut tape = Tape::new();
        // cat, dog, c′ along orthogonal axes, large scale
        let c = Tensor::from_rows(&[
            vec![10.0, 0.0, 0.0],
            vec![0.0, 10.0, 0.0],
            vec![0.0, 0.0, 10.0],
        ])
        .unwrap();
        let concepts = tape.constant(c);
        let w = tape.constant(Tensor::identity(3));
        let words = tape.constant(Tensor::from_rows(&[vec![10.0, 0.0, 0.0]]).unwrap());
        let t = tag_words(&mut tape, words, w, concepts).unwrap();
        let tags = tape.value(t.tags);
        assert!(tags.at(0, 0) > 0.999);
        let v = tape.value(t.words).row(0);
        assert!((v[0] - 10.0).abs() < 1e-6 && v[1].abs() < 1e-6);
    }

    #[test]
    fn zero_lstm_gives_zero_summary() {
        let mut tape = Tape::new();
        let lstm = lstm_zero(&mut tape, 4);
        let v = tape.constant(Tensor::filled(&[3, 4], 0.7));
        let (q, states) = encode_question(&mut tape, &lstm, v).unwrap();
        assert_eq!(states.len(), 3);
        assert!(tape.value(q).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_word_forces_attention() {
        let mut tape = Tape::new();
        let [a, b, c] = lstm_init(3, 3, || 0.3);
        let lstm = LstmVars {
            w_input: tape.constant(a),
            w_hidden: tape.constant(b),
            bias: tape.constant(c),
        };
        let v = tape.constant(Tensor::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap());
        let inputs = tape.constant(Tensor::filled(&[4, 3], 0.5));
        let q = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let dec = decode_instructions(&mut tape, &lstm, inputs, q, v, 3).unwrap();
        assert_eq!(dec.instructions.len(), 4);
        for r in dec.instructions {
            assert_eq!(tape.value(r).data(), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn zero_steps_is_rejected() {
        let mut tape = Tape::new();
        let lstm = lstm_zero(&mut tape, 2);
        let v = tape.constant(Tensor::filled(&[1, 2], 1.0));
        let inputs = tape.constant(Tensor::filled(&[2, 2], 1.0));
        let q = tape.constant(Tensor::zeros(&[2]));
        assert!(decode_instructions(&mut tape, &lstm, inputs, q, v, 0).is_err());
    }
}
