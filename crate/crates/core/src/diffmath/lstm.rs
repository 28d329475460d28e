//! LSTM cell composed from tape primitives.

use super::{MathError, Tape, Tensor, Var};

/// Gate-stacked LSTM weights: rows `[input; forget; candidate; output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// Initial parameter tensors for an LSTM with input size `d_in` and hidden
/// size `d`, drawn by `sample`.
pub fn lstm_init(d_in: usize, d: usize, mut sample: impl FnMut() -> f64) -> [Tensor; 3] {
    let w_in = (0..4 * d * d_in).map(|_| sample()).collect();
    let w_h = (0..4 * d * d).map(|_| sample()).collect();
    [
        Tensor::matrix(4 * d, d_in, w_in).expect("lstm shape"),
        Tensor::matrix(4 * d, d, w_h).expect("lstm shape"),
        Tensor::zeros(&[4 * d]),
    ]
}

/// One LSTM step: returns `(h′, c′)`.
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    p: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), MathError> {
    let d = tape.value(h).len();
    let gw = tape.value(p.w_hidden);
    if gw.rank() != 2 || gw.rows() != 4 * d || gw.cols() != d || tape.value(c).len() != d {
        return Err(MathError::Shape {
            op: "lstm_cell",
            left: gw.shape().to_vec(),
            right: tape.value(h).shape().to_vec(),
        });
    }
    let zx = tape.matvec(p.w_input, x)?;
    let zh = tape.matvec(p.w_hidden, h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, p.bias)?;
    let i = tape.slice(z, 0, d)?;
    let f = tape.slice(z, d, d)?;
    let g = tape.slice(z, 2 * d, d)?;
    let o = tape.slice(z, 3 * d, d)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let d = 3;
        let [wi, wh, b] = lstm_init(d, d, || 0.0);
        let mut tape = Tape::new();
        let p = LstmVars {
            w_input: tape.param(&wi),
            w_hidden: tape.param(&wh),
            bias: tape.param(&b),
        };
        let x = tape.constant(vec_t(&[1.0, -2.0, 0.5]));
        let h = tape.constant(vec_t(&[0.3, 0.1, -0.4]));
        let c = tape.constant(Tensor::zeros(&[d]));
        let (h2, _) = lstm_cell(&mut tape, &p, x, h, c).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0; 3]);
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let d = 2;
        let [wi, wh, mut b] = lstm_init(d, d, || 0.0);
        // input gate closed, forget gate open
        for k in 0..d {
            b.data_mut()[k] = -1e3;
            b.data_mut()[d + k] = 1e3;
        }
        let mut tape = Tape::new();
        let p = LstmVars {
            w_input: tape.param(&wi),
            w_hidden: tape.param(&wh),
            bias: tape.param(&b),
        };
        let x = tape.constant(vec_t(&[4.0, -1.0]));
        let h = tape.constant(vec_t(&[0.2, 0.2]));
        let c = tape.constant(vec_t(&[0.7, -1.3]));
        let (_, c2) = lstm_cell(&mut tape, &p, x, h, c).unwrap();
        assert_eq!(tape.value(c2).data(), &[0.7, -1.3]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let [wi, wh, b] = lstm_init(3, 3, || 0.1);
        let mut tape = Tape::new();
        let p = LstmVars {
            w_input: tape.param(&wi),
            w_hidden: tape.param(&wh),
            bias: tape.param(&b),
        };
        let x = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        let h = tape.constant(vec_t(&[0.0, 0.0]));
        let c = tape.constant(vec_t(&[0.0, 0.0]));
        assert!(lstm_cell(&mut tape, &p, x, h, c).is_err());
    }
}
