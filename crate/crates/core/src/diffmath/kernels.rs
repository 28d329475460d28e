//! Dense kernels on plain tensors. The tape reuses these for its forward
//! values; they are also usable directly when no gradient is needed.

use super::{MathError, Tensor};

pub const ELU_ALPHA: f64 = 1.0;

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, MathError> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(MathError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, i.e. row-by-row dot products.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor, MathError> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(MathError::Shape {
            op: "matmul_bt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `m[r×c] · v[c]`.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor, MathError> {
    if m.rank() != 2 || v.rank() != 1 || m.cols() != v.len() {
        return Err(MathError::Shape {
            op: "matvec",
            left: m.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let out = (0..m.rows()).map(|i| dot(m.row(i), v.data())).collect();
    Ok(Tensor::vector(out))
}

/// `v[r]ᵀ · m[r×c]`, a weighted sum of rows.
pub fn vecmat(v: &Tensor, m: &Tensor) -> Result<Tensor, MathError> {
    if m.rank() != 2 || v.rank() != 1 || m.rows() != v.len() {
        return Err(MathError::Shape {
            op: "vecmat",
            left: v.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m.cols()];
    for (i, &w) in v.data().iter().enumerate() {
        axpy(w, m.row(i), &mut out);
    }
    Ok(Tensor::vector(out))
}

/// Softmax over a slice, max-subtracted.
pub fn softmax_slice(v: &[f64]) -> Result<Vec<f64>, MathError> {
    if v.is_empty() {
        return Err(MathError::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MathError::Domain("softmax input is not finite".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Softmax along the last axis (row-wise for matrices).
pub fn softmax(v: &Tensor) -> Result<Tensor, MathError> {
    if v.is_empty() {
        return Err(MathError::Domain("softmax of an empty tensor".into()));
    }
    let cols = v.cols();
    let mut out = Vec::with_capacity(v.len());
    for chunk in v.data().chunks(cols) {
        out.extend(softmax_slice(chunk)?);
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub fn elu_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        ELU_ALPHA * x.exp_m1()
    }
}

pub fn elu_grad_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        ELU_ALPHA * x.exp()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(v: &Tensor) -> Tensor {
    map(v, elu_scalar)
}

pub fn sigmoid(v: &Tensor) -> Tensor {
    map(v, sigmoid_scalar)
}

pub fn tanh(v: &Tensor) -> Tensor {
    map(v, f64::tanh)
}

pub(crate) fn map(v: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = v.data().iter().map(|&x| f(x)).collect();
    Tensor::new(v.shape().to_vec(), data).expect("shape preserved")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let b = m(2, 2, &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let p = m(2, 2, &[1., 0., 0., 0.]);
        let b = m(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&m(2, 3, &[0.; 6]), &m(2, 2, &[0.; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_slice(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax_slice(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_slice(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] < 1e-300);
        assert!(softmax_slice(&[]).is_err());
    }

    #[test]
    fn elu_examples() {
        assert_eq!(elu_scalar(0.0), 0.0);
        assert_eq!(elu_scalar(3.5), 3.5);
        assert!((elu_scalar(-20.0) + 1.0).abs() < 1e-8);
    }

    #[test]
    fn vecmat_is_weighted_row_sum() {
        let mat = m(2, 3, &[1., 2., 3., 10., 20., 30.]);
        let v = Tensor::vector(vec![0.5, 0.25]);
        assert_eq!(vecmat(&v, &mat).unwrap().data(), &[3.0, 6.0, 9.0]);
        assert_eq!(
            matvec(&mat, &Tensor::vector(vec![1., 0., 1.]))
                .unwrap()
                .data(),
            &[4., 40.]
        );
    }
}
