//! Eager numeric kernels. The autograd graph calls these for its forward
//! values and pairs each with an exact backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (n, k2) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Normalized rows and their inverse standard deviations, before the affine map.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, cols) = x.matrix_dims()?;
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::dim(format!(
            "layer_norm gain/bias must have {cols} entries, got {} and {}",
            gain.len(),
            bias.len()
        )));
    }
    let src = x.data();
    let mut xhat = vec![0.0; src.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { xhat, inv_std },
    ))
}

/// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_with_cache(x, gain, bias).map(|(t, _)| t)
}

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Single-channel, stride-1, unpadded cross-correlation (no kernel flip).
pub fn conv2d_valid(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (a, b) = two_d(input, "conv2d input")?;
    let (kh, kw) = two_d(kernel, "conv2d kernel")?;
    if kh > a || kw > b {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input {a}x{b}"
        )));
    }
    let (oh, ow) = (a - kh + 1, b - kw + 1);
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for p in 0..kh {
                let xrow = &x[(i + p) * b + j..(i + p) * b + j + kw];
                let krow = &k[p * kw..(p + 1) * kw];
                for (xv, kv) in xrow.iter().zip(krow) {
                    acc += xv * kv;
                }
            }
            out[i * ow + j] = acc;
        }
    }
    Tensor::new(vec![oh, ow], out)
}

fn two_d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// Cosine similarity with a degenerate-input flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input has zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::dim(format!(
            "cosine of vectors with {} and {} entries",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(Cosine {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

/// Mean negative log-probability of the true class over the batch rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_masked(logits, labels, None)
}

/// Cross entropy where classes with `allowed[c] == false` are excluded
/// from the softmax (treated as logit −∞).
pub fn cross_entropy_masked(
    logits: &Tensor,
    labels: &[usize],
    allowed: Option<&[bool]>,
) -> Result<f64> {
    let probs = masked_softmax_rows(logits, labels, allowed)?;
    let (rows, cols) = logits.matrix_dims()?;
    let total: f64 = (0..rows).map(|r| -probs[r * cols + labels[r]].ln()).sum();
    Ok(total / rows as f64)
}

pub(crate) fn masked_softmax_rows(
    logits: &Tensor,
    labels: &[usize],
    allowed: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (rows, cols) = logits.matrix_dims()?;
    if labels.len() != rows {
        return Err(Error::input(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(mask) = allowed {
        if mask.len() != cols {
            return Err(Error::dim("class mask length differs from logit width"));
        }
    }
    let mut probs = vec![0.0; rows * cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::input(format!("label {y} outside [0, {cols})")));
        }
        if allowed.is_some_and(|m| !m[y]) {
            return Err(Error::input(format!("label {y} is masked out")));
        }
        let row = logits.row(r);
        let ok = |c: usize| allowed.is_none_or(|m| m[c]);
        let max = (0..cols)
            .filter(|&c| ok(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in (0..cols).filter(|&c| ok(c)) {
            let e = (row[c] - max).exp();
            probs[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            probs[r * cols + c] /= sum;
        }
    }
    Ok(probs)
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "l1 distance between shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (mm, k) = a.matrix_dims().unwrap();
        let (_, n) = b.matrix_dims().unwrap();
        let mut out = vec![0.0; mm * n];
        for i in 0..mm {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    fn quad_loop_conv(x: &Tensor, k: &Tensor) -> Vec<f64> {
        let (a, b) = (x.shape()[0], x.shape()[1]);
        let kk = k.shape()[0];
        let (oh, ow) = (a - kk + 1, b - kk + 1);
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                for p in 0..kk {
                    for q in 0..kk {
                        out[i * ow + j] += x.at(i + p, j + q) * k.at(p, q);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = m(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &v).unwrap().data(), &[3.0, 4.0]);
        let r = matmul(&m(&[&[1.0, 2.0]]), &v).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = derive_rng(1, "matmul", 0);
        let a = Tensor::gaussian(&[3, 4], 1.0, &mut rng);
        let b = Tensor::gaussian(&[4, 2], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);

        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = m(&[&[1.0, 5.0], &[3.0, 5.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.at(0, 0) + s.at(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(s.at(0, 1), 0.5);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&m(&[&[3.0, 3.0]]), &ones, &zeros).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);

        let y = layer_norm(&m(&[&[1.0, -1.0]]), &ones, &zeros).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);

        let b = Tensor::vector(vec![0.25, -4.0]).unwrap();
        let y = layer_norm(&m(&[&[7.0, 2.0]]), &zeros, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn activations() {
        let r = relu(&Tensor::vector(vec![-2.0, 3.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 3.0]);
        assert_eq!(gelu_scalar(0.0), 0.0);
        let oracle = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn conv_examples() {
        let y = conv2d_valid(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[2.0]])).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);

        let y = conv2d_valid(&Tensor::full(&[3, 3], 1.0), &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);

        let y = conv2d_valid(&Tensor::zeros(&[36, 80]), &Tensor::zeros(&[17, 17])).unwrap();
        assert_eq!(y.shape(), &[20, 64]);

        let err = conv2d_valid(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 3]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -0.5];
        assert!((cosine_similarity(&u, &u).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value, 0.0);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &neg).unwrap().value + 1.0).abs() < 1e-15);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(z, Cosine { value: 0.0, zero_norm: true });
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[1, 4]);
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let dominant = m(&[&[80.0, 0.0, 0.0]]);
        assert!(cross_entropy(&dominant, &[0]).unwrap() < 1e-30);

        let mut rng = derive_rng(2, "ce", 0);
        let logits = Tensor::gaussian(&[2, 3], 1.0, &mut rng);
        let labels = [2, 0];
        let oracle: f64 = (0..2)
            .map(|r| {
                let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
                -(logits.at(r, labels[r]).exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - oracle).abs() < 1e-10);

        assert!(matches!(cross_entropy(&logits, &[3, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn masked_cross_entropy_ignores_other_classes() {
        let logits = m(&[&[0.0, 0.0, 50.0, 50.0]]);
        let mask = [true, true, false, false];
        let ce = cross_entropy_masked(&logits, &[1], Some(&mask)).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::vector(vec![3.0]).unwrap();
        let b = Tensor::vector(vec![1.0]).unwrap();
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert!(l1_distance(&a, &Tensor::zeros(&[2])).is_err());

        let mut rng = derive_rng(3, "l1", 0);
        let x = Tensor::gaussian(&[4, 5], 1.0, &mut rng);
        let y = Tensor::gaussian(&[4, 5], 1.0, &mut rng);
        let mut oracle = 0.0;
        for i in 0..20 {
            oracle += (x.data()[i] - y.data()[i]).abs();
        }
        assert_eq!(l1_distance(&x, &y).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn conv_matches_quadruple_loop(a in 1usize..=10, b in 1usize..=10, k in 1usize..=5, seed in any::<u64>()) {
            prop_assume!(k <= a && k <= b);
            let mut rng = derive_rng(seed, "conv", 0);
            let x = Tensor::gaussian(&[a, b], 1.0, &mut rng);
            let kern = Tensor::gaussian(&[k, k], 1.0, &mut rng);
            let got = conv2d_valid(&x, &kern).unwrap();
            for (g, e) in got.data().iter().zip(quad_loop_conv(&x, &kern)) {
                prop_assert!((g - e).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let s = softmax(&Tensor::vector(vals).unwrap(), 0).unwrap();
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 3),
            v in prop::collection::vec(-5.0f64..5.0, 3),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine_similarity(&u, &v).unwrap().value;
            prop_assert!((c - cosine_similarity(&v, &u).unwrap().value).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| alpha * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| beta * x).collect();
            prop_assert!((c - cosine_similarity(&su, &sv).unwrap().value).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
