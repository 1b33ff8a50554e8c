//! Forward/backward primitives: matmul, softmax, cross-entropy, layer norm,
//! GELU/ReLU, dropout, embedding lookup.
//!
//! All reductions run in a fixed sequential order so repeated runs are
//! bit-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn check_dims2<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| Error::Shape(format!("{what}: expected rank-2, got {:?}", t.shape())))
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_dims2(a, "matmul lhs")?;
    let (k2, n) = check_dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {k} vs {k2}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::from_vec(vec![m, n], out)
}

/// Raw `[m,k] x [k,n]` into a caller-provided buffer (i-k-j order).
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ik * bv;
            }
        }
    }
}

/// `a [m,k] x b^T` where `b` is stored `[n,k]`; result `[m,n]`.
pub(crate) fn matmul_nt_into<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `a^T x d` where `a` is stored `[m,k]` and `d` `[m,n]`; result `[k,n]`,
/// accumulated into `out`.
pub(crate) fn matmul_tn_acc<T: Real>(a: &[T], d: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &dv) in out_row.iter_mut().zip(d_row) {
                *o = *o + a_ik * dv;
            }
        }
    }
}

/// Gradients of `matmul`: `d_a = d_out x b^T`, `d_b = a^T x d_out`.
pub fn matmul_backward<T: Real>(
    d_out: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = check_dims2(a, "matmul lhs")?;
    let (_, n) = check_dims2(b, "matmul rhs")?;
    let mut d_a = vec![T::zero(); m * k];
    let mut d_b = vec![T::zero(); k * n];
    matmul_nt_into(d_out.data(), b.data(), m, n, k, &mut d_a);
    matmul_tn_acc(a.data(), d_out.data(), m, k, n, &mut d_b);
    Ok((
        Tensor::from_vec(vec![m, k], d_a)?,
        Tensor::from_vec(vec![k, n], d_b)?,
    ))
}

/// Numerically stable softmax of a vector (max-subtraction).
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::InvalidValue("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidValue("softmax input contains non-finite values".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<T: Real>(v: &[T]) -> Vec<T> {
    let mut max = v[0];
    for &x in &v[1..] {
        if x > max {
            max = x;
        }
    }
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = T::zero();
    for &x in &out {
        sum = sum + x;
    }
    for x in out.iter_mut() {
        *x = *x / sum;
    }
    out
}

/// Softmax Jacobian-vector product for one row:
/// `d_in_i = p_i * (d_out_i - sum_j d_out_j * p_j)`.
pub(crate) fn softmax_backward_row<T: Real>(probs: &[T], d_out: &[T], d_in: &mut [T]) {
    let mut dot = T::zero();
    for (&p, &d) in probs.iter().zip(d_out) {
        dot = dot + p * d;
    }
    for ((di, &p), &d) in d_in.iter_mut().zip(probs).zip(d_out) {
        *di = p * (d - dot);
    }
}

/// Cross-entropy of `logits` against `label`: `-log softmax(logits)[label]`.
///
/// Returns the loss together with the softmax probabilities, from which the
/// gradient is `probs - one_hot(label)`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let probs = softmax(logits)?;
    let p = probs[label].max(T::from_f64(f64::MIN_POSITIVE));
    Ok((-(p.ln()), probs))
}

/// Layer-norm statistics cached for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (rows, cols) = check_dims2(x, "layer_norm input")?;
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::Shape(format!(
            "layer_norm params length {} / {} do not match {} columns",
            gamma.len(),
            beta.len(),
            cols
        )));
    }
    let mut out = vec![T::zero(); rows * cols];
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let mut m = T::zero();
        for &v in xr {
            m = m + v;
        }
        m = m * inv_n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - m;
            var = var + d * d;
        }
        var = var * inv_n;
        let rs = T::one() / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        let or = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            or[c] = gamma[c] * ((xr[c] - m) * rs) + beta[c];
        }
    }
    Ok((
        Tensor::from_vec(vec![rows, cols], out)?,
        LayerNormCache { mean, rstd },
    ))
}

/// Backward of [`layer_norm`]. Returns `d_x` and accumulates parameter
/// gradients into `d_gamma` / `d_beta`.
pub fn layer_norm_backward<T: Real>(
    d_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    cache: &LayerNormCache<T>,
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Result<Tensor<T>> {
    let (rows, cols) = check_dims2(x, "layer_norm input")?;
    let mut d_x = vec![T::zero(); rows * cols];
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let dr = &d_out.data()[r * cols..(r + 1) * cols];
        let m = cache.mean[r];
        let rs = cache.rstd[r];
        // dyhat = d_out * gamma; two row means feed the input gradient
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for c in 0..cols {
            let xhat = (xr[c] - m) * rs;
            let dy = dr[c] * gamma[c];
            sum_dy = sum_dy + dy;
            sum_dy_xhat = sum_dy_xhat + dy * xhat;
            d_gamma[c] = d_gamma[c] + dr[c] * xhat;
            d_beta[c] = d_beta[c] + dr[c];
        }
        let mean_dy = sum_dy * inv_n;
        let mean_dy_xhat = sum_dy_xhat * inv_n;
        let dxr = &mut d_x[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let xhat = (xr[c] - m) * rs;
            let dy = dr[c] * gamma[c];
            dxr[c] = rs * (dy - mean_dy - xhat * mean_dy_xhat);
        }
    }
    Tensor::from_vec(vec![rows, cols], d_x)
}

/// Feed-forward activation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Gelu => write!(f, "gelu"),
            Activation::Relu => write!(f, "relu"),
        }
    }
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

pub fn activate<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Gelu => gelu(x),
        Activation::Relu => relu(x),
    }
}

pub fn activate_grad<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Gelu => gelu_grad(x),
        Activation::Relu => relu_grad(x),
    }
}

/// Inverted dropout. In training mode each element is zeroed independently
/// with probability `p` and survivors are scaled by `1/(1-p)`; in evaluation
/// mode (`rng == None`) it is the identity. Returns the kept-mask for the
/// backward pass (`None` when it acted as identity).
pub fn dropout<T: Real>(
    x: &mut [T],
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Vec<bool>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidValue(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    let rng = match rng {
        Some(r) if p > 0.0 => r,
        _ => return Ok(None),
    };
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut mask = vec![true; x.len()];
    for (v, keep) in x.iter_mut().zip(mask.iter_mut()) {
        if rng.gen::<f64>() < p {
            *keep = false;
            *v = T::zero();
        } else {
            *v = *v * scale;
        }
    }
    Ok(Some(mask))
}

/// Backward of [`dropout`] for the mask it returned.
pub fn dropout_backward<T: Real>(d: &mut [T], mask: Option<&Vec<bool>>, p: f64) {
    let Some(mask) = mask else { return };
    let scale = T::from_f64(1.0 / (1.0 - p));
    for (dv, &keep) in d.iter_mut().zip(mask) {
        if keep {
            *dv = *dv * scale;
        } else {
            *dv = T::zero();
        }
    }
}

/// Gathers rows of `table [v, e]` by id; result `[ids.len(), e]`.
pub fn embedding_lookup<T: Real>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (v, e) = check_dims2(table, "embedding table")?;
    let mut out = vec![T::zero(); ids.len() * e];
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= v {
            return Err(Error::Index(format!("token id {id} >= vocab size {v}")));
        }
        out[r * e..(r + 1) * e].copy_from_slice(&table.data()[id * e..(id + 1) * e]);
    }
    Tensor::from_vec(vec![ids.len(), e], out)
}

/// Backward of [`embedding_lookup`]; accumulates `d_out` rows into the
/// table gradient.
pub fn embedding_backward<T: Real>(table: &mut Tensor<T>, ids: &[u32], d_out: &[T]) {
    let e = table.shape()[1];
    debug_assert_eq!(d_out.len(), ids.len() * e);
    let grad = table.grad_mut();
    for (r, &id) in ids.iter().enumerate() {
        let dst = &mut grad[id as usize * e..(id as usize + 1) * e];
        let src = &d_out[r * e..(r + 1) * e];
        for (g, &d) in dst.iter_mut().zip(src) {
            *g = *g + d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()
    }

    /// Central finite differences of a scalar-valued function of a vector.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let p = softmax(&[0.0f64; 5]).unwrap();
        for &v in &p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic_two_class() {
        // [0, ln 2] -> [1/3, 2/3]
        let p = softmax(&[0.0f64, 2.0f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let v = rand_vec(9, 3);
        let p1 = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let p2 = softmax(&shifted).unwrap();
        let sum: f64 = p1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let (loss, _) = cross_entropy(&[0.7f64; 5], 2).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_near_certain() {
        let (loss, _) = cross_entropy(&[10.0f64, -10.0], 0).unwrap();
        assert!(loss < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(cross_entropy(&[0.0f64; 5], 5).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = rand_vec(7, 11);
        let label = 4;
        let (_, probs) = cross_entropy(&logits, label).unwrap();
        let mut analytic = probs.clone();
        analytic[label] -= 1.0;
        let numeric = finite_diff(
            |x| cross_entropy(x, label).unwrap().0,
            &logits,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let (m, k, n) = (3, 4, 2);
        let a_data = rand_vec(m * k, 21);
        let b_data = rand_vec(k * n, 22);
        let w = rand_vec(m * n, 23); // fixed cotangent: loss = sum(w * (a@b))
        let a = Tensor::from_vec(vec![m, k], a_data.clone()).unwrap();
        let b = Tensor::from_vec(vec![k, n], b_data.clone()).unwrap();
        let d_out = Tensor::from_vec(vec![m, n], w.clone()).unwrap();
        let (da, db) = matmul_backward(&d_out, &a, &b).unwrap();

        let loss_a = |x: &[f64]| {
            let at = Tensor::from_vec(vec![m, k], x.to_vec()).unwrap();
            let c = matmul(&at, &b).unwrap();
            c.data().iter().zip(&w).map(|(v, wi)| v * wi).sum()
        };
        let loss_b = |x: &[f64]| {
            let bt = Tensor::from_vec(vec![k, n], x.to_vec()).unwrap();
            let c = matmul(&a, &bt).unwrap();
            c.data().iter().zip(&w).map(|(v, wi)| v * wi).sum()
        };
        assert!(max_rel_err(da.data(), &finite_diff(loss_a, &a_data, 1e-5)) < 1e-4);
        assert!(max_rel_err(db.data(), &finite_diff(loss_b, &b_data, 1e-5)) < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let (rows, cols) = (3, 5);
        let x_data = rand_vec(rows * cols, 31);
        let gamma = rand_vec(cols, 32);
        let beta = rand_vec(cols, 33);
        let w = rand_vec(rows * cols, 34);
        let eps = 1e-5;

        let x = Tensor::from_vec(vec![rows, cols], x_data.clone()).unwrap();
        let (_, cache) = layer_norm(&x, &gamma, &beta, eps).unwrap();
        let d_out = Tensor::from_vec(vec![rows, cols], w.clone()).unwrap();
        let mut d_gamma = vec![0.0; cols];
        let mut d_beta = vec![0.0; cols];
        let d_x = layer_norm_backward(&d_out, &x, &gamma, &cache, &mut d_gamma, &mut d_beta).unwrap();

        let loss_x = |v: &[f64]| {
            let xt = Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap();
            let (y, _) = layer_norm(&xt, &gamma, &beta, eps).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let loss_gamma = |g: &[f64]| {
            let (y, _) = layer_norm(&x, g, &beta, eps).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let loss_beta = |bt: &[f64]| {
            let (y, _) = layer_norm(&x, &gamma, bt, eps).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        assert!(max_rel_err(d_x.data(), &finite_diff(loss_x, &x_data, 1e-5)) < 1e-4);
        assert!(max_rel_err(&d_gamma, &finite_diff(loss_gamma, &gamma, 1e-5)) < 1e-4);
        assert!(max_rel_err(&d_beta, &finite_diff(loss_beta, &beta, 1e-5)) < 1e-4);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let h = 1e-5;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let analytic = gelu_grad(x);
            assert!(
                (analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-4,
                "x={x}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut x = rand_vec(100, 41);
        let orig = x.clone();
        let mask = dropout(&mut x, 0.0, Some(&mut rng(1))).unwrap();
        assert!(mask.is_none());
        assert_eq!(x, orig);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut x = rand_vec(100, 42);
        let orig = x.clone();
        let mask = dropout(&mut x, 0.9, None).unwrap();
        assert!(mask.is_none());
        assert_eq!(x, orig);
    }

    #[test]
    fn dropout_rate_hits_expected_fraction() {
        // p = 0.1 over 10^6 elements, fixed seed
        let n = 1_000_000;
        let mut x = vec![1.0f64; n];
        let mut r = rng(7);
        let mask = dropout(&mut x, 0.1, Some(&mut r)).unwrap().unwrap();
        let zeroed = mask.iter().filter(|&&k| !k).count() as f64 / n as f64;
        assert!((0.097..=0.103).contains(&zeroed), "zeroed fraction {zeroed}");
        // survivors scaled by 1/(1-p)
        for (v, keep) in x.iter().zip(&mask) {
            if *keep {
                assert!((v - 1.0 / 0.9).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut x = vec![0.0f64; 4];
        assert!(dropout(&mut x, 1.0, Some(&mut rng(1))).is_err());
        assert!(dropout(&mut x, -0.1, Some(&mut rng(1))).is_err());
    }

    #[test]
    fn embedding_lookup_and_backward() {
        let table =
            Tensor::from_vec(vec![3, 2], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(embedding_lookup(&table, &[3]).is_err());

        let mut table = table.with_grad();
        embedding_backward(&mut table, &[2, 0, 2], &[1.0, 1.0, 10.0, 10.0, 2.0, 2.0]);
        assert_eq!(table.grad().unwrap(), &[10.0, 10.0, 0.0, 0.0, 3.0, 3.0]);
    }
}
