//! Dense kernels: vectors, matrices, activations, layer normalization and
//! parameter initialization. Everything here is pure.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Default epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPSILON: f64 = 1e-12;

/// Fixed-length vector of finite 64-bit reals.
#[derive(Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Rejects NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite entry {} at position {i}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    /// Wraps values produced by an internal kernel; finiteness is the
    /// caller's responsibility.
    pub(crate) fn from_kernel(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Row-major matrix of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        DenseVector::new(values).map(|v| Self { rows, cols, values: v.0 })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.values.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `out = selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&yr, row) in y.iter().zip(self.values.chunks_exact(self.cols)) {
            if yr != 0.0 {
                axpy(yr, row, out);
            }
        }
    }
}

/// Accumulates the outer product `a · bᵀ` into a row-major buffer.
pub fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(acc.len(), a.len() * b.len());
    for (&ai, row) in a.iter().zip(acc.chunks_exact_mut(b.len())) {
        if ai != 0.0 {
            axpy(ai, b, row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Logistic function, branching on sign so that large magnitudes never
/// overflow `exp`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise non-linearity used inside the feature generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationKind {
    #[default]
    Relu,
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative at `x`; relu takes 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Applies `kind` elementwise, returning the output and its derivative mask.
pub fn activate(x: &[f64], kind: ActivationKind) -> (DenseVector, DenseVector) {
    let out = x.iter().map(|&v| kind.apply(v)).collect();
    let mask = x.iter().map(|&v| kind.derivative(v)).collect();
    (DenseVector(out), DenseVector(mask))
}

/// Gain and bias of a layer normalization over `H` units.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: DenseVector,
    pub bias: DenseVector,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(gain: DenseVector, bias: DenseVector, epsilon: f64) -> Result<Self> {
        if gain.len() != bias.len() {
            return Err(Error::Shape(format!("layer norm gain has {} entries, bias {}", gain.len(), bias.len())));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::Config(format!("layer norm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { gain, bias, epsilon })
    }

    /// Unit gain, zero bias.
    pub fn identity(h: usize) -> Self {
        Self { gain: DenseVector::filled(h, 1.0), bias: DenseVector::zeros(h), epsilon: LAYER_NORM_EPSILON }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }
}

/// Statistics retained by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub mean: f64,
    /// `sqrt(variance + epsilon)`, population variance.
    pub std: f64,
    pub normalized: DenseVector,
}

pub fn layer_norm_forward(x: &[f64], params: &LayerNormParams) -> Result<(DenseVector, LayerNormCache)> {
    let h = params.len();
    if x.len() != h {
        return Err(Error::Shape(format!("layer norm over {h} units got input of length {}", x.len())));
    }
    let mean = x.iter().sum::<f64>() / h as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
    let std = (var + params.epsilon).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) / std).collect();
    let out = normalized.iter().zip(params.gain.iter().zip(params.bias.iter())).map(|(n, (g, b))| g * n + b).collect();
    Ok((DenseVector(out), LayerNormCache { mean, std, normalized: DenseVector(normalized) }))
}

/// Gradients of a layer normalization with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub x: DenseVector,
    pub gain: DenseVector,
    pub bias: DenseVector,
}

pub fn layer_norm_backward(grad_h: &[f64], cache: &LayerNormCache, params: &LayerNormParams) -> Result<LayerNormGrads> {
    let h = params.len();
    if grad_h.len() != h || cache.normalized.len() != h {
        return Err(Error::Contract(format!(
            "layer norm backward: params have {h} units, gradient {}, cache {}",
            grad_h.len(),
            cache.normalized.len()
        )));
    }
    let n = &cache.normalized;
    let bias = DenseVector(grad_h.to_vec());
    let gain = DenseVector(grad_h.iter().zip(n.iter()).map(|(g, n)| g * n).collect());
    let dn: Vec<f64> = grad_h.iter().zip(params.gain.iter()).map(|(g, w)| g * w).collect();
    let hf = h as f64;
    let mean_dn = dn.iter().sum::<f64>() / hf;
    let mean_dn_n = dot(&dn, n) / hf;
    let x = dn.iter().zip(n.iter()).map(|(d, ni)| (d - mean_dn - ni * mean_dn_n) / cache.std).collect();
    Ok(LayerNormGrads { x: DenseVector(x), gain, bias })
}

/// Initialization scheme for a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Normal(f64),
    Zeros,
}

/// A freshly initialized tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(DenseVector),
    Matrix(DenseMatrix),
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill<R: Rng + ?Sized>(n: usize, fan_in: usize, fan_out: usize, scheme: InitScheme, rng: &mut R) -> Result<Vec<f64>> {
    match scheme {
        InitScheme::Zeros => Ok(vec![0.0; n]),
        InitScheme::Normal(sigma) => {
            let dist =
                Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("invalid normal sigma {sigma}: {e}")))?;
            Ok((0..n).map(|_| dist.sample(rng)).collect())
        }
        InitScheme::Glorot => {
            let b = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-b, b).map_err(|e| Error::Config(e.to_string()))?;
            Ok((0..n).map(|_| dist.sample(rng)).collect())
        }
    }
}

/// Matrix with `fan_in = cols`, `fan_out = rows`.
pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scheme: InitScheme, rng: &mut R) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("cannot initialize a {rows}x{cols} matrix")));
    }
    Ok(DenseMatrix { rows, cols, values: fill(rows * cols, cols, rows, scheme, rng)? })
}

pub fn init_vector<R: Rng + ?Sized>(len: usize, scheme: InitScheme, rng: &mut R) -> Result<DenseVector> {
    if len == 0 {
        return Err(Error::Shape("cannot initialize an empty vector".into()));
    }
    Ok(DenseVector(fill(len, len, 1, scheme, rng)?))
}

/// Seeded initialization of a rank-1 or rank-2 tensor.
pub fn init_tensor(shape: &[usize], scheme: InitScheme, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *shape {
        [n] => init_vector(n, scheme, &mut rng).map(Tensor::Vector),
        [r, c] => init_matrix(r, c, scheme, &mut rng).map(Tensor::Matrix),
        _ => Err(Error::Shape(format!("unsupported tensor shape {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_vector_rejects_non_finite() {
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn layer_norm_two_points() {
        let (h, _) = layer_norm_forward(&[1.0, 3.0], &LayerNormParams::identity(2)).unwrap();
        assert!((h[0] + 1.0).abs() < 1e-9 && (h[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_returns_bias() {
        let p = LayerNormParams::new(
            DenseVector::new(vec![2.0, -1.0, 0.5]).unwrap(),
            DenseVector::new(vec![0.1, 0.2, 0.3]).unwrap(),
            LAYER_NORM_EPSILON,
        )
        .unwrap();
        let (h, _) = layer_norm_forward(&[4.0, 4.0, 4.0], &p).unwrap();
        assert_eq!(h.as_slice(), p.bias.as_slice());
    }

    #[test]
    fn layer_norm_matches_scripted_formula() {
        let mut r = rng(3);
        let x = uniform_vec(&mut r, 10);
        let g = uniform_vec(&mut r, 10);
        let b = uniform_vec(&mut r, 10);
        let p = LayerNormParams::new(DenseVector::new(g.clone()).unwrap(), DenseVector::new(b.clone()).unwrap(), 1e-12)
            .unwrap();
        let (h, _) = layer_norm_forward(&x, &p).unwrap();
        // direct transcription: mu, delta over H, then g*(x-mu)/sqrt(delta^2+eps)+b
        let mut mu = 0.0;
        for v in &x {
            mu += v;
        }
        mu /= 10.0;
        let mut d2 = 0.0;
        for v in &x {
            d2 += (v - mu).powi(2);
        }
        d2 /= 10.0;
        for i in 0..10 {
            let expect = g[i] * (x[i] - mu) / (d2 + 1e-12).sqrt() + b[i];
            assert!((h[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_unit_params_standardize() {
        let mut r = rng(11);
        for _ in 0..20 {
            let x = uniform_vec(&mut r, 7);
            let (h, _) = layer_norm_forward(&x, &LayerNormParams::identity(7)).unwrap();
            let mean = h.iter().sum::<f64>() / 7.0;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(layer_norm_forward(&[1.0], &LayerNormParams::identity(2)), Err(Error::Shape(_))));
        let (_, cache) = layer_norm_forward(&[1.0, 2.0], &LayerNormParams::identity(2)).unwrap();
        assert!(matches!(
            layer_norm_backward(&[1.0, 1.0, 1.0], &cache, &LayerNormParams::identity(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn layer_norm_backward_zero_gradient() {
        let p = LayerNormParams::identity(4);
        let (_, cache) = layer_norm_forward(&[0.3, -1.0, 2.0, 0.1], &p).unwrap();
        let g = layer_norm_backward(&[0.0; 4], &cache, &p).unwrap();
        assert!(g.x.iter().chain(g.gain.iter()).chain(g.bias.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_backward_single_unit_has_no_input_gradient() {
        let p = LayerNormParams::identity(1);
        let (_, cache) = layer_norm_forward(&[2.5], &p).unwrap();
        let g = layer_norm_backward(&[1.7], &cache, &p).unwrap();
        assert_eq!(g.x[0], 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut r = rng(5);
        let h = 6;
        let x = uniform_vec(&mut r, h);
        let gain = uniform_vec(&mut r, h);
        let bias = uniform_vec(&mut r, h);
        let w = uniform_vec(&mut r, h);
        let objective = |x: &[f64], g: &[f64], b: &[f64]| {
            let p = LayerNormParams::new(
                DenseVector::new(g.to_vec()).unwrap(),
                DenseVector::new(b.to_vec()).unwrap(),
                1e-12,
            )
            .unwrap();
            dot(&layer_norm_forward(x, &p).unwrap().0, &w)
        };
        let p = LayerNormParams::new(
            DenseVector::new(gain.clone()).unwrap(),
            DenseVector::new(bias.clone()).unwrap(),
            1e-12,
        )
        .unwrap();
        let (_, cache) = layer_norm_forward(&x, &p).unwrap();
        let grads = layer_norm_backward(&w, &cache, &p).unwrap();
        let step = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        for i in 0..h {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += step;
            xm[i] -= step;
            let fd = (objective(&xp, &gain, &bias) - objective(&xm, &gain, &bias)) / (2.0 * step);
            assert!(rel(grads.x[i], fd) < 1e-5, "x[{i}]: {} vs {fd}", grads.x[i]);
            let (mut gp, mut gm) = (gain.clone(), gain.clone());
            gp[i] += step;
            gm[i] -= step;
            let fd = (objective(&x, &gp, &bias) - objective(&x, &gm, &bias)) / (2.0 * step);
            assert!(rel(grads.gain[i], fd) < 1e-5);
            let (mut bp, mut bm) = (bias.clone(), bias.clone());
            bp[i] += step;
            bm[i] -= step;
            let fd = (objective(&x, &gain, &bp) - objective(&x, &gain, &bm)) / (2.0 * step);
            assert!(rel(grads.bias[i], fd) < 1e-5);
        }
    }

    #[test]
    fn activations() {
        let (y, m) = activate(&[-2.0, 0.0, 3.0], ActivationKind::Relu);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 3.0]);
        assert_eq!(m.as_slice(), &[0.0, 0.0, 1.0]);
        let (y, m) = activate(&[-2.0, 0.5], ActivationKind::Identity);
        assert_eq!(y.as_slice(), &[-2.0, 0.5]);
        assert_eq!(m.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_derivative_matches_finite_differences_off_kink() {
        for &x in &[-1.3, -0.2, 0.4, 2.0] {
            let step = 1e-6;
            let fd = (ActivationKind::Relu.apply(x + step) - ActivationKind::Relu.apply(x - step)) / (2.0 * step);
            assert!((fd - ActivationKind::Relu.derivative(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn init_schemes() {
        assert_eq!(init_tensor(&[5], InitScheme::Zeros, 1).unwrap(), Tensor::Vector(DenseVector::zeros(5)));
        let Tensor::Matrix(m) = init_tensor(&[10, 10], InitScheme::Glorot, 2).unwrap() else { panic!() };
        let bound = (6.0f64 / 20.0).sqrt();
        assert!((bound - 0.5477).abs() < 1e-4);
        assert!(m.as_slice().iter().all(|v| v.abs() <= bound));
        assert_eq!(
            init_tensor(&[3, 4], InitScheme::Normal(0.01), 9).unwrap(),
            init_tensor(&[3, 4], InitScheme::Normal(0.01), 9).unwrap()
        );
        assert!(init_tensor(&[0, 3], InitScheme::Glorot, 1).is_err());
        assert!(init_tensor(&[2, 2, 2], InitScheme::Zeros, 1).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.5) - 0.622_459_331_201_854_6).abs() < 1e-15);
    }

    #[test]
    fn matvec_and_transpose() {
        let m = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = [0.0; 2];
        m.matvec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut out = [0.0; 3];
        m.matvec_transposed(&[1.0, 1.0], &mut out);
        assert_eq!(out, [5.0, 7.0, 9.0]);
        let mut acc = vec![0.0; 6];
        add_outer(&mut acc, &[1.0, 2.0], &[1.0, 0.0, -1.0]);
        assert_eq!(acc, vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
    }
}
