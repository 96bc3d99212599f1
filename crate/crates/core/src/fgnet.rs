//! Feature generation networks and the merge strategies that combine a
//! feature's embedding with the features generated from it.
//!
//! Each field owns `u` independent generators. A generator is a stack of
//! `p` dense layers `d → rd → … → rd → d`, each followed by the variant's
//! activation: `Φ(W_p … Φ(W_1 v + β_1) … + β_p)`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::numerics::{
    add_outer, layer_norm_backward, layer_norm_forward, ActivationKind, DenseVector, LayerNormCache, LayerNormGrads,
    LayerNormParams,
};
use crate::params::{FgNet, ParameterSet};

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of generator forward passes run on the current thread.
pub fn evaluations_on_this_thread() -> u64 {
    EVALUATIONS.with(Cell::get)
}

/// Layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FgNetCache {
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub activation: ActivationKind,
}

impl FgNetCache {
    /// Smallest `|pre-activation|`, used to keep finite differences away from relu kinks.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_activations.iter().flatten().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Runs one generator stack on `v`.
pub fn forward_net(net: &FgNet, v: &[f64], activation: ActivationKind) -> Result<(DenseVector, FgNetCache)> {
    let d_in = net.layers.first().map_or(0, |l| l.weight.cols());
    if v.len() != d_in {
        return Err(Error::Shape(format!("generator expects input of length {d_in}, got {}", v.len())));
    }
    EVALUATIONS.with(|c| c.set(c.get() + 1));
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre_activations = Vec::with_capacity(net.layers.len());
    let mut x = v.to_vec();
    for layer in &net.layers {
        let mut z = vec![0.0; layer.weight.rows()];
        layer.weight.matvec(&x, &mut z);
        for (zi, bi) in z.iter_mut().zip(layer.bias.iter()) {
            *zi += bi;
        }
        let out: Vec<f64> = z.iter().map(|&zi| activation.apply(zi)).collect();
        inputs.push(std::mem::replace(&mut x, out));
        pre_activations.push(z);
    }
    Ok((DenseVector::from_kernel(x), FgNetCache { inputs, pre_activations, activation }))
}

/// Generator `generator` of field `field`, with the variant's activation.
pub fn fgnet_forward(
    v: &[f64],
    field: usize,
    generator: usize,
    params: &ParameterSet,
) -> Result<(DenseVector, FgNetCache)> {
    let net = lookup(params, field, generator)?;
    forward_net(net, v, params.config.generator_activation())
}

fn lookup(params: &ParameterSet, field: usize, generator: usize) -> Result<&FgNet> {
    params
        .fgnets
        .get(field)
        .and_then(|nets| nets.get(generator))
        .ok_or_else(|| Error::Contract(format!("no generator {generator} for field {field}")))
}

/// Gradients of one generator stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FgNetGrads {
    pub input: DenseVector,
    /// Per layer, row-major like the weight matrix.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Backpropagates `grad_out`, adding parameter gradients into `acc`
/// (interleaved weight, bias per layer) and returning the input gradient.
pub(crate) fn backward_net_into(net: &FgNet, cache: &FgNetCache, grad_out: &[f64], acc: &mut [Vec<f64>]) -> Vec<f64> {
    let act = cache.activation;
    let last = net.layers.len() - 1;
    let mut delta: Vec<f64> =
        grad_out.iter().zip(&cache.pre_activations[last]).map(|(g, z)| g * act.derivative(*z)).collect();
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        add_outer(&mut acc[2 * l], &delta, &cache.inputs[l]);
        for (b, dl) in acc[2 * l + 1].iter_mut().zip(&delta) {
            *b += dl;
        }
        let mut grad_in = vec![0.0; layer.weight.cols()];
        layer.weight.matvec_transposed(&delta, &mut grad_in);
        if l > 0 {
            for (g, z) in grad_in.iter_mut().zip(&cache.pre_activations[l - 1]) {
                *g *= act.derivative(*z);
            }
        }
        delta = grad_in;
    }
    delta
}

fn check_cache(net: &FgNet, cache: &FgNetCache, grad_len: usize) -> Result<()> {
    let ok = cache.inputs.len() == net.layers.len()
        && cache.pre_activations.len() == net.layers.len()
        && net.layers.iter().zip(&cache.inputs).all(|(l, x)| l.weight.cols() == x.len())
        && net.layers.iter().zip(&cache.pre_activations).all(|(l, z)| l.weight.rows() == z.len())
        && net.layers.last().map(|l| l.weight.rows()) == Some(grad_len);
    if ok {
        Ok(())
    } else {
        Err(Error::Contract("generator cache does not match the network".into()))
    }
}

pub fn backward_net(net: &FgNet, cache: &FgNetCache, grad_out: &[f64]) -> Result<FgNetGrads> {
    check_cache(net, cache, grad_out.len())?;
    let mut acc: Vec<Vec<f64>> =
        net.layers.iter().flat_map(|l| [vec![0.0; l.weight.as_slice().len()], vec![0.0; l.bias.len()]]).collect();
    let input = backward_net_into(net, cache, grad_out, &mut acc);
    let mut weights = Vec::with_capacity(net.layers.len());
    let mut biases = Vec::with_capacity(net.layers.len());
    let mut it = acc.into_iter();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        weights.push(w);
        biases.push(b);
    }
    Ok(FgNetGrads { input: DenseVector::from_kernel(input), weights, biases })
}

pub fn fgnet_backward(
    grad_g: &[f64],
    cache: &FgNetCache,
    field: usize,
    generator: usize,
    params: &ParameterSet,
) -> Result<FgNetGrads> {
    backward_net(lookup(params, field, generator)?, cache, grad_g)
}

/// An embedding and the `u` features generated from it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFeatureSet {
    pub origin: DenseVector,
    pub generated: Vec<DenseVector>,
    pub field_index: usize,
    pub caches: Vec<FgNetCache>,
}

/// Runs every generator of `field` on `v`.
pub fn generate(v: &[f64], field: usize, params: &ParameterSet) -> Result<GeneratedFeatureSet> {
    let nets = params.fgnets.get(field).ok_or_else(|| Error::Contract(format!("no generators for field {field}")))?;
    let act = params.config.generator_activation();
    let mut generated = Vec::with_capacity(nets.len());
    let mut caches = Vec::with_capacity(nets.len());
    for net in nets {
        let (g, c) = forward_net(net, v, act)?;
        generated.push(g);
        caches.push(c);
    }
    Ok(GeneratedFeatureSet { origin: DenseVector::from_kernel(v.to_vec()), generated, field_index: field, caches })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    Sum,
    Product,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeCache {
    Sum { generators: usize },
    Product { product: Vec<f64>, norm: LayerNormCache },
}

/// One vector standing in for a feature in the interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedFeature {
    pub vector: DenseVector,
    pub strategy: MergeStrategy,
    pub cache: MergeCache,
}

/// `v + Σ_j g_j`
pub fn merge_sum(fs: &GeneratedFeatureSet) -> MergedFeature {
    let mut out = fs.origin.as_slice().to_vec();
    for g in &fs.generated {
        for (o, gi) in out.iter_mut().zip(g.iter()) {
            *o += gi;
        }
    }
    MergedFeature {
        vector: DenseVector::from_kernel(out),
        strategy: MergeStrategy::Sum,
        cache: MergeCache::Sum { generators: fs.generated.len() },
    }
}

/// `LayerNorm(g ⊙ v)`; requires exactly one generated feature.
pub fn merge_product(fs: &GeneratedFeatureSet, ln: &LayerNormParams) -> Result<MergedFeature> {
    let [g] = fs.generated.as_slice() else {
        return Err(Error::Config(format!(
            "product merge needs exactly one generated feature, got {}",
            fs.generated.len()
        )));
    };
    let product: Vec<f64> = g.iter().zip(fs.origin.iter()).map(|(a, b)| a * b).collect();
    let (vector, norm) = layer_norm_forward(&product, ln)?;
    Ok(MergedFeature { vector, strategy: MergeStrategy::Product, cache: MergeCache::Product { product, norm } })
}

/// Gradients of a merge with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGrads {
    pub origin: DenseVector,
    pub generated: Vec<DenseVector>,
    pub layer_norm: Option<LayerNormGrads>,
}

pub fn merge_backward(
    grad: &[f64],
    merged: &MergedFeature,
    fs: &GeneratedFeatureSet,
    ln: Option<&LayerNormParams>,
) -> Result<MergeGrads> {
    if grad.len() != fs.origin.len() || merged.vector.len() != fs.origin.len() {
        return Err(Error::Contract("merge gradient length does not match the feature".into()));
    }
    match &merged.cache {
        MergeCache::Sum { generators } => {
            if *generators != fs.generated.len() {
                return Err(Error::Contract("sum cache was built for a different feature set".into()));
            }
            let g = DenseVector::from_kernel(grad.to_vec());
            Ok(MergeGrads { origin: g.clone(), generated: vec![g; *generators], layer_norm: None })
        }
        MergeCache::Product { norm, .. } => {
            let ln = ln.ok_or_else(|| Error::Contract("product merge backward needs layer-norm parameters".into()))?;
            let [g] = fs.generated.as_slice() else {
                return Err(Error::Contract("product cache was built for a different feature set".into()));
            };
            let lg = layer_norm_backward(grad, norm, ln)?;
            let origin = lg.x.iter().zip(g.iter()).map(|(a, b)| a * b).collect();
            let generated = lg.x.iter().zip(fs.origin.iter()).map(|(a, b)| a * b).collect();
            Ok(MergeGrads {
                origin: DenseVector::from_kernel(origin),
                generated: vec![DenseVector::from_kernel(generated)],
                layer_norm: Some(lg),
            })
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{DenseMatrix, LAYER_NORM_EPSILON};
    use crate::params::{build_parameters, DenseLayer, ModelConfig, Variant};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_net(rng: &mut ChaCha8Rng, d: usize, r: usize, p: usize) -> FgNet {
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(r * d, p - 1));
        widths.push(d);
        FgNet {
            layers: widths
                .windows(2)
                .map(|w| DenseLayer {
                    weight: DenseMatrix::new(w[1], w[0], rand_vec(rng, w[0] * w[1])).unwrap(),
                    bias: DenseVector::new(rand_vec(rng, w[1])).unwrap(),
                })
                .collect(),
        }
    }

    fn identity_net(d: usize, p: usize) -> FgNet {
        FgNet {
            layers: (0..p)
                .map(|_| DenseLayer { weight: DenseMatrix::identity(d), bias: DenseVector::zeros(d) })
                .collect(),
        }
    }

    #[test]
    fn identity_network_is_identity() {
        for d in [1, 3, 7] {
            for p in [2, 3, 5] {
                let v: Vec<f64> = (0..d).map(|i| i as f64 - 1.5).collect();
                let (g, _) = forward_net(&identity_net(d, p), &v, ActivationKind::Identity).unwrap();
                assert_eq!(g.as_slice(), v.as_slice());
            }
        }
    }

    #[test]
    fn zero_input_and_bias_propagate_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = random_net(&mut rng, 3, 2, 2);
        for l in &mut net.layers {
            l.bias = DenseVector::zeros(l.bias.len());
        }
        let (g, _) = forward_net(&net, &[0.0; 3], ActivationKind::Relu).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(forward_net(&net, &[0.0; 4], ActivationKind::Relu).is_err());
    }

    #[test]
    fn forward_matches_scripted_two_layer_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_net(&mut rng, 3, 2, 2);
        let v = rand_vec(&mut rng, 3);
        let (g, _) = forward_net(&net, &v, ActivationKind::Relu).unwrap();
        let (w1, b1, w2, b2) = (&net.layers[0].weight, &net.layers[0].bias, &net.layers[1].weight, &net.layers[1].bias);
        let mut hidden = [0.0; 6];
        for i in 0..6 {
            let mut s = b1[i];
            for j in 0..3 {
                s += w1.get(i, j) * v[j];
            }
            hidden[i] = if s > 0.0 { s } else { 0.0 };
        }
        for i in 0..3 {
            let mut s = b2[i];
            for j in 0..6 {
                s += w2.get(i, j) * hidden[j];
            }
            assert!((g[i] - s.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_identity_network() {
        let net = identity_net(3, 2);
        let v = [0.5, -1.0, 2.0];
        let (_, cache) = forward_net(&net, &v, ActivationKind::Identity).unwrap();
        let gg = [1.0, 2.0, 3.0];
        let grads = backward_net(&net, &cache, &gg).unwrap();
        assert_eq!(grads.input.as_slice(), &gg);
        // W2 sees the first layer's output (= v); W1 sees v as well
        for l in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(grads.weights[l][i * 3 + j], gg[i] * v[j]);
                }
            }
            assert_eq!(grads.biases[l], gg.to_vec());
        }
        let zero = backward_net(&net, &cache, &[0.0; 3]).unwrap();
        assert!(zero.input.iter().chain(zero.weights.iter().flatten()).all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_net(&mut rng, 3, 2, 2);
        let b = random_net(&mut rng, 3, 1, 3);
        let (_, cache) = forward_net(&a, &[0.1, 0.2, 0.3], ActivationKind::Relu).unwrap();
        assert!(matches!(backward_net(&b, &cache, &[1.0; 3]), Err(Error::Contract(_))));
    }

    /// Central differences of `w · net(v)` over the input and every parameter.
    fn check_fd(net: &FgNet, v: &[f64], w: &[f64], act: ActivationKind) -> f64 {
        let f = |net: &FgNet, v: &[f64]| crate::numerics::dot(&forward_net(net, v, act).unwrap().0, w);
        let (_, cache) = forward_net(net, v, act).unwrap();
        let grads = backward_net(net, &cache, w).unwrap();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        let mut worst: f64 = 0.0;
        for i in 0..v.len() {
            let (mut p, mut m) = (v.to_vec(), v.to_vec());
            p[i] += h;
            m[i] -= h;
            worst = worst.max(rel(grads.input[i], (f(net, &p) - f(net, &m)) / (2.0 * h)));
        }
        for l in 0..net.layers.len() {
            for k in 0..net.layers[l].weight.as_slice().len() {
                let (mut p, mut m) = (net.clone(), net.clone());
                p.layers[l].weight.as_mut_slice()[k] += h;
                m.layers[l].weight.as_mut_slice()[k] -= h;
                worst = worst.max(rel(grads.weights[l][k], (f(&p, v) - f(&m, v)) / (2.0 * h)));
            }
            for k in 0..net.layers[l].bias.len() {
                let (mut p, mut m) = (net.clone(), net.clone());
                p.layers[l].bias[k] += h;
                m.layers[l].bias[k] -= h;
                worst = worst.max(rel(grads.biases[l][k], (f(&p, v) - f(&m, v)) / (2.0 * h)));
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for act in [ActivationKind::Relu, ActivationKind::Identity] {
            for p in [2, 3, 5] {
                for r in [1, 2, 4] {
                    // resample until no pre-activation sits near a relu kink
                    let (net, v) = loop {
                        let net = random_net(&mut rng, 3, r, p);
                        let v = rand_vec(&mut rng, 3);
                        let (_, c) = forward_net(&net, &v, act).unwrap();
                        if act == ActivationKind::Identity || c.min_abs_pre_activation() > 1e-3 {
                            break (net, v);
                        }
                    };
                    let w = rand_vec(&mut rng, 3);
                    let err = check_fd(&net, &v, &w, act);
                    assert!(err < 1e-5, "{act:?} p={p} r={r}: {err}");
                }
            }
        }
    }

    fn feature_set(origin: Vec<f64>, generated: Vec<Vec<f64>>) -> GeneratedFeatureSet {
        GeneratedFeatureSet {
            origin: DenseVector::new(origin).unwrap(),
            caches: Vec::new(),
            generated: generated.into_iter().map(|g| DenseVector::new(g).unwrap()).collect(),
            field_index: 0,
        }
    }

    #[test]
    fn merge_sum_cases() {
        let v = vec![1.0, -2.0, 0.5];
        assert_eq!(merge_sum(&feature_set(v.clone(), vec![])).vector.as_slice(), v.as_slice());
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let m = merge_sum(&feature_set(v.clone(), vec![neg, vec![0.0; 3]]));
        assert!(m.vector.iter().all(|x| *x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 5)).collect();
        let o = rand_vec(&mut rng, 5);
        let m = merge_sum(&feature_set(o.clone(), gs.clone()));
        for i in 0..5 {
            let s = o[i] + gs[0][i] + gs[1][i] + gs[2][i];
            assert!((m.vector[i] - s).abs() < 1e-15);
        }
        let grads = merge_backward(&[0.3, 0.1, -0.2, 0.0, 1.0], &m, &feature_set(o, gs), None).unwrap();
        assert_eq!(grads.origin.as_slice(), &[0.3, 0.1, -0.2, 0.0, 1.0]);
        assert!(grads.generated.iter().all(|g| g.as_slice() == [0.3, 0.1, -0.2, 0.0, 1.0]));
    }

    #[test]
    fn merge_product_cases() {
        let ln = LayerNormParams::identity(4);
        let v = vec![0.3, -1.0, 2.0, 0.7];
        let m = merge_product(&feature_set(v.clone(), vec![vec![1.0; 4]]), &ln).unwrap();
        let (direct, _) = layer_norm_forward(&v, &ln).unwrap();
        assert_eq!(m.vector, direct);

        let ln2 = LayerNormParams::new(
            DenseVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            DenseVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            LAYER_NORM_EPSILON,
        )
        .unwrap();
        let m = merge_product(&feature_set(vec![0.0; 4], vec![vec![0.5; 4]]), &ln2).unwrap();
        assert_eq!(m.vector.as_slice(), ln2.bias.as_slice());

        assert!(matches!(merge_product(&feature_set(v.clone(), vec![]), &ln), Err(Error::Config(_))));
        assert!(matches!(merge_product(&feature_set(v, vec![vec![1.0; 4]; 2]), &ln), Err(Error::Config(_))));
    }

    #[test]
    fn merge_product_matches_scripted_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (v, g) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let ln = LayerNormParams::new(
            DenseVector::new(rand_vec(&mut rng, 8)).unwrap(),
            DenseVector::new(rand_vec(&mut rng, 8)).unwrap(),
            LAYER_NORM_EPSILON,
        )
        .unwrap();
        let m = merge_product(&feature_set(v.clone(), vec![g.clone()]), &ln).unwrap();
        let prod: Vec<f64> = (0..8).map(|i| g[i] * v[i]).collect();
        let mu = prod.iter().sum::<f64>() / 8.0;
        let sd = (prod.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0 + 1e-12).sqrt();
        for i in 0..8 {
            assert!((m.vector[i] - (ln.gain[i] * (prod[i] - mu) / sd + ln.bias[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn merge_product_backward_with_unit_generator() {
        let ln = LayerNormParams::identity(3);
        let v = vec![0.2, -0.4, 1.1];
        let fs = feature_set(v.clone(), vec![vec![1.0; 3]]);
        let m = merge_product(&fs, &ln).unwrap();
        let grad = [0.5, -1.0, 0.25];
        let g = merge_backward(&grad, &m, &fs, Some(&ln)).unwrap();
        let lg = g.layer_norm.unwrap();
        // origin gradient is the layer-norm input gradient times the constant factor 1
        assert_eq!(g.origin.as_slice(), lg.x.as_slice());
        for i in 0..3 {
            assert_eq!(g.generated[0][i], lg.x[i] * v[i]);
        }
        assert!(matches!(merge_backward(&grad, &m, &fs, None), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 5;
        let w = rand_vec(&mut rng, d);
        let ln = LayerNormParams::new(
            DenseVector::new(rand_vec(&mut rng, d)).unwrap(),
            DenseVector::new(rand_vec(&mut rng, d)).unwrap(),
            LAYER_NORM_EPSILON,
        )
        .unwrap();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        for strategy in [MergeStrategy::Sum, MergeStrategy::Product] {
            let u = if strategy == MergeStrategy::Sum { 3 } else { 1 };
            let o = rand_vec(&mut rng, d);
            let gs: Vec<Vec<f64>> = (0..u).map(|_| rand_vec(&mut rng, d)).collect();
            let eval = |o: &[f64], gs: &[Vec<f64>]| {
                let fs = feature_set(o.to_vec(), gs.to_vec());
                let m = match strategy {
                    MergeStrategy::Sum => merge_sum(&fs),
                    MergeStrategy::Product => merge_product(&fs, &ln).unwrap(),
                };
                crate::numerics::dot(&m.vector, &w)
            };
            let fs = feature_set(o.clone(), gs.clone());
            let m = match strategy {
                MergeStrategy::Sum => merge_sum(&fs),
                MergeStrategy::Product => merge_product(&fs, &ln).unwrap(),
            };
            let grads = merge_backward(&w, &m, &fs, Some(&ln)).unwrap();
            for i in 0..d {
                let (mut p, mut q) = (o.clone(), o.clone());
                p[i] += h;
                q[i] -= h;
                let fd = (eval(&p, &gs) - eval(&q, &gs)) / (2.0 * h);
                assert!(rel(grads.origin[i], fd) < 1e-5, "{strategy:?}");
                for j in 0..u {
                    let (mut p, mut q) = (gs.clone(), gs.clone());
                    p[j][i] += h;
                    q[j][i] -= h;
                    let fd = (eval(&o, &p) - eval(&o, &q)) / (2.0 * h);
                    assert!(rel(grads.generated[j][i], fd) < 1e-5, "{strategy:?}");
                }
            }
        }
    }

    #[test]
    fn fields_own_their_generators() {
        let c = ModelConfig { d: 4, u: 2, ..ModelConfig::new(Variant::LaFm, vec![3, 3, 3]) };
        let params = build_parameters(&c).unwrap();
        let v = [0.3, -0.2, 0.9, 0.1];
        let before: Vec<GeneratedFeatureSet> = (0..3).map(|f| generate(&v, f, &params).unwrap()).collect();
        let mut perturbed = params.clone();
        for t in perturbed.field_tensors_mut(1) {
            for x in t.iter_mut() {
                *x += 0.25;
            }
        }
        for f in [0, 2] {
            assert_eq!(generate(&v, f, &perturbed).unwrap().generated, before[f].generated);
        }
        assert_ne!(generate(&v, 1, &perturbed).unwrap().generated, before[1].generated);
        assert!(fgnet_forward(&v, 0, 2, &params).is_err());
    }

    #[test]
    fn evaluation_counter_counts_forward_passes() {
        let c = ModelConfig { d: 2, u: 3, ..ModelConfig::new(Variant::LsFm, vec![2]) };
        let params = build_parameters(&c).unwrap();
        let before = evaluations_on_this_thread();
        generate(&[0.1, 0.2], 0, &params).unwrap();
        assert_eq!(evaluations_on_this_thread() - before, 3);
    }
}
