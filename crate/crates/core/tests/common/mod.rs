//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the scoring, fgnet or metrics modules; the
//! oracles read raw parameter tensors and evaluate everything with plain
//! loops.

#![allow(dead_code)]

use leaffm::data::{Entry, Instance};
use leaffm::numerics::ActivationKind;
use leaffm::{build_parameters, ModelConfig, ParameterSet, Variant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random instance with one entry per field, some fields left out.
/// A field whose vocabulary is 1 is treated as numeric.
pub fn random_instance(rng: &mut ChaCha8Rng, vocab: &[usize]) -> Instance {
    let mut entries = Vec::new();
    for (f, &v) in vocab.iter().enumerate() {
        if rng.random_bool(0.15) {
            continue;
        }
        let x = if v == 1 { rng.random_range(-2.0..2.0) } else { 1.0 };
        entries.push(Entry::new(f, rng.random_range(0..v), x));
    }
    Instance::new(rng.random_range(0..2u8), entries)
}

/// Freshly built parameters with every scalar redrawn from `N(0, σ²)`;
/// layer-norm gains are centred on 1.
pub fn random_parameters(config: &ModelConfig, sigma: f64, rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = build_parameters(config).expect("valid config");
    let normal = Normal::new(0.0, sigma).unwrap();
    let n = p.scalar_count();
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    p.assign_scalars(&values).expect("scalar count");
    for ln in &mut p.layer_norms {
        ln.gain.iter_mut().for_each(|g| *g += 1.0);
    }
    p
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn feature_index(p: &ParameterSet, e: &Entry) -> usize {
    p.field_offsets[e.field as usize] + e.feature as usize
}

fn embedding(p: &ParameterSet, id: usize) -> Vec<f64> {
    let d = p.config.d;
    p.embeddings[id * d..(id + 1) * d].to_vec()
}

/// `Φ(W_p … Φ(W_1 v + β_1) … + β_p)` with explicit index loops.
fn generator(p: &ParameterSet, field: usize, j: usize, v: &[f64]) -> Vec<f64> {
    let identity = p.config.generator_activation() == ActivationKind::Identity;
    let mut h = v.to_vec();
    for layer in &p.fgnets[field][j].layers {
        let w = &layer.weight;
        let mut out = vec![0.0; w.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            let mut z = layer.bias.as_slice()[r];
            for (c, hc) in h.iter().enumerate() {
                z += w.as_slice()[r * w.cols() + c] * hc;
            }
            *o = if identity { z } else { relu(z) };
        }
        h = out;
    }
    h
}

/// Layer norm with population variance.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    (0..x.len()).map(|k| gain[k] * (x[k] - mean) / sd + bias[k]).collect()
}

/// Vectors feature `e` contributes, each paired with its value.
fn contributions(p: &ParameterSet, e: &Entry) -> Vec<Vec<f64>> {
    let f = e.field as usize;
    let v = embedding(p, feature_index(p, e));
    let u = p.fgnets.get(f).map_or(0, Vec::len);
    let gs: Vec<Vec<f64>> = (0..u).map(|j| generator(p, f, j, &v)).collect();
    match p.config.variant {
        Variant::Fm => vec![v],
        Variant::LaFm => std::iter::once(v).chain(gs).collect(),
        Variant::LsFm => {
            let mut s = v;
            for g in &gs {
                for k in 0..s.len() {
                    s[k] += g[k];
                }
            }
            vec![s]
        }
        Variant::LpFm => {
            let prod: Vec<f64> = (0..v.len()).map(|k| gs[0][k] * v[k]).collect();
            let ln = &p.layer_norms[f];
            vec![layer_norm(&prod, ln.gain.as_slice(), ln.bias.as_slice(), ln.epsilon)]
        }
        Variant::Ffm => unreachable!("ffm has no single representation"),
    }
}

/// Logit of an fm-family model, summing every unordered pair of active
/// vectors explicitly.
pub fn literal_logit(p: &ParameterSet, inst: &Instance) -> f64 {
    let mut logit = p.bias;
    let mut active: Vec<(Vec<f64>, f64)> = Vec::new();
    for e in &inst.entries {
        logit += p.linear[feature_index(p, e)] * e.value;
        for vec in contributions(p, e) {
            active.push((vec, e.value));
        }
    }
    for a in 0..active.len() {
        for b in a + 1..active.len() {
            let dot: f64 = active[a].0.iter().zip(&active[b].0).map(|(x, y)| x * y).sum();
            logit += dot * active[a].1 * active[b].1;
        }
    }
    logit
}

/// Pairwise AUC: fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice_wins = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0 {
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
    }
    twice_wins as f64 / 2.0 / (pos * neg) as f64
}

/// Weight scalars of a built model, counted from the tensors themselves:
/// linear weights, embedding rows, generator weight matrices.
pub fn counted_weights(p: &ParameterSet) -> usize {
    let nets: usize = p.fgnets.iter().flatten().flat_map(|n| &n.layers).map(|l| l.weight.as_slice().len()).sum();
    p.linear.len() + p.embeddings.len() + nets
}
