//! Central finite differences against [`backward_batch`] on tiny models.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::backward_batch;
use crate::data::{Entry, Instance};
use crate::error::{Error, Result};
use crate::metrics::logloss;
use crate::numerics::{sigmoid, ActivationKind};
use crate::parallel::Parallelism;
use crate::params::{build_parameters, Gradients, ModelConfig, ParameterSet, Variant};
use crate::scoring::{feature_repr, fm_interaction_bruteforce, score, ReprCache};

const STEP: f64 = 1e-6;
/// Relative errors use `max(|a|, |n|, ERROR_FLOOR)` as denominator. At this
/// step the difference quotient carries ~1e-9 of rounding noise, so below
/// the floor the error is measured absolutely.
const ERROR_FLOOR: f64 = 1e-2;
/// Smallest allowed `|pre-activation|` for relu cases.
const KINK_MARGIN: f64 = 1e-3;
/// Cases are resampled until every logit is this small, keeping the loss
/// far from saturation and clamping.
const MAX_LOGIT: f64 = 6.0;
const TINY_VOCAB: [usize; 3] = [4, 3, 1];
const BATCH: usize = 4;
const LAMBDA: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TensorClass {
    Bias,
    Linear,
    Embedding,
    GeneratorWeight,
    GeneratorBias,
    LayerNormGain,
    LayerNormBias,
}

impl TensorClass {
    pub fn name(self) -> &'static str {
        match self {
            TensorClass::Bias => "bias",
            TensorClass::Linear => "linear",
            TensorClass::Embedding => "embedding",
            TensorClass::GeneratorWeight => "generator_weight",
            TensorClass::GeneratorBias => "generator_bias",
            TensorClass::LayerNormGain => "layer_norm_gain",
            TensorClass::LayerNormBias => "layer_norm_bias",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassError {
    pub class: TensorClass,
    pub max_rel_error: f64,
    pub scalars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub cases: usize,
    pub per_class: Vec<ClassError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "variant={}\tcases={}\tmax_rel_error={:.3e}\ttolerance={:.0e}\t{}",
            self.variant,
            self.cases,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for c in &self.per_class {
            writeln!(f, "  {}\tscalars={}\tmax_rel_error={:.3e}", c.class.name(), c.scalars, c.max_rel_error)?;
        }
        Ok(())
    }
}

/// `1e-6` for smooth models, `1e-4` when relu generators add kinks.
pub fn default_tolerance(config: &ModelConfig) -> f64 {
    let relu = config.generators() > 0 && config.generator_activation() == ActivationKind::Relu;
    if relu {
        1e-4
    } else {
        1e-6
    }
}

/// Checks every scalar of `n_cases` random tiny models shaped like `config`.
///
/// Vocabulary is fixed at three fields (the last numeric), `d ≤ 4`, and
/// `λ = 1e-2` so the penalty gradient is exercised. Untouched scalars are
/// compared against the lazy-update convention `2λθ`.
///
/// The penalty is separable, so its difference is taken on the perturbed
/// scalar alone; re-summing every `θ²` would bury the step in rounding.
pub fn gradient_check(config: &ModelConfig, n_cases: usize, tolerance: f64) -> Result<GradCheckReport> {
    let mut classes: Vec<ClassError> = Vec::new();
    let tiny =
        ModelConfig { per_field_vocab: TINY_VOCAB.to_vec(), d: config.d.min(4), lambda: LAMBDA, ..config.clone() };
    for case in 0..n_cases {
        let seed = config.seed.wrapping_add(1000 * case as u64);
        let (params, batch) = sample_case(&tiny, seed)?;
        let refs: Vec<&Instance> = batch.iter().collect();
        let (grads, _) = backward_batch(&refs, &params, Parallelism::Sequential)?;
        let analytic = flatten_gradients(&params, &grads);
        let layout = scalar_classes(&params);
        let mut probe = params.clone();
        for (i, class) in layout.into_iter().enumerate() {
            let orig = *scalar_mut(&mut probe, i);
            *scalar_mut(&mut probe, i) = orig + STEP;
            let up = batch_loss(&refs, &probe)?;
            *scalar_mut(&mut probe, i) = orig - STEP;
            let down = batch_loss(&refs, &probe)?;
            *scalar_mut(&mut probe, i) = orig;
            let penalty =
                if class == TensorClass::Bias { 0.0 } else { LAMBDA * ((orig + STEP).powi(2) - (orig - STEP).powi(2)) };
            let numeric = (up - down + penalty) / (2.0 * STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            match classes.iter_mut().find(|c| c.class == class) {
                Some(c) => {
                    c.max_rel_error = c.max_rel_error.max(err);
                    c.scalars += 1;
                }
                None => classes.push(ClassError { class, max_rel_error: err, scalars: 1 }),
            }
        }
    }
    classes.sort_by_key(|c| c.class);
    let max_rel_error = classes.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    Ok(GradCheckReport { variant: config.variant, cases: n_cases, per_class: classes, max_rel_error, tolerance })
}

/// Mean log loss without the penalty. Fm-family interactions are summed
/// pair by pair, which loses less to cancellation than the fast identity.
fn batch_loss(batch: &[&Instance], params: &ParameterSet) -> Result<f64> {
    let mut total = 0.0;
    for inst in batch {
        let logit = if params.config.variant == Variant::Ffm {
            score(inst, params)?.logit
        } else {
            let mut logit = params.bias;
            let mut active: Vec<(Vec<f64>, f64)> = Vec::new();
            for e in &inst.entries {
                let id = params.feature_id(e)?;
                logit += params.linear[id] * e.value;
                let repr = feature_repr(params, id, e.field as usize)?;
                active.extend(repr.vectors.into_iter().map(|v| (v, e.value)));
            }
            let view: Vec<(&[f64], f64)> = active.iter().map(|(v, x)| (v.as_slice(), *x)).collect();
            logit + fm_interaction_bruteforce(&view)
        };
        total += logloss(sigmoid(logit), inst.label);
    }
    Ok(total / batch.len() as f64)
}

/// Random parameters and batch, resampled until relu inputs clear the kink.
fn sample_case(config: &ModelConfig, seed: u64) -> Result<(ParameterSet, Vec<Instance>)> {
    let relu = config.generators() > 0 && config.generator_activation() == ActivationKind::Relu;
    for attempt in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(attempt));
        let params = random_parameters(config, &mut rng)?;
        let batch: Vec<Instance> = (0..BATCH)
            .map(|_| {
                let entries = TINY_VOCAB
                    .iter()
                    .enumerate()
                    .map(|(f, &v)| {
                        let x = if v == 1 {
                            rng.random_range(0.3..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 }
                        } else {
                            1.0
                        };
                        Entry::new(f, rng.random_range(0..v), x)
                    })
                    .collect();
                Instance::new(rng.random_range(0..2u8), entries)
            })
            .collect();
        let mut max_logit = 0.0f64;
        for inst in &batch {
            max_logit = max_logit.max(score(inst, &params)?.logit.abs());
        }
        if max_logit < MAX_LOGIT && (!relu || min_pre_activation(&params, &batch)? > KINK_MARGIN) {
            return Ok((params, batch));
        }
    }
    Err(Error::Config("could not sample a well-conditioned gradient-check case".into()))
}

fn min_pre_activation(params: &ParameterSet, batch: &[Instance]) -> Result<f64> {
    let mut min = f64::INFINITY;
    for inst in batch {
        for e in &inst.entries {
            let repr = feature_repr(params, params.feature_id(e)?, e.field as usize)?;
            let fs = match &repr.cache {
                ReprCache::Plain => continue,
                ReprCache::Added(fs) | ReprCache::Merged(fs, _) => fs,
            };
            for c in &fs.caches {
                min = min.min(c.min_abs_pre_activation());
            }
        }
    }
    Ok(min)
}

fn random_parameters(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
    let mut params = build_parameters(&ModelConfig { seed: rng.random(), ..config.clone() })?;
    let wide = Normal::new(0.0, 0.4).expect("valid normal");
    let narrow = Normal::new(0.0, 0.3).expect("valid normal");
    params.bias = narrow.sample(rng);
    params.linear.iter_mut().for_each(|v| *v = wide.sample(rng));
    params.embeddings.iter_mut().for_each(|v| *v = wide.sample(rng));
    for nets in &mut params.fgnets {
        for net in nets {
            for layer in &mut net.layers {
                layer.bias.iter_mut().for_each(|v| *v = narrow.sample(rng));
            }
        }
    }
    for ln in &mut params.layer_norms {
        ln.gain.iter_mut().for_each(|v| *v = 1.0 + narrow.sample(rng));
        ln.bias.iter_mut().for_each(|v| *v = narrow.sample(rng));
    }
    Ok(params)
}

/// Class of every scalar in [`ParameterSet::all_scalars`] order.
fn scalar_classes(params: &ParameterSet) -> Vec<TensorClass> {
    let mut out = vec![TensorClass::Bias];
    out.extend(std::iter::repeat_n(TensorClass::Linear, params.linear.len()));
    out.extend(std::iter::repeat_n(TensorClass::Embedding, params.embeddings.len()));
    for f in 0..params.num_fields() {
        for net in &params.fgnets[f] {
            for l in &net.layers {
                out.extend(std::iter::repeat_n(TensorClass::GeneratorWeight, l.weight.as_slice().len()));
                out.extend(std::iter::repeat_n(TensorClass::GeneratorBias, l.bias.len()));
            }
        }
        if let Some(ln) = params.layer_norms.get(f) {
            out.extend(std::iter::repeat_n(TensorClass::LayerNormGain, ln.gain.len()));
            out.extend(std::iter::repeat_n(TensorClass::LayerNormBias, ln.bias.len()));
        }
    }
    out
}

fn scalar_mut(p: &mut ParameterSet, mut i: usize) -> &mut f64 {
    if i == 0 {
        return &mut p.bias;
    }
    i -= 1;
    if i < p.linear.len() {
        return &mut p.linear[i];
    }
    i -= p.linear.len();
    if i < p.embeddings.len() {
        return &mut p.embeddings[i];
    }
    i -= p.embeddings.len();
    let mut field = 0;
    loop {
        let len: usize = p.field_tensors(field).iter().map(|t| t.len()).sum();
        if i < len {
            break;
        }
        i -= len;
        field += 1;
    }
    for t in p.field_tensors_mut(field) {
        if i < t.len() {
            return &mut t[i];
        }
        i -= t.len();
    }
    unreachable!("scalar index out of range")
}

/// Analytic gradient in [`ParameterSet::all_scalars`] order; untouched
/// scalars get `2λθ`.
fn flatten_gradients(params: &ParameterSet, grads: &Gradients) -> Vec<f64> {
    let l2 = |theta: f64| 2.0 * params.config.lambda * theta;
    let d = params.d();
    let mut out = vec![grads.bias];
    out.extend(params.linear.iter().enumerate().map(|(id, &t)| grads.linear.get(&id).copied().unwrap_or(l2(t))));
    for (row, theta) in params.embeddings.chunks(d).enumerate() {
        match grads.embedding.get(&row) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(theta.iter().map(|&t| l2(t))),
        }
    }
    for f in 0..params.num_fields() {
        match &grads.fields[f] {
            Some(g) => g.iter().for_each(|t| out.extend_from_slice(t)),
            None => params.field_tensors(f).iter().for_each(|t| out.extend(t.iter().map(|&v| l2(v)))),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_every_scalar() {
        let c = ModelConfig { d: 3, u: 1, ..ModelConfig::new(Variant::LpFm, TINY_VOCAB.to_vec()) };
        let mut p = build_parameters(&c).unwrap();
        let n = p.scalar_count();
        assert_eq!(scalar_classes(&p).len(), n);
        for i in 0..n {
            *scalar_mut(&mut p, i) = i as f64;
        }
        assert!(p.all_scalars().enumerate().all(|(i, v)| v == i as f64));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let c = ModelConfig { d: 2, ..ModelConfig::new(Variant::Fm, TINY_VOCAB.to_vec()) };
        let (p, batch) = sample_case(&c, 3).unwrap();
        let refs: Vec<&Instance> = batch.iter().collect();
        let (mut g, _) = backward_batch(&refs, &p, Parallelism::Sequential).unwrap();
        let good = flatten_gradients(&p, &g);
        g.bias += 0.01;
        assert_ne!(flatten_gradients(&p, &g), good);
    }
}
