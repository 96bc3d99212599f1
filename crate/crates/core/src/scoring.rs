//! Model scores: the FM interaction through the sum-of-squares identity,
//! FFM through field-indexed embeddings, and the three leaf variants.
//!
//! For the fm family, each active feature contributes one or more vectors
//! `r` and the interaction is taken over every pair of `a = r·x`:
//!
//! - fm: `{v}`
//! - la_fm: `{v, g_1, …, g_u}`, so features generated from the same origin
//!   also interact with each other and with their origin
//! - ls_fm: `{v + Σ g_j}`
//! - lp_fm: `{LayerNorm(g ⊙ v)}`
//!
//! Generated features never get linear weights.

use std::collections::HashMap;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::fgnet::{generate, merge_product, merge_sum, GeneratedFeatureSet, MergedFeature};
use crate::numerics::{dot, sigmoid, squared_norm};
use crate::parallel::{self, Parallelism};
use crate::params::{ParameterSet, Variant};

/// Decomposition of one logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub bias: f64,
    pub linear: f64,
    pub interaction: f64,
    pub logit: f64,
    pub probability: f64,
}

impl ScoreBreakdown {
    fn new(bias: f64, linear: f64, interaction: f64) -> Self {
        let logit = bias + linear + interaction;
        Self { bias, linear, interaction, logit, probability: sigmoid(logit) }
    }
}

/// `Σ_{i<j} ⟨a_i, a_j⟩` with `a_i = v_i·x_i`, in one pass via
/// `½(‖Σ a_i‖² − Σ ‖a_i‖²)`.
pub fn fm_interaction_fast(active: &[(&[f64], f64)]) -> f64 {
    let Some(d) = active.first().map(|(v, _)| v.len()) else { return 0.0 };
    let mut sum = vec![0.0; d];
    let mut sq = 0.0;
    for (v, x) in active {
        for (s, vi) in sum.iter_mut().zip(v.iter()) {
            *s += vi * x;
        }
        sq += squared_norm(v) * x * x;
    }
    0.5 * (squared_norm(&sum) - sq)
}

/// Literal double loop over pairs; the test oracle for [`fm_interaction_fast`].
pub fn fm_interaction_bruteforce(active: &[(&[f64], f64)]) -> f64 {
    let mut total = 0.0;
    for (i, (vi, xi)) in active.iter().enumerate() {
        for (vj, xj) in &active[i + 1..] {
            total += dot(vi, vj) * xi * xj;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ReprCache {
    Plain,
    Added(GeneratedFeatureSet),
    Merged(GeneratedFeatureSet, MergedFeature),
}

/// Vectors one feature contributes to the fm-family interaction.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeatureRepr {
    pub id: usize,
    pub field: usize,
    pub vectors: Vec<Vec<f64>>,
    pub cache: ReprCache,
}

/// Representation of feature `id` of `field` for an fm-family variant.
pub(crate) fn feature_repr(params: &ParameterSet, id: usize, field: usize) -> Result<FeatureRepr> {
    let v = params.embedding(id);
    let (vectors, cache) = match params.config.variant {
        Variant::Fm => (vec![v.to_vec()], ReprCache::Plain),
        Variant::LaFm => {
            let fs = generate(v, field, params)?;
            let mut vectors = Vec::with_capacity(1 + fs.generated.len());
            vectors.push(v.to_vec());
            vectors.extend(fs.generated.iter().map(|g| g.as_slice().to_vec()));
            (vectors, ReprCache::Added(fs))
        }
        Variant::LsFm => {
            let fs = generate(v, field, params)?;
            let m = merge_sum(&fs);
            (vec![m.vector.as_slice().to_vec()], ReprCache::Merged(fs, m))
        }
        Variant::LpFm => {
            let fs = generate(v, field, params)?;
            let m = merge_product(&fs, &params.layer_norms[field])?;
            (vec![m.vector.as_slice().to_vec()], ReprCache::Merged(fs, m))
        }
        Variant::Ffm => return Err(Error::Config("ffm has no per-feature representation".into())),
    };
    Ok(FeatureRepr { id, field, vectors, cache })
}

/// Distinct features of a batch with their representations, so that each
/// generator runs once per feature rather than once per occurrence.
#[derive(Debug, Clone)]
pub(crate) struct FeatureTable {
    pub reprs: Vec<FeatureRepr>,
}

/// An instance resolved against a [`FeatureTable`]: `(slot, value)` per entry.
pub(crate) struct Resolved {
    pub slots: Vec<(usize, f64)>,
    pub linear: f64,
}

/// Resolves a batch, then builds representations for the distinct features
/// in order of first appearance.
pub(crate) fn build_table<'a, I>(
    params: &ParameterSet,
    batch: I,
    mode: Parallelism,
) -> Result<(FeatureTable, Vec<Resolved>)>
where
    I: IntoIterator<Item = &'a Instance>,
{
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut resolved = Vec::new();
    for inst in batch {
        let mut slots = Vec::with_capacity(inst.entries.len());
        let mut linear = 0.0;
        for e in &inst.entries {
            let id = params.feature_id(e)?;
            linear += params.linear[id] * e.value;
            let slot = *index.entry(id).or_insert_with(|| {
                keys.push((id, e.field as usize));
                keys.len() - 1
            });
            slots.push((slot, e.value));
        }
        resolved.push(Resolved { slots, linear });
    }
    let reprs = parallel::map(&keys, mode, |&(id, field)| feature_repr(params, id, field))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok((FeatureTable { reprs }, resolved))
}

/// Fm-family score of a resolved instance; also returns `Σ a` for backward.
pub(crate) fn score_resolved(params: &ParameterSet, table: &FeatureTable, r: &Resolved) -> (ScoreBreakdown, Vec<f64>) {
    let d = params.d();
    let mut sum = vec![0.0; d];
    let mut sq = 0.0;
    for &(slot, x) in &r.slots {
        for v in &table.reprs[slot].vectors {
            for (s, vi) in sum.iter_mut().zip(v) {
                *s += vi * x;
            }
            sq += squared_norm(v) * x * x;
        }
    }
    let interaction = 0.5 * (squared_norm(&sum) - sq);
    (ScoreBreakdown::new(params.bias, r.linear, interaction), sum)
}

pub fn score_fm(instance: &Instance, params: &ParameterSet) -> Result<ScoreBreakdown> {
    if params.config.variant != Variant::Fm {
        return Err(Error::Config(format!("score_fm called on a {} model", params.config.variant)));
    }
    let mut active = Vec::with_capacity(instance.entries.len());
    let mut linear = 0.0;
    for e in &instance.entries {
        let id = params.feature_id(e)?;
        linear += params.linear[id] * e.value;
        active.push((params.embedding(id), e.value));
    }
    Ok(ScoreBreakdown::new(params.bias, linear, fm_interaction_fast(&active)))
}

/// Slot of the embedding a feature of field `own` uses against field `other`.
#[inline]
pub(crate) fn ffm_slot(own: usize, other: usize) -> usize {
    if other < own {
        other
    } else {
        other - 1
    }
}

/// Resolves an ffm instance to `(id, field, value)`, rejecting repeated fields.
pub(crate) fn resolve_ffm(instance: &Instance, params: &ParameterSet) -> Result<Vec<(usize, usize, f64)>> {
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(instance.entries.len());
    for e in &instance.entries {
        let id = params.feature_id(e)?;
        let field = e.field as usize;
        if out.iter().any(|&(_, f, _)| f == field) {
            return Err(Error::Contract(format!("ffm instance has two entries in field {field}")));
        }
        out.push((id, field, e.value));
    }
    Ok(out)
}

pub fn score_ffm(instance: &Instance, params: &ParameterSet) -> Result<ScoreBreakdown> {
    if params.config.variant != Variant::Ffm {
        return Err(Error::Config(format!("score_ffm called on a {} model", params.config.variant)));
    }
    let active = resolve_ffm(instance, params)?;
    let linear = active.iter().map(|&(id, _, x)| params.linear[id] * x).sum();
    let mut interaction = 0.0;
    for (i, &(id_i, f_i, x_i)) in active.iter().enumerate() {
        for &(id_j, f_j, x_j) in &active[i + 1..] {
            let a = params.embedding_slot(id_i, ffm_slot(f_i, f_j));
            let b = params.embedding_slot(id_j, ffm_slot(f_j, f_i));
            interaction += dot(a, b) * x_i * x_j;
        }
    }
    Ok(ScoreBreakdown::new(params.bias, linear, interaction))
}

pub fn score_leaf(instance: &Instance, params: &ParameterSet) -> Result<ScoreBreakdown> {
    if !params.config.variant.is_leaf() {
        return Err(Error::Config(format!("score_leaf called on a {} model", params.config.variant)));
    }
    let (table, resolved) = build_table(params, std::iter::once(instance), Parallelism::Sequential)?;
    Ok(score_resolved(params, &table, &resolved[0]).0)
}

/// Dispatches on the model's variant.
pub fn score(instance: &Instance, params: &ParameterSet) -> Result<ScoreBreakdown> {
    match params.config.variant {
        Variant::Fm => score_fm(instance, params),
        Variant::Ffm => score_ffm(instance, params),
        _ => score_leaf(instance, params),
    }
}

/// Scores many instances, sharing generator evaluations within chunks.
pub fn score_batch(instances: &[Instance], params: &ParameterSet, mode: Parallelism) -> Result<Vec<ScoreBreakdown>> {
    if params.config.variant == Variant::Ffm {
        return parallel::map(instances, mode, |i| score_ffm(i, params)).into_iter().collect();
    }
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(4096) {
        let (table, resolved) = build_table(params, chunk, mode)?;
        out.extend(parallel::map(&resolved, mode, |r| score_resolved(params, &table, r).0));
    }
    Ok(out)
}
