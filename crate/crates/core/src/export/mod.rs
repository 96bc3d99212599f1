//! Folding trained models into a flat per-feature table and reading and
//! writing model files.
//!
//! A folded feature carries a vector `s` and a scalar `q`, and serving uses
//!
//! ```text
//! logit = w0 + Σ w·x + ½(‖Σ s·x‖² − Σ q·x²)
//! ```
//!
//! For ls_fm and lp_fm, `s` is the merged vector and `q = ‖s‖²`. For la_fm a
//! feature contributes `u + 1` vectors; since the sum over pairs only needs
//! their sum and their total squared norm, `s = v + Σ g` and
//! `q = ‖v‖² + Σ ‖g‖²`. No generator runs at serving time.

mod codec;

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use codec::{read_preprocessor, write_preprocessor, Kind, Reader, Writer};
pub use codec::{FORMAT_VERSION, MAGIC};

use crate::data::{Instance, Preprocessor};
use crate::error::{Error, Result};
use crate::metrics::Scorer;
use crate::numerics::{sigmoid, squared_norm, ActivationKind};
use crate::parallel::{self, Parallelism};
use crate::params::{build_parameters, AdamConfig, ModelConfig, ParameterSet, Variant};
use crate::scoring::feature_repr;

/// Revision of the fold arithmetic recorded in folded files.
pub const FOLD_VERSION: u32 = 1;
/// Feature hashing recorded in model files.
pub const HASH_SPEC: &str = "fnv1a64(field:token) mod (buckets-1) + 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownFeaturePolicy {
    /// Drop the entry and count it.
    #[default]
    Skip,
    Error,
}

/// Serving artifact: linear weights and one `(s, q)` pair per feature.
#[derive(Debug)]
pub struct FoldedModel {
    pub variant: Variant,
    pub d: usize,
    pub fold_version: u32,
    pub hash_spec: String,
    pub per_field_vocab: Vec<usize>,
    field_offsets: Vec<usize>,
    pub bias: f64,
    pub linear: Vec<f64>,
    /// Row-major `m × d`.
    pub folded: Vec<f64>,
    pub sq_norms: Vec<f64>,
    pub preprocessor: Option<Preprocessor>,
    pub policy: UnknownFeaturePolicy,
    skipped: AtomicU64,
}

impl Clone for FoldedModel {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            d: self.d,
            fold_version: self.fold_version,
            hash_spec: self.hash_spec.clone(),
            per_field_vocab: self.per_field_vocab.clone(),
            field_offsets: self.field_offsets.clone(),
            bias: self.bias,
            linear: self.linear.clone(),
            folded: self.folded.clone(),
            sq_norms: self.sq_norms.clone(),
            preprocessor: self.preprocessor.clone(),
            policy: self.policy,
            skipped: AtomicU64::new(self.skipped()),
        }
    }
}

/// Compares the stored model, not the skip counter or policy.
impl PartialEq for FoldedModel {
    fn eq(&self, other: &Self) -> bool {
        let bits =
            |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.variant == other.variant
            && self.d == other.d
            && self.fold_version == other.fold_version
            && self.hash_spec == other.hash_spec
            && self.per_field_vocab == other.per_field_vocab
            && self.bias.to_bits() == other.bias.to_bits()
            && bits(&self.linear, &other.linear)
            && bits(&self.folded, &other.folded)
            && bits(&self.sq_norms, &other.sq_norms)
            && self.preprocessor == other.preprocessor
    }
}

impl FoldedModel {
    /// Builds a model from raw tables, checking their shapes.
    pub fn from_parts(
        variant: Variant,
        d: usize,
        per_field_vocab: Vec<usize>,
        bias: f64,
        linear: Vec<f64>,
        folded: Vec<f64>,
        sq_norms: Vec<f64>,
    ) -> Result<Self> {
        let mut field_offsets = vec![0];
        for v in &per_field_vocab {
            field_offsets.push(field_offsets.last().unwrap() + v);
        }
        let m = *field_offsets.last().unwrap();
        if d == 0 || linear.len() != m || sq_norms.len() != m || folded.len() != m * d {
            return Err(Error::Shape(format!(
                "folded tables do not match m={m}, d={d}: linear {}, folded {}, q {}",
                linear.len(),
                folded.len(),
                sq_norms.len()
            )));
        }
        Ok(Self {
            variant,
            d,
            fold_version: FOLD_VERSION,
            hash_spec: HASH_SPEC.to_string(),
            per_field_vocab,
            field_offsets,
            bias,
            linear,
            folded,
            sq_norms,
            preprocessor: None,
            policy: UnknownFeaturePolicy::Skip,
            skipped: AtomicU64::new(0),
        })
    }

    pub fn num_features(&self) -> usize {
        self.linear.len()
    }

    pub fn num_fields(&self) -> usize {
        self.per_field_vocab.len()
    }

    /// Entries dropped so far under [`UnknownFeaturePolicy::Skip`].
    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    pub fn folded_vector(&self, id: usize) -> &[f64] {
        &self.folded[id * self.d..(id + 1) * self.d]
    }
}

/// Folds a trained model. Fails on ffm, whose per-pair embeddings have no
/// per-feature fold, and on non-finite parameters.
pub fn fold(params: &ParameterSet, mode: Parallelism) -> Result<FoldedModel> {
    if params.config.variant == Variant::Ffm {
        return Err(Error::Config("ffm models cannot be folded".into()));
    }
    if !params.is_finite() {
        return Err(Error::Integrity("parameters contain non-finite values".into()));
    }
    let d = params.d();
    let ids: Vec<(usize, usize)> = (0..params.num_fields())
        .flat_map(|f| (params.field_offsets[f]..params.field_offsets[f + 1]).map(move |id| (id, f)))
        .collect();
    let rows = parallel::map(&ids, mode, |&(id, field)| -> Result<(Vec<f64>, f64)> {
        let repr = feature_repr(params, id, field)?;
        let mut s = vec![0.0; d];
        let mut q = 0.0;
        for v in &repr.vectors {
            s.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            q += squared_norm(v);
        }
        Ok((s, q))
    });
    let mut folded = Vec::with_capacity(ids.len() * d);
    let mut sq_norms = Vec::with_capacity(ids.len());
    for row in rows {
        let (s, q) = row?;
        folded.extend_from_slice(&s);
        sq_norms.push(q);
    }
    if !folded.iter().chain(&sq_norms).all(|v| v.is_finite()) {
        return Err(Error::Integrity("fold produced non-finite values".into()));
    }
    FoldedModel::from_parts(
        params.config.variant,
        d,
        params.config.per_field_vocab.clone(),
        params.bias,
        params.linear.clone(),
        folded,
        sq_norms,
    )
}

const STACK_D: usize = 64;

/// Serving logit in one pass over the instance.
pub fn score_folded(instance: &Instance, model: &FoldedModel) -> Result<f64> {
    let d = model.d;
    let mut stack = [0.0; STACK_D];
    let mut heap;
    let sum: &mut [f64] = if d <= STACK_D {
        &mut stack[..d]
    } else {
        heap = vec![0.0; d];
        &mut heap
    };
    let mut logit = model.bias;
    let mut q = 0.0;
    for e in &instance.entries {
        let (field, feature) = (e.field as usize, e.feature as usize);
        let vocab = model.per_field_vocab.get(field).copied().unwrap_or(0);
        if feature >= vocab {
            match model.policy {
                UnknownFeaturePolicy::Skip => {
                    model.skipped.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                UnknownFeaturePolicy::Error => return Err(Error::Lookup { field, feature, vocab }),
            }
        }
        let id = model.field_offsets[field] + feature;
        let x = e.value;
        logit += model.linear[id] * x;
        q += model.sq_norms[id] * x * x;
        for (acc, s) in sum.iter_mut().zip(&model.folded[id * d..(id + 1) * d]) {
            *acc += s * x;
        }
    }
    Ok(logit + 0.5 * (squared_norm(sum) - q))
}

impl Scorer for FoldedModel {
    fn logit(&self, instance: &Instance) -> Result<f64> {
        score_folded(instance, self)
    }
}

pub fn encode_model(model: &FoldedModel) -> Vec<u8> {
    let mut w = Writer::new(Kind::Folded);
    w.u8(model.variant.code());
    w.size(model.d);
    w.u32(model.fold_version);
    w.str(&model.hash_spec);
    w.size(model.per_field_vocab.len());
    model.per_field_vocab.iter().for_each(|&v| w.size(v));
    w.f64(model.bias);
    w.f64s(&model.linear);
    w.f64s(&model.folded);
    w.f64s(&model.sq_norms);
    write_preprocessor(&mut w, model.preprocessor.as_ref());
    w.finish()
}

pub fn decode_model(bytes: &[u8]) -> Result<FoldedModel> {
    let mut r = Reader::open(bytes, Kind::Folded)?;
    let variant = Variant::from_code(r.u8()?)?;
    let d = r.size()?;
    let fold_version = r.u32()?;
    if fold_version != FOLD_VERSION {
        return Err(Error::Format(format!("unsupported fold version {fold_version}")));
    }
    let hash_spec = r.str()?;
    let f = r.size()?;
    let vocab = (0..f).map(|_| r.size()).collect::<Result<Vec<_>>>()?;
    let bias = r.f64()?;
    let linear = r.f64s()?;
    let folded = r.f64s()?;
    let sq_norms = r.f64s()?;
    let preprocessor = read_preprocessor(&mut r)?;
    r.finish()?;
    let mut model = FoldedModel::from_parts(variant, d, vocab, bias, linear, folded, sq_norms)?;
    model.hash_spec = hash_spec;
    model.preprocessor = preprocessor;
    Ok(model)
}

pub fn write_model(model: &FoldedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FoldedModel> {
    decode_model(&fs::read(path)?)
}

/// [`read_model`], additionally requiring embedding width `expected_d`.
pub fn read_model_expecting(path: impl AsRef<Path>, expected_d: usize) -> Result<FoldedModel> {
    let model = read_model(path)?;
    if model.d != expected_d {
        return Err(Error::Dimension { expected: expected_d, found: model.d });
    }
    Ok(model)
}

/// Full parameters and their config, for resuming or re-folding.
pub fn encode_checkpoint(params: &ParameterSet, preprocessor: Option<&Preprocessor>) -> Vec<u8> {
    let c = &params.config;
    let mut w = Writer::new(Kind::Checkpoint);
    w.u8(c.variant.code());
    w.size(c.d);
    w.size(c.per_field_vocab.len());
    c.per_field_vocab.iter().for_each(|&v| w.size(v));
    w.size(c.r);
    w.size(c.p);
    w.size(c.u);
    w.u8(matches!(c.activation, ActivationKind::Identity) as u8);
    w.f64(c.lambda);
    w.f64(c.learning_rate);
    w.size(c.batch_size);
    w.size(c.epochs);
    w.u64(c.seed);
    w.f64(c.adam.beta1);
    w.f64(c.adam.beta2);
    w.f64(c.adam.epsilon);
    w.f64s(&params.all_scalars().collect::<Vec<_>>());
    write_preprocessor(&mut w, preprocessor);
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, Option<Preprocessor>)> {
    let mut r = Reader::open(bytes, Kind::Checkpoint)?;
    let variant = Variant::from_code(r.u8()?)?;
    let d = r.size()?;
    let f = r.size()?;
    let vocab = (0..f).map(|_| r.size()).collect::<Result<Vec<_>>>()?;
    let mut config = ModelConfig::new(variant, vocab);
    config.d = d;
    config.r = r.size()?;
    config.p = r.size()?;
    config.u = r.size()?;
    config.activation = if r.u8()? == 1 { ActivationKind::Identity } else { ActivationKind::Relu };
    config.lambda = r.f64()?;
    config.learning_rate = r.f64()?;
    config.batch_size = r.size()?;
    config.epochs = r.size()?;
    config.seed = r.u64()?;
    config.adam = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, epsilon: r.f64()? };
    let scalars = r.f64s()?;
    let preprocessor = read_preprocessor(&mut r)?;
    r.finish()?;
    let mut params = build_parameters(&config)?;
    params.assign_scalars(&scalars)?;
    Ok((params, preprocessor))
}

pub fn write_checkpoint(
    params: &ParameterSet,
    preprocessor: Option<&Preprocessor>,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, preprocessor))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterSet, Option<Preprocessor>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Human-readable dump: a header, then `id  w  q  s…` per feature.
pub fn write_text(model: &FoldedModel, out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "# variant={} d={} fold_version={} hash={}",
        model.variant, model.d, model.fold_version, model.hash_spec
    )?;
    writeln!(out, "# vocab={:?}", model.per_field_vocab)?;
    writeln!(out, "bias\t{:e}", model.bias)?;
    for id in 0..model.num_features() {
        write!(out, "{id}\t{:e}\t{:e}", model.linear[id], model.sq_norms[id])?;
        for v in model.folded_vector(id) {
            write!(out, "\t{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamStats {
    pub lines: u64,
    pub skipped_features: u64,
    pub seconds: f64,
}

impl StreamStats {
    pub fn per_second(&self) -> f64 {
        self.lines as f64 / self.seconds.max(1e-9)
    }
}

/// Scores raw text lines with the model's stored preprocessor, writing
/// `probability \t logit` per line and a throughput summary to `log`.
pub fn score_stream(
    model: &FoldedModel,
    input: impl BufRead,
    mut output: impl Write,
    mut log: impl Write,
) -> Result<StreamStats> {
    let pre = model
        .preprocessor
        .as_ref()
        .ok_or_else(|| Error::Config("model file has no preprocessor; cannot parse raw lines".into()))?;
    let start = Instant::now();
    let skipped_before = model.skipped();
    let mut lines = 0u64;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || pre.is_header(&line) {
            continue;
        }
        let instance = pre.parse_line(&line, i + 1)?;
        let logit = score_folded(&instance, model)?;
        writeln!(output, "{}\t{}", sigmoid(logit), logit)?;
        lines += 1;
    }
    output.flush()?;
    let stats = StreamStats {
        lines,
        skipped_features: model.skipped() - skipped_before,
        seconds: start.elapsed().as_secs_f64(),
    };
    writeln!(
        log,
        "scored {} lines in {:.3}s ({:.0} lines/s), {} unknown features skipped",
        stats.lines,
        stats.seconds,
        stats.per_second(),
        stats.skipped_features
    )?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;
    use crate::scoring::score;

    fn inst(entries: &[(usize, usize, f64)]) -> Instance {
        Instance::new(1, entries.iter().map(|&(f, j, x)| Entry::new(f, j, x)).collect())
    }

    fn trained_like(variant: Variant) -> ParameterSet {
        let c = ModelConfig {
            d: 3,
            u: if variant == Variant::LpFm { 1 } else { 2 },
            ..ModelConfig::new(variant, vec![3, 2, 1])
        };
        let mut p = build_parameters(&c).unwrap();
        let n = p.scalar_count();
        let values: Vec<f64> = (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0 - 0.5) * 0.8).collect();
        p.assign_scalars(&values).unwrap();
        p
    }

    #[test]
    fn fold_matches_full_model() {
        for variant in [Variant::Fm, Variant::LaFm, Variant::LsFm, Variant::LpFm] {
            let p = trained_like(variant);
            let m = fold(&p, Parallelism::Sequential).unwrap();
            for k in 0..6 {
                let i = inst(&[(0, k % 3, 1.0), (1, k % 2, 1.0), (2, 0, k as f64 * 0.4 - 1.0)]);
                let full = score(&i, &p).unwrap().logit;
                assert!((score_folded(&i, &m).unwrap() - full).abs() < 1e-12, "{variant}");
            }
            assert_eq!(score_folded(&inst(&[]), &m).unwrap(), p.bias);
        }
        assert!(fold(&trained_like(Variant::Ffm), Parallelism::Sequential).is_err());
    }

    #[test]
    fn single_feature_algebra() {
        for variant in [Variant::Fm, Variant::LsFm, Variant::LpFm] {
            let m = fold(&trained_like(variant), Parallelism::Sequential).unwrap();
            for id in 0..m.num_features() {
                assert!((m.sq_norms[id] - squared_norm(m.folded_vector(id))).abs() < 1e-15);
            }
        }
        let m = fold(&trained_like(Variant::LaFm), Parallelism::Sequential).unwrap();
        let s = m.folded_vector(1);
        let expect = m.bias + m.linear[1] * 2.0 + 0.5 * (squared_norm(s) - m.sq_norms[1]) * 4.0;
        let got = score_folded(&inst(&[(0, 1, 2.0)]), &m).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((squared_norm(s) - m.sq_norms[1]).abs() > 1e-6);
    }

    #[test]
    fn la_fold_with_cancelling_generator() {
        // u=1, identity generator with W = −I and zero bias gives g = −v
        let c = ModelConfig {
            d: 2,
            u: 1,
            p: 2,
            activation: ActivationKind::Identity,
            ..ModelConfig::new(Variant::LaFm, vec![2])
        };
        let mut p = build_parameters(&c).unwrap();
        let layers = &mut p.fgnets[0][0].layers;
        layers[0].weight = crate::numerics::DenseMatrix::identity(2);
        let mut neg = crate::numerics::DenseMatrix::identity(2);
        neg.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        layers[1].weight = neg;
        p.embeddings = vec![0.3, -0.4, 1.0, 2.0];
        let m = fold(&p, Parallelism::Sequential).unwrap();
        assert!(m.folded.iter().all(|&v| v.abs() < 1e-15));
        assert!((m.sq_norms[0] - 2.0 * 0.25).abs() < 1e-15);
        assert!((m.sq_norms[1] - 2.0 * 5.0).abs() < 1e-14);
    }

    #[test]
    fn ls_fold_with_dead_generators_is_identity() {
        let mut p = trained_like(Variant::LsFm);
        for nets in &mut p.fgnets {
            for n in nets {
                n.layers.last_mut().unwrap().bias.iter_mut().for_each(|b| *b = -1e6);
            }
        }
        let m = fold(&p, Parallelism::Sequential).unwrap();
        assert_eq!(m.folded, p.embeddings);
    }

    #[test]
    fn unknown_features_follow_policy() {
        let mut m = fold(&trained_like(Variant::Fm), Parallelism::Sequential).unwrap();
        let i = inst(&[(0, 1, 1.0), (0, 9, 1.0), (7, 0, 1.0)]);
        let base = score_folded(&inst(&[(0, 1, 1.0)]), &m).unwrap();
        assert_eq!(score_folded(&i, &m).unwrap(), base);
        assert_eq!(m.skipped(), 2);
        m.policy = UnknownFeaturePolicy::Error;
        assert!(matches!(score_folded(&i, &m), Err(Error::Lookup { .. })));
    }

    #[test]
    fn round_trips_and_corruption() {
        let mut m = fold(&trained_like(Variant::LaFm), Parallelism::Sequential).unwrap();
        m.preprocessor = Some(Preprocessor::criteo(16).unwrap());
        let bytes = encode_model(&m);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        assert!(matches!(decode_model(&bytes[..bytes.len() - 9]), Err(Error::Checksum { .. })));
        assert!(matches!(decode_model(&bytes[..5]), Err(Error::Checksum { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(Error::Checksum { .. })));
        let mut future = bytes.clone();
        future[MAGIC.len()] = FORMAT_VERSION + 1;
        let n = future.len() - 4;
        let crc = crc32fast::hash(&future[..n]).to_le_bytes();
        future[n..].copy_from_slice(&crc);
        assert!(matches!(decode_model(&future), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_model(b"something else entirely"), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        for variant in Variant::ALL {
            let p = trained_like(variant);
            let (q, pre) = decode_checkpoint(&encode_checkpoint(&p, None)).unwrap();
            assert!(pre.is_none());
            assert_eq!(q, p);
        }
    }

    #[test]
    fn text_dump_lists_every_feature() {
        let m = fold(&trained_like(Variant::Fm), Parallelism::Sequential).unwrap();
        let mut out = Vec::new();
        write_text(&m, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3 + m.num_features());
    }
}
