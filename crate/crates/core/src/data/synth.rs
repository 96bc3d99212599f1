//! Synthetic CTR data labelled by a hidden FM teacher.
//!
//! The teacher is a factorization machine over transformed values: fields
//! listed in `nonlinear_fields` enter through `T(x)` (for example `x²`),
//! which no model that is linear in each numerical value can represent.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{Entry, FieldKind, FieldSchema, Instance};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, parse_list, parse_value};
use crate::numerics::{dot, sigmoid};

/// Transform applied by the teacher to a numerical value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Square,
    /// `sign(x)·sqrt(|x|)`
    SignedSqrt,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Square => x * x,
            Transform::SignedSqrt => x.signum() * x.abs().sqrt(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Transform::Identity),
            "square" => Ok(Transform::Square),
            "sqrt" => Ok(Transform::SignedSqrt),
            other => Err(Error::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub instances: usize,
    /// One entry per field; 0 marks a numerical field.
    pub cardinalities: Vec<usize>,
    pub nonlinear_fields: Vec<usize>,
    pub transform: Transform,
    pub teacher_dim: usize,
    /// Standard deviation of teacher embedding entries.
    pub teacher_scale: f64,
    /// Standard deviation of teacher linear weights.
    pub linear_scale: f64,
    /// Linear weight of every transformed field.
    pub nonlinear_weight: f64,
    pub bias: f64,
    /// Standard deviation of Gaussian noise added to the teacher logit.
    pub noise: f64,
    /// Zipf exponent for categorical values (0 = uniform).
    pub skew: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// Ten fields: four numerical (two squared by the teacher) and six
    /// categorical of growing cardinality.
    fn default() -> Self {
        Self {
            instances: 50_000,
            cardinalities: vec![0, 0, 0, 0, 10, 20, 50, 100, 200, 500],
            nonlinear_fields: vec![0, 1],
            transform: Transform::Square,
            teacher_dim: 4,
            teacher_scale: 0.4,
            linear_scale: 0.3,
            nonlinear_weight: 0.8,
            bias: -0.5,
            noise: 0.0,
            skew: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Reads the flat key-value spec format; absent keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "instances" => spec.instances = parse_value(&k, &v)?,
                "cardinalities" => spec.cardinalities = parse_list(&k, &v)?,
                "nonlinear_fields" => spec.nonlinear_fields = parse_list(&k, &v)?,
                "transform" => spec.transform = Transform::parse(&v)?,
                "teacher_dim" => spec.teacher_dim = parse_value(&k, &v)?,
                "teacher_scale" => spec.teacher_scale = parse_value(&k, &v)?,
                "linear_scale" => spec.linear_scale = parse_value(&k, &v)?,
                "nonlinear_weight" => spec.nonlinear_weight = parse_value(&k, &v)?,
                "bias" => spec.bias = parse_value(&k, &v)?,
                "noise" => spec.noise = parse_value(&k, &v)?,
                "skew" => spec.skew = parse_value(&k, &v)?,
                "seed" | "teacher_seed" => spec.seed = parse_value(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown synth key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one field".into()));
        }
        if let Some(c) = self.cardinalities.iter().find(|&&c| c > u32::MAX as usize) {
            return Err(Error::Config(format!("invalid cardinality {c}")));
        }
        for &f in &self.nonlinear_fields {
            match self.cardinalities.get(f) {
                Some(0) => {}
                Some(c) => return Err(Error::Config(format!("nonlinear field {f} is categorical (cardinality {c})"))),
                None => return Err(Error::Config(format!("nonlinear field {f} out of range"))),
            }
        }
        if self.teacher_dim == 0 {
            return Err(Error::Config("teacher_dim must be at least 1".into()));
        }
        for (name, v) in [
            ("teacher_scale", self.teacher_scale),
            ("linear_scale", self.linear_scale),
            ("noise", self.noise),
            ("skew", self.skew),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<FieldSchema> {
        self.cardinalities
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let kind = if c == 0 { FieldKind::Numerical } else { FieldKind::Categorical };
                FieldSchema::new(i, kind, format!("f{i}"))
            })
            .collect()
    }

    /// Vocabulary per field: the cardinality, or 1 for numerical fields.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.cardinalities.iter().map(|&c| c.max(1)).collect()
    }
}

/// The hidden labelling model, kept for oracle evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub bias: f64,
    /// `[field][feature]`
    pub linear: Vec<Vec<f64>>,
    /// `[field][feature]` → embedding
    pub embeddings: Vec<Vec<Vec<f64>>>,
    pub transforms: Vec<Transform>,
}

impl Teacher {
    /// Teacher logit without noise.
    pub fn score(&self, inst: &Instance) -> f64 {
        self.score_impl(inst, false)
    }

    /// Same teacher with every transform replaced by the identity: the best
    /// a model linear in each numerical value can hope to imitate.
    pub fn linearized_score(&self, inst: &Instance) -> f64 {
        self.score_impl(inst, true)
    }

    fn score_impl(&self, inst: &Instance, linearized: bool) -> f64 {
        let terms: Vec<(f64, &[f64], f64)> = inst
            .entries
            .iter()
            .map(|e| {
                let (f, j) = (e.field as usize, e.feature as usize);
                let t = if linearized { e.value } else { self.transforms[f].apply(e.value) };
                (self.linear[f][j], self.embeddings[f][j].as_slice(), t)
            })
            .collect();
        let mut s = self.bias;
        for (i, (w, v, x)) in terms.iter().enumerate() {
            s += w * x;
            for (_, u, y) in &terms[i + 1..] {
                s += dot(v, u) * x * y;
            }
        }
        s
    }
}

/// Generated instances plus everything needed to interpret them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub schema: Vec<FieldSchema>,
    pub vocab: Vec<usize>,
    pub instances: Vec<Instance>,
    pub teacher: Teacher,
}

impl SynthDataset {
    /// Writes `data.csv` and its `schema.txt` description into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut schema = String::from("label = label\n");
        let mut data = String::from("label");
        for f in &self.schema {
            let _ = writeln!(schema, "{} = {}", f.name, f.kind.name());
            let _ = write!(data, ",{}", f.name);
        }
        data.push('\n');
        for inst in &self.instances {
            let _ = write!(data, "{}", inst.label);
            for e in &inst.entries {
                match self.schema[e.field as usize].kind {
                    FieldKind::Categorical => {
                        let _ = write!(data, ",v{}", e.feature);
                    }
                    FieldKind::Numerical => {
                        let _ = write!(data, ",{}", e.value);
                    }
                }
            }
            data.push('\n');
        }
        fs::write(dir.join("schema.txt"), schema)?;
        fs::write(dir.join("data.csv"), data)?;
        Ok(())
    }
}

fn zipf_cdf(n: usize, skew: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (0..n)
        .map(|k| {
            acc += 1.0 / ((k + 1) as f64).powf(skew);
            acc
        })
        .collect();
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

/// Draws a teacher and `spec.instances` labelled instances, all from `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let emb = Normal::new(0.0, spec.teacher_scale).map_err(|e| Error::Config(e.to_string()))?;
    let lin = Normal::new(0.0, spec.linear_scale).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let vocab = spec.vocab_sizes();

    let mut transforms = vec![Transform::Identity; vocab.len()];
    for &f in &spec.nonlinear_fields {
        transforms[f] = spec.transform;
    }
    let mut linear = Vec::with_capacity(vocab.len());
    let mut embeddings = Vec::with_capacity(vocab.len());
    for (f, &n) in vocab.iter().enumerate() {
        if transforms[f] != Transform::Identity {
            linear.push(vec![spec.nonlinear_weight; n]);
        } else {
            linear.push((0..n).map(|_| lin.sample(&mut rng)).collect());
        }
        embeddings.push((0..n).map(|_| (0..spec.teacher_dim).map(|_| emb.sample(&mut rng)).collect()).collect());
    }
    let teacher = Teacher { bias: spec.bias, linear, embeddings, transforms };

    let cdfs: Vec<Option<Vec<f64>>> =
        spec.cardinalities.iter().map(|&c| (c > 0).then(|| zipf_cdf(c, spec.skew))).collect();
    let mut instances = Vec::with_capacity(spec.instances);
    for _ in 0..spec.instances {
        let entries = cdfs
            .iter()
            .enumerate()
            .map(|(f, cdf)| match cdf {
                Some(cdf) => {
                    let u: f64 = rng.random();
                    let k = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                    Entry::new(f, k, 1.0)
                }
                None => Entry::new(f, 0, StandardNormal.sample(&mut rng)),
            })
            .collect();
        let mut inst = Instance::new(0, entries);
        let logit = teacher.score(&inst) + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let u: f64 = rng.random();
        inst.label = u8::from(u < sigmoid(logit));
        instances.push(inst);
    }
    Ok(SynthDataset { spec: spec.clone(), schema: spec.schema(), vocab, instances, teacher })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { instances: 2000, ..SynthSpec::default() }
    }

    /// Pairwise-count AUC, kept independent of the metrics module.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn saturated_teacher_labels_everything_positive() {
        let spec = SynthSpec { bias: 1e300, noise: 0.0, ..small() };
        let ds = synth_generate(&spec).unwrap();
        assert!(ds.instances.iter().all(|i| i.label == 1));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.teacher, b.teacher);
    }

    #[test]
    fn instances_respect_vocab_and_schema() {
        let ds = synth_generate(&small()).unwrap();
        for inst in &ds.instances {
            assert_eq!(inst.entries.len(), ds.vocab.len());
            for e in &inst.entries {
                assert!((e.feature as usize) < ds.vocab[e.field as usize]);
                if ds.schema[e.field as usize].kind == FieldKind::Categorical {
                    assert_eq!(e.value, 1.0);
                }
            }
        }
    }

    #[test]
    fn square_transform_beats_linearized_teacher() {
        let spec = SynthSpec { instances: 3000, seed: 21, ..SynthSpec::default() };
        let ds = synth_generate(&spec).unwrap();
        let labels: Vec<u8> = ds.instances.iter().map(|i| i.label).collect();
        let teacher: Vec<f64> = ds.instances.iter().map(|i| ds.teacher.score(i)).collect();
        let linear: Vec<f64> = ds.instances.iter().map(|i| ds.teacher.linearized_score(i)).collect();
        let (a_t, a_l) = (pairwise_auc(&teacher, &labels), pairwise_auc(&linear, &labels));
        assert!(a_t > a_l + 0.01, "teacher {a_t} vs linearized {a_l}");
    }

    #[test]
    fn spec_parsing() {
        let spec = SynthSpec::parse(
            "instances = 10\ncardinalities = 0, 5\nnonlinear_fields = 0\nteacher_seed = 3\nnoise = 0.1",
        )
        .unwrap();
        assert_eq!(spec.instances, 10);
        assert_eq!(spec.cardinalities, vec![0, 5]);
        assert_eq!(spec.seed, 3);
        assert!(SynthSpec::parse("cardinalities = 0, 5\nnonlinear_fields = 1").is_err());
        assert!(SynthSpec::parse("bogus = 1").is_err());
        assert!(SynthSpec::parse("cardinalities = ").is_err());
    }

    #[test]
    fn csv_export_round_trips_through_preprocessor() {
        let ds = synth_generate(&SynthSpec { instances: 20, ..SynthSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_csv(dir.path()).unwrap();
        let schema = fs::read_to_string(dir.path().join("schema.txt")).unwrap();
        let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
        let mut lines = data.lines();
        let pre = crate::data::Preprocessor::csv(&schema, lines.next().unwrap(), 1000).unwrap();
        let parsed: Vec<Instance> = lines.enumerate().map(|(i, l)| pre.parse_line(l, i + 2).unwrap()).collect();
        assert_eq!(parsed.len(), 20);
        for (p, o) in parsed.iter().zip(&ds.instances) {
            assert_eq!(p.label, o.label);
            assert_eq!(p.entries.len(), o.entries.len());
        }
    }
}
