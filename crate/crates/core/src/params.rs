//! Trainable tensors, their Adam state, the L2 penalty and the parameter
//! count audit.
//!
//! Per-feature tensors (linear weights and embedding rows) are updated
//! lazily: only rows touched by a batch move, and their moments are not
//! decayed while untouched. Per-field tensors (generator layers and layer
//! norms) are updated densely for every field present in the batch.
//!
//! Dense per-field tensors are addressed by a flat, fixed order: for each
//! generator, for each layer, weight then bias; then layer-norm gain and
//! bias when present. [`ParameterSet::field_tensors`] and the gradient and
//! moment buffers all follow it.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Entry;
use crate::error::{Error, Result};
use crate::numerics::{init_matrix, ActivationKind, DenseMatrix, DenseVector, InitScheme, LayerNormParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Fm,
    Ffm,
    LaFm,
    LsFm,
    LpFm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Fm, Variant::Ffm, Variant::LaFm, Variant::LsFm, Variant::LpFm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fm => "fm",
            Variant::Ffm => "ffm",
            Variant::LaFm => "la_fm",
            Variant::LsFm => "ls_fm",
            Variant::LpFm => "lp_fm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn is_leaf(self) -> bool {
        matches!(self, Variant::LaFm | Variant::LsFm | Variant::LpFm)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Variant::ALL.get(code as usize).copied().ok_or_else(|| Error::Format(format!("unknown variant code {code}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Variant selector and every hyper-parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding size.
    pub d: usize,
    pub per_field_vocab: Vec<usize>,
    /// Expansion ratio of generator hidden layers (width `r·d`).
    pub r: usize,
    /// Generator depth in layers.
    pub p: usize,
    /// Generated features per original feature.
    pub u: usize,
    /// Generator activation for `la_fm`; `ls_fm` always uses relu and
    /// `lp_fm` the identity.
    pub activation: ActivationKind,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl ModelConfig {
    /// Defaults: `d=10` (8 for ffm), `r=1`, `p=2`, `u=1`, relu, `λ=1e-6`,
    /// learning rate `1e-4`, batch 1024, at most 50 epochs.
    pub fn new(variant: Variant, per_field_vocab: Vec<usize>) -> Self {
        Self {
            variant,
            d: if variant == Variant::Ffm { 8 } else { 10 },
            per_field_vocab,
            r: 1,
            p: 2,
            u: 1,
            activation: ActivationKind::Relu,
            lambda: 1e-6,
            learning_rate: 1e-4,
            batch_size: 1024,
            epochs: 50,
            seed: 1,
            adam: AdamConfig::default(),
        }
    }

    pub fn num_fields(&self) -> usize {
        self.per_field_vocab.len()
    }

    pub fn num_features(&self) -> usize {
        self.per_field_vocab.iter().sum()
    }

    /// Activation actually applied inside the generators.
    pub fn generator_activation(&self) -> ActivationKind {
        match self.variant {
            Variant::LsFm => ActivationKind::Relu,
            Variant::LpFm => ActivationKind::Identity,
            _ => self.activation,
        }
    }

    /// Generators per field (0 for fm and ffm).
    pub fn generators(&self) -> usize {
        if self.variant.is_leaf() {
            self.u
        } else {
            0
        }
    }

    /// Layer widths of one generator: `d → rd → … → rd → d`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d];
        w.extend(std::iter::repeat_n(self.r * self.d, self.p - 1));
        w.push(self.d);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.r == 0 {
            return fail("r must be at least 1".into());
        }
        if self.p < 2 {
            return fail(format!("p must be at least 2, got {}", self.p));
        }
        if self.variant == Variant::LpFm && self.u != 1 {
            return fail(format!("lp_fm generates exactly one feature per original, got u={}", self.u));
        }
        if self.per_field_vocab.is_empty() {
            return fail("at least one field is required".into());
        }
        if let Some(f) = self.per_field_vocab.iter().position(|&v| v == 0) {
            return fail(format!("field {f} has an empty vocabulary"));
        }
        if self.variant == Variant::Ffm && self.num_fields() < 2 {
            return fail("ffm needs at least two fields".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return fail(format!("invalid adam settings {a:?}"));
        }
        Ok(())
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

/// A stack of dense layers producing one generated feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FgNet {
    pub layers: Vec<DenseLayer>,
}

impl FgNet {
    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }
}

/// Every trainable tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    /// `field_offsets[f]` is the global id of feature 0 of field `f`;
    /// the last element is the total feature count.
    pub field_offsets: Vec<usize>,
    pub bias: f64,
    pub linear: Vec<f64>,
    /// `features × slots × d`, row-major; ffm keeps `f - 1` slots per feature.
    pub embeddings: Vec<f64>,
    /// `[field][generator]`
    pub fgnets: Vec<Vec<FgNet>>,
    /// One per field, lp_fm only.
    pub layer_norms: Vec<LayerNormParams>,
}

impl ParameterSet {
    pub fn num_features(&self) -> usize {
        *self.field_offsets.last().unwrap_or(&0)
    }

    pub fn num_fields(&self) -> usize {
        self.field_offsets.len() - 1
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Embedding rows per feature.
    pub fn slots(&self) -> usize {
        if self.config.variant == Variant::Ffm {
            self.num_fields() - 1
        } else {
            1
        }
    }

    /// Global feature id of an entry.
    #[inline]
    pub fn feature_id(&self, e: &Entry) -> Result<usize> {
        let field = e.field as usize;
        let feature = e.feature as usize;
        if field >= self.num_fields() {
            return Err(Error::Lookup { field, feature, vocab: 0 });
        }
        let vocab = self.config.per_field_vocab[field];
        if feature >= vocab {
            return Err(Error::Lookup { field, feature, vocab });
        }
        Ok(self.field_offsets[field] + feature)
    }

    #[inline]
    pub fn embedding(&self, id: usize) -> &[f64] {
        self.embedding_slot(id, 0)
    }

    #[inline]
    pub fn embedding_slot(&self, id: usize, slot: usize) -> &[f64] {
        let d = self.d();
        let row = id * self.slots() + slot;
        &self.embeddings[row * d..(row + 1) * d]
    }

    pub fn embedding_mut(&mut self, id: usize) -> &mut [f64] {
        let d = self.d();
        let row = id * self.slots();
        &mut self.embeddings[row * d..(row + 1) * d]
    }

    /// Dense tensors of one field in the canonical order.
    pub fn field_tensors(&self, field: usize) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for net in &self.fgnets[field] {
            for l in &net.layers {
                out.push(l.weight.as_slice());
                out.push(l.bias.as_slice());
            }
        }
        if let Some(ln) = self.layer_norms.get(field) {
            out.push(ln.gain.as_slice());
            out.push(ln.bias.as_slice());
        }
        out
    }

    pub fn field_tensors_mut(&mut self, field: usize) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for net in &mut self.fgnets[field] {
            for l in &mut net.layers {
                out.push(l.weight.as_mut_slice());
                out.push(&mut l.bias);
            }
        }
        if let Some(ln) = self.layer_norms.get_mut(field) {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out
    }

    /// Zero-filled buffers shaped like [`Self::field_tensors`].
    pub fn zero_field_grads(&self, field: usize) -> Vec<Vec<f64>> {
        self.field_tensors(field).iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Every scalar, `w0` first, in a fixed order.
    pub fn all_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.bias).chain(self.linear.iter().copied()).chain(self.embeddings.iter().copied()).chain(
            (0..self.num_fields()).flat_map(move |f| self.field_tensors(f).into_iter().flat_map(|t| t.iter().copied())),
        )
    }

    pub fn scalar_count(&self) -> usize {
        1 + self.linear.len()
            + self.embeddings.len()
            + (0..self.num_fields())
                .map(|f| self.field_tensors(f).iter().map(|t| t.len()).sum::<usize>())
                .sum::<usize>()
    }

    pub fn audit(&self) -> ParamAudit {
        ParamAudit::from_config(&self.config)
    }

    /// `λ · Σθ²` over every scalar except `w0`.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        lambda * self.all_scalars().skip(1).map(|v| v * v).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.all_scalars().all(f64::is_finite)
    }

    /// Overwrites every scalar from `values`, in [`Self::all_scalars`] order.
    pub fn assign_scalars(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.scalar_count();
        if values.len() != expected {
            return Err(Error::Shape(format!("expected {expected} scalars, got {}", values.len())));
        }
        let (head, mut rest) = values.split_at(1);
        self.bias = head[0];
        let mut take = |dst: &mut [f64]| {
            let (a, b) = rest.split_at(dst.len());
            dst.copy_from_slice(a);
            rest = b;
        };
        take(&mut self.linear);
        take(&mut self.embeddings);
        for f in 0..self.num_fields() {
            for t in self.field_tensors_mut(f) {
                take(t);
            }
        }
        Ok(())
    }
}

/// Allocates and initializes the tensors of `config`.
///
/// Embeddings are normal with σ = 0.01, generator weights Glorot uniform,
/// all biases (including `w0` and linear weights) zero, layer-norm gain one.
pub fn build_parameters(config: &ModelConfig) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let f = config.num_fields();
    let mut field_offsets = Vec::with_capacity(f + 1);
    let mut acc = 0;
    field_offsets.push(0);
    for &v in &config.per_field_vocab {
        acc += v;
        field_offsets.push(acc);
    }
    let m = acc;
    let slots = if config.variant == Variant::Ffm { f - 1 } else { 1 };
    let embeddings = {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 0.01).expect("valid sigma");
        (0..m * slots * config.d).map(|_| dist.sample(&mut rng)).collect()
    };
    let widths = config.layer_widths();
    let mut fgnets = Vec::with_capacity(f);
    for _ in 0..f {
        let mut nets = Vec::with_capacity(config.generators());
        for _ in 0..config.generators() {
            let layers = widths
                .windows(2)
                .map(|w| {
                    Ok(DenseLayer {
                        weight: init_matrix(w[1], w[0], InitScheme::Glorot, &mut rng)?,
                        bias: DenseVector::zeros(w[1]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            nets.push(FgNet { layers });
        }
        fgnets.push(nets);
    }
    let layer_norms = if config.variant == Variant::LpFm {
        (0..f).map(|_| LayerNormParams::identity(config.d)).collect()
    } else {
        Vec::new()
    };
    Ok(ParameterSet {
        config: config.clone(),
        field_offsets,
        bias: 0.0,
        linear: vec![0.0; m],
        embeddings,
        fgnets,
        layer_norms,
    })
}

/// Scalar counts: the closed form that ignores bias terms, and the true total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAudit {
    pub variant: Variant,
    /// `m + m·d` (fm), `m + m·(f−1)·d` (ffm), `m + m·d + f·u·(2·rd·d + (p−2)·(rd)²)` (leaf).
    pub table_count: usize,
    /// `w0`, generator biases and layer-norm parameters.
    pub omitted: usize,
    pub true_count: usize,
}

impl ParamAudit {
    pub fn from_config(c: &ModelConfig) -> Self {
        let m = c.num_features();
        let f = c.num_fields();
        let d = c.d;
        let (table_count, omitted) = match c.variant {
            Variant::Fm => (m + m * d, 1),
            Variant::Ffm => (m + m * (f - 1) * d, 1),
            Variant::LaFm | Variant::LsFm | Variant::LpFm => {
                let rd = c.r * d;
                let weights = 2 * rd * d + (c.p - 2) * rd * rd;
                let biases = (c.p - 1) * rd + d;
                let ln = if c.variant == Variant::LpFm { 2 * d * f } else { 0 };
                (m + m * d + f * c.u * weights, 1 + f * c.u * biases + ln)
            }
        };
        Self { variant: c.variant, table_count, omitted, true_count: table_count + omitted }
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "variant={}\ttable1_count={}\ttrue_count={}", self.variant, self.table_count, self.true_count)
    }
}

/// Sparse gradient of the objective for one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub bias: f64,
    /// Global feature id → gradient.
    pub linear: BTreeMap<usize, f64>,
    /// Embedding row (`id · slots + slot`) → gradient of length `d`.
    pub embedding: BTreeMap<usize, Vec<f64>>,
    /// Per field, dense tensors in canonical order; `None` when the batch
    /// did not touch the field.
    pub fields: Vec<Option<Vec<Vec<f64>>>>,
}

impl Gradients {
    pub fn new(num_fields: usize) -> Self {
        Self { fields: vec![None; num_fields], ..Self::default() }
    }

    /// Adds `2λθ` for every touched scalar (never `w0`).
    pub fn add_l2(&mut self, params: &ParameterSet, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (&id, g) in self.linear.iter_mut() {
            *g += 2.0 * lambda * params.linear[id];
        }
        let d = params.d();
        for (&row, g) in self.embedding.iter_mut() {
            let theta = &params.embeddings[row * d..(row + 1) * d];
            for (gi, ti) in g.iter_mut().zip(theta) {
                *gi += 2.0 * lambda * ti;
            }
        }
        for (field, grads) in self.fields.iter_mut().enumerate() {
            if let Some(grads) = grads {
                for (g, t) in grads.iter_mut().zip(params.field_tensors(field)) {
                    for (gi, ti) in g.iter_mut().zip(t) {
                        *gi += 2.0 * lambda * ti;
                    }
                }
            }
        }
    }
}

/// Adam moments shaped like a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub config: AdamConfig,
    pub bias_m: f64,
    pub bias_v: f64,
    pub linear_m: Vec<f64>,
    pub linear_v: Vec<f64>,
    pub embedding_m: Vec<f64>,
    pub embedding_v: Vec<f64>,
    pub field_m: Vec<Vec<Vec<f64>>>,
    pub field_v: Vec<Vec<Vec<f64>>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let fields: Vec<Vec<Vec<f64>>> = (0..params.num_fields()).map(|f| params.zero_field_grads(f)).collect();
        Self {
            t: 0,
            config: params.config.adam,
            bias_m: 0.0,
            bias_v: 0.0,
            linear_m: vec![0.0; params.linear.len()],
            linear_v: vec![0.0; params.linear.len()],
            embedding_m: vec![0.0; params.embeddings.len()],
            embedding_v: vec![0.0; params.embeddings.len()],
            field_m: fields.clone(),
            field_v: fields,
        }
    }

    /// True when every moment buffer has the shape of the matching tensor.
    pub fn mirrors(&self, params: &ParameterSet) -> bool {
        let fields_match = |moments: &Vec<Vec<Vec<f64>>>| {
            moments.len() == params.num_fields()
                && moments.iter().enumerate().all(|(f, ts)| {
                    let shapes = params.field_tensors(f);
                    ts.len() == shapes.len() && ts.iter().zip(shapes).all(|(a, b)| a.len() == b.len())
                })
        };
        self.linear_m.len() == params.linear.len()
            && self.linear_v.len() == params.linear.len()
            && self.embedding_m.len() == params.embeddings.len()
            && self.embedding_v.len() == params.embeddings.len()
            && fields_match(&self.field_m)
            && fields_match(&self.field_v)
    }
}

struct AdamStep {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr_t: f64,
    correction2: f64,
}

impl AdamStep {
    #[inline]
    fn apply(&self, theta: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        *theta -= self.lr_t * *m / ((*v / self.correction2).sqrt() + self.epsilon);
    }
}

/// One bias-corrected Adam step over the touched tensors.
pub fn adam_update(
    params: &mut ParameterSet,
    state: &mut AdamState,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<()> {
    let d = params.d();
    let rows = params.embeddings.len() / d;
    for (&row, g) in &grads.embedding {
        if g.len() != d || row >= rows {
            return Err(Error::Contract(format!("embedding gradient for row {row} has length {}", g.len())));
        }
    }
    if let Some((&id, _)) = grads.linear.iter().find(|(&id, _)| id >= params.linear.len()) {
        return Err(Error::Contract(format!("linear gradient for unknown feature {id}")));
    }
    if grads.fields.len() != params.num_fields() {
        return Err(Error::Contract(format!(
            "gradient covers {} fields, model has {}",
            grads.fields.len(),
            params.num_fields()
        )));
    }
    for (f, g) in grads.fields.iter().enumerate() {
        if let Some(g) = g {
            let shapes = params.field_tensors(f);
            if g.len() != shapes.len() || g.iter().zip(&shapes).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::Contract(format!("dense gradient of field {f} does not match its tensors")));
            }
        }
    }

    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let step = AdamStep {
        beta1: c.beta1,
        beta2: c.beta2,
        epsilon: c.epsilon,
        lr_t: learning_rate / (1.0 - c.beta1.powi(t)),
        correction2: 1.0 - c.beta2.powi(t),
    };
    step.apply(&mut params.bias, &mut state.bias_m, &mut state.bias_v, grads.bias);
    for (&id, &g) in &grads.linear {
        step.apply(&mut params.linear[id], &mut state.linear_m[id], &mut state.linear_v[id], g);
    }
    for (&row, g) in &grads.embedding {
        let r = row * d..(row + 1) * d;
        let (theta, m, v) =
            (&mut params.embeddings[r.clone()], &mut state.embedding_m[r.clone()], &mut state.embedding_v[r]);
        for i in 0..d {
            step.apply(&mut theta[i], &mut m[i], &mut v[i], g[i]);
        }
    }
    for (f, g) in grads.fields.iter().enumerate() {
        let Some(g) = g else { continue };
        let tensors = params.field_tensors_mut(f);
        for (k, theta) in tensors.into_iter().enumerate() {
            let (m, v) = (&mut state.field_m[f][k], &mut state.field_v[f][k]);
            for i in 0..theta.len() {
                step.apply(&mut theta[i], &mut m[i], &mut v[i], g[k][i]);
            }
        }
    }
    Ok(())
}
