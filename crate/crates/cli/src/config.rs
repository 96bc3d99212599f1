//! Flat `key = value` run configuration with command-line overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use leaffm::export::UnknownFeaturePolicy;
use leaffm::kv::{parse_kv, parse_list, parse_value};
use leaffm::numerics::ActivationKind;
use leaffm::{ModelConfig, Variant};

/// Sweep axes and their default grids.
pub const SWEEP_GRIDS: [(&str, &[usize]); 4] = [
    ("u", &[1, 3, 5, 7, 9, 11, 13]),
    ("r", &[1, 2, 3, 4, 5, 7]),
    ("p", &[2, 3, 4, 5, 7, 10]),
    ("d", &[10, 30, 50, 80, 100, 120]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Criteo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    /// `None` keeps the variant default (10, or 8 for ffm).
    pub d: Option<usize>,
    pub r: usize,
    pub p: usize,
    pub u: usize,
    pub activation: ActivationKind,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,

    pub data: Option<PathBuf>,
    pub format: DataFormat,
    /// Column roles for csv input; defaults to `schema.txt` beside the data.
    pub schema: Option<PathBuf>,
    pub buckets: usize,
    pub split_seed: u64,

    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub unknown_features: UnknownFeaturePolicy,
    pub text_dump: Option<PathBuf>,

    pub synth_spec: Option<PathBuf>,

    pub gradcheck_cases: usize,
    pub gradcheck_tolerance: Option<f64>,

    pub sweep_axis: String,
    pub sweep_values: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Variant::LaFm, Vec::new());
        Self {
            variant: Variant::LaFm,
            d: None,
            r: m.r,
            p: m.p,
            u: m.u,
            activation: m.activation,
            lambda: m.lambda,
            learning_rate: m.learning_rate,
            batch_size: m.batch_size,
            epochs: m.epochs,
            seed: m.seed,
            patience: 2,
            data: None,
            format: DataFormat::Csv,
            schema: None,
            buckets: 10_000,
            split_seed: 0,
            out: PathBuf::from("run"),
            checkpoint: None,
            model: None,
            unknown_features: UnknownFeaturePolicy::Skip,
            text_dump: None,
            synth_spec: None,
            gradcheck_cases: 3,
            gradcheck_tolerance: None,
            sweep_axis: "u".into(),
            sweep_values: None,
        }
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = Variant::parse(v)?,
            "d" => self.d = if v.is_empty() { None } else { Some(parse_value(key, v)?) },
            "r" => self.r = parse_value(key, v)?,
            "p" => self.p = parse_value(key, v)?,
            "u" => self.u = parse_value(key, v)?,
            "activation" => self.activation = ActivationKind::parse(v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "data" => self.data = path(v),
            "format" => {
                self.format = match v {
                    "csv" => DataFormat::Csv,
                    "criteo" => DataFormat::Criteo,
                    other => bail!("invalid value {other:?} for key \"format\" (csv or criteo)"),
                }
            }
            "schema" => self.schema = path(v),
            "buckets" => self.buckets = parse_value(key, v)?,
            "split_seed" => self.split_seed = parse_value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = path(v),
            "model" => self.model = path(v),
            "unknown_features" => {
                self.unknown_features = match v {
                    "skip" => UnknownFeaturePolicy::Skip,
                    "error" => UnknownFeaturePolicy::Error,
                    other => bail!("invalid value {other:?} for key \"unknown_features\" (skip or error)"),
                }
            }
            "text_dump" => self.text_dump = path(v),
            "synth_spec" => self.synth_spec = path(v),
            "gradcheck_cases" => self.gradcheck_cases = parse_value(key, v)?,
            "gradcheck_tolerance" => {
                self.gradcheck_tolerance = if v.is_empty() { None } else { Some(parse_value(key, v)?) }
            }
            "sweep_axis" => {
                if !SWEEP_GRIDS.iter().any(|(a, _)| *a == v) {
                    bail!("invalid value {v:?} for key \"sweep_axis\" (u, r, p or d)");
                }
                self.sweep_axis = v.to_string();
            }
            "sweep_values" => self.sweep_values = if v.is_empty() { None } else { Some(parse_list(key, v)?) },
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Defaults, then the file, then `key=value` overrides in order.
    pub fn load(file: Option<&PathBuf>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading config {}", f.display()))?;
            for (k, v) in parse_kv(&text).with_context(|| format!("in config {}", f.display()))? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self, per_field_vocab: Vec<usize>) -> ModelConfig {
        let base = ModelConfig::new(self.variant, per_field_vocab);
        ModelConfig {
            d: self.d.unwrap_or(base.d),
            r: self.r,
            p: self.p,
            u: self.u,
            activation: self.activation,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            ..base
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.bin"))
    }

    /// Every key, in a form [`RunConfig::load`] reads back.
    pub fn render(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", self.variant.to_string());
        put("d", self.d.map(|d| d.to_string()).unwrap_or_default());
        put("r", self.r.to_string());
        put("p", self.p.to_string());
        put("u", self.u.to_string());
        put("activation", self.activation.name().into());
        put("lambda", format!("{:e}", self.lambda));
        put("learning_rate", format!("{:e}", self.learning_rate));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("patience", self.patience.to_string());
        put("data", opt(&self.data));
        put("format", if self.format == DataFormat::Csv { "csv" } else { "criteo" }.into());
        put("schema", opt(&self.schema));
        put("buckets", self.buckets.to_string());
        put("split_seed", self.split_seed.to_string());
        put("out", self.out.display().to_string());
        put("checkpoint", opt(&self.checkpoint));
        put("model", opt(&self.model));
        put(
            "unknown_features",
            if self.unknown_features == UnknownFeaturePolicy::Skip { "skip" } else { "error" }.into(),
        );
        put("text_dump", opt(&self.text_dump));
        put("synth_spec", opt(&self.synth_spec));
        put("gradcheck_cases", self.gradcheck_cases.to_string());
        put("gradcheck_tolerance", self.gradcheck_tolerance.map(|t| format!("{t:e}")).unwrap_or_default());
        put("sweep_axis", self.sweep_axis.clone());
        put(
            "sweep_values",
            self.sweep_values
                .as_ref()
                .map(|v| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
        );
        s
    }

    pub fn sweep_grid(&self) -> Vec<usize> {
        self.sweep_values.clone().unwrap_or_else(|| {
            SWEEP_GRIDS.iter().find(|(a, _)| *a == self.sweep_axis).map(|(_, g)| g.to_vec()).unwrap_or_default()
        })
    }

    /// Copy with the sweep axis set to `value`.
    pub fn with_axis(&self, value: usize) -> Self {
        let mut c = self.clone();
        match self.sweep_axis.as_str() {
            "u" => c.u = value,
            "r" => c.r = value,
            "p" => c.p = value,
            _ => c.d = Some(value),
        }
        c
    }
}
