//! Ingestion: canonical sparse instances, hashed per-field feature spaces,
//! splitting, batching and a synthetic teacher-labelled generator.

mod hashing;
mod parse;
mod split;
pub mod synth;

pub use hashing::{hash_feature, MISSING_BUCKET};
pub use parse::{
    parse_criteo_tsv, parse_csv_with_schema, signed_log1p, ColumnRole, CsvLayout, InputFormat, NumericScaler,
    Preprocessor, CRITEO_CATEGORICAL, CRITEO_NUMERICAL,
};
pub use split::{make_batches, split_dataset, DatasetSplit};
pub use synth::{synth_generate, SynthDataset, SynthSpec, Teacher, Transform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    Numerical,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::Numerical => "numerical",
        }
    }
}

/// One column of the model's input schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub index: usize,
    pub kind: FieldKind,
    pub name: String,
}

impl FieldSchema {
    pub fn new(index: usize, kind: FieldKind, name: impl Into<String>) -> Self {
        Self { index, kind, name: name.into() }
    }
}

/// Checks that field indices run contiguously from zero.
pub fn validate_schema(schema: &[FieldSchema]) -> Result<()> {
    for (i, f) in schema.iter().enumerate() {
        if f.index != i {
            return Err(Error::Config(format!("field {:?} has index {}, expected {i}", f.name, f.index)));
        }
    }
    Ok(())
}

/// A single `(field, feature, value)` triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub field: u32,
    pub feature: u32,
    pub value: f64,
}

impl Entry {
    pub fn new(field: usize, feature: usize, value: f64) -> Self {
        Self { field: field as u32, feature: feature as u32, value }
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Instance {
    pub label: u8,
    pub entries: Vec<Entry>,
}

impl Instance {
    pub fn new(label: u8, entries: Vec<Entry>) -> Self {
        Self { label, entries }
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}
