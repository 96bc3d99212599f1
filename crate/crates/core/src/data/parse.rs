use crate::data::hashing::hash_feature;
use crate::data::{validate_schema, Entry, FieldKind, FieldSchema, Instance};
use crate::error::{Error, Result};

pub const CRITEO_NUMERICAL: usize = 13;
pub const CRITEO_CATEGORICAL: usize = 26;

/// `sign(x) · ln(1 + |x|)`
pub fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Per-field standardization of transformed numerical values, fitted on the
/// training split only. Categorical fields carry mean 0 and std 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NumericScaler {
    /// Fits on `(line_no, line)` pairs using the preprocessor's format.
    pub fn fit<'a, I>(pre: &Preprocessor, lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a str)>,
    {
        let f = pre.schema.len();
        let mut sum = vec![0.0; f];
        let mut sum_sq = vec![0.0; f];
        let mut count = vec![0usize; f];
        for (line_no, line) in lines {
            let mut err = None;
            visit_tokens(line, line_no, pre, |field, token| {
                if pre.schema[field].kind == FieldKind::Numerical && !token.is_empty() && err.is_none() {
                    match parse_number(token, line_no, field) {
                        Ok(x) => {
                            let t = signed_log1p(x);
                            sum[field] += t;
                            sum_sq[field] += t * t;
                            count[field] += 1;
                        }
                        Err(e) => err = Some(e),
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
        }
        let mut mean = vec![0.0; f];
        let mut std = vec![1.0; f];
        for i in 0..f {
            if count[i] > 0 {
                let n = count[i] as f64;
                mean[i] = sum[i] / n;
                let var = (sum_sq[i] / n - mean[i] * mean[i]).max(0.0);
                if var > 1e-24 {
                    std[i] = var.sqrt();
                }
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, field: usize, transformed: f64) -> f64 {
        (transformed - self.mean[field]) / self.std[field]
    }
}

/// Role of one CSV column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRole {
    Label,
    Field(usize),
    Ignore,
}

/// Column-to-field mapping resolved from a schema description and a header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvLayout {
    pub columns: Vec<(String, ColumnRole)>,
}

impl CsvLayout {
    /// Resolves a header line against a schema description.
    ///
    /// The description is flat `name = kind` text, one column per line, with
    /// `kind` one of `label`, `categorical`, `numerical`, `ignore`. Field
    /// indices follow the order of the description. Every header column must
    /// be described and every described column must appear in the header.
    pub fn resolve(schema_text: &str, header: &str) -> Result<(Self, Vec<FieldSchema>)> {
        let mut described: Vec<(String, String)> = Vec::new();
        for (i, raw) in schema_text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `name = kind`, got {line:?}"),
            })?;
            let name = name.trim().to_string();
            if described.iter().any(|(n, _)| *n == name) {
                return Err(Error::Config(format!("column {name:?} described twice")));
            }
            described.push((name, kind.trim().to_string()));
        }
        let mut schema = Vec::new();
        let mut field_of = Vec::new();
        let mut labels = 0;
        for (name, kind) in &described {
            let role = match kind.as_str() {
                "label" => {
                    labels += 1;
                    ColumnRole::Label
                }
                "ignore" => ColumnRole::Ignore,
                "categorical" | "numerical" => {
                    let k = if kind == "categorical" { FieldKind::Categorical } else { FieldKind::Numerical };
                    schema.push(FieldSchema::new(schema.len(), k, name.clone()));
                    ColumnRole::Field(schema.len() - 1)
                }
                other => return Err(Error::Config(format!("column {name:?} has unknown kind {other:?}"))),
            };
            field_of.push((name.clone(), role));
        }
        if labels != 1 {
            return Err(Error::Config(format!("schema must describe exactly one label column, found {labels}")));
        }
        let header_cols = split_csv(header, 0)?;
        let mut columns = Vec::with_capacity(header_cols.len());
        for col in &header_cols {
            let role = field_of
                .iter()
                .find(|(n, _)| n == col)
                .map(|(_, r)| r.clone())
                .ok_or_else(|| Error::Config(format!("unknown column {col:?}")))?;
            columns.push((col.clone(), role));
        }
        for (name, _) in &field_of {
            if !header_cols.contains(name) {
                return Err(Error::Config(format!("described column {name:?} missing from header")));
            }
        }
        Ok((Self { columns }, schema))
    }

    pub fn is_header(&self, line: &str) -> bool {
        split_csv(line, 0)
            .map(|cols| cols.len() == self.columns.len() && cols.iter().zip(&self.columns).all(|(c, (n, _))| c == n))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputFormat {
    /// `label \t 13 integers \t 26 tokens`
    CriteoTsv,
    Csv(CsvLayout),
}

/// Everything needed to turn a raw text line into an [`Instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub format: InputFormat,
    pub schema: Vec<FieldSchema>,
    /// Hash buckets per field, bucket 0 included. Numerical fields use 1.
    pub buckets: Vec<usize>,
    /// Value of a missing numerical entry.
    pub numeric_fill: f64,
    pub scaler: Option<NumericScaler>,
}

impl Preprocessor {
    /// Criteo layout: fields 0..13 numerical (`I1`..`I13`), 13..39 categorical (`C1`..`C26`).
    pub fn criteo(buckets: usize) -> Result<Self> {
        let mut schema = Vec::with_capacity(CRITEO_NUMERICAL + CRITEO_CATEGORICAL);
        for i in 0..CRITEO_NUMERICAL {
            schema.push(FieldSchema::new(i, FieldKind::Numerical, format!("I{}", i + 1)));
        }
        for i in 0..CRITEO_CATEGORICAL {
            schema.push(FieldSchema::new(CRITEO_NUMERICAL + i, FieldKind::Categorical, format!("C{}", i + 1)));
        }
        Self::new(InputFormat::CriteoTsv, schema, buckets)
    }

    /// Generic CSV from a schema description and the file's header line.
    pub fn csv(schema_text: &str, header: &str, buckets: usize) -> Result<Self> {
        let (layout, schema) = CsvLayout::resolve(schema_text, header)?;
        Self::new(InputFormat::Csv(layout), schema, buckets)
    }

    pub fn new(format: InputFormat, schema: Vec<FieldSchema>, buckets: usize) -> Result<Self> {
        validate_schema(&schema)?;
        if buckets < 2 {
            return Err(Error::Config(format!("need at least 2 hash buckets per field, got {buckets}")));
        }
        let buckets = schema.iter().map(|f| if f.kind == FieldKind::Categorical { buckets } else { 1 }).collect();
        Ok(Self { format, schema, buckets, numeric_fill: 0.0, scaler: None })
    }

    /// Vocabulary size of every field.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.buckets.clone()
    }

    pub fn parse_line(&self, line: &str, line_no: usize) -> Result<Instance> {
        match self.format {
            InputFormat::CriteoTsv => parse_criteo_tsv(line, line_no, self),
            InputFormat::Csv(_) => parse_csv_with_schema(line, line_no, self),
        }
    }

    /// True for a CSV header line, which stream readers skip.
    pub fn is_header(&self, line: &str) -> bool {
        match &self.format {
            InputFormat::CriteoTsv => false,
            InputFormat::Csv(layout) => layout.is_header(line),
        }
    }
}

fn parse_label(token: &str, line_no: usize) -> Result<u8> {
    match token.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Label { line: line_no, label: other.to_string() }),
    }
}

fn parse_number(token: &str, line_no: usize, field: usize) -> Result<f64> {
    token
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line: line_no, message: format!("field {field}: {token:?} is not a number") })
}

fn split_csv(line: &str, line_no: usize) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(line.as_bytes());
    match rdr.records().next() {
        Some(rec) => Ok(rec
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect()),
        None => Err(Error::Parse { line: line_no, message: "empty line".into() }),
    }
}

/// Calls `f(field, token)` for every field column and returns the label.
fn visit_tokens(line: &str, line_no: usize, pre: &Preprocessor, mut f: impl FnMut(usize, &str)) -> Result<u8> {
    match &pre.format {
        InputFormat::CriteoTsv => {
            let line = line.trim_end_matches(['\r', '\n']);
            let expected = 1 + pre.schema.len();
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != expected {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {expected} tab-separated columns, found {}", cols.len()),
                });
            }
            let label = parse_label(cols[0], line_no)?;
            for (field, token) in cols[1..].iter().enumerate() {
                f(field, token);
            }
            Ok(label)
        }
        InputFormat::Csv(layout) => {
            let cols = split_csv(line.trim_end_matches(['\r', '\n']), line_no)?;
            if cols.len() != layout.columns.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} columns, found {}", layout.columns.len(), cols.len()),
                });
            }
            let mut label = None;
            for (token, (_, role)) in cols.iter().zip(&layout.columns) {
                match role {
                    ColumnRole::Label => label = Some(parse_label(token, line_no)?),
                    ColumnRole::Field(field) => f(*field, token),
                    ColumnRole::Ignore => {}
                }
            }
            label.ok_or_else(|| Error::Parse { line: line_no, message: "no label column".into() })
        }
    }
}

fn build_instance(line: &str, line_no: usize, pre: &Preprocessor) -> Result<Instance> {
    let mut entries = Vec::with_capacity(pre.schema.len());
    let mut err = None;
    let label = visit_tokens(line, line_no, pre, |field, token| {
        if err.is_some() {
            return;
        }
        match pre.schema[field].kind {
            FieldKind::Categorical => {
                entries.push(Entry::new(field, hash_feature(field, token, pre.buckets[field]), 1.0));
            }
            FieldKind::Numerical => {
                if token.is_empty() {
                    entries.push(Entry::new(field, 0, pre.numeric_fill));
                } else {
                    match parse_number(token, line_no, field) {
                        Ok(x) => {
                            let t = signed_log1p(x);
                            let v = pre.scaler.as_ref().map_or(t, |s| s.apply(field, t));
                            entries.push(Entry::new(field, 0, v));
                        }
                        Err(e) => err = Some(e),
                    }
                }
            }
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    entries.sort_by_key(|e| e.field);
    Ok(Instance { label, entries })
}

/// Parses one Criteo line. `line_no` is used in error messages only.
pub fn parse_criteo_tsv(line: &str, line_no: usize, pre: &Preprocessor) -> Result<Instance> {
    if pre.format != InputFormat::CriteoTsv {
        return Err(Error::Config("preprocessor is not configured for Criteo TSV".into()));
    }
    build_instance(line, line_no, pre)
}

/// Parses one comma-separated line through the preprocessor's CSV layout.
pub fn parse_csv_with_schema(line: &str, line_no: usize, pre: &Preprocessor) -> Result<Instance> {
    if !matches!(pre.format, InputFormat::Csv(_)) {
        return Err(Error::Config("preprocessor is not configured for CSV".into()));
    }
    build_instance(line, line_no, pre)
}
