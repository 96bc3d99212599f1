//! Little-endian framing for model files:
//! `magic | version u8 | kind u8 | payload | crc32 u32` with the CRC taken
//! over everything before it.

use crate::data::{ColumnRole, CsvLayout, FieldKind, FieldSchema, InputFormat, NumericScaler, Preprocessor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"LEAFFMMF";
pub const FORMAT_VERSION: u8 = 1;
const HEADER: usize = MAGIC.len() + 2;
const TRAILER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Folded = 1,
    Checkpoint = 2,
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.push(FORMAT_VERSION);
        buf.push(kind as u8);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn size(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.size(vs.len());
        vs.iter().for_each(|&v| self.f64(v));
    }

    pub fn str(&mut self, s: &str) {
        self.size(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, checksum, version and kind, in that order.
    pub fn open(bytes: &'a [u8], kind: Kind) -> Result<Self> {
        if bytes.len() >= MAGIC.len() && bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        if bytes.len() < HEADER + TRAILER {
            return Err(Error::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let version = body[MAGIC.len()];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let found = body[MAGIC.len() + 1];
        if found != kind as u8 {
            return Err(Error::Format(format!("file holds kind {found}, expected {}", kind as u8)));
        }
        Ok(Self { buf: body, pos: HEADER })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("payload ends early".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn size(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit in memory".into()))
    }

    /// Length prefix of `n` items of `width` bytes, checked against the bytes left.
    fn prefix(&mut self, width: usize) -> Result<usize> {
        let n = self.size()?;
        if n.checked_mul(width).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Format(format!("length {n} exceeds the remaining payload")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.prefix(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing payload bytes", self.buf.len() - self.pos)))
        }
    }
}

pub fn write_preprocessor(w: &mut Writer, pre: Option<&Preprocessor>) {
    let Some(pre) = pre else {
        w.u8(0);
        return;
    };
    w.u8(1);
    match &pre.format {
        InputFormat::CriteoTsv => w.u8(0),
        InputFormat::Csv(layout) => {
            w.u8(1);
            w.size(layout.columns.len());
            for (name, role) in &layout.columns {
                w.str(name);
                match role {
                    ColumnRole::Label => w.u8(0),
                    ColumnRole::Field(i) => {
                        w.u8(1);
                        w.size(*i);
                    }
                    ColumnRole::Ignore => w.u8(2),
                }
            }
        }
    }
    w.size(pre.schema.len());
    for (f, b) in pre.schema.iter().zip(&pre.buckets) {
        w.str(&f.name);
        w.u8(matches!(f.kind, FieldKind::Numerical) as u8);
        w.size(*b);
    }
    w.f64(pre.numeric_fill);
    match &pre.scaler {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f64s(&s.mean);
            w.f64s(&s.std);
        }
    }
}

pub fn read_preprocessor(r: &mut Reader<'_>) -> Result<Option<Preprocessor>> {
    if r.u8()? == 0 {
        return Ok(None);
    }
    let format = match r.u8()? {
        0 => InputFormat::CriteoTsv,
        1 => {
            let n = r.size()?;
            let mut columns = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.str()?;
                let role = match r.u8()? {
                    0 => ColumnRole::Label,
                    1 => ColumnRole::Field(r.size()?),
                    2 => ColumnRole::Ignore,
                    other => return Err(Error::Format(format!("unknown column role {other}"))),
                };
                columns.push((name, role));
            }
            InputFormat::Csv(CsvLayout { columns })
        }
        other => return Err(Error::Format(format!("unknown input format {other}"))),
    };
    let n = r.size()?;
    let mut schema = Vec::with_capacity(n);
    let mut buckets = Vec::with_capacity(n);
    for i in 0..n {
        let name = r.str()?;
        let kind = if r.u8()? == 1 { FieldKind::Numerical } else { FieldKind::Categorical };
        schema.push(FieldSchema::new(i, kind, name));
        buckets.push(r.size()?);
    }
    let numeric_fill = r.f64()?;
    let scaler = match r.u8()? {
        0 => None,
        _ => Some(NumericScaler { mean: r.f64s()?, std: r.f64s()? }),
    };
    Ok(Some(Preprocessor { format, schema, buckets, numeric_fill, scaler }))
}
