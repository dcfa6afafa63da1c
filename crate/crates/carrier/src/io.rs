//! Embedding files, corpus JSON-lines, JSON reports and input fingerprints.
//!
//! Binary embedding layout (little-endian):
//!
//! ```text
//! "CPGE" | version u32 = 1 | dtype u32 (1 = f32, 2 = f64) | N u64 | d u32
//! N*d values, row-major
//! N ids, each terminated by '\n' (the block may be empty: ids default to "0".."N-1")
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use carrier_core::cloud::EmbeddingCloud;
use carrier_core::corpus::{CorpusRecord, Family, Regime, SLOT_COUNT};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"CPGE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    Binary,
    Csv,
}

impl EmbeddingFormat {
    /// `.csv` files are text; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EmbeddingFormat::Csv,
            _ => EmbeddingFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| AppError::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    File::create(path).map_err(|e| AppError::io(path, e))
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingCloud> {
    let source = path.display().to_string();
    match format {
        EmbeddingFormat::Binary => read_binary(BufReader::new(open(path)?), &source).map_err(|e| relabel(e, path)),
        EmbeddingFormat::Csv => {
            let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            parse_csv(&text, &source).map_err(|e| relabel(e, path))
        }
    }
}

fn relabel(e: AppError, path: &Path) -> AppError {
    match e {
        AppError::Format { message, .. } => AppError::format(path, message),
        other => other,
    }
}

/// Binary files are written at double precision so they reload exactly.
pub fn save_embeddings(cloud: &EmbeddingCloud, path: &Path, format: EmbeddingFormat) -> Result<()> {
    save_embeddings_with(cloud, path, format, Precision::F64)
}

pub fn save_embeddings_with(
    cloud: &EmbeddingCloud,
    path: &Path,
    format: EmbeddingFormat,
    precision: Precision,
) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    match format {
        EmbeddingFormat::Binary => write_binary(cloud, &mut w, precision),
        EmbeddingFormat::Csv => write_csv(cloud, &mut w),
    }
    .and_then(|_| w.flush())
    .map_err(|e| AppError::io(path, e))
}

fn format_err(message: impl Into<String>) -> AppError {
    AppError::Format { path: String::new(), message: message.into() }
}

pub fn write_binary<W: Write>(cloud: &EmbeddingCloud, w: &mut W, precision: Precision) -> std::io::Result<()> {
    let m = cloud.points();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&precision.code().to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            match precision {
                Precision::F32 => w.write_all(&(m[(i, j)] as f32).to_le_bytes())?,
                Precision::F64 => w.write_all(&m[(i, j)].to_le_bytes())?,
            }
        }
    }
    for id in cloud.ids() {
        w.write_all(id.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R, source: &str) -> Result<EmbeddingCloud> {
    let io = |e: std::io::Error| format_err(format!("truncated file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic; not an embedding file"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(io)?;
    let width = match u32::from_le_bytes(u32buf) {
        1 => 4,
        2 => 8,
        other => return Err(format_err(format!("unknown value type code {other}"))),
    };
    r.read_exact(&mut u64buf).map_err(io)?;
    let n = usize::try_from(u64::from_le_bytes(u64buf)).map_err(|_| format_err("row count overflows"))?;
    r.read_exact(&mut u32buf).map_err(io)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    if n == 0 || d == 0 {
        return Err(format_err("header declares an empty matrix"));
    }
    let row_bytes = d.checked_mul(width).ok_or_else(|| format_err("row size overflows"))?;
    let mut points = DMatrix::zeros(n, d);
    let mut buf = vec![0u8; row_bytes];
    for i in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| format_err(format!("payload shorter than header ({n} x {d}) declares")))?;
        for j in 0..d {
            let at = j * width;
            points[(i, j)] = if width == 4 {
                f32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"))
            };
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if rest.is_empty() {
        return Ok(EmbeddingCloud::with_index_ids(points, source)?);
    }
    let text = String::from_utf8(rest).map_err(|_| format_err("id block is not UTF-8"))?;
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| format_err("payload longer than header declares or ids not newline-terminated"))?;
    let ids: Vec<String> = body.split('\n').map(String::from).collect();
    if ids.len() != n {
        return Err(format_err(format!("{} ids for {n} rows", ids.len())));
    }
    Ok(EmbeddingCloud::new(points, ids, source)?)
}

/// Rows of decimal values; a leading id column is recognized when the first
/// field of the first row is not a number.
pub fn parse_csv(text: &str, source: &str) -> Result<EmbeddingCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut with_ids = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(format!("line {}: {e}", line + 1)))?;
        let first = record.get(0).unwrap_or("");
        let has_id = *with_ids.get_or_insert_with(|| first.parse::<f64>().is_err());
        let start = usize::from(has_id);
        if has_id {
            ids.push(first.to_string());
        }
        let values = record
            .iter()
            .skip(start)
            .map(|f| f.parse::<f64>().map_err(|_| format_err(format!("line {}: `{f}` is not a number", line + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(prev) = rows.first() {
            if prev.len() != values.len() {
                return Err(format_err(format!(
                    "line {}: {} values, expected {}",
                    line + 1,
                    values.len(),
                    prev.len()
                )));
            }
        }
        rows.push(values);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(format_err("no values"));
    }
    let (n, d) = (rows.len(), rows[0].len());
    let points = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    if with_ids == Some(true) {
        Ok(EmbeddingCloud::new(points, ids, source)?)
    } else {
        Ok(EmbeddingCloud::with_index_ids(points, source)?)
    }
}

/// Writes `id,v1,..,vd` rows, or bare value rows when the ids are the
/// default `0..N-1`. Rust's shortest round-trip float formatting makes the
/// text reload exactly.
pub fn write_csv<W: Write>(cloud: &EmbeddingCloud, w: &mut W) -> std::io::Result<()> {
    let m = cloud.points();
    let ids = cloud.ids();
    let indexed = ids.iter().enumerate().all(|(i, id)| *id == i.to_string());
    if !indexed && ids[0].parse::<f64>().is_ok() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "a numeric first id would read back as a value; use the binary format",
        ));
    }
    for (i, id) in ids.iter().enumerate() {
        if !indexed {
            write!(w, "{id},")?;
        }
        for j in 0..m.ncols() {
            if j > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{:?}", m[(i, j)])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    pub family: Family,
    pub regime: Regime,
    pub slots: Slots,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slots {
    pub s1: String,
    pub s2: String,
    pub s3: String,
    pub s4: String,
}

impl From<&CorpusRecord> for CorpusLine {
    fn from(r: &CorpusRecord) -> Self {
        let [s1, s2, s3, s4] = r.slots.clone();
        CorpusLine {
            id: r.id.clone(),
            family: r.family,
            regime: r.regime,
            slots: Slots { s1, s2, s3, s4 },
            sentence: r.sentence.clone(),
        }
    }
}

pub fn write_corpus_jsonl(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &CorpusLine::from(r))?;
        w.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Reads records back, re-deriving indices and checking the id and the
/// rendered sentence against the template.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| AppError::format(path, format!("line {}: {msg}", n + 1));
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let Slots { s1, s2, s3, s4 } = parsed.slots;
        let slots: [String; SLOT_COUNT] = [s1, s2, s3, s4];
        let record = CorpusRecord::from_slots(parsed.family, parsed.regime, slots).map_err(|e| at(e.to_string()))?;
        if record.id != parsed.id {
            return Err(at(format!("id `{}` does not match slots (expected `{}`)", parsed.id, record.id)));
        }
        if record.sentence != parsed.sentence {
            return Err(at(format!("sentence does not match the template for `{}`", parsed.id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::from("sha256:");
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn fingerprint_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut r = BufReader::new(open(path)?);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = r.read(&mut buf).map_err(|e| AppError::io(path, e))?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    let mut s = String::from("sha256:");
    for b in hasher.finalize().iter() {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(bytes).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::format(path, e.to_string()))
}
