//! Bit-exact file formats. Everything is little-endian and validated
//! strictly on read: magic, version, and every length against the actual
//! file size before any allocation.
//!
//! Formats (all counts are u32 LE, strings are u32 LE length + UTF-8):
//!
//! * `CTXV` vectors: magic, version, dim, count, count*dim f32 payload,
//!   then count instance_id strings.
//! * `CCOD` codes: magic, version, K, M, count, count*M u16 indices,
//!   then count instance_id strings.
//! * `CMDL` model: magic, version, K, M, D, H, H', standardize flag (u8,
//!   followed by mean and std f32 arrays of length D when set), then the
//!   weight tensors as f32 in order w1, b1, w2, b2, w3, b3, w4, b4.
//! * `CSAM` memory bundle: magic, version, K, M, D, lemma count, then per
//!   lemma: lemma string, node count, M*K bit-packed rows of
//!   ceil(nodes/64) u64 words, then per node instance_id, lemma and
//!   sense_key strings.
//! * Datasets are UTF-8 TSV: instance_id, lemma, sense_key, vector_ref.
//!
//! Writes go to a temporary file in the destination directory and are
//! renamed into place.

use crate::codec::{CodecModel, Standardization};
use crate::core::{CodeConfig, CompositionalCode, ContextVector, LabeledInstance};
use crate::sam::{NodeMeta, SparseMemory};
use crate::wsd::{LemmaIndex, Prediction};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const VECTOR_MAGIC: &[u8; 4] = b"CTXV";
pub const CODE_MAGIC: &[u8; 4] = b"CCOD";
pub const MODEL_MAGIC: &[u8; 4] = b"CMDL";
pub const MEMORY_MAGIC: &[u8; 4] = b"CSAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("corrupt file at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("index out of range in record {record}: {detail}")]
    IndexOutOfRange { record: usize, detail: String },
    #[error("duplicate instance_id {0:?}")]
    DuplicateInstanceId(String),
    #[error("unresolved vector reference {0:?}")]
    UnresolvedReference(String),
    #[error("invalid contents: {0}")]
    Invalid(String),
}

fn corrupt(offset: usize, detail: impl Into<String>) -> FormatError {
    FormatError::Corrupt {
        offset,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(corrupt(
                self.pos,
                format!("need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        self.check_len(n, 4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| corrupt(at, "invalid UTF-8 string"))
    }

    /// Validate that `count` records of `unit` bytes fit the remaining file
    /// before allocating anything.
    fn check_len(&self, count: usize, unit: usize) -> Result<(), FormatError> {
        let need = count
            .checked_mul(unit)
            .ok_or_else(|| corrupt(self.pos, "length overflow"))?;
        if self.remaining() < need {
            return Err(corrupt(
                self.pos,
                format!("declared {count} records of {unit} bytes exceed file size"),
            ));
        }
        Ok(())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { found: v });
        }
        Ok(())
    }

    fn expect_eof(&self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(corrupt(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Write bytes to a temporary file in the destination directory, then rename
/// into place.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| FormatError::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CTXV vectors
// ---------------------------------------------------------------------------

pub fn write_vectors(path: &Path, vectors: &[ContextVector]) -> Result<(), FormatError> {
    let dim = match vectors.first() {
        Some(v) => v.dim(),
        None => return Err(FormatError::Invalid("no vectors to write".into())),
    };
    let mut out = Vec::new();
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    for v in vectors {
        if v.dim() != dim {
            return Err(FormatError::Invalid(format!(
                "vector {:?} has dimension {}, expected {dim}",
                v.source_id(),
                v.dim()
            )));
        }
        for &x in v.values() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for v in vectors {
        push_string(&mut out, v.source_id());
    }
    atomic_write(path, &out)
}

pub fn read_vectors(path: &Path) -> Result<Vec<ContextVector>, FormatError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(VECTOR_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    if dim == 0 {
        return Err(corrupt(8, "dimension must be positive"));
    }
    r.check_len(count.checked_mul(dim).ok_or_else(|| corrupt(12, "size overflow"))?, 4)?;
    let mut payload = Vec::with_capacity(count);
    for record in 0..count {
        let at = r.pos;
        let values = r.f32_vec(dim)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(at + 4 * i, format!("non-finite value in record {record}")));
        }
        payload.push(values);
    }
    let mut vectors = Vec::with_capacity(count);
    for values in payload {
        let id = r.string()?;
        vectors.push(
            ContextVector::new(values, id).expect("validated above"),
        );
    }
    r.expect_eof()?;
    Ok(vectors)
}

// ---------------------------------------------------------------------------
// dataset TSV
// ---------------------------------------------------------------------------

/// One line of a dataset file; the vector lives in a separate vector file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub instance_id: String,
    pub lemma: String,
    pub sense_key: String,
    pub vector_ref: String,
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), FormatError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            rec.instance_id, rec.lemma, rec.sense_key, rec.vector_ref
        ));
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, FormatError> {
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(FormatError::Invalid(format!(
                "line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        if fields[1].is_empty() || fields[2].is_empty() {
            return Err(FormatError::Invalid(format!(
                "line {}: lemma and sense_key must be non-empty",
                lineno + 1
            )));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(FormatError::DuplicateInstanceId(fields[0].to_string()));
        }
        records.push(DatasetRecord {
            instance_id: fields[0].to_string(),
            lemma: fields[1].to_string(),
            sense_key: fields[2].to_string(),
            vector_ref: fields[3].to_string(),
        });
    }
    Ok(records)
}

/// Join dataset records with their vectors by instance id.
pub fn resolve_dataset(
    records: &[DatasetRecord],
    vectors: &[ContextVector],
) -> Result<Vec<LabeledInstance>, FormatError> {
    let by_id: HashMap<&str, &ContextVector> =
        vectors.iter().map(|v| (v.source_id(), v)).collect();
    records
        .iter()
        .map(|rec| {
            let v = by_id
                .get(rec.vector_ref.as_str())
                .ok_or_else(|| FormatError::UnresolvedReference(rec.vector_ref.clone()))?;
            LabeledInstance::new(
                rec.instance_id.clone(),
                rec.lemma.clone(),
                rec.sense_key.clone(),
                (*v).clone(),
            )
            .map_err(|e| FormatError::Invalid(e.to_string()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CCOD codes
// ---------------------------------------------------------------------------

/// Codes plus the (K, M) geometry they were produced under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSet {
    pub k: u32,
    pub m: u32,
    pub entries: Vec<(String, Vec<u16>)>,
}

pub fn write_codes(path: &Path, codes: &CodeSet) -> Result<(), FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(CODE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&codes.k.to_le_bytes());
    out.extend_from_slice(&codes.m.to_le_bytes());
    out.extend_from_slice(&(codes.entries.len() as u32).to_le_bytes());
    for (id, indices) in &codes.entries {
        if indices.len() != codes.m as usize {
            return Err(FormatError::Invalid(format!(
                "code for {id:?} has {} clusters, expected {}",
                indices.len(),
                codes.m
            )));
        }
        for &i in indices {
            if i as u32 >= codes.k {
                return Err(FormatError::Invalid(format!(
                    "code for {id:?} has index {i} >= K={}",
                    codes.k
                )));
            }
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    for (id, _) in &codes.entries {
        push_string(&mut out, id);
    }
    atomic_write(path, &out)
}

pub fn read_codes(path: &Path) -> Result<CodeSet, FormatError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(CODE_MAGIC)?;
    r.version()?;
    let k = r.u32()?;
    let m = r.u32()? as usize;
    let count = r.u32()? as usize;
    if k < 2 || m == 0 {
        return Err(corrupt(8, format!("invalid geometry K={k} M={m}")));
    }
    r.check_len(count.checked_mul(m).ok_or_else(|| corrupt(12, "size overflow"))?, 2)?;
    let mut payload = Vec::with_capacity(count);
    for record in 0..count {
        let mut indices = Vec::with_capacity(m);
        for _ in 0..m {
            let b = r.take(2)?;
            let v = u16::from_le_bytes(b.try_into().unwrap());
            if v as u32 >= k {
                return Err(FormatError::IndexOutOfRange {
                    record,
                    detail: format!("index {v} >= K={k}"),
                });
            }
            indices.push(v);
        }
        payload.push(indices);
    }
    let mut entries = Vec::with_capacity(count);
    for indices in payload {
        entries.push((r.string()?, indices));
    }
    r.expect_eof()?;
    Ok(CodeSet {
        k,
        m: m as u32,
        entries,
    })
}

// ---------------------------------------------------------------------------
// CMDL model
// ---------------------------------------------------------------------------

pub fn write_model(path: &Path, model: &CodecModel) -> Result<(), FormatError> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.k() as u32,
        cfg.m() as u32,
        cfg.d() as u32,
        model.hidden_enc() as u32,
        model.hidden_dec() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match model.standardization() {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            for &v in s.mean.iter().chain(&s.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for tensor in model.weight_tensors() {
        for &w in tensor {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

pub fn read_model(path: &Path) -> Result<CodecModel, FormatError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let k = r.u32()? as usize;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let h = r.u32()? as usize;
    let hp = r.u32()? as usize;
    let config = CodeConfig::new(k, m, d)
        .map_err(|e| corrupt(8, format!("invalid config: {e}")))?;
    if h == 0 || hp == 0 {
        return Err(corrupt(20, "hidden widths must be positive"));
    }
    let standardization = match r.u8()? {
        0 => None,
        1 => {
            let mean = r.f32_vec(d)?;
            let std = r.f32_vec(d)?;
            if std.iter().any(|&s| !(s > 0.0)) {
                return Err(corrupt(r.pos, "standardization std must be positive"));
            }
            Some(Standardization { mean, std })
        }
        other => return Err(corrupt(r.pos - 1, format!("bad standardize flag {other}"))),
    };
    let mk = config.code_units();
    let shapes = [h * d, h, mk * h, mk, hp * mk, hp, d * hp, d];
    let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(8);
    for len in shapes {
        let at = r.pos;
        let t = r.f32_vec(len)?;
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(at + 4 * i, "non-finite weight"));
        }
        tensors.push(t);
    }
    r.expect_eof()?;
    let weights: [Vec<f32>; 8] = tensors.try_into().expect("eight tensors");
    Ok(CodecModel::from_parts(config, h, hp, weights, standardization))
}

// ---------------------------------------------------------------------------
// CSAM memory bundle
// ---------------------------------------------------------------------------

pub fn write_memory_bundle(path: &Path, index: &LemmaIndex, d: usize) -> Result<(), FormatError> {
    let mut geometry: Option<(usize, usize)> = None;
    for (_, mem) in index.memories() {
        let g = (mem.config().k(), mem.config().m());
        match geometry {
            None => geometry = Some(g),
            Some(prev) if prev != g => {
                return Err(FormatError::Invalid("mixed memory geometries".into()))
            }
            _ => {}
        }
    }
    let (k, m) = geometry.ok_or_else(|| FormatError::Invalid("empty index".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MEMORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [k as u32, m as u32, d as u32, index.memories().count() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (lemma, mem) in index.memories() {
        push_string(&mut out, lemma);
        out.extend_from_slice(&(mem.node_count() as u32).to_le_bytes());
        let words = mem.words_per_row();
        for row in mem.rows() {
            for w in 0..words {
                let word = row.get(w).copied().unwrap_or(0);
                out.extend_from_slice(&word.to_le_bytes());
            }
        }
        for node in 0..mem.node_count() {
            let meta = mem.node_meta(node);
            push_string(&mut out, &meta.instance_id);
            push_string(&mut out, &meta.lemma);
            push_string(&mut out, &meta.sense_key);
        }
    }
    atomic_write(path, &out)
}

pub fn read_memory_bundle(path: &Path) -> Result<LemmaIndex, FormatError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(MEMORY_MAGIC)?;
    r.version()?;
    let k = r.u32()? as usize;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let lemma_count = r.u32()? as usize;
    let config = CodeConfig::new(k, m, d)
        .map_err(|e| corrupt(8, format!("invalid config: {e}")))?;
    let mut memories = BTreeMap::new();
    for _ in 0..lemma_count {
        let lemma = r.string()?;
        let node_count = r.u32()? as usize;
        let words = node_count.div_ceil(64);
        r.check_len(config.code_units().checked_mul(words).ok_or_else(|| corrupt(r.pos, "size overflow"))?, 8)?;
        let rows_at = r.pos;
        let mut rows: Vec<Vec<u64>> = Vec::with_capacity(config.code_units());
        for _ in 0..config.code_units() {
            let mut row = Vec::with_capacity(words);
            for _ in 0..words {
                row.push(r.u64()?);
            }
            rows.push(row);
        }
        // Reconstruct each node's code; every cluster must have exactly one
        // connection per node.
        let mut mem = SparseMemory::new(config);
        let mut codes: Vec<Vec<u16>> = vec![Vec::with_capacity(m); node_count];
        for node in 0..node_count {
            let word = node / 64;
            let bit = 1u64 << (node % 64);
            for cluster in 0..m {
                let mut found: Option<u16> = None;
                for unit in 0..k {
                    if rows[cluster * k + unit][word] & bit != 0 {
                        if found.is_some() {
                            return Err(corrupt(
                                rows_at,
                                format!("node {node} has multiple connections in cluster {cluster}"),
                            ));
                        }
                        found = Some(unit as u16);
                    }
                }
                let unit = found.ok_or_else(|| {
                    corrupt(
                        rows_at,
                        format!("node {node} has no connection in cluster {cluster}"),
                    )
                })?;
                codes[node].push(unit);
            }
        }
        for node in 0..node_count {
            let instance_id = r.string()?;
            let node_lemma = r.string()?;
            let sense_key = r.string()?;
            let code = CompositionalCode::new(codes[node].clone(), &config)
                .expect("reconstructed indices in range");
            mem.store(
                &code,
                NodeMeta {
                    instance_id,
                    lemma: node_lemma,
                    sense_key,
                },
            )
            .expect("config matches");
        }
        memories.insert(lemma, mem);
    }
    r.expect_eof()?;
    Ok(LemmaIndex::from_parts(memories))
}

// ---------------------------------------------------------------------------
// text outputs
// ---------------------------------------------------------------------------

/// CSV loss trace, one row per epoch, loss at 9 significant digits.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<(), FormatError> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss:.8e}\n"));
    }
    atomic_write(path, out.as_bytes())
}

/// Scorer-convention predictions: `instance_id<TAB>sense_key` per line;
/// abstentions are skipped.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), FormatError> {
    let mut out = String::new();
    for p in predictions {
        if let Some(sense) = &p.sense_key {
            out.push_str(&format!("{}\t{}\n", p.instance_id, sense));
        }
    }
    atomic_write(path, out.as_bytes())
}
