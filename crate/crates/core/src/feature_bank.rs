//! Labeled feature banks: validation, file I/O, synthesis, and batching.
//!
//! A bank is an `n × d` matrix of finite `f32` embeddings plus one label
//! per sample — a class index for multiclass tasks, a 0/1 vector for
//! multilabel tasks. Banks are immutable once constructed and safe to
//! share across threads.
//!
//! # FBNK v1 binary format (canonical, little-endian)
//!
//! ```text
//! offset  0: magic  "FBNK"            (4 bytes)
//! offset  4: version                  (u32, = 1)
//! offset  8: task flag                (u8, 0 = multiclass, 1 = multilabel)
//! offset  9: label width k or m       (u16)
//! offset 11: sample count n           (u64)
//! offset 19: feature dimension d      (u32)
//! offset 23: features, n*d f32, row-major
//! then:      labels — multiclass: n u16 class indices;
//!                     multilabel: n*m u8 flags, row-major
//! ```
//!
//! # CSV import format
//!
//! Multiclass: header `label,f0,f1,...,f{d-1}`, label an integer class
//! index. Multilabel: header `y0,...,y{m-1},f0,...,f{d-1}`, y cells 0/1.
//! One row per sample. CSV exists for interop; FBNK is canonical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use thiserror::Error;

use crate::rng::SeedStream;

pub const FBNK_MAGIC: [u8; 4] = *b"FBNK";
pub const FBNK_VERSION: u32 = 1;
/// Fixed header size of an FBNK file in bytes.
pub const FBNK_HEADER_LEN: u64 = 23;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("magic mismatch at byte offset 0: found {found:02x?}, expected \"FBNK\"")]
    MagicMismatch { found: [u8; 4] },
    #[error("unsupported format version {version} at byte offset 4")]
    VersionUnsupported { version: u32 },
    #[error("invalid header field at byte offset {offset}: {what}")]
    InvalidHeader { offset: u64, what: String },
    #[error("truncated file: expected more data at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("label out of range at {location}: value {value}, limit {limit}")]
    LabelOutOfRange {
        location: Location,
        value: u32,
        limit: u32,
    },
    #[error("non-finite feature at {location}")]
    NonfiniteFeature { location: Location },
    #[error("bad csv header: {what}")]
    CsvHeader { what: String },
    #[error("bad csv cell at data row {row}, column {col}: {what}")]
    CsvCell {
        row: usize,
        col: usize,
        what: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid bank: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("empty batch plan: n={n} with batch size {batch} and drop-last leaves no batches")]
    EmptyPlan { n: usize, batch: usize },
}

/// Where in a file a bad value was found: a byte offset for binary files,
/// a (row, column) position for CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    ByteOffset(u64),
    RowCol { row: usize, col: usize },
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::ByteOffset(o) => write!(f, "byte offset {o}"),
            Location::RowCol { row, col } => write!(f, "data row {row}, column {col}"),
        }
    }
}

/// The two head shapes the pipeline supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Single-label classification over `classes` categories (softmax head).
    Multiclass { classes: u16 },
    /// Independent binary detection over `units` outputs (sigmoid head).
    Multilabel { units: u16 },
}

impl TaskKind {
    /// 8-way expression classification head.
    pub const EXPR: TaskKind = TaskKind::Multiclass { classes: 8 };
    /// 12-unit action-unit detection head.
    pub const AU: TaskKind = TaskKind::Multilabel { units: 12 };

    /// Output width: k for multiclass, m for multilabel.
    pub fn width(&self) -> usize {
        match *self {
            TaskKind::Multiclass { classes } => classes as usize,
            TaskKind::Multilabel { units } => units as usize,
        }
    }

    pub fn is_multiclass(&self) -> bool {
        matches!(self, TaskKind::Multiclass { .. })
    }

    fn validate(&self) -> Result<(), BankError> {
        match *self {
            TaskKind::Multiclass { classes } if classes < 2 => Err(BankError::Invalid(format!(
                "multiclass needs at least 2 classes, got {classes}"
            ))),
            TaskKind::Multilabel { units } if units < 1 => Err(BankError::Invalid(
                "multilabel needs at least 1 unit".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Per-sample labels, matching the bank's [`TaskKind`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    /// One class index per sample, each `< classes`.
    Multiclass(Vec<u16>),
    /// `n × m` matrix of 0/1 flags.
    Multilabel(Array2<u8>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Multiclass(v) => v.len(),
            Labels::Multilabel(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable bank of `n` labeled `d`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    task: TaskKind,
    features: Array2<f32>,
    labels: Labels,
}

impl FeatureBank {
    /// Builds a bank, checking every invariant: n ≥ 1, d ≥ 1, finite
    /// features, labels in range and shape-congruent with `task`.
    pub fn new(task: TaskKind, features: Array2<f32>, labels: Labels) -> Result<Self, BankError> {
        task.validate()?;
        let (n, d) = features.dim();
        if n < 1 {
            return Err(BankError::Invalid("bank needs at least one sample".into()));
        }
        if d < 1 {
            return Err(BankError::Invalid(
                "bank needs at least one feature dimension".into(),
            ));
        }
        for ((row, col), &v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(BankError::NonfiniteFeature {
                    location: Location::RowCol { row, col },
                });
            }
        }
        if labels.len() != n {
            return Err(BankError::Invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                n
            )));
        }
        match (&task, &labels) {
            (TaskKind::Multiclass { classes }, Labels::Multiclass(ls)) => {
                for (row, &l) in ls.iter().enumerate() {
                    if l >= *classes {
                        return Err(BankError::LabelOutOfRange {
                            location: Location::RowCol { row, col: 0 },
                            value: l as u32,
                            limit: *classes as u32,
                        });
                    }
                }
            }
            (TaskKind::Multilabel { units }, Labels::Multilabel(ls)) => {
                if ls.ncols() != *units as usize {
                    return Err(BankError::Invalid(format!(
                        "label width {} does not match {} units",
                        ls.ncols(),
                        units
                    )));
                }
                for ((row, col), &l) in ls.indexed_iter() {
                    if l > 1 {
                        return Err(BankError::LabelOutOfRange {
                            location: Location::RowCol { row, col },
                            value: l as u32,
                            limit: 2,
                        });
                    }
                }
            }
            _ => {
                return Err(BankError::Invalid(
                    "label kind does not match task kind".into(),
                ))
            }
        }
        Ok(Self {
            task,
            features,
            labels,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    /// Gathers the given rows as an `f64` matrix for the numeric pipeline.
    pub fn gather_features(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.d()));
        for (bi, &si) in indices.iter().enumerate() {
            for (j, &v) in self.features.row(si).iter().enumerate() {
                out[[bi, j]] = f64::from(v);
            }
        }
        out
    }

    /// Gathers the labels for the given rows.
    pub fn gather_labels(&self, indices: &[usize]) -> Labels {
        match &self.labels {
            Labels::Multiclass(ls) => Labels::Multiclass(indices.iter().map(|&i| ls[i]).collect()),
            Labels::Multilabel(ls) => {
                let mut out = Array2::zeros((indices.len(), ls.ncols()));
                for (bi, &si) in indices.iter().enumerate() {
                    out.row_mut(bi).assign(&ls.row(si));
                }
                Labels::Multilabel(out)
            }
        }
    }

    /// Re-declares a multiclass bank with a wider class count (labels are
    /// revalidated). Used to widen CSV banks whose class count was
    /// inferred from the labels present.
    pub fn with_class_count(self, classes: u16) -> Result<Self, BankError> {
        match self.task {
            TaskKind::Multiclass { classes: old } if classes >= old => {
                FeatureBank::new(TaskKind::Multiclass { classes }, self.features, self.labels)
            }
            TaskKind::Multiclass { classes: old } => Err(BankError::Invalid(format!(
                "cannot narrow class count from {old} to {classes}"
            ))),
            TaskKind::Multilabel { .. } => Err(BankError::Invalid(
                "with_class_count applies to multiclass banks only".into(),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Binary I/O
// ---------------------------------------------------------------------------

/// `Read` adapter tracking the byte offset, so errors can name positions.
struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, pos: 0 }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let got = self.inner.read(buf)?;
        self.pos += got as u64;
        Ok(got)
    }
}

fn truncated_at<T>(pos: u64) -> impl FnOnce(std::io::Error) -> BankError {
    let _ = std::marker::PhantomData::<T>;
    move |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            BankError::TruncatedFile { offset: pos }
        } else {
            BankError::Io(e)
        }
    }
}

/// Writes a bank to `path` in FBNK v1 format.
pub fn save_bank(bank: &FeatureBank, path: &Path) -> Result<(), BankError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FBNK_MAGIC)?;
    w.write_u32::<LittleEndian>(FBNK_VERSION)?;
    let (flag, width) = match bank.task {
        TaskKind::Multiclass { classes } => (0u8, classes),
        TaskKind::Multilabel { units } => (1u8, units),
    };
    w.write_u8(flag)?;
    w.write_u16::<LittleEndian>(width)?;
    w.write_u64::<LittleEndian>(bank.n() as u64)?;
    w.write_u32::<LittleEndian>(bank.d() as u32)?;
    for &v in bank.features.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    match &bank.labels {
        Labels::Multiclass(ls) => {
            for &l in ls {
                w.write_u16::<LittleEndian>(l)?;
            }
        }
        Labels::Multilabel(ls) => {
            for &l in ls.iter() {
                w.write_u8(l)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a bank from `path`, accepting FBNK (sniffed by magic) or CSV.
pub fn load_bank(path: &Path) -> Result<FeatureBank, BankError> {
    let mut probe = [0u8; 4];
    let mut f = File::open(path)?;
    let got = f.read(&mut probe)?;
    if got == 4 && probe == FBNK_MAGIC {
        drop(f);
        load_bank_binary(path)
    } else {
        drop(f);
        load_bank_csv(path)
    }
}

/// Reads only the FBNK header: (task, n, d).
pub fn read_bank_header(path: &Path) -> Result<(TaskKind, u64, u32), BankError> {
    let f = File::open(path)?;
    let mut r = CountingReader::new(BufReader::new(f));
    read_header(&mut r)
}

fn read_header<R: Read>(r: &mut CountingReader<R>) -> Result<(TaskKind, u64, u32), BankError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated_at::<()>(0))?;
    if magic != FBNK_MAGIC {
        return Err(BankError::MagicMismatch { found: magic });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(truncated_at::<()>(4))?;
    if version != FBNK_VERSION {
        return Err(BankError::VersionUnsupported { version });
    }
    let flag = r.read_u8().map_err(truncated_at::<()>(8))?;
    let width = r
        .read_u16::<LittleEndian>()
        .map_err(truncated_at::<()>(9))?;
    let n = r
        .read_u64::<LittleEndian>()
        .map_err(truncated_at::<()>(11))?;
    let d = r
        .read_u32::<LittleEndian>()
        .map_err(truncated_at::<()>(19))?;
    let task = match flag {
        0 => TaskKind::Multiclass { classes: width },
        1 => TaskKind::Multilabel { units: width },
        other => {
            return Err(BankError::InvalidHeader {
                offset: 8,
                what: format!("task flag must be 0 or 1, got {other}"),
            })
        }
    };
    if n == 0 {
        return Err(BankError::InvalidHeader {
            offset: 11,
            what: "sample count must be at least 1".into(),
        });
    }
    if d == 0 {
        return Err(BankError::InvalidHeader {
            offset: 19,
            what: "feature dimension must be at least 1".into(),
        });
    }
    Ok((task, n, d))
}

fn load_bank_binary(path: &Path) -> Result<FeatureBank, BankError> {
    let f = File::open(path)?;
    let mut r = CountingReader::new(BufReader::new(f));
    let (task, n64, d32) = read_header(&mut r)?;

    // Bound the declared payload by the actual file length before
    // allocating anything from header-controlled sizes.
    let label_bytes = match task {
        TaskKind::Multiclass { .. } => n64.checked_mul(2),
        TaskKind::Multilabel { units } => n64.checked_mul(units as u64),
    };
    let expected = n64
        .checked_mul(d32 as u64)
        .and_then(|cells| cells.checked_mul(4))
        .zip(label_bytes)
        .and_then(|(feat, lb)| feat.checked_add(lb))
        .and_then(|payload| payload.checked_add(FBNK_HEADER_LEN))
        .ok_or(BankError::InvalidHeader {
            offset: 11,
            what: "declared sizes overflow".into(),
        })?;
    let actual = std::fs::metadata(path)?.len();
    if actual < expected {
        return Err(BankError::TruncatedFile { offset: actual });
    }

    let n = n64 as usize;
    let d = d32 as usize;
    let mut features = Array2::<f32>::zeros((n, d));
    for row in 0..n {
        for col in 0..d {
            let pos = r.pos;
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(truncated_at::<()>(pos))?;
            if !v.is_finite() {
                return Err(BankError::NonfiniteFeature {
                    location: Location::ByteOffset(pos),
                });
            }
            features[[row, col]] = v;
        }
    }

    let labels = match task {
        TaskKind::Multiclass { classes } => {
            let mut ls = Vec::with_capacity(n);
            for _row in 0..n {
                let pos = r.pos;
                let l = r
                    .read_u16::<LittleEndian>()
                    .map_err(truncated_at::<()>(pos))?;
                if l >= classes {
                    return Err(BankError::LabelOutOfRange {
                        location: Location::ByteOffset(pos),
                        value: l as u32,
                        limit: classes as u32,
                    });
                }
                ls.push(l);
            }
            Labels::Multiclass(ls)
        }
        TaskKind::Multilabel { units } => {
            let m = units as usize;
            let mut ls = Array2::<u8>::zeros((n, m));
            for row in 0..n {
                for col in 0..m {
                    let pos = r.pos;
                    let l = r.read_u8().map_err(truncated_at::<()>(pos))?;
                    if l > 1 {
                        return Err(BankError::LabelOutOfRange {
                            location: Location::ByteOffset(pos),
                            value: l as u32,
                            limit: 2,
                        });
                    }
                    ls[[row, col]] = l;
                }
            }
            Labels::Multilabel(ls)
        }
    };

    FeatureBank::new(task, features, labels)
}

// ---------------------------------------------------------------------------
// CSV import
// ---------------------------------------------------------------------------

fn load_bank_csv(path: &Path) -> Result<FeatureBank, BankError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if header.is_empty() {
        return Err(BankError::CsvHeader {
            what: "empty header".into(),
        });
    }

    // Count leading y-columns (multilabel) or require a leading `label`.
    let multilabel = header[0].starts_with('y');
    let m = if multilabel {
        let mut m = 0;
        while m < header.len() && header[m] == format!("y{m}") {
            m += 1;
        }
        if m == 0 {
            return Err(BankError::CsvHeader {
                what: format!("expected y0,y1,... columns, got {:?}", header[0]),
            });
        }
        m
    } else {
        if header[0] != "label" {
            return Err(BankError::CsvHeader {
                what: format!("first column must be `label` or `y0`, got {:?}", header[0]),
            });
        }
        0
    };
    let label_cols = if multilabel { m } else { 1 };
    let d = header.len() - label_cols;
    if d == 0 {
        return Err(BankError::CsvHeader {
            what: "no feature columns".into(),
        });
    }
    for (j, name) in header[label_cols..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(BankError::CsvHeader {
                what: format!("expected feature column f{j}, got {name:?}"),
            });
        }
    }

    let mut feat_rows: Vec<f32> = Vec::new();
    let mut mc_labels: Vec<u16> = Vec::new();
    let mut ml_labels: Vec<u8> = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(BankError::CsvCell {
                row,
                col: record.len().min(header.len()),
                what: format!("expected {} cells, got {}", header.len(), record.len()),
            });
        }
        if multilabel {
            for col in 0..m {
                match record[col].parse::<u8>() {
                    Ok(v) if v <= 1 => ml_labels.push(v),
                    Ok(v) => {
                        return Err(BankError::LabelOutOfRange {
                            location: Location::RowCol { row, col },
                            value: v as u32,
                            limit: 2,
                        })
                    }
                    Err(e) => {
                        return Err(BankError::CsvCell {
                            row,
                            col,
                            what: e.to_string(),
                        })
                    }
                }
            }
        } else {
            match record[0].parse::<u16>() {
                Ok(v) => mc_labels.push(v),
                Err(e) => {
                    return Err(BankError::CsvCell {
                        row,
                        col: 0,
                        what: e.to_string(),
                    })
                }
            }
        }
        for (j, cell) in record.iter().skip(label_cols).enumerate() {
            let col = label_cols + j;
            let v: f32 =
                cell.parse()
                    .map_err(|e: std::num::ParseFloatError| BankError::CsvCell {
                        row,
                        col,
                        what: e.to_string(),
                    })?;
            if !v.is_finite() {
                return Err(BankError::NonfiniteFeature {
                    location: Location::RowCol { row, col },
                });
            }
            feat_rows.push(v);
        }
    }

    let n = if multilabel {
        ml_labels.len() / m
    } else {
        mc_labels.len()
    };
    if n == 0 {
        return Err(BankError::Invalid("csv contains no data rows".into()));
    }
    let features =
        Array2::from_shape_vec((n, d), feat_rows).map_err(|e| BankError::Invalid(e.to_string()))?;
    if multilabel {
        let labels = Array2::from_shape_vec((n, m), ml_labels)
            .map_err(|e| BankError::Invalid(e.to_string()))?;
        FeatureBank::new(
            TaskKind::Multilabel { units: m as u16 },
            features,
            Labels::Multilabel(labels),
        )
    } else {
        // Class count is not stored in CSV; infer it from the labels seen
        // (at least 2 so the bank invariant holds).
        let classes = mc_labels.iter().copied().max().unwrap_or(0).max(1) + 1;
        FeatureBank::new(
            TaskKind::Multiclass { classes },
            features,
            Labels::Multiclass(mc_labels),
        )
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Label layout for a synthetic bank.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticLabels {
    /// Multiclass: exact sample count per class; n is the sum.
    ClassCounts(Vec<usize>),
    /// Multilabel: per-unit positive rates over `samples` draws.
    UnitRates { samples: usize, rates: Vec<f64> },
}

/// Recipe for a deterministic synthetic bank.
///
/// Class `c` (or active unit `j`) shifts the Gaussian mean by
/// `separation` along the standard basis direction `e_{c mod d}`
/// (`e_{j mod d}`), so large separations are linearly separable and small
/// ones overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub labels: SyntheticLabels,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn task(&self) -> TaskKind {
        match &self.labels {
            SyntheticLabels::ClassCounts(c) => TaskKind::Multiclass {
                classes: c.len() as u16,
            },
            SyntheticLabels::UnitRates { rates, .. } => TaskKind::Multilabel {
                units: rates.len() as u16,
            },
        }
    }

    pub fn validate(&self) -> Result<(), BankError> {
        if self.dim < 1 {
            return Err(BankError::InvalidSpec("dim must be at least 1".into()));
        }
        if self.separation.is_nan() || self.separation <= 0.0 {
            return Err(BankError::InvalidSpec(format!(
                "separation must be > 0, got {}",
                self.separation
            )));
        }
        if self.noise.is_nan() || self.noise <= 0.0 {
            return Err(BankError::InvalidSpec(format!(
                "noise must be > 0, got {}",
                self.noise
            )));
        }
        match &self.labels {
            SyntheticLabels::ClassCounts(counts) => {
                if counts.len() < 2 || counts.len() > u16::MAX as usize {
                    return Err(BankError::InvalidSpec(format!(
                        "need between 2 and {} class counts, got {}",
                        u16::MAX,
                        counts.len()
                    )));
                }
                if counts.iter().any(|&c| c < 1) {
                    return Err(BankError::InvalidSpec(
                        "every class count must be at least 1".into(),
                    ));
                }
            }
            SyntheticLabels::UnitRates { samples, rates } => {
                if *samples < 1 {
                    return Err(BankError::InvalidSpec(
                        "sample count must be at least 1".into(),
                    ));
                }
                if rates.is_empty() || rates.len() > u16::MAX as usize {
                    return Err(BankError::InvalidSpec(format!(
                        "need between 1 and {} unit rates, got {}",
                        u16::MAX,
                        rates.len()
                    )));
                }
                if rates.iter().any(|&r| r.is_nan() || r <= 0.0 || r >= 1.0) {
                    return Err(BankError::InvalidSpec(
                        "every positive rate must lie in (0, 1)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generates a synthetic bank. Pure in the spec: the same spec (seed
/// included) produces a bit-identical bank.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FeatureBank, BankError> {
    spec.validate()?;
    let d = spec.dim;
    let mut stream = SeedStream::new(spec.seed);
    match &spec.labels {
        SyntheticLabels::ClassCounts(counts) => {
            let n: usize = counts.iter().sum();
            let mut features = Array2::<f32>::zeros((n, d));
            let mut labels = Vec::with_capacity(n);
            let mut row = 0;
            for (c, &count) in counts.iter().enumerate() {
                let mean_col = c % d;
                for _ in 0..count {
                    for col in 0..d {
                        let mean = if col == mean_col {
                            spec.separation
                        } else {
                            0.0
                        };
                        features[[row, col]] = (mean + spec.noise * stream.normal()) as f32;
                    }
                    labels.push(c as u16);
                    row += 1;
                }
            }
            FeatureBank::new(spec.task(), features, Labels::Multiclass(labels))
        }
        SyntheticLabels::UnitRates { samples, rates } => {
            let n = *samples;
            let m = rates.len();
            let mut features = Array2::<f32>::zeros((n, d));
            let mut labels = Array2::<u8>::zeros((n, m));
            for row in 0..n {
                let mut mean = vec![0.0f64; d];
                for (j, &rate) in rates.iter().enumerate() {
                    if stream.bernoulli(rate) {
                        labels[[row, j]] = 1;
                        mean[j % d] += spec.separation;
                    }
                }
                for col in 0..d {
                    features[[row, col]] = (mean[col] + spec.noise * stream.normal()) as f32;
                }
            }
            FeatureBank::new(spec.task(), features, Labels::Multilabel(labels))
        }
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded minibatch layout over `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

/// Chunks a seeded Fisher–Yates permutation of `[0, n)` into batches.
/// With `drop_last`, every batch has exactly `batch_size` samples.
pub fn plan_batches(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>, BankError> {
    assert!(plan.batch_size >= 1, "batch size must be at least 1");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stream = SeedStream::new(plan.seed);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = perm.chunks(plan.batch_size).map(|c| c.to_vec()).collect();
    if plan.drop_last {
        batches.retain(|b| b.len() == plan.batch_size);
    }
    if batches.is_empty() {
        return Err(BankError::EmptyPlan {
            n,
            batch: plan.batch_size,
        });
    }
    Ok(batches)
}

/// Splits `[0, n)` into disjoint (train, validation) index sets by a
/// seeded shuffle; the last `floor(fraction * n)` permuted indices become
/// the validation set.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stream = SeedStream::new(seed);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    let val_n = ((fraction * n as f64).floor() as usize).min(n);
    let train = perm[..n - val_n].to_vec();
    let val = perm[n - val_n..].to_vec();
    (train, val)
}

/// Builds a bank from a subset of another bank's rows.
pub fn subset_bank(bank: &FeatureBank, indices: &[usize]) -> Result<FeatureBank, BankError> {
    let mut features = Array2::<f32>::zeros((indices.len(), bank.d()));
    for (bi, &si) in indices.iter().enumerate() {
        features.row_mut(bi).assign(&bank.features().row(si));
    }
    FeatureBank::new(bank.task(), features, bank.gather_labels(indices))
}
