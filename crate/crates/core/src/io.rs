//! Dataset files. Two layouts are supported, each optionally gzip-compressed
//! (detected from the content, not the name):
//!
//! * line-delimited JSON: a header object carrying `schema_version`,
//!   `rubric` and the family maps, then one record object per line with
//!   keys `question_id`, `judge_id`, `candidate_id`, `stratum`, `level`;
//! * tab-separated columns: `#meta` lines holding the same header as JSON,
//!   a column-name row, then one record per row. The `stratum` column may be
//!   omitted.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{default_stratum, RubricSpec, ScoreDataset, ScoreRecord, DEFAULT_STRATUM};

pub const SCHEMA_VERSION: u32 = 1;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const COLUMNS: [&str; 5] = ["question_id", "judge_id", "candidate_id", "stratum", "level"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid rubric in header: {0}")]
    Rubric(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Tsv,
}

impl Format {
    /// Format implied by a file name, ignoring a trailing `.gz`.
    pub fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        let name = name.strip_suffix(".gz").unwrap_or(&name);
        if name.ends_with(".jsonl") || name.ends_with(".ndjson") || name.ends_with(".json") {
            Some(Self::Jsonl)
        } else if name.ends_with(".tsv") || name.ends_with(".tab") {
            Some(Self::Tsv)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    rubric: RubricSpec,
    #[serde(default)]
    judge_family: BTreeMap<String, String>,
    #[serde(default)]
    candidate_family: BTreeMap<String, String>,
}

impl Header {
    fn of(ds: &ScoreDataset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rubric: ds.rubric.clone(),
            judge_family: ds.judge_family.clone(),
            candidate_family: ds.candidate_family.clone(),
        }
    }

    fn checked(self) -> Result<Self, IoError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IoError::Schema {
                found: self.schema_version,
            });
        }
        let r = &self.rubric;
        RubricSpec::with_values(
            r.num_true_levels(),
            r.num_assigned_levels(),
            r.level_values().to_vec(),
        )
        .map_err(|e| IoError::Rubric(e.to_string()))?;
        Ok(self)
    }
}

#[derive(Deserialize)]
struct RecordLine<'a> {
    #[serde(borrow)]
    question_id: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    judge_id: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    candidate_id: std::borrow::Cow<'a, str>,
    #[serde(borrow, default)]
    stratum: Option<std::borrow::Cow<'a, str>>,
    level: u32,
}

/// Rubric for header-less files: square, sized by the largest level seen.
fn inferred_rubric(records: &[ScoreRecord]) -> Result<RubricSpec, IoError> {
    let max = records.iter().map(|r| r.assigned_level).max().unwrap_or(2);
    RubricSpec::square((max as usize).max(2)).map_err(|e| IoError::Rubric(e.to_string()))
}

fn finish(header: Option<Header>, records: Vec<ScoreRecord>) -> Result<ScoreDataset, IoError> {
    Ok(match header {
        Some(h) => ScoreDataset::new(h.rubric, records, h.judge_family, h.candidate_family),
        None => ScoreDataset::from_records(inferred_rubric(&records)?, records),
    })
}

fn malformed(line: usize, message: impl ToString) -> IoError {
    IoError::Malformed {
        line,
        message: message.to_string(),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<ScoreDataset, IoError> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| malformed(line_no, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if records.is_empty() && header.is_none() && text.contains("\"schema_version\"") {
            let h: Header = serde_json::from_str(text).map_err(|e| malformed(line_no, e))?;
            header = Some(h.checked()?);
            continue;
        }
        let r: RecordLine = serde_json::from_str(text).map_err(|e| malformed(line_no, e))?;
        records.push(ScoreRecord {
            question_id: r.question_id.into_owned(),
            judge_id: r.judge_id.into_owned(),
            candidate_id: r.candidate_id.into_owned(),
            stratum_id: r.stratum.map_or_else(default_stratum, |s| s.into_owned()),
            assigned_level: r.level,
        });
    }
    finish(header, records)
}

pub fn write_jsonl<W: Write>(ds: &ScoreDataset, mut w: W) -> Result<(), IoError> {
    serde_json::to_writer(&mut w, &Header::of(ds))?;
    w.write_all(b"\n").map_err(io_err(Path::new("<output>")))?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(Path::new("<output>")))?;
    }
    w.flush().map_err(io_err(Path::new("<output>")))
}

pub fn read_tsv<R: BufRead>(reader: R) -> Result<ScoreDataset, IoError> {
    let mut header = None;
    let mut positions: Option<[Option<usize>; 5]> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| malformed(line_no, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix("#meta") {
            let h: Header =
                serde_json::from_str(meta.trim()).map_err(|e| malformed(line_no, e))?;
            header = Some(h.checked()?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let Some(pos) = positions else {
            let mut pos = [None; 5];
            for (c, name) in COLUMNS.iter().enumerate() {
                pos[c] = fields.iter().position(|f| f.trim() == *name);
            }
            if let Some(c) = [0, 1, 2, 4].into_iter().find(|&c| pos[c].is_none()) {
                return Err(malformed(line_no, format!("missing column {}", COLUMNS[c])));
            }
            positions = Some(pos);
            continue;
        };
        let get = |c: usize| -> Result<&str, IoError> {
            let p = pos[c].unwrap();
            fields
                .get(p)
                .copied()
                .ok_or_else(|| malformed(line_no, format!("missing field {}", COLUMNS[c])))
        };
        let level = get(4)?
            .trim()
            .parse::<u32>()
            .map_err(|e| malformed(line_no, format!("level: {e}")))?;
        let stratum = match pos[3] {
            Some(p) => fields.get(p).copied().unwrap_or(DEFAULT_STRATUM),
            None => DEFAULT_STRATUM,
        };
        records.push(ScoreRecord {
            question_id: get(0)?.to_string(),
            judge_id: get(1)?.to_string(),
            candidate_id: get(2)?.to_string(),
            stratum_id: stratum.to_string(),
            assigned_level: level,
        });
    }
    finish(header, records)
}

fn tsv_safe(s: &str, line: usize) -> Result<&str, IoError> {
    if s.contains(['\t', '\n', '\r']) || s.starts_with('#') {
        return Err(malformed(
            line,
            format!("id {s:?} contains a tab or newline or starts with '#'"),
        ));
    }
    Ok(s)
}

pub fn write_tsv<W: Write>(ds: &ScoreDataset, mut w: W) -> Result<(), IoError> {
    let out = Path::new("<output>");
    writeln!(w, "#meta\t{}", serde_json::to_string(&Header::of(ds))?).map_err(io_err(out))?;
    writeln!(w, "{}", COLUMNS.join("\t")).map_err(io_err(out))?;
    for (i, r) in ds.records.iter().enumerate() {
        let line = i + 3;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            tsv_safe(&r.question_id, line)?,
            tsv_safe(&r.judge_id, line)?,
            tsv_safe(&r.candidate_id, line)?,
            tsv_safe(&r.stratum_id, line)?,
            r.assigned_level
        )
        .map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))
}

/// Opens a file for reading, decompressing gzip content transparently.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, IoError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let magic = file.fill_buf().map_err(io_err(path))?;
    if magic.starts_with(&GZIP_MAGIC) {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(file))
    }
}

fn sniff(reader: &mut dyn BufRead) -> Result<Format, IoError> {
    let buf = reader.fill_buf().map_err(|e| malformed(1, e))?;
    let first = buf.iter().find(|b| !b.is_ascii_whitespace());
    Ok(if first == Some(&b'{') {
        Format::Jsonl
    } else {
        Format::Tsv
    })
}

/// Loads a dataset; the layout comes from the extension or, failing that,
/// from the first character.
pub fn load_dataset(path: &Path) -> Result<ScoreDataset, IoError> {
    let mut reader = open_reader(path)?;
    let format = match Format::from_path(path) {
        Some(f) => f,
        None => sniff(&mut reader)?,
    };
    match format {
        Format::Jsonl => read_jsonl(reader),
        Format::Tsv => read_tsv(reader),
    }
}

/// Writes `path` through a temporary sibling renamed into place.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> Result<(), IoError>,
) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut buf = BufWriter::new(file);
        write(&mut buf)?;
        let file = buf.into_inner().map_err(|e| IoError::Io {
            path: tmp.clone(),
            source: e.into_error(),
        })?;
        file.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Writes raw bytes or text atomically, gzip-compressed when the name ends
/// in `.gz`.
pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        if is_gz(path) {
            let mut enc = GzEncoder::new(w, Compression::default());
            enc.write_all(bytes).map_err(io_err(path))?;
            enc.finish().map_err(io_err(path))?;
        } else {
            w.write_all(bytes).map_err(io_err(path))?;
        }
        Ok(())
    })
}

/// Saves a dataset in the layout implied by the extension (line-delimited
/// JSON when unknown), gzip-compressed when the name ends in `.gz`.
pub fn save_dataset(ds: &ScoreDataset, path: &Path) -> Result<(), IoError> {
    let format = Format::from_path(path).unwrap_or(Format::Jsonl);
    write_atomic(path, |w| {
        let body = |w: &mut dyn Write| match format {
            Format::Jsonl => write_jsonl(ds, w),
            Format::Tsv => write_tsv(ds, w),
        };
        if is_gz(path) {
            let mut enc = GzEncoder::new(w, Compression::fast());
            body(&mut enc)?;
            enc.finish().map_err(io_err(path))?;
            Ok(())
        } else {
            body(w)
        }
    })
}

/// Reads a JSON document, gzip-compressed or not.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let mut text = String::new();
    open_reader(path)?
        .read_to_string(&mut text)
        .map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes pretty-printed JSON atomically.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    save_bytes(path, text.as_bytes())
}
