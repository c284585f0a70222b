//! CSV index files and the two feature-file encodings they reference.
//!
//! The index has the header `id,path,label,patient_id,split`. `path` is
//! relative to the index file's directory. `label` may be empty only on
//! rows whose split is `unlabeled`. `split` is one of `train`, `val`,
//! `test`, `unlabeled`, or empty.
//!
//! Feature files ending in `.pgm` are 8-bit PGM images (`P5` binary or `P2`
//! ASCII) flattened row-major and scaled to `[0, 1]` by the image maxval.
//! Anything else is a raw vector: a little-endian `u64` element count
//! followed by that many little-endian `f64` values.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, LabeledSample, UnlabeledSample};

const HEADER: [&str; 5] = ["id", "path", "label", "patient_id", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    #[serde(rename = "val")]
    Validation,
    Test,
    Unlabeled,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "val",
            Partition::Test => "test",
            Partition::Unlabeled => "unlabeled",
        }
    }

    fn parse(s: &str) -> Option<Option<Self>> {
        Some(Some(match s {
            "" => return Some(None),
            "train" => Partition::Train,
            "val" | "validation" => Partition::Validation,
            "test" => Partition::Test,
            "unlabeled" => Partition::Unlabeled,
            _ => return None,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub id: String,
    /// As written in the index, relative to its directory.
    pub path: PathBuf,
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub patient_id: String,
    pub partition: Option<Partition>,
}

impl IndexRecord {
    pub fn labeled(&self) -> Option<LabeledSample> {
        Some(LabeledSample {
            id: self.id.clone(),
            features: self.features.clone(),
            label: self.label?,
            patient_id: self.patient_id.clone(),
        })
    }

    pub fn unlabeled(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id.clone(),
            features: self.features.clone(),
            patient_id: self.patient_id.clone(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    if source.kind() == std::io::ErrorKind::NotFound {
        DataError::MissingFile(path.to_path_buf())
    } else {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Reads an index and every feature file it references. `classes` bounds
/// the accepted labels (2 for binary data).
pub fn load_index(path: &Path, classes: usize) -> Result<Vec<IndexRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader.headers().map_err(|e| DataError::MalformedRow {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: format!("expected header {}", HEADER.join(",")),
        });
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for row in reader.records() {
        let row = row.map_err(|e| DataError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let malformed = |reason: String| DataError::MalformedRow { line, reason };
        if row.len() != HEADER.len() {
            return Err(malformed(format!("expected {} fields, found {}", HEADER.len(), row.len())));
        }
        let (id, rel, label, patient, split) = (&row[0], &row[1], &row[2], &row[3], &row[4]);
        if id.is_empty() || rel.is_empty() || patient.is_empty() {
            return Err(malformed("id, path and patient_id must be non-empty".into()));
        }
        let partition =
            Partition::parse(split).ok_or_else(|| malformed(format!("unknown split {split:?}")))?;
        let label = if label.is_empty() {
            if partition != Some(Partition::Unlabeled) {
                return Err(malformed("label may only be empty on unlabeled rows".into()));
            }
            None
        } else {
            let value: i64 = label
                .parse()
                .map_err(|_| malformed(format!("label {label:?} is not an integer")))?;
            if value < 0 || value as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    line,
                    label: value,
                    classes,
                });
            }
            Some(value as usize)
        };
        if !seen.insert(id.to_string()) {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        let features = read_feature_file(&base.join(rel))?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(DataError::FeatureDim {
                    id: id.to_string(),
                    expected: d,
                    found: features.len(),
                })
            }
            _ => {}
        }
        out.push(IndexRecord {
            id: id.to_string(),
            path: PathBuf::from(rel),
            features,
            label,
            patient_id: patient.to_string(),
            partition,
        });
    }
    Ok(out)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<f64>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |reason: String| DataError::FeatureFile {
        path: path.to_path_buf(),
        reason,
    };
    let features = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        parse_pgm(&bytes).map_err(bad)?
    } else {
        parse_raw(&bytes).map_err(bad)?
    };
    if features.iter().any(|v| !v.is_finite()) {
        return Err(DataError::FeatureFile {
            path: path.to_path_buf(),
            reason: "non-finite feature value".into(),
        });
    }
    Ok(features)
}

fn parse_raw(bytes: &[u8]) -> Result<Vec<f64>, String> {
    let count_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or("missing length prefix")?
        .try_into()
        .unwrap();
    let count = u64::from_le_bytes(count_bytes) as usize;
    let body = &bytes[8..];
    if count == 0 || body.len() != count.saturating_mul(8) {
        return Err(format!(
            "length prefix says {count} values but {} payload bytes follow",
            body.len()
        ));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn parse_pgm(bytes: &[u8]) -> Result<Vec<f64>, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PGM header value {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM geometry {width}x{height} maxval {maxval}"));
    }
    let n = width * height;
    let scale = maxval as f64;
    match magic.as_str() {
        "P5" => {
            // exactly one whitespace byte separates the header from the raster
            let body = bytes.get(pos + 1..).unwrap_or(&[]);
            if body.len() != n {
                return Err(format!("expected {n} raster bytes, found {}", body.len()));
            }
            Ok(body.iter().map(|&b| b as f64 / scale).collect())
        }
        "P2" => {
            let mut tok = token;
            (0..n)
                .map(|_| {
                    let v = num(tok()?)?;
                    if v > maxval {
                        return Err(format!("pixel {v} exceeds maxval {maxval}"));
                    }
                    Ok(v as f64 / scale)
                })
                .collect()
        }
        other => Err(format!("unsupported PGM magic {other:?}")),
    }
}

pub fn write_raw_features(path: &Path, features: &[f64]) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(8 + features.len() * 8);
    buf.extend_from_slice(&(features.len() as u64).to_le_bytes());
    for v in features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Writes `index.csv` into `dir` and every record's features to
/// `dir/record.path` as a raw vector. Returns the index path.
pub fn write_index(dir: &Path, records: &[IndexRecord]) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let index_path = dir.join("index.csv");
    let mut out = Vec::new();
    writeln!(out, "{}", HEADER.join(",")).expect("write to vec");
    for r in records {
        write_raw_features(&dir.join(&r.path), &r.features)?;
        writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.path.display(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            r.patient_id,
            r.partition.map_or("", Partition::as_str)
        )
        .expect("write to vec");
    }
    fs::write(&index_path, out).map_err(|e| io_err(&index_path, e))?;
    Ok(index_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_index_text(dir: &Path, rows: &[&str]) -> PathBuf {
        let path = dir.join("index.csv");
        let mut text = HEADER.join(",");
        for r in rows {
            text.push('\n');
            text.push_str(r);
        }
        fs::write(&path, text).unwrap();
        path
    }

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_raw_features(&dir.path().join("f/a.f64"), &[1.0, 2.0, 3.0]).unwrap();
        write_raw_features(&dir.path().join("f/b.f64"), &[0.5, -1.0, 4.0]).unwrap();
        fs::write(dir.path().join("f/c.pgm"), b"P5\n# comment\n3 1\n255\n\x00\x80\xff").unwrap();
        dir
    }

    #[test]
    fn loads_valid_index() {
        let dir = setup();
        let idx = write_index_text(
            dir.path(),
            &["a,f/a.f64,0,p1,train", "b,f/b.f64,1,p2,val", "c,f/c.pgm,,p3,unlabeled"],
        );
        let recs = load_index(&idx, 2).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].features, vec![1.0, 2.0, 3.0]);
        assert_eq!(recs[1].label, Some(1));
        assert_eq!(recs[1].partition, Some(Partition::Validation));
        assert_eq!(recs[2].label, None);
        assert_eq!(recs[2].features, vec![0.0, 128.0 / 255.0, 1.0]);
        assert!(recs[2].labeled().is_none());
    }

    #[test]
    fn label_out_of_range() {
        let dir = setup();
        let idx = write_index_text(dir.path(), &["a,f/a.f64,7,p1,train"]);
        assert!(matches!(
            load_index(&idx, 2),
            Err(DataError::LabelOutOfRange { label: 7, .. })
        ));
    }

    #[test]
    fn duplicate_id() {
        let dir = setup();
        let idx = write_index_text(dir.path(), &["a,f/a.f64,0,p1,train", "a,f/b.f64,1,p2,train"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn missing_files_and_malformed_rows() {
        let dir = setup();
        assert!(matches!(
            load_index(&dir.path().join("nope.csv"), 2),
            Err(DataError::MissingFile(_))
        ));
        let idx = write_index_text(dir.path(), &["a,f/missing.f64,0,p1,train"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::MissingFile(_))));
        let idx = write_index_text(dir.path(), &["a,f/a.f64,zero,p1,train"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::MalformedRow { .. })));
        let idx = write_index_text(dir.path(), &["a,f/a.f64,0,p1"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::MalformedRow { .. })));
        let idx = write_index_text(dir.path(), &["a,f/a.f64,,p1,train"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::MalformedRow { .. })));
        let idx = write_index_text(dir.path(), &["a,f/a.f64,0,p1,holdout"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::MalformedRow { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let dir = setup();
        let idx = write_index_text(dir.path(), &["a,f/a.f64,0,p1,train", "c,f/c.pgm,1,p2,train"]);
        // both have three values, so this loads
        assert_eq!(load_index(&idx, 2).unwrap().len(), 2);
        write_raw_features(&dir.path().join("f/d.f64"), &[1.0]).unwrap();
        let idx = write_index_text(dir.path(), &["a,f/a.f64,0,p1,train", "d,f/d.f64,1,p2,train"]);
        assert!(matches!(load_index(&idx, 2), Err(DataError::FeatureDim { .. })));
    }

    #[test]
    fn corrupt_feature_files() {
        let dir = setup();
        let p = dir.path().join("bad.f64");
        fs::write(&p, [3u8, 0, 0, 0, 0, 0, 0, 0, 1, 2]).unwrap();
        assert!(matches!(read_feature_file(&p), Err(DataError::FeatureFile { .. })));
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P5 2 2 255\n\x00").unwrap();
        assert!(matches!(read_feature_file(&p), Err(DataError::FeatureFile { .. })));
        let p = dir.path().join("ascii.pgm");
        fs::write(&p, b"P2\n2 1\n10\n0 10\n").unwrap();
        assert_eq!(read_feature_file(&p).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            IndexRecord {
                id: "x".into(),
                path: "features/x.f64".into(),
                features: vec![0.25, -3.5],
                label: Some(1),
                patient_id: "p".into(),
                partition: Some(Partition::Test),
            },
            IndexRecord {
                id: "y".into(),
                path: "features/y.f64".into(),
                features: vec![1e-300, 7.0],
                label: None,
                patient_id: "q".into(),
                partition: Some(Partition::Unlabeled),
            },
        ];
        let idx = write_index(dir.path(), &recs).unwrap();
        assert_eq!(load_index(&idx, 2).unwrap(), recs);
    }
}
