//! Matrix CSV and JSON-lines persistence.
//!
//! CSV: header `c0,c1,...`, LF endings, shortest-round-trip float
//! formatting, so write -> read is lossless and byte-deterministic.
//! JSONL: one record per line; readers tolerate truncated or malformed
//! trailing lines and report them as warnings.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn write_matrix_csv(matrix: &Tensor, path: &Path) -> Result<()> {
    if matrix.shape().len() != 2 {
        return Err(Error::Config(format!(
            "CSV writer needs a 2-D matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
    w.write_all(header.join(",").as_bytes())?;
    w.write_all(b"\n")?;
    let mut line = String::new();
    for i in 0..rows {
        line.clear();
        for j in 0..cols {
            if j > 0 {
                line.push(',');
            }
            // shortest round-trip representation: lossless on re-parse
            line.push_str(&format!("{}", matrix.at(i, j)));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let cols = header.split(',').count();
    if cols == 0 || header.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty header".into(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("ragged row: {} cells, expected {}", cells.len(), cols),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols], data)
}

/// Serialize one value as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(body.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Append-only JSON-lines writer; each record becomes one flushed line.
pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            inner: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            inner: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
        self.inner.write_all(line.as_bytes())?;
        self.inner.write_all(b"\n")?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

/// Read records, skipping malformed lines; returns the records and the
/// number of skipped lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut warnings = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => out.push(r),
            Err(_) => warnings += 1,
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::Deserialize;

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Tensor::zeros(&[17, 3]);
        for v in m.data_mut() {
            *v = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..12));
        }
        write_matrix_csv(&m, &path).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(m.shape(), back.shape());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // write -> read -> write yields identical bytes
        let path2 = dir.path().join("m2.csv");
        write_matrix_csv(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn csv_one_by_one_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        let m = Tensor::new(vec![1, 1], vec![-0.5]).unwrap();
        write_matrix_csv(&m, &path).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(back.shape(), &[1, 1]);
        assert_eq!(back.data()[0], -0.5);
    }

    #[test]
    fn csv_ragged_row_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "c0,c1\n1,2\n3,4\n5,6\n7\n8,9\n").unwrap();
        match read_matrix_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_non_numeric_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.csv");
        std::fs::write(&path, "c0\n1\nxyz\n").unwrap();
        match read_matrix_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            read_matrix_csv(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        iter: u64,
        value: f64,
        tags: Vec<String>,
    }

    fn recs() -> Vec<Rec> {
        (0..5)
            .map(|i| Rec {
                iter: i,
                value: i as f64 * 0.1,
                tags: vec![format!("t{i}")],
            })
            .collect()
    }

    #[test]
    fn jsonl_roundtrip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_jsonl(&recs(), &path).unwrap();
        let (back, warnings): (Vec<Rec>, usize) = read_jsonl(&path).unwrap();
        assert_eq!(back, recs());
        assert_eq!(warnings, 0);
    }

    #[test]
    fn jsonl_truncated_final_line_recovers_prior_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_jsonl(&recs(), &path).unwrap();
        // chop the file mid-way through the last line
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, bytes).unwrap();
        let (back, warnings): (Vec<Rec>, usize) = read_jsonl(&path).unwrap();
        assert_eq!(back, recs()[..4]);
        assert_eq!(warnings, 1);
    }

    #[test]
    fn jsonl_empty_file_is_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "").unwrap();
        let (back, warnings): (Vec<Rec>, usize) = read_jsonl(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(warnings, 0);
    }

    #[test]
    fn jsonl_append_extends_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_jsonl(&recs()[..2], &path).unwrap();
        let mut w = JsonlWriter::append(&path).unwrap();
        for r in &recs()[2..] {
            w.write(r).unwrap();
        }
        drop(w);
        let (back, _): (Vec<Rec>, usize) = read_jsonl(&path).unwrap();
        assert_eq!(back, recs());
    }
}
