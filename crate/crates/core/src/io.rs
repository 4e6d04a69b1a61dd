//! CSV readers and writers for datasets and feature groupings.
//!
//! Datasets use a header `y,x1,...,xp` followed by one numeric record per
//! observation. Group files use `feature,category`, where `feature` is a
//! 1-based column index or its `xj` name.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::evaluation::GroupMap;
use crate::model::Dataset;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).comment(Some(b'#')).from_reader(r)
}

fn line_of(rec: &csv::StringRecord, fallback: usize) -> u64 {
    rec.position().map_or(fallback as u64, |p| p.line())
}

fn csv_error(name: &str, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse(format!("{name}: line {}: {e}", p.line())),
        None => Error::Parse(format!("{name}: {e}")),
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(open(path)?, &path.display().to_string())
}

/// Parses a dataset; `name` labels error messages.
pub fn read_dataset_from<R: Read>(r: R, name: &str) -> Result<Dataset> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers().map_err(|e| csv_error(name, e))?.clone();
    if header.is_empty() || header.get(0) != Some("y") {
        return Err(Error::Parse(format!(
            "{name}: line 1, column 1: expected 'y', found '{}'",
            header.get(0).unwrap_or("")
        )));
    }
    if header.len() < 2 {
        return Err(Error::Parse(format!("{name}: line 1: no feature columns after 'y'")));
    }
    for (j, h) in header.iter().enumerate().skip(1) {
        let want = format!("x{j}");
        if h != want {
            return Err(Error::Parse(format!(
                "{name}: line 1, column {}: expected '{want}', found '{h}'",
                j + 1
            )));
        }
    }
    let p = header.len() - 1;
    let mut y = Vec::new();
    let mut xs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        let line = line_of(&rec, i + 2);
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "{name}: line {line}, column {} ('{}'): invalid number '{field}'",
                    j + 1,
                    &header[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{name}: line {line}, column {} ('{}'): non-finite value",
                    j + 1,
                    &header[j]
                )));
            }
            if j == 0 {
                y.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset(name.to_string()));
    }
    Dataset::new(DMatrix::from_row_slice(y.len(), p, &xs), DVector::from_vec(y))
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_dataset_to(f, d)
}

pub fn write_dataset_to<W: Write>(w: W, d: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let header = std::iter::once("y".to_string()).chain((1..=d.p()).map(|j| format!("x{j}")));
    wtr.write_record(header).map_err(io)?;
    for i in 0..d.n() {
        let xi = d.x().row(i);
        let row = std::iter::once(d.y()[i]).chain(xi.iter().copied()).map(|v| format!("{v:?}"));
        wtr.write_record(row).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn read_groups(path: &Path, p: usize) -> Result<GroupMap> {
    read_groups_from(open(path)?, &path.display().to_string(), p)
}

/// Parses a `feature,category` table covering features `1..=p`.
pub fn read_groups_from<R: Read>(r: R, name: &str, p: usize) -> Result<GroupMap> {
    let mut rdr = csv_reader(r);
    let mut labels: Vec<Option<String>> = vec![None; p];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        let line = line_of(&rec, i + 2);
        if rec.len() != 2 {
            return Err(Error::Parse(format!("{name}: line {line}: expected 2 fields, found {}", rec.len())));
        }
        let f = &rec[0];
        let j: usize = f
            .strip_prefix('x')
            .unwrap_or(f)
            .parse()
            .map_err(|_| Error::Parse(format!("{name}: line {line}, column 1: invalid feature '{f}'")))?;
        if j == 0 || j > p {
            return Err(Error::Parse(format!("{name}: line {line}, column 1: feature {j} outside 1..={p}")));
        }
        labels[j - 1] = Some(rec[1].to_string());
    }
    let assignment = labels
        .into_iter()
        .enumerate()
        .map(|(j, l)| l.ok_or(Error::MissingCategory(j + 1)))
        .collect::<Result<Vec<_>>>()?;
    GroupMap::new(assignment, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let d = Dataset::from_rows(&[vec![1.5, -2.0], vec![0.1, 3.0]], vec![0.3, -7.25]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y,x1,x2\n"));
        assert_eq!(read_dataset_from(buf.as_slice(), "mem").unwrap(), d);
    }

    #[test]
    fn bad_header_names_column() {
        let e = read_dataset_from("y,x1,z\n1,2,3\n".as_bytes(), "t.csv").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("t.csv") && msg.contains("column 3") && msg.contains("'z'"), "{msg}");
        let e = read_dataset_from("x1,y\n1,2\n".as_bytes(), "t.csv").unwrap_err();
        assert!(e.to_string().contains("column 1"));
    }

    #[test]
    fn bad_value_names_line_and_column() {
        let e = read_dataset_from("y,x1\n1,2\n3,abc\n".as_bytes(), "d.csv").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("d.csv: line 3, column 2 ('x1')"), "{msg}");
        assert!(read_dataset_from("y,x1\n1,2,3\n".as_bytes(), "d.csv").is_err());
        assert!(read_dataset_from("y,x1\n1,NaN\n".as_bytes(), "d.csv").is_err());
        assert!(matches!(read_dataset_from("y,x1\n".as_bytes(), "d.csv"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn groups_by_index_or_name() {
        let g = read_groups_from("feature,category\n1,a\nx2,b\n3,a\n".as_bytes(), "g", 3).unwrap();
        assert_eq!(g.categories(), vec!["a", "b"]);
        assert_eq!(g.label(1), "b");
        let e = read_groups_from("feature,category\n1,a\n".as_bytes(), "g", 2).unwrap_err();
        assert!(matches!(e, Error::MissingCategory(2)));
        assert!(read_groups_from("feature,category\n5,a\n".as_bytes(), "g", 2).is_err());
    }
}
