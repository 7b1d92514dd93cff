use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::write_atomic;
use crate::clustering::DatasetSplit;
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Samples in file order, with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor2D,
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    /// `n`, `d` as little-endian u64, then `n·d` little-endian f64.
    Raw,
}

impl Format {
    /// `.bin` and `.raw` are raw binary; anything else is csv.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "raw") => Format::Raw,
            _ => Format::Csv,
        }
    }
}

fn parse_value(field: &str, line: usize, col: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column {} is not a number: `{}`", col + 1, field.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("column {} is not finite: `{}`", col + 1, field.trim()),
        });
    }
    Ok(v)
}

/// Header row, then one sample per line. A last header column named `label`
/// marks an integer label column.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let labelled = names.last() == Some(&"label");
    let width = names.len() - usize::from(labelled);
    if width == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "header names no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        for (c, f) in fields[..width].iter().enumerate() {
            data.push(parse_value(f, line_no, c)?);
        }
        if labelled {
            labels.push(fields[width].trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("label `{}` is not a non-negative integer", fields[width].trim()),
            })?);
        }
    }
    let rows = data.len() / width;
    Ok(Dataset {
        x: Tensor2D::from_vec(rows, width, data)?,
        labels: labelled.then_some(labels),
    })
}

/// Inverse of [`parse_csv`]; values carry 17 significant digits.
pub fn to_csv(ds: &Dataset) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..ds.x.cols()).map(|i| format!("x{i}")).collect();
    s.push_str(&header.join(","));
    if ds.labels.is_some() {
        s.push_str(",label");
    }
    s.push('\n');
    for (r, row) in ds.x.iter_rows().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{v:.16e}").expect("string write");
        }
        if let Some(l) = &ds.labels {
            write!(s, ",{}", l[r]).expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn parse_raw(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 {
        return Err(Error::Parse {
            line: 1,
            msg: "raw header needs 16 bytes".into(),
        });
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if n.checked_mul(d).and_then(|v| v.checked_mul(8)) != Some(body.len()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header says {n}x{d} but the payload has {} bytes", body.len()),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, c) in body.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        if !v.is_finite() {
            // Sample rows count as lines 1..=n.
            return Err(Error::Parse {
                line: i / d.max(1) + 1,
                msg: format!("value {} is not finite", i % d.max(1) + 1),
            });
        }
        data.push(v);
    }
    Ok(Dataset {
        x: Tensor2D::from_vec(n, d, data)?,
        labels: None,
    })
}

pub fn to_raw(x: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + x.len() * 8);
    out.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn ingest(path: &Path, format: Format) -> Result<Dataset> {
    let ds = match format {
        Format::Csv => parse_csv(&std::fs::read_to_string(path)?)?,
        Format::Raw => parse_raw(&std::fs::read(path)?)?,
    };
    if ds.x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &Dataset, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_atomic(path, to_csv(ds).as_bytes()),
        Format::Raw => write_atomic(path, &to_raw(&ds.x)),
    }
}

/// `sample_id<TAB>cluster` lines.
pub fn split_to_text(split: &DatasetSplit, ids: &[String]) -> String {
    let mut s = String::new();
    for (i, label) in split.labels().iter().enumerate() {
        writeln!(s, "{}\t{label}", ids[i]).expect("string write");
    }
    s
}

/// Reads a split file; sample ids must be the row indices `0..n` in order.
pub fn parse_split(text: &str, k: usize) -> Result<DatasetSplit> {
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let (id, cluster) = line.split_once('\t').ok_or_else(|| err("expected `sample_id<TAB>cluster`".into()))?;
        if id.trim() != labels.len().to_string() {
            return Err(err(format!("expected sample id {}, found `{}`", labels.len(), id.trim())));
        }
        let c: usize = cluster.trim().parse().map_err(|_| err(format!("cluster `{}` is not an index", cluster.trim())))?;
        if c >= k {
            return Err(err(format!("cluster {c} is outside [0, {k})")));
        }
        labels.push(c);
    }
    crate::clustering::split_dataset(&labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let x = Tensor2D::from_rows(&[[0.1, -1.0 / 3.0, 1e-300], [std::f64::consts::PI, 2.0, -0.0]]).unwrap();
        let ds = Dataset { x, labels: Some(vec![3, 0]) };
        assert_eq!(parse_csv(&to_csv(&ds)).unwrap(), ds);
        let unlabelled = Dataset { labels: None, ..ds };
        assert_eq!(parse_csv(&to_csv(&unlabelled)).unwrap(), unlabelled);
    }

    #[test]
    fn short_rows_name_the_line() {
        let err = parse_csv("a,b,c\n1,2,3\n4,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn nan_is_rejected() {
        assert!(matches!(parse_csv("a,b\n1,NaN\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("a,b\n1,inf\n"), Err(Error::Parse { line: 2, .. })));
        let mut raw = to_raw(&Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        raw[16 + 3 * 8..16 + 4 * 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(parse_raw(&raw), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn raw_round_trip() {
        let x = Tensor2D::from_rows(&[[1.5, -2.0, 3.25]]).unwrap();
        assert_eq!(parse_raw(&to_raw(&x)).unwrap().x, x);
        assert!(parse_raw(&to_raw(&x)[..30]).is_err());
    }

    #[test]
    fn split_round_trip() {
        let split = crate::clustering::split_dataset(&[1, 0, 1, 2], 3).unwrap();
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let text = split_to_text(&split, &ids);
        assert_eq!(text, "0\t1\n1\t0\n2\t1\n3\t2\n");
        assert_eq!(parse_split(&text, 3).unwrap(), split);
        assert!(parse_split("0\t5\n", 3).is_err());
    }
}
