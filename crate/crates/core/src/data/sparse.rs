//! Sparse bag-of-words text: `<label> <index>:<value> ...` per line,
//! 1-based indices, `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DomainDataset;

pub fn read_sparse_bow(path: &Path, dim: usize) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sparse_bow(&text, dim, path)
}

pub fn parse_sparse_bow(text: &str, dim: usize, path: &Path) -> Result<DomainDataset> {
    if dim == 0 {
        return Err(Error::invalid("sparse dimension must be positive"));
    }
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = match tokens.next().unwrap() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(line_no, format!("label `{other}` is not binary (0 or 1)"))),
        };
        let mut row = vec![0.0; dim];
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| err(line_no, format!("malformed token `{tok}`")))?;
            let index: usize = i
                .parse()
                .map_err(|_| err(line_no, format!("malformed index in `{tok}`")))?;
            let value: f64 = v
                .parse()
                .map_err(|_| err(line_no, format!("malformed value in `{tok}`")))?;
            if index == 0 || index > dim {
                return Err(err(line_no, format!("index {index} outside 1..={dim}")));
            }
            if !value.is_finite() {
                return Err(err(line_no, format!("non-finite value in `{tok}`")));
            }
            row[index - 1] = value;
        }
        data.extend(row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Empty(format!("{}: no samples", path.display())));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "sparse".to_string(), |s| s.to_string_lossy().into_owned());
    DomainDataset::new(Tensor::new(vec![labels.len(), dim], data)?, Some(labels), 2, 0, name)
}

/// Writes non-zero entries with shortest round-trip formatting.
pub fn write_sparse_bow(path: &Path, ds: &DomainDataset) -> Result<()> {
    let labels = ds.labels()?;
    if ds.classes > 2 {
        return Err(Error::invalid("sparse text format carries binary labels only"));
    }
    let mut out = String::new();
    for (i, &label) in labels.iter().enumerate() {
        write!(out, "{label}").unwrap();
        for (j, &v) in ds.features.row(i).iter().enumerate() {
            if v != 0.0 {
                write!(out, " {}:{v:?}", j + 1).unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, dim: usize) -> Result<DomainDataset> {
        parse_sparse_bow(text, dim, Path::new("mem.txt"))
    }

    #[test]
    fn grammar_examples() {
        let ds = parse("1 3:2.0\n", 5).unwrap();
        assert_eq!(ds.features.data(), &[0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(ds.labels().unwrap(), &[1]);

        let ds = parse("# header\n0\n1 1:0.5 # trailing\n", 3).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(ds.features.row(1), &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let e = parse("1 6:1.0\n", 5).unwrap_err().to_string();
        assert!(e.contains("index 6"), "{e}");
        assert!(parse("1 0:1.0\n", 5).is_err());
        assert!(parse("1 3-2.0\n", 5).is_err());
        assert!(parse("1 x:2.0\n", 5).is_err());
        let e = parse("2 1:1.0\n", 5).unwrap_err().to_string();
        assert!(e.contains("not binary"), "{e}");
        assert!(parse("# only comments\n", 5).is_err());
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        let f = Tensor::new(vec![2, 3], vec![0.1, 0.0, -3.25, 0.0, 0.0, 1e-7]).unwrap();
        let ds = DomainDataset::new(f, Some(vec![1, 0]), 2, 0, "x").unwrap();
        write_sparse_bow(&p, &ds).unwrap();
        let back = read_sparse_bow(&p, 3).unwrap();
        assert!(back.features.bitwise_eq(&ds.features));
        assert_eq!(back.class_labels, ds.class_labels);
    }
}
