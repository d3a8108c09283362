//! Matrix Market coordinate-format export/import.

use crate::error::{Error, Result};
use crate::sparse::csr::CsrMatrix;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn write_matrix_market(path: &Path, a: &CsrMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(f, "{} {} {}", a.n_rows, a.n_cols, a.nnz())?;
    for r in 0..a.n_rows {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            writeln!(f, "{} {} {:.17e}", r + 1, c + 1, v)?;
        }
    }
    Ok(())
}

pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix market file".into()))??;
    if !header.starts_with("%%MatrixMarket matrix coordinate real") {
        return Err(Error::Parse(format!("unsupported header: {header}")));
    }
    let symmetric = header.contains("symmetric");
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        if dims.is_none() {
            let m: usize = parse_tok(it.next(), line)?;
            let n: usize = parse_tok(it.next(), line)?;
            let nnz: usize = parse_tok(it.next(), line)?;
            dims = Some((m, n, nnz));
            triplets.reserve(nnz);
            continue;
        }
        let r: usize = parse_tok(it.next(), line)?;
        let c: usize = parse_tok(it.next(), line)?;
        let v: f64 = parse_tok(it.next(), line)?;
        triplets.push((r - 1, c - 1, v));
        if symmetric && r != c {
            triplets.push((c - 1, r - 1, v));
        }
    }
    let (m, n, _) = dims.ok_or_else(|| Error::Parse("missing size line".into()))?;
    CsrMatrix::from_triplets(m, n, &triplets)
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, line: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Parse(format!("short line: {line}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad token in line: {line}")))
}
