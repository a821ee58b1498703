//! File formats: dense matrices (CSV and raw binary), edge lists, and the
//! experiment results table.

use crate::error::{Result, RgspError};
use nalgebra::DMatrix;
use std::io::{BufRead, BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

/// Write a matrix as CSV: a `n_rows,n_cols` dimension line followed by one
/// row-major line per row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{},{}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a matrix written by `write_matrix_csv`. A literal `n_rows,n_cols`
/// label line before the dimension line is tolerated.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let mut first = lines
        .next()
        .ok_or_else(|| RgspError::Parse(format!("{}: empty matrix file", path.display())))??;
    if first.trim().eq_ignore_ascii_case("n_rows,n_cols") {
        first = lines
            .next()
            .ok_or_else(|| RgspError::Parse(format!("{}: missing dimension line", path.display())))??;
    }
    let dims: Vec<&str> = first.trim().split(',').collect();
    if dims.len() != 2 {
        return Err(RgspError::Parse(format!("{}: bad dimension line {first:?}", path.display())));
    }
    let nr: usize = dims[0].trim().parse().map_err(|_| RgspError::Parse(format!("bad n_rows {:?}", dims[0])))?;
    let nc: usize = dims[1].trim().parse().map_err(|_| RgspError::Parse(format!("bad n_cols {:?}", dims[1])))?;
    let mut m = DMatrix::zeros(nr, nc);
    for i in 0..nr {
        let line = lines
            .next()
            .ok_or_else(|| RgspError::Parse(format!("{}: expected {nr} data rows, got {i}", path.display())))??;
        let vals: Vec<&str> = line.trim().split(',').collect();
        if vals.len() != nc {
            return Err(RgspError::Parse(format!("{}: row {i} has {} values, expected {nc}", path.display(), vals.len())));
        }
        for (j, v) in vals.iter().enumerate() {
            m[(i, j)] = v.trim().parse().map_err(|_| RgspError::Parse(format!("row {i}: bad value {v:?}")))?;
        }
    }
    Ok(m)
}

/// Write a matrix as little-endian binary: u64 n_rows, u64 n_cols, then
/// row-major f64 values.
pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a matrix written by `write_matrix_bin`.
pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let mut f = std::fs::File::open(path)?;
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let nr = u64::from_le_bytes(buf8) as usize;
    f.read_exact(&mut buf8)?;
    let nc = u64::from_le_bytes(buf8) as usize;
    let mut data = vec![0u8; nr.checked_mul(nc).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
        RgspError::Parse(format!("{}: dimension overflow {nr}x{nc}", path.display()))
    })?];
    f.read_exact(&mut data)?;
    let mut m = DMatrix::zeros(nr, nc);
    for i in 0..nr {
        for j in 0..nc {
            let off = (i * nc + j) * 8;
            m[(i, j)] = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
        }
    }
    Ok(m)
}

/// Write edges as whitespace-separated `i j w` lines.
pub fn write_edges(path: &Path, edges: &[(usize, usize, f64)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for &(i, j, wt) in edges {
        writeln!(w, "{i} {j} {wt}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read `i j [w]` lines; missing weights default to 1, `#` comments and blank
/// lines are skipped.
pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(RgspError::Parse(format!("{}:{}: expected 'i j [w]'", path.display(), lineno + 1)));
        }
        let i: usize = parts[0].parse().map_err(|_| RgspError::Parse(format!("line {}: bad node {:?}", lineno + 1, parts[0])))?;
        let j: usize = parts[1].parse().map_err(|_| RgspError::Parse(format!("line {}: bad node {:?}", lineno + 1, parts[1])))?;
        let w: f64 = match parts.get(2) {
            Some(s) => s.parse().map_err(|_| RgspError::Parse(format!("line {}: bad weight {s:?}", lineno + 1)))?,
            None => 1.0,
        };
        out.push((i, j, w));
    }
    Ok(out)
}

/// One measurement from an experiment run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub sweep: usize,
    pub trial: usize,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
    /// Empty on success; the error message when the trial failed.
    pub error: String,
}

/// Write results with the stable header `sweep,trial,metric,value,seconds,error`.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RgspError::Io(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| RgspError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RgspError::Io(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(|e| RgspError::Parse(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = dmatrix![1.5, -2.0, 3.25; 0.0, 1e-9, 7.0];
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        // labelled header line is accepted too
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, format!("n_rows,n_cols\n{text}")).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
    }

    #[test]
    fn matrix_bin_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = dmatrix![1.0, 2.0; 3.0, f64::MIN_POSITIVE; -0.5, 1e300];
        write_matrix_bin(&p, &m).unwrap();
        assert_eq!(read_matrix_bin(&p).unwrap(), m);
    }

    #[test]
    fn edges_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        std::fs::write(&p, "# header\n0 1 2.5\n\n1 2\n").unwrap();
        assert_eq!(read_edges(&p).unwrap(), vec![(0, 1, 2.5), (1, 2, 1.0)]);
        write_edges(&p, &[(3, 4, 0.5)]).unwrap();
        assert_eq!(read_edges(&p).unwrap(), vec![(3, 4, 0.5)]);
    }

    #[test]
    fn results_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            ResultRow { sweep: 0, trial: 1, metric: "nerr".into(), value: 0.25, seconds: 0.1, error: String::new() },
            ResultRow { sweep: 1, trial: 0, metric: "nerr".into(), value: f64::NAN, seconds: 0.0, error: "boom".into() },
        ];
        write_results_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("sweep,trial,metric,value,seconds,error\n"));
        let back = read_results_csv(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].value.is_nan());
        assert_eq!(back[1].error, "boom");
    }
}
