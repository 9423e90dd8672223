//! Numeric CSV files: optional header row, `NA`/empty cells read as NaN,
//! shortest round-trip number formatting on output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

fn parse_cell(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    t.parse().ok()
}

/// Reads a rectangular numeric table. The first row is taken as a header
/// when any of its cells is not a number.
pub fn read_table(path: &Path, flag: &str) -> Result<Table, CliError> {
    let ctx = |msg: String| CliError::validation(format!("{flag} {}: {msg}", path.display()));
    let file = File::open(path).map_err(|e| ctx(e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ctx(e.to_string()))?;
        let parsed: Vec<Option<f64>> = rec.iter().map(parse_cell).collect();
        if parsed.iter().any(Option::is_none) {
            if line == 0 {
                header = Some(rec.iter().map(str::to_string).collect());
                continue;
            }
            let col = parsed.iter().position(Option::is_none).unwrap();
            return Err(ctx(format!("row {}, column {}: `{}` is not a number", line + 1, col + 1, &rec[col])));
        }
        rows.push(parsed.into_iter().map(Option::unwrap).collect());
    }
    if rows.is_empty() {
        return Err(ctx("no data rows".into()));
    }
    let cols = rows[0].len();
    if let Some(r) = rows.iter().position(|r| r.len() != cols) {
        return Err(ctx(format!("row {} has {} columns, expected {cols}", r + 1, rows[r].len())));
    }
    Ok(Table {
        header,
        values: DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]),
    })
}

pub fn read_matrix(path: &Path, flag: &str) -> Result<DMatrix<f64>, CliError> {
    Ok(read_table(path, flag)?.values)
}

/// Shortest representation that parses back to the same value.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let a = v.abs();
    if (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn write_matrix(path: &Path, values: &DMatrix<f64>, header: Option<&[String]>) -> Result<(), CliError> {
    let ctx = |e: std::io::Error| CliError::io(format!("--out {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(ctx)?);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(",")).map_err(ctx)?;
    }
    let mut line = String::new();
    for i in 0..values.nrows() {
        line.clear();
        for j in 0..values.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format_number(values[(i, j)]));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(ctx)?;
    }
    w.flush().map_err(ctx)
}

pub fn write_text(path: &Path, flag: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{flag} {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e20, 123456.0, 5e-324, f64::MAX, -7.0] {
            let s = format_number(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_number(3.0), "3");
        assert_eq!(format_number(0.25), "0.25");
    }

    #[test]
    fn header_detected_and_na_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "a,b\n1,NA\n3, 4\n").unwrap();
        let t = read_table(&p, "--base").unwrap();
        assert_eq!(t.header.unwrap(), ["a", "b"]);
        assert!(t.values[(0, 1)].is_nan());
        assert_eq!(t.values[(1, 1)], 4.0);
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        let e = read_table(&p, "--base").unwrap_err();
        assert!(e.message.contains("--base") && e.message.contains("row 2, column 2"), "{}", e.message);
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_table(&p, "--base").is_err());
    }
}
