//! Plain-text matrix format: a `rows cols` header line followed by one line
//! of space-separated numbers per row, written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

impl Matrix {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "{} {}", self.rows(), self.cols());
        for i in 0..self.rows() {
            let line: Vec<String> = self.row(i).iter().map(|v| format_f64(*v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }

    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let m = parse_block(&mut lines)?;
        if let Some((no, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse_line(no, format!("unexpected trailing content {l:?}")));
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Matrix> {
        Matrix::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// `%.16e`: seventeen significant digits, enough for an exact round trip.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parses one matrix block from a line iterator of `(line_number, text)`,
/// skipping blank lines before the header.
pub(crate) fn parse_block<'a>(
    lines: &mut impl Iterator<Item = (u64, &'a str)>,
) -> Result<Matrix> {
    let (hno, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse_line(0, "missing matrix header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::parse_line(hno, "header must be \"rows cols\""));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse_line(hno, format!("bad dimension {s:?}")))
    };
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::parse_line(hno + r as u64 + 1, "unexpected end of matrix"))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse_line(no, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse_line(no, format!("non-finite entry {tok:?}")));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::parse_line(
                no,
                format!("expected {cols} entries, found {}", data.len() - before),
            ));
        }
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Matrix::from_rows(&[[0.1, -1.0 / 3.0, 1e-300], [std::f64::consts::PI, 0.0, -7.5e12]])
            .unwrap();
        let back = Matrix::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn reports_line_of_bad_cell() {
        let err = Matrix::from_text("2 2\n1 2\n3 x\n").unwrap_err();
        match err {
            Error::Parse { at, .. } => assert_eq!(at, crate::error::Position::Line(3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Matrix::from_text("2 2\n1 2\n").is_err());
        assert!(Matrix::from_text("2 2\n1 2 3\n4 5\n").is_err());
        assert!(Matrix::from_text("1 1\n5\n9 9\n").is_err());
    }

    #[test]
    fn empty_matrix() {
        let m = Matrix::zeros(0, 3);
        assert_eq!(Matrix::from_text(&m.to_text()).unwrap().shape(), (0, 3));
    }
}
