//! ESRI ASCII grid reader/writer.

use std::fmt::Write as _;

use thiserror::Error;

pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("ascii grid header: {0}")]
    Header(String),
    #[error("ascii grid body: expected {expected} values, got {found}")]
    Body { expected: usize, found: usize },
    #[error("ascii grid value '{0}' is not a number")]
    Value(String),
}

/// Row-major grid; row 0 is the northernmost row.
#[derive(Debug, Clone, PartialEq)]
pub struct AsciiGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    pub values: Vec<f64>,
}

impl AsciiGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    /// Serializes with fixed `decimals` so output is byte-stable.
    pub fn to_text(&self, decimals: usize) -> String {
        let mut out = String::with_capacity(self.values.len() * (decimals + 4) + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xllcorner);
        let _ = writeln!(out, "yllcorner {}", self.yllcorner);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "nodata_value {}", self.nodata_value);
        for row in self.values.chunks(self.ncols.max(1)) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{:.*}", decimals, v);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RasterError> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String, RasterError> {
            let line = lines
                .next()
                .ok_or_else(|| RasterError::Header(format!("missing {key}")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some(k), Some(v)) if k.eq_ignore_ascii_case(key) => Ok(v.to_string()),
                _ => Err(RasterError::Header(format!(
                    "expected '{key}', got '{line}'"
                ))),
            }
        };
        let int = |s: String| s.parse::<usize>().map_err(|_| RasterError::Header(s));
        let float = |s: String| s.parse::<f64>().map_err(|_| RasterError::Header(s));
        let ncols = int(header("ncols")?)?;
        let nrows = int(header("nrows")?)?;
        let xllcorner = float(header("xllcorner")?)?;
        let yllcorner = float(header("yllcorner")?)?;
        let cellsize = float(header("cellsize")?)?;
        let nodata_value = float(header("nodata_value")?)?;
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>().map_err(|_| RasterError::Value(t.into())))
            .collect::<Result<_, _>>()?;
        if values.len() != ncols * nrows {
            return Err(RasterError::Body {
                expected: ncols * nrows,
                found: values.len(),
            });
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata_value,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let g = AsciiGrid {
            ncols: 3,
            nrows: 2,
            xllcorner: -1.5,
            yllcorner: 2.0,
            cellsize: 0.5,
            nodata_value: DEFAULT_NODATA,
            values: vec![1.0, 2.5, -9999.0, 0.0, 4.0, 5.0],
        };
        let text = g.to_text(3);
        assert!(text.starts_with("ncols 3\nnrows 2\nxllcorner -1.5\nyllcorner 2\ncellsize 0.5\nnodata_value -9999\n1.000 2.500 -9999.000\n"));
        assert_eq!(AsciiGrid::parse(&text).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            AsciiGrid::parse("ncols 2\n"),
            Err(RasterError::Header(_))
        ));
        let t = "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1\n";
        assert_eq!(
            AsciiGrid::parse(t),
            Err(RasterError::Body {
                expected: 2,
                found: 1
            })
        );
    }
}
