//! File formats.
//!
//! Matrices are stored as one ASCII header line `romdot-matrix <rows> <cols> <real|complex>`
//! followed by the entries in column-major order as little-endian `f64`, with complex
//! entries written as consecutive real and imaginary parts. Images are binary 8-bit
//! PGM. Reports are CSV with a header row.

use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use romdot_core::forward::Grid;

use crate::error::{CliError, CliResult};

const MAGIC: &str = "romdot-matrix";

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixData {
    Real(DMatrix<f64>),
    Complex(DMatrix<Complex64>),
}

impl MatrixData {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixData::Real(m) => m.shape(),
            MatrixData::Complex(m) => m.shape(),
        }
    }
}

pub fn encode_matrix(m: &MatrixData) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let kind = match m {
        MatrixData::Real(_) => "real",
        MatrixData::Complex(_) => "complex",
    };
    let mut out = format!("{MAGIC} {rows} {cols} {kind}\n").into_bytes();
    match m {
        MatrixData::Real(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        MatrixData::Complex(a) => a.iter().for_each(|z| {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }),
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<MatrixData, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not text")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let [magic, rows, cols, kind] = parts[..] else {
        return Err(format!("header '{header}' should have four fields"));
    };
    if magic != MAGIC {
        return Err(format!("unexpected tag '{magic}'"));
    }
    let rows: usize = rows.parse().map_err(|_| format!("bad row count '{rows}'"))?;
    let cols: usize = cols.parse().map_err(|_| format!("bad column count '{cols}'"))?;
    let per = match kind {
        "real" => 1,
        "complex" => 2,
        other => return Err(format!("unknown entry type '{other}'")),
    };
    let body = &bytes[nl + 1..];
    let expected = rows * cols * per * 8;
    if body.len() != expected {
        return Err(format!("expected {expected} data bytes, found {}", body.len()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
        .collect();
    Ok(if per == 1 {
        MatrixData::Real(DMatrix::from_vec(rows, cols, vals))
    } else {
        let z = vals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        MatrixData::Complex(DMatrix::from_vec(rows, cols, z))
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn write_matrix(path: &Path, m: &MatrixData) -> CliResult<()> {
    write_bytes(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> CliResult<MatrixData> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(CliError::io(path))?;
    decode_matrix(&bytes).map_err(|msg| CliError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Real basis export (for instance a global basis `V_r`).
pub fn write_basis(path: &Path, v: &DMatrix<f64>) -> CliResult<()> {
    write_matrix(path, &MatrixData::Real(v.clone()))
}

pub fn read_basis(path: &Path) -> CliResult<DMatrix<f64>> {
    match read_matrix(path)? {
        MatrixData::Real(v) => Ok(v),
        MatrixData::Complex(_) => Err(CliError::Format {
            path: path.to_path_buf(),
            msg: "a basis must be real".into(),
        }),
    }
}

/// Binary PGM of a row-major image, mapping `[lo, hi]` linearly onto `0..=255`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match the image size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(pixels.iter().map(|&v| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }));
    out
}

/// Image of a grid-ordered field: the full `(x1, depth)` plane in 2D and the
/// `(x1, depth)` slice through the middle of `x2` in 3D. Depth increases downwards.
pub fn field_image(grid: &Grid, field: &[f64]) -> (usize, usize, Vec<f64>) {
    let iy = grid.ny() / 2;
    let mut px = Vec::with_capacity(grid.nx() * grid.nz());
    for iz in 0..grid.nz() {
        for ix in 0..grid.nx() {
            px.push(field[grid.node(ix, iy, iz)]);
        }
    }
    (grid.nx(), grid.nz(), px)
}

pub fn write_field_pgm(path: &Path, grid: &Grid, field: &[f64], lo: f64, hi: f64) -> CliResult<()> {
    let (w, h, px) = field_image(grid, field);
    write_bytes(path, &encode_pgm(w, h, &px, lo, hi))
}

/// Shortest decimal representation that reads back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: R) -> CliResult<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(csv_err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// `key,value` report.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> CliResult<()> {
    write_csv(path, &["key", "value"], pairs.iter().map(|(k, v)| [k.to_string(), v.clone()]))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_and_complex_round_trip() {
        let a = MatrixData::Real(DMatrix::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64));
        assert_eq!(decode_matrix(&encode_matrix(&a)).unwrap(), a);
        let z = MatrixData::Complex(DMatrix::from_fn(2, 4, |i, j| Complex64::new(i as f64, -(j as f64) / 3.0)));
        let bytes = encode_matrix(&z);
        assert!(bytes.starts_with(b"romdot-matrix 2 4 complex\n"));
        assert_eq!(bytes.len(), 26 + 2 * 4 * 16);
        assert_eq!(decode_matrix(&bytes).unwrap(), z);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_matrix(b"romdot-matrix 2 2 real").is_err());
        assert!(decode_matrix(b"other 1 1 real\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_matrix(b"romdot-matrix 1 1 real\n\0\0").is_err());
        assert!(decode_matrix(b"romdot-matrix 1 1 quaternion\n").is_err());
    }

    #[test]
    fn pgm_layout() {
        let img = encode_pgm(2, 2, &[0.0, 0.25, 0.5, 2.0], 0.0, 0.5);
        assert_eq!(&img[..11], b"P5\n2 2\n255\n");
        assert_eq!(&img[11..], &[0, 128, 255, 255]);
    }

    proptest::proptest! {
        #[test]
        fn any_matrix_round_trips(rows in 0usize..5, cols in 0usize..5, seed in proptest::prelude::any::<u64>(), complex: bool) {
            let val = |i: usize, j: usize, k: u64| {
                let x = seed.wrapping_mul(6364136223846793005).wrapping_add((i * 31 + j * 7) as u64 + k);
                f64::from_bits(x >> 2) * if x & 1 == 0 { 1.0 } else { -1.0 }
            };
            let m = if complex {
                MatrixData::Complex(DMatrix::from_fn(rows, cols, |i, j| Complex64::new(val(i, j, 0), val(i, j, 1))))
            } else {
                MatrixData::Real(DMatrix::from_fn(rows, cols, |i, j| val(i, j, 0)))
            };
            let back = decode_matrix(&encode_matrix(&m)).unwrap();
            proptest::prop_assert_eq!(encode_matrix(&back), encode_matrix(&m));
        }
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -3.25e-17, 1.0 / 3.0, 0.0, 12345.678] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
