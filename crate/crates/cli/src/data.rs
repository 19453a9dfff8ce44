//! Dataset loading (IDX images, numeric CSV), covariance and zero padding.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_HEADER_LEN: usize = 16;

/// Samples as rows of a dense matrix, plus a note on where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatrix {
    pub data: DMatrix<f64>,
    pub provenance: String,
}

impl DatasetMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols_raw(&self) -> usize {
        self.data.ncols()
    }

    /// Column count after zero padding.
    pub fn padded_cols(&self) -> usize {
        self.cols_raw().next_power_of_two()
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let m = self.rows() as f64;
        self.data.column_iter().map(|c| c.sum() / m).collect()
    }

    /// Subtracts the column means in place and returns them.
    pub fn center(&mut self) -> Vec<f64> {
        let mean = self.mean();
        for (mut col, mu) in self.data.column_iter_mut().zip(&mean) {
            col.add_scalar_mut(-mu);
        }
        mean
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> CliResult<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            CliError::Data(format!(
                "truncated IDX header at byte offset {}: need {IDX_HEADER_LEN} bytes",
                bytes.len()
            ))
        })
}

/// Parses an IDX image file (`0x00000803`, dims `count, rows, cols`,
/// unsigned bytes). Pixels are scaled to `[0, 1]`; each image becomes one
/// row of `rows * cols` values. `limit` keeps only the first images.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> CliResult<DatasetMatrix> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(CliError::Data(format!(
            "bad IDX magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if count == 0 {
        return Err(CliError::Data("IDX image count is zero (byte offset 4)".into()));
    }
    if rows == 0 || cols == 0 {
        let at = if rows == 0 { 8 } else { 12 };
        return Err(CliError::Data(format!("IDX image dimension is zero (byte offset {at})")));
    }
    let size = rows
        .checked_mul(cols)
        .ok_or_else(|| CliError::Data("IDX image size overflows (byte offset 8)".into()))?;
    let expected = size
        .checked_mul(count)
        .and_then(|p| p.checked_add(IDX_HEADER_LEN))
        .ok_or_else(|| CliError::Data("IDX payload size overflows (byte offset 4)".into()))?;
    if bytes.len() < expected {
        return Err(CliError::Data(format!(
            "truncated IDX pixel data: {count} images of {rows}x{cols} need {expected} bytes, \
             file ends at byte offset {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(CliError::Data(format!("trailing bytes after IDX pixel data at byte offset {expected}")));
    }
    let keep = limit.map_or(count, |l| l.min(count));
    let pixels = &bytes[IDX_HEADER_LEN..IDX_HEADER_LEN + keep * size];
    let data = DMatrix::from_row_iterator(keep, size, pixels.iter().map(|&p| p as f64 / 255.0));
    Ok(DatasetMatrix {
        data,
        provenance: format!("idx images {rows}x{cols}, {keep} of {count} used, pixels scaled by 1/255"),
    })
}

pub fn load_idx_images(path: &Path, limit: Option<usize>) -> CliResult<DatasetMatrix> {
    let bytes = std::fs::read(path)?;
    let mut ds = parse_idx_images(&bytes, limit)?;
    ds.provenance = format!("{}: {}", path.display(), ds.provenance);
    Ok(ds)
}

/// Reads one sample per row of decimal numbers. Every row must have the
/// same number of fields.
pub fn parse_csv<R: std::io::Read>(reader: R, has_header: bool, limit: Option<usize>) -> CliResult<DatasetMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for rec in rdr.records() {
        if limit.is_some_and(|l| rows >= l) {
            break;
        }
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(CliError::Data(format!("line {line}: expected {c} fields, found {}", rec.len())));
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Data(format!("line {line}, column {}: not a number: {field:?}", j + 1)))?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("line {line}, column {}: non-finite value", j + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = match cols {
        Some(c) if c > 0 && rows > 0 => c,
        _ => return Err(CliError::Data("CSV contains no samples".into())),
    };
    Ok(DatasetMatrix {
        data: DMatrix::from_row_slice(rows, cols, &values),
        provenance: format!("csv, {rows} rows x {cols} columns, values as given"),
    })
}

pub fn load_csv(path: &Path, has_header: bool, limit: Option<usize>) -> CliResult<DatasetMatrix> {
    let file = std::fs::File::open(path)?;
    let mut ds = parse_csv(std::io::BufReader::new(file), has_header, limit)?;
    ds.provenance = format!("{}: {}", path.display(), ds.provenance);
    Ok(ds)
}

/// Empirical covariance `(1/m) sum (x - mean)(x - mean)^T` of already
/// centered rows.
pub fn covariance_of_centered(centered: &DMatrix<f64>) -> DMatrix<f64> {
    centered.tr_mul(centered) / centered.nrows() as f64
}

/// Covariance of the rows of `ds`; centers `ds` in place.
pub fn covariance(ds: &mut DatasetMatrix) -> DMatrix<f64> {
    ds.center();
    covariance_of_centered(&ds.data)
}

/// Embeds `m` in the top-left corner of an `n x n` zero matrix.
pub fn pad_matrix(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

pub fn pad_vec(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out[..x.len()].copy_from_slice(x);
    out
}
