//! File formats the CLI speaks besides the binary container: delimited
//! tables with a header row, and 8-bit grayscale PNGs.

use std::fs;
use std::path::Path;

use macaw::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

/// Writes a tab-separated table. Values print in shortest-round-trip form,
/// so reading the file back reproduces every float bit for bit.
pub fn write_table(path: &Path, header: &[&str], rows: &ArrayView2<f64>) -> Result<()> {
    if header.len() != rows.ncols() {
        return Err(Error::Shape(format!(
            "{} header fields for {} columns",
            header.len(),
            rows.ncols()
        )));
    }
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Corrupt(format!("{}: empty table", path.display())))?
        .split('\t')
        .map(str::to_owned)
        .collect();
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::Corrupt(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 1,
                fields.len(),
                header.len()
            )));
        }
        for f in fields {
            values.push(f.parse::<f64>().map_err(|_| {
                Error::Corrupt(format!("{}: cannot parse {f:?}", path.display()))
            })?);
        }
        n_rows += 1;
    }
    let table = Array2::from_shape_vec((n_rows, header.len()), values)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((header, table))
}

/// Saves one flattened [0, 1] image as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    if pixels.len() != side * side {
        return Err(Error::Shape(format!(
            "{} pixels for a {side}x{side} image",
            pixels.len()
        )));
    }
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, bytes)
        .expect("buffer length checked above");
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}
