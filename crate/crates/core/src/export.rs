//! CSV matrices and 8-bit PGM images for grid-shaped data.
//!
//! Grid data is stored `ix * nz + iz`. On disk each CSV line is one depth
//! row (`iz`) and each column one lateral position (`ix`), preceded by a
//! header line of lateral indices. PGM images use the same orientation.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_grid_csv(path: &Path, nx: usize, nz: usize, data: &[f64]) -> Result<()> {
    write_grid_csv_scaled(path, nx, nz, data, 1.0)
}

/// As [`write_grid_csv`] with every value multiplied by `scale`.
pub fn write_grid_csv_scaled(
    path: &Path,
    nx: usize,
    nz: usize,
    data: &[f64],
    scale: f64,
) -> Result<()> {
    if data.len() != nx * nz {
        return Err(Error::Dimension(format!(
            "grid csv: {} values for {nx}x{nz}",
            data.len()
        )));
    }
    let mut out = String::with_capacity(data.len() * 20);
    for ix in 0..nx {
        if ix > 0 {
            out.push(',');
        }
        let _ = write!(out, "{ix}");
    }
    out.push('\n');
    for iz in 0..nz {
        for ix in 0..nx {
            if ix > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", data[ix * nz + iz] * scale);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_grid_csv(path: &Path, nx: usize, nz: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header"))?;
    let mut data = vec![0.0; nx * nz];
    let mut rows = 0;
    for (iz, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        if iz >= nz {
            return Err(Error::format(path, format!("more than {nz} rows")));
        }
        let mut cols = 0;
        for (ix, field) in line.split(',').enumerate() {
            if ix >= nx {
                return Err(Error::format(path, format!("row {iz}: more than {nx} columns")));
            }
            data[ix * nz + iz] = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {iz}: bad number {field:?}")))?;
            cols += 1;
        }
        if cols != nx {
            return Err(Error::format(path, format!("row {iz}: {cols} columns, expected {nx}")));
        }
        rows += 1;
    }
    if rows != nz {
        return Err(Error::format(path, format!("{rows} rows, expected {nz}")));
    }
    Ok(data)
}

/// Binary (P5) graymap, width `nx`, height `nz`, from `ix * nz + iz` data.
pub fn write_pgm(path: &Path, nx: usize, nz: usize, data: &[u8]) -> Result<()> {
    if data.len() != nx * nz {
        return Err(Error::Dimension(format!("pgm: {} values for {nx}x{nz}", data.len())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut raster = vec![0u8; nx * nz];
    for ix in 0..nx {
        for iz in 0..nz {
            raster[iz * nx + ix] = data[ix * nz + iz];
        }
    }
    write!(w, "P5\n{nx} {nz}\n255\n")
        .and_then(|_| w.write_all(&raster))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Map dB values (max 0 dB) onto 0..=255 over `dynamic_range` dB.
pub fn db_to_gray(db: &[f64], dynamic_range: f64) -> Vec<u8> {
    db.iter()
        .map(|&v| (((v + dynamic_range) / dynamic_range).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_is_depth_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        // nx = 2, nz = 3 -> data[ix*3+iz]
        write_grid_csv(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "0,1\n1,4\n2,5\n3,6\n");
        assert_eq!(read_grid_csv(&p, 2, 3).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(read_grid_csv(&p, 3, 3).is_err());
    }

    #[test]
    fn pgm_header_and_gray_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm(&p, 2, 1, &[0, 255]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
        assert_eq!(db_to_gray(&[0.0, -25.0, -80.0], 50.0), vec![255, 128, 0]);
    }
}
