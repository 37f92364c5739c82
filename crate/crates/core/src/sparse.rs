//! Compressed sparse row storage for ray-path matrices.
//!
//! Entries are per-cell path lengths (m). Single-path matrices hold only
//! non-negative entries; differential matrices are signed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"SOSRAYM1";

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRayMatrix {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

/// Rows per block in [`SparseRayMatrix::apply_and_adjoint`]. Fixed so that
/// the reduction order does not depend on thread scheduling.
const ADJOINT_BLOCK: usize = 2048;

impl SparseRayMatrix {
    pub fn empty(cols: usize) -> Self {
        Self {
            cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Assemble from per-row entry lists. Column indices within a row must be
    /// unique; they are stored sorted.
    pub fn from_rows<I>(cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut m = Self::empty(cols);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, mut row: Vec<(usize, f64)>) -> Result<()> {
        row.sort_unstable_by_key(|e| e.0);
        for w in row.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Dimension(format!("duplicate column {} in row", w[0].0)));
            }
        }
        if let Some(&(c, _)) = row.last() {
            if c >= self.cols || c > u32::MAX as usize {
                return Err(Error::IndexOutOfRange {
                    what: "column",
                    index: c,
                    limit: self.cols,
                });
            }
        }
        for (c, v) in row {
            self.col_idx.push(c as u32);
            self.values.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
        Ok(())
    }

    /// Append all rows of `other`.
    pub fn append(&mut self, other: &SparseRayMatrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::Dimension(format!(
                "cannot append matrix with {} columns to one with {}",
                other.cols, self.cols
            )));
        }
        let base = self.col_idx.len();
        self.col_idx.extend_from_slice(&other.col_idx);
        self.values.extend_from_slice(&other.values);
        self.row_ptr
            .extend(other.row_ptr[1..].iter().map(|&p| p + base));
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(r);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c as usize]).sum()
    }

    /// `y = A x`, rows evaluated in parallel.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec: vector has {} entries, matrix has {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows())
            .into_par_iter()
            .with_min_len(256)
            .map(|r| self.row_dot(r, x))
            .collect())
    }

    /// One pass over the matrix computing `y = A x`, then `(v_r, w_r) =
    /// f(r, y_r)` per row, and returning `(sum_r v_r, A^T w)`. Equivalent to a
    /// product with `A` followed by one with the transpose, at half the memory
    /// traffic. The result is independent of the number of worker threads.
    pub fn apply_and_adjoint<F>(&self, x: &[f64], f: F) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(usize, f64) -> (f64, f64) + Sync,
    {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "apply_and_adjoint: vector has {} entries, matrix has {} columns",
                x.len(),
                self.cols
            )));
        }
        let rows = self.rows();
        let blocks = rows.div_ceil(ADJOINT_BLOCK);
        let partial: Vec<(f64, Vec<f64>)> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![0.0; self.cols];
                let mut total = 0.0;
                for r in b * ADJOINT_BLOCK..((b + 1) * ADJOINT_BLOCK).min(rows) {
                    let (cols, vals) = self.row(r);
                    let y: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * x[c as usize]).sum();
                    let (value, w) = f(r, y);
                    total += value;
                    if w != 0.0 {
                        for (&c, &v) in cols.iter().zip(vals) {
                            acc[c as usize] += v * w;
                        }
                    }
                }
                (total, acc)
            })
            .collect();
        let mut total = 0.0;
        let mut out = vec![0.0; self.cols];
        for (t, acc) in partial {
            total += t;
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
        }
        Ok((total, out))
    }

    /// Explicit transpose, so that `A^T y` is again a row-parallel product.
    pub fn transpose(&self) -> SparseRayMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c as usize];
                col_idx[slot] = r as u32;
                values[slot] = v;
                next[c as usize] += 1;
            }
        }
        SparseRayMatrix {
            cols: self.rows(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Keep only the rows flagged in `keep`.
    pub fn select_rows(&self, keep: &[bool]) -> Result<SparseRayMatrix> {
        if keep.len() != self.rows() {
            return Err(Error::Dimension(format!(
                "row mask has {} entries, matrix has {} rows",
                keep.len(),
                self.rows()
            )));
        }
        let mut out = Self::empty(self.cols);
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let (cols, vals) = self.row(r);
            out.col_idx.extend_from_slice(cols);
            out.values.extend_from_slice(vals);
            out.row_ptr.push(out.col_idx.len());
        }
        Ok(out)
    }

    /// Row-wise multiplication by `scale`.
    pub fn scaled(&self, scale: f64) -> SparseRayMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn memory_bytes(&self) -> usize {
        self.row_ptr.len() * 8 + self.col_idx.len() * 4 + self.values.len() * 8
    }

    // -----------------------------------------------------------------------
    // On-disk cache
    // -----------------------------------------------------------------------

    /// Little-endian container: magic, rows, cols, nnz, grid hash (u64 each),
    /// then `row_ptr` (u64), `col_idx` (u64), `values` (f64).
    pub fn write_cache(&self, path: &Path, grid_hash: u64) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(CACHE_MAGIC)?;
        for v in [
            self.rows() as u64,
            self.cols as u64,
            self.nnz() as u64,
            grid_hash,
        ] {
            put(&v.to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            put(&(p as u64).to_le_bytes())?;
        }
        for &c in &self.col_idx {
            put(&(c as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a cache written by [`write_cache`](Self::write_cache); fails when
    /// the stored grid hash differs from `grid_hash`.
    pub fn read_cache(path: &Path, grid_hash: u64) -> Result<SparseRayMatrix> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CACHE_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let mut word = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(u64::from_le_bytes(b))
        };
        let rows = word()? as usize;
        let cols = word()? as usize;
        let nnz = word()? as usize;
        let hash = word()?;
        if hash != grid_hash {
            return Err(Error::format(
                path,
                format!("grid hash {hash:#018x} does not match {grid_hash:#018x}"),
            ));
        }
        let row_ptr = (0..=rows)
            .map(|_| word().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let col_idx = (0..nnz)
            .map(|_| word().map(|v| v as u32))
            .collect::<Result<Vec<_>>>()?;
        let values = (0..nnz)
            .map(|_| word().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if row_ptr.first() != Some(&0)
            || row_ptr.last() != Some(&nnz)
            || row_ptr.windows(2).any(|w| w[1] < w[0])
            || col_idx.iter().any(|&c| c as usize >= cols)
        {
            return Err(Error::format(path, "inconsistent CSR arrays"));
        }
        Ok(SparseRayMatrix {
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SparseRayMatrix {
        SparseRayMatrix::from_rows(
            4,
            vec![
                vec![(0, 1.0), (2, 2.0)],
                vec![],
                vec![(3, -1.5), (1, 0.5)],
            ],
        )
        .unwrap()
    }

    #[test]
    fn matvec_and_transpose() {
        let a = small();
        assert_eq!(a.rows(), 3);
        assert_eq!(a.nnz(), 4);
        let y = a.matvec(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![7.0, 0.0, -5.0]);
        let t = a.transpose();
        assert_eq!(t.rows(), 4);
        assert_eq!(t.matvec(&[1.0, 1.0, 2.0]).unwrap(), vec![1.0, 1.0, 2.0, -3.0]);
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        let mut a = SparseRayMatrix::empty(2);
        assert!(a.push_row(vec![(2, 1.0)]).is_err());
        assert!(a.push_row(vec![(1, 1.0), (1, 2.0)]).is_err());
    }

    #[test]
    fn select_and_append() {
        let a = small();
        let s = a.select_rows(&[true, false, true]).unwrap();
        assert_eq!(s.rows(), 2);
        assert_eq!(s.row(1), a.row(2));
        let mut b = a.clone();
        b.append(&s).unwrap();
        assert_eq!(b.rows(), 5);
        assert_eq!(b.row(4), a.row(2));
    }

    #[test]
    fn cache_rejects_wrong_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        small().write_cache(&p, 42).unwrap();
        assert!(SparseRayMatrix::read_cache(&p, 43).is_err());
        assert_eq!(SparseRayMatrix::read_cache(&p, 42).unwrap(), small());
    }

    proptest! {
        #[test]
        fn cache_round_trip(rows in proptest::collection::vec(
            proptest::collection::btree_map(0usize..50, -1.0f64..1.0, 0..8), 0..20)) {
            let m = SparseRayMatrix::from_rows(50, rows.into_iter().map(|r| r.into_iter().collect())).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.bin");
            m.write_cache(&p, 7).unwrap();
            prop_assert_eq!(SparseRayMatrix::read_cache(&p, 7).unwrap(), m);
        }

        #[test]
        fn transpose_is_adjoint(rows in proptest::collection::vec(
            proptest::collection::btree_map(0usize..12, -1.0f64..1.0, 0..6), 1..10),
            seed in 0u64..1000) {
            let m = SparseRayMatrix::from_rows(12, rows.into_iter().map(|r| r.into_iter().collect())).unwrap();
            let x: Vec<f64> = (0..12).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let y: Vec<f64> = (0..m.rows()).map(|i| ((i as u64 * 7 + seed) % 5) as f64 - 2.0).collect();
            let ax = m.matvec(&x).unwrap();
            let aty = m.transpose().matvec(&y).unwrap();
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = aty.iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
