//! Straight-ray path integration over the reconstruction grid.
//!
//! [`traverse`] walks a segment through the cell grid in parametric form
//! (Siddon): the crossings with vertical and horizontal cell boundaries are
//! generated in increasing order and every interval between two consecutive
//! crossings is attributed to the cell containing its midpoint. Interval
//! lengths telescope, so the lengths of a row always sum to the clipped
//! segment length.
//!
//! Two kinds of matrices are assembled from these rows:
//!
//! * [`PathMatrices`]: one path per row (pixel to element, or plane-wave
//!   entry point to pixel). Delays are `P sigma` plus the exterior part.
//! * [`build_differential`]: for each tracked angle pair and measurement
//!   pixel, the transmit and receive paths of frame `j` minus those of
//!   frame `i`. Applied to `sigma - sigma0` it predicts the apparent delay.
//!
//! Parts of a ray outside the grid are charged with the map's exterior
//! slowness and carry no cell entry.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ApodizationSpec, ImagingGrid, Point2, ReconGrid, TransducerArray};
use crate::slowness::SlownessMap;
use crate::sparse::SparseRayMatrix;
use crate::tracking;

/// Sparse row: `(cell index, length in m)`.
pub type SparseRow = Vec<(usize, f64)>;

/// Intervals shorter than this fraction of the segment are folded into the
/// following interval instead of producing a separate entry.
const MIN_INTERVAL: f64 = 1e-12;

/// Walk the segment `start -> end` through `grid`, calling `visit(cell,
/// length)` for every traversed cell in order. Returns the length of the
/// segment lying outside the grid.
pub fn traverse<F: FnMut(usize, f64)>(grid: &ReconGrid, start: Point2, end: Point2, mut visit: F) -> f64 {
    let dx = end.x - start.x;
    let dz = end.z - start.z;
    let length = dx.hypot(dz);
    if length == 0.0 {
        return 0.0;
    }
    let (x0, x1, z0, z1) = grid.bounds();

    // Liang-Barsky clip against the bounding box.
    let mut a_in = 0.0f64;
    let mut a_out = 1.0f64;
    for (p, d, lo, hi) in [(start.x, dx, x0, x1), (start.z, dz, z0, z1)] {
        if d == 0.0 {
            if p < lo || p > hi {
                return length;
            }
        } else {
            let (mut t0, mut t1) = ((lo - p) / d, (hi - p) / d);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            a_in = a_in.max(t0);
            a_out = a_out.min(t1);
        }
    }
    if a_out <= a_in {
        return length;
    }

    let w = grid.cell_width;
    let h = grid.cell_height;
    let plane_seq = |p: f64, d: f64, lo: f64, pitch: f64| -> (f64, f64) {
        // (alpha of the first boundary after a_in, alpha step between boundaries)
        if d == 0.0 {
            return (f64::INFINITY, f64::INFINITY);
        }
        let at_in = (p + a_in * d - lo) / pitch;
        let k = if d > 0.0 { at_in.floor() + 1.0 } else { at_in.ceil() - 1.0 };
        let mut a = (lo + k * pitch - p) / d;
        let step = pitch / d.abs();
        while a <= a_in {
            a += step;
        }
        (a, step)
    };
    let (mut ax, step_x) = plane_seq(start.x, dx, x0, w);
    let (mut az, step_z) = plane_seq(start.z, dz, z0, h);

    // The first emitted interval locates its cell from its midpoint; later
    // cells follow by stepping the index at every boundary crossing.
    let sx: i64 = if dx > 0.0 { 1 } else { -1 };
    let sz: i64 = if dz > 0.0 { 1 } else { -1 };
    let (nx, nz) = (grid.nx as i64, grid.nz as i64);
    let mut cur: Option<(i64, i64)> = None;
    let mut a = a_in;
    let mut pending = 0.0;
    let mut last: Option<(usize, f64)> = None;
    while a < a_out {
        let next = ax.min(az).min(a_out);
        let span = next - a + pending;
        if span < MIN_INTERVAL && next < a_out {
            pending = span;
        } else {
            pending = 0.0;
            let (cx, cz) = *cur.get_or_insert_with(|| {
                let mid = a + 0.5 * (next - a);
                (
                    ((start.x + mid * dx - x0) / w).floor() as i64,
                    ((start.z + mid * dz - z0) / h).floor() as i64,
                )
            });
            let cell = grid.cell_index(cx.clamp(0, nx - 1) as usize, cz.clamp(0, nz - 1) as usize);
            let len = span * length;
            last = match last {
                Some((c, l)) if c == cell => Some((c, l + len)),
                Some((c, l)) => {
                    visit(c, l);
                    Some((cell, len))
                }
                None => Some((cell, len)),
            };
        }
        if ax <= next {
            ax += step_x;
            if let Some(c) = cur.as_mut() {
                c.0 += sx;
            }
        }
        if az <= next {
            az += step_z;
            if let Some(c) = cur.as_mut() {
                c.1 += sz;
            }
        }
        a = next;
    }
    if let Some((c, l)) = last {
        visit(c, l);
    }
    length * (1.0 - (a_out - a_in))
}

/// Per-cell lengths of the segment `start -> end`. Both endpoints must lie in
/// the grid's bounding box; a zero-length segment gives an empty row.
pub fn trace_ray(start: Point2, end: Point2, grid: &ReconGrid) -> Result<SparseRow> {
    for p in [start, end] {
        if !grid.contains(p) {
            return Err(Error::OutsideGrid { x: p.x, z: p.z });
        }
    }
    let mut row = SparseRow::new();
    traverse(grid, start, end, |c, l| row.push((c, l)));
    Ok(row)
}

/// Point where the plane wave steered at `angle` that reaches `pixel` crosses
/// the array plane.
pub fn transmit_entry(pixel: Point2, angle: f64) -> Point2 {
    Point2::new(pixel.x - pixel.z * angle.tan(), 0.0)
}

/// Transmit path of the plane wave at `angle` from the array plane to `pixel`.
pub fn tx_path(pixel: Point2, angle: f64, grid: &ReconGrid) -> Result<SparseRow> {
    if !(angle.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(Error::Config(format!(
            "plane-wave angle {:.2} deg must be below 90 deg",
            angle.to_degrees()
        )));
    }
    if pixel.z <= 0.0 {
        return Ok(SparseRow::new());
    }
    trace_ray(transmit_entry(pixel, angle), pixel, grid)
}

/// Receive path from `pixel` to `endpoint` on the array plane.
pub fn rx_path(pixel: Point2, endpoint: Point2, grid: &ReconGrid) -> Result<SparseRow> {
    trace_ray(pixel, endpoint, grid)
}

/// Line integral of slowness along `a -> b` with exterior charging.
pub fn path_integral(map: &SlownessMap, a: Point2, b: Point2) -> f64 {
    let values = &map.values;
    let mut acc = 0.0;
    let outside = traverse(&map.grid, a, b, |c, l| acc += l * values[c]);
    acc + outside * map.exterior
}

/// One-way transmit time to `pixel`, with t = 0 when the wavefront crosses
/// the array centre.
pub fn transmit_time(map: &SlownessMap, pixel: Point2, angle: f64) -> f64 {
    let entry = transmit_entry(pixel, angle);
    entry.x * angle.sin() * map.exterior + path_integral(map, entry, pixel)
}

/// One-way receive time from `pixel` to an element at `element`.
pub fn receive_time(map: &SlownessMap, pixel: Point2, element: Point2) -> f64 {
    path_integral(map, pixel, element)
}

pub fn homogeneous_transmit_time(pixel: Point2, angle: f64, slowness: f64) -> f64 {
    slowness * (pixel.z * angle.cos() + pixel.x * angle.sin())
}

pub fn homogeneous_receive_time(pixel: Point2, element: Point2, slowness: f64) -> f64 {
    slowness * pixel.distance(&element)
}

// ---------------------------------------------------------------------------
// Single-path matrices
// ---------------------------------------------------------------------------

/// Rows of one-way paths with their exterior parts.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub matrix: SparseRayMatrix,
    /// Length (m) of each row's ray outside the grid.
    pub exterior: Vec<f64>,
    /// Signed launch offset (m) charged at exterior slowness; non-zero only
    /// for transmit rows.
    pub offset: Vec<f64>,
}

impl PathSet {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Travel time of every row under `map`.
    pub fn times(&self, map: &SlownessMap) -> Result<Vec<f64>> {
        let inner = self.matrix.matvec(&map.values)?;
        Ok(inner
            .iter()
            .zip(self.exterior.iter().zip(&self.offset))
            .map(|(t, (e, o))| t + (e + o) * map.exterior)
            .collect())
    }
}

/// Assembled single-path matrices for one imaging grid.
#[derive(Debug, Clone)]
pub struct PathMatrices {
    pub imaging: ImagingGrid,
    pub recon: ReconGrid,
    pub num_elements: usize,
    pub angles: Vec<f64>,
    /// `N_c * N_x * N_z` rows, row `n_c * (N_x N_z) + pixel`.
    pub rx: PathSet,
    /// Per angle, one row per pixel.
    pub tx: Vec<PathSet>,
}

/// Default memory budget for explicit path matrices (2 GiB).
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

fn assemble<F>(cols: usize, rows: usize, make: F) -> PathSet
where
    F: Fn(usize) -> (SparseRow, f64, f64) + Sync,
{
    const BLOCK: usize = 4096;
    let mut matrix = SparseRayMatrix::empty(cols);
    let mut exterior = Vec::with_capacity(rows);
    let mut offset = Vec::with_capacity(rows);
    for start in (0..rows).step_by(BLOCK) {
        let block: Vec<_> = (start..(start + BLOCK).min(rows))
            .into_par_iter()
            .map(&make)
            .collect();
        for (row, ext, off) in block {
            exterior.push(ext);
            offset.push(off);
            matrix
                .push_row(row)
                .expect("traversal emits unique in-range cells");
        }
    }
    PathSet {
        matrix,
        exterior,
        offset,
    }
}

fn grid_row(grid: &ReconGrid, a: Point2, b: Point2) -> (SparseRow, f64) {
    let mut row = SparseRow::new();
    let ext = traverse(grid, a, b, |c, l| row.push((c, l)));
    (row, ext)
}

impl PathMatrices {
    /// Assemble `P` for every element-pixel pair and every transmit angle.
    /// Fails before allocating when the estimated size exceeds `budget_bytes`.
    pub fn build(
        imaging: &ImagingGrid,
        recon: &ReconGrid,
        array: &TransducerArray,
        angles: &[f64],
        budget_bytes: u64,
    ) -> Result<Self> {
        if !recon.covers(imaging) {
            return Err(Error::Config(
                "reconstruction grid does not cover the imaging grid".into(),
            ));
        }
        let npix = imaging.len();
        let nc = array.num_elements();
        let rows = (nc + angles.len()) * npix;
        let estimated = estimate_bytes(imaging, recon, array, rows);
        if estimated > budget_bytes {
            return Err(Error::MemoryBudget {
                estimated_bytes: estimated,
                budget_bytes,
            });
        }
        let pixels: Vec<Point2> = imaging.positions().collect();
        let elements: Vec<Point2> = array.x_positions().iter().map(|&x| Point2::new(x, 0.0)).collect();

        let cols = recon.len();
        let rx = assemble(cols, nc * npix, |r| {
            let (n, p) = (r / npix, r % npix);
            let (row, ext) = grid_row(recon, pixels[p], elements[n]);
            (row, ext, 0.0)
        });
        let tx = angles
            .iter()
            .map(|&angle| {
                assemble(cols, npix, |p| {
                    let entry = transmit_entry(pixels[p], angle);
                    let (row, ext) = grid_row(recon, entry, pixels[p]);
                    (row, ext, entry.x * angle.sin())
                })
            })
            .collect();
        Ok(Self {
            imaging: imaging.clone(),
            recon: recon.clone(),
            num_elements: nc,
            angles: angles.to_vec(),
            rx,
            tx,
        })
    }

    /// Delay `tau(n_c, pixel)` for angle index `a`, laid out `n_c * npix + pixel`.
    pub fn delays(&self, map: &SlownessMap, a: usize) -> Result<Vec<f64>> {
        if map.grid != self.recon {
            return Err(Error::Dimension("slowness map grid differs from the path matrices".into()));
        }
        let tx_set = self.tx.get(a).ok_or(Error::IndexOutOfRange {
            what: "angle",
            index: a,
            limit: self.tx.len(),
        })?;
        let tx = tx_set.times(map)?;
        let rx = self.rx.times(map)?;
        let npix = self.imaging.len();
        Ok(rx
            .iter()
            .enumerate()
            .map(|(r, t)| tx[r % npix] + t)
            .collect())
    }
}

fn estimate_bytes(imaging: &ImagingGrid, recon: &ReconGrid, array: &TransducerArray, rows: usize) -> u64 {
    // Mean entries per row from a light sample of receive rays.
    let npix = imaging.len();
    let nc = array.num_elements();
    let samples = 64.min(npix * nc);
    let mut total = 0usize;
    for s in 0..samples {
        let r = (s * 7919 + 13) % (npix * nc);
        let (n, p) = (r / npix, r % npix);
        let pixel = imaging
            .pixel_position(p / imaging.nz, p % imaging.nz)
            .expect("in range");
        let element = Point2::new(array.x_positions()[n], 0.0);
        traverse(recon, pixel, element, |_, _| total += 1);
    }
    let per_row = total as f64 / samples.max(1) as f64 + 1.0;
    (rows as f64 * (per_row * 16.0 + 24.0)) as u64
}

// ---------------------------------------------------------------------------
// Differential path matrix
// ---------------------------------------------------------------------------

/// Ordered pair `(i, j)` of transmit angle indices tracked against each
/// other, with the PSF angle both frames are aligned to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnglePair {
    pub i: usize,
    pub j: usize,
    pub psf_angle: f64,
}

/// Tracked pairs over a list of transmit angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AnglePairList {
    angles: Vec<f64>,
    pairs: Vec<AnglePair>,
}

impl AnglePairList {
    pub fn new(angles: Vec<f64>, pairs: Vec<AnglePair>) -> Result<Self> {
        for p in &pairs {
            if p.i == p.j {
                return Err(Error::Config(format!(
                    "angle pair ({}, {}) tracks a frame against itself",
                    p.i, p.j
                )));
            }
            let limit = angles.len();
            for idx in [p.i, p.j] {
                if idx >= limit {
                    return Err(Error::IndexOutOfRange {
                        what: "angle pair index",
                        index: idx,
                        limit,
                    });
                }
            }
        }
        Ok(Self { angles, pairs })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn pairs(&self) -> &[AnglePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Transmit and PSF-aligned receive angles `((tx_i, rx_i), (tx_j, rx_j))`.
    pub fn steering(&self, k: usize, acceptance: f64) -> Result<((f64, f64), (f64, f64))> {
        let p = self.pairs[k];
        let (ti, tj) = (self.angles[p.i], self.angles[p.j]);
        let (ri, rj) = tracking::psf_aligned_apertures(ti, tj, p.psf_angle, acceptance)?;
        Ok(((ti, ri), (tj, rj)))
    }

    /// Same pairs with `i` and `j` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            angles: self.angles.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| AnglePair {
                    i: p.j,
                    j: p.i,
                    psf_angle: p.psf_angle,
                })
                .collect(),
        }
    }
}

/// Where the representative receive ray of a frame ends on the array plane.
#[derive(Debug, Clone)]
pub enum RxEndpointRule {
    /// Weighted centroid of the steered receive aperture.
    ApertureCentroid {
        array: TransducerArray,
        apod: ApodizationSpec,
    },
    /// Straight continuation along the receive steering angle.
    FixedAngle,
}

impl RxEndpointRule {
    pub fn endpoint(&self, pixel: Point2, rx_angle: f64) -> Point2 {
        match self {
            RxEndpointRule::ApertureCentroid { array, apod } => {
                Point2::new(apod.aperture_centroid(array, pixel, rx_angle), 0.0)
            }
            RxEndpointRule::FixedAngle => Point2::new(pixel.x - pixel.z * rx_angle.tan(), 0.0),
        }
    }
}

/// Sorted, duplicate-merged path of one frame: transmit then receive.
fn frame_path(grid: &ReconGrid, rule: &RxEndpointRule, pixel: Point2, tx: f64, rx: f64) -> SparseRow {
    let mut row = SparseRow::new();
    traverse(grid, transmit_entry(pixel, tx), pixel, |c, l| row.push((c, l)));
    traverse(grid, pixel, rule.endpoint(pixel, rx), |c, l| row.push((c, l)));
    row.sort_by_key(|e| e.0);
    let mut merged = SparseRow::with_capacity(row.len());
    for (c, l) in row {
        match merged.last_mut() {
            Some((lc, ll)) if *lc == c => *ll += l,
            _ => merged.push((c, l)),
        }
    }
    merged
}

/// `a - b` over sorted rows, dropping exact zeros.
fn difference(a: &[(usize, f64)], b: &[(usize, f64)]) -> SparseRow {
    let mut out = SparseRow::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let (c, v) = match (a.get(i), b.get(j)) {
            (Some(&(ca, va)), Some(&(cb, vb))) if ca == cb => {
                i += 1;
                j += 1;
                (ca, va - vb)
            }
            (Some(&(ca, va)), Some(&(cb, _))) if ca < cb => {
                i += 1;
                (ca, va)
            }
            (Some(&(ca, va)), None) => {
                i += 1;
                (ca, va)
            }
            (_, Some(&(cb, vb))) => {
                j += 1;
                (cb, -vb)
            }
            (None, None) => unreachable!(),
        };
        if v != 0.0 {
            out.push((c, v));
        }
    }
    out
}

/// Differential path matrix with `M * N_pix` rows, pair-major, pixels
/// `ix * nz + iz`. Row `(k, p)` is the path of frame `j` minus the path of
/// frame `i` at pixel `p`.
pub fn build_differential(
    pairs: &AnglePairList,
    rule: &RxEndpointRule,
    recon: &ReconGrid,
    measurement: &ImagingGrid,
    acceptance: f64,
) -> Result<SparseRayMatrix> {
    let pixels: Vec<Point2> = measurement.positions().collect();
    if let Some(p) = pixels.iter().find(|p| !recon.contains(**p)) {
        return Err(Error::OutsideGrid { x: p.x, z: p.z });
    }
    let mut out = SparseRayMatrix::empty(recon.len());
    for k in 0..pairs.len() {
        let ((ti, ri), (tj, rj)) = pairs.steering(k, acceptance)?;
        let rows: Vec<SparseRow> = pixels
            .par_iter()
            .map(|&p| {
                let plus = frame_path(recon, rule, p, tj, rj);
                let minus = frame_path(recon, rule, p, ti, ri);
                difference(&plus, &minus)
            })
            .collect();
        for row in rows {
            out.push_row(row)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid16() -> ReconGrid {
        ReconGrid::new(16, 16, 1e-3, 1e-3, Point2::new(-8e-3, 0.0)).unwrap()
    }

    fn row_len(row: &SparseRow) -> f64 {
        row.iter().map(|e| e.1).sum()
    }

    #[test]
    fn vertical_ray_conserves_length() {
        let g = ReconGrid::new(10, 30, 1e-3, 1e-3, Point2::new(-5e-3, 0.0)).unwrap();
        let row = trace_ray(Point2::new(0.0, 0.0), Point2::new(0.0, 30e-3), &g).unwrap();
        assert!((row_len(&row) - 30e-3).abs() < 1e-15);
        assert_eq!(row.len(), 30);
    }

    #[test]
    fn cell_diagonal_is_single_entry() {
        let g = ReconGrid::new(4, 4, 1e-3, 1e-3, Point2::new(0.0, 0.0)).unwrap();
        let row = trace_ray(Point2::new(1e-3, 1e-3), Point2::new(2e-3, 2e-3), &g).unwrap();
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].0, g.cell_index(1, 1));
        assert!((row[0].1 - 2f64.sqrt() * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn long_diagonal_visits_diagonal_cells_only() {
        let g = grid16();
        let row = trace_ray(Point2::new(-8e-3, 0.0), Point2::new(8e-3, 16e-3), &g).unwrap();
        assert_eq!(row.len(), 16);
        for (k, &(c, l)) in row.iter().enumerate() {
            assert_eq!(c, g.cell_index(k, k));
            assert!((l - 2f64.sqrt() * 1e-3).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_length_and_outside() {
        let g = grid16();
        let p = Point2::new(1e-3, 3e-3);
        assert!(trace_ray(p, p, &g).unwrap().is_empty());
        assert!(matches!(
            trace_ray(p, Point2::new(20e-3, 3e-3), &g),
            Err(Error::OutsideGrid { .. })
        ));
    }

    #[test]
    fn transmit_paths() {
        let g = ReconGrid::new(40, 40, 1e-3, 1e-3, Point2::new(-20e-3, 0.0)).unwrap();
        let px = Point2::new(0.0, 30e-3);
        let s = 1.0 / 1500.0;
        let t0: f64 = tx_path(px, 0.0, &g).unwrap().iter().map(|e| e.1 * s).sum();
        assert!((t0 - 20e-6).abs() < 1e-15);
        let row = tx_path(px, 15f64.to_radians(), &g).unwrap();
        let l = row_len(&row);
        assert!((l - 30e-3 / 15f64.to_radians().cos()).abs() < 1e-12);
        assert!((l - 31.058e-3).abs() < 1e-6);
        assert!((l * s - 20.706e-6).abs() < 1e-9);
        assert!(tx_path(Point2::new(0.0, 0.0), 0.0, &g).unwrap().is_empty());
        // entry point at x = -30 mm lies outside the lateral extent
        assert!(tx_path(Point2::new(-10e-3, 30e-3), 20f64.to_radians(), &g).is_err());
    }

    #[test]
    fn receive_paths() {
        let g = ReconGrid::new(40, 40, 1e-3, 1e-3, Point2::new(-20e-3, 0.0)).unwrap();
        let s = 1.0 / 1500.0;
        let r = rx_path(Point2::new(0.0, 30e-3), Point2::new(0.0, 0.0), &g).unwrap();
        assert!((row_len(&r) * s - 20e-6).abs() < 1e-15);
        let r = rx_path(Point2::new(10e-3, 30e-3), Point2::new(0.0, 0.0), &g).unwrap();
        assert!((row_len(&r) - 31.623e-3).abs() < 1e-6);
        let a = rx_path(Point2::new(0.0, 30e-3), Point2::new(-7e-3, 0.0), &g).unwrap();
        let b = rx_path(Point2::new(0.0, 30e-3), Point2::new(7e-3, 0.0), &g).unwrap();
        assert!((row_len(&a) - row_len(&b)).abs() < 1e-15);
    }

    #[test]
    fn exterior_charging() {
        let g = ReconGrid::new(10, 10, 1e-3, 1e-3, Point2::new(-5e-3, 0.0)).unwrap();
        let mut row = Vec::new();
        let ext = traverse(&g, Point2::new(-10e-3, 5e-3), Point2::new(0.0, 5e-3), |c, l| row.push((c, l)));
        assert!((ext - 5e-3).abs() < 1e-15);
        assert!((row_len(&row) - 5e-3).abs() < 1e-15);
        let ext = traverse(&g, Point2::new(-10e-3, 5e-3), Point2::new(-6e-3, 1e-3), |_, _| panic!());
        assert!((ext - 4e-3 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn swapped_pairs_negate_rows_exactly() {
        let g = grid16();
        let meas = ImagingGrid::new(4, 4, 2e-3, 2e-3, Point2::new(-3e-3, 6e-3)).unwrap();
        let angles: Vec<f64> = [-8.0f64, 0.0, 8.0].iter().map(|a| a.to_radians()).collect();
        let pairs = AnglePairList::new(
            angles,
            vec![
                AnglePair { i: 0, j: 2, psf_angle: 0.0 },
                AnglePair { i: 1, j: 2, psf_angle: 0.0 },
            ],
        )
        .unwrap();
        let rule = RxEndpointRule::FixedAngle;
        let acc = 30f64.to_radians();
        let l = build_differential(&pairs, &rule, &g, &meas, acc).unwrap();
        let ls = build_differential(&pairs.swapped(), &rule, &g, &meas, acc).unwrap();
        assert_eq!(l.rows(), 2 * meas.len());
        for r in 0..l.rows() {
            let (ca, va) = l.row(r);
            let (cb, vb) = ls.row(r);
            assert_eq!(ca, cb);
            for (a, b) in va.iter().zip(vb) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn pair_list_rejects_self_pairs() {
        let r = AnglePairList::new(vec![0.0, 0.1], vec![AnglePair { i: 1, j: 1, psf_angle: 0.0 }]);
        assert!(r.is_err());
        let r = AnglePairList::new(vec![0.0, 0.1], vec![AnglePair { i: 0, j: 2, psf_angle: 0.0 }]);
        assert!(r.is_err());
    }

    #[test]
    fn memory_budget_is_enforced() {
        let recon = ReconGrid::new(8, 8, 1e-3, 1e-3, Point2::new(-4e-3, 0.0)).unwrap();
        let img = ImagingGrid::new(8, 8, 1e-3, 1e-3, Point2::new(-3.5e-3, 0.5e-3)).unwrap();
        let array = TransducerArray::linear(8, 1e-3).unwrap();
        let err = PathMatrices::build(&img, &recon, &array, &[0.0], 1000).unwrap_err();
        match err {
            Error::MemoryBudget { estimated_bytes, budget_bytes } => {
                assert!(estimated_bytes > budget_bytes)
            }
            e => panic!("unexpected {e}"),
        }
    }
}
