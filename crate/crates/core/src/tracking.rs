//! Apparent axial displacement between pairs of angled frames.
//!
//! Both frames of a pair are beamformed with receive apertures steered so the
//! transmit/receive bisector equals a common PSF angle. Their PSFs then share
//! one modulation direction and a windowed zero-mean NCC along depth finds the
//! residual axial shift. Pixel shifts are converted to two-way time with
//! `2 sigma0 dz`, projected onto the PSF minor axis and scaled.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::geometry::{ImagingGrid, Point2};
use crate::raytrace::{AnglePair, AnglePairList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Multiply the axial estimate by `cos(theta_psf)`.
    Cos,
    /// Divide the axial estimate by `cos(theta_psf)`.
    InverseCos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Axial window length (samples).
    pub window_axial: usize,
    /// Lateral window width (lines, odd).
    pub window_lateral: usize,
    /// Largest lag searched in either direction (samples).
    pub search: usize,
    /// PSF alignment angles (rad).
    pub psf_angles: Vec<f64>,
    pub scale: f64,
    pub projection: Projection,
    /// Minimum peak NCC for a measurement to be used.
    pub quality_threshold: f64,
    /// Largest receive steering angle the aperture accepts (rad).
    pub acceptance: f64,
    /// Measurement pixel spacing in imaging-grid samples.
    pub stride_axial: usize,
    pub stride_lateral: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            window_axial: 32,
            window_lateral: 5,
            search: 8,
            psf_angles: [-15.0f64, 0.0, 15.0].iter().map(|d| d.to_radians()).collect(),
            scale: 1.5,
            projection: Projection::Cos,
            quality_threshold: 0.5,
            acceptance: 30f64.to_radians(),
            stride_axial: 16,
            stride_lateral: 20,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_axial < 3 || self.window_lateral < 1 || self.window_lateral.is_multiple_of(2) {
            return Err(Error::Config(
                "tracking window must be >= 3 axial samples and an odd number of lines".into(),
            ));
        }
        if self.search < 1 || self.stride_axial < 1 || self.stride_lateral < 1 {
            return Err(Error::Config("search range and strides must be >= 1".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("projection scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return Err(Error::Config("NCC quality threshold must lie in [0, 1]".into()));
        }
        if self.psf_angles.is_empty() {
            return Err(Error::Config("at least one PSF angle is required".into()));
        }
        Ok(())
    }

    /// Grid of measurement pixels on `img`: every window of those pixels,
    /// including the search margin, lies inside the frame.
    pub fn measurement_grid(&self, img: &ImagingGrid) -> Result<ImagingGrid> {
        let off_x = self.window_lateral / 2;
        let off_z = self.window_axial / 2 + self.search;
        let tail_z = self.window_axial - self.window_axial / 2 - 1 + self.search;
        if img.nx < 2 * off_x + 1 || img.nz < off_z + tail_z + 1 {
            return Err(Error::Config(format!(
                "imaging grid {}x{} too small for the tracking window",
                img.nx, img.nz
            )));
        }
        let nx = (img.nx - 1 - 2 * off_x) / self.stride_lateral + 1;
        let nz = (img.nz - 1 - off_z - tail_z) / self.stride_axial + 1;
        ImagingGrid::new(
            nx,
            nz,
            img.dx * self.stride_lateral as f64,
            img.dz * self.stride_axial as f64,
            Point2::new(img.x(off_x), img.z(off_z)),
        )
    }
}

/// Receive steering angles that put the transmit/receive bisector of both
/// frames at `psf_angle`: `theta_rx = 2 theta_psf - theta_tx`.
pub fn psf_aligned_apertures(
    theta_i: f64,
    theta_j: f64,
    psf_angle: f64,
    acceptance: f64,
) -> Result<(f64, f64)> {
    let rx_i = 2.0 * psf_angle - theta_i;
    let rx_j = 2.0 * psf_angle - theta_j;
    for rx in [rx_i, rx_j] {
        if rx.abs() > acceptance + 1e-12 {
            return Err(Error::ApertureRejected {
                required_deg: rx.to_degrees(),
                limit_deg: acceptance.to_degrees(),
            });
        }
    }
    Ok((rx_i, rx_j))
}

/// Symmetric pairs `(-theta, +theta)` and adjacent pairs over `angles`, each
/// assigned the PSF angle nearest its transmit-angle mean. Pairs whose
/// receive steering falls outside the acceptance are dropped.
pub fn default_pairs(angles: &[f64], cfg: &TrackingConfig) -> Result<AnglePairList> {
    let nearest_psf = |mean: f64| {
        cfg.psf_angles
            .iter()
            .copied()
            .min_by(|a, b| (a - mean).abs().total_cmp(&(b - mean).abs()))
            .expect("validated non-empty")
    };
    let mut candidates = Vec::new();
    for i in 0..angles.len() {
        if angles[i] >= -1e-12 {
            continue;
        }
        if let Some(j) = angles.iter().position(|&a| (a + angles[i]).abs() < 1e-9) {
            candidates.push((i, j));
        }
    }
    let mut order: Vec<usize> = (0..angles.len()).collect();
    order.sort_by(|&a, &b| angles[a].total_cmp(&angles[b]));
    for w in order.windows(2) {
        candidates.push((w[0], w[1]));
    }
    let mut pairs = Vec::new();
    for (i, j) in candidates {
        let psf = nearest_psf(0.5 * (angles[i] + angles[j]));
        match psf_aligned_apertures(angles[i], angles[j], psf, cfg.acceptance) {
            Ok(_) => pairs.push(AnglePair { i, j, psf_angle: psf }),
            Err(e) => log::warn!("dropping angle pair ({i}, {j}): {e}"),
        }
    }
    AnglePairList::new(angles.to_vec(), pairs)
}

/// Axial apparent delays of one tracked pair on the measurement grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementMap {
    pub grid: ImagingGrid,
    /// Delay (s), `ix * nz + iz`.
    pub values: Vec<f64>,
    /// Peak NCC per pixel.
    pub quality: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisplacementMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Delays in ns as a CSV matrix; invalid pixels are written as NaN.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let ns: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v * 1e9 } else { f64::NAN })
            .collect();
        export::write_grid_csv(path, self.grid.nx, self.grid.nz, &ns)
    }

    pub fn write_quality_pgm(&self, path: &Path) -> Result<()> {
        let gray: Vec<u8> = self
            .quality
            .iter()
            .map(|q| (q.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        export::write_pgm(path, self.grid.nx, self.grid.nz, &gray)
    }
}

/// Zero-mean NCC of `a` and `b` windows at lag `lag` (samples, `b` deeper).
#[allow(clippy::too_many_arguments)]
fn ncc_at(
    a: &[f64],
    b: &[f64],
    nz: usize,
    lines: std::ops::Range<usize>,
    z0: usize,
    len: usize,
    lag: isize,
) -> f64 {
    let n = (lines.len() * len) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ix in lines {
        let ca = &a[ix * nz + z0..ix * nz + z0 + len];
        let start = (ix * nz + z0) as isize + lag;
        let cb = &b[start as usize..start as usize + len];
        for (&x, &y) in ca.iter().zip(cb) {
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (sab - sa * sb / n) / (va * vb).sqrt()
}

/// NCC peak and sub-sample offset at pixel `(ix, iz)` of `img`; `None` when
/// the window and search range do not fit.
fn track_pixel(
    img: &ImagingGrid,
    a: &[f64],
    b: &[f64],
    cfg: &TrackingConfig,
    ix: usize,
    iz: usize,
) -> Option<(f64, f64)> {
    let half_x = cfg.window_lateral / 2;
    let z0 = iz.checked_sub(cfg.window_axial / 2)?;
    let s = cfg.search as isize;
    if ix < half_x || ix + half_x >= img.nx || z0 < cfg.search {
        return None;
    }
    if z0 + cfg.window_axial + cfg.search > img.nz {
        return None;
    }
    let lines = ix - half_x..ix + half_x + 1;
    let scores: Vec<f64> = (-s..=s)
        .map(|lag| ncc_at(a, b, img.nz, lines.clone(), z0, cfg.window_axial, lag))
        .collect();
    let (k, &peak) = scores
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty lag range");
    if k == 0 || k == scores.len() - 1 {
        return Some((f64::NAN, peak));
    }
    let lag = k as f64 - cfg.search as f64;
    // An exact match is an integer shift; refinement would only add bias.
    if peak >= 1.0 - 1e-12 {
        return Some((lag, peak));
    }
    let (cm, c0, cp) = (scores[k - 1], peak, scores[k + 1]);
    let denom = cm - 2.0 * c0 + cp;
    let delta = if denom < 0.0 { 0.5 * (cm - cp) / denom } else { 0.0 };
    Some((lag + delta.clamp(-0.5, 0.5), peak))
}

/// Measurement grid with per-pixel shift, NCC peak and validity.
pub type ShiftField = (ImagingGrid, Vec<f64>, Vec<f64>, Vec<bool>);

/// Axial shift of `b` relative to `a` in samples at every measurement pixel.
/// Returns `(shift, quality, valid)` laid out on the measurement grid.
pub fn ncc_shift_samples(
    img: &ImagingGrid,
    a: &[f64],
    b: &[f64],
    cfg: &TrackingConfig,
) -> Result<ShiftField> {
    cfg.validate()?;
    if a.len() != img.len() || b.len() != img.len() {
        return Err(Error::Dimension("tracked frames do not match the imaging grid".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tracked frame"));
    }
    let meas = cfg.measurement_grid(img)?;
    let off_x = cfg.window_lateral / 2;
    let off_z = cfg.window_axial / 2 + cfg.search;
    let results: Vec<Option<(f64, f64)>> = (0..meas.len())
        .into_par_iter()
        .map(|p| {
            let (mx, mz) = (p / meas.nz, p % meas.nz);
            let ix = off_x + mx * cfg.stride_lateral;
            let iz = off_z + mz * cfg.stride_axial;
            track_pixel(img, a, b, cfg, ix, iz)
        })
        .collect();
    let mut shift = vec![0.0; meas.len()];
    let mut quality = vec![0.0; meas.len()];
    let mut valid = vec![false; meas.len()];
    for (p, r) in results.into_iter().enumerate() {
        if let Some((s, q)) = r {
            quality[p] = q;
            if s.is_finite() && q >= cfg.quality_threshold {
                shift[p] = s;
                valid[p] = true;
            }
        }
    }
    Ok((meas, shift, quality, valid))
}

/// Apparent delay map of frame `b` relative to frame `a`, both RF-domain on
/// `img`: axial shift times `2 sigma0 dz`.
pub fn ncc_displacement(
    img: &ImagingGrid,
    a: &[f64],
    b: &[f64],
    cfg: &TrackingConfig,
    sigma0: f64,
) -> Result<DisplacementMap> {
    let (grid, shift, quality, valid) = ncc_shift_samples(img, a, b, cfg)?;
    let to_time = 2.0 * sigma0 * img.dz;
    Ok(DisplacementMap {
        grid,
        values: shift.iter().map(|s| s * to_time).collect(),
        quality,
        valid,
    })
}

/// Project the axial delays onto the minor axis of a PSF tilted by
/// `psf_angle` and apply the calibration scale.
pub fn project_and_scale(dmap: &DisplacementMap, psf_angle: f64, cfg: &TrackingConfig) -> DisplacementMap {
    let factor = match cfg.projection {
        Projection::Cos => cfg.scale * psf_angle.cos(),
        Projection::InverseCos => cfg.scale / psf_angle.cos(),
    };
    DisplacementMap {
        grid: dmap.grid.clone(),
        values: dmap.values.iter().map(|v| v * factor).collect(),
        quality: dmap.quality.clone(),
        valid: dmap.valid.clone(),
    }
}

/// Stack per-pair maps pair-major (pixels `ix * nz + iz` within a pair) into
/// the measurement vector and the row mask for the differential matrix.
pub fn build_measurement_vector(
    maps: &[DisplacementMap],
    pairs: &AnglePairList,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != pairs.len() {
        return Err(Error::Dimension(format!(
            "{} displacement maps for {} angle pairs",
            maps.len(),
            pairs.len()
        )));
    }
    let mut delays = Vec::new();
    let mut mask = Vec::new();
    for m in maps {
        if m.grid != maps[0].grid {
            return Err(Error::Dimension("displacement maps on different grids".into()));
        }
        delays.extend(m.values.iter().zip(&m.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }));
        mask.extend_from_slice(&m.valid);
    }
    Ok((delays, mask))
}
