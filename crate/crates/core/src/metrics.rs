//! Point-target metrics: envelope peak localisation, lateral FWHM and
//! global speed-of-sound sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamformer::{envelope, Beamformer, DelayModel, EnvelopeImage};
use crate::error::{Error, Result};
use crate::forward_sim::RfChannelData;
use crate::geometry::Point2;
use crate::slowness::SlownessMap;

/// Default ROI radius around each true scatterer (m).
pub const DEFAULT_ROI_RADIUS: f64 = 1.5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// Maximum lies on the ROI boundary; the true peak may be outside it.
    RoiBoundary,
    /// No unique maximum in the ROI.
    Flat,
    /// The ROI does not intersect the image.
    OutsideImage,
    /// The lateral profile does not fall to half maximum inside the image.
    HalfMaxNotCrossed,
}

impl MetricFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricFlag::RoiBoundary => "roi_boundary",
            MetricFlag::Flat => "flat",
            MetricFlag::OutsideImage => "outside_image",
            MetricFlag::HalfMaxNotCrossed => "half_max_not_crossed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub position: Point2,
    /// Integer pixel of the maximum.
    pub pixel: (usize, usize),
    pub value: f64,
}

/// Sub-sample vertex of the parabola through `(-1, a), (0, b), (1, c)`,
/// fitted to log values when all three are positive (exact for Gaussians).
fn vertex(a: f64, b: f64, c: f64) -> f64 {
    let (a, b, c) = if a > 0.0 && b > 0.0 && c > 0.0 {
        (a.ln(), b.ln(), c.ln())
    } else {
        (a, b, c)
    };
    let denom = a - 2.0 * b + c;
    if denom < 0.0 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Envelope maximum within `roi_radius` of `center`, refined per axis by
/// three-point parabolic interpolation.
pub fn detect_peak(env: &EnvelopeImage, center: Point2, roi_radius: f64) -> std::result::Result<Peak, MetricFlag> {
    let g = &env.grid;
    let in_roi = |ix: usize, iz: usize| {
        let (x, z) = (g.x(ix), g.z(iz));
        (x - center.x).hypot(z - center.z) <= roi_radius
    };
    let (fx, fz) = g.fractional_index(center);
    let rx = (roi_radius / g.dx).ceil() + 1.0;
    let rz = (roi_radius / g.dz).ceil() + 1.0;
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0) as usize;
    if fx + rx < 0.0 || fz + rz < 0.0 || fx - rx > (g.nx - 1) as f64 || fz - rz > (g.nz - 1) as f64 {
        return Err(MetricFlag::OutsideImage);
    }
    let (x0, x1) = (clamp(fx - rx, g.nx), clamp(fx + rx, g.nx));
    let (z0, z1) = (clamp(fz - rz, g.nz), clamp(fz + rz, g.nz));
    let mut best: Option<((usize, usize), f64)> = None;
    let mut count = 0;
    let mut min = f64::INFINITY;
    for ix in x0..=x1 {
        for iz in z0..=z1 {
            if !in_roi(ix, iz) {
                continue;
            }
            count += 1;
            let v = env.magnitude[g.linear_index(ix, iz)];
            min = min.min(v);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((ix, iz), v));
            }
        }
    }
    let ((ix, iz), value) = best.ok_or(MetricFlag::OutsideImage)?;
    if count < 2 || value <= min {
        return Err(MetricFlag::Flat);
    }
    let at = |ix: usize, iz: usize| env.magnitude[g.linear_index(ix, iz)];
    let on_edge = ix == 0
        || iz == 0
        || ix + 1 >= g.nx
        || iz + 1 >= g.nz
        || !in_roi(ix - 1, iz)
        || !in_roi(ix + 1, iz)
        || !in_roi(ix, iz - 1)
        || !in_roi(ix, iz + 1);
    if on_edge {
        return Err(MetricFlag::RoiBoundary);
    }
    let dxs = vertex(at(ix - 1, iz), value, at(ix + 1, iz));
    let dzs = vertex(at(ix, iz - 1), value, at(ix, iz + 1));
    Ok(Peak {
        position: Point2::new(g.x(ix) + dxs * g.dx, g.z(iz) + dzs * g.dz),
        pixel: (ix, iz),
        value,
    })
}

/// Full width at half maximum of the lateral profile through the peak
/// pixel, with linear interpolation of the half-maximum crossings.
pub fn fwhm_lateral(env: &EnvelopeImage, peak: &Peak) -> std::result::Result<f64, MetricFlag> {
    let g = &env.grid;
    let (ix, iz) = peak.pixel;
    let profile = |k: usize| env.magnitude[g.linear_index(k, iz)];
    let top = profile(ix);
    if !(top > 0.0) {
        return Err(MetricFlag::Flat);
    }
    let half = 0.5 * top;
    let mut left = None;
    for k in (0..ix).rev() {
        let (v, inner) = (profile(k), profile(k + 1));
        if v < half {
            left = Some(k as f64 + (half - v) / (inner - v));
            break;
        }
    }
    let mut right = None;
    for k in ix + 1..g.nx {
        let (v, inner) = (profile(k), profile(k - 1));
        if v < half {
            right = Some(k as f64 - (half - v) / (inner - v));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok((r - l) * g.dx),
        _ => Err(MetricFlag::HalfMaxNotCrossed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScattererReport {
    pub truth: Point2,
    pub peak: Option<Point2>,
    pub fwhm: Option<f64>,
    /// Signed `peak - truth` (m).
    pub lateral_error: Option<f64>,
    pub axial_error: Option<f64>,
    pub flag: Option<MetricFlag>,
}

impl ScattererReport {
    pub fn is_valid(&self) -> bool {
        self.flag.is_none()
    }
}

pub fn evaluate_scatterers(env: &EnvelopeImage, truths: &[Point2], roi_radius: f64) -> Vec<ScattererReport> {
    truths
        .iter()
        .map(|&t| match detect_peak(env, t, roi_radius) {
            Err(flag) => ScattererReport {
                truth: t,
                peak: None,
                fwhm: None,
                lateral_error: None,
                axial_error: None,
                flag: Some(flag),
            },
            Ok(peak) => {
                let fwhm = fwhm_lateral(env, &peak);
                ScattererReport {
                    truth: t,
                    peak: Some(peak.position),
                    fwhm: fwhm.ok(),
                    lateral_error: Some(peak.position.x - t.x),
                    axial_error: Some(peak.position.z - t.z),
                    flag: fwhm.err(),
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and population standard deviation; NaN for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub lateral_fwhm: Summary,
    /// Absolute errors.
    pub lateral_error: Summary,
    pub axial_error: Summary,
    pub flagged: usize,
}

/// Summaries over the reports accepted by `select`; flagged reports are
/// counted and excluded.
pub fn summarize(reports: &[ScattererReport], select: impl Fn(&ScattererReport) -> bool) -> MetricSummary {
    let chosen: Vec<&ScattererReport> = reports.iter().filter(|r| select(r)).collect();
    let valid: Vec<&&ScattererReport> = chosen.iter().filter(|r| r.is_valid()).collect();
    let pick = |f: &dyn Fn(&ScattererReport) -> Option<f64>| -> Vec<f64> {
        valid.iter().filter_map(|r| f(r)).collect()
    };
    MetricSummary {
        lateral_fwhm: Summary::of(&pick(&|r| r.fwhm)),
        lateral_error: Summary::of(&pick(&|r| r.lateral_error.map(f64::abs))),
        axial_error: Summary::of(&pick(&|r| r.axial_error.map(f64::abs))),
        flagged: chosen.len() - valid.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepLabel {
    Global(f64),
    Adaptive,
}

impl SweepLabel {
    pub fn text(&self) -> String {
        match self {
            SweepLabel::Global(c) => format!("{c}"),
            SweepLabel::Adaptive => "adaptive".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: SweepLabel,
    pub reports: Vec<ScattererReport>,
}

/// Sound speeds from `lo` to `hi` inclusive in steps of `step` (m/s).
pub fn sos_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// Compound, envelope and evaluate for every global sound speed in `c0s`
/// and, when given, the adaptive map (appended as the last row).
pub fn sweep_global_sos(
    bf: &Beamformer,
    rfs: &[RfChannelData],
    c0s: &[f64],
    adaptive: Option<&SlownessMap>,
    truths: &[Point2],
    roi_radius: f64,
) -> Result<Vec<SweepRow>> {
    let mut models: Vec<(SweepLabel, DelayModel)> = c0s
        .iter()
        .map(|&c| (SweepLabel::Global(c), DelayModel::global_sound_speed(c)))
        .collect();
    if let Some(map) = adaptive {
        models.push((SweepLabel::Adaptive, DelayModel::adaptive(map.clone())));
    }
    models
        .into_par_iter()
        .map(|(label, model)| {
            let frame = bf.compound(rfs, &model)?;
            let env = envelope(&frame)?;
            Ok(SweepRow {
                label,
                reports: evaluate_scatterers(&env, truths, roi_radius),
            })
        })
        .collect()
}

/// Global row with the smallest value of `key` (NaN rows ignored).
pub fn best_global(rows: &[SweepRow], key: impl Fn(&SweepRow) -> f64) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| matches!(r.label, SweepLabel::Global(_)))
        .filter(|r| key(r).is_finite())
        .min_by(|a, b| key(a).total_cmp(&key(b)))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per (label, metric) with mean, std and n.
pub fn write_summary_csv(path: &Path, rows: &[SweepRow], select: impl Fn(&ScattererReport) -> bool) -> Result<()> {
    let mut out = String::from("label,metric,mean,std,n,flagged\n");
    for row in rows {
        let s = summarize(&row.reports, &select);
        for (name, m) in [
            ("lateral_fwhm_m", s.lateral_fwhm),
            ("lateral_error_m", s.lateral_error),
            ("axial_error_m", s.axial_error),
        ] {
            let _ = writeln!(out, "{},{name},{},{},{},{}", row.label.text(), m.mean, m.std, m.n, s.flagged);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row per (label, scatterer).
pub fn write_detail_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out =
        String::from("label,index,true_x_m,true_z_m,peak_x_m,peak_z_m,lateral_fwhm_m,lateral_error_m,axial_error_m,flag\n");
    for row in rows {
        for (k, r) in row.reports.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{k},{},{},{},{},{},{},{},{}",
                row.label.text(),
                r.truth.x,
                r.truth.z,
                opt(r.peak.map(|p| p.x)),
                opt(r.peak.map(|p| p.z)),
                opt(r.fwhm),
                opt(r.lateral_error),
                opt(r.axial_error),
                r.flag.map(|f| f.as_str()).unwrap_or("")
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Markdown table comparing the best global speed of sound per metric with
/// the adaptive result (values in um, mean +- std).
pub fn table_summary(rows: &[SweepRow], select: impl Fn(&ScattererReport) -> bool) -> String {
    let summary = |r: &SweepRow| summarize(&r.reports, &select);
    let cell = |s: Summary| {
        if s.n == 0 {
            "n/a".to_string()
        } else {
            format!("{:.0} ± {:.0}", s.mean * 1e6, s.std * 1e6)
        }
    };
    let mut out = String::from("| beamforming | lateral FWHM (um) | lateral error (um) | axial error (um) |\n");
    out.push_str("|---|---|---|---|\n");
    let metrics: [fn(&MetricSummary) -> Summary; 3] =
        [|m| m.lateral_fwhm, |m| m.lateral_error, |m| m.axial_error];
    let mut global = String::from("| best global SoS |");
    for f in metrics {
        match best_global(rows, |r| f(&summary(r)).mean) {
            Some(best) => {
                let _ = write!(global, " {} (c0 = {}) |", cell(f(&summary(best))), best.label.text());
            }
            None => global.push_str(" n/a |"),
        }
    }
    out.push_str(&global);
    out.push('\n');
    if let Some(a) = rows.iter().find(|r| r.label == SweepLabel::Adaptive) {
        let s = summary(a);
        let _ = writeln!(
            out,
            "| adaptive | {} | {} | {} |",
            cell(s.lateral_fwhm),
            cell(s.lateral_error),
            cell(s.axial_error)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImagingGrid;

    fn gaussian_image(cx: f64, cz: f64, sx: f64, sz: f64) -> EnvelopeImage {
        let grid = ImagingGrid::new(81, 61, 37.5e-6, 75e-6, Point2::new(-1.5e-3, 1e-3)).unwrap();
        let magnitude = grid
            .positions()
            .map(|p| (-0.5 * (((p.x - cx) / sx).powi(2) + ((p.z - cz) / sz).powi(2))).exp())
            .collect();
        EnvelopeImage { grid, magnitude }
    }

    #[test]
    fn mid_pixel_gaussian_peak() {
        let g = gaussian_image(0.5 * 37.5e-6, 3.25e-3 + 0.5 * 75e-6, 150e-6, 200e-6);
        let p = detect_peak(&g, Point2::new(0.0, 3.2e-3), DEFAULT_ROI_RADIUS).unwrap();
        assert!((p.position.x - 0.5 * 37.5e-6).abs() < 0.05 * 37.5e-6);
        assert!((p.position.z - 3.2875e-3).abs() < 0.05 * 75e-6);
    }

    #[test]
    fn peak_on_node_and_flat_roi() {
        let g = gaussian_image(0.0, 3.25e-3, 150e-6, 200e-6);
        let p = detect_peak(&g, Point2::new(0.1e-3, 3.2e-3), DEFAULT_ROI_RADIUS).unwrap();
        assert!(p.position.x.abs() < 1e-12 && (p.position.z - 3.25e-3).abs() < 1e-12);
        let flat = EnvelopeImage { grid: g.grid.clone(), magnitude: vec![1.0; g.magnitude.len()] };
        assert_eq!(detect_peak(&flat, Point2::new(0.0, 3e-3), 1e-3), Err(MetricFlag::Flat));
    }

    #[test]
    fn peak_outside_roi_is_flagged() {
        let g = gaussian_image(1.0e-3, 3.25e-3, 100e-6, 200e-6);
        assert_eq!(
            detect_peak(&g, Point2::new(-0.5e-3, 3.25e-3), 0.6e-3).unwrap_err(),
            MetricFlag::RoiBoundary
        );
    }

    #[test]
    fn gaussian_and_rect_fwhm() {
        let s = 120e-6;
        let g = gaussian_image(0.0, 3.25e-3, s, 200e-6);
        let p = detect_peak(&g, Point2::new(0.0, 3.25e-3), DEFAULT_ROI_RADIUS).unwrap();
        let w = fwhm_lateral(&g, &p).unwrap();
        assert!((w / (2.3548 * s) - 1.0).abs() < 0.01, "{w}");

        let mut rect = g.clone();
        for ix in 0..rect.grid.nx {
            for iz in 0..rect.grid.nz {
                let inside = (30..42).contains(&ix) && (20..40).contains(&iz);
                rect.magnitude[rect.grid.linear_index(ix, iz)] = if inside { 1.0 } else { 0.0 };
            }
        }
        let p = Peak { position: Point2::new(0.0, 0.0), pixel: (36, 30), value: 1.0 };
        let w = fwhm_lateral(&rect, &p).unwrap();
        assert!((w - 12.0 * 37.5e-6).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_amplitude_scale() {
        let g = gaussian_image(10e-6, 3.3e-3, 130e-6, 180e-6);
        let mut h = g.clone();
        h.magnitude.iter_mut().for_each(|v| *v *= 7.5);
        let t = [Point2::new(0.0, 3.3e-3)];
        let a = evaluate_scatterers(&g, &t, DEFAULT_ROI_RADIUS);
        let b = evaluate_scatterers(&h, &t, DEFAULT_ROI_RADIUS);
        assert!((a[0].fwhm.unwrap() - b[0].fwhm.unwrap()).abs() < 1e-15);
        assert!((a[0].lateral_error.unwrap() - b[0].lateral_error.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
        assert!(Summary::of(&[]).mean.is_nan());
        assert_eq!(sos_range(1490.0, 1550.0, 5.0).len(), 13);
    }
}
