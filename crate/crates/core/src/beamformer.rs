//! Delay-and-sum beamforming of plane-wave channel data.
//!
//! Delays are `tau(n_c, x, z) = t_tx(x, z; theta) + t_rx(x, z -> n_c)` with
//! straight-ray times through a slowness map. [`das`] consumes an explicit
//! [`DelayField`]; [`Beamformer`] produces whole sets of frames without
//! storing delay tables, computing each pixel's receive times once and
//! reusing them for every frame.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::export;
use crate::forward_sim::RfChannelData;
use crate::geometry::{ApodizationSpec, ImagingGrid, Point2, TransducerArray};
use crate::raytrace::{
    homogeneous_receive_time, homogeneous_transmit_time, receive_time, transmit_time, PathMatrices,
};
use crate::slowness::SlownessMap;

/// Delays for one transmit angle, `values[n_c * npix + pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayField {
    pub grid: ImagingGrid,
    pub num_elements: usize,
    pub angle: f64,
    pub values: Vec<f64>,
}

impl DelayField {
    pub fn get(&self, n_c: usize, ix: usize, iz: usize) -> f64 {
        self.values[n_c * self.grid.len() + self.grid.linear_index(ix, iz)]
    }

    /// Closed-form delays in a homogeneous medium of slowness `slowness`.
    pub fn homogeneous(grid: &ImagingGrid, array: &TransducerArray, angle: f64, slowness: f64) -> Self {
        let pixels: Vec<Point2> = grid.positions().collect();
        let mut values = Vec::with_capacity(pixels.len() * array.num_elements());
        for &x in array.x_positions() {
            let e = Point2::new(x, 0.0);
            values.extend(pixels.iter().map(|&p| {
                homogeneous_transmit_time(p, angle, slowness) + homogeneous_receive_time(p, e, slowness)
            }));
        }
        Self {
            grid: grid.clone(),
            num_elements: array.num_elements(),
            angle,
            values,
        }
    }
}

/// Delays for angle index `a` of the path matrices under `map`.
pub fn compute_delays(map: &SlownessMap, a: usize, paths: &PathMatrices) -> Result<DelayField> {
    let values = paths.delays(map, a)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("delay field"));
    }
    Ok(DelayField {
        grid: paths.imaging.clone(),
        num_elements: paths.num_elements,
        angle: paths.angles[a],
        values,
    })
}

/// Which slowness model produced a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Global { sound_speed: f64 },
    Adaptive { map_id: String },
    Explicit,
}

/// Short content hash identifying a slowness map.
pub fn map_id(map: &SlownessMap) -> String {
    let mut h = Sha256::new();
    for v in map.values.iter().chain([&map.exterior]) {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// RF-domain image, `values[ix * nz + iz]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformedFrame {
    pub grid: ImagingGrid,
    pub tx_angle: f64,
    pub rx_angle: f64,
    pub provenance: Provenance,
    #[serde(skip)]
    pub values: Vec<f64>,
}

const FRAME_MAGIC: &[u8; 8] = b"SOSFRM01";

impl BeamformedFrame {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        export::write_grid_csv(path, self.grid.nx, self.grid.nz, &self.values)
    }

    /// Binary container: magic, u64 header length, JSON header, f64 values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(self).map_err(|e| Error::format(path, e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        bytes.extend_from_slice(FRAME_MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != FRAME_MAGIC {
            return Err(Error::format(path, "not a frame container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let mut frame: BeamformedFrame =
            serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let data = &bytes[16 + hlen..];
        if data.len() != 8 * frame.grid.len() {
            return Err(Error::format(path, "sample count does not match the grid"));
        }
        frame.values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(frame)
    }
}

fn check_rf(rf: &RfChannelData, array: &TransducerArray) -> Result<()> {
    if rf.num_channels != array.num_elements() {
        return Err(Error::Dimension(format!(
            "RF data has {} channels, array has {} elements",
            rf.num_channels,
            array.num_elements()
        )));
    }
    rf.check_finite()
}

/// Linearly interpolated sample of `channel` at time `t`; zero outside.
#[inline]
fn sample_at(channel: &[f64], fs: f64, t: f64) -> f64 {
    let k = t * fs;
    if !(k >= 0.0) {
        return 0.0;
    }
    let k0 = k as usize;
    if k0 + 1 >= channel.len() {
        return 0.0;
    }
    let f = k - k0 as f64;
    channel[k0] * (1.0 - f) + channel[k0 + 1] * f
}

/// Reference delay-and-sum with an explicit delay field.
pub fn das(
    rf: &RfChannelData,
    delays: &DelayField,
    apod: &ApodizationSpec,
    array: &TransducerArray,
    rx_angle: f64,
) -> Result<BeamformedFrame> {
    check_rf(rf, array)?;
    if delays.num_elements != array.num_elements() {
        return Err(Error::Dimension("delay field and array disagree on element count".into()));
    }
    let grid = &delays.grid;
    let npix = grid.len();
    let xs = array.x_positions();
    let values = (0..npix)
        .into_par_iter()
        .map(|p| {
            let pixel = Point2::new(grid.x(p / grid.nz), grid.z(p % grid.nz));
            let (lo, hi) = apod.active_range(array, pixel, rx_angle);
            (lo..hi)
                .map(|n| {
                    let w = apod.weight(xs[n], pixel, rx_angle);
                    w * sample_at(rf.channel(n), rf.sampling_rate, delays.values[n * npix + p])
                })
                .sum()
        })
        .collect();
    Ok(BeamformedFrame {
        grid: grid.clone(),
        tx_angle: delays.angle,
        rx_angle,
        provenance: Provenance::Explicit,
        values,
    })
}

/// Coherent sum of frames on identical grids.
pub fn compound(frames: &[BeamformedFrame]) -> Result<BeamformedFrame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("nothing to compound".into()))?;
    let mut out = first.clone();
    for f in &frames[1..] {
        if f.grid != first.grid {
            return Err(Error::Dimension("compounded frames are on different grids".into()));
        }
        out.values.iter_mut().zip(&f.values).for_each(|(a, b)| *a += b);
    }
    if frames.len() > 1 {
        out.tx_angle = 0.0;
    }
    Ok(out)
}

/// How delays are obtained.
#[derive(Debug, Clone)]
pub enum DelayModel {
    /// Homogeneous medium of the given slowness (closed form).
    Global { slowness: f64 },
    /// Straight rays through a map. Uniform maps use the closed form unless
    /// `force_raytrace` is set.
    Adaptive { map: SlownessMap, force_raytrace: bool },
}

impl DelayModel {
    pub fn global_sound_speed(c0: f64) -> Self {
        DelayModel::Global { slowness: 1.0 / c0 }
    }

    pub fn adaptive(map: SlownessMap) -> Self {
        DelayModel::Adaptive {
            map,
            force_raytrace: false,
        }
    }

    fn resolved(&self) -> Resolved<'_> {
        match self {
            DelayModel::Global { slowness } => Resolved::Closed(*slowness),
            DelayModel::Adaptive { map, force_raytrace } if !force_raytrace && map.is_uniform() => {
                Resolved::Closed(map.exterior)
            }
            DelayModel::Adaptive { map, .. } => Resolved::Ray(map),
        }
    }

    fn provenance(&self) -> Provenance {
        match self {
            DelayModel::Global { slowness } => Provenance::Global {
                sound_speed: 1.0 / slowness,
            },
            DelayModel::Adaptive { map, .. } => Provenance::Adaptive { map_id: map_id(map) },
        }
    }
}

enum Resolved<'a> {
    Closed(f64),
    Ray(&'a SlownessMap),
}

impl Resolved<'_> {
    fn tx(&self, p: Point2, angle: f64) -> f64 {
        match self {
            Resolved::Closed(s) => homogeneous_transmit_time(p, angle, *s),
            Resolved::Ray(m) => transmit_time(m, p, angle),
        }
    }

    fn rx(&self, p: Point2, e: Point2) -> f64 {
        match self {
            Resolved::Closed(s) => homogeneous_receive_time(p, e, *s),
            Resolved::Ray(m) => receive_time(m, p, e),
        }
    }
}

/// One output frame: which RF set to use and the receive steering angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub rf: usize,
    pub rx_angle: f64,
}

/// Fused delay computation and delay-and-sum over an imaging grid.
#[derive(Debug, Clone)]
pub struct Beamformer {
    pub grid: ImagingGrid,
    pub array: TransducerArray,
    pub apod: ApodizationSpec,
}

impl Beamformer {
    pub fn new(grid: ImagingGrid, array: TransducerArray, apod: ApodizationSpec) -> Result<Self> {
        grid.validate()?;
        apod.validate()?;
        Ok(Self { grid, array, apod })
    }

    fn check(&self, rfs: &[RfChannelData], specs: &[FrameSpec]) -> Result<()> {
        for rf in rfs {
            check_rf(rf, &self.array)?;
        }
        for s in specs {
            if s.rf >= rfs.len() {
                return Err(Error::IndexOutOfRange {
                    what: "RF set",
                    index: s.rf,
                    limit: rfs.len(),
                });
            }
        }
        Ok(())
    }

    /// Values of every frame in `specs` for one lateral line.
    fn line(
        &self,
        ix: usize,
        rfs: &[RfChannelData],
        specs: &[FrameSpec],
        model: &Resolved,
        mut emit: impl FnMut(usize, usize, f64),
    ) {
        let xs = self.array.x_positions();
        // Frames sharing a receive angle share aperture weights.
        let mut steer: Vec<f64> = Vec::new();
        let group: Vec<usize> = specs
            .iter()
            .map(|s| match steer.iter().position(|a| a.to_bits() == s.rx_angle.to_bits()) {
                Some(g) => g,
                None => {
                    steer.push(s.rx_angle);
                    steer.len() - 1
                }
            })
            .collect();
        let mut rx = vec![0.0; xs.len()];
        let mut weights = vec![vec![0.0; xs.len()]; steer.len()];
        let mut ranges = vec![(0, 0); steer.len()];
        for iz in 0..self.grid.nz {
            let p = Point2::new(self.grid.x(ix), self.grid.z(iz));
            let (mut lo, mut hi) = (usize::MAX, 0);
            for ((r, w), &angle) in ranges.iter_mut().zip(weights.iter_mut()).zip(&steer) {
                *r = self.apod.active_range(&self.array, p, angle);
                for n in r.0..r.1 {
                    w[n] = self.apod.weight(xs[n], p, angle);
                }
                if r.1 > r.0 {
                    lo = lo.min(r.0);
                    hi = hi.max(r.1);
                }
            }
            for n in lo..hi {
                rx[n] = model.rx(p, Point2::new(xs[n], 0.0));
            }
            for (f, (s, &g)) in specs.iter().zip(&group).enumerate() {
                let (a, b) = ranges[g];
                if b <= a {
                    emit(f, iz, 0.0);
                    continue;
                }
                let data = &rfs[s.rf];
                let t_tx = model.tx(p, data.angle);
                let w = &weights[g];
                let mut acc = 0.0;
                for n in a..b {
                    acc += w[n] * sample_at(data.channel(n), data.sampling_rate, t_tx + rx[n]);
                }
                emit(f, iz, acc);
            }
        }
    }

    /// Beamform every frame in `specs`.
    pub fn frames(
        &self,
        rfs: &[RfChannelData],
        specs: &[FrameSpec],
        model: &DelayModel,
    ) -> Result<Vec<BeamformedFrame>> {
        self.check(rfs, specs)?;
        let resolved = model.resolved();
        let nz = self.grid.nz;
        let lines: Vec<Vec<f64>> = (0..self.grid.nx)
            .into_par_iter()
            .map(|ix| {
                let mut out = vec![0.0; specs.len() * nz];
                self.line(ix, rfs, specs, &resolved, |f, iz, v| out[f * nz + iz] = v);
                out
            })
            .collect();
        let provenance = model.provenance();
        Ok(specs
            .iter()
            .enumerate()
            .map(|(f, s)| {
                let mut values = Vec::with_capacity(self.grid.len());
                for line in &lines {
                    values.extend_from_slice(&line[f * nz..(f + 1) * nz]);
                }
                BeamformedFrame {
                    grid: self.grid.clone(),
                    tx_angle: rfs[s.rf].angle,
                    rx_angle: s.rx_angle,
                    provenance: provenance.clone(),
                    values,
                }
            })
            .collect())
    }

    /// Coherent compound of all RF sets received without steering. Equal,
    /// bit for bit, to [`compound`] of the individual frames.
    pub fn compound(&self, rfs: &[RfChannelData], model: &DelayModel) -> Result<BeamformedFrame> {
        let specs: Vec<FrameSpec> = (0..rfs.len()).map(|rf| FrameSpec { rf, rx_angle: 0.0 }).collect();
        self.check(rfs, &specs)?;
        if specs.is_empty() {
            return Err(Error::Config("nothing to compound".into()));
        }
        let resolved = model.resolved();
        let nz = self.grid.nz;
        let lines: Vec<Vec<f64>> = (0..self.grid.nx)
            .into_par_iter()
            .map(|ix| {
                let mut out = vec![0.0; nz];
                self.line(ix, rfs, &specs, &resolved, |f, iz, v| {
                    if f == 0 {
                        out[iz] = v
                    } else {
                        out[iz] += v
                    }
                });
                out
            })
            .collect();
        Ok(BeamformedFrame {
            grid: self.grid.clone(),
            tx_angle: if rfs.len() == 1 { rfs[0].angle } else { 0.0 },
            rx_angle: 0.0,
            provenance: model.provenance(),
            values: lines.concat(),
        })
    }
}

/// Envelope magnitude on the imaging grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeImage {
    pub grid: ImagingGrid,
    pub magnitude: Vec<f64>,
}

/// dB floor used for zero-magnitude pixels.
pub const DB_FLOOR: f64 = -300.0;

impl EnvelopeImage {
    pub fn max(&self) -> f64 {
        self.magnitude.iter().copied().fold(0.0, f64::max)
    }

    /// `20 log10(mag / max)`, floored at [`DB_FLOOR`].
    pub fn log_compress(&self) -> Result<Vec<f64>> {
        let max = self.max();
        if !(max > 0.0) {
            return Err(Error::Numerical("log compression of an all-zero envelope".into()));
        }
        Ok(self
            .magnitude
            .iter()
            .map(|&m| (20.0 * (m / max).log10()).max(DB_FLOOR))
            .collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        export::write_grid_csv(path, self.grid.nx, self.grid.nz, &self.magnitude)
    }

    /// B-mode image over `dynamic_range` dB.
    pub fn write_pgm(&self, path: &Path, dynamic_range: f64) -> Result<()> {
        let db = self.log_compress()?;
        export::write_pgm(path, self.grid.nx, self.grid.nz, &export::db_to_gray(&db, dynamic_range))
    }
}

fn analytic_magnitude(line: &[f64], fwd: &Arc<dyn Fft<f64>>, inv: &Arc<dyn Fft<f64>>) -> Vec<f64> {
    let n = fwd.len();
    let mut buf: Vec<Complex<f64>> = line
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fwd.process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || k == n / 2 {
            continue;
        }
        *c *= if k < n / 2 { 2.0 } else { 0.0 };
    }
    inv.process(&mut buf);
    buf[..line.len()].iter().map(|c| c.norm() / n as f64).collect()
}

/// Magnitude of the analytic signal along every axial line, zero padded to
/// a power of two at least twice the line length.
pub fn envelope(frame: &BeamformedFrame) -> Result<EnvelopeImage> {
    let nz = frame.grid.nz;
    if nz < 8 {
        return Err(Error::Config(format!("envelope needs >= 8 axial samples, got {nz}")));
    }
    if frame.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("beamformed frame"));
    }
    let n = (2 * nz).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let magnitude = frame
        .values
        .par_chunks(nz)
        .flat_map_iter(|line| analytic_magnitude(line, &fwd, &inv))
        .collect();
    Ok(EnvelopeImage {
        grid: frame.grid.clone(),
        magnitude,
    })
}
