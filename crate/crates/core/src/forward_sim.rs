//! Ray-based stand-in for a full-wave simulation.
//!
//! A phantom carries a true slowness map on the reconstruction grid, a grid
//! of bright point scatterers and a sparse set of weak speckle scatterers.
//! Channel data is synthesised by placing a Gaussian-enveloped cosine at the
//! straight-ray two-way arrival time of every scatterer on every element,
//! with travel times integrated through the true map. The same straight-ray
//! model is used by the beamformer and the tomographic inversion, so
//! forward and inverse problems are exactly consistent. Diffraction,
//! multiple scattering and attenuation are not modelled.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionSpec, ImagingGrid, Point2, ReconGrid, TransducerArray};
use crate::raytrace::{receive_time, transmit_time};
use crate::slowness::SlownessMap;
use crate::sparse::SparseRayMatrix;

// ---------------------------------------------------------------------------
// Phantom
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Point2,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub center: Point2,
    pub radius: f64,
    /// Speed of sound inside the inclusion (m/s).
    pub sound_speed: f64,
}

impl Inclusion {
    pub fn contains(&self, p: Point2) -> bool {
        p.distance(&self.center) < self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScattererGrid {
    /// Lateral positions of the grid columns (m).
    pub lateral: Vec<f64>,
    /// Depths of the grid rows (m).
    pub axial: Vec<f64>,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeckleSpec {
    /// Fraction of medium pixels carrying a speckle scatterer.
    pub density: f64,
    /// Pitch of the medium pixel lattice (m).
    pub pitch: f64,
    /// Reflectivity range relative to the point-scatterer reflectivity.
    pub relative_reflectivity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub background_sound_speed: f64,
    pub inclusion: Option<Inclusion>,
    pub scatterers: ScattererGrid,
    pub speckle: Option<SpeckleSpec>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            background_sound_speed: 1500.0,
            inclusion: Some(Inclusion {
                center: Point2::new(0.0, 15e-3),
                radius: 5e-3,
                sound_speed: 1545.0,
            }),
            // 5 rows x 6 columns
            scatterers: ScattererGrid {
                lateral: vec![-10e-3, -6e-3, -2e-3, 2e-3, 6e-3, 10e-3],
                axial: vec![6e-3, 12e-3, 18e-3, 24e-3, 30e-3],
                reflectivity: 1.0,
            },
            speckle: Some(SpeckleSpec {
                density: 0.1,
                pitch: 75e-6,
                relative_reflectivity: (0.01, 0.05),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub slowness: SlownessMap,
    pub background_sound_speed: f64,
    pub inclusion: Option<Inclusion>,
    /// Bright point targets used for resolution and localization metrics.
    pub scatterers: Vec<Scatterer>,
    pub speckle: Vec<Scatterer>,
}

impl Phantom {
    pub fn all_scatterers(&self) -> impl Iterator<Item = &Scatterer> {
        self.scatterers.iter().chain(&self.speckle)
    }

    /// Cells whose centre lies inside the inclusion.
    pub fn inclusion_mask(&self) -> Vec<bool> {
        let g = &self.slowness.grid;
        (0..g.nx)
            .flat_map(|ix| (0..g.nz).map(move |iz| (ix, iz)))
            .map(|(ix, iz)| {
                self.inclusion
                    .map(|inc| inc.contains(g.cell_center(ix, iz)))
                    .unwrap_or(false)
            })
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Build the simulation phantom: background medium, optional circular
/// inclusion rasterised onto `recon`, a point-scatterer grid and random
/// speckle over `region`.
pub fn make_simulation_phantom(
    cfg: &PhantomConfig,
    recon: &ReconGrid,
    region: &ImagingGrid,
    seed: u64,
) -> Result<Phantom> {
    if !(1000.0..=2000.0).contains(&cfg.background_sound_speed) {
        return Err(Error::Config("background sound speed outside [1000, 2000] m/s".into()));
    }
    let (x0, x1, z0, z1) = region.bounds();
    let inside = |p: Point2| p.x >= x0 && p.x <= x1 && p.z >= z0 && p.z <= z1;
    let bg = 1.0 / cfg.background_sound_speed;
    let mut values = vec![bg; recon.len()];
    if let Some(inc) = cfg.inclusion {
        if !(1000.0..=2000.0).contains(&inc.sound_speed) || inc.radius < 0.0 {
            return Err(Error::Config("inclusion sound speed or radius invalid".into()));
        }
        let c = inc.center;
        if !(inside(Point2::new(c.x - inc.radius, c.z - inc.radius))
            && inside(Point2::new(c.x + inc.radius, c.z + inc.radius)))
        {
            return Err(Error::Config(format!(
                "inclusion at ({:.2}, {:.2}) mm radius {:.2} mm does not fit the imaging region",
                c.x * 1e3,
                c.z * 1e3,
                inc.radius * 1e3
            )));
        }
        for ix in 0..recon.nx {
            for iz in 0..recon.nz {
                if inc.contains(recon.cell_center(ix, iz)) {
                    values[recon.cell_index(ix, iz)] = 1.0 / inc.sound_speed;
                }
            }
        }
    }
    let slowness = SlownessMap::new(recon.clone(), values, bg)?;

    let grid = &cfg.scatterers;
    let mut scatterers = Vec::with_capacity(grid.lateral.len() * grid.axial.len());
    for &z in &grid.axial {
        for &x in &grid.lateral {
            let p = Point2::new(x, z);
            if !inside(p) {
                return Err(Error::Config(format!(
                    "scatterer at ({:.2}, {:.2}) mm lies outside the imaging region",
                    x * 1e3,
                    z * 1e3
                )));
            }
            scatterers.push(Scatterer {
                position: p,
                reflectivity: grid.reflectivity,
            });
        }
    }

    let mut speckle = Vec::new();
    if let Some(sp) = cfg.speckle {
        if !(0.0..=1.0).contains(&sp.density) || !(sp.pitch > 0.0) {
            return Err(Error::Config("speckle density must lie in [0, 1] and pitch be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mx = ((x1 - x0) / sp.pitch).floor() as usize + 1;
        let mz = ((z1 - z0) / sp.pitch).floor() as usize + 1;
        let total = mx * mz;
        let count = (sp.density * total as f64).round() as usize;
        let mut picked: Vec<usize> = sample(&mut rng, total, count).into_vec();
        picked.sort_unstable();
        let (lo, hi) = sp.relative_reflectivity;
        for k in picked {
            let p = Point2::new(x0 + (k / mz) as f64 * sp.pitch, z0 + (k % mz) as f64 * sp.pitch);
            let r = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            speckle.push(Scatterer {
                position: p,
                reflectivity: r * grid.reflectivity,
            });
        }
    }

    Ok(Phantom {
        slowness,
        background_sound_speed: cfg.background_sound_speed,
        inclusion: cfg.inclusion,
        scatterers,
        speckle,
    })
}

// ---------------------------------------------------------------------------
// Pulse and channel data
// ---------------------------------------------------------------------------

/// Gaussian-enveloped cosine `exp(-t^2 / 2 s^2) cos(2 pi f0 t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub center_frequency: f64,
    /// Envelope standard deviation (s).
    pub sigma: f64,
}

impl Pulse {
    /// Pulse whose amplitude spectrum spans `fractional_bandwidth * f0` at -6 dB.
    pub fn from_bandwidth(center_frequency: f64, fractional_bandwidth: f64) -> Self {
        let half_band = 0.5 * fractional_bandwidth * center_frequency;
        let sigma_f = half_band / (2.0 * std::f64::consts::LN_2).sqrt();
        Self {
            center_frequency,
            sigma: 1.0 / (2.0 * std::f64::consts::PI * sigma_f),
        }
    }

    pub fn envelope(&self, t: f64) -> f64 {
        (-0.5 * (t / self.sigma).powi(2)).exp()
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.envelope(t) * (2.0 * std::f64::consts::PI * self.center_frequency * t).cos()
    }

    /// Half-width of the support used when synthesising (5 sigma).
    pub fn support(&self) -> f64 {
        5.0 * self.sigma
    }

    /// Add `amplitude * pulse(k / fs - arrival)` to `out` over the support.
    fn accumulate(&self, out: &mut [f64], fs: f64, arrival: f64, amplitude: f64) {
        let dt = 1.0 / fs;
        let first = ((arrival - self.support()) * fs).ceil().max(0.0) as usize;
        let last = (((arrival + self.support()) * fs).floor() as i64).min(out.len() as i64 - 1);
        if last < first as i64 {
            return;
        }
        // Gaussian and carrier advanced by recurrences: two multiplies per sample.
        let inv2s2 = 0.5 / (self.sigma * self.sigma);
        let t0 = first as f64 * dt - arrival;
        let mut g = (-t0 * t0 * inv2s2).exp();
        let mut ratio = (-(2.0 * t0 * dt + dt * dt) * inv2s2).exp();
        let ratio_step = (-2.0 * dt * dt * inv2s2).exp();
        let w = 2.0 * std::f64::consts::PI * self.center_frequency;
        let (mut c, mut s) = ((w * t0).cos(), (w * t0).sin());
        let (cr, sr) = ((w * dt).cos(), (w * dt).sin());
        for v in &mut out[first..=last as usize] {
            *v += amplitude * g * c;
            g *= ratio;
            ratio *= ratio_step;
            let cn = c * cr - s * sr;
            s = s * cr + c * sr;
            c = cn;
        }
    }
}

/// Per-plane-wave receive data, `samples[n_c * num_samples + k]` at time
/// `k / fs`, t = 0 when the wavefront crosses the array centre.
#[derive(Debug, Clone, PartialEq)]
pub struct RfChannelData {
    pub angle: f64,
    pub sampling_rate: f64,
    pub center_frequency: f64,
    pub num_channels: usize,
    pub num_samples: usize,
    pub samples: Vec<f64>,
}

const RF_MAGIC: &[u8; 4] = b"PWRF";
const RF_VERSION: u32 = 1;

impl RfChannelData {
    pub fn zeros(
        angle: f64,
        sampling_rate: f64,
        center_frequency: f64,
        num_channels: usize,
        num_samples: usize,
    ) -> Self {
        Self {
            angle,
            sampling_rate,
            center_frequency,
            num_channels,
            num_samples,
            samples: vec![0.0; num_channels * num_samples],
        }
    }

    pub fn channel(&self, n: usize) -> &[f64] {
        &self.samples[n * self.num_samples..(n + 1) * self.num_samples]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.samples.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("RF channel data"))
        }
    }

    /// Little-endian container: `PWRF`, version u32, N_c u32, N_t u32, fs f64,
    /// angle f64 (rad), f0 f64, then `N_c * N_t` f32 samples channel-major.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(40 + 4 * self.samples.len());
        bytes.extend_from_slice(RF_MAGIC);
        bytes.extend_from_slice(&RF_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.num_channels as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.num_samples as u32).to_le_bytes());
        bytes.extend_from_slice(&self.sampling_rate.to_le_bytes());
        bytes.extend_from_slice(&self.angle.to_le_bytes());
        bytes.extend_from_slice(&self.center_frequency.to_le_bytes());
        for &v in &self.samples {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 40 || &bytes[..4] != RF_MAGIC {
            return Err(Error::format(path, "not an RF container"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if u32_at(4) != RF_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", u32_at(4))));
        }
        let nc = u32_at(8) as usize;
        let nt = u32_at(12) as usize;
        let expected = 40 + 4 * nc * nt;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("{} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let samples = bytes[40..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let rf = Self {
            angle: f64_at(24),
            sampling_rate: f64_at(16),
            center_frequency: f64_at(32),
            num_channels: nc,
            num_samples: nt,
            samples,
        };
        rf.check_finite()?;
        Ok(rf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthOptions {
    /// Record length; computed from the deepest arrival when `None`.
    pub num_samples: Option<usize>,
    /// Scale echoes by `10 mm / r` along the receive path.
    pub spreading: bool,
}

/// Synthesise channel data for every angle in `angles`. Receive travel times
/// do not depend on the transmit angle and are computed once.
pub fn synth_rf_set(
    phantom: &Phantom,
    angles: &[f64],
    acq: &AcquisitionSpec,
    array: &TransducerArray,
    opts: SynthOptions,
) -> Result<Vec<RfChannelData>> {
    acq.validate()?;
    let map = &phantom.slowness;
    let pulse = Pulse::from_bandwidth(acq.center_frequency, acq.fractional_bandwidth);
    let targets: Vec<Scatterer> = phantom.all_scatterers().copied().collect();
    let elements: Vec<Point2> = array
        .x_positions()
        .iter()
        .map(|&x| Point2::new(x, 0.0))
        .collect();
    let fs = acq.sampling_rate;

    let tx: Vec<Vec<f64>> = angles
        .iter()
        .map(|&a| {
            targets
                .par_iter()
                .map(|s| transmit_time(map, s.position, a))
                .collect()
        })
        .collect();
    let rx: Vec<Vec<f64>> = elements
        .par_iter()
        .map(|&e| targets.iter().map(|s| receive_time(map, s.position, e)).collect())
        .collect();

    let max_of = |v: &[Vec<f64>]| {
        v.iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let latest = max_of(&tx) + max_of(&rx);
    let required = if targets.is_empty() || angles.is_empty() {
        1
    } else {
        ((latest + pulse.support()) * fs).ceil() as usize + 1
    };
    let nt = match opts.num_samples {
        Some(n) if n < required => {
            return Err(Error::SamplingWindow {
                available: n,
                required,
            })
        }
        Some(n) => n,
        None => required,
    };

    let amplitude: Vec<Vec<f64>> = elements
        .iter()
        .map(|e| {
            targets
                .iter()
                .map(|s| {
                    if opts.spreading {
                        s.reflectivity * 10e-3 / s.position.distance(e).max(1e-6)
                    } else {
                        s.reflectivity
                    }
                })
                .collect()
        })
        .collect();

    angles
        .iter()
        .enumerate()
        .map(|(a, &angle)| {
            let channels: Vec<Vec<f64>> = (0..elements.len())
                .into_par_iter()
                .map(|n| {
                    let mut buf = vec![0.0; nt];
                    for (s, (&t_tx, &t_rx)) in tx[a].iter().zip(&rx[n]).enumerate() {
                        pulse.accumulate(&mut buf, fs, t_tx + t_rx, amplitude[n][s]);
                    }
                    buf
                })
                .collect();
            let mut rf = RfChannelData::zeros(angle, fs, acq.center_frequency, elements.len(), nt);
            for (n, ch) in channels.into_iter().enumerate() {
                rf.samples[n * nt..(n + 1) * nt].copy_from_slice(&ch);
            }
            Ok(rf)
        })
        .collect()
}

/// Single-angle convenience wrapper around [`synth_rf_set`].
pub fn synth_rf(
    phantom: &Phantom,
    angle: f64,
    acq: &AcquisitionSpec,
    array: &TransducerArray,
    opts: SynthOptions,
) -> Result<RfChannelData> {
    Ok(synth_rf_set(phantom, &[angle], acq, array, opts)?.remove(0))
}

/// Noiseless apparent delays `L (sigma_true - sigma0)`, optionally with
/// additive Gaussian noise `(std in s, seed)`.
pub fn synth_delays(
    differential: &SparseRayMatrix,
    truth: &SlownessMap,
    sigma0: f64,
    noise: Option<(f64, u64)>,
) -> Result<Vec<f64>> {
    if differential.cols() != truth.values.len() {
        return Err(Error::Dimension(format!(
            "differential matrix has {} columns, map has {} cells",
            differential.cols(),
            truth.values.len()
        )));
    }
    let mut delays = differential.matvec(&truth.deviation(sigma0))?;
    if let Some((std, seed)) = noise {
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            delays.iter_mut().for_each(|d| *d += normal.sample(&mut rng));
        }
    }
    Ok(delays)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ReconGrid, ImagingGrid) {
        let recon = ReconGrid::spanning(32, 32, -16e-3, 16e-3, 0.0, 32e-3).unwrap();
        let img = ImagingGrid::new(101, 101, 0.2e-3, 0.2e-3, Point2::new(-10e-3, 5e-3)).unwrap();
        (recon, img)
    }

    fn single(recon: &ReconGrid, img: &ImagingGrid, p: Point2) -> Phantom {
        let cfg = PhantomConfig {
            inclusion: None,
            scatterers: ScattererGrid {
                lateral: vec![p.x],
                axial: vec![p.z],
                reflectivity: 1.0,
            },
            speckle: None,
            ..PhantomConfig::default()
        };
        make_simulation_phantom(&cfg, recon, img, 0).unwrap()
    }

    fn peak_time(ch: &[f64], fs: f64) -> f64 {
        let k = ch
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        k as f64 / fs
    }

    #[test]
    fn default_phantom_contrast() {
        let recon = ReconGrid::spanning(64, 64, -12.8e-3, 12.8e-3, 0.0, 35.2e-3).unwrap();
        let img = ImagingGrid::new(321, 855, 75e-6, 37.5e-6, Point2::new(-12e-3, 3e-3)).unwrap();
        let ph = make_simulation_phantom(&PhantomConfig::default(), &recon, &img, 1).unwrap();
        let sos = ph.slowness.sound_speed();
        let max = sos.iter().cloned().fold(f64::MIN, f64::max);
        let min = sos.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 1545.0).abs() < 1e-9 && (min - 1500.0).abs() < 1e-9);
        assert_eq!(ph.scatterers.len(), 30);
        // 321 x 428 medium pixels at 75 um, 10 % occupied
        let expected = (0.1 * 321.0 * 428.0f64).round() as usize;
        assert_eq!(ph.speckle.len(), expected);
        for s in ph.all_scatterers() {
            let (x0, x1, z0, z1) = img.bounds();
            assert!(s.position.x >= x0 && s.position.x <= x1 && s.position.z >= z0 && s.position.z <= z1);
        }
        for s in &ph.speckle {
            assert!((0.01..0.05).contains(&s.reflectivity));
        }
    }

    #[test]
    fn zero_contrast_and_zero_radius_are_uniform() {
        let (recon, img) = setup();
        let mut cfg = PhantomConfig {
            speckle: None,
            scatterers: ScattererGrid { lateral: vec![0.0], axial: vec![20e-3], reflectivity: 1.0 },
            ..PhantomConfig::default()
        };
        cfg.inclusion = Some(Inclusion {
            center: Point2::new(0.0, 15e-3),
            radius: 5e-3,
            sound_speed: 1500.0,
        });
        assert!(make_simulation_phantom(&cfg, &recon, &img, 0).unwrap().slowness.is_uniform());
        cfg.inclusion = Some(Inclusion {
            center: Point2::new(0.0, 15e-3),
            radius: 0.0,
            sound_speed: 1545.0,
        });
        assert!(make_simulation_phantom(&cfg, &recon, &img, 0).unwrap().slowness.is_uniform());
    }

    #[test]
    fn inclusion_outside_region_is_rejected() {
        let (recon, img) = setup();
        let mut cfg = PhantomConfig {
            speckle: None,
            scatterers: ScattererGrid { lateral: vec![0.0], axial: vec![20e-3], reflectivity: 1.0 },
            ..PhantomConfig::default()
        };
        cfg.inclusion.as_mut().unwrap().center = Point2::new(9e-3, 15e-3);
        assert!(make_simulation_phantom(&cfg, &recon, &img, 0).is_err());
    }

    #[test]
    fn pulse_bandwidth() {
        let p = Pulse::from_bandwidth(5e6, 0.6);
        // amplitude spectrum exp(-(2 pi s (f - f0))^2 / 2) is 0.5 at f0 +- 1.5 MHz
        let v = (-0.5 * (2.0 * std::f64::consts::PI * p.sigma * 1.5e6).powi(2)).exp();
        assert!((v - 0.5).abs() < 1e-12);
        let mut buf = vec![0.0; 400];
        p.accumulate(&mut buf, 40e6, 5e-6, 2.0);
        for (k, v) in buf.iter().enumerate() {
            let t = k as f64 / 40e6 - 5e-6;
            let direct = if t.abs() <= p.support() { 2.0 * p.eval(t) } else { 0.0 };
            assert!((v - direct).abs() < 1e-12, "sample {k}");
        }
    }

    #[test]
    fn single_scatterer_arrival_times() {
        let (recon, img) = setup();
        let array = TransducerArray::linear(128, 0.3e-3).unwrap();
        let acq = AcquisitionSpec::default();
        let ph = single(&recon, &img, Point2::new(0.0, 20e-3));
        let rf = synth_rf(&ph, 0.0, &acq, &array, SynthOptions::default()).unwrap();
        let fs = acq.sampling_rate;
        let tiny = TransducerArray::linear(3, 10e-3).unwrap();
        let rf3 = synth_rf(&ph, 0.0, &acq, &tiny, SynthOptions::default()).unwrap();
        assert!((peak_time(rf3.channel(1), fs) - 26.667e-6).abs() < 1.0 / fs);
        assert!((peak_time(rf3.channel(2), fs) - 28.241e-6).abs() < 1.0 / fs);
        assert!((peak_time(rf3.channel(0), fs) - 28.241e-6).abs() < 1.0 / fs);
        let analytic = 20e-3 / 1500.0 + (0.15e-3f64.hypot(20e-3)) / 1500.0;
        assert!((peak_time(rf.channel(64), fs) - analytic).abs() < 1.0 / fs);
    }

    #[test]
    fn empty_phantom_gives_zero_channels() {
        let (recon, _) = setup();
        let ph = Phantom {
            slowness: SlownessMap::uniform(recon, 1.0 / 1500.0),
            background_sound_speed: 1500.0,
            inclusion: None,
            scatterers: vec![],
            speckle: vec![],
        };
        let rf = synth_rf(
            &ph,
            0.0,
            &AcquisitionSpec::default(),
            &TransducerArray::linear(8, 0.3e-3).unwrap(),
            SynthOptions { num_samples: Some(100), spreading: false },
        )
        .unwrap();
        assert!(rf.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_window_reports_required_length() {
        let (recon, img) = setup();
        let ph = single(&recon, &img, Point2::new(0.0, 20e-3));
        let err = synth_rf(
            &ph,
            0.0,
            &AcquisitionSpec::default(),
            &TransducerArray::linear(8, 0.3e-3).unwrap(),
            SynthOptions { num_samples: Some(100), spreading: false },
        )
        .unwrap_err();
        match err {
            Error::SamplingWindow { required, .. } => assert!(required > 1000),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn synthesis_is_linear_in_reflectivity() {
        let (recon, img) = setup();
        let array = TransducerArray::linear(16, 0.3e-3).unwrap();
        let acq = AcquisitionSpec::default();
        let mut cfg = PhantomConfig::default();
        cfg.scatterers.lateral = vec![-3e-3, 3e-3];
        cfg.scatterers.axial = vec![18e-3];
        cfg.speckle = Some(SpeckleSpec { density: 0.002, ..cfg.speckle.unwrap() });
        let both = make_simulation_phantom(&cfg, &recon, &img, 3).unwrap();
        let mut a = both.clone();
        a.speckle.clear();
        let mut b = both.clone();
        b.scatterers.clear();
        let n = Some(1800);
        let opts = SynthOptions { num_samples: n, spreading: false };
        let angle = 10f64.to_radians();
        let ra = synth_rf(&a, angle, &acq, &array, opts).unwrap();
        let rb = synth_rf(&b, angle, &acq, &array, opts).unwrap();
        let rab = synth_rf(&both, angle, &acq, &array, opts).unwrap();
        for k in 0..rab.samples.len() {
            assert!((rab.samples[k] - ra.samples[k] - rb.samples[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rf");
        let mut rf = RfChannelData::zeros(0.1, 40e6, 5e6, 3, 5);
        rf.samples[7] = 0.25;
        rf.samples[3] = -1.5;
        rf.write(&p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 40 + 4 * 15);
        assert_eq!(RfChannelData::read(&p).unwrap(), rf);
        fs::write(&p, b"junk").unwrap();
        assert!(RfChannelData::read(&p).is_err());
    }
}
