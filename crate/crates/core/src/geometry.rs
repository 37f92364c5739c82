//! Probe, grid and acquisition descriptions shared by every stage.
//!
//! Coordinates are lateral `x` and depth `z` in metres. The probe is a linear
//! array lying on `z = 0`, centred on `x = 0`, and everything imaged lies at
//! `z >= 0`. Flattened pixel and cell indices are `ix * nz + iz` (depth
//! fastest) everywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the imaging plane (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub z: f64,
}

impl Point2 {
    pub const fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }
}

// ---------------------------------------------------------------------------
// Transducer array
// ---------------------------------------------------------------------------

/// Linear array of `num_elements` elements with uniform pitch, centred at x = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArraySpec", into = "ArraySpec")]
pub struct TransducerArray {
    pitch: f64,
    positions: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    num_elements: usize,
    pitch: f64,
}

impl TryFrom<ArraySpec> for TransducerArray {
    type Error = Error;
    fn try_from(spec: ArraySpec) -> Result<Self> {
        TransducerArray::linear(spec.num_elements, spec.pitch)
    }
}

impl From<TransducerArray> for ArraySpec {
    fn from(a: TransducerArray) -> Self {
        ArraySpec {
            num_elements: a.num_elements(),
            pitch: a.pitch,
        }
    }
}

impl TransducerArray {
    pub fn linear(num_elements: usize, pitch: f64) -> Result<Self> {
        if num_elements < 2 {
            return Err(Error::Config(format!(
                "array needs at least 2 elements, got {num_elements}"
            )));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::Config(format!("array pitch must be > 0, got {pitch}")));
        }
        let center = (num_elements as f64 - 1.0) / 2.0;
        let positions = (0..num_elements)
            .map(|n| (n as f64 - center) * pitch)
            .collect();
        Ok(Self { pitch, positions })
    }

    pub fn num_elements(&self) -> usize {
        self.positions.len()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    /// Lateral element positions, strictly increasing.
    pub fn x_positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn element_position(&self, n_c: usize) -> Result<Point2> {
        self.positions
            .get(n_c)
            .map(|&x| Point2::new(x, 0.0))
            .ok_or(Error::IndexOutOfRange {
                what: "element",
                index: n_c,
                limit: self.positions.len(),
            })
    }

    /// Lateral extent `(first, last)` of the element centres.
    pub fn extent(&self) -> (f64, f64) {
        (self.positions[0], self.positions[self.positions.len() - 1])
    }
}

impl Default for TransducerArray {
    fn default() -> Self {
        TransducerArray::linear(128, 0.3e-3).expect("valid default array")
    }
}

// ---------------------------------------------------------------------------
// Beamforming grid
// ---------------------------------------------------------------------------

/// Cartesian pixel grid on which frames are beamformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingGrid {
    pub nx: usize,
    pub nz: usize,
    /// Lateral pitch (m).
    pub dx: f64,
    /// Axial pitch (m).
    pub dz: f64,
    /// Position of pixel (0, 0).
    pub origin: Point2,
}

impl ImagingGrid {
    pub fn new(nx: usize, nz: usize, dx: f64, dz: f64, origin: Point2) -> Result<Self> {
        let grid = Self {
            nx,
            nz,
            dx,
            dz,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 {
            return Err(Error::Config("imaging grid must have at least one pixel".into()));
        }
        if !(self.dx > 0.0 && self.dz > 0.0) {
            return Err(Error::Config(format!(
                "imaging grid pitches must be > 0 (dx={}, dz={})",
                self.dx, self.dz
            )));
        }
        if self.origin.z < 0.0 {
            return Err(Error::Config(format!(
                "imaging grid must lie below the array, origin z = {}",
                self.origin.z
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear_index(&self, ix: usize, iz: usize) -> usize {
        ix * self.nz + iz
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.origin.x + ix as f64 * self.dx
    }

    pub fn z(&self, iz: usize) -> f64 {
        self.origin.z + iz as f64 * self.dz
    }

    pub fn pixel_position(&self, ix: usize, iz: usize) -> Result<Point2> {
        if ix >= self.nx {
            return Err(Error::IndexOutOfRange {
                what: "pixel ix",
                index: ix,
                limit: self.nx,
            });
        }
        if iz >= self.nz {
            return Err(Error::IndexOutOfRange {
                what: "pixel iz",
                index: iz,
                limit: self.nz,
            });
        }
        Ok(Point2::new(self.x(ix), self.z(iz)))
    }

    /// Nearest pixel to `p`, if `p` falls within half a pitch of the grid.
    pub fn index_of(&self, p: Point2) -> Option<(usize, usize)> {
        let fx = ((p.x - self.origin.x) / self.dx).round();
        let fz = ((p.z - self.origin.z) / self.dz).round();
        if fx < 0.0 || fz < 0.0 || fx >= self.nx as f64 || fz >= self.nz as f64 {
            return None;
        }
        Some((fx as usize, fz as usize))
    }

    /// Fractional pixel coordinates of `p`.
    pub fn fractional_index(&self, p: Point2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.dx,
            (p.z - self.origin.z) / self.dz,
        )
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.nx).flat_map(move |ix| (0..self.nz).map(move |iz| Point2::new(self.x(ix), self.z(iz))))
    }

    /// `(x_min, x_max, z_min, z_max)` of the pixel centres.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.x(0),
            self.x(self.nx - 1),
            self.z(0),
            self.z(self.nz - 1),
        )
    }
}

// ---------------------------------------------------------------------------
// Reconstruction grid
// ---------------------------------------------------------------------------

/// Cell grid carrying the slowness unknowns. Cell `(ix, iz)` spans
/// `[ox + ix*w, ox + (ix+1)*w] x [oz + iz*h, oz + (iz+1)*h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconGrid {
    pub nx: usize,
    pub nz: usize,
    pub cell_width: f64,
    pub cell_height: f64,
    /// Corner of cell (0, 0) with the smallest coordinates.
    pub origin: Point2,
}

impl ReconGrid {
    pub fn new(
        nx: usize,
        nz: usize,
        cell_width: f64,
        cell_height: f64,
        origin: Point2,
    ) -> Result<Self> {
        let grid = Self {
            nx,
            nz,
            cell_width,
            cell_height,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid of `nx x nz` cells exactly spanning `[x0, x1] x [z0, z1]`.
    pub fn spanning(nx: usize, nz: usize, x0: f64, x1: f64, z0: f64, z1: f64) -> Result<Self> {
        Self::new(
            nx,
            nz,
            (x1 - x0) / nx as f64,
            (z1 - z0) / nz as f64,
            Point2::new(x0, z0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 {
            return Err(Error::Config("reconstruction grid must have at least one cell".into()));
        }
        if !(self.cell_width > 0.0 && self.cell_height > 0.0) {
            return Err(Error::Config("reconstruction cells must have positive size".into()));
        }
        if self.origin.z < 0.0 {
            return Err(Error::Config("reconstruction grid must lie below the array".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_index(&self, ix: usize, iz: usize) -> usize {
        ix * self.nz + iz
    }

    pub fn cell_center(&self, ix: usize, iz: usize) -> Point2 {
        Point2::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_width,
            self.origin.z + (iz as f64 + 0.5) * self.cell_height,
        )
    }

    /// `(x_min, x_max, z_min, z_max)` of the bounding box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.x,
            self.origin.x + self.nx as f64 * self.cell_width,
            self.origin.z,
            self.origin.z + self.nz as f64 * self.cell_height,
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (x0, x1, z0, z1) = self.bounds();
        let tol = 1e-12 * (x1 - x0).abs().max(z1 - z0).max(1e-3);
        p.x >= x0 - tol && p.x <= x1 + tol && p.z >= z0 - tol && p.z <= z1 + tol
    }

    /// True when every pixel centre of `img` lies inside this grid and the
    /// cells are at least as large as the pixels.
    pub fn covers(&self, img: &ImagingGrid) -> bool {
        let (x0, x1, z0, z1) = img.bounds();
        self.contains(Point2::new(x0, z0))
            && self.contains(Point2::new(x1, z1))
            && self.cell_width >= img.dx * (1.0 - 1e-9)
            && self.cell_height >= img.dz * (1.0 - 1e-9)
    }

    /// Stable 64-bit fingerprint of the grid geometry.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.nx as u64).to_le_bytes());
        h.update((self.nz as u64).to_le_bytes());
        for v in [self.cell_width, self.cell_height, self.origin.x, self.origin.z] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

// ---------------------------------------------------------------------------
// Acquisition and apodization
// ---------------------------------------------------------------------------

/// Largest transmit steering angle accepted (25 deg).
pub const MAX_TRANSMIT_ANGLE: f64 = 25.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    /// Pulse centre frequency (Hz).
    pub center_frequency: f64,
    /// Channel sampling rate (Hz).
    pub sampling_rate: f64,
    /// Speed of sound assumed by the global beamformer (m/s).
    pub sound_speed: f64,
    /// Pulse -6 dB fractional bandwidth.
    pub fractional_bandwidth: f64,
    /// Transmitted plane-wave steering angles (rad).
    pub angles: Vec<f64>,
}

impl AcquisitionSpec {
    pub fn slowness(&self) -> f64 {
        1.0 / self.sound_speed
    }

    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_frequency
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_frequency > 0.0) {
            return Err(Error::Config("centre frequency must be > 0".into()));
        }
        if self.sampling_rate < 4.0 * self.center_frequency {
            return Err(Error::Config(format!(
                "sampling rate {} Hz is below 4x the centre frequency {} Hz",
                self.sampling_rate, self.center_frequency
            )));
        }
        if !(1000.0..=2000.0).contains(&self.sound_speed) {
            return Err(Error::Config(format!(
                "sound speed {} m/s outside [1000, 2000]",
                self.sound_speed
            )));
        }
        if !(self.fractional_bandwidth > 0.0 && self.fractional_bandwidth < 2.0) {
            return Err(Error::Config("fractional bandwidth must lie in (0, 2)".into()));
        }
        if let Some(a) = self
            .angles
            .iter()
            .find(|a| !(a.abs() <= MAX_TRANSMIT_ANGLE + 1e-9))
        {
            return Err(Error::Config(format!(
                "transmit angle {:.3} deg outside +-25 deg",
                a.to_degrees()
            )));
        }
        Ok(())
    }

    /// Index of `angle` in the transmitted set (matched to 1e-9 rad).
    pub fn angle_index(&self, angle: f64) -> Option<usize> {
        self.angles.iter().position(|a| (a - angle).abs() < 1e-9)
    }
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            center_frequency: 5.0e6,
            sampling_rate: 40.0e6,
            sound_speed: 1500.0,
            fractional_bandwidth: 0.6,
            angles: default_transmit_angles(),
        }
    }
}

/// Degrees `start, start+step, ..., <= stop` converted to radians.
pub fn angle_range_deg(start: f64, step: f64, stop: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as i64;
    (0..=n)
        .map(|k| (start + k as f64 * step).to_radians())
        .collect()
}

/// Angles used for speed-of-sound estimation, -12:2:12 deg.
pub fn default_sos_angles() -> Vec<f64> {
    angle_range_deg(-12.0, 2.0, 12.0)
}

/// Angles used for compounded B-mode imaging, -25:5:25 deg (11 angles).
pub fn default_compound_angles() -> Vec<f64> {
    angle_range_deg(-25.0, 5.0, 25.0)
}

/// Union of the estimation and compounding sets, sorted.
pub fn default_transmit_angles() -> Vec<f64> {
    let mut all: Vec<f64> = default_sos_angles()
        .into_iter()
        .chain(default_compound_angles())
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Cosine taper over the active aperture.
    Hann,
    /// Uniform weighting over the active aperture.
    Rect,
}

/// Dynamic receive aperture: half-width `z / (2 F)` centred where the
/// receive direction meets the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApodizationSpec {
    pub f_number: f64,
    pub window: Window,
}

impl Default for ApodizationSpec {
    fn default() -> Self {
        Self {
            f_number: 1.0,
            window: Window::Hann,
        }
    }
}

impl ApodizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_number > 0.0 && self.f_number.is_finite()) {
            return Err(Error::Config(format!("f-number must be > 0, got {}", self.f_number)));
        }
        Ok(())
    }

    /// Centre and half-width of the aperture for `pixel` steered to `rx_angle`.
    pub fn aperture(&self, pixel: Point2, rx_angle: f64) -> (f64, f64) {
        (
            pixel.x - pixel.z * rx_angle.tan(),
            pixel.z / (2.0 * self.f_number),
        )
    }

    /// Weight `A(n_c, x, z)` of an element at lateral position `element_x`.
    pub fn weight(&self, element_x: f64, pixel: Point2, rx_angle: f64) -> f64 {
        let (center, half) = self.aperture(pixel, rx_angle);
        if half <= 0.0 {
            return 0.0;
        }
        let u = (element_x - center) / half;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        match self.window {
            Window::Hann => 0.5 * (1.0 + (std::f64::consts::PI * u).cos()),
            Window::Rect => 1.0,
        }
    }

    /// Element index range `[lo, hi)` that can carry non-zero weight.
    pub fn active_range(
        &self,
        array: &TransducerArray,
        pixel: Point2,
        rx_angle: f64,
    ) -> (usize, usize) {
        let (center, half) = self.aperture(pixel, rx_angle);
        let xs = array.x_positions();
        let lo = xs.partition_point(|&x| x <= center - half);
        let hi = xs.partition_point(|&x| x < center + half);
        (lo, hi.max(lo))
    }

    /// Weighted centroid of the active aperture, clipped to the array; falls
    /// back to the nearest array position when no element is active.
    pub fn aperture_centroid(&self, array: &TransducerArray, pixel: Point2, rx_angle: f64) -> f64 {
        let (lo, hi) = self.active_range(array, pixel, rx_angle);
        let xs = array.x_positions();
        let (mut wsum, mut xsum) = (0.0, 0.0);
        for &x in &xs[lo..hi] {
            let w = self.weight(x, pixel, rx_angle);
            wsum += w;
            xsum += w * x;
        }
        if wsum > 0.0 {
            xsum / wsum
        } else {
            let (first, last) = array.extent();
            self.aperture(pixel, rx_angle).0.clamp(first, last)
        }
    }
}
