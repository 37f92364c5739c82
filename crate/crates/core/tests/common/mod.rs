//! Oracles shared by the integration tests.
#![allow(dead_code)]

use sosbf_core::geometry::{Point2, ReconGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sosbf_core::raytrace::traverse;
use sosbf_core::recon::{build_regularizer, solve_slowness, RegularizerWeights, SmoothedObjective, SolverOptions};
use sosbf_core::sparse::SparseRayMatrix;

pub const SIGMA0: f64 = 1.0;
pub const LAMBDA: f64 = 0.065;

pub fn grid() -> ReconGrid {
    ReconGrid::new(16, 16, 1.0, 1.0, Point2::new(-8.0, 0.0)).unwrap()
}

/// Straight rays from the top edge to the bottom edge over +-60 deg, plus
/// side-to-side rays, so that the system is well posed.
pub fn ray_system(g: &ReconGrid) -> SparseRayMatrix {
    let mut rows = Vec::new();
    let mut push = |a: Point2, b: Point2| {
        let mut row = Vec::new();
        traverse(g, a, b, |c, l| row.push((c, l)));
        if !row.is_empty() {
            rows.push(row);
        }
    };
    for deg in (-60..=60).step_by(10) {
        let t = (deg as f64).to_radians().tan();
        for k in 0..33 {
            let x = -8.0 + 0.5 * k as f64 + 0.013;
            push(Point2::new(x, 0.0), Point2::new(x + 16.0 * t, 16.0));
        }
    }
    for k in 0..33 {
        let z = 0.5 * k as f64 + 0.011;
        push(Point2::new(-8.0, z), Point2::new(8.0, 16.0 - z));
        push(Point2::new(-8.0, z), Point2::new(8.0, z));
    }
    SparseRayMatrix::from_rows(g.len(), rows).unwrap()
}

pub fn truth(g: &ReconGrid) -> Vec<f64> {
    let mut s = vec![SIGMA0; g.len()];
    for ix in 7..9 {
        for iz in 7..9 {
            s[g.cell_index(ix, iz)] = 1.05 * SIGMA0;
        }
    }
    s
}

pub fn delays(l: &SparseRayMatrix, sigma: &[f64]) -> Vec<f64> {
    let dev: Vec<f64> = sigma.iter().map(|s| s - SIGMA0).collect();
    l.matvec(&dev).unwrap()
}

/// Column-oriented copy of a matrix: for every column the `(row, value)` list.
pub fn columns(m: &SparseRayMatrix) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); m.cols()];
    for r in 0..m.rows() {
        let (c, v) = m.row(r);
        for (&c, &v) in c.iter().zip(v) {
            cols[c as usize].push((r, v));
        }
    }
    cols
}

/// Cyclic coordinate descent with safeguarded Newton steps on
/// `sum sqrt(r^2 + ed^2) + lambda sum sqrt(q^2 + er^2)` in sigma space,
/// `r = L (sigma - sigma0) - dtau`, `q = h D sigma`.
pub struct CoordinateDescent {
    pub lcols: Vec<Vec<(usize, f64)>>,
    pub dcols: Vec<Vec<(usize, f64)>>,
    pub h: f64,
    pub ed: f64,
    pub er: f64,
}

impl CoordinateDescent {
    pub fn value(&self, r: &[f64], q: &[f64]) -> f64 {
        r.iter().map(|x| (x * x + self.ed * self.ed).sqrt()).sum::<f64>()
            + LAMBDA * q.iter().map(|x| (x * x + self.er * self.er).sqrt()).sum::<f64>()
    }

    /// First and second derivative along coordinate `j` after a move `t`.
    fn derivatives(&self, j: usize, t: f64, r: &[f64], q: &[f64]) -> (f64, f64) {
        let (mut g, mut hss) = (0.0, 0.0);
        for &(row, a) in &self.lcols[j] {
            let x = r[row] + a * t;
            let n = (x * x + self.ed * self.ed).sqrt();
            g += a * x / n;
            hss += a * a * self.ed * self.ed / (n * n * n);
        }
        for &(row, d) in &self.dcols[j] {
            let c = self.h * d;
            let x = q[row] + c * t;
            let n = (x * x + self.er * self.er).sqrt();
            g += LAMBDA * c * x / n;
            hss += LAMBDA * c * c * self.er * self.er / (n * n * n);
        }
        (g, hss)
    }

    /// Exact minimiser along coordinate `j` (convex 1-D problem).
    fn line_min(&self, j: usize, r: &[f64], q: &[f64]) -> f64 {
        let (g0, _) = self.derivatives(j, 0.0, r, q);
        if g0 == 0.0 {
            return 0.0;
        }
        // bracket [lo, hi] with g(lo) < 0 < g(hi)
        let dir = -g0.signum();
        let mut step = 1e-6;
        let (mut lo, mut hi) = (0.0, 0.0);
        loop {
            let t = dir * step;
            let (g, _) = self.derivatives(j, t, r, q);
            if g * dir >= 0.0 {
                if dir > 0.0 {
                    hi = t;
                } else {
                    lo = t;
                }
                break;
            }
            if dir > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            step *= 4.0;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (g, hss) = self.derivatives(j, t, r, q);
            if g == 0.0 {
                break;
            }
            if g < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = t - g / hss;
            t = if hss > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-17 {
                break;
            }
        }
        t
    }

    pub fn minimize(&self, sigma: &mut [f64], r: &mut [f64], q: &mut [f64], sweeps: usize) -> f64 {
        for _ in 0..sweeps {
            let mut moved = 0.0f64;
            for (j, s) in sigma.iter_mut().enumerate() {
                let t = self.line_min(j, r, q);
                if t == 0.0 {
                    continue;
                }
                *s += t;
                for &(row, a) in &self.lcols[j] {
                    r[row] += a * t;
                }
                for &(row, d) in &self.dcols[j] {
                    q[row] += self.h * d * t;
                }
                moved = moved.max(t.abs());
            }
            if moved < 1e-15 {
                break;
            }
        }
        self.value(r, q)
    }
}


/// Solve the 16x16 instance with L-BFGS, then minimise the final-stage
/// smoothed objective by coordinate descent. Returns both objective values
/// and the largest slowness error of the L-BFGS map.
pub fn oracle_comparison() -> (f64, f64, f64) {
    let g = grid();
    let l = ray_system(&g);
    let t = truth(&g);
    let dtau = delays(&l, &t);
    let reg = build_regularizer(&g, RegularizerWeights::default(), LAMBDA).unwrap();
    // Coordinate descent stalls on sharply smoothed TV objectives, so both
    // solvers work on a moderately smoothed one.
    let opts = SolverOptions {
        eps_data_rel: 0.05,
        eps_reg_rel: 0.05,
        restarts: 0,
        max_iterations: 20_000,
        rel_tol: 1e-15,
        memory: 10,
    };
    let mask = vec![true; l.rows()];
    let (map, report) = solve_slowness(&l, &dtau, &mask, &reg, SIGMA0, &g, &opts).unwrap();
    let stage = report.stages.last().unwrap();

    let cd = CoordinateDescent {
        lcols: columns(&l),
        dcols: columns(&reg.d),
        h: reg.length_scale,
        ed: stage.eps_data,
        er: stage.eps_reg,
    };
    let mut sigma = vec![SIGMA0; g.len()];
    let mut r: Vec<f64> = dtau.iter().map(|d| -d).collect();
    let mut q = vec![0.0; reg.d.rows()];
    let oracle = cd.minimize(&mut sigma, &mut r, &mut q, 20_000);

    let smoothed = SmoothedObjective {
        l: &l,
        delays: &dtau,
        reg: &reg,
        sigma0: SIGMA0,
        eps_data: stage.eps_data,
        eps_reg: stage.eps_reg,
    };
    let u: Vec<f64> = map.values.iter().map(|s| (s - SIGMA0) / SIGMA0).collect();
    let worst = map.values.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (smoothed.value(&u), oracle, worst)
}

pub const LINES: usize = 45;
pub const LINE_SAMPLES: usize = 400;
const WAVELENGTH: f64 = 8.0; // samples per period
const PULSE_SIGMA: f64 = 5.0; // samples

/// Band-limited RF lines (`LINES` x `LINE_SAMPLES`, line-major): each line is
/// a sum of Gabor pulses at random depths, every pulse delayed by `shift`
/// samples.
pub fn rf_lines(seed: u64, shift: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; LINES * LINE_SAMPLES];
    for ix in 0..LINES {
        let pulses: Vec<(f64, f64)> = (0..120)
            .map(|_| (rng.gen_range(-20.0..LINE_SAMPLES as f64 + 20.0), rng.gen_range(-1.0..1.0)))
            .collect();
        for iz in 0..LINE_SAMPLES {
            let mut v = 0.0;
            for &(z, a) in &pulses {
                let t = iz as f64 - z - shift;
                if t.abs() < 6.0 * PULSE_SIGMA {
                    v += a * (-0.5 * (t / PULSE_SIGMA).powi(2)).exp() * (std::f64::consts::TAU * t / WAVELENGTH).cos();
                }
            }
            out[ix * LINE_SAMPLES + iz] = v;
        }
    }
    out
}

/// `a` delayed by `k` whole samples, zero filled.
pub fn shifted_lines(a: &[f64], k: usize) -> Vec<f64> {
    let mut b = vec![0.0; a.len()];
    for ix in 0..LINES {
        for iz in k..LINE_SAMPLES {
            b[ix * LINE_SAMPLES + iz] = a[ix * LINE_SAMPLES + iz - k];
        }
    }
    b
}
