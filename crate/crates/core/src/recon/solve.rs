use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsOptions};
use super::regularizer::Regularizer;
use crate::error::{Error, Result};
use crate::geometry::ReconGrid;
use crate::slowness::SlownessMap;
use crate::sparse::SparseRayMatrix;

/// Exact (unsmoothed) objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub data: f64,
    pub regularization: f64,
}

/// `|L (sigma - sigma0) - dtau|_1 + lambda h |D sigma|_1` over the rows of `l`.
pub fn evaluate_objective(
    sigma: &[f64],
    l: &SparseRayMatrix,
    delays: &[f64],
    reg: &Regularizer,
    sigma0: f64,
) -> Result<ObjectiveValue> {
    if delays.len() != l.rows() {
        return Err(Error::Dimension(format!(
            "{} delays for {} matrix rows",
            delays.len(),
            l.rows()
        )));
    }
    let dev: Vec<f64> = sigma.iter().map(|s| s - sigma0).collect();
    let data = l
        .matvec(&dev)?
        .iter()
        .zip(delays)
        .map(|(p, d)| (p - d).abs())
        .sum();
    let regularization = reg.penalty(sigma)?;
    Ok(ObjectiveValue {
        total: data + regularization,
        data,
        regularization,
    })
}

/// Smoothed objective in the scaled variable `u = (sigma - sigma0) / sigma0`:
///
/// `f(u) = sum sqrt(r^2 + eps_d^2) + lambda sum sqrt(q^2 + eps_r^2)`,
/// `r = sigma0 L u - dtau`, `q = h sigma0 D u`.
#[derive(Debug, Clone)]
pub struct SmoothedObjective<'a> {
    pub l: &'a SparseRayMatrix,
    pub delays: &'a [f64],
    pub reg: &'a Regularizer,
    pub sigma0: f64,
    pub eps_data: f64,
    pub eps_reg: f64,
}

impl SmoothedObjective<'_> {
    pub fn value_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let s0 = self.sigma0;
        let h = self.reg.length_scale;
        let lam = self.reg.lambda;
        let (ed, er) = (self.eps_data, self.eps_reg);
        let (data, gd) = self
            .l
            .apply_and_adjoint(u, |row, p| {
                let r = s0 * p - self.delays[row];
                let n = (r * r + ed * ed).sqrt();
                (n, r / n)
            })
            .expect("dimensions checked");
        let (reg, gr) = self
            .reg
            .d
            .apply_and_adjoint(u, |_, v| {
                let q = h * s0 * v;
                let n = (q * q + er * er).sqrt();
                (n, q / n)
            })
            .expect("dimensions checked");
        for ((g, a), b) in grad.iter_mut().zip(&gd).zip(&gr) {
            *g = s0 * a + lam * h * s0 * b;
        }
        data + lam * reg
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let mut g = vec![0.0; u.len()];
        self.value_and_gradient(u, &mut g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Data smoothing as a fraction of the median non-zero `|dtau|`.
    pub eps_data_rel: f64,
    /// Regularizer smoothing as a fraction of `sigma0 * h`.
    pub eps_reg_rel: f64,
    /// Number of continuation restarts, each halving both smoothings.
    pub restarts: usize,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_data_rel: 1e-3,
            eps_reg_rel: 1e-3,
            restarts: 3,
            max_iterations: 2000,
            rel_tol: 1e-8,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub eps_data: f64,
    pub eps_reg: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub smoothed_value: f64,
    /// Smoothed objective after every accepted iteration of the stage.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial: ObjectiveValue,
    pub objective: ObjectiveValue,
    pub usable_rows: usize,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub stages: Vec<StageReport>,
}

fn median_abs_nonzero(v: &[f64]) -> f64 {
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).filter(|x| *x > 0.0).collect();
    if a.is_empty() {
        return 0.0;
    }
    a.sort_by(f64::total_cmp);
    a[a.len() / 2]
}

/// Minimise the objective from `sigma = sigma0`, using only rows with
/// `mask[r]` set. The returned map never has a larger exact objective than
/// the homogeneous start.
pub fn solve_slowness(
    l: &SparseRayMatrix,
    delays: &[f64],
    mask: &[bool],
    reg: &Regularizer,
    sigma0: f64,
    grid: &ReconGrid,
    opts: &SolverOptions,
) -> Result<(SlownessMap, SolveReport)> {
    let start = Instant::now();
    if delays.len() != l.rows() || mask.len() != l.rows() {
        return Err(Error::Dimension(format!(
            "{} delays and {} mask entries for {} rows",
            delays.len(),
            mask.len(),
            l.rows()
        )));
    }
    if l.cols() != grid.len() || reg.d.cols() != grid.len() {
        return Err(Error::Dimension("matrix columns do not match the reconstruction grid".into()));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::NonFinite("sigma0"));
    }
    if delays.iter().zip(mask).any(|(d, &m)| m && !d.is_finite()) || l.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reconstruction inputs"));
    }
    let lm = l.select_rows(mask)?;
    let dm: Vec<f64> = delays.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    let homogeneous = SlownessMap::uniform(grid.clone(), sigma0);
    let initial = evaluate_objective(&homogeneous.values, &lm, &dm, reg, sigma0)?;
    if lm.rows() == 0 {
        log::warn!("no usable measurements; returning the homogeneous map");
        return Ok((
            homogeneous,
            SolveReport {
                initial,
                objective: initial,
                usable_rows: 0,
                iterations: 0,
                converged: true,
                wall_time_s: start.elapsed().as_secs_f64(),
                stages: vec![],
            },
        ));
    }
    let mut eps_data = opts.eps_data_rel * median_abs_nonzero(&dm);
    if eps_data == 0.0 {
        eps_data = opts.eps_reg_rel * sigma0 * reg.length_scale;
    }
    let mut eps_reg = opts.eps_reg_rel * sigma0 * reg.length_scale;
    let lbfgs_opts = LbfgsOptions {
        memory: opts.memory,
        max_iterations: opts.max_iterations,
        rel_tol: opts.rel_tol,
        ..LbfgsOptions::default()
    };
    let mut u = vec![0.0; grid.len()];
    let mut stages = Vec::new();
    let mut iterations = 0;
    let mut converged = true;
    for stage in 0..=opts.restarts {
        if stage > 0 {
            eps_data *= 0.5;
            eps_reg *= 0.5;
        }
        let obj = SmoothedObjective {
            l: &lm,
            delays: &dm,
            reg,
            sigma0,
            eps_data,
            eps_reg,
        };
        let r = lbfgs::minimize(|x, g| obj.value_and_gradient(x, g), &u, &lbfgs_opts);
        log::debug!(
            "stage {stage}: eps_d {eps_data:.3e} eps_r {eps_reg:.3e}, {} iterations, f = {:.6e}",
            r.iterations,
            r.value
        );
        iterations += r.iterations;
        converged &= r.converged;
        u = r.x;
        stages.push(StageReport {
            eps_data,
            eps_reg,
            iterations: r.iterations,
            evaluations: r.evaluations,
            converged: r.converged,
            smoothed_value: r.value,
            history: r.history,
        });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("solver produced non-finite slowness".into()));
    }
    let values: Vec<f64> = u.iter().map(|v| sigma0 * (1.0 + v)).collect();
    let mut objective = evaluate_objective(&values, &lm, &dm, reg, sigma0)?;
    let map = if objective.total <= initial.total && values.iter().all(|v| *v > 0.0) {
        SlownessMap::new(grid.clone(), values, sigma0)?
    } else {
        log::warn!("solution does not improve on the homogeneous start; keeping it");
        objective = initial;
        homogeneous
    };
    Ok((
        map,
        SolveReport {
            initial,
            objective,
            usable_rows: lm.rows(),
            iterations,
            converged,
            wall_time_s: start.elapsed().as_secs_f64(),
            stages,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::recon::{build_regularizer, RegularizerWeights};

    fn two_cell() -> (ReconGrid, SparseRayMatrix) {
        let g = ReconGrid::new(2, 1, 1.0, 1.0, Point2::new(0.0, 0.0)).unwrap();
        let l = SparseRayMatrix::from_rows(2, vec![vec![(0, 1.0)], vec![(1, 1.0)]]).unwrap();
        (g, l)
    }

    #[test]
    fn objective_terms() {
        let (g, l) = two_cell();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 0.5).unwrap();
        let s0 = 1.0 / 1500.0;
        let z = evaluate_objective(&[s0, s0], &l, &[0.0, 0.0], &reg, s0).unwrap();
        assert_eq!((z.total, z.data, z.regularization), (0.0, 0.0, 0.0));
        let d = evaluate_objective(&[s0, s0], &l, &[1e-6, -3e-6], &reg, s0).unwrap();
        assert!((d.data - 4e-6).abs() < 1e-20 && d.regularization == 0.0);
        // hand computation: residuals (1e-5 - 0) and (0 - 1e-6); one horizontal edge of 1e-5
        let h = evaluate_objective(&[s0 + 1e-5, s0], &l, &[0.0, 1e-6], &reg, s0).unwrap();
        assert!((h.data - 1.1e-5).abs() < 1e-18);
        assert!((h.regularization - 0.5 * 1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_delays_return_sigma0() {
        let (g, l) = two_cell();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 0.065).unwrap();
        let s0 = 1.0 / 1500.0;
        let (m, rep) = solve_slowness(&l, &[0.0, 0.0], &[true, true], &reg, s0, &g, &SolverOptions::default()).unwrap();
        assert!(m.values.iter().all(|&v| v == s0));
        assert_eq!(rep.objective.total, 0.0);
    }

    #[test]
    fn identity_system_recovers_truth() {
        let (g, l) = two_cell();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 1e-9).unwrap();
        let s0 = 1.0 / 1500.0;
        let truth = [1.0 / 1545.0, 1.0 / 1480.0];
        let delays: Vec<f64> = truth.iter().map(|t| t - s0).collect();
        let opts = SolverOptions { rel_tol: 1e-14, ..SolverOptions::default() };
        let (m, _) = solve_slowness(&l, &delays, &[true, true], &reg, s0, &g, &opts).unwrap();
        for (a, b) in m.values.iter().zip(&truth) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn all_masked_returns_homogeneous() {
        let (g, l) = two_cell();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 0.065).unwrap();
        let s0 = 1.0 / 1500.0;
        let (m, rep) = solve_slowness(&l, &[1e-6, 1e-6], &[false, false], &reg, s0, &g, &SolverOptions::default()).unwrap();
        assert!(m.is_uniform());
        assert_eq!(rep.usable_rows, 0);
    }

    #[test]
    fn rejects_non_finite_delays() {
        let (g, l) = two_cell();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 0.065).unwrap();
        let r = solve_slowness(&l, &[f64::NAN, 0.0], &[true, true], &reg, 1.0 / 1500.0, &g, &SolverOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
