//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when one iteration lowers the objective by less than this
    /// fraction of its magnitude.
    pub rel_tol: f64,
    /// Armijo and curvature constants.
    pub c1: f64,
    pub c2: f64,
    /// Infinity-norm length of the very first step.
    pub first_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 2000,
            rel_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            first_step: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after every accepted iteration, starting with `f(x0)`.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Evaluator<F> {
    f: F,
    count: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Evaluator<F> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; x.len()];
        let v = (self.f)(x, &mut g);
        self.count += 1;
        (v, g)
    }
}

/// Cubic interpolation minimiser between `a` and `b`, safeguarded to the
/// middle of the bracket.
fn interpolate(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let (lo, hi) = (a.min(b), a.max(b));
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

struct Point {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Strong-Wolfe line search along `dir` (Nocedal and Wright, Alg. 3.5/3.6).
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    ev: &mut Evaluator<F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    alpha0: f64,
    opts: &LbfgsOptions,
) -> Option<Point> {
    let d0 = dot(g0, dir);
    if !(d0 < 0.0) {
        return None;
    }
    let probe = |ev: &mut Evaluator<F>, alpha: f64| {
        let xn = axpy(x, alpha, dir);
        let (f, g) = ev.eval(&xn);
        let d = dot(&g, dir);
        Point { alpha, f, d, x: xn, g }
    };
    let armijo = |p: &Point| p.f <= f0 + opts.c1 * p.alpha * d0 && p.f.is_finite();
    let curvature = |p: &Point| p.d.abs() <= -opts.c2 * d0;

    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: g0.to_vec(),
    };
    let mut alpha = alpha0;
    let (mut lo, mut hi);
    let mut first = true;
    loop {
        let cur = probe(ev, alpha);
        if !armijo(&cur) || (!first && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.d >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        if cur.alpha > 1e10 * alpha0 {
            return Some(cur);
        }
        prev = cur;
        alpha *= 2.0;
        first = false;
    }
    // zoom
    for _ in 0..40 {
        let a = if hi.f.is_finite() {
            interpolate(lo.alpha, lo.f, lo.d, hi.alpha, hi.f, hi.d)
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        let cur = probe(ev, a);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() <= 1e-14 * lo.alpha.abs().max(1e-300) {
            break;
        }
    }
    // Accept the best sufficient-decrease point found, if any.
    if lo.alpha > 0.0 && lo.f < f0 {
        Some(lo)
    } else {
        None
    }
}

/// Minimise `f` from `x0`. `f(x, g)` returns the value and writes the
/// gradient into `g`. Every accepted iterate has a strictly lower value than
/// the previous one.
pub fn minimize<F>(f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut ev = Evaluator { f, count: 0 };
    let (mut fx, mut g) = ev.eval(x0);
    let mut x = x0.to_vec();
    let mut history = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            converged = gmax == 0.0;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = mem
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| opts.first_step / gmax);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();

        let step = match line_search(&mut ev, &x, fx, &g, &dir, 1.0, opts) {
            Some(p) => p,
            None if !mem.is_empty() => {
                // Curvature pairs went stale; restart from steepest descent.
                mem.clear();
                continue;
            }
            None => {
                converged = true;
                break;
            }
        };
        iterations += 1;
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - step.f;
        x = step.x;
        g = step.g;
        fx = step.f;
        history.push(fx);
        if decrease <= opts.rel_tol * fx.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    LbfgsResult {
        x,
        value: fx,
        iterations,
        evaluations: ev.count,
        converged,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let opts = LbfgsOptions { rel_tol: 1e-15, first_step: 0.1, ..LbfgsOptions::default() };
        let r = minimize(f, &[-1.2, 1.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        for w in r.history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn quadratic_needs_few_iterations() {
        let diag = [1.0, 10.0, 100.0, 3.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..4 {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        };
        let opts = LbfgsOptions { rel_tol: 0.0, max_iterations: 50, ..LbfgsOptions::default() };
        let r = minimize(f, &[0.0; 4], &opts);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }
}
