//! First-order and quasi-Newton optimizers.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `x` against `grad`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        assert_eq!(x.len(), grad.len());
        if self.m.len() != x.len() {
            self.m = vec![0.0; x.len()];
            self.v = vec![0.0; x.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (math::sqrt(vh) + self.eps);
        }
    }

    /// Updates every tensor of `store`; `grads` follows the store's order.
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        let mut x = store.to_flat();
        let mut g = Vec::with_capacity(x.len());
        for t in grads {
            g.extend_from_slice(t.data());
        }
        self.step(&mut x, &g);
        store.assign_flat(&x);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Stop once the Euclidean gradient norm is at most this.
    pub tolerance: f64,
    pub history: usize,
    pub max_iterations: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, history: 10, max_iterations: 200, c1: 1e-4, c2: 0.9, max_line_search: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.status == LbfgsStatus::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, clamped
/// to `[lo, hi]`; falls back to bisection when the cubic has no minimizer.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64, lo: f64, hi: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let t = if disc >= 0.0 {
        let d2 = math::sqrt(disc) * if b >= a { 1.0 } else { -1.0 };
        b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2))
    } else {
        0.5 * (lo + hi)
    };
    if t.is_finite() {
        t.clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    }
}

struct Probe {
    t: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    d0: f64,
    c1: f64,
    c2: f64,
    /// Roundoff allowance in the decrease tests.
    slack: f64,
    evals: usize,
    budget: usize,
}

impl<F, E> LineSearch<'_, F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64, E>,
{
    fn probe(&mut self, t: f64) -> Result<Probe, E> {
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(a, d)| a + t * d).collect();
        let mut g = vec![0.0; x.len()];
        let f = (self.f)(&x, &mut g)?;
        self.evals += 1;
        let d = dot(&g, self.dir);
        Ok(Probe { t, f, d, x, g })
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.f.is_finite() || p.f > self.f0 + self.c1 * p.t * self.d0 + self.slack
    }

    fn curvature_ok(&self, p: &Probe) -> bool {
        p.d.abs() <= -self.c2 * self.d0
    }

    /// Strong Wolfe search; returns the accepted probe, or the best
    /// decreasing probe with `false` when the budget runs out.
    fn run(&mut self, t0: f64) -> Result<Option<(Probe, bool)>, E> {
        let mut prev = Probe { t: 0.0, f: self.f0, d: self.d0, x: self.x.to_vec(), g: Vec::new() };
        let mut t = t0;
        for i in 0..self.budget {
            let cur = self.probe(t)?;
            if !cur.f.is_finite() || !cur.d.is_finite() {
                t = 0.5 * (prev.t + t);
                continue;
            }
            if self.armijo_fails(&cur) || (i > 0 && cur.f > prev.f + self.slack) {
                return self.zoom(prev, cur);
            }
            if self.curvature_ok(&cur) {
                return Ok(Some((cur, true)));
            }
            if cur.d >= 0.0 {
                return self.zoom(cur, prev);
            }
            let next = cubic_min(prev.t, prev.f, prev.d, cur.t, cur.f, cur.d, cur.t + 0.01 * (cur.t - prev.t), 10.0 * cur.t);
            prev = cur;
            t = next;
        }
        Ok(if prev.t > 0.0 { Some((prev, false)) } else { None })
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Result<Option<(Probe, bool)>, E> {
        while self.evals < self.budget {
            let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
            let width = b - a;
            if width <= f64::EPSILON * b.max(1e-300) {
                break;
            }
            let t = if hi.f.is_finite() {
                cubic_min(lo.t, lo.f, lo.d, hi.t, hi.f, hi.d, a + 0.1 * width, b - 0.1 * width)
            } else {
                0.5 * (a + b)
            };
            let cur = self.probe(t)?;
            if self.armijo_fails(&cur) || cur.f > lo.f + self.slack || !cur.d.is_finite() {
                hi = cur;
            } else {
                if self.curvature_ok(&cur) {
                    return Ok(Some((cur, true)));
                }
                if cur.d * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        Ok(if lo.t > 0.0 { Some((lo, false)) } else { None })
    }
}

/// Minimizes `f` from `x0` by limited-memory BFGS with a strong Wolfe line
/// search. `f` writes the gradient into its second argument and returns
/// the value.
pub fn lbfgs<F, E>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult, E>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64, E>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    let mut evals = 1;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut status = LbfgsStatus::MaxIterations;
    let mut iters = 0;
    let mut gnorm = norm(&g);
    while iters < cfg.max_iterations {
        if gnorm <= cfg.tolerance {
            status = LbfgsStatus::Converged;
            break;
        }
        if !fx.is_finite() || !gnorm.is_finite() {
            status = LbfgsStatus::LineSearchFailed;
            break;
        }
        // Two-loop recursion.
        let mut q: Vec<f64> = g.clone();
        let mut alpha = vec![0.0; mem.len()];
        for (i, (s, y, rho)) in mem.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &q);
            for k in 0..n {
                q[k] -= alpha[i] * y[k];
            }
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0,
        };
        for v in &mut q {
            *v *= gamma;
        }
        for (i, (s, y, rho)) in mem.iter().enumerate() {
            let beta = rho * dot(y, &q);
            for k in 0..n {
                q[k] += (alpha[i] - beta) * s[k];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &dir);
        if !(d0 < 0.0) {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            d0 = -gnorm * gnorm;
        }
        let t0 = if mem.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let slack = 1e-12 * (1.0 + fx.abs());
        let mut ls = LineSearch { f: &mut f, x: &x, dir: &dir, f0: fx, d0, c1: cfg.c1, c2: cfg.c2, slack, evals: 0, budget: cfg.max_line_search };
        let found = ls.run(t0)?;
        evals += ls.evals;
        iters += 1;
        let Some((p, ok)) = found else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x = p.x;
        g = p.g;
        fx = p.f;
        gnorm = norm(&g);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        if !ok {
            if gnorm <= cfg.tolerance {
                status = LbfgsStatus::Converged;
            } else {
                status = LbfgsStatus::LineSearchFailed;
            }
            break;
        }
    }
    if status == LbfgsStatus::MaxIterations && gnorm <= cfg.tolerance {
        status = LbfgsStatus::Converged;
    }
    Ok(LbfgsResult { x, f: fx, grad_norm: gnorm, iterations: iters, evaluations: evals, status })
}
