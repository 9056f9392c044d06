//! AdamW with decoupled weight decay, and L-BFGS with Armijo backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            lr,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let lr = self.lr;
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *p -= lr * weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub history: usize,
    /// Step halvings before the line search gives up.
    pub max_line_search: usize,
    /// Stop once the largest gradient component falls below this.
    pub tolerance: f64,
    /// Initial trial step once curvature information exists.
    pub step: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_line_search: 20,
            tolerance: 1e-10,
            step: 1.0,
            c1: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LbfgsStatus {
    /// A step was accepted.
    Progress,
    /// The gradient is below tolerance; nothing left to do.
    Converged,
    /// No step length satisfied the sufficient-decrease condition.
    LineSearchFailed,
}

/// L-BFGS state: the last `history` pairs `s = Δx`, `y = Δg`.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub cfg: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Lbfgs {
            cfg,
            s: VecDeque::new(),
            y: VecDeque::new(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.s.len()
    }

    /// Records a curvature pair; pairs with `sᵀy ≤ 1e-10` are skipped.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if self.cfg.history == 0 || dot(&s, &y) <= 1e-10 {
            return false;
        }
        if self.s.len() == self.cfg.history {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        true
    }

    /// Two-loop recursion: `−H·g` with `H₀ = (sᵀy / yᵀy)·I`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.s[i], &self.y[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `(x, fx, gx)`, updated in place on success.
    /// `eval` returns the objective and its gradient.
    pub fn iterate<F>(&mut self, x: &mut Vec<f64>, fx: &mut f64, gx: &mut Vec<f64>, eval: &mut F) -> LbfgsStatus
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let gmax = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= self.cfg.tolerance {
            return LbfgsStatus::Converged;
        }
        let mut d = self.direction(gx);
        let mut slope = dot(gx, &d);
        if !(slope < 0.0) {
            self.s.clear();
            self.y.clear();
            d = gx.iter().map(|v| -v).collect();
            slope = dot(gx, &d);
        }
        let mut t = if self.s.is_empty() {
            let l1: f64 = gx.iter().map(|v| v.abs()).sum();
            self.cfg.step.min(1.0 / l1)
        } else {
            self.cfg.step
        };
        for _ in 0..=self.cfg.max_line_search {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = eval(&trial);
            if ft.is_finite() && ft <= *fx + self.cfg.c1 * t * slope {
                let s: Vec<f64> = d.iter().map(|di| t * di).collect();
                let y: Vec<f64> = gt.iter().zip(gx.iter()).map(|(a, b)| a - b).collect();
                self.push(s, y);
                *x = trial;
                *fx = ft;
                *gx = gt;
                return LbfgsStatus::Progress;
            }
            t *= 0.5;
        }
        LbfgsStatus::LineSearchFailed
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

/// Runs L-BFGS for at most `max_iter` iterations.
pub fn minimize<F>(mut eval: F, x0: &[f64], cfg: LbfgsConfig, max_iter: usize) -> MinimizeResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut opt = Lbfgs::new(cfg);
    let mut x = x0.to_vec();
    let (mut f, mut g) = eval(&x);
    let mut status = LbfgsStatus::Progress;
    let mut iterations = 0;
    while iterations < max_iter {
        status = opt.iterate(&mut x, &mut f, &mut g, &mut eval);
        if status != LbfgsStatus::Progress {
            break;
        }
        iterations += 1;
    }
    MinimizeResult { x, f, iterations, status }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn rosenbrock_converges() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], LbfgsConfig::default(), 200);
        assert!(r.f < 1e-6, "f = {} after {} iterations", r.f, r.iterations);
        assert!((r.x[0] - 1.0).abs() < 1e-2 && (r.x[1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn quadratic_hits_minimizer() {
        let target = [3.0, -1.0, 0.5, 2.0];
        let quad = |x: &[f64]| {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
            (0.5 * g.iter().map(|v| v * v).sum::<f64>(), g)
        };
        let cfg = LbfgsConfig::default();
        let r = minimize(quad, &[0.0; 4], cfg, 2 * cfg.history);
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_history_is_steepest_descent() {
        let opt = Lbfgs::new(LbfgsConfig { history: 0, ..LbfgsConfig::default() });
        let g = [0.3, -1.2, 2.0];
        let d = opt.direction(&g);
        let cos = -dot(&d, &g) / (dot(&d, &d).sqrt() * dot(&g, &g).sqrt());
        assert!((cos - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_pair_matches_closed_form() {
        let mut opt = Lbfgs::new(LbfgsConfig { history: 1, ..LbfgsConfig::default() });
        let s = vec![0.5, -0.2, 0.1];
        let y = vec![0.7, -0.1, 0.4];
        assert!(opt.push(s.clone(), y.clone()));
        let g = [1.0, 2.0, -0.5];
        let rho = 1.0 / dot(&s, &y);
        let gamma = dot(&s, &y) / dot(&y, &y);
        // H = (I − ρ s yᵀ) γ (I − ρ y sᵀ) + ρ s sᵀ
        let n = 3;
        let mut h = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    let left = if i == k { 1.0 } else { 0.0 } - rho * s[i] * y[k];
                    let right = if k == j { 1.0 } else { 0.0 } - rho * y[k] * s[j];
                    acc += left * gamma * right;
                }
                h[i][j] = acc + rho * s[i] * s[j];
            }
        }
        let want: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i][j] * g[j]).sum::<f64>()).collect();
        let got = opt.direction(&g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_without_momentum_is_rms_scaled_sgd() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.5));
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(&store, 0.1, cfg);
        let g = -0.4;
        opt.step(&mut store, &[Tensor::scalar(g)]);
        let want = 1.5 - 0.1 * g / (g.abs() + 1e-8);
        assert!((store.get(id).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(&store, 1e-3, cfg);
        opt.step(&mut store, &[Tensor::scalar(0.25)]);
        // bias-corrected moments equal g and g², so the step is lr·g/(|g|+ε)
        let decayed = 2.0 - 1e-3 * 0.01 * 2.0;
        let want = decayed - 1e-3 * 0.25 / (0.25 + 1e-8);
        assert!((store.get(id).data()[0] - want).abs() < 1e-12);
    }
}
