//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The iterate lives in `f64` regardless of the objective's internal
//! precision. Pairs with `yᵀs ≤ 1e-10` are skipped so the implicit inverse
//! Hessian stays positive definite.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CHANNEL_MEANS;
use crate::tensor::Tensor;

const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm drops to this value.
    pub grad_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iterations: 500,
            grad_tolerance: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evals: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Wolfe constants need 0 < c1 < c2 < 1 (c1 = {}, c2 = {})",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::InvalidConfig("L-BFGS memory must be at least 1".into()));
        }
        if self.max_line_search_evals == 0 {
            return Err(Error::InvalidConfig("line search needs at least one evaluation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_inf_norm: f64,
    pub step: f64,
    pub line_search_evals: usize,
    /// The step came from the steepest-descent fallback.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct Minimization {
    pub x: Vec<f64>,
    pub value: f64,
    pub records: Vec<IterationRecord>,
    pub status: Status,
    pub evaluations: usize,
}

/// Differentiable scalar function. Writes the gradient into `grad` and
/// returns the value.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for F {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    dphi: f64,
}

struct Probe<'a, O: Objective> {
    objective: &'a mut O,
    x: &'a [f64],
    d: &'a [f64],
    trial: Vec<f64>,
    grad: Vec<f64>,
    evals: usize,
    best: Option<(f64, Vec<f64>, Vec<f64>)>,
}

impl<O: Objective> Probe<'_, O> {
    fn eval(&mut self, alpha: f64) -> Point {
        for ((t, &x), &d) in self.trial.iter_mut().zip(self.x).zip(self.d) {
            *t = x + alpha * d;
        }
        let f = self.objective.evaluate(&self.trial, &mut self.grad);
        self.evals += 1;
        Point {
            alpha,
            f,
            dphi: dot(&self.grad, self.d),
        }
    }

    fn accept(&mut self, p: &Point) {
        self.best = Some((p.f, self.trial.clone(), self.grad.clone()));
    }
}

/// Minimizer of the cubic through two points with known slopes, clamped to
/// `[lo, hi]`; bisection when the cubic has no real minimizer.
fn cubic_minimizer(a: &Point, b: &Point, lo: f64, hi: f64) -> f64 {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let d2_sq = d1 * d1 - a.dphi * b.dphi;
    if d2_sq >= 0.0 && a.f.is_finite() && b.f.is_finite() {
        let d2 = d2_sq.sqrt();
        let t = if a.alpha <= b.alpha {
            b.alpha - (b.alpha - a.alpha) * ((b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2))
        } else {
            a.alpha - (a.alpha - b.alpha) * ((a.dphi + d2 - d1) / (a.dphi - b.dphi + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

/// Returns the accepted step length, or `None` when no strong-Wolfe point was
/// found within the evaluation budget.
fn strong_wolfe<O: Objective>(probe: &mut Probe<'_, O>, f0: f64, dphi0: f64, alpha0: f64, cfg: &LbfgsConfig) -> Option<f64> {
    let armijo = |p: &Point| p.f.is_finite() && p.f <= f0 + cfg.c1 * p.alpha * dphi0;
    let curvature = |p: &Point| p.dphi.abs() <= -cfg.c2 * dphi0;

    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        dphi: dphi0,
    };
    let mut alpha = alpha0;
    let (mut lo, mut hi);
    loop {
        if probe.evals >= cfg.max_line_search_evals {
            return None;
        }
        let cur = probe.eval(alpha);
        if !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            probe.accept(&cur);
            return Some(cur.alpha);
        }
        if cur.dphi >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        let span = cur.alpha - prev.alpha;
        alpha = cubic_minimizer(&prev, &cur, cur.alpha + 0.01 * span, cur.alpha * 10.0);
        prev = cur;
    }

    // zoom: `lo` satisfies sufficient decrease and has the lowest value seen
    // in the bracket; `hi` closes the bracket.
    while probe.evals < cfg.max_line_search_evals {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1.0) {
            return None;
        }
        let alpha = if hi.f.is_finite() {
            cubic_minimizer(&lo, &hi, a + 0.1 * width, b - 0.1 * width)
        } else {
            0.5 * (a + b)
        };
        let cur = probe.eval(alpha);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                probe.accept(&cur);
                return Some(cur.alpha);
            }
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    None
}

/// Armijo backtracking along `d`, halving from `alpha0`.
fn backtrack<O: Objective>(probe: &mut Probe<'_, O>, f0: f64, dphi0: f64, alpha0: f64, c1: f64, max_evals: usize) -> Option<f64> {
    let mut alpha = alpha0;
    for _ in 0..max_evals {
        let p = probe.eval(alpha);
        if p.f.is_finite() && p.f <= f0 + c1 * alpha * dphi0 {
            probe.accept(&p);
            return Some(alpha);
        }
        alpha *= 0.5;
    }
    None
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if sy <= CURVATURE_EPS {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Two-loop recursion: returns `-H·g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Minimizes `objective` from `init`. `on_iteration` sees each accepted step.
pub fn minimize<O: Objective>(
    objective: &mut O,
    init: Vec<f64>,
    config: &LbfgsConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<Minimization> {
    config.validate()?;
    let mut x = init;
    let mut g = vec![0.0; x.len()];
    let mut f = objective.evaluate(&x, &mut g);
    let mut evaluations = 1;
    let mut records = Vec::new();
    if !f.is_finite() {
        return Err(Error::InvalidConfig(format!("objective is not finite at the initial point ({f})")));
    }
    if inf_norm(&g) <= config.grad_tolerance {
        return Ok(Minimization {
            x,
            value: f,
            records,
            status: Status::Converged,
            evaluations,
        });
    }

    let mut history = History {
        pairs: VecDeque::with_capacity(config.memory),
        capacity: config.memory,
    };
    let mut status = Status::MaxIterations;
    for iteration in 1..=config.max_iterations {
        let mut d = history.direction(&g);
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) || !dphi0.is_finite() {
            history.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -dot(&g, &g);
        }
        let alpha0 = if history.pairs.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut dir_norm = dot(&d, &d).sqrt();
        let (alpha, evals, fallback, f_new, g_new, x_new) = {
            let mut probe = Probe {
                objective: &mut *objective,
                x: &x,
                d: &d,
                trial: vec![0.0; x.len()],
                grad: vec![0.0; x.len()],
                evals: 0,
                best: None,
            };
            let mut fallback = false;
            let mut alpha = strong_wolfe(&mut probe, f, dphi0, alpha0, config);
            if alpha.is_none() {
                fallback = true;
                log::debug!("line search failed at iteration {iteration}; falling back to steepest descent");
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                let sd_dphi = -dot(&g, &g);
                let step0 = (1.0 / sd_dphi.abs().sqrt()).min(1.0);
                let mut sd_probe = Probe {
                    objective: &mut *probe.objective,
                    x: &x,
                    d: &sd,
                    trial: vec![0.0; x.len()],
                    grad: vec![0.0; x.len()],
                    evals: probe.evals,
                    best: None,
                };
                alpha = backtrack(&mut sd_probe, f, sd_dphi, step0, config.c1, 2 * config.max_line_search_evals);
                probe.evals = sd_probe.evals;
                probe.best = sd_probe.best.take();
                dir_norm = sd_dphi.abs().sqrt();
            }
            let Some(alpha) = alpha else {
                evaluations += probe.evals;
                status = Status::Stalled;
                break;
            };
            let (f_new, x_new, g_new) = probe.best.take().expect("accepted point recorded");
            (alpha, probe.evals, fallback, f_new, g_new, x_new)
        };
        evaluations += evals;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if fallback {
            history.pairs.clear();
        }
        history.push(s, y);
        x = x_new;
        g = g_new;
        f = f_new;

        let record = IterationRecord {
            iteration,
            loss: f,
            grad_inf_norm: inf_norm(&g),
            step: alpha * dir_norm,
            line_search_evals: evals,
            fallback,
        };
        on_iteration(&record);
        let done = record.grad_inf_norm <= config.grad_tolerance;
        records.push(record);
        if done {
            status = Status::Converged;
            break;
        }
    }
    Ok(Minimization {
        x,
        value: f,
        records,
        status,
        evaluations,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// I.i.d. uniform pixels over the normalized range.
    #[default]
    WhiteNoise,
    /// A copy of the preprocessed content image.
    Content,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "noise" | "white-noise" | "white_noise" => Ok(InitMode::WhiteNoise),
            "content" | "content-copy" => Ok(InitMode::Content),
            other => Err(format!("unknown init mode `{other}` (expected noise|content)")),
        }
    }
}

/// Initial image for the optimizer. White noise is drawn per channel from
/// `[-mean_c, 255 - mean_c]`, i.e. the normalized image of uniform 8-bit noise.
pub fn init_image(mode: InitMode, content: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    match mode {
        InitMode::Content => content.clone(),
        InitMode::WhiteNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let [n, c, h, w] = content.shape();
            let mut out = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    let mean = CHANNEL_MEANS[ch % 3];
                    let start = out.index(b, ch, 0, 0);
                    for v in &mut out.data_mut()[start..start + h * w] {
                        *v = rng.random_range(-mean..255.0 - mean);
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn quadratic_is_solved_in_a_few_iterations() {
        let c = [3.0, -1.5, 0.25, 10.0];
        let mut f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - c[i]);
                v += (x[i] - c[i]).powi(2);
            }
            v
        };
        for start in [[0.0; 4], [-7.0, 2.0, 100.0, -3.0]] {
            let cfg = LbfgsConfig {
                grad_tolerance: 1e-8,
                ..Default::default()
            };
            let res = minimize(&mut f, start.to_vec(), &cfg, |_| {}).unwrap();
            assert_eq!(res.status, Status::Converged);
            assert!(res.records.len() <= 5, "{} iterations", res.records.len());
            for (xi, ci) in res.x.iter().zip(c) {
                assert!((xi - ci).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rosenbrock_converges_within_100_iterations() {
        let cfg = LbfgsConfig {
            max_iterations: 100,
            grad_tolerance: 1e-10,
            ..Default::default()
        };
        let mut f = rosenbrock;
        let res = minimize(&mut f, vec![-1.2, 1.0], &cfg, |_| {}).unwrap();
        assert!(res.value < 1e-8, "f = {} after {} iterations", res.value, res.records.len());
        let mut last = f64::INFINITY;
        for r in &res.records {
            assert!(r.loss <= last);
            last = r.loss;
        }
    }

    #[test]
    fn zero_gradient_returns_immediately() {
        let mut calls = 0;
        let mut f = |_: &[f64], g: &mut [f64]| {
            calls += 1;
            g.iter_mut().for_each(|v| *v = 0.0);
            4.0
        };
        let init = vec![1.0, 2.0, 3.0];
        let res = minimize(&mut f, init.clone(), &LbfgsConfig::default(), |_| {}).unwrap();
        assert_eq!(res.x, init);
        assert!(res.records.is_empty());
        assert_eq!(res.status, Status::Converged);
        assert_eq!(calls, 1);
    }

    #[test]
    fn wrong_gradient_sign_stalls() {
        // Gradient points uphill, so no step can satisfy sufficient decrease.
        let mut f = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * x[0];
            x[0] * x[0]
        };
        let res = minimize(&mut f, vec![1.0], &LbfgsConfig::default(), |_| {}).unwrap();
        assert_eq!(res.status, Status::Stalled);
        assert_eq!(res.x, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        let bad = LbfgsConfig {
            c1: 0.9,
            c2: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LbfgsConfig {
            memory: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn curvature_guard_skips_flat_pairs() {
        let mut h = History {
            pairs: VecDeque::new(),
            capacity: 2,
        };
        assert!(!h.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(!h.push(vec![1e-6, 0.0], vec![1e-6, 0.0]));
        assert!(h.push(vec![1.0, 0.0], vec![2.0, 0.0]));
        assert_eq!(h.pairs.len(), 1);
    }

    #[test]
    fn white_noise_is_seeded_and_centered() {
        let content = Tensor::<f32>::zeros([1, 3, 512, 512]);
        let a = init_image(InitMode::WhiteNoise, &content, 3);
        assert_eq!(a, init_image(InitMode::WhiteNoise, &content, 3));
        assert_ne!(a, init_image(InitMode::WhiteNoise, &content, 4));

        let n = (512 * 512) as f64;
        let sigma_mean = 255.0 / 12f64.sqrt() / n.sqrt();
        for c in 0..3 {
            let plane = &a.data()[c * 512 * 512..(c + 1) * 512 * 512];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mid = 127.5 - CHANNEL_MEANS[c] as f64;
            assert!((mean - mid).abs() < 3.0 * sigma_mean, "channel {c}: {mean} vs {mid}");
            assert!(plane.iter().all(|&v| v >= -CHANNEL_MEANS[c] && v <= 255.0 - CHANNEL_MEANS[c]));
        }
    }

    #[test]
    fn content_init_is_a_copy() {
        let content = Tensor::from_vec([1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(init_image(InitMode::Content, &content, 0), content);
    }
}
