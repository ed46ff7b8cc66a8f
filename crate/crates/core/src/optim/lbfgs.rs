//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{invalid_arg, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub history_size: usize,
    /// Objective evaluations allowed per run, line-search trials included.
    pub max_evals: usize,
    /// Stop once `||g||_2 <= grad_tolerance`.
    pub grad_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { history_size: 10, max_evals: 64, grad_tolerance: 0.0, c1: 1e-4, c2: 0.9, max_line_search: 20 }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_size == 0 {
            return invalid_arg("history_size must be at least 1");
        }
        if self.max_evals == 0 || self.max_line_search == 0 {
            return invalid_arg("evaluation budgets must be positive");
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return invalid_arg("line search needs 0 < c1 < c2 < 1");
        }
        if !(self.grad_tolerance >= 0.0) {
            return invalid_arg("grad_tolerance must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Both strong-Wolfe conditions hold.
    Accepted,
    /// The line search ran out of trials or budget; the best decreasing
    /// trial point was taken.
    Truncated,
}

/// One iteration: the line-search trial that became the new iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub evaluation: usize,
    pub step: f64,
    pub f_prev: f64,
    pub f: f64,
    /// Directional derivative along the search direction at the start and
    /// at the new point.
    pub dphi0: f64,
    pub dphi: f64,
    pub grad_norm: f64,
    pub kind: StepKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    GradTolerance,
    /// The line search found no decrease.
    NoProgress,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub evals: usize,
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counter<'a, F> {
    f: &'a mut F,
    evals: usize,
    max: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> Result<f64>> Counter<'_, F> {
    fn exhausted(&self) -> bool {
        self.evals >= self.max
    }

    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; x.len()];
        let v = (self.f)(x, &mut g)?;
        self.evals += 1;
        if !v.is_finite() {
            return Err(Error::NonFinite { evaluation: self.evals, detail: format!("objective value {v}") });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                evaluation: self.evals,
                detail: format!("gradient[{i}] = {} (objective {v})", g[i]),
            });
        }
        Ok((v, g))
    }
}

/// Minimizer of the cubic interpolating `(a, fa, ga)` and `(b, fb, gb)`.
fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> Option<f64> {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Trial {
    a: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

enum Search {
    Wolfe(Trial),
    Best(Trial),
    Failed,
}

fn line_search<F: FnMut(&[f64], &mut [f64]) -> Result<f64>>(
    ev: &mut Counter<'_, F>,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dphi0: f64,
    a_init: f64,
    cfg: &LbfgsConfig,
) -> Result<Search> {
    let mut trials = 0usize;
    let mut best: Option<Trial> = None;
    let mut xt = vec![0.0; x.len()];
    let mut probe = |ev: &mut Counter<'_, F>, a: f64, best: &mut Option<Trial>| -> Result<Trial> {
        for ((t, xi), di) in xt.iter_mut().zip(x).zip(d) {
            *t = xi + a * di;
        }
        let (f, g) = ev.eval(&xt)?;
        let dphi = dot(&g, d);
        if f < f0 && best.as_ref().map_or(true, |b| f < b.f) {
            *best = Some(Trial { a, f, g: g.clone(), dphi });
        }
        Ok(Trial { a, f, g, dphi })
    };
    let armijo = |t: &Trial| t.f <= f0 + cfg.c1 * t.a * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -cfg.c2 * dphi0;
    let finish = |best: Option<Trial>| match best {
        Some(b) => Search::Best(b),
        None => Search::Failed,
    };

    // bracketing phase
    let mut prev = Trial { a: 0.0, f: f0, g: Vec::new(), dphi: dphi0 };
    let mut a = a_init;
    let (mut lo, mut hi);
    loop {
        if trials >= cfg.max_line_search || ev.exhausted() {
            return Ok(finish(best));
        }
        trials += 1;
        let t = probe(ev, a, &mut best)?;
        if !armijo(&t) || (trials > 1 && t.f >= prev.f) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Ok(Search::Wolfe(t));
        }
        if t.dphi >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        let next = cubic_min(prev.a, prev.f, prev.dphi, t.a, t.f, t.dphi)
            .filter(|c| *c > t.a)
            .unwrap_or(2.0 * t.a)
            .clamp(1.1 * t.a, 10.0 * t.a);
        prev = t;
        a = next;
    }

    // zoom between lo (satisfies Armijo, lowest f) and hi
    loop {
        if trials >= cfg.max_line_search || ev.exhausted() {
            return Ok(finish(best));
        }
        trials += 1;
        let (l, h) = (lo.a.min(hi.a), lo.a.max(hi.a));
        let width = h - l;
        if width <= f64::EPSILON * h.max(1e-300) {
            return Ok(finish(best));
        }
        let a = match cubic_min(lo.a, lo.f, lo.dphi, hi.a, hi.f, hi.dphi) {
            Some(c) if c > l + 0.1 * width && c < h - 0.1 * width => c,
            _ => 0.5 * (lo.a + hi.a),
        };
        let t = probe(ev, a, &mut best)?;
        if !armijo(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(Search::Wolfe(t));
            }
            if t.dphi * (hi.a - lo.a) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
}

/// Minimizes `f` from `x0`. The callback writes the gradient into its
/// second argument and returns the objective value.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    cfg.validate()?;
    let mut ev = Counter { f: &mut f, evals: 0, max: cfg.max_evals };
    let mut x = x0.to_vec();
    let (mut fx, mut g) = ev.eval(&x)?;
    let mut steps = Vec::new();
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history_size);
    let stop = loop {
        let gnorm = norm(&g);
        if gnorm <= cfg.grad_tolerance {
            break StopReason::GradTolerance;
        }
        if ev.exhausted() {
            break StopReason::Budget;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&g, &d);
        let mut a_init = 1.0;
        if hist.is_empty() || !(dphi0 < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
            a_init = 1.0 / gnorm;
        }

        let (t, kind) = match line_search(&mut ev, &x, fx, &d, dphi0, a_init, cfg)? {
            Search::Wolfe(t) => (t, StepKind::Accepted),
            Search::Best(t) => (t, StepKind::Truncated),
            Search::Failed => break if ev.exhausted() { StopReason::Budget } else { StopReason::NoProgress },
        };
        let s: Vec<f64> = d.iter().map(|di| t.a * di).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if hist.len() == cfg.history_size {
                hist.pop_front();
            }
            hist.push_back((s.clone(), y, 1.0 / sy));
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        steps.push(StepRecord {
            evaluation: ev.evals,
            step: t.a,
            f_prev: fx,
            f: t.f,
            dphi0,
            dphi: t.dphi,
            grad_norm: norm(&t.g),
            kind,
        });
        fx = t.f;
        g = t.g;
    };
    let evals = ev.evals;
    Ok(LbfgsResult { x, f: fx, grad: g, evals, steps, stop })
}
