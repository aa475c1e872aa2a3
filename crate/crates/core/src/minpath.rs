//! Minimum-action paths between fixed endpoints.
//!
//! The discretized action `F(x_1..x_{m-1}) = sum_k Delta L(x_k, s_k)` with
//! segment slopes `s_k = (x_{k+1} - x_k)/Delta` is minimized by gradient
//! descent with backtracking. The alpha-derivative of `L` is the adjoint
//! maximizer itself (`dL/dalpha = beta*`, the envelope theorem), so the
//! gradient at an interior node needs only the per-segment adjoints plus a
//! finite-difference x-derivative when the Hamiltonian depends on the slow
//! variable. Infeasible steps (infinite local rate) are rejected by the line
//! search.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::action::{Path, RateField};
use crate::error::{Error, Result};
use crate::hamiltonian;
use crate::model::SystemSpec;
use crate::rate::{RateFunction, SpectralResolver};

/// Finite-difference step for the x-derivative of `L`.
const X_STEP: f64 = 1e-3;

impl<F: RateField + ?Sized> RateField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &[f64], alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).eval(x, alpha)
    }

    fn is_uniform(&self) -> bool {
        (**self).is_uniform()
    }
}

/// Position-dependent rate field backed by per-x spectral surfaces, cached on
/// quantized slow positions (the Hamiltonian is evaluated on the diagonal
/// `H(x, x, .)`).
pub struct SpectralRateField {
    spec: SystemSpec,
    beta_half_width: f64,
    n_per_axis: usize,
    grid_n: usize,
    pub trunc_b: f64,
    cache: Mutex<HashMap<Vec<i64>, Arc<RateFunction>>>,
    /// Attach exact re-solvers to the per-x rate functions.
    pub polish: bool,
}

impl SpectralRateField {
    pub fn new(
        spec: SystemSpec,
        beta_half_width: f64,
        n_per_axis: usize,
        grid_n: usize,
        trunc_b: f64,
    ) -> Self {
        Self {
            spec,
            beta_half_width,
            n_per_axis,
            grid_n,
            trunc_b,
            cache: Mutex::new(HashMap::new()),
            polish: false,
        }
    }

    fn key(x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v * 1e9).round() as i64).collect()
    }

    /// The rate function tabulated at slow position `x` (cached).
    pub fn rate_at(&self, x: &[f64]) -> Result<Arc<RateFunction>> {
        let key = Self::key(x);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let d = self.spec.dim_slow;
        let lo = vec![-self.beta_half_width; d];
        let hi = vec![self.beta_half_width; d];
        let surface = hamiltonian::build_surface(
            &self.spec,
            x,
            x,
            &lo,
            &hi,
            self.n_per_axis,
            self.grid_n,
        )?;
        let mut rate = RateFunction::spectral(surface, self.trunc_b);
        if self.polish {
            rate = rate.with_resolver(SpectralResolver::new(
                self.spec.clone(),
                x.to_vec(),
                x.to_vec(),
                self.grid_n,
            ));
        }
        let rate = Arc::new(rate);
        self.cache.lock().unwrap().insert(key, rate.clone());
        Ok(rate)
    }
}

impl RateField for SpectralRateField {
    fn dim(&self) -> usize {
        self.spec.dim_slow
    }

    fn eval(&self, x: &[f64], alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rate = self.rate_at(x)?;
        let r = rate.legendre(alpha, self.trunc_b)?;
        Ok((r.value, r.beta_star))
    }

    fn is_uniform(&self) -> bool {
        false
    }
}

/// Fixed-endpoint minimum-action problem over `m` segments.
#[derive(Debug, Clone)]
pub struct MinActionProblem {
    pub x_start: Vec<f64>,
    pub x_end: Vec<f64>,
    pub t_end: f64,
    pub m: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl MinActionProblem {
    pub fn new(x_start: Vec<f64>, x_end: Vec<f64>, t_end: f64, m: usize) -> Self {
        Self { x_start, x_end, t_end, m, max_iters: 500, tol: 1e-7 }
    }
}

/// Result of a minimum-action solve.
#[derive(Debug, Clone, Serialize)]
pub struct MinActionResult {
    #[serde(skip)]
    pub path: Path,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value after each accepted step (nonincreasing).
    pub per_iter: Vec<f64>,
}

struct Objective<'a, F: RateField> {
    rate: &'a F,
    delta: f64,
    dim: usize,
}

impl<F: RateField> Objective<'_, F> {
    /// Value plus per-segment `(L, beta*)`.
    fn eval(&self, nodes: &[f64]) -> Result<(f64, Vec<(f64, Vec<f64>)>)> {
        let d = self.dim;
        let m = nodes.len() / d - 1;
        let mut segs = Vec::with_capacity(m);
        let mut total = 0.0;
        for k in 0..m {
            let xk = &nodes[k * d..(k + 1) * d];
            let slope: Vec<f64> = (0..d)
                .map(|j| (nodes[(k + 1) * d + j] - nodes[k * d + j]) / self.delta)
                .collect();
            let (l, beta) = self.rate.eval(xk, &slope)?;
            total += self.delta * l;
            segs.push((l, beta));
        }
        Ok((total, segs))
    }

    /// Gradient w.r.t. the free nodes `free_lo..free_hi` (node indices).
    fn gradient(
        &self,
        nodes: &[f64],
        segs: &[(f64, Vec<f64>)],
        free_lo: usize,
        free_hi: usize,
    ) -> Result<Vec<f64>> {
        let d = self.dim;
        let m = segs.len();
        let mut grad = vec![0.0; (free_hi - free_lo + 1) * d];
        for node in free_lo..=free_hi {
            let g = &mut grad[(node - free_lo) * d..(node - free_lo + 1) * d];
            // adjoint terms: d(Delta L_k)/dx via the slopes
            if node >= 1 {
                let beta_prev = &segs[node - 1].1;
                for j in 0..d {
                    g[j] += beta_prev[j];
                }
            }
            if node < m {
                let beta_here = &segs[node].1;
                for j in 0..d {
                    g[j] -= beta_here[j];
                }
            }
            // explicit x-dependence of L at the left node of segment `node`
            if node < m && !self.rate.is_uniform() {
                let xk = &nodes[node * d..(node + 1) * d];
                let slope: Vec<f64> = (0..d)
                    .map(|j| (nodes[(node + 1) * d + j] - nodes[node * d + j]) / self.delta)
                    .collect();
                for j in 0..d {
                    let mut xp = xk.to_vec();
                    let mut xm = xk.to_vec();
                    xp[j] += X_STEP;
                    xm[j] -= X_STEP;
                    let (lp, _) = self.rate.eval(&xp, &slope)?;
                    let (lm, _) = self.rate.eval(&xm, &slope)?;
                    if lp.is_finite() && lm.is_finite() {
                        g[j] += self.delta * (lp - lm) / (2.0 * X_STEP);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Minimize the discretized action over interior nodes with fixed endpoints.
///
/// `init` defaults to the straight line between the endpoints; an explicit
/// initial path is resampled onto the problem's grid. An infeasible
/// initialization (a segment with infinite local rate) is an error naming
/// the segment.
pub fn minimize_action(
    problem: &MinActionProblem,
    rate: &impl RateField,
    init: Option<&Path>,
) -> Result<MinActionResult> {
    let d = problem.x_start.len();
    if problem.m < 2 {
        return Err(Error::InvalidArgument("minimum-action problems need m >= 2".into()));
    }
    let delta = problem.t_end / problem.m as f64;
    let mut nodes: Vec<f64> = match init {
        None => {
            let line = Path::linear(&problem.x_start, &problem.x_end, problem.t_end, problem.m)?;
            line.nodes
        }
        Some(p) => {
            let mut v = Vec::with_capacity((problem.m + 1) * d);
            for i in 0..=problem.m {
                v.extend(p.value_at(problem.t_end * i as f64 / problem.m as f64));
            }
            // pin the endpoints exactly
            v[..d].copy_from_slice(&problem.x_start);
            let tail = v.len() - d;
            v[tail..].copy_from_slice(&problem.x_end);
            v
        }
    };

    let objective = Objective { rate, delta, dim: d };
    let (mut value, mut segs) = objective.eval(&nodes)?;
    if !value.is_finite() {
        let bad = segs.iter().position(|(l, _)| !l.is_finite()).unwrap_or(0);
        let slope: Vec<f64> = (0..d)
            .map(|j| (nodes[(bad + 1) * d + j] - nodes[bad * d + j]) / delta)
            .collect();
        return Err(Error::InfeasibleSegment { segment: bad, slope });
    }

    let mut per_iter = vec![value];
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut step_hint = delta;

    while iterations < problem.max_iters {
        let grad = objective.gradient(&nodes, &segs, 1, problem.m - 1)?;
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= problem.tol {
            converged = true;
            break;
        }

        // backtracking line search with the infeasibility barrier
        let mut eta = step_hint;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = nodes.clone();
            for (i, g) in grad.iter().enumerate() {
                cand[d + i] -= eta * g;
            }
            match objective.eval(&cand) {
                Ok((cv, cs)) if cv.is_finite() && cv <= value - 1e-4 * eta * grad_norm * grad_norm =>
                {
                    nodes = cand;
                    value = cv;
                    segs = cs;
                    accepted = true;
                    break;
                }
                _ => eta *= 0.5,
            }
        }
        if !accepted {
            // no descent step left at this resolution; declare convergence
            // only if the gradient is small
            converged = grad_norm <= problem.tol * 100.0;
            break;
        }
        step_hint = (eta * 2.0).min(delta * 10.0);
        per_iter.push(value);
        iterations += 1;
    }

    Ok(MinActionResult {
        path: Path::new(problem.t_end, d, nodes)?,
        value,
        grad_norm,
        converged,
        iterations,
        per_iter,
    })
}

/// Result of a level-set distance computation.
#[derive(Debug, Clone, Serialize)]
pub struct LevelSetDistance {
    pub distance: f64,
    pub achieved_action: f64,
    pub converged: bool,
}

/// Approximate sup-distance from `path` to the action level set
/// `{xi : xi(0) = path(0), S(xi) <= s}` by penalty descent over the nodes of
/// `xi` (start pinned, interior and end free).
pub fn level_set_distance(
    path: &Path,
    s: f64,
    rate: &impl RateField,
) -> Result<LevelSetDistance> {
    if s < 0.0 {
        return Err(Error::InvalidArgument("level must satisfy s >= 0".into()));
    }
    let d = path.dim;
    let m = path.num_segments();
    let delta = path.dt();
    let objective = Objective { rate, delta, dim: d };

    // path itself feasible: distance zero
    if let Ok((s_path, _)) = objective.eval(&path.nodes) {
        if s_path <= s + 1e-12 {
            return Ok(LevelSetDistance { distance: 0.0, achieved_action: s_path, converged: true });
        }
    }

    // feasible initialization: pull each slope toward the zero-rate drift
    let mut nodes = path.nodes.clone();
    for k in 0..m {
        let xk: Vec<f64> = nodes[k * d..(k + 1) * d].to_vec();
        let slope: Vec<f64> =
            (0..d).map(|j| (path.nodes[(k + 1) * d + j] - path.nodes[k * d + j]) / delta).collect();
        let drift = zero_rate_drift(rate, &xk)?;
        let feasible_slope = largest_feasible_blend(rate, &xk, &drift, &slope)?;
        for j in 0..d {
            nodes[(k + 1) * d + j] = nodes[k * d + j] + delta * feasible_slope[j];
        }
    }

    let sup_dist = |cand: &[f64]| -> f64 {
        (0..=m)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diff = cand[i * d + j] - path.nodes[i * d + j];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };

    // smoothed sup-norm for the descent direction
    let p = 8i32;
    let smooth_dist_grad = |cand: &[f64]| -> (f64, Vec<f64>) {
        let mut norms = vec![0.0; m + 1];
        for i in 0..=m {
            norms[i] = (0..d)
                .map(|j| {
                    let diff = cand[i * d + j] - path.nodes[i * d + j];
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
        }
        let maxn = norms.iter().cloned().fold(0.0, f64::max);
        if maxn == 0.0 {
            return (0.0, vec![0.0; (m + 1) * d]);
        }
        let sum_p: f64 = norms.iter().map(|n| (n / maxn).powi(p)).sum();
        let dp = maxn * sum_p.powf(1.0 / p as f64);
        let mut grad = vec![0.0; (m + 1) * d];
        for i in 0..=m {
            if norms[i] == 0.0 {
                continue;
            }
            let w = (norms[i] / maxn).powi(p - 1) * sum_p.powf(1.0 / p as f64 - 1.0);
            for j in 0..d {
                grad[i * d + j] = w * (cand[i * d + j] - path.nodes[i * d + j]) / norms[i];
            }
        }
        (dp, grad)
    };

    let mut converged = false;
    for mu in [10.0, 100.0, 1000.0] {
        let penalty = |cand: &[f64]| -> Result<f64> {
            let (dist, _) = smooth_dist_grad(cand);
            let (act, _) = objective.eval(cand)?;
            if !act.is_finite() {
                return Ok(f64::INFINITY);
            }
            Ok(dist + mu * (act - s).max(0.0).powi(2))
        };
        let mut p_val = penalty(&nodes)?;
        let mut step = delta;
        for _ in 0..300 {
            let (_, mut grad) = smooth_dist_grad(&nodes);
            let (act, segs) = objective.eval(&nodes)?;
            if act.is_finite() && act > s {
                let act_grad = objective.gradient(&nodes, &segs, 1, m)?;
                let w = 2.0 * mu * (act - s);
                for (i, g) in act_grad.iter().enumerate() {
                    grad[d + i] += w * g;
                }
            }
            // pin the start node
            for g in grad[..d].iter_mut() {
                *g = 0.0;
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-9 {
                converged = true;
                break;
            }
            let mut eta = step;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> =
                    nodes.iter().zip(&grad).map(|(n, g)| n - eta * g).collect();
                let cv = penalty(&cand)?;
                if cv < p_val - 1e-12 {
                    nodes = cand;
                    p_val = cv;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
            step = eta * 2.0;
        }
    }

    let (achieved_action, _) = objective.eval(&nodes)?;
    Ok(LevelSetDistance { distance: sup_dist(&nodes), achieved_action, converged })
}

/// Zero-rate drift of the field at `x` (the velocity with `L = 0`): a coarse
/// scan over velocities followed by a shrinking pattern search anchored at
/// the best point found. Robust to indicator-type rates, where a descent
/// step into the infinite region must never displace the incumbent.
fn zero_rate_drift(rate: &impl RateField, x: &[f64]) -> Result<Vec<f64>> {
    let d = rate.dim();
    // velocities are bounded by the drift sup-norm; [-2, 2] per axis covers
    // every system treated here
    let mut best = (f64::INFINITY, vec![0.0; d]);
    if d == 1 {
        let steps = 41;
        for i in 0..steps {
            let a = -2.0 + 4.0 * i as f64 / (steps - 1) as f64;
            let (l, _) = rate.eval(x, &[a])?;
            if l < best.0 {
                best = (l, vec![a]);
            }
        }
    } else {
        let (l0, _) = rate.eval(x, &best.1)?;
        best.0 = l0;
    }
    let mut step = 0.1;
    for _ in 0..60 {
        let mut improved = false;
        for j in 0..d {
            for dir in [-1.0, 1.0] {
                let mut probe = best.1.clone();
                probe[j] += dir * step;
                let (l, _) = rate.eval(x, &probe)?;
                if l < best.0 {
                    best = (l, probe);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    Ok(best.1)
}

/// Largest `gamma in [0, 1]` with `L(x, drift + gamma (slope - drift))`
/// finite, returning the blended slope (gamma = 0, the drift itself, is
/// always feasible).
fn largest_feasible_blend(
    rate: &impl RateField,
    x: &[f64],
    drift: &[f64],
    slope: &[f64],
) -> Result<Vec<f64>> {
    let blend = |g: f64| -> Vec<f64> {
        drift.iter().zip(slope).map(|(d, s)| d + g * (s - d)).collect()
    };
    if rate.eval(x, slope)?.0.is_finite() {
        return Ok(slope.to_vec());
    }
    if !rate.eval(x, drift)?.0.is_finite() {
        return Err(Error::Numerical(
            "zero-rate drift has infinite local rate; cannot build a feasible path".into(),
        ));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if rate.eval(x, &blend(mid))?.0.is_finite() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(blend(lo))
}
