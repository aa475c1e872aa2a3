//! The local rate function `L(x, alpha)` as a (truncated) Legendre transform
//! of the Hamiltonian, with adjoint maximizers, domain boxes, and the
//! zero-rate averaged drift.
//!
//! `L(x, alpha) = sup_beta (alpha . beta - H(x, beta))` and its truncation
//! `L^b` restricts the supremum to `|beta| <= b`. Outside the domain box of
//! directional infima/suprema of `f(x, .)` the untruncated `L` is `+inf`;
//! that value is routine data here, not an error.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::hamiltonian::{self, HamiltonianSurface};
use crate::model::SystemSpec;

/// Boundary-detection slack for the truncated maximizer.
const BOUNDARY_EPS: f64 = 1e-9;

/// Exact re-solve handle: evaluates `H` and its gradient spectrally at
/// arbitrary `beta`, with caching. Used to polish Legendre maximizers beyond
/// interpolation accuracy.
pub struct SpectralResolver {
    spec: SystemSpec,
    x_prime: Vec<f64>,
    x: Vec<f64>,
    grid_n: usize,
    cache: Mutex<HashMap<Vec<u64>, (f64, Vec<f64>)>>,
}

impl SpectralResolver {
    pub fn new(spec: SystemSpec, x_prime: Vec<f64>, x: Vec<f64>, grid_n: usize) -> Self {
        Self { spec, x_prime, x, grid_n, cache: Mutex::new(HashMap::new()) }
    }

    fn key(beta: &[f64]) -> Vec<u64> {
        beta.iter().map(|b| (b * 1e12).round().to_bits()).collect()
    }

    /// `(H(beta), grad H(beta))` by exact eigensolves.
    pub fn eval(&self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let key = Self::key(beta);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let pair =
            hamiltonian::h_spectral(&self.spec, &self.x_prime, &self.x, beta, self.grid_n)?;
        let grad = hamiltonian::grad_h(&self.spec, &self.x_prime, &self.x, beta, self.grid_n, 0.02)?;
        let out = (pair.eigenvalue, grad);
        self.cache.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }
}

/// Per-direction extent of the slow drift over the fast space:
/// `m_v = inf_y v.f(x, y)`, `M_v = sup_y v.f(x, y)`. The finite-`L` region
/// per direction is contained in `[m_v, M_v]`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DomainBox {
    pub directions: Vec<Vec<f64>>,
    pub m: Vec<f64>,
    pub big_m: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl DomainBox {
    /// Whether `alpha` lies strictly inside the box (degenerate directions
    /// require exact coincidence). Nonfinite projections are outside.
    pub fn strictly_inside(&self, alpha: &[f64]) -> bool {
        for (k, v) in self.directions.iter().enumerate() {
            let proj: f64 = v.iter().zip(alpha).map(|(a, b)| a * b).sum();
            let ok = if self.degenerate[k] {
                (proj - self.big_m[k]).abs() <= 1e-9
            } else {
                proj > self.m[k] + 1e-12 && proj < self.big_m[k] - 1e-12
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

/// Scan `v . f(x, .)` on a dense torus grid per direction, refine the extrema
/// by local search, and flag directions with `M - m < 1e-9` as degenerate.
pub fn domain_box(
    spec: &SystemSpec,
    x: &[f64],
    directions: &[Vec<f64>],
    grid_n: usize,
) -> Result<DomainBox> {
    if grid_n < 32 {
        return Err(Error::InvalidArgument("domain_box requires grid_n >= 32".into()));
    }
    let l = spec.dim_fast();
    let mut fval = vec![0.0; spec.dim_slow];
    let mut m = Vec::new();
    let mut big_m = Vec::new();
    let mut degenerate = Vec::new();

    for v in directions {
        let eval = |y: &[f64], fval: &mut Vec<f64>| -> f64 {
            spec.eval_f(x, y, fval);
            v.iter().zip(fval.iter()).map(|(a, b)| a * b).sum()
        };
        let cells = grid_n.pow(l as u32);
        let mut y = vec![0.0; l];
        let mut best_min = (f64::INFINITY, vec![0.0; l]);
        let mut best_max = (f64::NEG_INFINITY, vec![0.0; l]);
        for flat in 0..cells {
            let mut r = flat;
            for k in (0..l).rev() {
                let idx = r % grid_n;
                r /= grid_n;
                y[k] = spec.geometry.period[k] * idx as f64 / grid_n as f64;
            }
            let val = eval(&y, &mut fval);
            if val < best_min.0 {
                best_min = (val, y.clone());
            }
            if val > best_max.0 {
                best_max = (val, y.clone());
            }
        }
        // local refinement: shrinking pattern search around each extremum
        let refine = |start: (f64, Vec<f64>), sign: f64, fval: &mut Vec<f64>| -> f64 {
            let mut center = start.1;
            let mut best = start.0;
            let mut step: Vec<f64> =
                spec.geometry.period.iter().map(|p| p / grid_n as f64).collect();
            for _ in 0..40 {
                let mut improved = false;
                for k in 0..l {
                    for dir in [-1.0, 1.0] {
                        let mut cand = center.clone();
                        cand[k] += dir * step[k];
                        spec.geometry.wrap_in_place(&mut cand);
                        let val = eval(&cand, fval);
                        if sign * val > sign * best {
                            best = val;
                            center = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    for s in step.iter_mut() {
                        *s *= 0.5;
                    }
                }
                if step[0] < 1e-10 {
                    break;
                }
            }
            best
        };
        let lo = refine(best_min, -1.0, &mut fval);
        let hi = refine(best_max, 1.0, &mut fval);
        m.push(lo);
        big_m.push(hi);
        degenerate.push(hi - lo < 1e-9);
    }
    Ok(DomainBox { directions: directions.to_vec(), m, big_m, degenerate })
}

/// Coordinate directions `+e_k` (the default direction set for d-dim boxes).
pub fn axis_directions(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|k| {
            let mut v = vec![0.0; d];
            v[k] = 1.0;
            v
        })
        .collect()
}

/// Result of a (truncated) Legendre maximization.
#[derive(Debug, Clone)]
pub struct AdjointResult {
    /// `L` or `L^b`; `+inf` when `alpha` leaves the domain box.
    pub value: f64,
    pub beta_star: Vec<f64>,
    /// The truncation ball constraint `|beta| = b` is active.
    pub on_boundary: bool,
}

/// Legendre-transform evaluator bound to one tabulated Hamiltonian surface.
#[derive(Clone)]
pub struct RateFunction {
    pub surface: Arc<HamiltonianSurface>,
    pub trunc_b: f64,
    pub solver_tol: f64,
    resolver: Option<Arc<SpectralResolver>>,
    domain: Option<Arc<DomainBox>>,
}

impl RateFunction {
    /// Rate function over a synthetic or imported surface
    /// (default solver tolerance 1e-8).
    pub fn new(surface: HamiltonianSurface, trunc_b: f64) -> Self {
        Self {
            surface: Arc::new(surface),
            trunc_b,
            solver_tol: 1e-8,
            resolver: None,
            domain: None,
        }
    }

    /// Rate function over a spectrally tabulated surface (solver tolerance
    /// 1e-5, matched to eigensolver + interpolation accuracy).
    pub fn spectral(surface: HamiltonianSurface, trunc_b: f64) -> Self {
        Self {
            surface: Arc::new(surface),
            trunc_b,
            solver_tol: 1e-5,
            resolver: None,
            domain: None,
        }
    }

    /// Attach an exact re-solver used to polish maximizers.
    pub fn with_resolver(mut self, resolver: SpectralResolver) -> Self {
        self.resolver = Some(Arc::new(resolver));
        self
    }

    /// Attach the domain box governing the `+inf` region of the untruncated
    /// transform.
    pub fn with_domain(mut self, domain: DomainBox) -> Self {
        self.domain = Some(Arc::new(domain));
        self
    }

    pub fn domain(&self) -> Option<&DomainBox> {
        self.domain.as_deref()
    }

    fn dim(&self) -> usize {
        self.surface.dim()
    }

    fn h_value(&self, beta: &[f64]) -> f64 {
        if self.dim() == 1 {
            self.surface.hermite_value(beta[0])
        } else {
            self.surface.value(beta)
        }
    }

    fn h_grad(&self, beta: &[f64]) -> Vec<f64> {
        if self.dim() == 1 {
            vec![self.surface.hermite_deriv(beta[0])]
        } else {
            self.surface.gradient(beta)
        }
    }

    /// `L^b(alpha)` with `b = min(trunc_b, self.trunc_b)`; pass
    /// `f64::INFINITY` for the untruncated transform.
    pub fn legendre(&self, alpha: &[f64], b: f64) -> Result<AdjointResult> {
        legendre(self, alpha, b)
    }

    /// Evaluate `L` at the rate function's own truncation level.
    pub fn l(&self, alpha: &[f64]) -> Result<f64> {
        Ok(self.legendre(alpha, self.trunc_b)?.value)
    }

    /// `L - L^b`, nonnegative and nonincreasing in `b`.
    pub fn truncation_gap(&self, alpha: &[f64], b: f64) -> Result<f64> {
        let full = self.legendre(alpha, f64::INFINITY)?.value;
        let trunc = self.legendre(alpha, b)?.value;
        if full.is_infinite() {
            return Ok(f64::INFINITY);
        }
        Ok((full - trunc).max(0.0))
    }

    /// The zero-rate drift `grad_beta H(0)`: the unique velocity with
    /// `L = 0` when `H` is differentiable at 0. Verifies `L(alpha_hat)`
    /// against the solver tolerance.
    pub fn averaged_drift(&self) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.dim()];
        if !self.surface.contains(&zero) {
            return Err(Error::InvalidArgument("surface does not cover beta = 0".into()));
        }
        let drift = self.h_grad(&zero);
        let check = self.legendre(&drift, self.trunc_b.min(self.surface.covered_radius()))?;
        if check.value > 50.0 * self.solver_tol {
            return Err(Error::Numerical(format!(
                "L(averaged drift) = {} exceeds tolerance {}",
                check.value,
                50.0 * self.solver_tol
            )));
        }
        Ok(drift)
    }

    /// Write an L-curve as CSV: `alpha_1..,L,L_trunc,beta_star_1..,on_boundary`.
    pub fn write_curve_csv<W: Write>(
        &self,
        alphas: &[Vec<f64>],
        b: f64,
        mut w: W,
    ) -> Result<()> {
        let d = self.dim();
        for k in 1..=d {
            write!(w, "alpha_{k},")?;
        }
        write!(w, "L,L_trunc,")?;
        for k in 1..=d {
            write!(w, "beta_star_{k},")?;
        }
        writeln!(w, "on_boundary")?;
        for alpha in alphas {
            let full = self.legendre(alpha, f64::INFINITY)?;
            let trunc = self.legendre(alpha, b)?;
            for a in alpha {
                write!(w, "{a},")?;
            }
            write!(w, "{},{},", full.value, trunc.value)?;
            for bs in &trunc.beta_star {
                write!(w, "{bs},")?;
            }
            writeln!(w, "{}", trunc.on_boundary)?;
        }
        Ok(())
    }
}

/// Maximize `alpha . beta - H(beta)` over the ball `|beta| <= b` intersected
/// with the surface box.
///
/// The maximizer search is seeded at the best grid node (minimum-norm among
/// ties, which selects the deterministic representative when `H` is affine),
/// then refined by concave ascent on the interpolated surface and optionally
/// polished by exact re-solves. With `b = inf`, `alpha` outside the domain
/// box yields the distinguished value `+inf`.
pub fn legendre(rate: &RateFunction, alpha: &[f64], b: f64) -> Result<AdjointResult> {
    let d = rate.dim();
    if alpha.len() != d {
        return Err(Error::InvalidArgument("alpha dimension mismatch".into()));
    }
    let surface = &rate.surface;
    let radius = surface.covered_radius();
    if b.is_finite() && b > radius + 1e-9 && rate.resolver.is_none() {
        return Err(Error::InvalidArgument(format!(
            "surface covers |beta| <= {radius} but truncation b = {b} was requested"
        )));
    }

    if b.is_infinite() {
        if let Some(domain) = &rate.domain {
            if !domain.strictly_inside(alpha) {
                return Ok(AdjointResult {
                    value: f64::INFINITY,
                    beta_star: vec![0.0; d],
                    on_boundary: false,
                });
            }
        }
    }
    let b_eff = b.min(radius);

    // grid seed: best node inside the ball, minimum-norm among near-ties
    let mut best_val = f64::NEG_INFINITY;
    let mut candidates: Vec<(f64, Vec<f64>)> = Vec::new();
    for flat in 0..surface.node_count() {
        let beta = surface.node(flat);
        let norm: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > b_eff + 1e-12 {
            continue;
        }
        let g = dot(alpha, &beta) - surface.values[flat];
        if g > best_val + 1e-12 {
            best_val = g;
            candidates.clear();
            candidates.push((norm, beta));
        } else if (g - best_val).abs() <= 1e-12 {
            candidates.push((norm, beta));
        }
    }
    let seed = candidates
        .into_iter()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, beta)| beta)
        .ok_or_else(|| Error::InvalidArgument("no surface node inside the beta ball".into()))?;

    let mut beta = seed;
    if d == 1 {
        beta = vec![refine_1d(rate, alpha[0], b_eff, beta[0])?];
    } else {
        ascend_nd(rate, alpha, b_eff, &mut beta);
    }

    // exact polish at the optimizer's final point
    let value = if let Some(resolver) = &rate.resolver {
        polish_exact(resolver, alpha, b_eff, &mut beta)?
    } else {
        dot(alpha, &beta) - rate.h_value(&beta)
    };

    // untruncated transform without a domain box: an active surface-edge
    // constraint with outward ascent means the true supremum is +inf
    let norm: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if b.is_infinite() && rate.domain.is_none() && norm >= b_eff - BOUNDARY_EPS {
        let grad = rate.h_grad(&beta);
        let outward: f64 =
            beta.iter().zip(alpha.iter().zip(&grad)).map(|(bi, (a, g))| bi * (a - g)).sum();
        if outward > rate.solver_tol * norm.max(1.0) {
            return Ok(AdjointResult {
                value: f64::INFINITY,
                beta_star: vec![0.0; d],
                on_boundary: false,
            });
        }
    }

    Ok(AdjointResult {
        value: value.max(0.0),
        beta_star: beta.clone(),
        on_boundary: b.is_finite() && norm >= b - BOUNDARY_EPS * b.max(1.0),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-d refinement: bisection on the concave objective's derivative
/// `alpha - H'(beta)` over the Hermite interpolant.
fn refine_1d(rate: &RateFunction, alpha: f64, b_eff: f64, seed: f64) -> Result<f64> {
    let axis = &rate.surface.axes[0];
    let lo_box = axis.min.max(-b_eff);
    let hi_box = axis.max.min(b_eff);
    let slope = |b: f64| alpha - rate.surface.hermite_deriv(b);

    let (s_lo, s_hi) = (slope(lo_box), slope(hi_box));
    let mut beta = if s_lo <= 0.0 {
        lo_box
    } else if s_hi >= 0.0 {
        hi_box
    } else {
        // sign change: bisect
        let (mut lo, mut hi) = (lo_box, hi_box);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 * b_eff.max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    // degenerate (affine) stretches: keep the minimum-norm maximizer
    let g_at = |b: f64| alpha * b - rate.surface.hermite_value(b);
    let v = g_at(beta);
    if (g_at(seed) - v).abs() <= 1e-12 * v.abs().max(1.0) && seed.abs() < beta.abs() {
        beta = seed;
    }
    if v.abs() <= 1e-12 && g_at(0.0).abs() <= 1e-12 && lo_box <= 0.0 && 0.0 <= hi_box {
        beta = 0.0;
    }
    Ok(beta)
}

/// Projected gradient ascent with backtracking on the interpolated surface.
fn ascend_nd(rate: &RateFunction, alpha: &[f64], b_eff: f64, beta: &mut Vec<f64>) {
    let surface = &rate.surface;
    let project = |b: &mut Vec<f64>| {
        for (v, a) in b.iter_mut().zip(&surface.axes) {
            *v = v.clamp(a.min, a.max);
        }
        let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > b_eff {
            for v in b.iter_mut() {
                *v *= b_eff / norm;
            }
        }
    };
    let g_val = |b: &[f64]| dot(alpha, b) - rate.h_value(b);
    let mut value = g_val(beta);
    let mut step = 0.5 * surface.axes[0].spacing();
    for _ in 0..400 {
        let grad: Vec<f64> =
            alpha.iter().zip(rate.h_grad(beta)).map(|(a, g)| a - g).collect();
        let gnorm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm < rate.solver_tol {
            break;
        }
        let mut improved = false;
        let mut eta = step;
        for _ in 0..30 {
            let mut cand: Vec<f64> =
                beta.iter().zip(&grad).map(|(b, g)| b + eta * g).collect();
            project(&mut cand);
            let cv = g_val(&cand);
            if cv > value + 1e-15 {
                *beta = cand;
                value = cv;
                improved = true;
                break;
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
        step = (step * 1.5).min(surface.axes[0].spacing());
    }
}

/// Newton-polish the maximizer with exact spectral `H` evaluations.
fn polish_exact(
    resolver: &SpectralResolver,
    alpha: &[f64],
    b_eff: f64,
    beta: &mut Vec<f64>,
) -> Result<f64> {
    let d = beta.len();
    let mut h_val;
    let mut grad;
    (h_val, grad) = resolver.eval(beta)?;
    for _ in 0..12 {
        let slope: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - g).collect();
        let snorm: f64 = slope.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let at_boundary = norm >= b_eff - BOUNDARY_EPS;
        if snorm < 1e-9 || (at_boundary && dot(&slope, beta) > 0.0) {
            break;
        }
        // secant curvature estimate along the ascent direction
        let h_fd = 1e-4;
        let probe: Vec<f64> =
            beta.iter().zip(&slope).map(|(b, s)| b + h_fd * s / snorm.max(1e-300)).collect();
        let (_, gp) = resolver.eval(&probe)?;
        let curv: f64 = (0..d)
            .map(|k| (gp[k] - grad[k]) * slope[k] / snorm.max(1e-300))
            .sum::<f64>()
            / h_fd;
        let step = if curv > 1e-12 { (snorm / curv).min(0.5) } else { 0.1 };
        let mut cand: Vec<f64> =
            beta.iter().zip(&slope).map(|(b, s)| b + step * s / snorm.max(1e-300)).collect();
        let cnorm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if cnorm > b_eff {
            for v in cand.iter_mut() {
                *v *= b_eff / cnorm;
            }
        }
        let (hv, gv) = resolver.eval(&cand)?;
        if dot(alpha, &cand) - hv >= dot(alpha, beta) - h_val {
            *beta = cand;
            h_val = hv;
            grad = gv;
        } else {
            break;
        }
    }
    Ok(dot(alpha, beta) - h_val)
}

/// Strict-interior check of the zero-rate drift: for every nondegenerate
/// direction `v`, verify `m_v < v . grad H(0) < M_v` and report the margins.
#[derive(Debug, Clone, serde::Serialize)]
pub struct InteriorSlopeReport {
    pub checks: Vec<DirectionCheck>,
    pub skipped: Vec<SkippedDirection>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DirectionCheck {
    pub direction: Vec<f64>,
    pub m: f64,
    pub big_m: f64,
    pub slope: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SkippedDirection {
    pub direction: Vec<f64>,
    pub note: String,
}

pub fn interior_slope_check(rate: &RateFunction, domain: &DomainBox) -> Result<InteriorSlopeReport> {
    let zero = vec![0.0; rate.dim()];
    let slope_vec = rate.h_grad(&zero);
    let mut checks = Vec::new();
    let mut skipped = Vec::new();
    for (k, v) in domain.directions.iter().enumerate() {
        if domain.degenerate[k] {
            skipped.push(SkippedDirection {
                direction: v.clone(),
                note: "direction degenerate: card{f(x,.)} = 1, check skipped".into(),
            });
            continue;
        }
        let slope = dot(v, &slope_vec);
        let lower_margin = slope - domain.m[k];
        let upper_margin = domain.big_m[k] - slope;
        checks.push(DirectionCheck {
            direction: v.clone(),
            m: domain.m[k],
            big_m: domain.big_m[k],
            slope,
            lower_margin,
            upper_margin,
            pass: lower_margin > 0.0 && upper_margin > 0.0,
        });
    }
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(InteriorSlopeReport { checks, skipped, all_pass })
}
