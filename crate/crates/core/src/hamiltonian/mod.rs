//! The Hamiltonian `H(x', x, beta)` of the averaged system.
//!
//! Two routes compute it:
//!
//! * **spectral** — `H` is the principal eigenvalue of the frozen-process
//!   generator plus the multiplication potential `beta . f(x', .)`
//!   (equivalently, the log spectral radius of the time-1 Feynman-Kac
//!   operator); computed by a positivity-preserving finite-difference
//!   discretization and shifted power iteration;
//! * **Monte Carlo** — `t^-1 log E exp(beta int_0^t f(x', y^x_s) ds)` along
//!   simulated frozen paths, which converges to `H` at rate `O(1/t)`.
//!
//! The spectral route is the precise one; the Monte Carlo route exists to
//! cross-check it and to calibrate the `O(1/t)` constant empirically.

mod operator;
mod surface;

pub use operator::{
    EigenPair, FeynmanKacOperator, SolverWarning, TorusGrid, EIGEN_MAX_ITERS, EIGEN_TOL,
};
pub use surface::{surface_from_fn, BetaAxis, HamiltonianSurface};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fastsim;
use crate::model::SystemSpec;
use crate::rng::{self, tag};
use crate::stats::{log_mean_exp, LogMeanExp};

/// Default finite-difference step for [`grad_h`].
pub const GRAD_STEP: f64 = 0.05;
/// Relative eigenvalue disagreement between `grid_n` and `grid_n/2` above
/// which a [`SolverWarning::CoarseGrid`] is attached.
const REFINEMENT_WARN: f64 = 1e-3;

/// Solve for the principal eigenpair at `grid_n` without the refinement check.
fn h_spectral_raw(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    grid_n: usize,
) -> Result<EigenPair> {
    let op = FeynmanKacOperator::assemble(spec, x_prime, x, beta, grid_n)?;
    op.principal_eigenpair(EIGEN_TOL, EIGEN_MAX_ITERS)
}

/// `H(x', x, beta)` by the spectral route.
///
/// Also solves on the half grid and attaches a coarse-grid warning when the
/// two eigenvalues disagree beyond the refinement tolerance.
pub fn h_spectral(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    grid_n: usize,
) -> Result<EigenPair> {
    let mut pair = h_spectral_raw(spec, x_prime, x, beta, grid_n)?;
    if grid_n / 2 >= 16 {
        let coarse = h_spectral_raw(spec, x_prime, x, beta, grid_n / 2)?;
        let disagreement = (pair.eigenvalue - coarse.eigenvalue).abs();
        if disagreement > REFINEMENT_WARN * pair.eigenvalue.abs().max(1.0) {
            pair.warnings.push(SolverWarning::CoarseGrid { disagreement });
        }
    }
    Ok(pair)
}

/// Monte Carlo estimate of `H` via the long-time route.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Importance-sampling effective sample size of the exponential moment.
    pub ess: f64,
    /// Set when `ess < 10`: the exponential moment is dominated by a handful
    /// of replicas and the estimate is unreliable.
    pub degenerate: bool,
}

/// `t^-1 log-mean-exp` of `beta . int_0^t f(x', y^x_s) ds` over replicas of
/// the frozen fast process started at `y = 0`, with a delta-method standard
/// error. Overflow-safe by log-sum-exp.
#[allow(clippy::too_many_arguments)]
pub fn h_montecarlo(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    t: f64,
    dt: f64,
    replicas: usize,
    seed: u64,
) -> Result<McEstimate> {
    if t < 1.0 {
        return Err(Error::InvalidArgument("h_montecarlo requires t >= 1".into()));
    }
    if replicas < 100 {
        return Err(Error::InvalidArgument("h_montecarlo requires replicas >= 100".into()));
    }
    let y0 = vec![0.0; spec.dim_fast()];
    let exponents: Vec<Result<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[tag::HAMILTONIAN_MC, r as u64]);
            let mut acc = 0.0;
            let mut fval = vec![0.0; spec.dim_slow];
            fastsim::frozen_steps(spec, x, &y0, t, dt, &mut rng, |_, _, y, h| {
                if h > 0.0 {
                    spec.eval_f(x_prime, y, &mut fval);
                    let v: f64 = beta.iter().zip(&fval).map(|(b, f)| b * f).sum();
                    acc += v * h;
                }
            })?;
            Ok(acc)
        })
        .collect();
    let w: Vec<f64> = exponents.into_iter().collect::<Result<_>>()?;
    let LogMeanExp { value, stderr, ess } = log_mean_exp(&w);
    Ok(McEstimate { estimate: value / t, stderr: stderr / t, ess, degenerate: ess < 10.0 })
}

/// Gradient of `H` in `beta` by Richardson-extrapolated central differences
/// of the spectral route (`step` and `step/2`).
pub fn grad_h(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    grid_n: usize,
    step: f64,
) -> Result<Vec<f64>> {
    if !(0.0 < step && step <= 0.1) {
        return Err(Error::InvalidArgument("grad_h step must lie in (0, 0.1]".into()));
    }
    let d = beta.len();
    let mut grad = vec![0.0; d];
    for k in 0..d {
        let central = |h: f64| -> Result<f64> {
            let mut bp = beta.to_vec();
            let mut bm = beta.to_vec();
            bp[k] += h;
            bm[k] -= h;
            let vp = h_spectral_raw(spec, x_prime, x, &bp, grid_n)?.eigenvalue;
            let vm = h_spectral_raw(spec, x_prime, x, &bm, grid_n)?.eigenvalue;
            Ok((vp - vm) / (2.0 * h))
        };
        let d1 = central(step)?;
        let d2 = central(0.5 * step)?;
        grad[k] = (4.0 * d2 - d1) / 3.0;
    }
    Ok(grad)
}

/// Tabulate `h_spectral` and `grad_h` over a beta box containing 0.
///
/// Node solves run in parallel; any node failure aborts with its location.
/// The surface invariants are checked and recorded on the result.
pub fn build_surface(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta_min: &[f64],
    beta_max: &[f64],
    n_per_axis: usize,
    grid_n: usize,
) -> Result<HamiltonianSurface> {
    let d = spec.dim_slow;
    if beta_min.len() != d || beta_max.len() != d {
        return Err(Error::InvalidArgument("beta box dimension mismatch".into()));
    }
    if n_per_axis < 5 {
        return Err(Error::InvalidArgument("n_per_axis must be >= 5".into()));
    }
    for k in 0..d {
        if !(beta_min[k] <= 0.0 && 0.0 <= beta_max[k]) {
            return Err(Error::InvalidArgument("beta box must contain 0".into()));
        }
    }
    let axes: Vec<BetaAxis> = (0..d)
        .map(|k| BetaAxis { min: beta_min[k], max: beta_max[k], n: n_per_axis })
        .collect();
    let node_count: usize = axes.iter().map(|a| a.n).product();

    let mut proto = HamiltonianSurface {
        x_prime: x_prime.to_vec(),
        x: x.to_vec(),
        axes,
        values: vec![0.0; node_count],
        gradients: vec![0.0; node_count * d],
        f_sup_norm: spec.f_sup_norm,
        spec_digest: spec.digest(),
        grid_n,
        solver_tol: EIGEN_TOL,
        max_residual: 0.0,
        invariant_violations: Vec::new(),
    };

    let solved: Vec<Result<(f64, Vec<f64>, f64)>> = (0..node_count)
        .into_par_iter()
        .map(|flat| {
            let beta = proto.node(flat);
            let step = GRAD_STEP.min(0.5 * proto.axes[0].spacing()).max(1e-3);
            let pair = h_spectral_raw(spec, x_prime, x, &beta, grid_n).map_err(|e| {
                Error::SurfaceNode { node: beta.clone(), source: Box::new(e) }
            })?;
            let grad = grad_h(spec, x_prime, x, &beta, grid_n, step).map_err(|e| {
                Error::SurfaceNode { node: beta.clone(), source: Box::new(e) }
            })?;
            Ok((pair.eigenvalue, grad, pair.residual))
        })
        .collect();

    for (flat, r) in solved.into_iter().enumerate() {
        let (value, grad, residual) = r?;
        proto.values[flat] = value;
        proto.gradients[flat * d..(flat + 1) * d].copy_from_slice(&grad);
        proto.max_residual = proto.max_residual.max(residual);
    }
    proto.invariant_violations = proto.check_invariants();
    Ok(proto)
}

/// Empirical check of the `O(1/t)` agreement between the Monte Carlo and
/// spectral routes: fits the constant from the first time point and tests
/// the second against `5 C / t`.
#[derive(Debug, Clone, Copy)]
pub struct RouteAgreement {
    pub h_spectral: f64,
    pub err_t1: f64,
    pub err_t2: f64,
    pub c_est: f64,
    pub within_bound: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn route_agreement(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    t1: f64,
    t2: f64,
    dt: f64,
    replicas: usize,
    grid_n: usize,
    seed: u64,
) -> Result<RouteAgreement> {
    assert!(t1 < t2);
    let h_ref = h_spectral_raw(spec, x_prime, x, beta, grid_n)?.eigenvalue;
    let e1 = (h_montecarlo(spec, x_prime, x, beta, t1, dt, replicas, seed)?.estimate - h_ref).abs();
    let e2 = (h_montecarlo(spec, x_prime, x, beta, t2, dt, replicas, seed)?.estimate - h_ref).abs();
    let c_est = e1 * t1;
    Ok(RouteAgreement {
        h_spectral: h_ref,
        err_t1: e1,
        err_t2: e2,
        c_est,
        within_bound: e2 <= 5.0 * c_est / t2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use approx::assert_abs_diff_eq;

    /// Reference value of H(0.1) for the cosine-ring system from the classical
    /// series of the periodic characteristic value: H(beta) = beta^2
    /// - 1.75 beta^4 + O(beta^6), i.e. 0.009825 at beta = 0.1.
    const H_COSINE_01: f64 = 0.009825;

    #[test]
    fn constant_system_is_linear_in_beta() {
        let spec = builtin("constant").unwrap();
        let pair = h_spectral(&spec, &[0.0], &[0.0], &[1.0], 64).unwrap();
        assert_abs_diff_eq!(pair.eigenvalue, 0.7, epsilon = 1e-8);
        let pair = h_spectral(&spec, &[0.0], &[0.0], &[-1.3], 64).unwrap();
        assert_abs_diff_eq!(pair.eigenvalue, -0.91, epsilon = 1e-8);
    }

    #[test]
    fn zero_beta_gives_zero_hamiltonian() {
        for name in ["constant", "cosine-ring", "full-dep"] {
            let spec = builtin(name).unwrap();
            let pair = h_spectral(&spec, &[0.2], &[0.2], &[0.0], 64).unwrap();
            assert!(pair.eigenvalue.abs() < 1e-10, "{name}: H(0) = {}", pair.eigenvalue);
        }
    }

    #[test]
    fn cosine_ring_matches_series_and_dense_oracle() {
        let spec = builtin("cosine-ring").unwrap();
        let pair = h_spectral(&spec, &[0.0], &[0.0], &[0.1], 256).unwrap();
        assert!(
            (pair.eigenvalue - H_COSINE_01).abs() < 2e-4,
            "H(0.1) = {} vs series {H_COSINE_01}",
            pair.eigenvalue
        );
        // independent oracle: dense 512-point solve
        let dense = h_spectral_raw(&spec, &[0.0], &[0.0], &[0.1], 512).unwrap();
        assert_abs_diff_eq!(pair.eigenvalue, dense.eigenvalue, epsilon = 1e-6);
        assert!(pair.warnings.is_empty(), "{:?}", pair.warnings);
    }

    #[test]
    fn eigenfunction_positive_and_bounded_away_from_zero() {
        let spec = builtin("cosine-ring").unwrap();
        let mut global_min = f64::INFINITY;
        for ib in 0..8 {
            let beta = -1.0 + 2.0 * ib as f64 / 7.0;
            let pair = h_spectral_raw(&spec, &[0.0], &[0.0], &[beta], 64).unwrap();
            let min = pair.eigenfunction.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0);
            global_min = global_min.min(min);
        }
        // uniformly separated from zero over |beta| <= 1
        assert!(global_min > 1e-3, "eigenfunction min {global_min}");
    }

    #[test]
    fn montecarlo_constant_system_exact() {
        let spec = builtin("constant").unwrap();
        let est = h_montecarlo(&spec, &[0.0], &[0.0], &[1.0], 2.0, 0.01, 128, 5).unwrap();
        assert_abs_diff_eq!(est.estimate, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(est.stderr, 0.0, epsilon = 1e-12);
        assert!(!est.degenerate);
    }

    #[test]
    fn montecarlo_zero_beta_exact_zero() {
        let spec = builtin("cosine-ring").unwrap();
        let est = h_montecarlo(&spec, &[0.0], &[0.0], &[0.0], 5.0, 0.01, 100, 5).unwrap();
        assert_abs_diff_eq!(est.estimate, 0.0, epsilon = 0.0);
    }

    #[test]
    fn montecarlo_agrees_with_spectral_route() {
        // For cosine-ring the EM chain is exactly Brownian, so the only
        // errors are the O(1/t) route bias and the MC noise.
        let spec = builtin("cosine-ring").unwrap();
        let mc = h_montecarlo(&spec, &[0.0], &[0.0], &[0.1], 50.0, 0.01, 10_000, 11).unwrap();
        let sp = h_spectral_raw(&spec, &[0.0], &[0.0], &[0.1], 512).unwrap();
        let bias_budget = 0.5 / 50.0; // generous C/t with C <= 0.5 at beta = 0.1
        assert!(
            (mc.estimate - sp.eigenvalue).abs() <= 3.0 * mc.stderr + bias_budget,
            "mc {} vs spectral {} (stderr {})",
            mc.estimate,
            sp.eigenvalue,
            mc.stderr
        );
    }

    #[test]
    fn gradient_constant_system() {
        let spec = builtin("constant").unwrap();
        let g = grad_h(&spec, &[0.0], &[0.0], &[0.3], 64, 0.05).unwrap();
        assert_abs_diff_eq!(g[0], 0.7, epsilon = 1e-8);
    }

    #[test]
    fn gradient_cosine_ring_odd_symmetry_and_series() {
        let spec = builtin("cosine-ring").unwrap();
        let g0 = grad_h(&spec, &[0.0], &[0.0], &[0.0], 128, 0.05).unwrap();
        assert!(g0[0].abs() < 1e-6, "grad at 0 = {}", g0[0]);
        // dH/dbeta at 0.1 from the series: 2 b - 7 b^3 = 0.1930
        let g = grad_h(&spec, &[0.0], &[0.0], &[0.1], 256, 0.05).unwrap();
        assert!((g[0] - 0.1930).abs() < 2e-3, "grad {} vs 0.1930", g[0]);
    }

    #[test]
    fn gradient_matches_secant_slope() {
        let spec = builtin("cosine-ring").unwrap();
        let b = 0.35;
        let g = grad_h(&spec, &[0.0], &[0.0], &[b], 128, 0.02).unwrap();
        let h = 1e-3;
        let vp = h_spectral_raw(&spec, &[0.0], &[0.0], &[b + h], 128).unwrap().eigenvalue;
        let vm = h_spectral_raw(&spec, &[0.0], &[0.0], &[b - h], 128).unwrap().eigenvalue;
        let secant = (vp - vm) / (2.0 * h);
        assert!(
            (g[0] - secant).abs() <= 1e-3 * secant.abs().max(1e-3),
            "grad {} vs secant {secant}",
            g[0]
        );
    }

    #[test]
    fn surface_constant_system_linear() {
        let spec = builtin("constant").unwrap();
        let s = build_surface(&spec, &[0.0], &[0.0], &[-2.0], &[2.0], 9, 32).unwrap();
        for flat in 0..s.node_count() {
            let b = s.node(flat)[0];
            assert_abs_diff_eq!(s.values[flat], 0.7 * b, epsilon = 1e-8);
        }
        assert!(s.invariant_violations.is_empty(), "{:?}", s.invariant_violations);
    }

    #[test]
    fn surface_cosine_ring_invariants() {
        let spec = builtin("cosine-ring").unwrap();
        let s = build_surface(&spec, &[0.0], &[0.0], &[-1.0], &[1.0], 21, 64).unwrap();
        assert!(s.invariant_violations.is_empty(), "{:?}", s.invariant_violations);
        // node at beta = 0 is exactly zero
        let mid = s.node_count() / 2;
        assert_abs_diff_eq!(s.node(mid)[0], 0.0, epsilon = 1e-14);
        assert!(s.values[mid].abs() < 1e-10);
    }

    #[test]
    fn h_bound_by_sup_norm_on_random_betas() {
        let spec = builtin("full-dep").unwrap();
        for i in 0..12 {
            let beta = -1.5 + 3.0 * i as f64 / 11.0;
            let pair = h_spectral_raw(&spec, &[0.5], &[0.5], &[beta], 48).unwrap();
            assert!(
                pair.eigenvalue.abs() <= spec.f_sup_norm * beta.abs() + 1e-8,
                "H({beta}) = {}",
                pair.eigenvalue
            );
        }
    }

    #[test]
    fn midpoint_convexity_random_pairs() {
        let spec = builtin("cosine-ring").unwrap();
        let h = |b: f64| h_spectral_raw(&spec, &[0.0], &[0.0], &[b], 48).unwrap().eigenvalue;
        use rand::Rng;
        let mut rng = crate::rng::stream(3, &[77]);
        for _ in 0..25 {
            let b1: f64 = rng.gen_range(-1.0..1.0);
            let b2: f64 = rng.gen_range(-1.0..1.0);
            let mid = h(0.5 * (b1 + b2));
            assert!(mid <= 0.5 * (h(b1) + h(b2)) + 1e-8);
        }
    }

    #[test]
    fn coarse_grid_gets_flagged() {
        let spec = builtin("cosine-ring").unwrap();
        // per-assembly minimum is 16; a 32-point solve checks against 16 and
        // should disagree noticeably at beta = 1 where curvature is strong
        let pair = h_spectral(&spec, &[0.0], &[0.0], &[2.0], 32).unwrap();
        let has_warning =
            pair.warnings.iter().any(|w| matches!(w, SolverWarning::CoarseGrid { .. }));
        let dense = h_spectral_raw(&spec, &[0.0], &[0.0], &[2.0], 512).unwrap();
        let true_err = (pair.eigenvalue - dense.eigenvalue).abs();
        // the flag must fire iff the grid is genuinely coarse at this beta
        assert_eq!(has_warning, true_err > 1e-4, "warn {has_warning} err {true_err}");
    }
}
