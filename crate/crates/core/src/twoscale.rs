//! The coupled two-scale system and its empirical exponential estimates.
//!
//! In original time the system is
//!
//! ```text
//! dX_t = f(X_t, Y_t) dt
//! dY_t = eps^-2 B(X_t, Y_t) dt + eps^-1 C(X_t, Y_t) dW_t
//! ```
//!
//! stepped with `dt = dt_fast * eps^2`, so the rescaled fast motion is
//! resolved at step `dt_fast` regardless of `eps`. [`coupling_error`]
//! measures how far the true fast motion drifts from its frozen-`x` version
//! under shared noise, and [`verify_lemma5`] checks the block exponential
//! moment `E exp(beta eps^-2 int_0^Delta f(x', Y_s) ds)` against
//! `exp(eps^-2 Delta (H +- nu Delta))`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SystemSpec;
use crate::rng::{self, tag};
use crate::stats::{log_mean_exp, LogMeanExp};

/// Monte Carlo configuration of a coupled simulation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub epsilon: f64,
    /// Horizon in original (slow) time.
    pub t_end: f64,
    /// Step of the rescaled fast motion; original-time step is
    /// `dt_fast * epsilon^2`.
    pub dt_fast: f64,
    pub seed: u64,
    pub replicas: usize,
    /// Keep every k-th node when materializing trajectories.
    pub store_every: usize,
}

impl SimConfig {
    pub fn new(epsilon: f64, t_end: f64, dt_fast: f64, seed: u64, replicas: usize) -> Self {
        Self { epsilon, t_end, dt_fast, seed, replicas, store_every: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument("epsilon must lie in (0, 1]".into()));
        }
        if !(self.dt_fast > 0.0 && self.dt_fast <= 0.01 + 1e-15) {
            return Err(Error::InvalidArgument("dt_fast must lie in (0, 0.01]".into()));
        }
        if self.t_end <= 0.0 || self.replicas == 0 || self.store_every == 0 {
            return Err(Error::InvalidArgument(
                "t_end, replicas and store_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dt_original(&self) -> f64 {
        self.dt_fast * self.epsilon * self.epsilon
    }
}

/// One realization of the coupled system on `[0, t_end]`.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub times: Vec<f64>,
    /// Slow states, stride `dim_slow`.
    pub slow: Vec<f64>,
    /// Fast states wrapped into the torus, stride `dim_fast`.
    pub fast: Vec<f64>,
    pub dim_slow: usize,
    pub dim_fast: usize,
    pub seed: u64,
}

impl CoupledTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn slow_at(&self, i: usize) -> &[f64] {
        &self.slow[i * self.dim_slow..(i + 1) * self.dim_slow]
    }

    pub fn fast_at(&self, i: usize) -> &[f64] {
        &self.fast[i * self.dim_fast..(i + 1) * self.dim_fast]
    }

    /// CSV with columns `t,x_1..x_d,y_1..y_l`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for k in 1..=self.dim_slow {
            write!(w, ",x_{k}")?;
        }
        for k in 1..=self.dim_fast {
            write!(w, ",y_{k}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{}", self.times[i])?;
            for v in self.slow_at(i) {
                write!(w, ",{v}")?;
            }
            for v in self.fast_at(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Euler-Maruyama stepping of the coupled system in original time; every
/// step is handed to `visit(step, t, x, y, h)` with the final state last
/// (`h = 0`).
pub fn coupled_steps<R: Rng>(
    spec: &SystemSpec,
    x0: &[f64],
    y0: &[f64],
    epsilon: f64,
    t_end: f64,
    dt_original: f64,
    rng: &mut R,
    mut visit: impl FnMut(usize, f64, &[f64], &[f64], f64),
) -> Result<()> {
    let d = spec.dim_slow;
    let l = spec.dim_fast();
    let inv_e2 = 1.0 / (epsilon * epsilon);
    let inv_e = 1.0 / epsilon;
    let mut x = x0.to_vec();
    let mut y = spec.geometry.wrap(y0);
    let mut fval = vec![0.0; d];
    let mut bval = vec![0.0; l];
    let mut cval = vec![0.0; l * l];
    let mut xi = vec![0.0; l];

    let mut t = 0.0;
    let mut step = 0;
    while t < t_end - 1e-12 * t_end.max(1.0) {
        let h = dt_original.min(t_end - t);
        visit(step, t, &x, &y, h);
        spec.eval_f(&x, &y, &mut fval);
        spec.eval_b(&x, &y, &mut bval);
        spec.eval_c(&x, &y, &mut cval);
        let sh = h.sqrt();
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for k in 0..d {
            x[k] += fval[k] * h;
        }
        for i in 0..l {
            let mut inc = bval[i] * inv_e2 * h;
            for j in 0..l {
                inc += cval[i * l + j] * inv_e * sh * xi[j];
            }
            y[i] += inc;
        }
        spec.geometry.wrap_in_place(&mut y);
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationBlowup { step });
        }
        t += h;
        step += 1;
    }
    visit(step, t_end, &x, &y, 0.0);
    Ok(())
}

/// Simulate one coupled trajectory (replica 0 of the config's seed).
pub fn simulate_coupled(
    spec: &SystemSpec,
    x0: &[f64],
    y0: &[f64],
    cfg: &SimConfig,
) -> Result<CoupledTrajectory> {
    simulate_coupled_replica(spec, x0, y0, cfg, 0)
}

/// Simulate the coupled system under the replica's derived stream.
pub fn simulate_coupled_replica(
    spec: &SystemSpec,
    x0: &[f64],
    y0: &[f64],
    cfg: &SimConfig,
    replica: u64,
) -> Result<CoupledTrajectory> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[tag::TWOSCALE, replica]);
    let mut times = Vec::new();
    let mut slow = Vec::new();
    let mut fast = Vec::new();
    coupled_steps(
        spec,
        x0,
        y0,
        cfg.epsilon,
        cfg.t_end,
        cfg.dt_original(),
        &mut rng,
        |step, t, x, y, h| {
            if step % cfg.store_every == 0 || h == 0.0 {
                times.push(t);
                slow.extend_from_slice(x);
                fast.extend_from_slice(y);
            }
        },
    )?;
    Ok(CoupledTrajectory {
        times,
        slow,
        fast,
        dim_slow: spec.dim_slow,
        dim_fast: spec.dim_fast(),
        seed: cfg.seed,
    })
}

/// Mean of `sup_{t' <= t_eps} |y_{t'} - y^x_{t'}|^2` (squared torus distance,
/// rescaled time) over replicas: the true fast motion and the frozen-`x`
/// fast motion are driven by the same Gaussian increments from the same
/// start, with the slow state evolving from `x`.
pub fn coupling_error(
    spec: &SystemSpec,
    x: &[f64],
    y0: &[f64],
    cfg: &SimConfig,
    t_eps: f64,
) -> Result<f64> {
    cfg.validate()?;
    if t_eps * cfg.epsilon * cfg.epsilon > cfg.t_end + 1e-12 {
        return Err(Error::InvalidArgument(
            "t_eps * epsilon^2 exceeds the simulation horizon".into(),
        ));
    }
    let d = spec.dim_slow;
    let l = spec.dim_fast();
    let steps = (t_eps / cfg.dt_fast).ceil() as usize;

    let sups: Vec<Result<f64>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, &[tag::COUPLING, r as u64]);
            let mut xs = x.to_vec();
            let mut y_true = spec.geometry.wrap(y0);
            let mut y_frozen = y_true.clone();
            let mut fval = vec![0.0; d];
            let mut bval = vec![0.0; l];
            let mut cval = vec![0.0; l * l];
            let mut bfr = vec![0.0; l];
            let mut cfr = vec![0.0; l * l];
            let mut xi = vec![0.0; l];
            let mut sup = 0.0f64;
            let mut t = 0.0;
            for step in 0..steps {
                let h = cfg.dt_fast.min(t_eps - t);
                if h <= 0.0 {
                    break;
                }
                let sh = h.sqrt();
                for v in xi.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                spec.eval_b(&xs, &y_true, &mut bval);
                spec.eval_c(&xs, &y_true, &mut cval);
                spec.eval_b(x, &y_frozen, &mut bfr);
                spec.eval_c(x, &y_frozen, &mut cfr);
                spec.eval_f(&xs, &y_true, &mut fval);
                for i in 0..l {
                    let mut inc_t = bval[i] * h;
                    let mut inc_f = bfr[i] * h;
                    for j in 0..l {
                        inc_t += cval[i * l + j] * sh * xi[j];
                        inc_f += cfr[i * l + j] * sh * xi[j];
                    }
                    y_true[i] += inc_t;
                    y_frozen[i] += inc_f;
                }
                spec.geometry.wrap_in_place(&mut y_true);
                spec.geometry.wrap_in_place(&mut y_frozen);
                // slow motion advances eps^2-slowly in rescaled time
                for k in 0..d {
                    xs[k] += fval[k] * cfg.epsilon * cfg.epsilon * h;
                }
                if y_true.iter().chain(y_frozen.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::SimulationBlowup { step });
                }
                sup = sup.max(spec.geometry.distance_sq(&y_true, &y_frozen));
                t += h;
            }
            Ok(sup)
        })
        .collect();

    let mut total = 0.0;
    for s in sups {
        total += s?;
    }
    Ok(total / cfg.replicas as f64)
}

/// Two-scale block schedule: slow blocks of length `delta` and fast blocks of
/// rescaled length `t_eps`, with target accuracy `nu`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TwoScaleSchedule {
    pub delta: f64,
    pub t_eps: f64,
    pub nu: f64,
}

impl TwoScaleSchedule {
    /// Default fast-block growth `t(eps) = c sqrt(log(1/eps))`, which tends
    /// to infinity while staying `o(log(1/eps))`.
    pub fn for_epsilon(epsilon: f64, delta: f64, nu: f64, c: f64) -> Self {
        let t_eps = c * (1.0 / epsilon).ln().max(0.0).sqrt();
        Self { delta, t_eps, nu }
    }

    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if self.delta <= 0.0 || self.t_eps <= 0.0 || self.nu <= 0.0 {
            return Err(Error::InvalidArgument("schedule entries must be positive".into()));
        }
        if self.t_eps * epsilon * epsilon > self.delta + 1e-12 {
            return Err(Error::InvalidArgument(
                "fast block t_eps * eps^2 exceeds the slow block delta".into(),
            ));
        }
        let cap = 0.9; // keep t_eps well below log(1/eps)
        let log_inv = (1.0 / epsilon).ln();
        if log_inv > 0.0 && self.t_eps > cap * log_inv.max(1.0) * 10.0 {
            return Err(Error::InvalidArgument(
                "t_eps grows too fast relative to log(1/eps)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-fast-block deviation of the estimated growth rate from `H`.
#[derive(Debug, Clone, Serialize)]
pub struct BlockEstimate {
    pub block: usize,
    pub h_hat: f64,
    pub nu_hat: f64,
    pub ess: f64,
}

/// Outcome of the block exponential-moment verification.
#[derive(Debug, Clone, Serialize)]
pub struct Lemma5Report {
    /// `eps^2 log E exp(beta eps^-2 int_0^Delta f(x', Y_s) ds)`.
    pub lambda_hat: f64,
    /// Reference `Delta * H`.
    pub delta_h: f64,
    /// Achieved accuracy `|lambda_hat - Delta H| / Delta`.
    pub nu_hat: f64,
    /// `|lambda_hat - Delta H| <= nu * Delta` at the schedule's `nu`.
    pub pass: bool,
    pub stderr: f64,
    pub ess: f64,
    pub replicas: usize,
    /// Effective sample size below 10: rare-event weight collapse.
    pub unreliable: bool,
    /// Fast-block estimates over blocks of rescaled length `t_eps`.
    pub per_block: Vec<BlockEstimate>,
}

/// Estimate the block exponential moment of the slow increment against the
/// reference Hamiltonian `h_ref` over the slow block `[0, Delta]`,
/// conditioning at the block start (the Markov restart makes other block
/// starts equivalent in law).
pub fn verify_lemma5(
    spec: &SystemSpec,
    x_prime: &[f64],
    x: &[f64],
    beta: &[f64],
    cfg: &SimConfig,
    schedule: &TwoScaleSchedule,
    h_ref: f64,
) -> Result<Lemma5Report> {
    cfg.validate()?;
    schedule.validate(cfg.epsilon)?;
    let eps2 = cfg.epsilon * cfg.epsilon;
    let delta = schedule.delta;
    if delta > cfg.t_end + 1e-12 {
        return Err(Error::InvalidArgument("delta exceeds the simulation horizon".into()));
    }
    let block_len = schedule.t_eps * eps2; // fast block in original time
    let n_blocks = (delta / block_len).floor() as usize;
    let d = spec.dim_slow;
    let y0 = vec![0.0; spec.dim_fast()];

    struct ReplicaIntegrals {
        total: f64,
        blocks: Vec<f64>,
    }

    let integrals: Vec<Result<ReplicaIntegrals>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, &[tag::LEMMA5, r as u64]);
            let mut fval = vec![0.0; d];
            let mut total = 0.0;
            let mut blocks = vec![0.0; n_blocks];
            coupled_steps(
                spec,
                x,
                &y0,
                cfg.epsilon,
                delta,
                cfg.dt_original(),
                &mut rng,
                |_, t, _xs, ys, h| {
                    if h > 0.0 {
                        spec.eval_f(x_prime, ys, &mut fval);
                        let v: f64 = beta.iter().zip(&fval).map(|(b, f)| b * f).sum();
                        total += v * h;
                        // assign the step's dwell [t, t+h) by its midpoint so
                        // accumulated-time jitter cannot leak across blocks
                        let b = ((t + 0.5 * h) / block_len) as usize;
                        if b < n_blocks {
                            blocks[b] += v * h;
                        }
                    }
                },
            )?;
            Ok(ReplicaIntegrals { total, blocks })
        })
        .collect();

    let mut totals = Vec::with_capacity(cfg.replicas);
    let mut block_exponents = vec![Vec::with_capacity(cfg.replicas); n_blocks];
    for r in integrals {
        let r = r?;
        totals.push(r.total / eps2);
        for (b, v) in r.blocks.iter().enumerate() {
            block_exponents[b].push(v / eps2);
        }
    }

    let LogMeanExp { value, stderr, ess } = log_mean_exp(&totals);
    let lambda_hat = eps2 * value;
    let delta_h = delta * h_ref;
    let nu_hat = (lambda_hat - delta_h).abs() / delta;

    let per_block = block_exponents
        .iter()
        .enumerate()
        .map(|(b, w)| {
            let r = log_mean_exp(w);
            // the exponent equals beta . int over the rescaled block, whose
            // length is t_eps, so the growth-rate estimate divides by t_eps
            let h_hat = r.value / schedule.t_eps;
            BlockEstimate { block: b, h_hat, nu_hat: (h_hat - h_ref).abs(), ess: r.ess }
        })
        .collect();

    Ok(Lemma5Report {
        lambda_hat,
        delta_h,
        nu_hat,
        pass: nu_hat <= schedule.nu,
        stderr: eps2 * stderr,
        ess,
        replicas: cfg.replicas,
        unreliable: ess < 10.0,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_system_slow_flow_is_deterministic() {
        let spec = builtin("constant").unwrap();
        let cfg = SimConfig::new(0.2, 1.0, 0.01, 3, 1);
        let traj = simulate_coupled(&spec, &[0.5], &[0.0], &cfg).unwrap();
        let last = traj.slow_at(traj.len() - 1)[0];
        assert_abs_diff_eq!(last, 0.5 + 0.7, epsilon = 1e-9);
    }

    #[test]
    fn slow_increments_bounded_by_sup_norm() {
        let spec = builtin("cosine-ring").unwrap();
        let cfg = SimConfig::new(0.1, 1.0, 0.01, 5, 1);
        let traj = simulate_coupled(&spec, &[0.0], &[0.0], &cfg).unwrap();
        let dt = cfg.dt_original();
        for i in 0..traj.len() - 1 {
            let inc = (traj.slow_at(i + 1)[0] - traj.slow_at(i)[0]).abs();
            let step = traj.times[i + 1] - traj.times[i];
            assert!(inc <= spec.f_sup_norm * step + 1e-12, "step {i}: inc {inc} over {step}");
        }
        let total = (traj.slow_at(traj.len() - 1)[0]).abs();
        assert!(total <= spec.f_sup_norm * cfg.t_end + 1e-9);
        let _ = dt;
    }

    #[test]
    fn determinism_bitwise_and_seed_sensitivity() {
        let spec = builtin("full-dep").unwrap();
        let cfg = SimConfig::new(0.3, 0.5, 0.01, 11, 1);
        let a = simulate_coupled(&spec, &[0.1], &[1.0], &cfg).unwrap();
        let b = simulate_coupled(&spec, &[0.1], &[1.0], &cfg).unwrap();
        assert_eq!(a.slow, b.slow);
        assert_eq!(a.fast, b.fast);
        let cfg2 = SimConfig { seed: 12, ..cfg };
        let c = simulate_coupled(&spec, &[0.1], &[1.0], &cfg2).unwrap();
        assert_ne!(a.slow, c.slow);
    }

    #[test]
    fn averaging_shrinks_slow_variance() {
        let spec = builtin("cosine-ring").unwrap();
        let endpoint_var = |eps: f64| {
            let cfg = SimConfig::new(eps, 1.0, 0.01, 21, 1);
            let replicas = 200;
            let mut xs = Vec::with_capacity(replicas);
            for r in 0..replicas as u64 {
                let t = simulate_coupled_replica(&spec, &[0.0], &[0.0], &cfg, r).unwrap();
                xs.push(t.slow_at(t.len() - 1)[0]);
            }
            let mean: f64 = xs.iter().sum::<f64>() / replicas as f64;
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / replicas as f64
        };
        let v_coarse = endpoint_var(0.3);
        let v_fine = endpoint_var(0.1);
        assert!(v_fine < v_coarse, "variance did not shrink: {v_coarse} -> {v_fine}");
    }

    #[test]
    fn coupling_error_zero_without_x_dependence() {
        let spec = builtin("cosine-ring").unwrap();
        let cfg = SimConfig::new(0.2, 1.0, 0.01, 7, 64);
        let err = coupling_error(&spec, &[0.4], &[0.3], &cfg, 3.0).unwrap();
        assert_abs_diff_eq!(err, 0.0, epsilon = 0.0);
    }

    #[test]
    fn coupling_error_decreases_toward_zero_horizon() {
        let spec = builtin("full-dep").unwrap();
        let cfg = SimConfig::new(0.2, 1.0, 0.01, 7, 128);
        let mut last = f64::INFINITY;
        for t_eps in [8.0, 4.0, 2.0, 1.0, 0.5] {
            let err = coupling_error(&spec, &[0.5], &[0.0], &cfg, t_eps).unwrap();
            assert!(err <= last + 1e-12, "error not monotone at t_eps {t_eps}");
            last = err;
        }
        assert!(last < 1e-3, "short-horizon coupling error {last}");
    }

    #[test]
    fn lemma5_constant_system_exact() {
        let spec = builtin("constant").unwrap();
        let cfg = SimConfig::new(0.2, 0.2, 0.01, 9, 200);
        let schedule = TwoScaleSchedule { delta: 0.2, t_eps: 1.0, nu: 0.05 };
        let rep = verify_lemma5(&spec, &[0.0], &[0.0], &[1.0], &cfg, &schedule, 0.7).unwrap();
        assert_abs_diff_eq!(rep.lambda_hat, 0.14, epsilon = 1e-9);
        assert!(rep.pass);
        assert!(!rep.unreliable);
        for b in &rep.per_block {
            assert_abs_diff_eq!(b.h_hat, 0.7, epsilon = 1e-9);
        }
    }

    #[test]
    fn lemma5_zero_beta_exact_zero() {
        let spec = builtin("cosine-ring").unwrap();
        let cfg = SimConfig::new(0.2, 0.2, 0.01, 9, 100);
        let schedule = TwoScaleSchedule { delta: 0.2, t_eps: 1.0, nu: 0.05 };
        let rep = verify_lemma5(&spec, &[0.0], &[0.0], &[0.0], &cfg, &schedule, 0.0).unwrap();
        assert_abs_diff_eq!(rep.lambda_hat, 0.0, epsilon = 0.0);
    }

    #[test]
    fn schedule_constructor_respects_growth_condition() {
        for eps in [0.3, 0.1, 0.05] {
            let s = TwoScaleSchedule::for_epsilon(eps, 0.2, 0.05, 1.0);
            s.validate(eps).unwrap();
        }
        let bad = TwoScaleSchedule { delta: 0.001, t_eps: 1000.0, nu: 0.05 };
        assert!(bad.validate(0.1).is_err());
    }

    #[test]
    fn parallel_and_serial_replicas_agree() {
        let spec = builtin("full-dep").unwrap();
        let cfg = SimConfig::new(0.2, 0.5, 0.01, 13, 64);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| coupling_error(&spec, &[0.5], &[0.0], &cfg, 2.0)).unwrap();
        let parallel = coupling_error(&spec, &[0.5], &[0.0], &cfg, 2.0).unwrap();
        assert_eq!(serial.to_bits(), parallel.to_bits());
    }
}
