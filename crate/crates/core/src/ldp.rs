//! Monte Carlo tube probabilities `P(rho(X^eps, phi) < delta)` over an
//! epsilon sweep, with rescaled log-probabilities `eps^2 log p_hat` compared
//! against `-S(phi)`.
//!
//! The distance is the discrete sup over the simulation grid. Only the
//! moderate-deviation regime is sampled naively; sweeps with zero hits are
//! recorded as censored entries (upper confidence bound only), never as
//! `-inf` point estimates.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::action::Path;
use crate::error::{Error, Result};
use crate::model::SystemSpec;
use crate::rng::{self, tag};
use crate::stats::wilson_interval;
use crate::twoscale::{coupled_steps, SimConfig};

/// Normal quantile of the reported Wilson intervals.
pub const WILSON_Z: f64 = 1.96;

/// One epsilon entry of a tube sweep.
#[derive(Debug, Clone, Serialize)]
pub struct TubeEntry {
    pub epsilon: f64,
    pub hits: usize,
    pub replicas: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `eps^2 log p_hat`; absent for censored entries.
    pub eps2_log_p: Option<f64>,
    /// `eps^2 log ci_high`: an upper bound valid also when censored.
    pub eps2_log_ci_high: f64,
    pub censored: bool,
}

/// Tube-probability record over a decreasing epsilon sweep.
#[derive(Debug, Clone, Serialize)]
pub struct LdpEstimate {
    pub delta: f64,
    /// Reference action `S(phi)` of the tube center.
    pub action_ref: f64,
    pub entries: Vec<TubeEntry>,
}

impl LdpEstimate {
    /// CSV with columns `epsilon,p_hat,ci_low,ci_high,eps2_log_p,censored`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epsilon,p_hat,ci_low,ci_high,eps2_log_p,censored")?;
        for e in &self.entries {
            let lp = e.eps2_log_p.map(|v| v.to_string()).unwrap_or_else(|| "censored".into());
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epsilon, e.p_hat, e.ci_low, e.ci_high, lp, e.censored
            )?;
        }
        Ok(())
    }
}

/// Estimate one tube probability at fixed epsilon (`cfg.epsilon`). Replica
/// streams are keyed by the epsilon bits, so entries are independent of
/// sweep order and can be resumed or recomputed individually.
pub fn tube_entry(
    spec: &SystemSpec,
    phi: &Path,
    delta: f64,
    cfg: &SimConfig,
) -> Result<TubeEntry> {
    let d = spec.dim_slow;
    let y0 = vec![0.0; spec.dim_fast()];
    let x0 = phi.node(0).to_vec();

    let hits: Vec<Result<bool>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, &[tag::LDP, cfg.epsilon.to_bits(), r as u64]);
            let mut inside = true;
            coupled_steps(
                spec,
                &x0,
                &y0,
                cfg.epsilon,
                cfg.t_end,
                cfg.dt_original(),
                &mut rng,
                |_, t, x, _, _| {
                    if inside {
                        let center = phi.value_at(t);
                        let dist: f64 = (0..d)
                            .map(|k| (x[k] - center[k]) * (x[k] - center[k]))
                            .sum::<f64>()
                            .sqrt();
                        if dist >= delta {
                            inside = false;
                        }
                    }
                },
            )?;
            Ok(inside)
        })
        .collect();

    let mut count = 0usize;
    for h in hits {
        if h? {
            count += 1;
        }
    }
    let n = cfg.replicas;
    let p_hat = count as f64 / n as f64;
    let (ci_low, ci_high) = wilson_interval(count, n, WILSON_Z);
    let eps2 = cfg.epsilon * cfg.epsilon;
    Ok(TubeEntry {
        epsilon: cfg.epsilon,
        hits: count,
        replicas: n,
        p_hat,
        ci_low,
        ci_high,
        eps2_log_p: (count > 0).then(|| eps2 * p_hat.ln()),
        eps2_log_ci_high: eps2 * ci_high.ln(),
        censored: count == 0,
    })
}

/// Monte Carlo tube probabilities along a decreasing epsilon sweep.
///
/// `action_ref` is the caller-computed `S(phi)` (possibly `+inf`); each
/// epsilon runs `cfg.replicas` coupled trajectories started at `phi(0)`.
pub fn tube_probability(
    spec: &SystemSpec,
    phi: &Path,
    delta: f64,
    epsilons: &[f64],
    cfg: &SimConfig,
    action_ref: f64,
) -> Result<LdpEstimate> {
    if delta <= 0.0 {
        return Err(Error::InvalidArgument("tube radius delta must be positive".into()));
    }
    if epsilons.is_empty() || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("epsilons must be strictly decreasing".into()));
    }
    if cfg.replicas < 1000 {
        return Err(Error::InvalidArgument("tube sweeps need replicas >= 1000".into()));
    }
    let mut entries = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg_eps = SimConfig { epsilon: eps, t_end: phi.t_end, ..*cfg };
        cfg_eps.validate()?;
        entries.push(tube_entry(spec, phi, delta, &cfg_eps)?);
    }
    Ok(LdpEstimate { delta, action_ref, entries })
}

/// Trend diagnostics of a tube sweep against `-S(phi)`.
#[derive(Debug, Clone, Serialize)]
pub struct TrendReport {
    pub uncensored: usize,
    /// `eps^2 log p_hat` nondecreasing as epsilon decreases, within
    /// overlapping Wilson intervals.
    pub monotone_within_ci: bool,
    /// `|eps^2 log p_hat - (-S)|` at the smallest uncensored epsilon.
    pub gap_at_smallest: Option<f64>,
    /// Achieved lower-bound slack: `max(0, -S - eps^2 log p_hat)` at the
    /// smallest uncensored epsilon.
    pub nu_hat: Option<f64>,
    pub note: Option<String>,
}

/// Check the lower-bound trend of a sweep: requires at least 3 uncensored
/// entries for a fitted gap; otherwise reports the reason.
pub fn trend_check(est: &LdpEstimate) -> TrendReport {
    let eps2 = |e: &TubeEntry| e.epsilon * e.epsilon;
    let uncensored: Vec<&TubeEntry> = est.entries.iter().filter(|e| !e.censored).collect();
    if uncensored.is_empty() {
        return TrendReport {
            uncensored: 0,
            monotone_within_ci: false,
            gap_at_smallest: None,
            nu_hat: None,
            note: Some("no uncensored data".into()),
        };
    }
    if uncensored.len() < 3 {
        return TrendReport {
            uncensored: uncensored.len(),
            monotone_within_ci: false,
            gap_at_smallest: None,
            nu_hat: None,
            note: Some(format!(
                "only {} uncensored entries; need >= 3 for a fitted trend",
                uncensored.len()
            )),
        };
    }

    let mut monotone = true;
    for w in uncensored.windows(2) {
        let (coarse, fine) = (w[0], w[1]);
        let v_coarse = eps2(coarse) * coarse.p_hat.ln();
        let v_fine = eps2(fine) * fine.p_hat.ln();
        if v_fine >= v_coarse {
            continue;
        }
        // allow the decrease when the transformed confidence intervals overlap
        let coarse_iv =
            (eps2(coarse) * coarse.ci_low.max(1e-300).ln(), eps2(coarse) * coarse.ci_high.ln());
        let fine_iv =
            (eps2(fine) * fine.ci_low.max(1e-300).ln(), eps2(fine) * fine.ci_high.ln());
        if fine_iv.1 < coarse_iv.0 || coarse_iv.1 < fine_iv.0 {
            monotone = false;
        }
    }

    let last = uncensored.last().unwrap();
    let v_last = eps2(last) * last.p_hat.ln();
    let target = -est.action_ref;
    TrendReport {
        uncensored: uncensored.len(),
        monotone_within_ci: monotone,
        gap_at_smallest: Some((v_last - target).abs()),
        nu_hat: Some((target - v_last).max(0.0)),
        note: None,
    }
}
