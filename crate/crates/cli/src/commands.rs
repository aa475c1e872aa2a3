//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use serde_json::json;

use sfldp_core::action::{action_of_pair, action_of_path, discretize, Path};
use sfldp_core::hamiltonian::{build_surface, h_spectral};
use sfldp_core::ldp::{trend_check, tube_entry, LdpEstimate, TubeEntry};
use sfldp_core::minpath::{minimize_action, MinActionProblem};
use sfldp_core::model::SystemSpec;
use sfldp_core::rate::{axis_directions, domain_box, RateFunction, SpectralResolver};
use sfldp_core::twoscale::{simulate_coupled_replica, verify_lemma5, SimConfig, TwoScaleSchedule};

use crate::config::{
    ActionSection, HamSection, LdpSection, Lemma5Section, MinpathSection, RateBuild, RateSection,
    SimulateSection,
};
use crate::CliError;

fn compute(e: sfldp_core::Error) -> CliError {
    CliError::Compute(e)
}

/// Serialize a possibly infinite float for JSON output.
fn json_float(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn write_json(path: &FsPath, value: &serde_json::Value) -> Result<(), CliError> {
    let mut body =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    body.push('\n');
    std::fs::write(path, body).map_err(CliError::Io)?;
    Ok(())
}

/// Build the rate function declared by a [`RateBuild`] recipe: tabulated
/// surface at `x' = x`, domain box over the coordinate directions, optional
/// exact-polish resolver.
pub fn build_rate(spec: &SystemSpec, recipe: &RateBuild) -> Result<RateFunction, CliError> {
    let surface = build_surface(
        spec,
        &recipe.x,
        &recipe.x,
        &recipe.beta_min,
        &recipe.beta_max,
        recipe.n_per_axis,
        recipe.grid_n,
    )
    .map_err(compute)?;
    let domain = domain_box(
        spec,
        &recipe.x,
        &axis_directions(spec.dim_slow),
        recipe.domain_grid_n,
    )
    .map_err(compute)?;
    let mut rate = RateFunction::spectral(surface, recipe.trunc_b).with_domain(domain);
    if recipe.polish {
        rate = rate.with_resolver(SpectralResolver::new(
            spec.clone(),
            recipe.x.clone(),
            recipe.x.clone(),
            recipe.grid_n,
        ));
    }
    Ok(rate)
}

pub fn run_ham(
    spec: &SystemSpec,
    section: &HamSection,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let x_prime = section.x_prime.clone().unwrap_or_else(|| section.x.clone());
    let surface = build_surface(
        spec,
        &x_prime,
        &section.x,
        &section.beta_min,
        &section.beta_max,
        section.n_per_axis,
        section.grid_n,
    )
    .map_err(compute)?;
    surface.save(&out_dir.join("ham.csv")).map_err(compute)?;
    Ok(vec!["ham.csv".into(), "ham.meta.json".into()])
}

pub fn run_rate(
    spec: &SystemSpec,
    section: &RateSection,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let rate = build_rate(spec, &section.build)?;
    if section.n_alpha < 2 {
        return Err(CliError::Config("rate.n_alpha must be >= 2".into()));
    }
    let d = spec.dim_slow;
    if section.alpha_min.len() != d || section.alpha_max.len() != d {
        return Err(CliError::Config("rate alpha bounds must have dim_slow entries".into()));
    }
    let alphas: Vec<Vec<f64>> = (0..section.n_alpha)
        .map(|i| {
            let w = i as f64 / (section.n_alpha - 1) as f64;
            (0..d)
                .map(|k| section.alpha_min[k] + w * (section.alpha_max[k] - section.alpha_min[k]))
                .collect()
        })
        .collect();
    let file = File::create(out_dir.join("rate.csv")).map_err(CliError::Io)?;
    rate.write_curve_csv(&alphas, section.build.trunc_b, BufWriter::new(file))
        .map_err(compute)?;
    Ok(vec!["rate.csv".into()])
}

pub fn run_action(
    spec: &SystemSpec,
    section: &ActionSection,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let file = File::open(&section.path_file).map_err(CliError::Io)?;
    let path = Path::read_csv(BufReader::new(file)).map_err(compute)?;
    if path.dim != spec.dim_slow {
        return Err(CliError::Config(format!(
            "path file has dimension {}, system has {}",
            path.dim, spec.dim_slow
        )));
    }
    let rate = build_rate(spec, &section.build)?;
    let plain = action_of_path(&path, &rate).map_err(compute)?;
    let mut report = json!({
        "value": json_float(plain.value),
        "per_segment": plain.per_segment.iter().map(|v| json_float(*v)).collect::<Vec<_>>(),
        "offset_a": section.offset_a,
    });
    if let Some(m) = section.m {
        let (step, lin) = discretize(&path, m, section.offset_a).map_err(compute)?;
        let pair = action_of_pair(&step, &lin, &rate).map_err(compute)?;
        report["m"] = json!(m);
        report["discretized_value"] = json_float(pair.value);
        report["discretized_per_segment"] =
            json!(pair.per_segment.iter().map(|v| json_float(*v)).collect::<Vec<_>>());
    }
    write_json(&out_dir.join("action.json"), &report)?;
    Ok(vec!["action.json".into()])
}

pub fn run_simulate(
    spec: &SystemSpec,
    section: &SimulateSection,
    seed: u64,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let cfg = SimConfig {
        epsilon: section.epsilon,
        t_end: section.t_end,
        dt_fast: section.dt_fast,
        seed,
        replicas: section.replicas,
        store_every: section.store_every,
    };
    cfg.validate().map_err(compute)?;
    let file = File::create(out_dir.join("simulate.csv")).map_err(CliError::Io)?;
    let mut w = BufWriter::new(file);
    write!(w, "replica,t").map_err(CliError::Io)?;
    for k in 1..=spec.dim_slow {
        write!(w, ",x_{k}").map_err(CliError::Io)?;
    }
    for k in 1..=spec.dim_fast() {
        write!(w, ",y_{k}").map_err(CliError::Io)?;
    }
    writeln!(w).map_err(CliError::Io)?;
    for r in 0..section.replicas {
        let traj = simulate_coupled_replica(spec, &section.x0, &section.y0, &cfg, r as u64)
            .map_err(compute)?;
        for i in 0..traj.len() {
            write!(w, "{r},{}", traj.times[i]).map_err(CliError::Io)?;
            for v in traj.slow_at(i) {
                write!(w, ",{v}").map_err(CliError::Io)?;
            }
            for v in traj.fast_at(i) {
                write!(w, ",{v}").map_err(CliError::Io)?;
            }
            writeln!(w).map_err(CliError::Io)?;
        }
    }
    w.flush().map_err(CliError::Io)?;
    Ok(vec!["simulate.csv".into()])
}

pub fn run_lemma5(
    spec: &SystemSpec,
    section: &Lemma5Section,
    seed: u64,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let x_prime = section.x_prime.clone().unwrap_or_else(|| section.x.clone());
    let h_ref = h_spectral(spec, &x_prime, &section.x, &section.beta, section.grid_n)
        .map_err(compute)?
        .eigenvalue;
    let t_eps = section.t_eps.unwrap_or_else(|| {
        TwoScaleSchedule::for_epsilon(section.epsilon, section.delta, section.nu, section.t_eps_c)
            .t_eps
    });
    let schedule = TwoScaleSchedule { delta: section.delta, t_eps, nu: section.nu };
    let cfg = SimConfig {
        epsilon: section.epsilon,
        t_end: section.delta,
        dt_fast: section.dt_fast,
        seed,
        replicas: section.replicas,
        store_every: 1,
    };
    let report =
        verify_lemma5(spec, &x_prime, &section.x, &section.beta, &cfg, &schedule, h_ref)
            .map_err(compute)?;
    let body = json!({
        "h_ref": h_ref,
        "schedule": { "delta": schedule.delta, "t_eps": schedule.t_eps, "nu": schedule.nu },
        "lambda_hat": report.lambda_hat,
        "delta_h": report.delta_h,
        "nu_hat": report.nu_hat,
        "pass": report.pass,
        "stderr": report.stderr,
        "ess": report.ess,
        "replicas": report.replicas,
        "unreliable": report.unreliable,
        "per_block": report.per_block.iter().map(|b| json!({
            "block": b.block, "h_hat": b.h_hat, "nu_hat": b.nu_hat, "ess": b.ess,
        })).collect::<Vec<_>>(),
    });
    write_json(&out_dir.join("lemma5.json"), &body)?;
    Ok(vec!["lemma5.json".into()])
}

#[derive(Serialize, Deserialize)]
struct LdpCheckpoint {
    config_hash: String,
    epsilon: f64,
    hits: usize,
    replicas: usize,
}

pub fn run_ldp(
    spec: &SystemSpec,
    section: &LdpSection,
    seed: u64,
    config_hash: &str,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let phi = match &section.path_file {
        Some(f) => {
            let file = File::open(f).map_err(CliError::Io)?;
            Path::read_csv(BufReader::new(file)).map_err(compute)?
        }
        None => {
            let slope = section.slope.clone().unwrap_or_else(|| vec![0.0; spec.dim_slow]);
            let x0 = section.x0.clone();
            let t_end = section.t_end;
            Path::from_fn(t_end, spec.dim_slow, section.path_segments, move |t| {
                x0.iter().zip(&slope).map(|(x, s)| x + s * t).collect()
            })
            .map_err(compute)?
        }
    };

    let action_ref = match section.action_ref {
        Some(v) => v,
        None => {
            let build = section.build.as_ref().ok_or_else(|| {
                CliError::Config(
                    "ldp needs either `action_ref` or a `[ldp.build]` table to compute S(phi)"
                        .into(),
                )
            })?;
            let rate = build_rate(spec, build)?;
            action_of_path(&phi, &rate).map_err(compute)?.value
        }
    };

    if section.epsilons.windows(2).any(|w| w[1] >= w[0]) || section.epsilons.is_empty() {
        return Err(CliError::Config("ldp.epsilons must be strictly decreasing".into()));
    }

    // per-epsilon checkpoints: long sweeps resume after interruption
    let mut entries: Vec<TubeEntry> = Vec::new();
    for (i, &eps) in section.epsilons.iter().enumerate() {
        let part_path = out_dir.join(format!("ldp_eps{i}.part.json"));
        let cached: Option<LdpCheckpoint> = std::fs::read_to_string(&part_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let entry = match cached {
            Some(c)
                if c.config_hash == config_hash
                    && c.epsilon == eps
                    && c.replicas == section.replicas =>
            {
                rebuild_entry(eps, c.hits, c.replicas)
            }
            _ => {
                let cfg = SimConfig {
                    epsilon: eps,
                    t_end: phi.t_end,
                    dt_fast: section.dt_fast,
                    seed,
                    replicas: section.replicas,
                    store_every: 1,
                };
                cfg.validate().map_err(compute)?;
                let entry = tube_entry(spec, &phi, section.delta, &cfg).map_err(compute)?;
                let chk = LdpCheckpoint {
                    config_hash: config_hash.to_string(),
                    epsilon: eps,
                    hits: entry.hits,
                    replicas: entry.replicas,
                };
                let body = serde_json::to_string_pretty(&chk)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                std::fs::write(&part_path, body).map_err(CliError::Io)?;
                entry
            }
        };
        entries.push(entry);
    }

    let estimate = LdpEstimate { delta: section.delta, action_ref, entries };
    let file = File::create(out_dir.join("ldp.csv")).map_err(CliError::Io)?;
    estimate.write_csv(BufWriter::new(file)).map_err(compute)?;
    let trend = trend_check(&estimate);
    let summary = json!({
        "delta": section.delta,
        "action_ref": json_float(action_ref),
        "trend": {
            "uncensored": trend.uncensored,
            "monotone_within_ci": trend.monotone_within_ci,
            "gap_at_smallest": trend.gap_at_smallest,
            "nu_hat": trend.nu_hat,
            "note": trend.note,
        },
    });
    write_json(&out_dir.join("ldp_summary.json"), &summary)?;
    Ok(vec!["ldp.csv".into(), "ldp_summary.json".into()])
}

/// Recompute the derived fields of a tube entry from checkpointed counts.
fn rebuild_entry(epsilon: f64, hits: usize, replicas: usize) -> TubeEntry {
    let p_hat = hits as f64 / replicas as f64;
    let (ci_low, ci_high) =
        sfldp_core::stats::wilson_interval(hits, replicas, sfldp_core::ldp::WILSON_Z);
    let eps2 = epsilon * epsilon;
    TubeEntry {
        epsilon,
        hits,
        replicas,
        p_hat,
        ci_low,
        ci_high,
        eps2_log_p: (hits > 0).then(|| eps2 * p_hat.ln()),
        eps2_log_ci_high: eps2 * ci_high.ln(),
        censored: hits == 0,
    }
}

pub fn run_minpath(
    spec: &SystemSpec,
    section: &MinpathSection,
    out_dir: &FsPath,
) -> Result<Vec<String>, CliError> {
    let rate = build_rate(spec, &section.build)?;
    let problem = MinActionProblem {
        x_start: section.x_start.clone(),
        x_end: section.x_end.clone(),
        t_end: section.t_end,
        m: section.m,
        max_iters: section.max_iters,
        tol: section.tol,
    };
    let result = minimize_action(&problem, &rate, None).map_err(compute)?;
    let file = File::create(out_dir.join("minpath.csv")).map_err(CliError::Io)?;
    result.path.write_csv(BufWriter::new(file)).map_err(compute)?;
    let body = json!({
        "value": result.value,
        "iterations": result.iterations,
        "grad_norm": result.grad_norm,
        "converged": result.converged,
    });
    write_json(&out_dir.join("minpath.json"), &body)?;
    Ok(vec!["minpath.csv".into(), "minpath.json".into()])
}
