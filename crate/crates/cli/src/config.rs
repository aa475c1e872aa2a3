//! Config file schema and override handling.
//!
//! A run config is a TOML file with a required `[system]` table plus one
//! table per subcommand; see `configs/` in the repository root for worked
//! examples and the README for the field-by-field schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfldp_core::model::SystemConfig;

use crate::CliError;

fn inf() -> f64 {
    f64::INFINITY
}

fn default_domain_grid() -> usize {
    128
}

fn default_dt_fast() -> f64 {
    0.01
}

fn default_teps_c() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    500
}

fn default_tol() -> f64 {
    1e-7
}

fn default_segments() -> usize {
    16
}

fn default_one() -> usize {
    1
}

/// Shared recipe for tabulating a Hamiltonian surface and deriving the rate
/// function at a frozen slow position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateBuild {
    /// Frozen slow position (the surface is built at `x' = x`).
    pub x: Vec<f64>,
    pub beta_min: Vec<f64>,
    pub beta_max: Vec<f64>,
    pub n_per_axis: usize,
    pub grid_n: usize,
    /// Truncation radius of the Legendre transform; `inf` for untruncated.
    #[serde(default = "inf")]
    pub trunc_b: f64,
    #[serde(default = "default_domain_grid")]
    pub domain_grid_n: usize,
    /// Polish maximizers with exact eigensolves.
    #[serde(default)]
    pub polish: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamSection {
    pub x: Vec<f64>,
    /// Defaults to `x` (the diagonal Hamiltonian).
    #[serde(default)]
    pub x_prime: Option<Vec<f64>>,
    pub beta_min: Vec<f64>,
    pub beta_max: Vec<f64>,
    pub n_per_axis: usize,
    pub grid_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub build: RateBuild,
    /// Alpha sweep from `alpha_min` to `alpha_max` in `n_alpha` steps.
    pub alpha_min: Vec<f64>,
    pub alpha_max: Vec<f64>,
    pub n_alpha: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSection {
    /// CSV path file with columns `t,x_1..x_d` on a uniform grid.
    pub path_file: String,
    /// When set, also evaluate the frozen-block discretization at this `m`.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub offset_a: f64,
    pub build: RateBuild,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub epsilon: f64,
    pub t_end: f64,
    #[serde(default = "default_dt_fast")]
    pub dt_fast: f64,
    #[serde(default = "default_one")]
    pub replicas: usize,
    #[serde(default = "default_one")]
    pub store_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma5Section {
    pub x: Vec<f64>,
    #[serde(default)]
    pub x_prime: Option<Vec<f64>>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    /// Slow block length.
    pub delta: f64,
    /// Fast block length in rescaled time; defaults to
    /// `t_eps_c * sqrt(log(1/epsilon))`.
    #[serde(default)]
    pub t_eps: Option<f64>,
    #[serde(default = "default_teps_c")]
    pub t_eps_c: f64,
    pub nu: f64,
    #[serde(default = "default_dt_fast")]
    pub dt_fast: f64,
    pub replicas: usize,
    /// Grid of the spectral reference Hamiltonian.
    pub grid_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpSection {
    pub delta: f64,
    /// Strictly decreasing sweep.
    pub epsilons: Vec<f64>,
    pub replicas: usize,
    #[serde(default = "default_dt_fast")]
    pub dt_fast: f64,
    pub t_end: f64,
    pub x0: Vec<f64>,
    /// Tube center `phi_t = x0 + slope t` (zero slope if absent) ...
    #[serde(default)]
    pub slope: Option<Vec<f64>>,
    /// ... unless an explicit path file is given.
    #[serde(default)]
    pub path_file: Option<String>,
    #[serde(default = "default_segments")]
    pub path_segments: usize,
    /// Reference action `S(phi)`; computed from `build` when absent.
    #[serde(default)]
    pub action_ref: Option<f64>,
    #[serde(default)]
    pub build: Option<RateBuild>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinpathSection {
    pub x_start: Vec<f64>,
    pub x_end: Vec<f64>,
    pub t_end: f64,
    pub m: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    pub build: RateBuild,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub ham: Option<HamSection>,
    pub rate: Option<RateSection>,
    pub action: Option<ActionSection>,
    pub simulate: Option<SimulateSection>,
    pub lemma5: Option<Lemma5Section>,
    pub ldp: Option<LdpSection>,
    pub minpath: Option<MinpathSection>,
}

/// Load a config file, apply `--override key.path=value` entries, and
/// deserialize with field-level error messages.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = raw
        .parse()
        .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    value
        .try_into()
        .map_err(|e| CliError::Config(format!("config schema violation: {e}")))
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<(), CliError> {
    let (key, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{entry}` is not of the form k=v")))?;
    let parsed = parse_override_value(raw_value);
    let mut cursor = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{seg}` is not a table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // bracket syntax for small arrays: [a,b,c]
    if let Some(inner) = raw.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        let items: Vec<toml::Value> =
            inner.split(',').map(|s| parse_override_value(s.trim())).collect();
        return toml::Value::Array(items);
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir();
        let p = dir.join(format!("sfldp_cfg_{}_{:p}.toml", std::process::id(), &content));
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn minimal_config_parses() {
        let p = write_tmp("[system]\nbuiltin = \"cosine-ring\"\n");
        let cfg = load_config(&p, &[]).unwrap();
        assert_eq!(cfg.system.builtin.as_deref(), Some("cosine-ring"));
        std::fs::remove_file(p).unwrap();
    }

    #[test]
    fn overrides_apply_with_types() {
        let p = write_tmp(
            "[system]\nbuiltin = \"constant\"\n[ham]\nx = [0.0]\nbeta_min = [-1.0]\nbeta_max = [1.0]\nn_per_axis = 5\ngrid_n = 32\n",
        );
        let cfg = load_config(
            &p,
            &[
                "ham.grid_n=64".to_string(),
                "ham.beta_max=[2.0]".to_string(),
                "system.builtin=cosine-ring".to_string(),
            ],
        )
        .unwrap();
        let ham = cfg.ham.unwrap();
        assert_eq!(ham.grid_n, 64);
        assert_eq!(ham.beta_max, vec![2.0]);
        assert_eq!(cfg.system.builtin.as_deref(), Some("cosine-ring"));
        std::fs::remove_file(p).unwrap();
    }

    #[test]
    fn unknown_fields_rejected_with_location() {
        let p = write_tmp("[system]\nbuiltin = \"constant\"\nbogus = 3\n");
        let err = load_config(&p, &[]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bogus"), "{msg}");
        std::fs::remove_file(p).unwrap();
    }

    #[test]
    fn inf_literal_supported() {
        let p = write_tmp(
            "[system]\nbuiltin = \"constant\"\n[minpath]\nx_start = [0.0]\nx_end = [0.7]\nt_end = 1.0\nm = 8\n[minpath.build]\nx = [0.0]\nbeta_min = [-2.0]\nbeta_max = [2.0]\nn_per_axis = 9\ngrid_n = 32\ntrunc_b = inf\n",
        );
        let cfg = load_config(&p, &[]).unwrap();
        assert!(cfg.minpath.unwrap().build.trunc_b.is_infinite());
        std::fs::remove_file(p).unwrap();
    }
}
