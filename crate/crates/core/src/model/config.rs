//! System declaration for config files: either a builtin name or a set of
//! closed-form coefficient expressions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{builtin, expr::Expr, SystemSpec, TorusGeometry};
use crate::error::{Error, Result};

/// The `[system]` table of a config file.
///
/// Either `builtin` is set, or the expression fields (`f`, `b`, `c`) plus the
/// declared bounds are. Expressions use the variables `x0..`/`y0..` and the
/// functions `sin`, `cos`, `exp`, `sqrt` (see [`Expr`](super::Expr)).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub builtin: Option<String>,
    pub label: Option<String>,
    pub dim_slow: Option<usize>,
    pub dim_fast: Option<usize>,
    /// Period per fast coordinate; a single entry is broadcast. Default 2*pi.
    pub period: Option<Vec<f64>>,
    /// Slow drift, one expression per slow coordinate.
    pub f: Option<Vec<String>>,
    /// Fast drift, one expression per fast coordinate.
    pub b: Option<Vec<String>>,
    /// Fast diffusion, row-major `l x l` expressions.
    pub c: Option<Vec<Vec<String>>>,
    pub f_sup_norm: Option<f64>,
    pub lipschitz_f: Option<f64>,
    pub nondegeneracy_floor: Option<f64>,
}

impl SystemConfig {
    pub fn of_builtin(name: &str) -> Self {
        Self { builtin: Some(name.to_string()), ..Self::default() }
    }

    /// Build the executable [`SystemSpec`] declared by this config.
    pub fn build(&self) -> Result<SystemSpec> {
        if let Some(name) = &self.builtin {
            return builtin(name);
        }
        let d = self.dim_slow.ok_or_else(|| miss("dim_slow"))?;
        let l = self.dim_fast.ok_or_else(|| miss("dim_fast"))?;
        if d == 0 || l == 0 {
            return Err(Error::Config("dim_slow and dim_fast must be >= 1".into()));
        }
        let period = match &self.period {
            None => vec![std::f64::consts::TAU; l],
            Some(p) if p.len() == 1 => vec![p[0]; l],
            Some(p) if p.len() == l => p.clone(),
            Some(p) => {
                return Err(Error::Config(format!(
                    "period has {} entries, expected 1 or {l}",
                    p.len()
                )))
            }
        };
        if period.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("periods must be positive".into()));
        }

        let f_src = self.f.as_ref().ok_or_else(|| miss("f"))?;
        let b_src = self.b.as_ref().ok_or_else(|| miss("b"))?;
        let c_src = self.c.as_ref().ok_or_else(|| miss("c"))?;
        if f_src.len() != d {
            return Err(Error::Config(format!("f has {} entries, expected {d}", f_src.len())));
        }
        if b_src.len() != l {
            return Err(Error::Config(format!("b has {} entries, expected {l}", b_src.len())));
        }
        if c_src.len() != l || c_src.iter().any(|row| row.len() != l) {
            return Err(Error::Config(format!("c must be an {l} x {l} expression matrix")));
        }

        let parse_all = |srcs: &[String]| -> Result<Vec<Expr>> {
            srcs.iter().map(|s| Expr::parse(s)).collect()
        };
        let f_expr = parse_all(f_src)?;
        let b_expr = parse_all(b_src)?;
        let c_expr: Vec<Expr> =
            c_src.iter().flatten().map(|s| Expr::parse(s)).collect::<Result<_>>()?;
        for e in f_expr.iter().chain(&b_expr).chain(&c_expr) {
            let (ax, ay) = e.arity();
            if ax > d || ay > l {
                return Err(Error::Config(format!(
                    "expression references x{}/y{} beyond dims ({d}, {l})",
                    ax.saturating_sub(1),
                    ay.saturating_sub(1)
                )));
            }
        }

        let f_sup = self.f_sup_norm.ok_or_else(|| miss("f_sup_norm"))?;
        let lip_f = self.lipschitz_f.unwrap_or(0.0);
        let floor = self.nondegeneracy_floor.ok_or_else(|| miss("nondegeneracy_floor"))?;
        if floor <= 0.0 {
            return Err(Error::Config("nondegeneracy_floor must be positive".into()));
        }

        let label = self.label.clone().unwrap_or_else(|| "custom".to_string());
        let geometry = TorusGeometry { dim_fast: l, period };
        let make_field = |exprs: Vec<Expr>| -> super::CoeffFn {
            Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
                for (o, e) in out.iter_mut().zip(&exprs) {
                    *o = e.eval(x, y);
                }
            })
        };
        Ok(SystemSpec::new(
            label,
            d,
            geometry,
            make_field(f_expr),
            make_field(b_expr),
            make_field(c_expr),
            f_sup,
            lip_f,
            floor,
        ))
    }
}

fn miss(field: &str) -> Error {
    Error::Config(format!("missing `system.{field}` (required without `builtin`)"))
}
