//! System specifications: the coefficient triple `(f, B, C)` on a flat torus.
//!
//! A [`SystemSpec`] is the single source of truth for a model: slow dimension,
//! fast torus geometry, the three coefficient maps, and the declared bounds
//! (`f_sup_norm`, `lipschitz_f`, `nondegeneracy_floor`) that downstream
//! numerics rely on. The bounds are part of the specification; [`validate`]
//! spot-checks them by sampling rather than proving them.

mod config;
mod expr;

pub use config::SystemConfig;
pub use expr::Expr;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Flat torus geometry of the fast state space: each coordinate lives on
/// `[0, period_k)` with periodic wrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusGeometry {
    pub dim_fast: usize,
    pub period: Vec<f64>,
}

impl TorusGeometry {
    /// Torus with the same period in every coordinate.
    pub fn uniform(dim_fast: usize, period: f64) -> Self {
        assert!(dim_fast >= 1, "fast dimension must be >= 1");
        assert!(period > 0.0, "period must be positive");
        Self { dim_fast, period: vec![period; dim_fast] }
    }

    /// Standard torus with period 2*pi per coordinate.
    pub fn standard(dim_fast: usize) -> Self {
        Self::uniform(dim_fast, std::f64::consts::TAU)
    }

    /// Wrap a point into the fundamental domain `[0, period)` coordinatewise.
    pub fn wrap_in_place(&self, y: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim_fast);
        for (v, &p) in y.iter_mut().zip(&self.period) {
            *v = v.rem_euclid(p);
        }
    }

    pub fn wrap(&self, y: &[f64]) -> Vec<f64> {
        let mut out = y.to_vec();
        self.wrap_in_place(&mut out);
        out
    }

    /// Squared geodesic distance on the torus (coordinatewise minimal image).
    pub fn distance_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.dim_fast {
            let p = self.period[k];
            let d = (a[k] - b[k]).rem_euclid(p);
            let d = d.min(p - d);
            acc += d * d;
        }
        acc
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.distance_sq(a, b).sqrt()
    }
}

/// Coefficient map writing its value into a caller-provided buffer.
/// Evaluations must be reentrant and side-effect free; specs are shared
/// across worker threads.
pub type CoeffFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A slow-fast system: slow drift `f: R^d x M -> R^d`, fast drift
/// `B: R^d x M -> R^l`, fast diffusion `C: R^d x M -> R^{l x l}` (row-major).
#[derive(Clone)]
pub struct SystemSpec {
    pub label: String,
    pub dim_slow: usize,
    pub geometry: TorusGeometry,
    f: CoeffFn,
    b: CoeffFn,
    c: CoeffFn,
    pub f_sup_norm: f64,
    pub lipschitz_f: f64,
    pub nondegeneracy_floor: f64,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("SystemSpec")
            .field("label", &self.label)
            .field("dim_slow", &self.dim_slow)
            .field("geometry", &self.geometry)
            .field("f_sup_norm", &self.f_sup_norm)
            .field("lipschitz_f", &self.lipschitz_f)
            .field("nondegeneracy_floor", &self.nondegeneracy_floor)
            .finish()
    }
}

impl SystemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        dim_slow: usize,
        geometry: TorusGeometry,
        f: CoeffFn,
        b: CoeffFn,
        c: CoeffFn,
        f_sup_norm: f64,
        lipschitz_f: f64,
        nondegeneracy_floor: f64,
    ) -> Self {
        assert!(dim_slow >= 1);
        assert!(f_sup_norm >= 0.0 && lipschitz_f >= 0.0);
        assert!(nondegeneracy_floor > 0.0);
        Self {
            label: label.into(),
            dim_slow,
            geometry,
            f,
            b,
            c,
            f_sup_norm,
            lipschitz_f,
            nondegeneracy_floor,
        }
    }

    pub fn dim_fast(&self) -> usize {
        self.geometry.dim_fast
    }

    /// Slow drift `f(x, y)` into `out` (length `dim_slow`).
    pub fn eval_f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out);
    }

    /// Fast drift `B(x, y)` into `out` (length `dim_fast`).
    pub fn eval_b(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.b)(x, y, out);
    }

    /// Fast diffusion `C(x, y)` into `out` (row-major `l x l`).
    pub fn eval_c(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.c)(x, y, out);
    }

    /// Diffusion matrix `a = C C^T` into `out` (row-major `l x l`).
    pub fn eval_ccstar(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let l = self.dim_fast();
        let mut c = vec![0.0; l * l];
        self.eval_c(x, y, &mut c);
        for i in 0..l {
            for j in 0..l {
                let mut s = 0.0;
                for k in 0..l {
                    s += c[i * l + k] * c[j * l + k];
                }
                out[i * l + j] = s;
            }
        }
    }

    /// Allocating convenience wrapper around [`SystemSpec::eval_f`].
    pub fn f_vec(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_slow];
        self.eval_f(x, y, &mut out);
        out
    }

    /// Content digest used to stamp exported artifacts.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.label.as_bytes());
        h.update(self.dim_slow.to_le_bytes());
        h.update(self.geometry.dim_fast.to_le_bytes());
        for p in &self.geometry.period {
            h.update(p.to_le_bytes());
        }
        h.update(self.f_sup_norm.to_le_bytes());
        h.update(self.lipschitz_f.to_le_bytes());
        h.update(self.nondegeneracy_floor.to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

/// A named example system together with its known analytic facts.
#[derive(Debug, Clone)]
pub struct BuiltinSystem {
    pub name: &'static str,
    pub spec: SystemSpec,
    pub notes: &'static str,
}

const BUILTIN_NAMES: [&str; 3] = ["constant", "cosine-ring", "full-dep"];

/// All registered builtin systems.
pub fn registry() -> Vec<BuiltinSystem> {
    BUILTIN_NAMES.iter().map(|n| builtin_entry(n).expect("registry name")).collect()
}

fn builtin_entry(name: &str) -> Result<BuiltinSystem> {
    let g1 = TorusGeometry::standard(1);
    match name {
        "constant" => Ok(BuiltinSystem {
            name: "constant",
            spec: SystemSpec::new(
                "constant",
                1,
                g1,
                Arc::new(|_x, _y, out| out[0] = 0.7),
                Arc::new(|_x, _y, out| out[0] = 0.0),
                Arc::new(|_x, _y, out| out[0] = 1.0),
                0.7,
                0.0,
                1.0,
            ),
            notes: "f = 0.7 constant, fast motion is Brownian on the circle; \
                    H(beta) = 0.7 beta and L is the indicator of {0.7}.",
        }),
        "cosine-ring" => Ok(BuiltinSystem {
            name: "cosine-ring",
            spec: SystemSpec::new(
                "cosine-ring",
                1,
                g1,
                Arc::new(|_x, y, out| out[0] = y[0].cos()),
                Arc::new(|_x, _y, out| out[0] = 0.0),
                Arc::new(|_x, _y, out| out[0] = 1.0),
                1.0,
                1.0,
                1.0,
            ),
            notes: "f = cos(y) with Brownian fast motion; the generator plus \
                    potential is a Mathieu operator, so H has a classical \
                    series H(beta) = beta^2 - 1.75 beta^4 + O(beta^6).",
        }),
        "full-dep" => Ok(BuiltinSystem {
            name: "full-dep",
            spec: SystemSpec::new(
                "full-dep",
                1,
                g1,
                Arc::new(|_x, y, out| out[0] = y[0].cos()),
                Arc::new(|x, y, out| out[0] = 0.3 * (x[0] - y[0]).sin()),
                Arc::new(|x, y, out| out[0] = (1.0 + 0.5 * x[0].sin() * y[0].cos()).sqrt()),
                1.0,
                1.0,
                0.5,
            ),
            notes: "x-dependent fast drift and diffusion; CC* = 1 + 0.5 sin(x) cos(y) \
                    ranges over [0.5, 1.5].",
        }),
        _ => Err(Error::UnknownBuiltin { name: name.to_string(), valid: BUILTIN_NAMES.join(", ") }),
    }
}

/// Look up a builtin system spec by name.
pub fn builtin(name: &str) -> Result<SystemSpec> {
    builtin_entry(name).map(|b| b.spec)
}

/// Sampled verification of the declared bounds of a [`SystemSpec`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub max_abs_f: f64,
    pub lipschitz_quotient_f: f64,
    pub lipschitz_quotient_b: f64,
    pub lipschitz_quotient_c: f64,
    pub min_eig_ccstar: f64,
    /// Human-readable descriptions of violated declared bounds; empty when clean.
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Range of slow-variable samples used by [`validate`].
const VALIDATE_X_RANGE: f64 = 3.0;

/// Spot-check `|f| <= f_sup_norm`, the Lipschitz quotients and the smallest
/// eigenvalue of `CC*` over `samples` random points. Violations are reported,
/// not thrown.
pub fn validate(spec: &SystemSpec, samples: usize, seed: u64) -> ValidationReport {
    assert!(samples >= 1);
    let d = spec.dim_slow;
    let l = spec.dim_fast();
    let mut rng = rng::stream(seed, &[rng::tag::VALIDATE]);
    let draw_point = |rng: &mut rand_chacha::ChaCha8Rng| {
        let x: Vec<f64> =
            (0..d).map(|_| rng.gen_range(-VALIDATE_X_RANGE..VALIDATE_X_RANGE)).collect();
        let y: Vec<f64> = (0..l).map(|k| rng.gen_range(0.0..spec.geometry.period[k])).collect();
        (x, y)
    };

    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    let mut max_abs_f: f64 = 0.0;
    let mut lip_f: f64 = 0.0;
    let mut lip_b: f64 = 0.0;
    let mut lip_c: f64 = 0.0;
    let mut min_eig = f64::INFINITY;

    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    let mut ba = vec![0.0; l];
    let mut bb = vec![0.0; l];
    let mut ca = vec![0.0; l * l];
    let mut cb = vec![0.0; l * l];
    let mut cc = vec![0.0; l * l];

    for _ in 0..samples {
        let (xa, ya) = draw_point(&mut rng);
        let (xb, yb) = draw_point(&mut rng);

        spec.eval_f(&xa, &ya, &mut fa);
        spec.eval_f(&xb, &yb, &mut fb);
        spec.eval_b(&xa, &ya, &mut ba);
        spec.eval_b(&xb, &yb, &mut bb);
        spec.eval_c(&xa, &ya, &mut ca);
        spec.eval_c(&xb, &yb, &mut cb);
        spec.eval_ccstar(&xa, &ya, &mut cc);

        max_abs_f = max_abs_f.max(norm(&fa)).max(norm(&fb));

        let dx: f64 = xa.iter().zip(&xb).map(|(a, b)| (a - b) * (a - b)).sum();
        let dy = spec.geometry.distance_sq(&ya, &yb);
        let dist = (dx + dy).sqrt();
        if dist > 1e-12 {
            let df = fa.iter().zip(&fb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let db = ba.iter().zip(&bb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dc = ca.iter().zip(&cb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            lip_f = lip_f.max(df / dist);
            lip_b = lip_b.max(db / dist);
            lip_c = lip_c.max(dc / dist);
        }

        let m = DMatrix::from_row_slice(l, l, &cc);
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        min_eig = min_eig.min(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    let mut violations = Vec::new();
    if max_abs_f > spec.f_sup_norm + 1e-9 {
        violations.push(format!(
            "sampled |f| = {max_abs_f:.6} exceeds declared f_sup_norm = {:.6}",
            spec.f_sup_norm
        ));
    }
    if spec.lipschitz_f > 0.0 && lip_f > spec.lipschitz_f + 1e-9 {
        violations.push(format!(
            "sampled Lipschitz quotient of f = {lip_f:.6} exceeds declared {:.6}",
            spec.lipschitz_f
        ));
    }
    if min_eig < spec.nondegeneracy_floor - 1e-9 {
        violations.push(format!(
            "sampled min eig(CC*) = {min_eig:.6} below declared floor {:.6}",
            spec.nondegeneracy_floor
        ));
    }
    for (name, fs) in [("f", &fa), ("B", &ba), ("C", &ca)] {
        if fs.iter().any(|v| !v.is_finite()) {
            violations.push(format!("{name} produced a nonfinite value"));
        }
    }

    ValidationReport {
        samples,
        max_abs_f,
        lipschitz_quotient_f: lip_f,
        lipschitz_quotient_b: lip_b,
        lipschitz_quotient_c: lip_c,
        min_eig_ccstar: min_eig,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_constant_is_constant() {
        let spec = builtin("constant").unwrap();
        assert_abs_diff_eq!(spec.f_vec(&[3.3], &[1.1])[0], 0.7);
        assert_abs_diff_eq!(spec.f_vec(&[-8.0], &[5.9])[0], 0.7);
    }

    #[test]
    fn builtin_cosine_ring_slow_drift() {
        let spec = builtin("cosine-ring").unwrap();
        assert_abs_diff_eq!(spec.f_vec(&[0.4], &[std::f64::consts::PI])[0], -1.0);
    }

    #[test]
    fn builtin_full_dep_diffusion_at_x0() {
        let spec = builtin("full-dep").unwrap();
        let mut c = [0.0];
        for k in 0..32 {
            let y = [k as f64 * 0.2];
            spec.eval_c(&[0.0], &y, &mut c);
            assert_abs_diff_eq!(c[0] * c[0], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn unknown_builtin_lists_names() {
        let err = builtin("nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("constant"));
        assert!(msg.contains("cosine-ring"));
        assert!(msg.contains("full-dep"));
    }

    #[test]
    fn validate_constant_system() {
        let spec = builtin("constant").unwrap();
        let rep = validate(&spec, 100, 1);
        assert!(rep.ok(), "violations: {:?}", rep.violations);
        assert_abs_diff_eq!(rep.max_abs_f, 0.7);
        assert_abs_diff_eq!(rep.lipschitz_quotient_f, 0.0);
    }

    #[test]
    fn validate_cosine_ring_bounds() {
        let spec = builtin("cosine-ring").unwrap();
        let rep = validate(&spec, 1000, 1);
        assert!(rep.ok(), "violations: {:?}", rep.violations);
        assert!(rep.max_abs_f <= 1.0);
    }

    #[test]
    fn validate_full_dep_nondegeneracy() {
        // Independent check of the declared floor: CC* = 1 + 0.5 sin(x) cos(y)
        // has infimum 0.5, confirmed by a dense scan.
        let spec = builtin("full-dep").unwrap();
        let mut scan_min = f64::INFINITY;
        let mut c = [0.0];
        for i in 0..400 {
            for j in 0..400 {
                let x = [-4.0 + 8.0 * i as f64 / 399.0];
                let y = [std::f64::consts::TAU * j as f64 / 399.0];
                spec.eval_c(&x, &y, &mut c);
                scan_min = scan_min.min(c[0] * c[0]);
            }
        }
        assert!(scan_min >= 0.5 - 1e-12 && scan_min <= 0.5 + 1e-2, "scan min {scan_min}");

        let rep = validate(&spec, 1000, 1);
        assert!(rep.ok(), "violations: {:?}", rep.violations);
        assert!(rep.min_eig_ccstar >= 0.5);
    }

    #[test]
    fn every_builtin_validates_clean() {
        for b in registry() {
            let rep = validate(&b.spec, 500, 3);
            assert!(rep.ok(), "{}: {:?}", b.name, rep.violations);
        }
    }

    #[test]
    fn slow_drift_is_periodic_in_y() {
        for b in registry() {
            let spec = b.spec;
            let mut rng = crate::rng::stream(11, &[99]);
            for _ in 0..1000 {
                let x = [rng.gen_range(-3.0..3.0)];
                let y = [rng.gen_range(0.0..std::f64::consts::TAU)];
                let yp = [y[0] + spec.geometry.period[0]];
                let a = spec.f_vec(&x, &y)[0];
                let b = spec.f_vec(&x, &yp)[0];
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}
