//! Tabulated Hamiltonian `H(x', x, .)` over a beta box, with gradient access,
//! interpolation, invariant checks, and CSV + JSON sidecar export.

use std::io::{BufRead, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform axis of a beta grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaAxis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl BetaAxis {
    pub fn node(&self, i: usize) -> f64 {
        if self.n == 1 {
            return self.min;
        }
        self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }
}

/// Gridded `H` values and gradients at fixed `(x', x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamiltonianSurface {
    pub x_prime: Vec<f64>,
    pub x: Vec<f64>,
    pub axes: Vec<BetaAxis>,
    /// `H` at the flattened (row-major) product grid nodes.
    pub values: Vec<f64>,
    /// Gradient components, node-major with stride `dim`.
    pub gradients: Vec<f64>,
    pub f_sup_norm: f64,
    pub spec_digest: String,
    pub grid_n: usize,
    pub solver_tol: f64,
    pub max_residual: f64,
    /// Violated surface invariants found at build time; empty when clean.
    pub invariant_violations: Vec<String>,
}

impl HamiltonianSurface {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut r = flat;
        for k in (0..self.dim()).rev() {
            let idx = r % self.axes[k].n;
            r /= self.axes[k].n;
            out[k] = self.axes[k].node(idx);
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for (k, &i) in multi.iter().enumerate() {
            flat = flat * self.axes[k].n + i;
        }
        flat
    }

    /// Radius of the largest ball around 0 covered by the box.
    pub fn covered_radius(&self) -> f64 {
        self.axes.iter().map(|a| a.min.abs().min(a.max.abs())).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        beta.iter()
            .zip(&self.axes)
            .all(|(b, a)| *b >= a.min - 1e-12 && *b <= a.max + 1e-12)
    }

    fn locate(&self, k: usize, b: f64) -> (usize, f64) {
        let a = &self.axes[k];
        let u = (b - a.min) / a.spacing();
        let i = (u.floor() as isize).clamp(0, a.n as isize - 2) as usize;
        (i, u - i as f64)
    }

    /// Multilinear interpolation of `H`.
    pub fn value(&self, beta: &[f64]) -> f64 {
        self.interp(beta, &self.values, 1)[0]
    }

    /// Multilinear interpolation of the tabulated gradient.
    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        self.interp(beta, &self.gradients, self.dim())
    }

    fn interp(&self, beta: &[f64], data: &[f64], stride: usize) -> Vec<f64> {
        let d = self.dim();
        let mut cells = Vec::with_capacity(d);
        for k in 0..d {
            cells.push(self.locate(k, beta[k]));
        }
        let mut out = vec![0.0; stride];
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut multi = vec![0usize; d];
            for k in 0..d {
                let (i, w) = cells[k];
                if corner >> k & 1 == 1 {
                    weight *= w;
                    multi[k] = i + 1;
                } else {
                    weight *= 1.0 - w;
                    multi[k] = i;
                }
            }
            let flat = self.flat_index(&multi);
            for s in 0..stride {
                out[s] += weight * data[flat * stride + s];
            }
        }
        out
    }

    /// Cubic Hermite interpolation of `H` (1-d surfaces only): uses both the
    /// tabulated values and gradients, giving O(h^4) accuracy.
    pub fn hermite_value(&self, beta: f64) -> f64 {
        self.hermite(beta).0
    }

    /// Derivative of the cubic Hermite interpolant (1-d surfaces only).
    pub fn hermite_deriv(&self, beta: f64) -> f64 {
        self.hermite(beta).1
    }

    fn hermite(&self, beta: f64) -> (f64, f64) {
        assert_eq!(self.dim(), 1, "hermite interpolation is 1-d only");
        let (i, t) = self.locate(0, beta);
        let h = self.axes[0].spacing();
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let (g0, g1) = (self.gradients[i], self.gradients[i + 1]);
        let (t2, t3) = (t * t, t * t * t);
        let value = (2.0 * t3 - 3.0 * t2 + 1.0) * v0
            + (t3 - 2.0 * t2 + t) * h * g0
            + (-2.0 * t3 + 3.0 * t2) * v1
            + (t3 - t2) * h * g1;
        let deriv = ((6.0 * t2 - 6.0 * t) * v0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * g0
            + (-6.0 * t2 + 6.0 * t) * v1
            + (3.0 * t2 - 2.0 * t) * h * g1)
            / h;
        (value, deriv)
    }

    /// Check the surface invariants; returns violation descriptions.
    ///
    /// * midpoint convexity along every grid line (within 1e-8),
    /// * `H = 0` at the node `beta = 0` (within 1e-10) when 0 is a node,
    /// * `|H| <= f_sup_norm |beta| + 1e-8` at every node.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = self.dim();

        for flat in 0..self.node_count() {
            let beta = self.node(flat);
            let norm: f64 = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
            let v = self.values[flat];
            if v.abs() > self.f_sup_norm * norm + 1e-8 {
                out.push(format!(
                    "|H({beta:?})| = {} exceeds f_sup_norm * |beta| = {}",
                    v.abs(),
                    self.f_sup_norm * norm
                ));
            }
            if norm == 0.0 && v.abs() > 1e-10 {
                out.push(format!("H(0) = {v} not within 1e-10 of 0"));
            }
        }

        // midpoint convexity along each axis line
        let mut multi = vec![0usize; d];
        for axis in 0..d {
            multi.fill(0);
            loop {
                for i in 1..self.axes[axis].n.saturating_sub(1) {
                    let mut m = multi.clone();
                    m[axis] = i - 1;
                    let a = self.values[self.flat_index(&m)];
                    m[axis] = i;
                    let b = self.values[self.flat_index(&m)];
                    m[axis] = i + 1;
                    let c = self.values[self.flat_index(&m)];
                    if b > 0.5 * (a + c) + 1e-8 {
                        out.push(format!(
                            "midpoint convexity fails along axis {axis} at index {i}"
                        ));
                    }
                }
                // advance the multi-index over the other axes
                let mut k = d;
                for j in (0..d).rev() {
                    if j == axis {
                        continue;
                    }
                    if multi[j] + 1 < self.axes[j].n {
                        multi[j] += 1;
                        k = j;
                        break;
                    }
                    multi[j] = 0;
                }
                if k == d {
                    break;
                }
            }
        }
        out
    }

    /// CSV export: `beta_1..beta_d,H,dH_1..dH_d`, one row per node in
    /// row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        for k in 1..=d {
            write!(w, "beta_{k},")?;
        }
        write!(w, "H")?;
        for k in 1..=d {
            write!(w, ",dH_{k}")?;
        }
        writeln!(w)?;
        for flat in 0..self.node_count() {
            for b in self.node(flat) {
                write!(w, "{b},")?;
            }
            write!(w, "{}", self.values[flat])?;
            for s in 0..d {
                write!(w, ",{}", self.gradients[flat * d + s])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Write the CSV plus a JSON sidecar (`<path>.meta.json`) recording the
    /// provenance needed to reimport.
    pub fn save(&self, csv_path: &FsPath) -> Result<()> {
        let file = std::fs::File::create(csv_path)?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let sidecar = csv_path.with_extension("meta.json");
        let meta = serde_json::to_string_pretty(&SurfaceMeta::of(self))
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(sidecar, meta)?;
        Ok(())
    }

    /// Reimport a surface written by [`HamiltonianSurface::save`].
    pub fn load(csv_path: &FsPath) -> Result<Self> {
        let sidecar = csv_path.with_extension("meta.json");
        let meta: SurfaceMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
            .map_err(|e| Error::Config(format!("bad surface sidecar: {e}")))?;
        let d = meta.axes.len();
        let file = std::fs::File::open(csv_path)?;
        let mut values = Vec::new();
        let mut gradients = Vec::new();
        for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if ln == 0 {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 * d + 1 {
                return Err(Error::Config(format!("surface CSV row {ln} malformed")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Config(format!("bad float `{s}` in surface CSV")))
            };
            values.push(parse(fields[d])?);
            for k in 0..d {
                gradients.push(parse(fields[d + 1 + k])?);
            }
        }
        let surface = Self {
            x_prime: meta.x_prime,
            x: meta.x,
            axes: meta.axes,
            values,
            gradients,
            f_sup_norm: meta.f_sup_norm,
            spec_digest: meta.spec_digest,
            grid_n: meta.grid_n,
            solver_tol: meta.solver_tol,
            max_residual: meta.max_residual,
            invariant_violations: Vec::new(),
        };
        if surface.values.len() != surface.node_count() {
            return Err(Error::Config(format!(
                "surface CSV has {} rows, expected {}",
                surface.values.len(),
                surface.node_count()
            )));
        }
        Ok(surface)
    }
}

#[derive(Serialize, Deserialize)]
struct SurfaceMeta {
    spec_digest: String,
    x_prime: Vec<f64>,
    x: Vec<f64>,
    axes: Vec<BetaAxis>,
    grid_n: usize,
    f_sup_norm: f64,
    solver_tol: f64,
    max_residual: f64,
}

impl SurfaceMeta {
    fn of(s: &HamiltonianSurface) -> Self {
        Self {
            spec_digest: s.spec_digest.clone(),
            x_prime: s.x_prime.clone(),
            x: s.x.clone(),
            axes: s.axes.clone(),
            grid_n: s.grid_n,
            f_sup_norm: s.f_sup_norm,
            solver_tol: s.solver_tol,
            max_residual: s.max_residual,
        }
    }
}

/// Build a synthetic surface from closed-form value/gradient closures
/// (test and plumbing helper; spectral surfaces come from
/// [`build_surface`](super::build_surface)).
pub fn surface_from_fn(
    axes: Vec<BetaAxis>,
    f_sup_norm: f64,
    value: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
) -> HamiltonianSurface {
    let mut surface = HamiltonianSurface {
        x_prime: vec![],
        x: vec![],
        axes,
        values: Vec::new(),
        gradients: Vec::new(),
        f_sup_norm,
        spec_digest: "synthetic".into(),
        grid_n: 0,
        solver_tol: 1e-8,
        max_residual: 0.0,
        invariant_violations: Vec::new(),
    };
    for flat in 0..surface.node_count() {
        let beta = surface.node(flat);
        surface.values.push(value(&beta));
        surface.gradients.extend(gradient(&beta));
    }
    surface.invariant_violations = surface.check_invariants();
    surface
}
