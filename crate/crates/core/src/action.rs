//! Path objects and the action functional `S(phi) = int_0^T L(phi_t, dphi_t) dt`.
//!
//! Besides plain piecewise-linear paths, this module builds the two
//! discretizations used by the block arguments: the *step path*
//! `psi_s = phi_{kappa_m(s + a) - a}` freezing the position argument on
//! blocks of length `Delta = T/m`, and the *piecewise-linear path* `chi`
//! whose derivative is frozen the same way, `chi'_s = phi'_{kappa_m(s+a)-a}`
//! (right derivatives, with `phi` extended constantly to `s < 0`). The
//! discretized action is then the exact sum `sum Delta L(psi_k, chi'_k)`.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rate::RateFunction;

/// Rate-function field `L(x, alpha)`: the position-dependent local rate.
/// A plain [`RateFunction`] implements it by ignoring `x` (valid whenever the
/// Hamiltonian does not depend on the slow variable).
pub trait RateField: Sync {
    fn dim(&self) -> usize;
    /// `(L(x, alpha), beta_star)` at the field's truncation level.
    fn eval(&self, x: &[f64], alpha: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// True when `L` does not depend on `x` (lets optimizers skip x-derivatives).
    fn is_uniform(&self) -> bool {
        false
    }
}

impl RateField for RateFunction {
    fn dim(&self) -> usize {
        self.surface.dim()
    }

    fn eval(&self, _x: &[f64], alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
        // the action's infinity set is that of the untruncated transform:
        // slopes outside the domain box have L = +inf even when this rate
        // function evaluates a truncated L^b elsewhere
        if let Some(domain) = self.domain() {
            if !domain.strictly_inside(alpha) {
                return Ok((f64::INFINITY, vec![0.0; alpha.len()]));
            }
        }
        let r = self.legendre(alpha, self.trunc_b)?;
        Ok((r.value, r.beta_star))
    }

    fn is_uniform(&self) -> bool {
        true
    }
}

/// Piecewise-linear path on a uniform time grid over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub t_end: f64,
    pub dim: usize,
    /// Node values, flattened with stride `dim`; `m + 1` nodes.
    pub nodes: Vec<f64>,
}

impl Path {
    pub fn new(t_end: f64, dim: usize, nodes: Vec<f64>) -> Result<Self> {
        if t_end <= 0.0 || dim == 0 || nodes.len() < 2 * dim || nodes.len() % dim != 0 {
            return Err(Error::InvalidArgument("path needs t_end > 0 and >= 2 nodes".into()));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("path nodes must be finite".into()));
        }
        Ok(Self { t_end, dim, nodes })
    }

    /// Straight line from `x0` to `x1` with `m` segments.
    pub fn linear(x0: &[f64], x1: &[f64], t_end: f64, m: usize) -> Result<Self> {
        let dim = x0.len();
        let mut nodes = Vec::with_capacity((m + 1) * dim);
        for i in 0..=m {
            let w = i as f64 / m as f64;
            for k in 0..dim {
                nodes.push(x0[k] + w * (x1[k] - x0[k]));
            }
        }
        Self::new(t_end, dim, nodes)
    }

    /// Sample `t -> value(t)` on `m + 1` uniform nodes.
    pub fn from_fn(t_end: f64, dim: usize, m: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut nodes = Vec::with_capacity((m + 1) * dim);
        for i in 0..=m {
            nodes.extend(f(t_end * i as f64 / m as f64));
        }
        Self::new(t_end, dim, nodes)
    }

    pub fn num_segments(&self) -> usize {
        self.nodes.len() / self.dim - 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.num_segments() as f64
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Slope of segment `i`.
    pub fn slope(&self, i: usize) -> Vec<f64> {
        let dt = self.dt();
        (0..self.dim)
            .map(|k| (self.node(i + 1)[k] - self.node(i)[k]) / dt)
            .collect()
    }

    /// Linear interpolation at `t` (clamped to `[0, T]`).
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let m = self.num_segments();
        let u = (t / self.dt()).clamp(0.0, m as f64);
        let i = (u.floor() as usize).min(m - 1);
        let w = u - i as f64;
        (0..self.dim)
            .map(|k| self.node(i)[k] * (1.0 - w) + self.node(i + 1)[k] * w)
            .collect()
    }

    /// Right derivative at `t`: the slope of the segment containing `t` from
    /// the right (clamped into `[0, T)`; negative times use the first
    /// segment).
    pub fn slope_right(&self, t: f64) -> Vec<f64> {
        let m = self.num_segments();
        let i = if t < 0.0 {
            0
        } else {
            ((t / self.dt()).floor() as usize).min(m - 1)
        };
        self.slope(i)
    }

    /// Largest segment-slope norm.
    pub fn max_slope_norm(&self) -> f64 {
        (0..self.num_segments())
            .map(|i| self.slope(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Whether all segment slopes respect the speed limit `f_sup_norm`.
    pub fn is_admissible(&self, f_sup_norm: f64, tol: f64) -> bool {
        self.max_slope_norm() <= f_sup_norm + tol
    }

    /// CSV with columns `t,x_1..x_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for k in 1..=self.dim {
            write!(w, ",x_{k}")?;
        }
        writeln!(w)?;
        let dt = self.dt();
        for i in 0..=self.num_segments() {
            write!(w, "{}", dt * i as f64)?;
            for v in self.node(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Read a path from `t,x_1..x_d` CSV with a uniform time grid.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut nodes = Vec::new();
        let mut dim = 0usize;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if ln == 0 {
                dim = line.split(',').count() - 1;
                if dim == 0 {
                    return Err(Error::Config("path CSV needs t plus value columns".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let t: f64 = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::Config(format!("bad time on row {ln}")))?;
            times.push(t);
            for f in fields {
                nodes.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad value on row {ln}")))?,
                );
            }
        }
        if times.len() < 2 {
            return Err(Error::Config("path CSV needs at least two rows".into()));
        }
        let dt = times[1] - times[0];
        for w in times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(Error::Config("path CSV time grid must be uniform".into()));
            }
        }
        Path::new(times[times.len() - 1] - times[0], dim, nodes)
    }
}

/// `kappa_m(s) = floor(s / delta) delta`.
pub fn kappa(s: f64, delta: f64) -> f64 {
    (s / delta).floor() * delta
}

/// Step path `psi_s = phi_{kappa_m(s + a) - a}` (frozen position argument).
#[derive(Debug, Clone)]
pub struct StepPath {
    pub base: Path,
    pub m: usize,
    pub offset_a: f64,
    /// Interval starts within `[0, T)` where the frozen argument changes.
    pub breakpoints: Vec<f64>,
    /// Frozen base times per interval (clamped into `[0, T]`, negative -> 0).
    pub frozen_times: Vec<f64>,
}

impl StepPath {
    pub fn value(&self, s: f64) -> Vec<f64> {
        let i = interval_of(&self.breakpoints, s);
        self.base.value_at(self.frozen_times[i])
    }
}

/// Path with derivative frozen on the same intervals as the companion
/// [`StepPath`] and integrated from `phi_0`.
#[derive(Debug, Clone)]
pub struct PiecewiseLinearPath {
    pub dim: usize,
    /// Interval starts (same as the step path) plus the final time `T`.
    pub breakpoints: Vec<f64>,
    /// Values at the breakpoints, stride `dim` (continuous).
    pub nodes: Vec<f64>,
    /// Constant slope per interval, stride `dim`.
    pub slopes: Vec<f64>,
}

impl PiecewiseLinearPath {
    pub fn num_intervals(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn slope_of(&self, i: usize) -> &[f64] {
        &self.slopes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, s: f64) -> Vec<f64> {
        let i = interval_of(&self.breakpoints[..self.breakpoints.len() - 1], s);
        let ds = s - self.breakpoints[i];
        (0..self.dim).map(|k| self.node(i)[k] + ds * self.slope_of(i)[k]).collect()
    }

    /// Largest deviation from a reference path sampled on `samples` points.
    pub fn sup_distance_to(&self, reference: &Path, samples: usize) -> f64 {
        let t_end = *self.breakpoints.last().unwrap();
        let mut sup: f64 = 0.0;
        for i in 0..=samples {
            let t = t_end * i as f64 / samples as f64;
            let a = self.value(t);
            let b = reference.value_at(t);
            let d = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            sup = sup.max(d);
        }
        sup
    }
}

fn interval_of(starts: &[f64], s: f64) -> usize {
    match starts.binary_search_by(|probe| probe.partial_cmp(&s).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    }
}

/// Freeze a path on blocks of length `Delta = T/m` with offset `a`:
/// returns the step path `psi` and the derivative-frozen piecewise-linear
/// path `chi`, both anchored at `phi_0`.
pub fn discretize(path: &Path, m: usize, a: f64) -> Result<(StepPath, PiecewiseLinearPath)> {
    let t_end = path.t_end;
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if !(0.0..t_end).contains(&a) {
        return Err(Error::InvalidArgument("offset a must lie in [0, T)".into()));
    }
    let delta = t_end / m as f64;

    // breakpoints of s -> kappa_m(s + a) - a inside [0, T)
    let mut breakpoints = vec![0.0];
    let a_frac = a - kappa(a, delta);
    if a_frac > 0.0 {
        let mut s = delta - a_frac;
        while s < t_end - 1e-12 * t_end {
            breakpoints.push(s);
            s += delta;
        }
    } else {
        for j in 1..m {
            breakpoints.push(delta * j as f64);
        }
    }

    // On [s_i, s_{i+1}) the frozen argument kappa_m(s + a) - a is constant
    // and equals s_i itself (for i >= 1), resp. -a_frac on the first cell;
    // using the breakpoints directly avoids floor() edge cases at the seams.
    let mut frozen_times: Vec<f64> = breakpoints.clone();
    frozen_times[0] = -a_frac;

    let step = StepPath {
        base: path.clone(),
        m,
        offset_a: a,
        breakpoints: breakpoints.clone(),
        frozen_times: frozen_times.iter().map(|t| t.clamp(0.0, t_end)).collect(),
    };

    let d = path.dim;
    let mut nodes = path.node(0).to_vec();
    let mut slopes = Vec::with_capacity(breakpoints.len() * d);
    let mut all_points = breakpoints.clone();
    all_points.push(t_end);
    for (i, tf) in frozen_times.iter().enumerate() {
        let slope = path.slope_right(*tf);
        let len = all_points[i + 1] - all_points[i];
        let base = nodes[i * d..(i + 1) * d].to_vec();
        for k in 0..d {
            nodes.push(base[k] + len * slope[k]);
        }
        slopes.extend(slope);
    }

    let lin = PiecewiseLinearPath { dim: d, breakpoints: all_points, nodes, slopes };
    Ok((step, lin))
}

/// An evaluated action with its per-segment contributions.
#[derive(Debug, Clone, Serialize)]
pub struct ActionValue {
    pub value: f64,
    pub per_segment: Vec<f64>,
}

impl ActionValue {
    fn from_segments(per_segment: Vec<f64>) -> Self {
        let value = if per_segment.iter().any(|v| v.is_infinite()) {
            f64::INFINITY
        } else {
            per_segment.iter().sum()
        };
        Self { value, per_segment }
    }
}

/// Action of a plain path: per-segment midpoint rule, evaluating `L` at the
/// segment's midpoint value and constant slope. Infinite as soon as any
/// segment slope has infinite local rate.
pub fn action_of_path(path: &Path, rate: &impl RateField) -> Result<ActionValue> {
    let dt = path.dt();
    let d = path.dim;
    let mut per_segment = Vec::with_capacity(path.num_segments());
    for i in 0..path.num_segments() {
        let slope = path.slope(i);
        let mid: Vec<f64> =
            (0..d).map(|k| 0.5 * (path.node(i)[k] + path.node(i + 1)[k])).collect();
        let (l, _) = rate.eval(&mid, &slope)?;
        per_segment.push(dt * l);
    }
    Ok(ActionValue::from_segments(per_segment))
}

/// Action of a `(psi, chi)` discretization pair: the exact sum
/// `sum_k Delta_k L(psi_k, chi'_k)` over the freezing intervals.
pub fn action_of_pair(
    step: &StepPath,
    lin: &PiecewiseLinearPath,
    rate: &impl RateField,
) -> Result<ActionValue> {
    let mut per_segment = Vec::with_capacity(lin.num_intervals());
    for i in 0..lin.num_intervals() {
        let len = lin.breakpoints[i + 1] - lin.breakpoints[i];
        let psi = step.value(lin.breakpoints[i]);
        let (l, _) = rate.eval(&psi, lin.slope_of(i))?;
        per_segment.push(len * l);
    }
    Ok(ActionValue::from_segments(per_segment))
}

/// Tabulated discretization error of the action over a list of block counts.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub reference: f64,
    pub m_list: Vec<usize>,
    pub discrepancies: Vec<f64>,
    /// The discrepancy sequence is nonincreasing from its first element on.
    pub eventually_nonincreasing: bool,
    /// All discrepancies from the first `m` on are below the stated `nu`.
    pub below_nu: bool,
    pub nu: f64,
}

/// Compare `S^psi(chi)(m)` against `S(phi)` over `m_list`.
pub fn action_convergence(
    path: &Path,
    rate: &impl RateField,
    m_list: &[usize],
    a: f64,
    nu: f64,
) -> Result<ConvergenceReport> {
    let reference = action_of_path(path, rate)?.value;
    if !reference.is_finite() {
        return Err(Error::InvalidArgument(
            "action_convergence requires a finite-action path".into(),
        ));
    }
    let mut discrepancies = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let (step, lin) = discretize(path, m, a)?;
        let s_m = action_of_pair(&step, &lin, rate)?.value;
        discrepancies.push((s_m - reference).abs());
    }
    let eventually_nonincreasing =
        discrepancies.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let below_nu = discrepancies.iter().all(|d| *d <= nu);
    Ok(ConvergenceReport {
        reference,
        m_list: m_list.to_vec(),
        discrepancies,
        eventually_nonincreasing,
        below_nu,
        nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::build_surface;
    use crate::model::builtin;
    use crate::rate::{axis_directions, domain_box, RateFunction};
    use approx::assert_abs_diff_eq;

    fn cosine_rate() -> RateFunction {
        let spec = builtin("cosine-ring").unwrap();
        let surface = build_surface(&spec, &[0.0], &[0.0], &[-1.5], &[1.5], 31, 64).unwrap();
        let domain = domain_box(&spec, &[0.0], &axis_directions(1), 128).unwrap();
        RateFunction::spectral(surface, 1.5).with_domain(domain)
    }

    fn constant_rate() -> RateFunction {
        let spec = builtin("constant").unwrap();
        let surface = build_surface(&spec, &[0.0], &[0.0], &[-2.0], &[2.0], 9, 32).unwrap();
        let domain = domain_box(&spec, &[0.0], &axis_directions(1), 64).unwrap();
        RateFunction::spectral(surface, f64::INFINITY).with_domain(domain)
    }

    #[test]
    fn linear_path_chi_equals_phi() {
        let phi = Path::linear(&[0.0], &[1.2], 2.0, 16).unwrap();
        for m in [1, 3, 8] {
            let (step, lin) = discretize(&phi, m, 0.0).unwrap();
            assert!(lin.sup_distance_to(&phi, 200) < 1e-12);
            // psi is piecewise constant at node values
            let delta = 2.0 / m as f64;
            for j in 0..m {
                let s = delta * j as f64 + 0.25 * delta;
                let expect = phi.value_at(delta * j as f64);
                assert_abs_diff_eq!(step.value(s)[0], expect[0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_cell_freezing() {
        let phi = Path::from_fn(1.0, 1, 32, |t| vec![t.sin()]).unwrap();
        let (step, lin) = discretize(&phi, 1, 0.0).unwrap();
        // psi identically phi_0 on [0, T)
        assert_abs_diff_eq!(step.value(0.7)[0], 0.0, epsilon = 1e-12);
        // chi has the single slope phi'(0+)
        assert_eq!(lin.num_intervals(), 1);
        assert_abs_diff_eq!(lin.slope_of(0)[0], phi.slope(0)[0], epsilon = 1e-15);
    }

    #[test]
    fn freezing_error_first_order_in_m() {
        let phi = Path::from_fn(1.0, 1, 256, |t| vec![t.sin()]).unwrap();
        let mut sups = Vec::new();
        for m in [4, 8, 16] {
            let (_, lin) = discretize(&phi, m, 0.0).unwrap();
            sups.push(lin.sup_distance_to(&phi, 512));
        }
        // halving the block size roughly halves the freezing error
        for w in sups.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.5..3.0).contains(&ratio), "ratios {sups:?}");
        }
    }

    #[test]
    fn offset_breakpoints_shift() {
        let phi = Path::from_fn(1.0, 1, 64, |t| vec![t * t]).unwrap();
        let (step, lin) = discretize(&phi, 4, 0.1).unwrap();
        // first breakpoint at delta - a = 0.15, then every 0.25
        assert_abs_diff_eq!(step.breakpoints[1], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(step.breakpoints[2], 0.40, epsilon = 1e-12);
        assert_abs_diff_eq!(*lin.breakpoints.last().unwrap(), 1.0, epsilon = 1e-12);
        // frozen argument on the first interval is phi_0 (negative time clamp)
        assert_abs_diff_eq!(step.value(0.1)[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_path_zero_action() {
        let rate = cosine_rate();
        let phi = Path::linear(&[0.3], &[0.3], 1.0, 8).unwrap();
        let s = action_of_path(&phi, &rate).unwrap();
        assert!(s.value.abs() < 1e-6, "S = {}", s.value);
    }

    #[test]
    fn constant_system_degenerate_domain() {
        let rate = constant_rate();
        let good = Path::linear(&[0.0], &[0.7], 1.0, 4).unwrap();
        assert!(action_of_path(&good, &rate).unwrap().value.abs() < 1e-6);
        let bad = Path::linear(&[0.0], &[0.8], 1.0, 4).unwrap();
        assert!(action_of_path(&bad, &rate).unwrap().value.is_infinite());
    }

    #[test]
    fn single_slope_path_matches_pointwise_rate() {
        let rate = cosine_rate();
        let phi = Path::linear(&[0.0], &[0.5], 1.0, 10).unwrap();
        let s = action_of_path(&phi, &rate).unwrap();
        let l = rate.legendre(&[0.5], 1.5).unwrap().value;
        assert_abs_diff_eq!(s.value, l, epsilon = 1e-6);
    }

    #[test]
    fn additivity_on_grid_aligned_split() {
        let rate = cosine_rate();
        let phi = Path::from_fn(2.0, 1, 16, |t| vec![0.3 * (t * 0.9).sin()]).unwrap();
        let whole = action_of_path(&phi, &rate).unwrap();
        let first = Path::new(1.0, 1, phi.nodes[0..9].to_vec()).unwrap();
        let second = Path::new(1.0, 1, phi.nodes[8..].to_vec()).unwrap();
        let s1 = action_of_path(&first, &rate).unwrap();
        let s2 = action_of_path(&second, &rate).unwrap();
        assert_abs_diff_eq!(whole.value, s1.value + s2.value, epsilon = 1e-12);
    }

    #[test]
    fn per_segment_sums_to_value() {
        let rate = cosine_rate();
        let phi = Path::from_fn(1.0, 1, 12, |t| vec![0.4 * t + 0.1 * t * t]).unwrap();
        let s = action_of_path(&phi, &rate).unwrap();
        assert_abs_diff_eq!(s.value, s.per_segment.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn slope_above_sup_norm_is_infinite() {
        let rate = cosine_rate();
        let phi = Path::linear(&[0.0], &[1.4], 1.0, 4).unwrap(); // slope 1.4 > 1
        let s = action_of_path(&phi, &rate).unwrap();
        assert!(s.value.is_infinite());
    }

    #[test]
    fn convergence_linear_path_exact() {
        let rate = cosine_rate();
        let phi = Path::linear(&[0.0], &[0.4], 1.0, 16).unwrap();
        let rep = action_convergence(&phi, &rate, &[2, 4, 8], 0.0, 1e-9).unwrap();
        for d in &rep.discrepancies {
            assert!(*d < 1e-9, "{:?}", rep.discrepancies);
        }
    }

    #[test]
    fn convergence_smooth_path_monotone() {
        let rate = cosine_rate();
        let phi = Path::from_fn(1.0, 1, 256, |t| vec![0.3 * t.sin()]).unwrap();
        let rep = action_convergence(&phi, &rate, &[8, 16, 32, 64], 0.0, 0.05).unwrap();
        assert!(
            rep.eventually_nonincreasing,
            "discrepancies {:?}",
            rep.discrepancies
        );
        assert!(rep.below_nu);
    }

    #[test]
    fn csv_roundtrip() {
        let phi = Path::from_fn(1.0, 2, 5, |t| vec![t, t * t]).unwrap();
        let mut buf = Vec::new();
        phi.write_csv(&mut buf).unwrap();
        let back = Path::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.dim, 2);
        assert_abs_diff_eq!(back.t_end, 1.0, epsilon = 1e-12);
        for (a, b) in back.nodes.iter().zip(&phi.nodes) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
