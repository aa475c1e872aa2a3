//! Cross-module consistency checks against independent oracles.
//!
//! The zero-rate drift of a one-dimensional frozen process has a closed
//! quadrature form (the stationary density of a diffusion on the circle is
//! explicit up to one flux constant), which makes a three-way comparison
//! possible: quadrature vs. the spectral gradient at beta = 0 vs. the Monte
//! Carlo time average. Neither numerical route shares code with the
//! quadrature oracle below.

use sfldp_core::action::{action_of_path, Path};
use sfldp_core::fastsim::invariant_average_f;
use sfldp_core::hamiltonian::{build_surface, grad_h, h_spectral, route_agreement};
use sfldp_core::minpath::SpectralRateField;
use sfldp_core::model::{builtin, SystemSpec};
use sfldp_core::rate::{axis_directions, domain_box, RateFunction, SpectralResolver};

/// Stationary mean of `g` for `dy = b(y) dt + c(y) dW` on `[0, period)`.
///
/// With `u = a rho` (`a = c^2`) the stationary Fokker-Planck equation reads
/// `u' - (2b/a) u = 2J` with a constant flux `J` fixed by periodicity:
/// `u(y) = e^{G(y)} (u0 + 2J int_0^y e^{-G})`, `G = int_0^y 2b/a`, and
/// `J = u0 (e^{-G(P)} - 1) / (2 int_0^P e^{-G})`. Trapezoid quadrature
/// throughout.
fn stationary_mean(
    b: impl Fn(f64) -> f64,
    a: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    period: f64,
    n: usize,
) -> f64 {
    let h = period / n as f64;
    let ys: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let drift_term: Vec<f64> = ys.iter().map(|&y| 2.0 * b(y) / a(y)).collect();
    let mut big_g = vec![0.0; n + 1];
    for i in 0..n {
        big_g[i + 1] = big_g[i] + 0.5 * h * (drift_term[i] + drift_term[i + 1]);
    }
    let exp_neg: Vec<f64> = big_g.iter().map(|v| (-v).exp()).collect();
    let mut int_exp_neg = 0.0;
    for i in 0..n {
        int_exp_neg += 0.5 * h * (exp_neg[i] + exp_neg[i + 1]);
    }
    let u0 = 1.0;
    let flux = u0 * ((-big_g[n]).exp() - 1.0) / (2.0 * int_exp_neg);
    let mut cum = 0.0;
    let mut rho = vec![0.0; n + 1];
    for i in 0..=n {
        if i > 0 {
            cum += 0.5 * h * (exp_neg[i - 1] + exp_neg[i]);
        }
        let u = big_g[i].exp() * (u0 + 2.0 * flux * cum);
        rho[i] = u / a(ys[i]);
    }
    let mut mass = 0.0;
    let mut mean = 0.0;
    for i in 0..n {
        mass += 0.5 * h * (rho[i] + rho[i + 1]);
        mean += 0.5 * h * (rho[i] * g(ys[i]) + rho[i + 1] * g(ys[i + 1]));
    }
    mean / mass
}

/// Modified Bessel function of the first kind by its power series.
fn bessel_i(order: u32, x: f64) -> f64 {
    let mut sum = 0.0;
    let half = x / 2.0;
    for k in 0..40u32 {
        let mut term = half.powi((2 * k + order) as i32);
        for j in 1..=k {
            term /= j as f64;
        }
        for j in 1..=(k + order) {
            term /= j as f64;
        }
        sum += term;
    }
    sum
}

fn full_dep_frozen_coeffs(x: f64) -> (impl Fn(f64) -> f64, impl Fn(f64) -> f64) {
    let b = move |y: f64| 0.3 * (x - y).sin();
    let a = move |y: f64| 1.0 + 0.5 * x.sin() * y.cos();
    (b, a)
}

#[test]
fn zero_rate_drift_three_routes_full_dep_x0() {
    // At x = 0 the frozen diffusion has unit a and drift -0.3 sin(y), so the
    // stationary law is von Mises and the mean of cos is I1(0.6)/I0(0.6).
    let closed_form = bessel_i(1, 0.6) / bessel_i(0, 0.6);
    let (b, a) = full_dep_frozen_coeffs(0.0);
    let quadrature = stationary_mean(b, a, |y| y.cos(), std::f64::consts::TAU, 20_000);
    assert!(
        (quadrature - closed_form).abs() < 1e-8,
        "quadrature {quadrature} vs closed form {closed_form}"
    );

    let spec = builtin("full-dep").unwrap();
    let spectral = grad_h(&spec, &[0.0], &[0.0], &[0.0], 256, 0.02).unwrap()[0];
    assert!(
        (spectral - quadrature).abs() < 1e-4,
        "spectral {spectral} vs quadrature {quadrature}"
    );

    let mc = invariant_average_f(&spec, &[0.0], 10_000.0, 1e-3, 1).unwrap()[0];
    assert!((mc - quadrature).abs() < 0.05, "mc {mc} vs quadrature {quadrature}");
}

#[test]
fn zero_rate_drift_three_routes_full_dep_x05() {
    // At x = 0.5 both drift and diffusion vary in y and the stationary
    // density needs the constant-flux correction.
    let (b, a) = full_dep_frozen_coeffs(0.5);
    let quadrature = stationary_mean(b, a, |y| y.cos(), std::f64::consts::TAU, 20_000);

    let spec = builtin("full-dep").unwrap();
    let spectral = grad_h(&spec, &[0.5], &[0.5], &[0.0], 256, 0.02).unwrap()[0];
    assert!(
        (spectral - quadrature).abs() < 1e-4,
        "spectral {spectral} vs quadrature {quadrature}"
    );

    let mc = invariant_average_f(&spec, &[0.5], 10_000.0, 1e-3, 1).unwrap()[0];
    assert!((mc - quadrature).abs() < 0.05, "mc {mc} vs quadrature {quadrature}");

    // the rate-function route: averaged_drift of a surface at x = 0.5
    let surface = build_surface(&spec, &[0.5], &[0.5], &[-0.5], &[0.5], 11, 128).unwrap();
    let rate = RateFunction::spectral(surface, 0.5);
    let drift = rate.averaged_drift().unwrap()[0];
    assert!((drift - quadrature).abs() < 1e-3, "drift {drift} vs quadrature {quadrature}");
}

#[test]
fn fenchel_involution_recovers_hamiltonian() {
    // sup_alpha (alpha beta - L(alpha)) must reproduce H(beta) on the
    // tabulation range; L is evaluated on a dense alpha grid.
    let spec = builtin("cosine-ring").unwrap();
    let surface = build_surface(&spec, &[0.0], &[0.0], &[-1.0], &[1.0], 41, 256).unwrap();
    let domain = domain_box(&spec, &[0.0], &axis_directions(1), 256).unwrap();
    let rate = RateFunction::spectral(surface, f64::INFINITY).with_domain(domain);

    let n_alpha = 181;
    let mut l_values = Vec::with_capacity(n_alpha);
    let mut alphas = Vec::with_capacity(n_alpha);
    for i in 0..n_alpha {
        let alpha = -0.9 + 1.8 * i as f64 / (n_alpha - 1) as f64;
        alphas.push(alpha);
        l_values.push(rate.legendre(&[alpha], f64::INFINITY).unwrap().value);
    }

    for ib in 0..21 {
        let beta = -0.5 + ib as f64 / 20.0;
        let recovered = alphas
            .iter()
            .zip(&l_values)
            .filter(|(_, l)| l.is_finite())
            .map(|(a, l)| a * beta - l)
            .fold(f64::NEG_INFINITY, f64::max);
        let direct = h_spectral(&spec, &[0.0], &[0.0], &[beta], 256).unwrap().eigenvalue;
        assert!(
            (recovered - direct).abs() < 2e-3,
            "beta {beta}: involution {recovered} vs direct {direct}"
        );
    }
}

#[test]
fn domain_box_gates_infinite_rate() {
    // Appendix-style domain characterization: for cosine-ring the slow drift
    // ranges over [-1, 1], so L(alpha) is finite strictly inside and +inf
    // outside. The independent oracle is a truncation sweep: L^b grows
    // without bound in b outside the box and stabilizes inside it.
    let spec = builtin("cosine-ring").unwrap();
    let surface = build_surface(&spec, &[0.0], &[0.0], &[-24.0], &[24.0], 49, 128).unwrap();
    let domain = domain_box(&spec, &[0.0], &axis_directions(1), 256).unwrap();
    let rate = RateFunction::spectral(surface.clone(), f64::INFINITY)
        .with_domain(domain)
        .with_resolver(SpectralResolver::new(spec.clone(), vec![0.0], vec![0.0], 128));

    for alpha in [1.2, -1.2] {
        let r = rate.legendre(&[alpha], f64::INFINITY).unwrap();
        assert!(r.value.is_infinite(), "L({alpha}) = {}", r.value);
    }
    for alpha in [0.9, -0.9] {
        let r = rate.legendre(&[alpha], f64::INFINITY).unwrap();
        assert!(r.value.is_finite(), "L({alpha}) = {}", r.value);
        assert!(r.value > 0.0);
    }

    // truncation sweep oracle on the raw surface (no domain box attached)
    let naked = RateFunction::spectral(surface, f64::INFINITY);
    let sweep = |alpha: f64| -> Vec<f64> {
        [6.0, 12.0, 24.0]
            .iter()
            .map(|&b| naked.legendre(&[alpha], b).unwrap().value)
            .collect()
    };
    let outside = sweep(1.2);
    let inc1 = outside[1] - outside[0];
    let inc2 = outside[2] - outside[1];
    assert!(
        inc1 > 0.5 && inc2 > 0.5,
        "L^b should diverge linearly outside the box: {outside:?}"
    );
    let inside = sweep(0.9);
    assert!(
        (inside[2] - inside[1]).abs() < 1e-4,
        "L^b should stabilize inside the box: {inside:?}"
    );
}

#[test]
fn averaged_flow_carries_zero_action_full_dep() {
    // integrate the averaged dynamics dx/dt = grad_beta H(x, 0) with RK4 and
    // verify the action of the resulting path vanishes
    let spec = builtin("full-dep").unwrap();
    let drift_of = |x: f64| grad_h(&spec, &[x], &[x], &[0.0], 96, 0.02).unwrap()[0];

    let t_end = 0.5;
    let m = 16;
    let dt = t_end / m as f64;
    let mut nodes = vec![0.0; m + 1];
    for i in 0..m {
        let x = nodes[i];
        let k1 = drift_of(x);
        let k2 = drift_of(x + 0.5 * dt * k1);
        let k3 = drift_of(x + 0.5 * dt * k2);
        let k4 = drift_of(x + dt * k3);
        nodes[i + 1] = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let phi = Path::new(t_end, 1, nodes).unwrap();

    let field = SpectralRateField::new(spec, 0.4, 9, 96, 0.4);
    let action = action_of_path(&phi, &field).unwrap();
    assert!(action.value >= 0.0);
    assert!(action.value <= 1e-4, "S(averaged flow) = {}", action.value);
}

#[test]
fn lemma3_route_agreement_and_self_calibrated_bound() {
    // |h_montecarlo(t) - h_spectral| should drop like C/t; C is fit from the
    // first horizon and the second is tested against 5 C / t.
    let spec = builtin("cosine-ring").unwrap();
    let report = route_agreement(
        &spec,
        &[0.0],
        &[0.0],
        &[0.3],
        5.0,
        20.0,
        0.01,
        4000,
        256,
        1,
    )
    .unwrap();
    assert!(
        report.err_t2 < report.err_t1,
        "route error did not decrease: {report:?}"
    );
    assert!(report.within_bound, "{report:?}");
}

#[test]
fn truncated_legendre_matches_analytic_on_spectral_surface() {
    // for the constant system H = 0.7 beta exactly, so L^b has the closed
    // form b |0.7 - alpha| ... truncated at the ball edge
    let spec: SystemSpec = builtin("constant").unwrap();
    let surface = build_surface(&spec, &[0.0], &[0.0], &[-2.0], &[2.0], 17, 32).unwrap();
    let rate = RateFunction::spectral(surface, f64::INFINITY);
    for (alpha, b, expect) in [
        (0.9f64, 1.0f64, 0.2f64), // sup_{|b|<=1} (0.9 - 0.7) b = 0.2
        (0.3, 2.0, 0.8),          // (0.3 - 0.7) * (-2)
        (0.7, 1.5, 0.0),
    ] {
        let r = rate.legendre(&[alpha], b).unwrap();
        assert!(
            (r.value - expect).abs() < 1e-7,
            "alpha {alpha}, b {b}: {} vs {expect}",
            r.value
        );
    }
}
