//! Gauss–Legendre quadrature.
//!
//! Nodes and weights are generated at first use by Newton iteration on the
//! Legendre polynomials, so no tabulated constants are carried around. The
//! adaptive routine bisects until the 8-node rule is self-consistent.

use std::sync::OnceLock;

/// Nodes and weights of the n-point Gauss–Legendre rule on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial `P_n` at `x`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn gl8() -> &'static (Vec<f64>, Vec<f64>) {
    static GL8: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL8.get_or_init(|| gauss_legendre(8))
}

/// 8-node Gauss–Legendre approximation of the integral of `f` over `[a, b]`.
pub fn gl8_integral(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gl8();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        acc += w * f(c + h * x);
    }
    acc * h
}

/// Adaptive bisection on the 8-node rule until `|I(whole) - I(halves)|` meets
/// the tolerance.
pub fn adaptive_integral(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = gl8_integral(f, a, m);
        let right = gl8_integral(f, m, b);
        let err = (left + right - whole).abs();
        if err <= tol || depth >= 40 {
            return left + right;
        }
        recurse(f, a, m, left, 0.5 * tol, depth + 1)
            + recurse(f, m, b, right, 0.5 * tol, depth + 1)
    }
    if a >= b {
        return 0.0;
    }
    recurse(f, a, b, gl8_integral(f, a, b), tol, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nodes_integrate_polynomials_exactly() {
        // Degree-15 polynomial is exact for the 8-node rule.
        let f = |x: f64| x.powi(15) + 3.0 * x.powi(8) - x.powi(3) + 2.0;
        let got = gl8_integral(&f, 0.0, 1.0);
        let exact = 1.0 / 16.0 + 3.0 / 9.0 - 0.25 + 2.0;
        assert_abs_diff_eq!(got, exact, epsilon = 1e-13);
    }

    #[test]
    fn adaptive_handles_sharp_integrands() {
        let f = |x: f64| (-1.0 / x).exp();
        let got = adaptive_integral(&f, 0.0, 1.0, 1e-13);
        // Independent fine composite Simpson check.
        let n = 1 << 20;
        let h = 1.0 / n as f64;
        let mut simpson = 0.0;
        for i in 0..n {
            let a = i as f64 * h;
            let fa = if a == 0.0 { 0.0 } else { f(a) };
            simpson += h / 6.0 * (fa + 4.0 * f(a + 0.5 * h) + f(a + h));
        }
        assert_abs_diff_eq!(got, simpson, epsilon = 1e-10);
    }
}
