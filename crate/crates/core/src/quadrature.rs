//! Quadrature rules: Gauss–Legendre nodes for smooth convolutions and
//! trapezoid rules with Richardson extrapolation for density integrals.

use serde::{Deserialize, Serialize};

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Result of an extrapolated trapezoid integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    /// Value at the previous refinement level.
    pub previous: f64,
    /// `2^level` intervals per axis at the final level.
    pub level: u32,
}

impl Integral {
    pub fn relative_change(&self) -> f64 {
        (self.value - self.previous).abs() / self.value.abs().max(f64::MIN_POSITIVE)
    }
}

/// Romberg integration of `f` on `[a, b]`: trapezoid sums with interval
/// halving and Richardson extrapolation, refined until two successive
/// diagonal entries agree to `rel_tol` or `max_level` is reached.
pub fn romberg<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, max_level: u32) -> Integral {
    let h0 = b - a;
    let mut row = vec![0.5 * h0 * (f(a) + f(b))];
    let mut previous = row[0];
    for level in 1..=max_level {
        let n_new = 1usize << (level - 1);
        let h = h0 / (1usize << level) as f64;
        let mid: f64 = (0..n_new).map(|i| f(a + (2 * i + 1) as f64 * h)).sum();
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(0.5 * row[0] + h * mid);
        let mut pow4 = 1.0;
        for j in 1..=row.len() {
            pow4 *= 4.0;
            let r = next[j - 1] + (next[j - 1] - row[j - 1]) / (pow4 - 1.0);
            next.push(r);
        }
        let best = *next.last().unwrap();
        let prev_best = *row.last().unwrap();
        row = next;
        previous = prev_best;
        if level >= 4 && (best - prev_best).abs() <= rel_tol * best.abs().max(1e-300) {
            return Integral {
                value: best,
                previous,
                level,
            };
        }
    }
    Integral {
        value: *row.last().unwrap(),
        previous,
        level: max_level,
    }
}

/// Tensor trapezoid rule on a box with `2^level` intervals per axis.
fn tensor_trapezoid<F: Fn(&[f64]) -> f64>(f: &F, lo: &[f64], hi: &[f64], level: u32) -> f64 {
    let d = lo.len();
    let n = 1usize << level;
    let h: Vec<f64> = lo.iter().zip(hi).map(|(l, u)| (u - l) / n as f64).collect();
    let total = (n + 1).pow(d as u32);
    let mut point = vec![0.0; d];
    let mut sum = 0.0;
    for flat in 0..total {
        let mut rem = flat;
        let mut w = 1.0;
        for j in 0..d {
            let i = rem % (n + 1);
            rem /= n + 1;
            point[j] = lo[j] + h[j] * i as f64;
            if i == 0 || i == n {
                w *= 0.5;
            }
        }
        sum += w * f(&point);
    }
    sum * h.iter().product::<f64>()
}

/// Box integral by tensor trapezoid rules at levels `level - 1` and `level`
/// combined with one Richardson step. `previous` holds the same estimate one
/// level coarser.
pub fn integrate_box<F: Fn(&[f64]) -> f64>(f: F, lo: &[f64], hi: &[f64], level: u32) -> Integral {
    assert!(level >= 2, "need at least two refinement levels");
    let t = [level - 2, level - 1, level].map(|l| tensor_trapezoid(&f, lo, hi, l));
    let coarse = t[1] + (t[1] - t[0]) / 3.0;
    let fine = t[2] + (t[2] - t[1]) / 3.0;
    Integral {
        value: fine,
        previous: coarse,
        level,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-12, "n={n} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn romberg_gaussian_integral() {
        let r = romberg(|x: f64| (-x * x).exp(), -8.0, 8.0, 1e-12, 20);
        assert!((r.value - std::f64::consts::PI.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn box_integral_of_product() {
        let r = integrate_box(|p| p[0] * p[0] * p[1].exp(), &[0.0, 0.0], &[1.0, 1.0], 7);
        let exact = (1.0 / 3.0) * (std::f64::consts::E - 1.0);
        assert!((r.value - exact).abs() < 1e-8);
        assert!(r.relative_change() < 1e-6);
    }
}
