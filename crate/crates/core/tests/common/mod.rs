//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

/// Tanh-sinh quadrature on `[a, b]`; tolerates integrable endpoint
/// singularities. `level` controls the step `h = 2^-level`.
pub fn tanh_sinh(f: &dyn Fn(f64) -> f64, a: f64, b: f64, level: u32) -> f64 {
    let h = 0.5f64.powi(level as i32);
    let r = 0.5 * (b - a);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let kmax = (6.5 / h) as i64;
    let mut sum = 0.0;
    for k in -kmax..=kmax {
        let t = k as f64 * h;
        let u = half_pi * t.sinh();
        let ch = u.cosh();
        let w = half_pi * t.cosh() / (ch * ch);
        // distance to the nearer endpoint, free of cancellation
        let d = r * 2.0 / ((2.0 * u.abs()).exp() + 1.0);
        let x = if t >= 0.0 { b - d } else { a + d };
        if d <= 0.0 || x <= a || x >= b {
            continue;
        }
        let v = w * f(x);
        // points within underflow of a singular endpoint carry no mass
        if v.is_finite() {
            sum += v;
        }
    }
    sum * r * h
}

/// Nested tanh-sinh over the unit square.
pub fn tanh_sinh_2d(f: &dyn Fn(f64, f64) -> f64, level: u32) -> f64 {
    tanh_sinh(&|s| tanh_sinh(&|t| f(s, t), 0.0, 1.0, level), 0.0, 1.0, level)
}

/// Direct sum `Σ_i w_i x_i` helpers and norms.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Least-squares slope of `ln e` against `ln h`.
pub fn loglog_slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
