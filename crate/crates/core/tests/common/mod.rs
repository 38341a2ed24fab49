#![allow(dead_code)]

use ctident::{Polynomial, TransferFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn white(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Stable system of order 1..=max_order with real or complex poles, `A(0) = 1`.
pub fn random_system(seed: u64, max_order: usize, strictly_proper: bool) -> TransferFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_order);
    let m = if strictly_proper {
        rng.random_range(0..n)
    } else {
        rng.random_range(0..=n)
    };
    loop {
        let mut den = Polynomial::one();
        let mut k = 0;
        while k < n {
            if n - k >= 2 && rng.random_bool(0.5) {
                let re = -rng.random_range(0.3..5.0);
                let im = rng.random_range(0.5..12.0);
                den = &den * &Polynomial::new(vec![re * re + im * im, -2.0 * re, 1.0]);
                k += 2;
            } else {
                den = &den * &Polynomial::new(vec![rng.random_range(0.3..20.0), 1.0]);
                k += 1;
            }
        }
        let num: Polynomial =
            Polynomial::new((0..=m).map(|_| rng.random_range(-2.0..2.0)).collect());
        if num.coeff(m).abs() < 0.1 {
            continue;
        }
        if let Ok(g) = TransferFunction::normalized(num, den) {
            return g;
        }
    }
}

/// Fixed-step RK4 on the observable companion form with `steps` substeps per sample.
pub fn rk4_oracle(g: &TransferFunction, u: &[f64], h: f64, steps: usize, foh: bool) -> Vec<f64> {
    let den = g.den().coeffs();
    let n = den.len() - 1;
    let an = den[n];
    let alpha: Vec<f64> = den[..n].iter().map(|c| c / an).collect();
    let beta: Vec<f64> = (0..=n).map(|k| g.num().coeff(k) / an).collect();
    let d = beta[n];
    let f = |x: &[f64], v: f64| -> Vec<f64> {
        let y0 = x[0];
        (0..n)
            .map(|i| {
                let next = if i + 1 < n { x[i + 1] } else { 0.0 };
                let k = n - 1 - i;
                next - alpha[k] * y0 + (beta[k] - d * alpha[k]) * v
            })
            .collect()
    };
    let dt = h / steps as f64;
    let mut x = vec![0.0; n];
    let mut y = Vec::with_capacity(u.len());
    for k in 0..u.len() {
        y.push(x[0] + d * u[k]);
        let next = if foh && k + 1 < u.len() {
            u[k + 1]
        } else {
            u[k]
        };
        let input = |s: f64| u[k] + (next - u[k]) * s / h;
        for j in 0..steps {
            let s = j as f64 * dt;
            let k1 = f(&x, input(s));
            let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = f(&x2, input(s + 0.5 * dt));
            let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k3 = f(&x3, input(s + 0.5 * dt));
            let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
            let k4 = f(&x4, input(s + dt));
            for i in 0..n {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    y
}

pub fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    max_abs(a.iter().zip(b).map(|(x, y)| x - y)) / max_abs(b.iter().copied()).max(1e-300)
}
