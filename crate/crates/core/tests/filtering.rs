mod common;

use common::{max_abs, random_system, rel_error, rk4_oracle, white};
use ctident::ltisim::{derivative_filter_bank, filter_signal, h2_norm};
use ctident::{Intersample, TransferFunction};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn seeded(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0xf117),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// `(1/π) ∫_0^∞ |G(iω)|² dω` by composite Simpson in `log ω`, with the flat low-frequency
/// piece and the `ω^{-2r}` high-frequency tail (relative degree `r`) added in closed form.
fn h2_quadrature(g: &TransferFunction) -> f64 {
    let (lo, hi, n) = (-14.0f64, 12.0f64, 400_000usize);
    let ds = (hi - lo) / n as f64;
    let f = |s: f64| {
        let w = s.exp();
        g.freq_response(w).norm_sqr() * w
    };
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        let weight = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * f(lo + k as f64 * ds);
    }
    let r = (g.den().degree() - g.num().degree()) as f64;
    let (w_lo, w_hi) = (lo.exp(), hi.exp());
    let tails = g.freq_response(w_lo).norm_sqr() * w_lo
        + g.freq_response(w_hi).norm_sqr() * w_hi / (2.0 * r - 1.0);
    ((acc * ds / 3.0 + tails) / std::f64::consts::PI).sqrt()
}

proptest! {
    #![proptest_config(seeded(20))]

    #[test]
    fn zoh_filter_matches_oversampled_integration(seed in any::<u64>()) {
        let g = random_system(seed, 4, false);
        let u = white(seed ^ 1, 500);
        let y = filter_signal(&g, &u, 0.02, Intersample::Zoh).unwrap();
        let oracle = rk4_oracle(&g, &u, 0.02, 100, false);
        prop_assert!(rel_error(&y, &oracle) < 1e-6, "{:?}", g);
    }

    #[test]
    fn foh_filter_matches_oversampled_integration(seed in any::<u64>()) {
        let g = random_system(seed, 4, false);
        let u = white(seed ^ 2, 500);
        let y = filter_signal(&g, &u, 0.02, Intersample::Foh).unwrap();
        let oracle = rk4_oracle(&g, &u, 0.02, 100, true);
        prop_assert!(rel_error(&y, &oracle) < 1e-6, "{:?}", g);
    }

    #[test]
    fn filtering_is_linear(seed in any::<u64>(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
        let g = random_system(seed, 4, false);
        let u1 = white(seed ^ 3, 800);
        let u2 = white(seed ^ 4, 800);
        let mix: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + beta * b).collect();
        for is in [Intersample::Zoh, Intersample::Foh] {
            let y1 = filter_signal(&g, &u1, 0.02, is).unwrap();
            let y2 = filter_signal(&g, &u2, 0.02, is).unwrap();
            let y = filter_signal(&g, &mix, 0.02, is).unwrap();
            let expect: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| alpha * a + beta * b).collect();
            let scale = max_abs(expect.iter().copied()).max(1.0);
            prop_assert!(max_abs(y.iter().zip(&expect).map(|(a, b)| a - b)) < 1e-12 * scale);
        }
    }

    #[test]
    fn filter_bank_recombines_to_the_input(seed in any::<u64>()) {
        let g = random_system(seed, 5, false);
        let a = g.den();
        let u = white(seed ^ 5, 2000);
        let bank = derivative_filter_bank(a, a.degree(), &u, 0.02, Intersample::Zoh).unwrap();
        let dev = (200..u.len())
            .map(|t| (0..=a.degree()).map(|k| a.coeff(k) * bank[(t, k)]).sum::<f64>() - u[t]);
        prop_assert!(max_abs(dev) < 1e-8);
    }

    #[test]
    fn h2_norm_matches_frequency_quadrature(seed in any::<u64>()) {
        let g = random_system(seed, 4, true);
        let exact = h2_norm(&g).unwrap();
        let quad = h2_quadrature(&g);
        prop_assert!((exact - quad).abs() <= 1e-4 * quad, "{} vs {} for {:?}", exact, quad, g);
    }
}

#[test]
fn zoh_is_exact_for_the_resonant_system() {
    let g = TransferFunction::from_descending(&[1.0], &[0.025, 0.01, 1.0]).unwrap();
    let u = white(9, 3000);
    let y = filter_signal(&g, &u, 0.02, Intersample::Zoh).unwrap();
    let oracle = rk4_oracle(&g, &u, 0.02, 200, false);
    assert!(rel_error(&y, &oracle) < 1e-6);
}
