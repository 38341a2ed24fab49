//! Sampled simulation of continuous-time transfer functions.
//!
//! Every filter is realized in controllable canonical form and discretized exactly
//! for the chosen intersample behavior, with zero initial conditions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IdentError, Result};
use crate::poly::{Polynomial, TransferFunction};
use crate::scalar::Scalar;

/// Intersample behavior assumed for a sampled signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intersample {
    /// Piecewise constant between samples.
    #[default]
    Zoh,
    /// Piecewise linear between samples (non-causal triangle hold).
    Foh,
}

/// Continuous-time realization `x' = A x + B u`, `y = C x + D u` with one input and
/// possibly several outputs sharing the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace<T: Scalar = f64> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub c: DMatrix<T>,
    pub d: DVector<T>,
}

impl<T: Scalar> StateSpace<T> {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Controllable canonical realization of `num_k(p) / den(p)` for every numerator.
    ///
    /// The state is `[w, p w, ..., p^{n-1} w]` with `w = u / den_monic(p)`.
    pub fn from_numerators(den: &Polynomial<T>, numerators: &[Polynomial<T>]) -> Result<Self> {
        let n = den.degree();
        let lead = den.leading();
        if lead == T::zero() {
            return Err(IdentError::InvalidInput("zero denominator".into()));
        }
        let alpha: Vec<T> = (0..n).map(|k| den.coeff(k) / lead).collect();
        let mut a = DMatrix::<T>::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            a[(i, i + 1)] = T::one();
        }
        if n > 0 {
            for k in 0..n {
                a[(n - 1, k)] = -alpha[k];
            }
        }
        let mut b = DVector::<T>::zeros(n);
        if n > 0 {
            b[n - 1] = T::one();
        }
        let mut c = DMatrix::<T>::zeros(numerators.len(), n);
        let mut d = DVector::<T>::zeros(numerators.len());
        for (row, num) in numerators.iter().enumerate() {
            if !num.is_zero() && num.degree() > n {
                return Err(IdentError::Improper {
                    num: num.degree(),
                    den: n,
                });
            }
            let b_n = num.coeff(n);
            for k in 0..n {
                c[(row, k)] = (num.coeff(k) - b_n * alpha[k]) / lead;
            }
            d[row] = b_n / lead;
        }
        Ok(Self { a, b, c, d })
    }

    pub fn from_transfer_function(tf: &TransferFunction<T>) -> Result<Self> {
        Self::from_numerators(tf.den(), std::slice::from_ref(tf.num()))
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .a
            .iter()
            .chain(self.b.iter())
            .chain(self.c.iter())
            .chain(self.d.iter())
            .all(|v| v.is_finite_value());
        if finite {
            Ok(())
        } else {
            Err(IdentError::NonFinite("state-space matrices".into()))
        }
    }
}

/// Discrete-time recursion `x[k+1] = Ad x[k] + B0 u[k] + B1 u[k+1]`, `y[k] = C x[k] + D u[k]`.
///
/// ZOH has `B1 = 0`; FOH uses both terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace<T: Scalar = f64> {
    pub ad: DMatrix<T>,
    pub b_current: DVector<T>,
    pub b_next: DVector<T>,
    pub c: DMatrix<T>,
    pub d: DVector<T>,
}

fn check_period<T: Scalar>(h: T) -> Result<()> {
    if !(h > T::zero()) || !h.is_finite_value() {
        return Err(IdentError::InvalidInput(format!(
            "sampling period must be positive, got {}",
            h
        )));
    }
    Ok(())
}

/// Exact ZOH equivalent via the exponential of `[[A, B], [0, 0]] h`.
pub fn zoh_discretize<T: Scalar>(ss: &StateSpace<T>, h: T) -> Result<DiscreteStateSpace<T>> {
    check_period(h)?;
    ss.check_finite()?;
    let n = ss.dim();
    let mut m = DMatrix::<T>::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&(&ss.a * h));
    m.view_mut((0, n), (n, 1)).copy_from(&(&ss.b * h));
    let e = m.exp();
    let out = DiscreteStateSpace {
        ad: e.view((0, 0), (n, n)).into_owned(),
        b_current: e.view((0, n), (n, 1)).column(0).into_owned(),
        b_next: DVector::zeros(n),
        c: ss.c.clone(),
        d: ss.d.clone(),
    };
    out.check_finite()?;
    Ok(out)
}

/// Triangle-hold equivalent via the exponential of `[[A, B, 0], [0, 0, 1], [0, 0, 0]] h`.
pub fn foh_discretize<T: Scalar>(ss: &StateSpace<T>, h: T) -> Result<DiscreteStateSpace<T>> {
    check_period(h)?;
    ss.check_finite()?;
    let n = ss.dim();
    let mut m = DMatrix::<T>::zeros(n + 2, n + 2);
    m.view_mut((0, 0), (n, n)).copy_from(&(&ss.a * h));
    m.view_mut((0, n), (n, 1)).copy_from(&(&ss.b * h));
    m[(n, n + 1)] = h;
    let e = m.exp();
    let gamma0: DVector<T> = e.view((0, n), (n, 1)).column(0).into_owned();
    // ∫_0^h e^{Aσ}(h-σ) dσ B, divided by h for the slope term
    let gamma1: DVector<T> = e.view((0, n + 1), (n, 1)).column(0).into_owned() / h;
    let out = DiscreteStateSpace {
        ad: e.view((0, 0), (n, n)).into_owned(),
        b_current: &gamma0 - &gamma1,
        b_next: gamma1,
        c: ss.c.clone(),
        d: ss.d.clone(),
    };
    out.check_finite()?;
    Ok(out)
}

pub fn discretize<T: Scalar>(
    ss: &StateSpace<T>,
    h: T,
    intersample: Intersample,
) -> Result<DiscreteStateSpace<T>> {
    match intersample {
        Intersample::Zoh => zoh_discretize(ss, h),
        Intersample::Foh => foh_discretize(ss, h),
    }
}

impl<T: Scalar> DiscreteStateSpace<T> {
    fn check_finite(&self) -> Result<()> {
        let ok = self
            .ad
            .iter()
            .chain(self.b_current.iter())
            .chain(self.b_next.iter())
            .all(|v| v.is_finite_value());
        if ok {
            Ok(())
        } else {
            Err(IdentError::NonFinite("matrix exponential".into()))
        }
    }

    /// Runs the recursion from zero state; column `o` of the result is output `o`.
    pub fn simulate(&self, u: &[T]) -> DMatrix<T> {
        let n = self.ad.nrows();
        let outs = self.c.nrows();
        let len = u.len();
        let mut y = DMatrix::<T>::zeros(len, outs);
        // row-major copies keep the inner loop on contiguous memory
        let ad: Vec<T> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| self.ad[(i, j)])
            .collect();
        let cm: Vec<T> = (0..outs)
            .flat_map(|o| (0..n).map(move |j| (o, j)))
            .map(|(o, j)| self.c[(o, j)])
            .collect();
        let b0 = self.b_current.as_slice();
        let b1 = self.b_next.as_slice();
        let has_next = b1.iter().any(|&v| v != T::zero());
        let mut x = vec![T::zero(); n];
        let mut xn = vec![T::zero(); n];
        let ys = y.as_mut_slice();
        for k in 0..len {
            let uk = u[k];
            for o in 0..outs {
                let row = &cm[o * n..(o + 1) * n];
                let mut acc = self.d[o] * uk;
                for j in 0..n {
                    acc += row[j] * x[j];
                }
                ys[o * len + k] = acc;
            }
            if n == 0 {
                continue;
            }
            let u_next = if has_next && k + 1 < len {
                u[k + 1]
            } else {
                uk
            };
            for i in 0..n {
                let row = &ad[i * n..(i + 1) * n];
                let mut acc = b0[i] * uk;
                if has_next {
                    acc += b1[i] * u_next;
                }
                for j in 0..n {
                    acc += row[j] * x[j];
                }
                xn[i] = acc;
            }
            std::mem::swap(&mut x, &mut xn);
        }
        y
    }
}

/// Filters `u` through several numerators over one shared denominator in a single simulation.
pub fn filter_bank<T: Scalar>(
    den: &Polynomial<T>,
    numerators: &[Polynomial<T>],
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    let ss = StateSpace::from_numerators(den, numerators)?;
    Ok(discretize(&ss, h, intersample)?.simulate(u))
}

/// `G(p) u` at the sample instants with zero initial conditions.
pub fn filter_signal<T: Scalar>(
    tf: &TransferFunction<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<Vec<T>> {
    if !tf.is_proper() {
        return Err(IdentError::Improper {
            num: tf.num().degree(),
            den: tf.den().degree(),
        });
    }
    if tf.num().is_zero() {
        return Ok(vec![T::zero(); u.len()]);
    }
    let y = filter_bank(tf.den(), std::slice::from_ref(tf.num()), u, h, intersample)?;
    Ok(y.as_slice().to_vec())
}

/// Columns `k = 0..=max_order` hold `(p^k / A(p)) u`.
pub fn derivative_filter_bank<T: Scalar>(
    a: &Polynomial<T>,
    max_order: usize,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    if max_order > a.degree() {
        return Err(IdentError::Improper {
            num: max_order,
            den: a.degree(),
        });
    }
    let nums: Vec<Polynomial<T>> = (0..=max_order)
        .map(|k| Polynomial::monomial(T::one(), k))
        .collect();
    filter_bank(a, &nums, u, h, intersample)
}

/// Sampled inputs and output on a uniform grid `t_k = k h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord<T: Scalar = f64> {
    pub h: T,
    pub inputs: Vec<Vec<T>>,
    pub output: Vec<T>,
    pub intersample: Intersample,
}

impl<T: Scalar> DataRecord<T> {
    pub fn new(
        h: T,
        inputs: Vec<Vec<T>>,
        output: Vec<T>,
        intersample: Intersample,
    ) -> Result<Self> {
        let rec = Self {
            h,
            inputs,
            output,
            intersample,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        check_period(self.h)?;
        let n = self.output.len();
        if n == 0 {
            return Err(IdentError::InvalidInput(
                "data record has no samples".into(),
            ));
        }
        if self.inputs.is_empty() {
            return Err(IdentError::InvalidInput(
                "data record has no input channels".into(),
            ));
        }
        if let Some((i, u)) = self.inputs.iter().enumerate().find(|(_, u)| u.len() != n) {
            return Err(IdentError::InvalidInput(format!(
                "input {} has {} samples, output has {}",
                i + 1,
                u.len(),
                n
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len()).map(|k| T::lit(k as f64) * self.h).collect()
    }
}

/// White Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(variance: f64, seed: u64) -> Result<Self> {
        if !variance.is_finite() || variance < 0.0 {
            return Err(IdentError::InvalidInput(format!(
                "noise variance must be finite and non-negative, got {}",
                variance
            )));
        }
        Ok(Self { variance, seed })
    }

    pub fn sample<T: Scalar>(&self, len: usize) -> Vec<T> {
        if self.variance == 0.0 {
            return vec![T::zero(); len];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.variance.sqrt()).expect("finite variance");
        (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
    }
}

/// `Σ_i G_i(p) u_i` sampled, without noise. A single input is shared by all systems.
pub fn simulate_noise_free<T: Scalar>(
    truths: &[TransferFunction<T>],
    inputs: &[Vec<T>],
    h: T,
    intersample: Intersample,
) -> Result<Vec<T>> {
    if truths.is_empty() {
        return Err(IdentError::InvalidInput("no systems to simulate".into()));
    }
    if inputs.len() != truths.len() && inputs.len() != 1 {
        return Err(IdentError::InvalidInput(format!(
            "{} systems but {} inputs (expected equal counts or one shared input)",
            truths.len(),
            inputs.len()
        )));
    }
    let len = inputs[0].len();
    if inputs.iter().any(|u| u.len() != len) {
        return Err(IdentError::InvalidInput("input lengths differ".into()));
    }
    let mut x = vec![T::zero(); len];
    for (i, g) in truths.iter().enumerate() {
        if g.den().degree() > 0 && !g.is_stable()? {
            return Err(IdentError::Unstable(format!(
                "true system {} is unstable; simulation refused",
                i + 1
            )));
        }
        let u = if inputs.len() == 1 {
            &inputs[0]
        } else {
            &inputs[i]
        };
        let yi = filter_signal(g, u, h, intersample)?;
        for (acc, v) in x.iter_mut().zip(yi) {
            *acc += v;
        }
    }
    Ok(x)
}

/// `y(t_k) = Σ_i G_i(p) u_i(t_k) + v(t_k)` with seeded white Gaussian `v`.
pub fn simulate_outputs<T: Scalar>(
    truths: &[TransferFunction<T>],
    inputs: &[Vec<T>],
    h: T,
    noise: NoiseSpec,
    intersample: Intersample,
) -> Result<DataRecord<T>> {
    let x = simulate_noise_free(truths, inputs, h, intersample)?;
    let v = noise.sample::<T>(x.len());
    let y = x.iter().zip(&v).map(|(&a, &b)| a + b).collect();
    DataRecord::new(h, inputs.to_vec(), y, intersample)
}

/// Solves `A P + P Aᵀ + Q = 0` by Kronecker vectorization (small dimensions only).
pub fn solve_lyapunov<T: Scalar>(a: &DMatrix<T>, q: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = a.nrows();
    let eye = DMatrix::<T>::identity(n, n);
    let kron = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|&v| -v));
    let sol = kron.lu().solve(&rhs).ok_or(IdentError::Singular {
        condition: f64::INFINITY,
        limit: f64::INFINITY,
    })?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// H2 norm `sqrt(C P Cᵀ)` with `P` the controllability Gramian.
pub fn h2_norm<T: Scalar>(tf: &TransferFunction<T>) -> Result<T> {
    if tf.num().is_zero() {
        return Ok(T::zero());
    }
    if !tf.is_strictly_proper() {
        return Err(IdentError::Improper {
            num: tf.num().degree(),
            den: tf.den().degree().saturating_sub(1),
        });
    }
    if !tf.is_stable()? {
        return Err(IdentError::Unstable(
            "H2 norm of an unstable transfer function is infinite".into(),
        ));
    }
    let ss = StateSpace::from_transfer_function(tf)?;
    let q = &ss.b * ss.b.transpose();
    let p = solve_lyapunov(&ss.a, &q)?;
    let val = (&ss.c * p * ss.c.transpose())[(0, 0)];
    Ok(val.max(T::zero()).sqrt())
}
