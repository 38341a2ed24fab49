//! Filtered instruments, regressors and residuals for one submodel.
//!
//! For a parameter vector `θ = [a_1..a_n, b_0..b_m]` with `A = 1 + Σ a_j p^j` and
//! `B = Σ b_j p^j`, and a residual output `ỹ` driven by input `u`:
//!
//! * instrument rows: `(-p^j B/A²) u` for `j = 1..n`, then `(p^j/A) u` for `j = 0..m`
//! * regressor rows: `(-p^j/A) ỹ` for `j = 1..n`, then `(p^j/A) u` for `j = 0..m`
//! * filtered output `ỹ/A`, residual `e = ỹ - (B/A) u`
//!
//! and `ỹ_f - φ_fᵀ θ = e` holds sample by sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{IdentError, Result};
use crate::estimator::ModelSetup;
use crate::ltisim::{derivative_filter_bank, filter_bank, filter_signal, DataRecord, Intersample};
use crate::poly::{sylvester, ParameterVector, Polynomial, TransferFunction};
use crate::scalar::Scalar;

/// Signals defining one coordinate subproblem.
#[derive(Debug, Clone, Copy)]
pub struct Subproblem<'a, T: Scalar = f64> {
    pub y_tilde: &'a [T],
    pub u: &'a [T],
    pub h: T,
    pub intersample: Intersample,
    /// Leading samples excluded from every regression sum.
    pub warmup: usize,
}

impl<'a, T: Scalar> Subproblem<'a, T> {
    pub fn new(
        y_tilde: &'a [T],
        u: &'a [T],
        h: T,
        intersample: Intersample,
        warmup: usize,
    ) -> Result<Self> {
        if y_tilde.len() != u.len() {
            return Err(IdentError::InvalidInput(format!(
                "residual output has {} samples, input has {}",
                y_tilde.len(),
                u.len()
            )));
        }
        if warmup >= u.len() {
            return Err(IdentError::InvalidInput(format!(
                "warm-up skip {} leaves no samples out of {}",
                warmup,
                u.len()
            )));
        }
        Ok(Self {
            y_tilde,
            u,
            h,
            intersample,
            warmup,
        })
    }

    pub fn effective_len(&self) -> usize {
        self.u.len() - self.warmup
    }
}

/// `(1/N') Σ_k a_k b_kᵀ` over rows `k >= warmup`.
pub fn cross_moment<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, warmup: usize) -> DMatrix<T> {
    let n = a.nrows() - warmup;
    let ar = a.rows(warmup, n);
    let br = b.rows(warmup, n);
    ar.transpose() * br / T::lit(n as f64)
}

/// `(1/N') Σ_k a_k s_k` over rows `k >= warmup`.
pub fn cross_vector<T: Scalar>(a: &DMatrix<T>, s: &[T], warmup: usize) -> DVector<T> {
    let n = a.nrows() - warmup;
    let sv = DVector::from_column_slice(&s[warmup..]);
    a.rows(warmup, n).transpose() * sv / T::lit(n as f64)
}

/// `(1/N') Σ_k e_k²` over `k >= warmup`.
pub fn mean_square<T: Scalar>(e: &[T], warmup: usize) -> T {
    let tail = &e[warmup..];
    tail.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::lit(tail.len() as f64)
}

fn model_of<T: Scalar>(theta: &ParameterVector<T>) -> Result<TransferFunction<T>> {
    let tf = theta.to_transfer_function()?;
    tf.check_model()?;
    Ok(tf)
}

fn instrument_unchecked<T: Scalar>(
    theta: &ParameterVector<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    let s = theta.structure();
    let a = theta.denominator();
    let b = theta.numerator();
    let a2 = &a * &a;
    let neg_b = -&b;
    let nums: Vec<Polynomial<T>> = (1..=s.n).map(|j| neg_b.shift(j)).collect();
    let first = filter_bank(&a2, &nums, u, h, intersample)?;
    let second = derivative_filter_bank(&a, s.m, u, h, intersample)?;
    let mut out = DMatrix::<T>::zeros(u.len(), s.n_params());
    out.columns_mut(0, s.n).copy_from(&first);
    out.columns_mut(s.n, s.m + 1).copy_from(&second);
    Ok(out)
}

/// Instrument matrix `φ̂_f` (one row per sample), built from per-column filters.
pub fn build_instrument<T: Scalar>(
    theta: &ParameterVector<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    model_of(theta)?;
    instrument_unchecked(theta, u, h, intersample)
}

/// Instrument via the factorization `S(-B, A) · (1/A²) [p^{n+m}, ..., 1]ᵀ u`.
pub fn build_instrument_sylvester<T: Scalar>(
    theta: &ParameterVector<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    model_of(theta)?;
    let s = theta.structure();
    let a = theta.denominator();
    let neg_b = -&theta.numerator();
    let stack = descending_stack(&(&a * &a), s.n + s.m, u, h, intersample)?;
    // pad -B to degree m so the matrix keeps its n+m+1 layout when b_m = 0
    let syl = sylvester_padded(&a, &neg_b, s.m)?;
    Ok(stack * syl.transpose())
}

fn sylvester_padded<T: Scalar>(
    a: &Polynomial<T>,
    b: &Polynomial<T>,
    m: usize,
) -> Result<DMatrix<T>> {
    if b.degree() == m && !b.is_zero() {
        return sylvester(a, b);
    }
    let n = a.degree();
    let size = n + m + 1;
    let mut s = DMatrix::<T>::zeros(size, size);
    for j in 1..=n {
        for k in 0..=m {
            let power = k + j;
            s[(j - 1, size - 1 - power)] = b.coeff(k);
        }
    }
    for j in 0..=m {
        for k in 0..=n {
            s[(n + j, size - 1 - (k + j))] = a.coeff(k);
        }
    }
    Ok(s)
}

/// Columns `[p^order, ..., p, 1] / den` applied to `u` (descending powers).
pub fn descending_stack<T: Scalar>(
    den: &Polynomial<T>,
    order: usize,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    let bank = derivative_filter_bank(den, order, u, h, intersample)?;
    let mut out = DMatrix::<T>::zeros(u.len(), order + 1);
    for k in 0..=order {
        out.set_column(k, &bank.column(order - k));
    }
    Ok(out)
}

/// Regressor matrix `φ_f`.
pub fn build_regressor<T: Scalar>(
    theta: &ParameterVector<T>,
    y_tilde: &[T],
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<DMatrix<T>> {
    model_of(theta)?;
    if y_tilde.len() != u.len() {
        return Err(IdentError::InvalidInput(
            "residual output and input lengths differ".into(),
        ));
    }
    let s = theta.structure();
    let a = theta.denominator();
    let yb = derivative_filter_bank(&a, s.n, y_tilde, h, intersample)?;
    let ub = derivative_filter_bank(&a, s.m, u, h, intersample)?;
    let mut out = DMatrix::<T>::zeros(u.len(), s.n_params());
    out.columns_mut(0, s.n).copy_from(&(-yb.columns(1, s.n)));
    out.columns_mut(s.n, s.m + 1).copy_from(&ub);
    Ok(out)
}

/// `ỹ_f = (1/A) ỹ`.
pub fn filtered_output<T: Scalar>(
    theta: &ParameterVector<T>,
    y_tilde: &[T],
    h: T,
    intersample: Intersample,
) -> Result<Vec<T>> {
    let tf = model_of(theta)?;
    filter_signal(
        &TransferFunction::unchecked(Polynomial::one(), tf.den().clone()),
        y_tilde,
        h,
        intersample,
    )
}

/// `e = ỹ - (B/A) u`.
pub fn residual<T: Scalar>(
    theta: &ParameterVector<T>,
    y_tilde: &[T],
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<Vec<T>> {
    let tf = model_of(theta)?;
    if y_tilde.len() != u.len() {
        return Err(IdentError::InvalidInput(
            "residual output and input lengths differ".into(),
        ));
    }
    let yhat = filter_signal(&tf, u, h, intersample)?;
    Ok(y_tilde.iter().zip(yhat).map(|(&y, m)| y - m).collect())
}

/// `(B/A²) u`, the right-hand side of the gradient identity `φ̂_fᵀ θ = (B/A²) u`.
pub fn gradient_target<T: Scalar>(
    theta: &ParameterVector<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<Vec<T>> {
    let a = theta.denominator();
    let tf = TransferFunction::unchecked(theta.numerator(), &a * &a);
    filter_signal(&tf, u, h, intersample)
}

/// Largest deviation of `φ̂_fᵀ θ` from `(B/A²) u` over all samples.
pub fn gradient_identity_deviation<T: Scalar>(
    theta: &ParameterVector<T>,
    u: &[T],
    h: T,
    intersample: Intersample,
) -> Result<T> {
    let inst = build_instrument(theta, u, h, intersample)?;
    let target = gradient_target(theta, u, h, intersample)?;
    let th = DVector::from_column_slice(theta.values());
    let lhs = inst * th;
    Ok(lhs
        .iter()
        .zip(&target)
        .fold(T::zero(), |acc, (&l, &r)| acc.max((l - r).abs())))
}

/// Output of `G_j` for submodel `j` driven by its own input channel.
pub fn submodel_output<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    model: &TransferFunction<T>,
    j: usize,
) -> Result<Vec<T>> {
    filter_signal(
        model,
        &record.inputs[setup.input_index(j)],
        record.h,
        record.intersample,
    )
}

/// `ỹ_i = y - Σ_{j≠i} G_j(p) u_j`; entry `i` of `models` is ignored.
pub fn residual_output<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    models: &[TransferFunction<T>],
    i: usize,
) -> Result<Vec<T>> {
    setup.check_record(record)?;
    if models.len() != setup.len() || i >= setup.len() {
        return Err(IdentError::InvalidInput(format!(
            "{} models for {} submodels, target index {}",
            models.len(),
            setup.len(),
            i
        )));
    }
    let mut out = record.output.clone();
    for (j, g) in models.iter().enumerate() {
        if j == i {
            continue;
        }
        if g.den().degree() > 0 && !g.is_stable()? {
            return Err(IdentError::Unstable(format!(
                "fixed submodel {} is unstable",
                j + 1
            )));
        }
        let yj = submodel_output(record, setup, g, j)?;
        for (o, v) in out.iter_mut().zip(yj) {
            *o -= v;
        }
    }
    Ok(out)
}

/// Everything the inner iterations need, evaluated at one parameter vector.
#[derive(Debug, Clone)]
pub struct RegressionBundle<T: Scalar = f64> {
    pub theta: ParameterVector<T>,
    pub instrument: DMatrix<T>,
    pub regressor: DMatrix<T>,
    pub filtered_output: Vec<T>,
    pub residual: Vec<T>,
    pub residual_output: Vec<T>,
    pub warmup: usize,
}

impl<T: Scalar> RegressionBundle<T> {
    /// Builds all signals with three shared simulations (ỹ and u through `1/A`, u through `1/A²`).
    pub fn build(theta: &ParameterVector<T>, sub: &Subproblem<'_, T>) -> Result<Self> {
        model_of(theta)?;
        let s = theta.structure();
        let a = theta.denominator();
        let yb = derivative_filter_bank(&a, s.n, sub.y_tilde, sub.h, sub.intersample)?;
        let instrument = instrument_unchecked(theta, sub.u, sub.h, sub.intersample)?;
        let ub = instrument.columns(s.n, s.m + 1);
        let len = sub.u.len();
        let mut regressor = DMatrix::<T>::zeros(len, s.n_params());
        regressor
            .columns_mut(0, s.n)
            .copy_from(&(-yb.columns(1, s.n)));
        regressor.columns_mut(s.n, s.m + 1).copy_from(&ub);
        let b = DVector::from_column_slice(theta.numerator_params());
        let model_out = ub * b;
        let residual: Vec<T> = sub
            .y_tilde
            .iter()
            .zip(model_out.iter())
            .map(|(&y, &m)| y - m)
            .collect();
        Ok(Self {
            theta: theta.clone(),
            filtered_output: yb.column(0).iter().copied().collect(),
            instrument,
            regressor,
            residual,
            residual_output: sub.y_tilde.to_vec(),
            warmup: sub.warmup,
        })
    }

    /// `max_k |ỹ_f - φ_fᵀ θ - e|` after the warm-up skip.
    pub fn residual_identity_deviation(&self) -> T {
        let th = DVector::from_column_slice(self.theta.values());
        let pred = &self.regressor * th;
        (self.warmup..self.residual.len()).fold(T::zero(), |acc, k| {
            acc.max((self.filtered_output[k] - pred[k] - self.residual[k]).abs())
        })
    }

    /// `(1/N) Σ φ̂_f e`.
    pub fn gradient_correlation(&self) -> DVector<T> {
        cross_vector(&self.instrument, &self.residual, self.warmup)
    }

    pub fn stationarity_norm(&self) -> T {
        self.gradient_correlation().norm()
    }
}
