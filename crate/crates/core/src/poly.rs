//! Polynomial and transfer-function algebra in the differentiation operator `p`.
//!
//! Coefficients are stored in ascending order of power (index `k` holds the
//! coefficient of `p^k`). Denominators of transfer functions are normalized so
//! that their constant coefficient is exactly one.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Complex, DMatrix};

use crate::error::{IdentError, Result};
use crate::scalar::Scalar;

/// Default relative tolerance for [`is_coprime`].
pub const DEFAULT_COPRIME_TOL: f64 = 1e-10;

/// Relative threshold under which a leading denominator coefficient is treated as zero.
pub fn degeneracy_tol<T: Scalar>() -> T {
    T::eps().sqrt() * T::lit(1e-4)
}

/// Real polynomial with ascending coefficients.
#[derive(Clone, PartialEq)]
pub struct Polynomial<T: Scalar = f64> {
    coeffs: Vec<T>,
}

impl<T: Scalar> Polynomial<T> {
    /// Builds a polynomial from ascending coefficients, trimming exact trailing zeros.
    pub fn new(coeffs: Vec<T>) -> Self {
        let mut coeffs = coeffs;
        while coeffs.len() > 1 && *coeffs.last().unwrap() == T::zero() {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(T::zero());
        }
        Self { coeffs }
    }

    /// Builds a polynomial from descending coefficients (leading coefficient first).
    pub fn from_descending(coeffs: &[T]) -> Self {
        Self::new(coeffs.iter().rev().copied().collect())
    }

    pub fn zero() -> Self {
        Self {
            coeffs: vec![T::zero()],
        }
    }

    pub fn one() -> Self {
        Self {
            coeffs: vec![T::one()],
        }
    }

    pub fn constant(c: T) -> Self {
        Self::new(vec![c])
    }

    /// `c * p^k`.
    pub fn monomial(c: T, k: usize) -> Self {
        let mut coeffs = vec![T::zero(); k + 1];
        coeffs[k] = c;
        Self::new(coeffs)
    }

    /// Monic polynomial with the given roots; complex roots must come in conjugate pairs.
    pub fn from_roots(roots: &[Complex<T>]) -> Self {
        let mut out = Self::one();
        let tiny = T::eps().sqrt();
        for r in roots {
            let scale = r.norm_sqr().sqrt().max(T::one());
            if r.im.abs() <= tiny * scale {
                out = &out * &Self::new(vec![-r.re, T::one()]);
            } else if r.im > T::zero() {
                let quad = Self::new(vec![r.norm_sqr(), -(r.re + r.re), T::one()]);
                out = &out * &quad;
            }
        }
        out
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Coefficients with the leading term first.
    pub fn descending(&self) -> Vec<T> {
        self.coeffs.iter().rev().copied().collect()
    }

    /// Coefficient of `p^k` (zero beyond the degree).
    pub fn coeff(&self, k: usize) -> T {
        self.coeffs.get(k).copied().unwrap_or_else(T::zero)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn leading(&self) -> T {
        *self.coeffs.last().unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == T::zero()
    }

    pub fn max_abs_coeff(&self) -> T {
        self.coeffs
            .iter()
            .fold(T::zero(), |acc, c| acc.max(c.abs()))
    }

    pub fn eval(&self, x: T) -> T {
        self.coeffs
            .iter()
            .rev()
            .fold(T::zero(), |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex<T>) -> Complex<T> {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex::new(T::zero(), T::zero()), |acc, &c| {
                acc * z + Complex::new(c, T::zero())
            })
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.coeffs.iter().map(|&c| c * s).collect())
    }

    /// Multiplies by `p^k`.
    pub fn shift(&self, k: usize) -> Self {
        if self.is_zero() {
            return self.clone();
        }
        let mut coeffs = vec![T::zero(); k];
        coeffs.extend_from_slice(&self.coeffs);
        Self { coeffs }
    }

    /// Substitutes `p -> c p`.
    pub fn time_scaled(&self, c: T) -> Self {
        let mut pow = T::one();
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for &a in &self.coeffs {
            coeffs.push(a * pow);
            pow *= c;
        }
        Self::new(coeffs)
    }

    /// Drops trailing coefficients whose magnitude is below `tol` times the largest one.
    pub fn trimmed(&self, tol: T) -> Self {
        let scale = self.max_abs_coeff();
        let mut coeffs = self.coeffs.clone();
        while coeffs.len() > 1 && coeffs.last().unwrap().abs() <= tol * scale {
            coeffs.pop();
        }
        Self::new(coeffs)
    }

    /// Roots from the eigenvalues of the companion matrix of the monic rescaling.
    pub fn roots(&self) -> Result<Vec<Complex<T>>> {
        let n = self.degree();
        if n == 0 {
            return Ok(Vec::new());
        }
        let lead = self.leading();
        if lead.abs() <= degeneracy_tol::<T>() * self.max_abs_coeff() {
            return Err(IdentError::DegreeDegenerate {
                coeff: lead.to_f64_lossy(),
            });
        }
        let mut companion = DMatrix::<T>::zeros(n, n);
        for i in 1..n {
            companion[(i, i - 1)] = T::one();
        }
        for i in 0..n {
            companion[(i, n - 1)] = -self.coeffs[i] / lead;
        }
        Ok(companion.complex_eigenvalues().iter().copied().collect())
    }

    fn combine(&self, other: &Self, sign: T) -> Self {
        let len = self.coeffs.len().max(other.coeffs.len());
        let coeffs: Vec<T> = (0..len)
            .map(|k| self.coeff(k) + sign * other.coeff(k))
            .collect();
        let tol = T::eps() * T::lit(8.0) * self.max_abs_coeff().max(other.max_abs_coeff());
        let mut coeffs = coeffs;
        while coeffs.len() > 1 && coeffs.last().unwrap().abs() <= tol {
            coeffs.pop();
        }
        if coeffs.len() == 1 && coeffs[0].abs() <= tol {
            coeffs[0] = T::zero();
        }
        Self::new(coeffs)
    }
}

impl<T: Scalar> fmt::Debug for Polynomial<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Polynomial{:?}", self.coeffs)
    }
}

impl<T: Scalar> fmt::Display for Polynomial<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, c) in self.coeffs.iter().enumerate().rev() {
            if *c == T::zero() && !(k == 0 && first) {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            match k {
                0 => write!(f, "{}", c)?,
                1 => write!(f, "{}p", c)?,
                _ => write!(f, "{}p^{}", c, k)?,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Add for &Polynomial<T> {
    type Output = Polynomial<T>;
    fn add(self, rhs: Self) -> Polynomial<T> {
        self.combine(rhs, T::one())
    }
}

impl<T: Scalar> Sub for &Polynomial<T> {
    type Output = Polynomial<T>;
    fn sub(self, rhs: Self) -> Polynomial<T> {
        self.combine(rhs, -T::one())
    }
}

impl<T: Scalar> Mul for &Polynomial<T> {
    type Output = Polynomial<T>;
    fn mul(self, rhs: Self) -> Polynomial<T> {
        if self.is_zero() || rhs.is_zero() {
            return Polynomial::zero();
        }
        let mut coeffs = vec![T::zero(); self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in rhs.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        Polynomial::new(coeffs)
    }
}

impl<T: Scalar> Neg for &Polynomial<T> {
    type Output = Polynomial<T>;
    fn neg(self) -> Polynomial<T> {
        Polynomial::new(self.coeffs.iter().map(|&c| -c).collect())
    }
}

macro_rules! owned_binop {
    ($tr:ident, $method:ident) => {
        impl<T: Scalar> $tr for Polynomial<T> {
            type Output = Polynomial<T>;
            fn $method(self, rhs: Self) -> Polynomial<T> {
                (&self).$method(&rhs)
            }
        }
    };
}
owned_binop!(Add, add);
owned_binop!(Sub, sub);
owned_binop!(Mul, mul);

/// Model orders `(n, m)`: denominator degree and numerator degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ModelStructure {
    pub n: usize,
    pub m: usize,
}

impl ModelStructure {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        let s = Self { n, m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(IdentError::InvalidInput(
                "model denominator degree n must be at least 1".into(),
            ));
        }
        if self.m > self.n {
            return Err(IdentError::Improper {
                num: self.m,
                den: self.n,
            });
        }
        Ok(())
    }

    /// Number of parameters `n + m + 1`.
    pub fn n_params(&self) -> usize {
        self.n + self.m + 1
    }

    pub fn is_biproper(&self) -> bool {
        self.n == self.m
    }

    /// Parameter labels `a_{i,1}..a_{i,n}, b_{i,0}..b_{i,m}` for submodel `i` (1-based).
    pub fn param_names(&self, submodel: usize) -> Vec<String> {
        (1..=self.n)
            .map(|j| format!("a_{}_{}", submodel, j))
            .chain((0..=self.m).map(|j| format!("b_{}_{}", submodel, j)))
            .collect()
    }
}

/// Parameter vector `[a_1, ..., a_n, b_0, ..., b_m]` of a model with a given structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T: Scalar = f64> {
    structure: ModelStructure,
    values: Vec<T>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn new(structure: ModelStructure, values: Vec<T>) -> Result<Self> {
        structure.validate()?;
        if values.len() != structure.n_params() {
            return Err(IdentError::StructureMismatch(format!(
                "expected {} parameters for (n={}, m={}), got {}",
                structure.n_params(),
                structure.n,
                structure.m,
                values.len()
            )));
        }
        Ok(Self { structure, values })
    }

    pub fn structure(&self) -> ModelStructure {
        self.structure
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn denominator_params(&self) -> &[T] {
        &self.values[..self.structure.n]
    }

    pub fn numerator_params(&self) -> &[T] {
        &self.values[self.structure.n..]
    }

    pub fn norm(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Euclidean distance to another vector of the same structure.
    pub fn distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            .sqrt()
    }

    /// `A(p) = 1 + a_1 p + ... + a_n p^n`, without checking `a_n`.
    pub fn denominator(&self) -> Polynomial<T> {
        let mut c = Vec::with_capacity(self.structure.n + 1);
        c.push(T::one());
        c.extend_from_slice(self.denominator_params());
        Polynomial::new(c)
    }

    /// `B(p) = b_0 + b_1 p + ... + b_m p^m`.
    pub fn numerator(&self) -> Polynomial<T> {
        Polynomial::new(self.numerator_params().to_vec())
    }

    /// Transfer function of exact denominator degree `n`; errors if `a_n` degenerates.
    pub fn to_transfer_function(&self) -> Result<TransferFunction<T>> {
        let den = self.denominator();
        let a_n = self.values[self.structure.n - 1];
        if den.degree() != self.structure.n
            || a_n.abs() <= degeneracy_tol::<T>() * den.max_abs_coeff()
        {
            return Err(IdentError::DegreeDegenerate {
                coeff: a_n.to_f64_lossy(),
            });
        }
        Ok(TransferFunction::unchecked(self.numerator(), den))
    }
}

/// Continuous-time transfer function `B(p)/A(p)` with `A(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction<T: Scalar = f64> {
    num: Polynomial<T>,
    den: Polynomial<T>,
}

impl<T: Scalar> TransferFunction<T> {
    /// Validated construction: `A(0) = 1` exactly, proper, and coprime at [`DEFAULT_COPRIME_TOL`].
    pub fn new(num: Polynomial<T>, den: Polynomial<T>) -> Result<Self> {
        if den.coeff(0) != T::one() {
            return Err(IdentError::InvalidInput(format!(
                "denominator constant coefficient must be exactly 1, got {}",
                den.coeff(0)
            )));
        }
        if num.degree() > den.degree() && !num.is_zero() {
            return Err(IdentError::Improper {
                num: num.degree(),
                den: den.degree(),
            });
        }
        if !is_coprime(&den, &num, T::lit(DEFAULT_COPRIME_TOL)) {
            return Err(IdentError::NotCoprime);
        }
        Ok(Self { num, den })
    }

    /// Scales numerator and denominator so that `A(0) = 1`, then validates.
    pub fn normalized(num: Polynomial<T>, den: Polynomial<T>) -> Result<Self> {
        let a0 = den.coeff(0);
        if a0 == T::zero() {
            return Err(IdentError::InvalidInput(
                "denominator has a root at the origin".into(),
            ));
        }
        let inv = T::one() / a0;
        let mut den_c: Vec<T> = den.coeffs().iter().map(|&c| c * inv).collect();
        den_c[0] = T::one();
        Self::new(num.scale(inv), Polynomial::new(den_c))
    }

    /// Construction without coprimeness or properness checks, for intermediate results.
    pub fn unchecked(num: Polynomial<T>, den: Polynomial<T>) -> Self {
        Self { num, den }
    }

    /// From descending coefficient slices, normalized and validated.
    pub fn from_descending(num: &[T], den: &[T]) -> Result<Self> {
        Self::normalized(
            Polynomial::from_descending(num),
            Polynomial::from_descending(den),
        )
    }

    pub fn unity() -> Self {
        Self::unchecked(Polynomial::one(), Polynomial::one())
    }

    pub fn num(&self) -> &Polynomial<T> {
        &self.num
    }

    pub fn den(&self) -> &Polynomial<T> {
        &self.den
    }

    pub fn structure(&self) -> ModelStructure {
        ModelStructure {
            n: self.den.degree(),
            m: if self.num.is_zero() {
                0
            } else {
                self.num.degree()
            },
        }
    }

    pub fn is_proper(&self) -> bool {
        self.num.is_zero() || self.num.degree() <= self.den.degree()
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.num.is_zero() || self.num.degree() < self.den.degree()
    }

    pub fn is_stable(&self) -> Result<bool> {
        if self.den.degree() == 0 {
            return Ok(true);
        }
        is_stable(&self.den)
    }

    /// Parameter vector under an explicit structure (numerator zero-padded up to `m`).
    pub fn parameters(&self, structure: ModelStructure) -> Result<ParameterVector<T>> {
        structure.validate()?;
        if self.den.degree() != structure.n
            || (!self.num.is_zero() && self.num.degree() > structure.m)
        {
            return Err(IdentError::StructureMismatch(format!(
                "transfer function has (n={}, m={}), requested (n={}, m={})",
                self.den.degree(),
                self.num.degree(),
                structure.n,
                structure.m
            )));
        }
        let a0 = self.den.coeff(0);
        let mut v: Vec<T> = (1..=structure.n).map(|k| self.den.coeff(k) / a0).collect();
        v.extend((0..=structure.m).map(|k| self.num.coeff(k) / a0));
        ParameterVector::new(structure, v)
    }

    /// `self - other` over the common denominator `A_1 A_2` (not reduced).
    pub fn difference(&self, other: &Self) -> Self {
        let num = &(&self.num * &other.den) - &(&other.num * &self.den);
        Self::unchecked(num, &self.den * &other.den)
    }

    pub fn freq_response(&self, omega: T) -> Complex<T> {
        let s = Complex::new(T::zero(), omega);
        self.num.eval_complex(s) / self.den.eval_complex(s)
    }

    /// Stability and coprimeness of an estimate.
    pub fn check_model(&self) -> Result<()> {
        if !self.is_stable()? {
            return Err(IdentError::Unstable(format!(
                "denominator {} has a root with non-negative real part",
                self.den
            )));
        }
        if !is_coprime(&self.den, &self.num, T::lit(DEFAULT_COPRIME_TOL)) {
            return Err(IdentError::NotCoprime);
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Display for TransferFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", self.num, self.den)
    }
}

/// Descending-degree coefficients of `A*(p) B̄(p) - Ā(p) B*(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector<T: Scalar = f64> {
    descending: Vec<T>,
}

impl<T: Scalar> BiasVector<T> {
    pub fn descending(&self) -> &[T] {
        &self.descending
    }

    pub fn len(&self) -> usize {
        self.descending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descending.is_empty()
    }

    /// Same coefficients, constant term first.
    pub fn ascending(&self) -> Vec<T> {
        self.descending.iter().rev().copied().collect()
    }

    pub fn norm(&self) -> T {
        self.descending
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.descending.iter().all(|&v| v == T::zero())
    }
}

/// Square Sylvester matrix of size `deg(den) + deg(num) + 1` in the instrument layout.
///
/// Rows `1..=deg(den)` hold the coefficients of `p^j num(p)` for `j = 1..=deg(den)`,
/// the remaining `deg(num) + 1` rows hold `p^j den(p)` for `j = 0..=deg(num)`.
/// Columns run over descending powers `p^{n+m}, ..., p^0`. With `num = -B` this maps
/// the stack `[p^{n+m}, ..., 1]/A^2 u` onto the instrument vector. The determinant is
/// the resultant of `den` and `p num`, so it vanishes iff the pair shares a root
/// (including `p = 0` when `den(0) = 0`).
pub fn sylvester<T: Scalar>(den: &Polynomial<T>, num: &Polynomial<T>) -> Result<DMatrix<T>> {
    if den.is_zero() && num.is_zero() {
        return Err(IdentError::InvalidInput(
            "sylvester matrix of two zero polynomials".into(),
        ));
    }
    let n = den.degree();
    let m = num.degree();
    let size = n + m + 1;
    let mut s = DMatrix::<T>::zeros(size, size);
    let mut place = |row: usize, poly: &Polynomial<T>, shift: usize| {
        for (k, &c) in poly.coeffs().iter().enumerate() {
            let power = k + shift;
            s[(row, size - 1 - power)] = c;
        }
    };
    for j in 1..=n {
        place(j - 1, num, j);
    }
    for j in 0..=m {
        place(n + j, den, j);
    }
    Ok(s)
}

/// Classical resultant matrix of size `deg a + deg b`.
fn resultant_matrix<T: Scalar>(a: &Polynomial<T>, b: &Polynomial<T>) -> DMatrix<T> {
    let n = a.degree();
    let m = b.degree();
    let size = n + m;
    let mut s = DMatrix::<T>::zeros(size, size);
    for r in 0..m {
        for (k, &c) in a.descending().iter().enumerate() {
            s[(r, r + k)] = c;
        }
    }
    for r in 0..n {
        for (k, &c) in b.descending().iter().enumerate() {
            s[(m + r, r + k)] = c;
        }
    }
    s
}

/// Coprimeness test on the classical resultant matrix with rows scaled to unit norm:
/// the pair is coprime when `sigma_min / sigma_max > tol`.
///
/// A shared root makes the matrix singular, so the ratio drops to rounding level; the
/// row scaling makes it independent of coefficient scaling. A zero polynomial is coprime
/// only with a nonzero constant.
pub fn is_coprime<T: Scalar>(a: &Polynomial<T>, b: &Polynomial<T>, tol: T) -> bool {
    if a.is_zero() || b.is_zero() {
        let other = if a.is_zero() { b } else { a };
        return !other.is_zero() && other.degree() == 0;
    }
    if a.degree() == 0 || b.degree() == 0 {
        return true;
    }
    let mut s = resultant_matrix(a, b);
    for mut row in s.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    let sv = s.svd(false, false).singular_values;
    sv.min() > tol * sv.max()
}

/// True iff every root of `a` has strictly negative real part.
pub fn is_stable<T: Scalar>(a: &Polynomial<T>) -> Result<bool> {
    if a.degree() == 0 {
        return Err(IdentError::InvalidInput(
            "stability test requires degree at least 1".into(),
        ));
    }
    Ok(a.roots()?.iter().all(|r| r.re < T::zero()))
}

/// Reflects roots with non-negative real part into the open left half-plane and renormalizes `A(0) = 1`.
///
/// Returns the new polynomial and the number of reflected roots. Roots on the imaginary axis
/// cannot be reflected and yield [`IdentError::Unstable`].
pub fn reflect_unstable<T: Scalar>(a: &Polynomial<T>) -> Result<(Polynomial<T>, usize)> {
    let roots = a.roots()?;
    let mut reflected = 0;
    let mut fixed = Vec::with_capacity(roots.len());
    for r in roots {
        if r.re >= T::zero() {
            if r.re == T::zero() {
                return Err(IdentError::Unstable(
                    "root on the imaginary axis cannot be reflected".into(),
                ));
            }
            reflected += 1;
            fixed.push(Complex::new(-r.re, r.im));
        } else {
            fixed.push(r);
        }
    }
    if reflected == 0 {
        return Ok((a.clone(), 0));
    }
    let monic = Polynomial::from_roots(&fixed);
    if monic.degree() != a.degree() {
        return Err(IdentError::NonFinite(
            "root reflection lost a conjugate pair".into(),
        ));
    }
    let c0 = monic.coeff(0);
    let mut coeffs: Vec<T> = monic.coeffs().iter().map(|&c| c / c0).collect();
    coeffs[0] = T::one();
    Ok((Polynomial::new(coeffs), reflected))
}

/// Bias vector of a model with respect to the true system; structures must match.
pub fn bias_vector<T: Scalar>(
    true_tf: &TransferFunction<T>,
    model_tf: &TransferFunction<T>,
) -> Result<BiasVector<T>> {
    let st = true_tf.structure();
    let sm = model_tf.structure();
    if st != sm {
        return Err(IdentError::StructureMismatch(format!(
            "true system (n={}, m={}) vs model (n={}, m={})",
            st.n, st.m, sm.n, sm.m
        )));
    }
    let len = st.n_params();
    let diff = &(true_tf.den() * model_tf.num()) - &(model_tf.den() * true_tf.num());
    let mut asc: Vec<T> = (0..len).map(|k| diff.coeff(k)).collect();
    asc.reverse();
    Ok(BiasVector { descending: asc })
}
