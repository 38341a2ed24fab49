//! Block coordinate descent with Gauss-Newton or SRIVC inner iterations.
//!
//! Each coordinate update minimizes the output-error cost over one submodel while
//! the others stay fixed. The inner iterations share the filtered instrument `φ̂_f`
//! and differ only in the matrix being inverted and the right-hand side; both stop
//! at points where `(1/N) Σ φ̂_f e = 0`.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IdentError, Result};
use crate::ltisim::{derivative_filter_bank, filter_signal, DataRecord, Intersample};
use crate::poly::{
    reflect_unstable, BiasVector, ModelStructure, ParameterVector, Polynomial, TransferFunction,
};
use crate::regression::{
    cross_moment, cross_vector, descending_stack, gradient_target, mean_square, residual_output,
    submodel_output, RegressionBundle, Subproblem,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetupKind {
    /// Independent input per submodel.
    Miso,
    /// One shared input feeding parallel submodels.
    #[serde(alias = "additive_siso", alias = "additive-siso")]
    Additive,
}

/// Which identification framework applies and the orders of each submodel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    pub kind: SetupKind,
    pub structures: Vec<ModelStructure>,
}

impl ModelSetup {
    pub fn new(kind: SetupKind, structures: Vec<ModelStructure>) -> Result<Self> {
        if structures.is_empty() {
            return Err(IdentError::InvalidInput(
                "model setup needs at least one submodel".into(),
            ));
        }
        for s in &structures {
            s.validate()?;
        }
        if kind == SetupKind::Additive && structures.iter().filter(|s| s.is_biproper()).count() > 1
        {
            return Err(IdentError::InvalidInput(
                "additive setup allows at most one biproper submodel".into(),
            ));
        }
        Ok(Self { kind, structures })
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    /// Input channel feeding submodel `i`.
    pub fn input_index(&self, i: usize) -> usize {
        match self.kind {
            SetupKind::Miso => i,
            SetupKind::Additive => 0,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.kind {
            SetupKind::Miso => self.len(),
            SetupKind::Additive => 1,
        }
    }

    pub fn check_record<T: Scalar>(&self, record: &DataRecord<T>) -> Result<()> {
        record.validate()?;
        if record.inputs.len() != self.input_channels() {
            return Err(IdentError::InvalidInput(format!(
                "{:?} setup with {} submodels expects {} input channel(s), record has {}",
                self.kind,
                self.len(),
                self.input_channels(),
                record.inputs.len()
            )));
        }
        Ok(())
    }

    /// Persistence-of-excitation order required per input channel: `2 Σ n_i` for the
    /// shared additive input, `2 n_i` for each MISO channel.
    pub fn required_excitation(&self) -> Vec<(usize, usize)> {
        match self.kind {
            SetupKind::Additive => {
                vec![(0, 2 * self.structures.iter().map(|s| s.n).sum::<usize>())]
            }
            SetupKind::Miso => self
                .structures
                .iter()
                .enumerate()
                .map(|(i, s)| (i, 2 * s.n))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerMethod {
    Gn,
    Srivc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityPolicy {
    /// Mirror unstable denominator roots into the left half-plane and continue.
    Reflect,
    /// Abort with an instability error.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub inner_method: InnerMethod,
    pub inner_max_iters: usize,
    pub inner_rel_tol: f64,
    /// Run exactly `inner_max_iters` steps per coordinate update.
    pub fixed_inner_iters: bool,
    pub outer_max_iters: usize,
    pub outer_rel_tol: f64,
    pub stability_policy: StabilityPolicy,
    pub condition_limit: f64,
    pub warmup_skip: usize,
    /// Intersample behaviour assumed by every filtering step; overrides the record's own flag.
    pub intersample: Intersample,
    /// Revert any coordinate update that increases the cost.
    pub descent_safeguard: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            inner_method: InnerMethod::Srivc,
            inner_max_iters: 100,
            inner_rel_tol: 1e-8,
            fixed_inner_iters: false,
            outer_max_iters: 30,
            outer_rel_tol: 1e-10,
            stability_policy: StabilityPolicy::Reflect,
            condition_limit: 1e12,
            warmup_skip: 0,
            intersample: Intersample::Zoh,
            descent_safeguard: true,
        }
    }
}

impl EstimatorConfig {
    /// Ten SRIVC steps per coordinate, at most 30 sweeps, no descent safeguard.
    pub fn fixed_inner_protocol() -> Self {
        Self {
            inner_max_iters: 10,
            fixed_inner_iters: true,
            descent_safeguard: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_max_iters == 0 || self.outer_max_iters == 0 {
            return Err(IdentError::InvalidInput(
                "iteration caps must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("inner_rel_tol", self.inner_rel_tol),
            ("outer_rel_tol", self.outer_rel_tol),
            ("condition_limit", self.condition_limit),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(IdentError::InvalidInput(format!(
                    "{} must be positive and finite, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// Solves `m x = rhs` after checking the 2-norm condition number of `m` with rows and
/// columns scaled to unit norm, so the check does not depend on time units.
fn guarded_solve<T: Scalar>(m: &DMatrix<T>, rhs: &DVector<T>, limit: f64) -> Result<DVector<T>> {
    let finite = m.iter().chain(rhs.iter()).all(|v| v.is_finite_value());
    if !finite {
        return Err(IdentError::NonFinite("normal equations".into()));
    }
    let inv_norm = |v: T| {
        if v > T::zero() {
            T::one() / v
        } else {
            T::one()
        }
    };
    let cols: Vec<T> = m.column_iter().map(|c| inv_norm(c.norm())).collect();
    let mut scaled = m.clone();
    for (j, c) in cols.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*c);
    }
    let rows: Vec<T> = scaled.row_iter().map(|r| inv_norm(r.norm())).collect();
    let mut b = rhs.clone();
    for (i, r) in rows.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*r);
        b[i] *= *r;
    }
    let sv = scaled.clone().svd(false, false).singular_values;
    let smax = sv.max().to_f64_lossy();
    let smin = sv.min().to_f64_lossy();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition <= limit) {
        return Err(IdentError::Singular { condition, limit });
    }
    let y = scaled
        .col_piv_qr()
        .solve(&b)
        .ok_or(IdentError::Singular { condition, limit })?;
    Ok(DVector::from_iterator(
        y.len(),
        y.iter().zip(&cols).map(|(v, c)| *v * *c),
    ))
}

/// One Gauss-Newton update `[Σ φ̂ φ̂ᵀ]⁻¹ Σ φ̂ (e + (B/A²) u)`.
pub fn gn_step<T: Scalar>(
    theta: &ParameterVector<T>,
    sub: &Subproblem<'_, T>,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    let bundle = RegressionBundle::build(theta, sub)?;
    gn_update(&bundle, sub, config)
}

fn gn_update<T: Scalar>(
    bundle: &RegressionBundle<T>,
    sub: &Subproblem<'_, T>,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    let normal = cross_moment(&bundle.instrument, &bundle.instrument, sub.warmup);
    let target = gradient_target(&bundle.theta, sub.u, sub.h, sub.intersample)?;
    let rhs_signal: Vec<T> = bundle
        .residual
        .iter()
        .zip(&target)
        .map(|(&e, &g)| e + g)
        .collect();
    let rhs = cross_vector(&bundle.instrument, &rhs_signal, sub.warmup);
    let x = guarded_solve(&normal, &rhs, config.condition_limit)?;
    ParameterVector::new(bundle.theta.structure(), x.iter().copied().collect())
}

/// One SRIVC update `[Σ φ̂ φ_fᵀ]⁻¹ Σ φ̂ ỹ_f`.
pub fn srivc_step<T: Scalar>(
    theta: &ParameterVector<T>,
    sub: &Subproblem<'_, T>,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    let bundle = RegressionBundle::build(theta, sub)?;
    srivc_update(&bundle, sub, config)
}

fn srivc_update<T: Scalar>(
    bundle: &RegressionBundle<T>,
    sub: &Subproblem<'_, T>,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    let normal = cross_moment(&bundle.instrument, &bundle.regressor, sub.warmup);
    let rhs = cross_vector(&bundle.instrument, &bundle.filtered_output, sub.warmup);
    let x = guarded_solve(&normal, &rhs, config.condition_limit)?;
    ParameterVector::new(bundle.theta.structure(), x.iter().copied().collect())
}

/// Applies the stability policy to an iterate; returns the (possibly reflected) vector and
/// the number of reflected roots.
pub fn enforce_stability<T: Scalar>(
    theta: ParameterVector<T>,
    policy: StabilityPolicy,
) -> Result<(ParameterVector<T>, usize)> {
    let tf = theta.to_transfer_function()?;
    if tf.is_stable()? {
        return Ok((theta, 0));
    }
    match policy {
        StabilityPolicy::Reject => {
            Err(IdentError::Unstable(format!("estimate {} is unstable", tf)))
        }
        StabilityPolicy::Reflect => {
            let (den, count) = reflect_unstable(tf.den())?;
            let s = theta.structure();
            let mut v: Vec<T> = (1..=s.n).map(|k| den.coeff(k)).collect();
            v.extend_from_slice(theta.numerator_params());
            Ok((ParameterVector::new(s, v)?, count))
        }
    }
}

fn relative_change<T: Scalar>(new: &[T], old: &[T]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (a, b) in new.iter().zip(old) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Result of one coordinate minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome<T: Scalar = f64> {
    pub theta: ParameterVector<T>,
    pub iterations: usize,
    pub stationarity: T,
    /// Last relative parameter change fell below `inner_rel_tol`.
    pub converged: bool,
    pub reflected_roots: usize,
    pub last_change: f64,
}

/// Iterates the configured inner step from `theta0` on one subproblem.
pub fn inner_solve<T: Scalar>(
    theta0: &ParameterVector<T>,
    sub: &Subproblem<'_, T>,
    config: &EstimatorConfig,
) -> Result<InnerOutcome<T>> {
    config.validate()?;
    let (mut theta, mut reflected) = enforce_stability(theta0.clone(), config.stability_policy)?;
    theta.to_transfer_function()?.check_model()?;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    let mut converged = false;
    let mut bundle = RegressionBundle::build(&theta, sub)?;
    for _ in 0..config.inner_max_iters {
        let next = match config.inner_method {
            InnerMethod::Gn => gn_update(&bundle, sub, config)?,
            InnerMethod::Srivc => srivc_update(&bundle, sub, config)?,
        };
        let (next, count) = enforce_stability(next, config.stability_policy)?;
        reflected += count;
        next.to_transfer_function()?.check_model()?;
        iterations += 1;
        last_change = relative_change(next.values(), theta.values());
        theta = next;
        bundle = RegressionBundle::build(&theta, sub)?;
        converged = last_change < config.inner_rel_tol;
        if converged && !config.fixed_inner_iters {
            break;
        }
    }
    Ok(InnerOutcome {
        stationarity: bundle.stationarity_norm(),
        theta,
        iterations,
        converged,
        reflected_roots: reflected,
        last_change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SafeguardAction {
    ReflectedRoots { count: usize },
    RevertedCoordinate { cost_before: f64, cost_after: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafeguardEvent {
    /// 1-based outer iteration.
    pub outer: usize,
    /// 1-based submodel index.
    pub submodel: usize,
    #[serde(flatten)]
    pub action: SafeguardAction,
}

/// Trace of a block coordinate descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport<T: Scalar = f64> {
    /// Parameters after each outer iteration.
    pub beta_trajectory: Vec<Vec<ParameterVector<T>>>,
    /// Per outer iteration, per submodel: `‖(1/N) Σ φ̂_f e‖` at the accepted parameters.
    pub stationarity_norms: Vec<Vec<T>>,
    /// Cost `V(β)` after each outer iteration.
    pub cost_trajectory: Vec<T>,
    pub initial_cost: T,
    pub converged: bool,
    pub inner_iterations: Vec<Vec<usize>>,
    pub safeguard_events: Vec<SafeguardEvent>,
}

impl<T: Scalar> EstimationReport<T> {
    pub fn final_beta(&self) -> Option<&[ParameterVector<T>]> {
        self.beta_trajectory.last().map(|v| v.as_slice())
    }

    pub fn outer_iterations(&self) -> usize {
        self.beta_trajectory.len()
    }
}

/// `V(β) = (1/N) Σ (y - Σ_i G_i u_i)²` with the configured warm-up skip.
pub fn cost<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    beta: &[ParameterVector<T>],
    warmup: usize,
) -> Result<T> {
    setup.check_record(record)?;
    let mut e = record.output.clone();
    for (j, th) in beta.iter().enumerate() {
        let yj = submodel_output(record, setup, &th.to_transfer_function()?, j)?;
        for (a, b) in e.iter_mut().zip(yj) {
            *a -= b;
        }
    }
    Ok(mean_square(&e, warmup))
}

fn check_init<T: Scalar>(setup: &ModelSetup, init: &[ParameterVector<T>]) -> Result<()> {
    if init.len() != setup.len() {
        return Err(IdentError::InvalidInput(format!(
            "{} initial models for {} submodels",
            init.len(),
            setup.len()
        )));
    }
    for (i, (th, s)) in init.iter().zip(&setup.structures).enumerate() {
        if th.structure() != *s {
            return Err(IdentError::StructureMismatch(format!(
                "initial model {} has (n={}, m={}), setup expects (n={}, m={})",
                i + 1,
                th.structure().n,
                th.structure().m,
                s.n,
                s.m
            )));
        }
    }
    Ok(())
}

fn at(outer: usize, submodel: usize) -> impl FnOnce(IdentError) -> IdentError {
    move |e| IdentError::AtCoordinate {
        outer,
        submodel,
        source: Box::new(e),
    }
}

fn under_config<'r, T: Scalar>(
    record: &'r DataRecord<T>,
    config: &EstimatorConfig,
) -> Cow<'r, DataRecord<T>> {
    if record.intersample == config.intersample {
        Cow::Borrowed(record)
    } else {
        let mut r = record.clone();
        r.intersample = config.intersample;
        Cow::Owned(r)
    }
}

/// Runs block coordinate descent from `init`.
pub fn bcd_identify<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    init: &[ParameterVector<T>],
    config: &EstimatorConfig,
) -> Result<EstimationReport<T>> {
    let record = &*under_config(record, config);
    config.validate()?;
    setup.check_record(record)?;
    check_init(setup, init)?;
    let k = setup.len();
    let warmup = config.warmup_skip;
    let mut beta: Vec<ParameterVector<T>> = Vec::with_capacity(k);
    let mut events = Vec::new();
    for (i, th) in init.iter().enumerate() {
        let (th, count) =
            enforce_stability(th.clone(), config.stability_policy).map_err(at(0, i + 1))?;
        th.to_transfer_function()
            .and_then(|g| g.check_model())
            .map_err(at(0, i + 1))?;
        if count > 0 {
            events.push(SafeguardEvent {
                outer: 0,
                submodel: i + 1,
                action: SafeguardAction::ReflectedRoots { count },
            });
        }
        beta.push(th);
    }
    let mut outputs: Vec<Vec<T>> = beta
        .iter()
        .enumerate()
        .map(|(j, th)| submodel_output(record, setup, &th.to_transfer_function()?, j))
        .collect::<Result<_>>()?;
    let total_cost = |outputs: &[Vec<T>]| -> T {
        let e: Vec<T> = (0..record.len())
            .map(|t| outputs.iter().fold(record.output[t], |acc, o| acc - o[t]))
            .collect();
        mean_square(&e, warmup)
    };
    let initial_cost = total_cost(&outputs);
    let mut report = EstimationReport {
        beta_trajectory: Vec::new(),
        stationarity_norms: Vec::new(),
        cost_trajectory: Vec::new(),
        initial_cost,
        converged: false,
        inner_iterations: Vec::new(),
        safeguard_events: events,
    };
    for l in 1..=config.outer_max_iters {
        let previous = beta.clone();
        let mut stats = Vec::with_capacity(k);
        let mut iters = Vec::with_capacity(k);
        for i in 0..k {
            let u = &record.inputs[setup.input_index(i)];
            let y_tilde: Vec<T> = (0..record.len())
                .map(|t| {
                    outputs
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .fold(record.output[t], |acc, (_, o)| acc - o[t])
                })
                .collect();
            let sub = Subproblem::new(&y_tilde, u, record.h, record.intersample, warmup)?;
            let outcome = inner_solve(&beta[i], &sub, config).map_err(at(l, i + 1))?;
            if outcome.reflected_roots > 0 {
                report.safeguard_events.push(SafeguardEvent {
                    outer: l,
                    submodel: i + 1,
                    action: SafeguardAction::ReflectedRoots {
                        count: outcome.reflected_roots,
                    },
                });
            }
            let new_out = filter_signal(
                &outcome.theta.to_transfer_function()?,
                u,
                record.h,
                record.intersample,
            )?;
            let mut accept = true;
            if config.descent_safeguard {
                let before: Vec<T> = y_tilde
                    .iter()
                    .zip(&outputs[i])
                    .map(|(&a, &b)| a - b)
                    .collect();
                let after: Vec<T> = y_tilde.iter().zip(&new_out).map(|(&a, &b)| a - b).collect();
                let (cb, ca) = (mean_square(&before, warmup), mean_square(&after, warmup));
                if ca > cb {
                    accept = false;
                    report.safeguard_events.push(SafeguardEvent {
                        outer: l,
                        submodel: i + 1,
                        action: SafeguardAction::RevertedCoordinate {
                            cost_before: cb.to_f64_lossy(),
                            cost_after: ca.to_f64_lossy(),
                        },
                    });
                }
            }
            if accept {
                stats.push(outcome.stationarity);
                beta[i] = outcome.theta;
                outputs[i] = new_out;
            } else {
                stats.push(
                    RegressionBundle::build(&beta[i], &sub)
                        .map_err(at(l, i + 1))?
                        .stationarity_norm(),
                );
            }
            iters.push(outcome.iterations);
        }
        report.cost_trajectory.push(total_cost(&outputs));
        report.stationarity_norms.push(stats);
        report.inner_iterations.push(iters);
        report.beta_trajectory.push(beta.clone());
        let flat_new: Vec<T> = beta
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect();
        let flat_old: Vec<T> = previous
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect();
        if relative_change(&flat_new, &flat_old) < config.outer_rel_tol {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// One coordinate update of submodel `target` with every other submodel held at `fixed`.
pub fn one_descent<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    fixed: &[TransferFunction<T>],
    target: usize,
    theta0: &ParameterVector<T>,
    config: &EstimatorConfig,
) -> Result<InnerOutcome<T>> {
    let record = &*under_config(record, config);
    let y_tilde = residual_output(record, setup, fixed, target)?;
    let sub = Subproblem::new(
        &y_tilde,
        &record.inputs[setup.input_index(target)],
        record.h,
        record.intersample,
        config.warmup_skip,
    )?;
    inner_solve(theta0, &sub, config)
}

/// `‖(1/N) Σ φ̂_f(θ_i) e(θ_i)‖` for each submodel, others held at `beta`.
pub fn stationarity_check<T: Scalar>(
    beta: &[ParameterVector<T>],
    record: &DataRecord<T>,
    setup: &ModelSetup,
    config: &EstimatorConfig,
) -> Result<Vec<T>> {
    let record = &*under_config(record, config);
    check_init(setup, beta)?;
    let models: Vec<TransferFunction<T>> = beta
        .iter()
        .map(|t| t.to_transfer_function())
        .collect::<Result<_>>()?;
    (0..setup.len())
        .map(|i| {
            let y_tilde = residual_output(record, setup, &models, i)?;
            let sub = Subproblem::new(
                &y_tilde,
                &record.inputs[setup.input_index(i)],
                record.h,
                record.intersample,
                config.warmup_skip,
            )?;
            Ok(RegressionBundle::build(&beta[i], &sub)?.stationarity_norm())
        })
        .collect()
}

/// Relative singular-value threshold for the rank estimates below.
pub const RANK_REL_TOL: f64 = 1e-6;

/// Singular-value summary of a diagnostic matrix.
///
/// Rank and the relative smallest singular value are taken from the matrix after
/// row and column equilibration, so blocks of very different magnitude do not
/// masquerade as rank loss. The raw singular values are kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDiagnostics<T: Scalar = f64> {
    pub matrix: DMatrix<T>,
    /// Singular values of `matrix`, descending.
    pub singular_values: Vec<T>,
    /// Singular values of the equilibrated matrix, descending.
    pub scaled_singular_values: Vec<T>,
    pub rank: usize,
    /// Condition number of `matrix`.
    pub condition: f64,
    /// Condition number of the equilibrated matrix.
    pub scaled_condition: f64,
}

fn sorted_singular_values<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let mut sv: Vec<T> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

fn condition_of<T: Scalar>(sv: &[T]) -> f64 {
    let smax = sv.first().map(|v| v.to_f64_lossy()).unwrap_or(0.0);
    let smin = sv.last().map(|v| v.to_f64_lossy()).unwrap_or(0.0);
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

/// Scales rows, then columns, to unit 2-norm. Zero rows and columns are left alone.
pub fn equilibrate<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        let n = r.norm();
        if n > T::zero() {
            r /= n;
        }
    }
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        if n > T::zero() {
            c /= n;
        }
    }
    out
}

impl<T: Scalar> RankDiagnostics<T> {
    pub fn from_matrix(matrix: DMatrix<T>, rel_tol: f64) -> Self {
        let sv = sorted_singular_values(&matrix);
        let scaled = sorted_singular_values(&equilibrate(&matrix));
        let top = scaled.first().map(|v| v.to_f64_lossy()).unwrap_or(0.0);
        let rank = scaled
            .iter()
            .filter(|v| v.to_f64_lossy() > rel_tol * top)
            .count();
        Self {
            condition: condition_of(&sv),
            scaled_condition: condition_of(&scaled),
            matrix,
            singular_values: sv,
            scaled_singular_values: scaled,
            rank,
        }
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.matrix.nrows().min(self.matrix.ncols())
    }

    /// Smallest over largest singular value of the equilibrated matrix.
    pub fn relative_smallest(&self) -> f64 {
        1.0 / self.scaled_condition
    }

    /// Smallest over largest singular value of the raw matrix.
    pub fn raw_relative_smallest(&self) -> f64 {
        1.0 / self.condition
    }
}

/// Empirical `Φ`: block `(i, j)` is `(1/N) Σ [(1/Ā_i²) u_i-stack][(1/(A_j* Ā_j)) u_j-stack]ᵀ`
/// with stacks `[p^{n+m}, ..., 1] u`.
pub fn phi_matrix<T: Scalar>(
    record: &DataRecord<T>,
    setup: &ModelSetup,
    model_dens: &[Polynomial<T>],
    true_dens: &[Polynomial<T>],
    warmup: usize,
) -> Result<RankDiagnostics<T>> {
    setup.check_record(record)?;
    if model_dens.len() != setup.len() || true_dens.len() != setup.len() {
        return Err(IdentError::InvalidInput(
            "one model and one true denominator per submodel required".into(),
        ));
    }
    if warmup >= record.len() {
        return Err(IdentError::InvalidInput(
            "warm-up skip leaves no samples".into(),
        ));
    }
    let mut left = Vec::with_capacity(setup.len());
    let mut right = Vec::with_capacity(setup.len());
    for (i, s) in setup.structures.iter().enumerate() {
        let u = &record.inputs[setup.input_index(i)];
        let order = s.n + s.m;
        let a_bar = &model_dens[i];
        left.push(descending_stack(
            &(a_bar * a_bar),
            order,
            u,
            record.h,
            record.intersample,
        )?);
        right.push(descending_stack(
            &(&true_dens[i] * a_bar),
            order,
            u,
            record.h,
            record.intersample,
        )?);
    }
    let size: usize = setup.structures.iter().map(|s| s.n_params()).sum();
    let mut phi = DMatrix::<T>::zeros(size, size);
    let mut r0 = 0;
    for l in &left {
        let mut c0 = 0;
        for r in &right {
            let block = cross_moment(l, r, warmup);
            phi.view_mut((r0, c0), (l.ncols(), r.ncols()))
                .copy_from(&block);
            c0 += r.ncols();
        }
        r0 += l.ncols();
    }
    Ok(RankDiagnostics::from_matrix(phi, RANK_REL_TOL))
}

/// Norm of each block row of `Φ η`, the empirical bias condition per submodel.
pub fn bias_condition<T: Scalar>(phi: &DMatrix<T>, etas: &[BiasVector<T>]) -> Result<Vec<T>> {
    let stacked: Vec<T> = etas
        .iter()
        .flat_map(|e| e.descending().iter().copied())
        .collect();
    if stacked.len() != phi.ncols() {
        return Err(IdentError::StructureMismatch(format!(
            "bias vectors have {} entries, matrix has {} columns",
            stacked.len(),
            phi.ncols()
        )));
    }
    let prod = phi * DVector::from_vec(stacked);
    let mut out = Vec::with_capacity(etas.len());
    let mut r0 = 0;
    for e in etas {
        out.push(prod.rows(r0, e.len()).norm());
        r0 += e.len();
    }
    Ok(out)
}

/// Result of a persistence-of-excitation test.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationReport {
    pub required: usize,
    pub full_rank: bool,
    pub rank: usize,
    /// Eigenvalues of the lag covariance, descending.
    pub eigenvalues: Vec<f64>,
}

/// Tests persistence of excitation of order `required`.
///
/// Uses the sample covariance of the lag vectors `[u_k, u_{k-1}, ..., u_{k-r+1}]`, which
/// approximates the Toeplitz autocovariance matrix of size `r` without the edge effects of
/// zero padding, so signals with finitely many spectral lines give exactly deficient rank.
pub fn excitation_order_check<T: Scalar>(u: &[T], required: usize) -> Result<ExcitationReport> {
    if required == 0 {
        return Ok(ExcitationReport {
            required,
            full_rank: true,
            rank: 0,
            eigenvalues: vec![],
        });
    }
    if u.len() < 2 * required {
        return Err(IdentError::InvalidInput(format!(
            "{} samples are too few to test excitation order {}",
            u.len(),
            required
        )));
    }
    let x: Vec<f64> = u.iter().map(|v| v.to_f64_lossy()).collect();
    let rows = x.len() - required + 1;
    let lag = DMatrix::<f64>::from_fn(rows, required, |k, j| x[k + required - 1 - j]);
    let cov = lag.transpose() * &lag / rows as f64;
    let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let top = eig.first().copied().unwrap_or(0.0);
    let rank = eig
        .iter()
        .filter(|&&v| v > RANK_REL_TOL * top && top > 0.0)
        .count();
    Ok(ExcitationReport {
        required,
        full_rank: rank == required,
        rank,
        eigenvalues: eig,
    })
}

/// Least-squares state-variable-filter initializer: regresses `F ỹ` on
/// `[-p^j F ỹ, p^j F u]` with `F = 1/(1 + p/λ)^n`.
pub fn svf_initialize<T: Scalar>(
    y_tilde: &[T],
    u: &[T],
    structure: ModelStructure,
    h: T,
    lambda: T,
    intersample: Intersample,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    structure.validate()?;
    if !(lambda > T::zero()) {
        return Err(IdentError::InvalidInput(
            "filter bandwidth must be positive".into(),
        ));
    }
    let single = Polynomial::new(vec![T::one(), T::one() / lambda]);
    let mut f = Polynomial::one();
    for _ in 0..structure.n {
        f = &f * &single;
    }
    let yb = derivative_filter_bank(&f, structure.n, y_tilde, h, intersample)?;
    let ub = derivative_filter_bank(&f, structure.m, u, h, intersample)?;
    let mut reg = DMatrix::<T>::zeros(u.len(), structure.n_params());
    reg.columns_mut(0, structure.n)
        .copy_from(&(-yb.columns(1, structure.n)));
    reg.columns_mut(structure.n, structure.m + 1).copy_from(&ub);
    let target: Vec<T> = yb.column(0).iter().copied().collect();
    let normal = cross_moment(&reg, &reg, config.warmup_skip);
    let rhs = cross_vector(&reg, &target, config.warmup_skip);
    let x = guarded_solve(&normal, &rhs, config.condition_limit)?;
    let theta = ParameterVector::new(structure, x.iter().copied().collect())?;
    Ok(enforce_stability(theta, StabilityPolicy::Reflect)?.0)
}

/// Candidate SVF bandwidths: eight values log-spaced from `0.005 π/h` to `0.5 π/h`.
pub fn svf_bandwidth_grid<T: Scalar>(h: T) -> Vec<T> {
    (0..8)
        .map(|k| T::pi() / h * T::lit(0.005 * 100f64.powf(k as f64 / 7.0)))
        .collect()
}

/// SVF fit over [`svf_bandwidth_grid`], keeping the candidate with the smallest
/// output-error cost on `(u, ỹ)`. Candidates that fail are skipped.
pub fn svf_initialize_auto<T: Scalar>(
    y_tilde: &[T],
    u: &[T],
    structure: ModelStructure,
    h: T,
    intersample: Intersample,
    config: &EstimatorConfig,
) -> Result<ParameterVector<T>> {
    let mut best: Option<(T, ParameterVector<T>)> = None;
    let mut last_err = None;
    for lambda in svf_bandwidth_grid(h) {
        let fitted = svf_initialize(y_tilde, u, structure, h, lambda, intersample, config)
            .and_then(|th| {
                let tf = th.to_transfer_function()?;
                tf.check_model()?;
                let yhat = filter_signal(&tf, u, h, intersample)?;
                let e: Vec<T> = y_tilde.iter().zip(&yhat).map(|(&a, &b)| a - b).collect();
                Ok((mean_square(&e, config.warmup_skip), th))
            });
        match fitted {
            Ok((c, th)) if c.is_finite_value() && best.as_ref().is_none_or(|(b, _)| c < *b) => {
                best = Some((c, th))
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.map(|(_, th)| th).ok_or_else(|| {
        last_err.unwrap_or_else(|| IdentError::NonFinite("state-variable-filter start".into()))
    })
}

/// Pairs each true submodel with an estimated one, minimizing the total parameter-error
/// 2-norm over assignments between submodels of equal structure.
pub fn match_submodels<T: Scalar>(
    truth: &[ParameterVector<T>],
    estimate: &[ParameterVector<T>],
) -> Vec<usize> {
    let k = truth.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |p| {
        if p.iter()
            .enumerate()
            .any(|(i, &j)| truth[i].structure() != estimate[j].structure())
        {
            return;
        }
        let total: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &j)| truth[i].distance(&estimate[j]).to_f64_lossy())
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p.to_vec()));
        }
    });
    best.map(|(_, p)| p).unwrap_or_else(|| (0..k).collect())
}

fn permute(p: &mut [usize], start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}
