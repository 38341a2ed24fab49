//! Monte Carlo harness for the bias and consistency studies.
//!
//! Every run draws its own inputs and noise from a ChaCha8 stream seeded by
//! [`run_seed`], so results do not depend on scheduling or on the number of workers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IdentError, Result};
use crate::estimator::{
    bcd_identify, inner_solve, match_submodels, svf_initialize_auto, EstimatorConfig, ModelSetup,
    SetupKind,
};
use crate::ltisim::{filter_signal, simulate_noise_free, DataRecord, Intersample};
use crate::poly::{ModelStructure, ParameterVector, Polynomial, TransferFunction};
use crate::regression::{residual_output, Subproblem};

pub const BENCHMARK_SAMPLING_PERIOD: f64 = 0.02;
pub const BENCHMARK_NOISE_VARIANCE: f64 = 0.25;

/// True subsystems and the two fixed first-submodel estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSystems {
    pub g1: TransferFunction,
    pub g2: TransferFunction,
    pub g1a: TransferFunction,
    pub g1b: TransferFunction,
}

pub fn benchmark_systems() -> BenchmarkSystems {
    let tf = |num: &[f64], den: &[f64]| {
        TransferFunction::from_descending(num, den).expect("valid constant system")
    };
    BenchmarkSystems {
        g1: tf(&[2.0], &[0.25, 0.25, 1.0]),
        g2: tf(&[1.0], &[0.025, 0.01, 1.0]),
        g1a: tf(&[2.2], &[0.2, 0.2, 1.0]),
        g1b: tf(&[1.7], &[0.1, 0.27, 1.0]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Submodels other than the target stay at their initial models; the target is
    /// solved by inner iterations alone.
    OneDescent,
    /// Full block coordinate descent.
    FullBcd,
}

/// How a submodel is started.
#[derive(Debug, Clone, PartialEq)]
pub enum InitModel {
    Fixed(TransferFunction),
    /// Least-squares state-variable-filter fit to the residual output left by the other
    /// (fixed) initial models.
    StateVariableFilter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub mc_runs: usize,
    pub sample_sizes: Vec<usize>,
    pub base_seed: u64,
    pub setup: ModelSetup,
    pub truths: Vec<TransferFunction>,
    pub init_models: Vec<InitModel>,
    pub estimator_config: EstimatorConfig,
    pub protocol: Protocol,
    /// Submodel solved under the one-descent protocol (0-based).
    pub target: usize,
    pub h: f64,
    pub noise_variance: f64,
    pub input_intersample: Intersample,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mc_runs == 0 {
            return Err(IdentError::InvalidInput(
                "mc_runs must be at least 1".into(),
            ));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IdentError::InvalidInput(
                "sample sizes must be non-empty and strictly increasing".into(),
            ));
        }
        if self.sample_sizes[0] < 10 {
            return Err(IdentError::InvalidInput(
                "sample sizes below 10 are not supported".into(),
            ));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(IdentError::InvalidInput(
                "sampling period must be positive".into(),
            ));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(IdentError::InvalidInput(
                "noise variance must be finite and non-negative".into(),
            ));
        }
        self.estimator_config.validate()?;
        let k = self.setup.len();
        if self.truths.len() != k || self.init_models.len() != k {
            return Err(IdentError::InvalidInput(format!(
                "{} submodels need {} truths and {} initial models",
                k,
                self.truths.len(),
                self.init_models.len()
            )));
        }
        if self.target >= k {
            return Err(IdentError::InvalidInput(format!(
                "target submodel {} out of range",
                self.target + 1
            )));
        }
        for (i, (g, s)) in self.truths.iter().zip(&self.setup.structures).enumerate() {
            g.parameters(*s).map_err(|e| {
                IdentError::StructureMismatch(format!(
                    "true system {} does not fit its structure: {}",
                    i + 1,
                    e
                ))
            })?;
            if !g.is_stable()? {
                return Err(IdentError::Unstable(format!(
                    "true system {} is unstable",
                    i + 1
                )));
            }
        }
        let svf_count = self
            .init_models
            .iter()
            .filter(|m| matches!(m, InitModel::StateVariableFilter))
            .count();
        if svf_count > 1 {
            return Err(IdentError::InvalidInput(
                "at most one submodel may use the state-variable-filter start".into(),
            ));
        }
        if self.protocol == Protocol::OneDescent {
            for (i, m) in self.init_models.iter().enumerate() {
                if i != self.target && !matches!(m, InitModel::Fixed(_)) {
                    return Err(IdentError::InvalidInput(format!(
                        "one-descent protocol needs a fixed model for submodel {}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Submodels whose estimates are reported.
    pub fn reported(&self) -> Vec<usize> {
        match self.protocol {
            Protocol::OneDescent => vec![self.target],
            Protocol::FullBcd => (0..self.setup.len()).collect(),
        }
    }

    /// Serializable description used for hashing and manifests.
    pub fn digest(&self) -> SpecDigest {
        SpecDigest {
            name: self.name.clone(),
            mc_runs: self.mc_runs,
            sample_sizes: self.sample_sizes.clone(),
            base_seed: self.base_seed,
            setup: self.setup.clone(),
            truths: self
                .truths
                .iter()
                .map(|g| (g.num().descending(), g.den().descending()))
                .collect(),
            init_models: self
                .init_models
                .iter()
                .map(|m| match m {
                    InitModel::Fixed(g) => format!(
                        "fixed {:?} / {:?}",
                        g.num().descending(),
                        g.den().descending()
                    ),
                    InitModel::StateVariableFilter => "state_variable_filter".into(),
                })
                .collect(),
            estimator_config: self.estimator_config.clone(),
            protocol: self.protocol,
            target: self.target,
            h: self.h,
            noise_variance: self.noise_variance,
            input_intersample: self.input_intersample,
        }
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(&self.digest()).expect("digest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecDigest {
    pub name: String,
    pub mc_runs: usize,
    pub sample_sizes: Vec<usize>,
    pub base_seed: u64,
    pub setup: ModelSetup,
    /// `(numerator, denominator)` in descending powers.
    pub truths: Vec<(Vec<f64>, Vec<f64>)>,
    pub init_models: Vec<String>,
    pub estimator_config: EstimatorConfig,
    pub protocol: Protocol,
    pub target: usize,
    pub h: f64,
    pub noise_variance: f64,
    pub input_intersample: Intersample,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of run `run` at sample-size index `n_index`:
/// `splitmix64(splitmix64(base ^ splitmix64(n_index)) ^ run)`.
pub fn run_seed(base: u64, n_index: usize, run: usize) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(n_index as u64)) ^ run as u64)
}

/// Inputs and noise of one run: channel 1, channel 2, ..., then the noise, each `len`
/// standard normal draws from one ChaCha8 stream. The noise is scaled to `noise_variance`.
pub fn draw_signals(
    seed: u64,
    channels: usize,
    len: usize,
    noise_variance: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let inputs: Vec<Vec<f64>> = (0..channels)
        .map(|_| (0..len).map(|_| normal()).collect())
        .collect();
    let sd = noise_variance.sqrt();
    let noise = (0..len).map(|_| sd * normal()).collect();
    (inputs, noise)
}

/// Generates the data record of one run.
pub fn generate_record(spec: &ExperimentSpec, n_index: usize, run: usize) -> Result<DataRecord> {
    let len = spec.sample_sizes[n_index];
    let seed = run_seed(spec.base_seed, n_index, run);
    let channels = spec.setup.input_channels();
    let (inputs, noise) = draw_signals(seed, channels.max(2), len, spec.noise_variance);
    let inputs: Vec<Vec<f64>> = inputs.into_iter().take(channels).collect();
    let clean = simulate_noise_free(&spec.truths, &inputs, spec.h, spec.input_intersample)?;
    let output = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
    DataRecord::new(spec.h, inputs, output, spec.input_intersample)
}

/// Outcome of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub n: usize,
    pub run: usize,
    pub seed: u64,
    /// Estimates of the reported submodels, in the order of [`ExperimentSpec::reported`],
    /// after matching for additive setups.
    pub estimates: Vec<ParameterVector>,
    /// Stopping tolerance met (inner for one descent, outer for full descent).
    pub converged: bool,
    /// Finished without error.
    pub completed: bool,
    pub safeguard_events: usize,
    pub iterations: usize,
    pub error: Option<String>,
}

impl RunRecord {
    fn failed(n: usize, run: usize, seed: u64, err: IdentError) -> Self {
        Self {
            n,
            run,
            seed,
            estimates: vec![],
            converged: false,
            completed: false,
            safeguard_events: 0,
            iterations: 0,
            error: Some(err.to_string()),
        }
    }
}

fn init_parameters(spec: &ExperimentSpec, record: &DataRecord) -> Result<Vec<ParameterVector>> {
    let fixed: Vec<TransferFunction> = spec
        .init_models
        .iter()
        .map(|m| match m {
            InitModel::Fixed(g) => g.clone(),
            InitModel::StateVariableFilter => {
                TransferFunction::unchecked(Polynomial::zero(), Polynomial::one())
            }
        })
        .collect();
    let mut out = Vec::with_capacity(fixed.len());
    for (i, (m, s)) in spec
        .init_models
        .iter()
        .zip(&spec.setup.structures)
        .enumerate()
    {
        match m {
            InitModel::Fixed(g) => out.push(g.parameters(*s)?),
            InitModel::StateVariableFilter => {
                let y_tilde = residual_output(record, &spec.setup, &fixed, i)?;
                let u = &record.inputs[spec.setup.input_index(i)];
                let cfg = &spec.estimator_config;
                out.push(svf_initialize_auto(
                    &y_tilde,
                    u,
                    *s,
                    record.h,
                    cfg.intersample,
                    cfg,
                )?);
            }
        }
    }
    Ok(out)
}

/// Runs one Monte Carlo replicate.
pub fn run_single(spec: &ExperimentSpec, n_index: usize, run: usize) -> RunRecord {
    let n = spec.sample_sizes[n_index];
    let seed = run_seed(spec.base_seed, n_index, run);
    match run_single_inner(spec, n_index, run) {
        Ok(r) => r,
        Err(e) => RunRecord::failed(n, run, seed, e),
    }
}

fn run_single_inner(spec: &ExperimentSpec, n_index: usize, run: usize) -> Result<RunRecord> {
    let n = spec.sample_sizes[n_index];
    let seed = run_seed(spec.base_seed, n_index, run);
    let record = generate_record(spec, n_index, run)?;
    let init = init_parameters(spec, &record)?;
    let cfg = &spec.estimator_config;
    let (estimates, converged, events, iterations) = match spec.protocol {
        Protocol::OneDescent => {
            let i = spec.target;
            let others: Vec<TransferFunction> = init
                .iter()
                .map(|t| t.to_transfer_function())
                .collect::<Result<_>>()?;
            let y_tilde = residual_output(&record, &spec.setup, &others, i)?;
            let u = &record.inputs[spec.setup.input_index(i)];
            let sub = Subproblem::new(&y_tilde, u, record.h, cfg.intersample, cfg.warmup_skip)?;
            let out = inner_solve(&init[i], &sub, cfg)?;
            (
                vec![out.theta],
                out.converged,
                usize::from(out.reflected_roots > 0),
                out.iterations,
            )
        }
        Protocol::FullBcd => {
            let report = bcd_identify(&record, &spec.setup, &init, cfg)?;
            let beta = report.final_beta().map(|b| b.to_vec()).unwrap_or(init);
            let estimates = if spec.setup.kind == SetupKind::Additive {
                let truth: Vec<ParameterVector> = spec
                    .truths
                    .iter()
                    .zip(&spec.setup.structures)
                    .map(|(g, s)| g.parameters(*s))
                    .collect::<Result<_>>()?;
                match_submodels(&truth, &beta)
                    .into_iter()
                    .map(|j| beta[j].clone())
                    .collect()
            } else {
                beta
            };
            (
                estimates,
                report.converged,
                report.safeguard_events.len(),
                report.outer_iterations(),
            )
        }
    };
    if estimates
        .iter()
        .any(|t| t.values().iter().any(|v| !v.is_finite()))
    {
        return Err(IdentError::NonFinite("final estimate".into()));
    }
    Ok(RunRecord {
        n,
        run,
        seed,
        estimates,
        converged,
        completed: true,
        safeguard_events: events,
        iterations,
        error: None,
    })
}

/// Which runs enter the aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateOver {
    /// Runs that met their stopping tolerance.
    Converged,
    /// Runs that finished their iteration budget without error. This matches a protocol
    /// whose termination rule is "tolerance or iteration cap".
    Completed,
}

/// Empirical statistics of one parameter at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamAggregate {
    pub n: usize,
    pub param_name: String,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub count: usize,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub base_seed: u64,
    pub config_hash: String,
    pub sample_sizes: Vec<usize>,
    pub param_names: Vec<String>,
    pub truth: Vec<f64>,
    pub aggregate_over: AggregateOver,
    /// Ordered by (sample-size index, run).
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<ParamAggregate>,
}

impl ExperimentResult {
    fn included(&self, r: &RunRecord) -> bool {
        match self.aggregate_over {
            AggregateOver::Converged => r.converged && r.completed,
            AggregateOver::Completed => r.completed,
        }
    }

    pub fn runs_at(&self, n: usize) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.n == n)
    }

    /// Fraction of runs at `n` entering the aggregates.
    pub fn included_fraction(&self, n: usize) -> f64 {
        let total = self.runs_at(n).count();
        if total == 0 {
            return 0.0;
        }
        self.runs_at(n).filter(|r| self.included(r)).count() as f64 / total as f64
    }

    pub fn aggregates_at(&self, n: usize) -> Vec<&ParamAggregate> {
        self.aggregates.iter().filter(|a| a.n == n).collect()
    }

    /// Mean over included runs of the mean absolute parameter error.
    pub fn mean_abs_error(&self, n: usize) -> f64 {
        self.mean_abs_error_where(n, |_| true)
    }

    /// As [`Self::mean_abs_error`], restricted to the parameters of submodel `submodel` (1-based).
    pub fn mean_abs_error_submodel(&self, n: usize, submodel: usize) -> f64 {
        let a = format!("a_{}_", submodel);
        let b = format!("b_{}_", submodel);
        self.mean_abs_error_where(n, |name| name.starts_with(&a) || name.starts_with(&b))
    }

    fn mean_abs_error_where(&self, n: usize, keep: impl Fn(&str) -> bool) -> f64 {
        let mask: Vec<bool> = self.param_names.iter().map(|p| keep(p)).collect();
        let kept = mask.iter().filter(|&&m| m).count();
        let errs: Vec<f64> = self
            .runs_at(n)
            .filter(|r| self.included(r) && kept > 0)
            .map(|r| {
                let flat = r.estimates.iter().flat_map(|t| t.values().iter().copied());
                flat.zip(&self.truth)
                    .zip(&mask)
                    .filter(|(_, &m)| m)
                    .map(|((a, b), _)| (a - b).abs())
                    .sum::<f64>()
                    / kept as f64
            })
            .collect();
        if errs.is_empty() {
            f64::NAN
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    }

    fn compute_aggregates(&mut self) {
        let mut out = Vec::new();
        for &n in &self.sample_sizes {
            let rows: Vec<Vec<f64>> = self
                .runs_at(n)
                .filter(|r| self.included(r))
                .map(|r| {
                    r.estimates
                        .iter()
                        .flat_map(|t| t.values().iter().copied())
                        .collect()
                })
                .collect();
            for (p, name) in self.param_names.iter().enumerate() {
                let vals: Vec<f64> = rows.iter().map(|r| r[p]).collect();
                let (mean, std) = mean_std(&vals);
                let count = vals.len();
                out.push(ParamAggregate {
                    n,
                    param_name: name.clone(),
                    mean,
                    std,
                    stderr: if count > 0 {
                        std / (count as f64).sqrt()
                    } else {
                        f64::NAN
                    },
                    count,
                    truth: self.truth[p],
                });
            }
        }
        self.aggregates = out;
    }
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (sample size, replicate) pair of `spec` on the current rayon pool.
pub fn run_experiment(
    spec: &ExperimentSpec,
    aggregate_over: AggregateOver,
) -> Result<ExperimentResult> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.sample_sizes.len())
        .flat_map(|i| (0..spec.mc_runs).map(move |r| (i, r)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(i, r)| run_single(spec, i, r))
        .collect();
    let reported = spec.reported();
    let mut param_names = Vec::new();
    let mut truth = Vec::new();
    for &i in &reported {
        let s = spec.setup.structures[i];
        param_names.extend(s.param_names(i + 1));
        truth.extend_from_slice(spec.truths[i].parameters(s)?.values());
    }
    let mut result = ExperimentResult {
        name: spec.name.clone(),
        base_seed: spec.base_seed,
        config_hash: spec.config_hash(),
        sample_sizes: spec.sample_sizes.clone(),
        param_names,
        truth,
        aggregate_over,
        runs,
        aggregates: vec![],
    };
    result.compute_aggregates();
    Ok(result)
}

/// One-descent study: submodel 1 fixed, submodel 2 solved to convergence.
pub fn run_bias_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.protocol != Protocol::OneDescent {
        return Err(IdentError::InvalidInput(
            "bias experiment requires the one-descent protocol".into(),
        ));
    }
    run_experiment(spec, AggregateOver::Converged)
}

/// Full block coordinate descent study.
pub fn run_consistency_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.protocol != Protocol::FullBcd {
        return Err(IdentError::InvalidInput(
            "consistency experiment requires the full-descent protocol".into(),
        ));
    }
    let over = if spec.estimator_config.fixed_inner_iters {
        AggregateOver::Completed
    } else {
        AggregateOver::Converged
    };
    run_experiment(spec, over)
}

/// `10 log10(var(signal) / noise_variance)` with the sample variance of `signal`.
pub fn snr_db(signal: &[f64], noise_variance: f64) -> f64 {
    let (_, std) = mean_std(signal);
    10.0 * (std * std / noise_variance).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn mc_runs(self) -> usize {
        match self {
            Scale::Desk => 50,
            Scale::Paper => 300,
        }
    }

    pub fn sample_sizes(self) -> Vec<usize> {
        match self {
            Scale::Desk => log_spaced(2000, 50000, 8),
            Scale::Paper => log_spaced(2000, 50000, 30),
        }
    }
}

/// `count` integers logarithmically spaced from `lo` to `hi` inclusive.
pub fn log_spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp().round() as usize)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentName {
    Bias,
    Consistency,
}

fn benchmark_structures() -> Vec<ModelStructure> {
    let s = ModelStructure::new(2, 0).expect("valid structure");
    vec![s, s]
}

/// Bias study case: `kind` setup with submodel 1 fixed at `fixed`.
pub fn bias_spec(
    kind: SetupKind,
    fixed: TransferFunction,
    name: &str,
    mc_runs: usize,
    sizes: Vec<usize>,
    seed: u64,
) -> ExperimentSpec {
    let sys = benchmark_systems();
    ExperimentSpec {
        name: name.into(),
        mc_runs,
        sample_sizes: sizes,
        base_seed: seed,
        setup: ModelSetup::new(kind, benchmark_structures()).expect("valid setup"),
        truths: vec![sys.g1, sys.g2],
        init_models: vec![InitModel::Fixed(fixed), InitModel::StateVariableFilter],
        estimator_config: EstimatorConfig::default(),
        protocol: Protocol::OneDescent,
        target: 1,
        h: BENCHMARK_SAMPLING_PERIOD,
        noise_variance: BENCHMARK_NOISE_VARIANCE,
        input_intersample: Intersample::Zoh,
    }
}

/// Consistency study case: submodel 1 started at the second fixed estimate, ten SRIVC
/// steps per coordinate, at most 30 sweeps.
pub fn consistency_spec(
    kind: SetupKind,
    name: &str,
    mc_runs: usize,
    sizes: Vec<usize>,
    seed: u64,
) -> ExperimentSpec {
    let sys = benchmark_systems();
    ExperimentSpec {
        name: name.into(),
        mc_runs,
        sample_sizes: sizes,
        base_seed: seed,
        setup: ModelSetup::new(kind, benchmark_structures()).expect("valid setup"),
        truths: vec![sys.g1, sys.g2],
        init_models: vec![InitModel::Fixed(sys.g1b), InitModel::StateVariableFilter],
        estimator_config: EstimatorConfig::fixed_inner_protocol(),
        protocol: Protocol::FullBcd,
        target: 1,
        h: BENCHMARK_SAMPLING_PERIOD,
        noise_variance: BENCHMARK_NOISE_VARIANCE,
        input_intersample: Intersample::Zoh,
    }
}

/// The cases making up a named study.
pub fn named_specs(
    name: ExperimentName,
    mc_runs: usize,
    sizes: Vec<usize>,
    seed: u64,
) -> Vec<ExperimentSpec> {
    let sys = benchmark_systems();
    match name {
        ExperimentName::Bias => vec![
            bias_spec(
                SetupKind::Miso,
                sys.g1a.clone(),
                "miso_a",
                mc_runs,
                sizes.clone(),
                seed,
            ),
            bias_spec(
                SetupKind::Miso,
                sys.g1b.clone(),
                "miso_b",
                mc_runs,
                sizes.clone(),
                seed,
            ),
            bias_spec(
                SetupKind::Additive,
                sys.g1a,
                "additive_a",
                mc_runs,
                sizes.clone(),
                seed,
            ),
            bias_spec(
                SetupKind::Additive,
                sys.g1b,
                "additive_b",
                mc_runs,
                sizes,
                seed,
            ),
        ],
        ExperimentName::Consistency => vec![
            consistency_spec(SetupKind::Miso, "miso", mc_runs, sizes.clone(), seed),
            consistency_spec(SetupKind::Additive, "additive", mc_runs, sizes, seed),
        ],
    }
}

pub fn run_spec(name: ExperimentName, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    match name {
        ExperimentName::Bias => run_bias_experiment(spec),
        ExperimentName::Consistency => run_consistency_experiment(spec),
    }
}

/// Runs a named study and writes one artifact directory per case under `out`.
/// `jobs = 0` uses every available core.
pub fn run_named_experiment(
    name: ExperimentName,
    mc_runs: usize,
    sample_sizes: Vec<usize>,
    seed: u64,
    out: &Path,
    jobs: usize,
) -> Result<Vec<(ExperimentResult, PathBuf)>> {
    let specs = named_specs(name, mc_runs, sample_sizes, seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| IdentError::InvalidInput(format!("cannot start worker pool: {}", e)))?;
    let mut out_list = Vec::with_capacity(specs.len());
    for spec in &specs {
        let result = pool.install(|| run_spec(name, spec))?;
        let dir = out.join(&spec.name);
        emit_artifacts(&result, spec, &dir)?;
        out_list.push((result, dir));
    }
    Ok(out_list)
}

/// Version string written into manifests.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    name: &'a str,
    seed: u64,
    config_hash: &'a str,
    version: String,
    aggregate_over: AggregateOver,
    included_fraction: Vec<(usize, f64)>,
    spec: SpecDigest,
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plot empirical parameter means against sample size from aggregate.csv."""
import csv
import os
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
series = defaultdict(list)
truth = {}
with open(os.path.join(here, "aggregate.csv"), newline="") as f:
    for row in csv.DictReader(f):
        series[row["param_name"]].append((int(row["N"]), float(row["mean"])))
        truth[row["param_name"]] = float(row["truth"])

if not series:
    sys.exit("aggregate.csv has no rows")

fig, axes = plt.subplots(len(series), 1, figsize=(6, 2.4 * len(series)), sharex=True)
if len(series) == 1:
    axes = [axes]
for ax, (name, pts) in zip(axes, sorted(series.items())):
    ns, means = zip(*pts)
    ax.semilogx(ns, means, "o-", label="empirical mean")
    ax.axhline(truth[name], color="k", linestyle="--", label="true value")
    ax.set_ylabel(name)
    ax.grid(True, which="both", alpha=0.3)
axes[0].legend()
axes[-1].set_xlabel("N")
fig.tight_layout()
fig.savefig(os.path.join(here, "parameter_means.png"), dpi=150)
"#;

/// Writes `summary.csv`, `aggregate.csv`, `manifest.json` and `plot.py` into `dir`.
pub fn emit_artifacts(result: &ExperimentResult, spec: &ExperimentSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| IdentError::Io(format!("cannot create {}: {}", dir.display(), e)))?;
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record([
        "N",
        "run",
        "submodel",
        "param_name",
        "estimate",
        "converged",
    ])?;
    let reported = spec.reported();
    for r in &result.runs {
        for (est, &i) in r.estimates.iter().zip(&reported) {
            for (name, v) in est.structure().param_names(i + 1).iter().zip(est.values()) {
                summary.write_record([
                    r.n.to_string(),
                    r.run.to_string(),
                    (i + 1).to_string(),
                    name.clone(),
                    v.to_string(),
                    r.converged.to_string(),
                ])?;
            }
        }
    }
    summary.flush()?;
    let mut agg = csv::Writer::from_path(dir.join("aggregate.csv"))?;
    agg.write_record(["N", "param_name", "mean", "std", "truth"])?;
    for a in &result.aggregates {
        agg.write_record([
            a.n.to_string(),
            a.param_name.clone(),
            a.mean.to_string(),
            a.std.to_string(),
            a.truth.to_string(),
        ])?;
    }
    agg.flush()?;
    let manifest = Manifest {
        name: &result.name,
        seed: result.base_seed,
        config_hash: &result.config_hash,
        version: version_string(),
        aggregate_over: result.aggregate_over,
        included_fraction: result
            .sample_sizes
            .iter()
            .map(|&n| (n, result.included_fraction(n)))
            .collect(),
        spec: spec.digest(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| IdentError::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    fs::write(dir.join("plot.py"), PLOT_SCRIPT)?;
    Ok(())
}

/// One-line text summary per sample size.
pub fn describe(result: &ExperimentResult) -> String {
    let mut s = String::new();
    for &n in &result.sample_sizes {
        let _ = write!(
            s,
            "{} N={:>6} included={:>5.1}%",
            result.name,
            n,
            100.0 * result.included_fraction(n)
        );
        for a in result.aggregates_at(n) {
            let _ = write!(s, "  {}={:.5}", a.param_name, a.mean);
        }
        s.push('\n');
    }
    s
}

/// Writes a record as CSV with columns `t, u_1, ..., u_K, y`.
pub fn write_data_csv(record: &DataRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=record.inputs.len()).map(|i| format!("u_{}", i)));
    header.push("y".into());
    w.write_record(&header)?;
    for (k, t) in record.times().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(record.inputs.iter().map(|u| u[k].to_string()));
        row.push(record.output[k].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_data_csv`]. The sampling period is taken from the
/// time column, which must be uniformly spaced.
pub fn read_data_csv(path: &Path, intersample: Intersample) -> Result<DataRecord> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let k = header.len().saturating_sub(2);
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=k).map(|i| format!("u_{}", i)))
        .chain(std::iter::once("y".to_string()))
        .collect();
    if k == 0 || header != expected {
        return Err(IdentError::InvalidInput(format!(
            "{}: expected columns t, u_1, ..., u_K, y; found {}",
            path.display(),
            header.join(", ")
        )));
    }
    let mut t = Vec::new();
    let mut inputs = vec![Vec::new(); k];
    let mut y = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let vals: Vec<f64> = row
            .iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    IdentError::InvalidInput(format!(
                        "{}: row {}: cannot parse '{}'",
                        path.display(),
                        line + 2,
                        v
                    ))
                })
            })
            .collect::<Result<_>>()?;
        t.push(vals[0]);
        for (i, u) in inputs.iter_mut().enumerate() {
            u.push(vals[i + 1]);
        }
        y.push(vals[k + 1]);
    }
    if t.len() < 2 {
        return Err(IdentError::InvalidInput(format!(
            "{}: need at least two samples",
            path.display()
        )));
    }
    let h = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    let uniform = t
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-6 * h.abs());
    if !(h > 0.0) || !uniform {
        return Err(IdentError::InvalidInput(format!(
            "{}: time column must be uniformly increasing",
            path.display()
        )));
    }
    DataRecord::new(h, inputs, y, intersample)
}

/// Noise-free output of the benchmark systems for one seeded realization.
pub fn benchmark_noise_free_output(kind: SetupKind, len: usize, seed: u64) -> Result<Vec<f64>> {
    let sys = benchmark_systems();
    let (inputs, _) = draw_signals(seed, 2, len, 0.0);
    let inputs = match kind {
        SetupKind::Miso => inputs,
        SetupKind::Additive => inputs.into_iter().take(1).collect(),
    };
    simulate_noise_free(
        &[sys.g1, sys.g2],
        &inputs,
        BENCHMARK_SAMPLING_PERIOD,
        Intersample::Zoh,
    )
}

/// Output of a single transfer function for a seeded white-noise input.
pub fn white_noise_response(
    g: &TransferFunction,
    len: usize,
    seed: u64,
    h: f64,
) -> Result<Vec<f64>> {
    let (inputs, _) = draw_signals(seed, 1, len, 0.0);
    filter_signal(g, &inputs[0], h, Intersample::Zoh)
}
