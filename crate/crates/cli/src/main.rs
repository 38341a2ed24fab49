mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctident::estimator::{
    excitation_order_check, phi_matrix, stationarity_check, svf_initialize_auto, EstimationReport,
};
use ctident::experiments::{
    describe, draw_signals, read_data_csv, run_named_experiment, version_string, write_data_csv,
    ExperimentName, Scale,
};
use ctident::ltisim::{simulate_noise_free, DataRecord};
use ctident::regression::residual_output;
use ctident::{bcd_identify, IdentError, ParameterVector, TransferFunction};
use serde::Serialize;

use config::{InputKind, RunConfig};

const OUT_DIR_ENV: &str = "CTIDENT_OUT_DIR";
const DEFAULT_SEED: u64 = 42;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Ident(#[from] IdentError),
}

impl CliError {
    /// 0 success, 1 i/o or other, 2 validation, 3 numerical singularity, 4 instability.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 1,
            CliError::Ident(e) => match e.root() {
                IdentError::Singular { .. } => 3,
                IdentError::Unstable(_) | IdentError::NotCoprime => 4,
                IdentError::InvalidInput(_)
                | IdentError::StructureMismatch(_)
                | IdentError::DegreeDegenerate { .. }
                | IdentError::Improper { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ctident",
    version,
    about = "Continuous-time MISO and additive SISO identification"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for experiments (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "ctident-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured systems and write data.csv.
    Simulate {
        /// Override signals.samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Write the noise-free output.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Identify the configured model structure from a data file.
    Identify {
        #[arg(long)]
        data: PathBuf,
    },
    /// Excitation and identifiability diagnostics for a data file.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
    },
    /// Replicate the bias or consistency Monte Carlo study.
    Experiment {
        #[arg(value_enum)]
        name: NameArg,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NameArg {
    Bias,
    Consistency,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            samples,
            zero_noise,
        } => cmd_simulate(&cfg, cli.seed, samples, zero_noise, &cli.out),
        Command::Identify { data } => cmd_identify(&cfg, cli.seed, &data, &cli.out),
        Command::Diagnose { data } => cmd_diagnose(&cfg, cli.seed, &data, &cli.out),
        Command::Experiment { name, scale } => {
            cmd_experiment(&cfg, name, scale, cli.seed, cli.jobs, &cli.out)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {}", dir.display(), e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Io(format!("cannot write {}: {}", path.display(), e)))
}

#[derive(Serialize)]
struct SimulateManifest {
    seed: u64,
    samples: usize,
    noise_variance: f64,
    version: String,
}

fn cmd_simulate(
    cfg: &RunConfig,
    seed: Option<u64>,
    samples: Option<usize>,
    zero_noise: bool,
    out: &Path,
) -> Result<(), CliError> {
    let sys = cfg.systems()?;
    let sig = cfg.signals()?;
    let (setup, subs) = cfg.submodels()?;
    let truths: Vec<TransferFunction> = subs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.truth.clone().ok_or_else(|| {
                CliError::Validation(format!(
                    "systems.submodel[{}]: keys num and den are required to simulate",
                    i
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let h = sys.sampling_period.ok_or_else(|| {
        CliError::Validation("systems.sampling_period is required to simulate".into())
    })?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(CliError::Validation(
            "systems.sampling_period must be positive".into(),
        ));
    }
    let len = samples.unwrap_or(sig.samples);
    if len < 2 {
        return Err(CliError::Validation(
            "signals.samples must be at least 2".into(),
        ));
    }
    if !(sig.noise_variance >= 0.0) || !sig.noise_variance.is_finite() {
        return Err(CliError::Validation(
            "signals.noise_variance must be finite and non-negative".into(),
        ));
    }
    let seed = seed.or(sig.seed).unwrap_or(DEFAULT_SEED);
    let variance = if zero_noise { 0.0 } else { sig.noise_variance };
    let channels = setup.input_channels();
    let (mut inputs, noise) = draw_signals(seed, channels, len, variance);
    if sig.input == InputKind::Sine {
        let w = sig.sine_frequency.ok_or_else(|| {
            CliError::Validation("signals.sine_frequency is required for a sine input".into())
        })?;
        if !(w.abs() < std::f64::consts::PI / h) {
            return Err(CliError::Validation(
                "signals.sine_frequency must lie below the Nyquist frequency".into(),
            ));
        }
        for u in inputs.iter_mut() {
            for (k, v) in u.iter_mut().enumerate() {
                *v = (w * k as f64 * h).sin();
            }
        }
    }
    let clean = simulate_noise_free(&truths, &inputs, h, sys.intersample)?;
    let y = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let record = DataRecord::new(h, inputs, y, sys.intersample)?;
    create_dir(out)?;
    let path = out.join("data.csv");
    write_data_csv(&record, &path)?;
    write_json(
        &out.join("simulate.json"),
        &SimulateManifest {
            seed,
            samples: len,
            noise_variance: variance,
            version: version_string(),
        },
    )?;
    println!("wrote {} ({} samples, seed {})", path.display(), len, seed);
    Ok(())
}

fn load_data(cfg: &RunConfig, data: &Path) -> Result<DataRecord, CliError> {
    let sys = cfg.systems()?;
    let record = read_data_csv(data, sys.intersample)?;
    if let Some(h) = sys.sampling_period {
        if (record.h - h).abs() > 1e-6 * h {
            return Err(CliError::Validation(format!(
                "systems.sampling_period = {} disagrees with the data file spacing {}",
                h, record.h
            )));
        }
    }
    Ok(record)
}

#[derive(Serialize)]
struct ModelOut {
    num: Vec<f64>,
    den: Vec<f64>,
    parameters: Vec<f64>,
    param_names: Vec<String>,
}

fn model_out(i: usize, th: &ParameterVector) -> ModelOut {
    let g = th.to_transfer_function().ok();
    ModelOut {
        num: g.as_ref().map(|g| g.num().descending()).unwrap_or_default(),
        den: g.as_ref().map(|g| g.den().descending()).unwrap_or_default(),
        parameters: th.values().to_vec(),
        param_names: th.structure().param_names(i + 1),
    }
}

#[derive(Serialize)]
struct IdentifyReport {
    seed: u64,
    version: String,
    setup: ctident::ModelSetup,
    estimator: ctident::EstimatorConfig,
    converged: bool,
    outer_iterations: usize,
    initial_cost: f64,
    cost_trajectory: Vec<f64>,
    stationarity_norms: Vec<Vec<f64>>,
    inner_iterations: Vec<Vec<usize>>,
    beta_trajectory: Vec<Vec<Vec<f64>>>,
    safeguard_events: Vec<ctident::estimator::SafeguardEvent>,
    initial_models: Vec<ModelOut>,
    final_models: Vec<ModelOut>,
    final_stationarity: Vec<f64>,
}

fn cmd_identify(
    cfg: &RunConfig,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (setup, subs) = cfg.submodels()?;
    let record = load_data(cfg, data)?;
    setup.check_record(&record)?;
    let est = &cfg.estimator;
    // missing starts come from state-variable-filter fits, in submodel order
    let mut init: Vec<Option<ParameterVector>> = subs
        .iter()
        .map(|s| {
            s.init
                .as_ref()
                .map(|g| g.parameters(s.structure))
                .transpose()
        })
        .collect::<Result<_, _>>()?;
    for i in 0..subs.len() {
        if init[i].is_some() {
            continue;
        }
        let others: Vec<TransferFunction> = init
            .iter()
            .map(|t| match t {
                Some(t) => t.to_transfer_function(),
                None => Ok(TransferFunction::unchecked(
                    ctident::Polynomial::zero(),
                    ctident::Polynomial::one(),
                )),
            })
            .collect::<Result<_, _>>()?;
        let y_tilde = residual_output(&record, &setup, &others, i)?;
        let u = &record.inputs[setup.input_index(i)];
        init[i] = Some(svf_initialize_auto(
            &y_tilde,
            u,
            subs[i].structure,
            record.h,
            est.intersample,
            est,
        )?);
    }
    let init: Vec<ParameterVector> = init.into_iter().map(|t| t.expect("filled above")).collect();
    let report: EstimationReport = bcd_identify(&record, &setup, &init, est)?;
    for (l, (c, st)) in report
        .cost_trajectory
        .iter()
        .zip(&report.stationarity_norms)
        .enumerate()
    {
        let st: Vec<String> = st.iter().map(|v| format!("{:.3e}", v)).collect();
        println!(
            "outer {:>3}  cost {:.6e}  stationarity [{}]",
            l + 1,
            c,
            st.join(", ")
        );
    }
    let beta = report
        .final_beta()
        .map(|b| b.to_vec())
        .unwrap_or_else(|| init.clone());
    let final_stationarity = stationarity_check(&beta, &record, &setup, est)?;
    println!(
        "converged: {} after {} outer iterations",
        report.converged,
        report.outer_iterations()
    );
    for (i, th) in beta.iter().enumerate() {
        println!("G{} = {}", i + 1, th.to_transfer_function()?);
    }
    let out_report = IdentifyReport {
        seed: seed.unwrap_or(DEFAULT_SEED),
        version: version_string(),
        setup: setup.clone(),
        estimator: est.clone(),
        converged: report.converged,
        outer_iterations: report.outer_iterations(),
        initial_cost: report.initial_cost,
        cost_trajectory: report.cost_trajectory.clone(),
        stationarity_norms: report.stationarity_norms.clone(),
        inner_iterations: report.inner_iterations.clone(),
        beta_trajectory: report
            .beta_trajectory
            .iter()
            .map(|b| b.iter().map(|t| t.values().to_vec()).collect())
            .collect(),
        safeguard_events: report.safeguard_events.clone(),
        initial_models: init
            .iter()
            .enumerate()
            .map(|(i, t)| model_out(i, t))
            .collect(),
        final_models: beta
            .iter()
            .enumerate()
            .map(|(i, t)| model_out(i, t))
            .collect(),
        final_stationarity,
    };
    create_dir(out)?;
    let path = out.join("report.json");
    write_json(&path, &out_report)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ChannelDiagnostics {
    channel: usize,
    required_order: usize,
    rank: usize,
    persistently_exciting: bool,
}

#[derive(Serialize)]
struct PhiDiagnostics {
    size: usize,
    rank: usize,
    condition: f64,
    relative_smallest_singular_value: f64,
    singular_values: Vec<f64>,
}

#[derive(Serialize)]
struct DiagnoseReport {
    seed: u64,
    version: String,
    channels: Vec<ChannelDiagnostics>,
    phi: Option<PhiDiagnostics>,
    verdict: String,
}

fn cmd_diagnose(
    cfg: &RunConfig,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (setup, subs) = cfg.submodels()?;
    let record = load_data(cfg, data)?;
    setup.check_record(&record)?;
    let mut channels = Vec::new();
    for (ch, required) in setup.required_excitation() {
        let r = excitation_order_check(&record.inputs[ch], required)?;
        println!(
            "u_{}: required order {}, rank {} -> {}",
            ch + 1,
            required,
            r.rank,
            if r.full_rank {
                "persistently exciting"
            } else {
                "not persistently exciting"
            }
        );
        channels.push(ChannelDiagnostics {
            channel: ch + 1,
            required_order: required,
            rank: r.rank,
            persistently_exciting: r.full_rank,
        });
    }
    // model denominators from the initial models, true ones from the systems; each falls back to the other
    let dens: Option<Vec<(ctident::Polynomial, ctident::Polynomial)>> = subs
        .iter()
        .map(|s| {
            let model = s.init.as_ref().or(s.truth.as_ref())?.den().clone();
            let truth = s.truth.as_ref().or(s.init.as_ref())?.den().clone();
            Some((model, truth))
        })
        .collect();
    let phi = match dens {
        Some(d) => {
            let (model, truth): (Vec<_>, Vec<_>) = d.into_iter().unzip();
            let diag = phi_matrix(&record, &setup, &model, &truth, cfg.estimator.warmup_skip)?;
            println!(
                "phi: size {}, rank {}, condition {:.3e}, smallest/largest singular value {:.3e}",
                diag.matrix.nrows(),
                diag.rank,
                diag.condition,
                diag.relative_smallest()
            );
            Some(PhiDiagnostics {
                size: diag.matrix.nrows(),
                rank: diag.rank,
                condition: diag.condition,
                relative_smallest_singular_value: diag.relative_smallest(),
                singular_values: diag.singular_values.clone(),
            })
        }
        None => {
            println!("phi: skipped (no denominators configured)");
            None
        }
    };
    let pe_ok = channels.iter().all(|c| c.persistently_exciting);
    let phi_ok = phi.as_ref().is_none_or(|p| p.rank == p.size);
    let verdict = if pe_ok && phi_ok {
        "full rank: the input is sufficiently exciting for the configured structures".to_string()
    } else {
        "rank-deficient: the input does not excite the configured structures, parameters are not identifiable".to_string()
    };
    println!("verdict: {}", verdict);
    let report = DiagnoseReport {
        seed: seed.unwrap_or(DEFAULT_SEED),
        version: version_string(),
        channels,
        phi,
        verdict,
    };
    create_dir(out)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    Ok(())
}

fn cmd_experiment(
    cfg: &RunConfig,
    name: NameArg,
    scale: ScaleArg,
    seed: Option<u64>,
    jobs: usize,
    out: &Path,
) -> Result<(), CliError> {
    let name = match name {
        NameArg::Bias => ExperimentName::Bias,
        NameArg::Consistency => ExperimentName::Consistency,
    };
    let scale = match scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let exp = cfg.experiment.clone().unwrap_or_default();
    let seed = seed.or(exp.seed).unwrap_or(DEFAULT_SEED);
    let mc_runs = exp.mc_runs.unwrap_or(scale.mc_runs());
    let sizes = exp.sample_sizes.clone().unwrap_or(scale.sample_sizes());
    create_dir(out)?;
    let results = run_named_experiment(name, mc_runs, sizes, seed, out, jobs)?;
    for (res, dir) in &results {
        print!("{}", describe(res));
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}
