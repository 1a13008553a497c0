use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nlss::decouple::{decouple, optimize_decoupled, CpdSettings, DecoupleSettings};
use nlss::harness::{
    evaluate_model, linear_stage, record_bla, run_pipeline, simulate_experiment, split_dataset, DataConfig,
    ExperimentConfig, SplitFractions, TankExperiment,
};
use nlss::io::ModelFile;
use nlss::model::fit_output_error;
use nlss::nlss2::{
    estimate_states, initialize_from_states, optimize_full_nlss2, select_lambda, NetworkFitSettings, ValidationRecord,
};
use nlss::optimizer::FitReport;
use nlss::pnlss::{build_basis, BasisMask, PnlssModel};
use nlss::signals::Dataset;
use nlss::Execution;

#[derive(Parser, Debug)]
#[command(name = "nlss", version, about = "Nonlinear state-space identification from short records")]
struct Cli {
    /// Experiment configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the two-tank process and write dataset CSVs.
    Simulate {
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        offset: Option<f64>,
        #[arg(long)]
        peak: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Estimate the best linear approximation and write `frf.csv`.
    Bla {
        #[arg(long)]
        data: PathBuf,
    },
    /// Rational fit, balanced realization and time-domain refinement.
    FitLinear {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Polynomial nonlinear state-space fit from a linear model.
    FitPnlss {
        #[command(flatten)]
        data: DataArgs,
        /// Linear starting model; fitted from the data when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long, value_parser = parse_mask)]
        mask: Option<BasisMask>,
        /// Estimate the initial state.
        #[arg(long)]
        x0: bool,
    },
    /// Network-based model initialized from estimated states.
    FitNlss2 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated regularization grid.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// Hidden neurons per network.
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Estimation and holdout fractions for lambda selection.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        split: Option<Vec<f64>>,
    },
    /// Decouple a polynomial model into parallel branches and re-optimize.
    Decouple {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Skip the re-optimization.
        #[arg(long)]
        no_refine: bool,
    },
    /// Full pipeline with the configured roster.
    Run,
    /// RMSE of a saved model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset CSV; the configured data source is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_mask(s: &str) -> std::result::Result<BasisMask, String> {
    match s {
        "full" => Ok(BasisMask::Full),
        "pure-powers" | "pure_powers" => Ok(BasisMask::PurePowers),
        "empty" => Ok(BasisMask::Empty),
        _ => Err(format!("unknown mask '{s}' (full, pure-powers, empty)")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text)?
            }
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.sequential {
        config.execution = Execution::Sequential;
    }
    config.validate()?;
    Ok(config)
}

/// Estimation record after the configured split; the CSV when given.
fn fitting_data(config: &ExperimentConfig, data: &DataArgs) -> Result<Dataset> {
    let full = match &data.data {
        Some(path) => Dataset::read_csv(path)?,
        None => nlss::harness::load_data(config)?.estimation,
    };
    let est = match &data.data {
        Some(_) => full,
        None if matches!(&config.data, DataConfig::Simulate(e) if e.separate_validation) => full,
        None => split_dataset(&full, config.split)?.0,
    };
    Ok(match config.estimation_samples {
        Some(n) if n < est.len() => est.slice(0..n)?,
        _ => est,
    })
}

fn linear_from(config: &ExperimentConfig, data: &Dataset, init: Option<&Path>) -> Result<PnlssModel> {
    match init {
        Some(path) => match ModelFile::load(path)? {
            ModelFile::Pnlss(m) => Ok(PnlssModel::linear_only(m.linear, false)?),
            ModelFile::Linear(l) => Ok(PnlssModel::linear_only(l, false)?),
            ModelFile::TransferFunction(tf) => {
                let ss = nlss::linfit::realize_state_space(&tf)?;
                Ok(PnlssModel::linear_only(nlss::linfit::balance_realization(&ss)?, false)?)
            }
            other => bail!("{} model cannot seed a fit (need a linear model)", other.kind()),
        },
        None => Ok(linear_stage(data, &config.models, config.execution)?.bla),
    }
}

fn print_fit(name: &str, report: &FitReport) {
    println!("{name}");
    print!("{}", report.iteration_table());
    println!("termination: {:?}", report.termination);
    for (k, v) in &report.rmse {
        println!("rmse_{k}: {v:.9e}");
    }
}

fn save(out_dir: &Path, name: &str, model: ModelFile) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    model.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut config = load_config(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Simulate { snr_db, offset, peak, samples } => {
            let mut exp = match &config.data {
                DataConfig::Simulate(e) => e.clone(),
                DataConfig::Csv { .. } => TankExperiment::default(),
            };
            if let Some(v) = snr_db {
                exp.params.output_snr_db = *v;
            }
            if let Some(v) = offset {
                exp.input_offset = *v;
            }
            if let Some(v) = peak {
                exp.input_peak = *v;
            }
            if let Some(v) = samples {
                exp.period_length = *v;
            }
            let data = simulate_experiment(&exp, config.seed)?;
            fs::create_dir_all(out)?;
            data.estimation.write_csv(&out.join("estimation.csv"))?;
            if let Some(v) = &data.validation {
                v.write_csv(&out.join("validation.csv"))?;
            }
            let provenance = serde_json::json!({
                "seed": config.seed,
                "experiment": exp,
                "version": env!("CARGO_PKG_VERSION"),
            });
            fs::write(out.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
            println!("wrote {}", out.display());
        }
        Command::Bla { data } => {
            let ds = Dataset::read_csv(data)?;
            let frf = record_bla(&ds, config.execution)?;
            fs::create_dir_all(out)?;
            frf.write_csv(&out.join("frf.csv"))?;
            println!("{} bins, wrote {}", frf.excited_bins.len(), out.join("frf.csv").display());
        }
        Command::FitLinear { data, order } => {
            if let Some(n) = order {
                config.models.n = *n;
            }
            let ds = fitting_data(&config, data)?;
            let stage = linear_stage(&ds, &config.models, config.execution)?;
            fs::create_dir_all(out)?;
            stage.frf.write_csv(&out.join("frf.csv"))?;
            println!("transfer function fit cost {:.6e}, stable {}", stage.tf.report.final_cost(), stage.tf.stable);
            print_fit("time-domain refinement", &stage.report);
            save(out, "transfer_function.json", ModelFile::TransferFunction(stage.tf.model))?;
            save(out, "balanced.json", ModelFile::Linear(stage.balanced))?;
            save(out, "bla.json", ModelFile::Pnlss(stage.bla))?;
        }
        Command::FitPnlss { data, init, degree, mask, x0 } => {
            let m = &mut config.models;
            if let Some(d) = degree {
                m.degree = *d;
            }
            if let Some(k) = mask {
                m.mask = *k;
            }
            let ds = fitting_data(&config, data)?;
            let lin = linear_from(&config, &ds, init.as_deref())?;
            let m = &config.models;
            let basis = build_basis(lin.order(), lin.n_inputs(), m.degree, m.mask)?;
            let start = PnlssModel::from_linear(lin.linear, basis, *x0)?;
            let (model, report) = fit_output_error(&start, &ds.u, &ds.y, &start.default_free(), 0, &m.lm)?;
            print_fit("pnlss", &report);
            save(out, if *x0 { "pnlss_i.json" } else { "pnlss.json" }, ModelFile::Pnlss(model))?;
        }
        Command::FitNlss2 { data, init, lambda_grid, hidden, restarts, split } => {
            let m = &mut config.models;
            if let Some(g) = lambda_grid {
                m.lambda_grid = g.clone();
            }
            if let Some(h) = hidden {
                m.hidden = *h;
            }
            if let Some(r) = restarts {
                m.network_restarts = *r;
            }
            let ds = fitting_data(&config, data)?;
            let lin = linear_from(&config, &ds, init.as_deref())?;
            let m = &config.models;
            let fractions = match split {
                Some(f) => SplitFractions { estimation: f[0], validation: f[1], test: 0.0 },
                None => SplitFractions { test: 0.0, ..config.split },
            };
            let (inner, hold, _) = split_dataset(&ds, fractions)?;
            let net = NetworkFitSettings {
                hidden: m.hidden,
                activation: m.activation,
                restarts: m.network_restarts,
                seed: config.seed.wrapping_add(21),
                lm: m.network_lm.clone(),
                execution: config.execution,
            };
            let val = ValidationRecord { u: &ds.u, y: &ds.y, score: inner.len()..inner.len() + hold.len() };
            let sel = select_lambda(&lin.linear, &inner.u, &inner.y, &val, &m.lambda_grid, &net)?;
            for (lambda, s) in &sel.scores {
                match s {
                    Ok(v) => println!("lambda {lambda:e}: holdout rmse {v:.6e}"),
                    Err(e) => println!("lambda {lambda:e}: failed ({e})"),
                }
            }
            println!("selected lambda {:e}", sel.lambda);
            let est = estimate_states(&lin.linear, &ds.u, &ds.y, sel.lambda)?;
            let init = initialize_from_states(&lin.linear, &ds.u, &ds.y, &est, &net)?;
            let (model, report) = optimize_full_nlss2(&init, &ds.u, &ds.y, &m.lm)?;
            print_fit("nlss2", &report);
            save(out, "nlss2.json", ModelFile::Nlss2(model))?;
        }
        Command::Decouple { model, data, rank, samples, degree, restarts, no_refine } => {
            let base = match ModelFile::load(model)? {
                ModelFile::Pnlss(p) => p,
                other => bail!("decoupling needs a pnlss model, got {}", other.kind()),
            };
            let m = &config.models;
            let settings = DecoupleSettings {
                rank: rank.unwrap_or(m.rank),
                n_samples: samples.unwrap_or(m.n_samples),
                seed: config.seed,
                scale: m.sampling_scale.clone(),
                cpd: CpdSettings {
                    restarts: restarts.unwrap_or(m.cpd_restarts),
                    execution: config.execution,
                    ..CpdSettings::default()
                },
                degree: *degree,
            };
            let ds = fitting_data(&config, data)?;
            let dec = decouple(&base, &ds.u, &settings)?;
            println!(
                "cpd residual {:.3e}, converged {}, rank warning {}",
                dec.factors.residual, dec.factors.converged, dec.factors.rank_warning
            );
            let result = if *no_refine {
                dec.model
            } else {
                let (fitted, report) = optimize_decoupled(&dec.model, &ds.u, &ds.y, &m.lm)?;
                print_fit("decoupled", &report);
                fitted
            };
            save(out, "decoupled.json", ModelFile::Decoupled(result))?;
        }
        Command::Run => {
            let output = run_pipeline(&config)?;
            output.write(out)?;
            print!("{}", output.report.to_table());
            if !output.report.all_ok() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { model, data } => {
            let file = ModelFile::load(model)?;
            let ds = Dataset::read_csv(data)?;
            println!("{:.9e}", evaluate_model(&file, &ds)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
