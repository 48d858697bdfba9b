use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ddmpc::constants::SystemConstants;
use ddmpc::hankel::{DataRecord, View};
use ddmpc::harness::{
    generate_data, oracle_constants, prepare_with_data, reproduce_example, resolve_constants, run_closed_loop,
    write_closed_loop_csv, write_constants_csv, write_solves_json, ClosedLoopOptions, ConstantsSource, ExperimentConfig,
};
use ddmpc::lti::StateSpaceModel;
use ddmpc::mpc::ControllerState;
use ddmpc::nalgebra::DMatrix;
use ddmpc::solver::ClarabelBackend;
use ddmpc::tightening::{compute_coefficients, feasibility_precheck};
use ddmpc::{Error, Result};

/// Exit code when a reproduction run completes but misses a check.
const CHECKS_FAILED: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "ddmpc", version, about = "Robust data-driven MPC experiments")]
struct Cli {
    /// Experiment configuration (JSON). Defaults reproduce the reference study.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of the offline experiment (overrides `data_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seed of the closed-loop measurement noise (overrides `online_seeds`).
    #[arg(long, global = true)]
    online_seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    constants_source: Option<SourceArg>,
    /// Constants JSON used with `--constants-source file`.
    #[arg(long, global = true)]
    constants_file: Option<PathBuf>,
    /// Existing data record (CSV with its JSON sidecar) instead of a fresh
    /// experiment.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SourceArg {
    Data,
    Oracle,
    File,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the offline experiment and store the data record.
    GenerateData,
    /// Report persistence of excitation of the data input.
    CheckPe {
        /// Order to test; defaults to L + 2n.
        #[arg(long)]
        order: Option<usize>,
    },
    /// Certify Γ, ρ_k and c_pe and compare with the plant model.
    EstimateConstants,
    /// Compute the tightening coefficients and the feasibility precheck.
    ComputeTightening,
    /// Solve the first receding-horizon problem from rest.
    SolveStep,
    /// Run one closed loop.
    RunClosedLoop,
    /// Full multi-seed reproduction study with plots and a pass/fail summary.
    ReproduceExample,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.in_stage("config"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.data_seed = seed;
    }
    if let Some(seed) = cli.online_seed {
        config.online_seeds = vec![seed];
    }
    if let Some(source) = cli.constants_source {
        config.constants_source = match source {
            SourceArg::Data => ConstantsSource::Data,
            SourceArg::Oracle => ConstantsSource::Oracle,
            SourceArg::File => ConstantsSource::File,
        };
    }
    if let Some(path) = &cli.constants_file {
        config.constants_file = Some(path.clone());
    }
    Ok(config)
}

fn load_or_generate(cli: &Cli, config: &ExperimentConfig, plant: &StateSpaceModel) -> Result<DataRecord> {
    match &cli.data {
        Some(path) => DataRecord::load(path).map_err(|e| e.in_stage("load-data")),
        None => generate_data(plant, config.samples, config.n, &config.input_box, config.data_seed, config.eps_bar, config.pe_order())
            .map_err(|e| e.in_stage("generate-data")),
    }
}

fn create(dir: &Path, name: &str) -> Result<File> {
    std::fs::create_dir_all(dir)?;
    Ok(File::create(dir.join(name))?)
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> Result<PathBuf> {
    let path = dir.join(name);
    serde_json::to_writer_pretty(create(dir, name)?, &value)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<u8> {
    let config = load_config(cli)?;
    let plant = config.validate().map_err(|e| e.in_stage("config"))?;
    let backend = ClarabelBackend::default();
    let out = &cli.out_dir;

    match &cli.command {
        Command::GenerateData => {
            let data = load_or_generate(cli, &config, &plant)?;
            let pe = data.persistence_of_excitation(config.pe_order());
            let path = match cli.format {
                Format::Csv => {
                    std::fs::create_dir_all(out)?;
                    let path = out.join("data.csv");
                    data.save(&path)?;
                    path
                }
                Format::Json => write_json(
                    out,
                    "data.json",
                    serde_json::json!({
                        "sidecar": data.sidecar(),
                        "u": data.u_record().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                        "y": data.y_record(View::Clean).row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                        "ytilde": data.y_record(View::Noisy).row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                    }),
                )?,
            };
            println!("seed {}: {} samples + {} prefix -> {}", data.seed(), data.len(), data.prefix(), path.display());
            println!("persistently exciting of order {}: {} (rank {}/{})", pe.order, pe.persistently_exciting, pe.rank, pe.required);
            Ok(0)
        }
        Command::CheckPe { order } => {
            let data = load_or_generate(cli, &config, &plant)?;
            let order = order.unwrap_or(config.pe_order());
            let pe = data.persistence_of_excitation(order);
            println!(
                "order {order}: rank {}/{}, smallest retained singular value {:.6e}",
                pe.rank, pe.required, pe.smallest_retained_singular_value
            );
            if pe.persistently_exciting {
                println!("persistently exciting");
                Ok(0)
            } else {
                Err(Error::InsufficientExcitation(format!("not persistently exciting of order {order}")))
            }
        }
        Command::EstimateConstants => {
            let data = load_or_generate(cli, &config, &plant)?;
            let constants = resolve_constants(&config, &plant, &data, &backend).map_err(|e| e.in_stage("estimate-constants"))?;
            let model = oracle_constants(&plant, &data, config.horizon, config.xi_max(&data)?, &backend).ok();
            print_constants(&constants, model.as_ref());
            let path = match (cli.format, &model) {
                (Format::Csv, Some(model)) => {
                    write_constants_csv(&constants, model, create(out, "constants.csv")?)?;
                    out.join("constants.csv")
                }
                _ => write_json(out, "constants.json", serde_json::to_value(&constants)?)?,
            };
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::ComputeTightening => {
            let data = load_or_generate(cli, &config, &plant)?;
            let constants = resolve_constants(&config, &plant, &data, &backend).map_err(|e| e.in_stage("estimate-constants"))?;
            let coeffs = compute_coefficients(&constants, config.eps_bar, config.horizon, config.n)?;
            let path = match cli.format {
                Format::Csv => {
                    coeffs.write_csv(create(out, "coefficients.csv")?)?;
                    out.join("coefficients.csv")
                }
                Format::Json => write_json(out, "coefficients.json", serde_json::to_value(&coeffs)?)?,
            };
            println!("k    a1                      a2                      a3                      a4");
            for k in 0..coeffs.len() {
                println!("{k:<4} {:<23.16e} {:<23.16e} {:<23.16e} {:<23.16e}", coeffs.a1[k], coeffs.a2[k], coeffs.a3[k], coeffs.a4[k]);
            }
            if let Some(y_max) = config.y_max {
                let pre = feasibility_precheck(&coeffs, y_max)?;
                print!("{}", pre.table(&coeffs));
                if !pre.feasible() {
                    return Err(Error::Infeasible(format!("a4[k] >= y_max at k = {:?}", pre.flagged)));
                }
            }
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::SolveStep => {
            let data = load_or_generate(cli, &config, &plant)?;
            let pipe = prepare_with_data(&config, plant, data, &backend)?;
            warn(&pipe.warnings);
            let (m, p, n) = (pipe.plant.inputs(), pipe.plant.outputs(), config.n);
            let state = ControllerState::new(pipe.setup.clone(), DMatrix::zeros(m, n), DMatrix::zeros(p, n))?;
            let sol = state.solve_step(&backend)?;
            println!("J* = {:.10}", sol.objective);
            println!(
                "|u|_1 = {:.6}, |alpha|_1 = {:.6}, |sigma|_inf = {:.6e}, sigma bound ok: {}",
                sol.norms.u1, sol.norms.alpha1, sol.norms.sigma_inf, sol.sigma_bound_ok
            );
            println!("k    u          y");
            for k in 0..config.horizon as isize {
                println!("{k:<4} {:<10.6} {:<10.6}", sol.u_at(k)[0], sol.y_at(k)[0]);
            }
            Ok(0)
        }
        Command::RunClosedLoop => {
            let data = load_or_generate(cli, &config, &plant)?;
            let pipe = prepare_with_data(&config, plant, data, &backend)?;
            warn(&pipe.warnings);
            let seed = config.online_seeds[0];
            let log = run_closed_loop(&pipe.setup, &pipe.plant, ClosedLoopOptions::from_config(&config, seed), &backend)
                .map_err(|e| e.in_stage("closed-loop"))?;
            let path = match cli.format {
                Format::Csv => {
                    write_closed_loop_csv(&log, create(out, "closed_loop.csv")?)?;
                    out.join("closed_loop.csv")
                }
                Format::Json => write_json(out, "closed_loop.json", serde_json::to_value(&log)?)?,
            };
            write_solves_json(&log, create(out, "solves.json")?)?;
            let s = &log.summary;
            println!(
                "max |y| = {:.6}, saturated steps = {}, final-half mean y = {:?}, infeasible solves = {}",
                s.max_abs_y,
                s.saturated_steps,
                s.final_half_mean_y,
                s.infeasibility_events.len()
            );
            println!("wrote {}", path.display());
            for ev in &s.infeasibility_events {
                eprintln!("infeasible at t = {}: {}", ev.t, ev.message);
            }
            Ok(if log.had_infeasibility() { 2 } else { 0 })
        }
        Command::ReproduceExample => {
            let report = reproduce_example(&config, out, &backend)?;
            warn(&report.warnings);
            print_constants(&report.data_constants, Some(&report.oracle_constants));
            print!("{}", report.summary_text());
            println!("artifacts in {}", out.display());
            if report.summaries.iter().any(|s| !s.infeasibility_events.is_empty()) {
                Ok(2)
            } else if report.passed() {
                Ok(0)
            } else {
                Ok(CHECKS_FAILED)
            }
        }
    }
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn print_constants(c: &SystemConstants, model: Option<&SystemConstants>) {
    println!("k    rho_k (used)        rho_k (model)");
    for (i, r) in c.rho.iter().enumerate() {
        let m = model.map_or(String::from("-"), |m| format!("{:.12}", m.rho[i]));
        println!("{:<4} {r:<19.12} {m}", i + c.n);
    }
    let mg = model.map_or(String::from("-"), |m| format!("{:.12}", m.gamma));
    println!("Gamma {:.12} (model {mg})", c.gamma);
    println!("c_pe {:.6}, xi_max {:.6}, rho_n_max {:.6}, rho_L_max {:.6}", c.c_pe, c.xi_max, c.rho_n_max, c.rho_l_max);
}
