//! `koopman-lab` CLI: thin adapters over the library pipeline. Every
//! command prints its resolved config and seed before running. Exit codes:
//! 0 success, 1 usage error, 2 runtime/numerical failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use koopman_lab::envs::{generate_dataset, Dataset, EnvKind, EnvSpec};
use koopman_lab::mpc::{pendulum_reference, run_closed_loop, MpcConfig, MpcController};
use koopman_lab::net::{eval_test_eps, train, KoopmanModel, TrainConfig};
use koopman_lab::scaling::{
    coupled_schedule, fit_groups, read_records, run_grid, write_fits, Axis, GridConfig,
};
use koopman_lab::{diagnostics, Error, Result};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "koopman-lab", version, about = "Koopman operator learning toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trajectory dataset and save it as a container file.
    GenData {
        /// polynomial | damped-pendulum | double-pendulum
        #[arg(long)]
        env: String,
        /// Max coupling degree of the polynomial system.
        #[arg(long, default_value_t = 3)]
        n_poly: usize,
        /// Training transitions.
        #[arg(long)]
        m: usize,
        /// Transitions per rollout window.
        #[arg(long, default_value_t = 5)]
        t_win: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a neural Koopman model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-step held-out prediction error of a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop MPC tracking episode with a trained model.
    Mpc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 3)]
        n_poly: usize,
        /// Prediction horizon.
        #[arg(long, default_value_t = 20)]
        h: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e3)]
        fail_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding diagnostics: conditioning and feature correlations.
    Diag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a (m, n_mult, seed, variant) experiment grid; resumable.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the grid to a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted for interface stability; execution is single-threaded.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Power-law fits over grid records grouped along one axis.
    Fit {
        /// results.csv produced by the grid command.
        #[arg(long)]
        points: PathBuf,
        /// m | n
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coupled data/model schedule m = round(coeff * n ln n).
    Schedule {
        #[arg(long)]
        coeff: f64,
        /// Comma-separated latent dimensions, e.g. 6,12,24.
        #[arg(long)]
        n_values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_env(name: &str, n_poly: usize) -> Result<EnvSpec> {
    match name {
        "polynomial" => Ok(EnvSpec::polynomial(n_poly)),
        "damped-pendulum" => Ok(EnvSpec::damped_pendulum()),
        "double-pendulum" => Ok(EnvSpec::double_pendulum()),
        other => Err(Error::Config(format!("unknown env `{other}`"))),
    }
}

/// JSON config with an optional versioned `"schema": 1` field.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = v.as_object_mut() {
        match obj.remove("schema") {
            None => {}
            Some(s) if s == 1 => {}
            Some(s) => return Err(Error::Config(format!("unsupported config schema {s}"))),
        }
    }
    Ok(serde_json::from_value(v)?)
}

fn print_resolved<T: serde::Serialize>(label: &str, cfg: &T, seed: u64) -> Result<()> {
    println!("resolved {label} config: {}", serde_json::to_string(cfg)?);
    println!("seed: {seed}");
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { env, n_poly, m, t_win, seed, out } => {
            let spec = parse_env(&env, n_poly)?;
            print_resolved("env", &spec, seed)?;
            let data = generate_dataset(&spec, m, t_win, seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("dataset.klb");
            data.save(&path)?;
            let train_windows = data.train_idx.len();
            println!(
                "wrote {} (env {}, m {}, {} train windows of {} transitions, {} test windows)",
                path.display(),
                data.env.name(),
                data.m,
                train_windows,
                data.t_win,
                data.test_idx.len()
            );
        }
        Cmd::Train { data, config, seed, out } => {
            let dataset = Dataset::load(&data)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => load_config(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print_resolved("train", &cfg, cfg.seed)?;
            let (model, report) = train(&dataset, &cfg)?;
            std::fs::create_dir_all(&out)?;
            model.save(&out.join("model.klb"))?;
            let report_path = out.join("report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "trained {} steps in {:.1}s; eps_test = {:e}{}",
                report.steps,
                report.wall_s,
                report.eps_test,
                if report.diverged { " (diverged)" } else { "" }
            );
        }
        Cmd::Eval { model, data, horizon, out } => {
            let m = KoopmanModel::load(&model)?;
            let dataset = Dataset::load(&data)?;
            print_resolved("eval", &serde_json::json!({ "horizon": horizon }), dataset.seed)?;
            let eps = eval_test_eps(&m, &dataset, horizon)?;
            println!("eps_test = {eps:e}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("eval.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "horizon": horizon,
                        "eps_test": eps,
                    }))?,
                )?;
            }
        }
        Cmd::Mpc { model, env, n_poly, h, steps, fail_threshold, out } => {
            let m = KoopmanModel::load(&model)?;
            let spec = parse_env(&env, n_poly)?;
            if spec.n_u == 0 {
                return Err(Error::Config(format!("{} has no control input", spec.name())));
            }
            if (m.n_x, m.n_u) != (spec.n_x, spec.n_u) {
                return Err(Error::Config("model and env dimensions disagree".into()));
            }
            let u_max: Vec<f64> = spec.u_bound.clone();
            let u_min: Vec<f64> = u_max.iter().map(|b| -b).collect();
            let cfg = MpcConfig::new(h, spec.n_x, u_min, u_max);
            print_resolved("mpc", &serde_json::json!({
                "env": spec.name(), "h": h, "steps": steps, "fail_threshold": fail_threshold,
            }), 0)?;
            let reference = match spec.kind {
                EnvKind::DampedPendulum => pendulum_reference(steps, h, spec.dt),
                _ => vec![vec![0.0; spec.n_x]; steps + h],
            };
            let mut ctrl = MpcController { model: &m, cfg };
            let x0 = vec![0.0; spec.n_x];
            let result = run_closed_loop(
                &|x, u| spec.step(x, u),
                &mut ctrl,
                &x0,
                &reference,
                steps,
                fail_threshold,
            )?;
            std::fs::create_dir_all(&out)?;
            result.save_json(&out.join("closed_loop.json"))?;
            result.save_csv(&out.join("closed_loop.csv"))?;
            println!(
                "tracking error {:e} over {} steps (survived {}{})",
                result.tracking_error,
                result.controls.len(),
                result.survival_steps,
                if result.truncated { ", truncated" } else { "" }
            );
        }
        Cmd::Diag { model, data, out } => {
            let m = KoopmanModel::load(&model)?;
            let dataset = Dataset::load(&data)?;
            print_resolved("diag", &serde_json::json!({ "n": m.n() }), dataset.seed)?;
            let report = diagnostics::diagnose(&m, &dataset)?;
            std::fs::create_dir_all(&out)?;
            report.save_json(&out.join("diagnostics.json"))?;
            report.save_corr_csv(&out.join("corr.csv"))?;
            println!(
                "kappa_G = {:e}, kappa_BtB = {:e}, mean |offdiag corr| = {:.4}",
                report.kappa_g, report.kappa_btb, report.mean_abs_offdiag_corr
            );
        }
        Cmd::Grid { config, seed, workers, out } => {
            let mut cfg: GridConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if workers > 1 {
                eprintln!("note: --workers {workers} requested; running single-threaded");
            }
            print_resolved("grid", &cfg, *cfg.seeds.first().unwrap_or(&0))?;
            let records = run_grid(&cfg, &out)?;
            let ok = records.iter().filter(|r| r.status == "ok").count();
            println!(
                "grid complete: {} records ({} ok) in {}",
                records.len(),
                ok,
                out.join("results.csv").display()
            );
        }
        Cmd::Fit { points, axis, out } => {
            let axis = match axis.as_str() {
                "m" => Axis::M,
                "n" => Axis::N,
                other => return Err(Error::Config(format!("axis must be m or n, got `{other}`"))),
            };
            print_resolved("fit", &serde_json::json!({ "points": points.display().to_string() }), 0)?;
            let records = read_records(&points)?;
            let fits = fit_groups(&records, axis);
            for (key, fit) in &fits {
                println!(
                    "{key}: A = {:e}, alpha = {:.4}, C = {:e}, r2 = {:.4}",
                    fit.a, fit.alpha, fit.c, fit.r2
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_fits(&fits, &dir.join("fits.json"))?;
            }
        }
        Cmd::Schedule { coeff, n_values, out } => {
            let ns: Vec<usize> = n_values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("bad n value `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if !(coeff > 0.0) || ns.iter().any(|&n| n < 2) {
                return Err(Error::Config("need coeff > 0 and every n >= 2".into()));
            }
            print_resolved("schedule", &serde_json::json!({ "coeff": coeff, "n_values": ns }), 0)?;
            let pairs = coupled_schedule(coeff, &ns);
            println!("n,m");
            for (n, m) in &pairs {
                println!("{n},{m}");
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let mut text = String::from("n,m\n");
                for (n, m) in &pairs {
                    text.push_str(&format!("{n},{m}\n"));
                }
                std::fs::write(dir.join("schedule.csv"), text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = !matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
