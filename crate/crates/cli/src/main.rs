//! `map`: train, evaluate and inspect multi-modal attribute prompting runs.
//!
//! Every successful command writes JSON to stdout. Failures write a single
//! JSON line `{"error": kind, "message": text}` to stderr and exit with
//! 2 (usage or configuration), 3 (data) or 4 (numerics).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use map_core::config::RunConfig;
use map_core::data::{synth_generate, ClassRole, SynthSpec};
use map_core::harness::{evaluate_run, load_run, run_base_to_novel, run_train, RunOutcome};
use map_core::model::{gradient_check, harmonic_mean, round2, ModelConfig};
use map_core::numerics::Tensor;
use map_core::ot::{transport_cost, CostMatrix, Marginals, SinkhornOptions, SolverRegistry};
use map_core::Error;

#[derive(Parser)]
#[command(
    name = "map",
    version,
    about = "Multi-modal attribute prompting for few-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Attribute description file.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Output directory for config, metrics and checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Base,
    Novel,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train on k-shot base-class samples and evaluate on the base test split.
    Train(RunArgs),
    /// Train on base classes, evaluate on base and novel classes, report the harmonic mean.
    BaseToNovel(RunArgs),
    /// Evaluate a finished run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one recorded in the run.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        role: Role,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve entropic optimal transport for a cost matrix read from CSV.
    Sinkhorn {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, default_value_t = map_core::ot::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = map_core::ot::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = map_core::ot::DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long, default_value = "sinkhorn")]
        solver: String,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        /// Run configuration; the tiny reference model is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write a synthetic attribute-grid dataset.
    Synth {
        /// JSON generator spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Harmonic mean of base and novel accuracies, in percent.
    Hm { base: f64, novel: f64 },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Unsupported(_) => 2,
        Error::Io { .. }
        | Error::Json { .. }
        | Error::CorruptDataset(_)
        | Error::InvalidManifest(_)
        | Error::InsufficientAttributes { .. }
        | Error::InsufficientSamples { .. } => 3,
        Error::NumericFailure(_) | Error::DegenerateVector { .. } | Error::State(_) => 4,
    }
}

// A closed pipe on stdout is not an error worth reporting.
fn emit(payload: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{payload}");
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().replace('\n', " "), 2),
    };
    match run(cli.command) {
        Ok(payload) => {
            emit(&payload);
            ExitCode::SUCCESS
        }
        Err(Failure::Core(e)) => fail(e.kind(), e.to_string(), exit_code(&e)),
        Err(Failure::GradCheck(payload)) => {
            emit(&payload.to_string());
            fail("gradcheck", "finite-difference check failed".into(), 4)
        }
    }
}

enum Failure {
    Core(Error),
    /// The check ran but some parameter group exceeded the tolerance.
    GradCheck(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn run(command: Command) -> Result<String, Failure> {
    let payload = match command {
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            if args.print_config {
                return Ok(cfg.to_json_pretty());
            }
            outcome_json(&cfg, &run_train(&cfg)?)
        }
        Command::BaseToNovel(args) => {
            let cfg = resolve(&args)?;
            if args.print_config {
                return Ok(cfg.to_json_pretty());
            }
            let outcome = run_base_to_novel(&cfg)?;
            let m = &outcome.final_metrics;
            let mut payload = outcome_json(&cfg, &outcome);
            payload["base_acc"] = json!(m.base_acc);
            payload["novel_acc"] = json!(m.novel_acc);
            payload["hm"] = json!(m.hm);
            payload
        }
        Command::Eval {
            run,
            data,
            attributes,
            role,
            threads,
        } => {
            let (mut cfg, _) = load_run(&run)?;
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(a) = attributes {
                cfg.attributes = Some(a);
            }
            if let Some(t) = threads {
                cfg.eval_threads = t;
            }
            cfg.validate()?;
            let role = match role {
                Role::Base => Some(ClassRole::Base),
                Role::Novel => Some(ClassRole::Novel),
                Role::All => None,
            };
            json!({ "run": run, "report": evaluate_run(&run, &cfg, role)? })
        }
        Command::Sinkhorn {
            cost,
            gamma,
            tol,
            max_iter,
            solver,
        } => {
            let c = CostMatrix::new(read_cost_csv(&cost)?)?;
            let marginals = Marginals::uniform(c.rows(), c.cols());
            let opts = SinkhornOptions { gamma, max_iter, tol };
            let plan = SolverRegistry::default().get(&solver)?.solve(&c, &marginals, &opts)?;
            let rows: Vec<&[f64]> = (0..plan.plan.rows()).map(|r| plan.plan.row(r)).collect();
            json!({
                "solver": solver,
                "plan": rows,
                "gamma": plan.gamma,
                "iterations_used": plan.iterations_used,
                "marginal_violation": plan.marginal_violation,
                "transport_cost": transport_cost(&plan, &c)?,
                "domain": plan.domain,
                "converged": plan.converged(tol),
            })
        }
        Command::Gradcheck {
            config,
            seed,
            step,
            tol,
        } => {
            let model_cfg = match config {
                Some(path) => RunConfig::resolve(&[RunConfig::load(&path)?])?.model_config(),
                None => ModelConfig::tiny_reference(),
            };
            let reports = gradient_check(&model_cfg, seed, step, tol)?;
            let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let pass = reports.iter().all(|r| r.pass);
            let payload = json!({
                "max_rel_err": max_rel_err,
                "tolerance": tol,
                "pass": pass,
                "groups": reports,
            });
            if !pass {
                return Err(Failure::GradCheck(payload));
            }
            payload
        }
        Command::Synth { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?
                }
                None => SynthSpec::default(),
            };
            let (dataset, _) = synth_generate(&spec, &out)?;
            json!({
                "out": out,
                "num_samples": dataset.len(),
                "classes": dataset.manifest.class_names,
                "spec": spec,
            })
        }
        Command::Hm { base, novel } => {
            let hm = round2(harmonic_mean(base, novel)?);
            return Ok(format!("{hm:.2}"));
        }
    };
    Ok(payload.to_string())
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut layers = Vec::new();
    if let Some(path) = &args.config {
        layers.push(RunConfig::load(path)?);
    }
    let mut pairs = Vec::new();
    for spec in &args.set {
        pairs.push(RunConfig::parse_override(spec)?);
    }
    for (key, value) in [
        ("data", args.data.as_ref().map(|p| json!(p))),
        ("attributes", args.attributes.as_ref().map(|p| json!(p))),
        ("out", args.out.as_ref().map(|p| json!(p))),
        ("seed", args.seed.map(|s| json!(s))),
    ] {
        if let Some(v) = value {
            pairs.push((key.to_string(), v));
        }
    }
    layers.push(RunConfig::overrides(pairs));
    RunConfig::resolve(&layers)
}

fn outcome_json(cfg: &RunConfig, outcome: &RunOutcome) -> Value {
    json!({
        "out": cfg.out,
        "epochs": outcome.epochs.len(),
        "final_loss": outcome.epochs.last().map(|e| e.loss),
        "metrics": outcome.final_metrics,
    })
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a dense matrix from comma-separated rows; blank lines are skipped.
fn read_cost_csv(path: &Path) -> Result<Tensor, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::invalid(format!(
                        "{}:{}: '{}' is not a number",
                        path.display(),
                        i + 1,
                        cell.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>, Error>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: cost matrix is empty", path.display())));
    }
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        fs::write(&path, "0, 1.5\n\n2,3\n").unwrap();
        let t = read_cost_csv(&path).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 1.5, 2.0, 3.0]);
        fs::write(&path, "0,x\n").unwrap();
        let err = read_cost_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":1: 'x'"), "{err}");
        fs::write(&path, "\n").unwrap();
        assert!(read_cost_csv(&path).is_err());
    }

    #[test]
    fn exit_codes_by_error_family() {
        assert_eq!(exit_code(&Error::Config(vec![])), 2);
        assert_eq!(exit_code(&Error::CorruptDataset(String::new())), 3);
        assert_eq!(exit_code(&Error::NumericFailure(String::new())), 4);
    }

    #[test]
    fn explicit_flags_beat_overrides() {
        let cli = Cli::try_parse_from(["map", "train", "--seed", "4", "--set", "seed=9", "--set", "beta=0.5"]).unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train")
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!((cfg.seed, cfg.beta), (4, 0.5));
    }
}
