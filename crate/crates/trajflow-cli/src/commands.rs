//! The five subcommands: shared training plumbing plus their file outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Args;
use trajflow::checkpoint::Checkpoint;
use trajflow::losses::LossReport;
use trajflow::solvers::{convergence_order, Method, SolverConfig, SolverError};
use trajflow::tasks::Task;
use trajflow::train::{
    evaluate, seeded_stream, EvalReport, ModelField, TrainError, Trainer, STREAM_EVAL, STREAM_INIT,
};
use trajflow::VelocityModel;

use crate::config::{resolve_output_dir, RunConfig};
use crate::grid::{sample_grid, Axis};
use crate::{numerical, other, usage, CmdResult, Failure};

// ── shared plumbing ──

/// Maps a training failure onto the exit-code taxonomy: divergence is
/// numerical, bad shapes and settings are usage, the rest is unexpected.
fn classify_train(err: TrainError) -> Failure {
    match &err {
        TrainError::NonFiniteLoss { .. } => numerical(err),
        TrainError::Solver(SolverError::NonFinite { .. }) => numerical(err),
        TrainError::ZeroBatch
        | TrainError::BadLearningRate(_)
        | TrainError::BadBeta { .. }
        | TrainError::BadEps(_)
        | TrainError::BadDecay(_)
        | TrainError::BadClip(_)
        | TrainError::ZeroStepsPerEpoch
        | TrainError::DatasetTooSmall { .. }
        | TrainError::TaskModelMismatch { .. }
        | TrainError::NoEvalSamples => usage(err),
        _ => other(err),
    }
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(usage)
}

fn write_resolved_config(resolved: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(resolved).map_err(other)?;
    text.push('\n');
    fs::write(dir.join("config.resolved.json"), text)
        .with_context(|| format!("writing resolved config into {}", dir.display()))
        .map_err(other)
}

/// Loads a checkpoint and reconstructs the averaged model used for inference.
fn load_shadow(path: &Path) -> Result<VelocityModel, Failure> {
    if !path.exists() {
        return Err(usage(anyhow!("checkpoint {} does not exist", path.display())));
    }
    let snapshot = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)?;
    let model = snapshot.model().map_err(usage)?;
    let ema = snapshot.ema().map_err(usage)?;
    ema.shadow_model(&model).map_err(usage)
}

fn check_model_matches_task(model: &VelocityModel, task: &Task) -> Result<(), Failure> {
    let config = model.config();
    if config.action_dim != task.action_dim() || config.cond_dim != task.cond_dim() {
        return Err(usage(anyhow!(
            "checkpoint model dims (action {}, cond {}) do not match the task's (action {}, cond {})",
            config.action_dim,
            config.cond_dim,
            task.action_dim(),
            task.cond_dim()
        )));
    }
    Ok(())
}

struct TrainOutcome {
    final_checkpoint: PathBuf,
    steps: u64,
    last_report: Option<LossReport>,
}

/// Runs one training job into `outdir`: the resolved config, per-step
/// metrics.csv, periodic checkpoints (last three kept) with eval.csv rows
/// when `eval_every` is set, and checkpoint_final.json.
fn run_training(
    resolved: &RunConfig,
    outdir: &Path,
    eval_samples: usize,
) -> Result<TrainOutcome, Failure> {
    prepare_dir(outdir)?;
    write_resolved_config(resolved, outdir)?;

    let train_config = resolved.train_config();
    let seed = resolved.effective_seed();
    let model = VelocityModel::init(resolved.model.clone(), &mut seeded_stream(seed, STREAM_INIT))
        .map_err(usage)?;
    let mut trainer =
        Trainer::new(model, resolved.task.clone(), train_config.clone()).map_err(classify_train)?;

    let metrics_path = outdir.join("metrics.csv");
    let metrics_file = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))
        .map_err(other)?;
    let mut metrics = BufWriter::new(metrics_file);
    writeln!(metrics, "{}", LossReport::CSV_HEADER).map_err(other)?;

    let mut eval_log = if train_config.eval_every > 0 {
        let path = outdir.join("eval.csv");
        let file = fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(other)?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "step,{}", EVAL_COLUMNS).map_err(other)?;
        Some(writer)
    } else {
        None
    };

    let total = train_config.total_steps();
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut last_report = None;
    while trainer.step() < total {
        let report = trainer.step_once().map_err(classify_train)?;
        let done = trainer.step();
        writeln!(metrics, "{}", report.csv_row(done)).map_err(other)?;
        last_report = Some(report);

        if train_config.eval_every > 0 && (done % train_config.eval_every == 0 || done == total) {
            let path = outdir.join(format!("checkpoint_step{done:08}.json"));
            trainer.checkpoint().save(&path).map_err(other)?;
            kept.push(path);
            if kept.len() > 3 {
                let _ = fs::remove_file(kept.remove(0));
            }
            if let Some(writer) = &mut eval_log {
                let report = eval_trainer(&trainer, &resolved.solver, eval_samples, seed)?;
                writeln!(writer, "{},{}", done, eval_csv_fields(&report)).map_err(other)?;
            }
        }
    }
    metrics.flush().map_err(other)?;
    if let Some(writer) = &mut eval_log {
        writer.flush().map_err(other)?;
    }

    let final_checkpoint = outdir.join("checkpoint_final.json");
    trainer.checkpoint().save(&final_checkpoint).map_err(other)?;
    Ok(TrainOutcome {
        final_checkpoint,
        steps: total,
        last_report,
    })
}

/// Evaluates the trainer's averaged weights with a fresh, seed-determined
/// evaluation stream so every cadence point sees the same flow draws.
fn eval_trainer(
    trainer: &Trainer,
    solver: &SolverConfig,
    samples: usize,
    seed: u64,
) -> Result<EvalReport, Failure> {
    let shadow = trainer.ema().shadow_model(trainer.model()).map_err(other)?;
    evaluate(
        &ModelField::new(&shadow),
        trainer.task(),
        solver,
        samples,
        &mut seeded_stream(seed, STREAM_EVAL),
    )
    .map_err(classify_train)
}

const EVAL_COLUMNS: &str = "endpoint_mse,mode_accuracy,straightness,nfe";

fn eval_csv_fields(report: &EvalReport) -> String {
    let mode = report
        .mode_accuracy
        .map(|a| a.to_string())
        .unwrap_or_default();
    format!(
        "{},{},{},{}",
        report.endpoint_mse, mode, report.straightness, report.nfe
    )
}

// ── train ──

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    pub config: PathBuf,
    /// Overrides the output directory from the config or environment.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Flow samples drawn per periodic evaluation.
    #[arg(long, default_value_t = 256)]
    pub eval_samples: usize,
}

pub fn train(args: TrainArgs) -> CmdResult {
    let config = RunConfig::load(&args.config).map_err(usage)?;
    let outdir = resolve_output_dir(args.output_dir.as_deref(), &config, &args.config);
    let resolved = config.resolved(&outdir);
    let started = Instant::now();
    let outcome = run_training(&resolved, &outdir, args.eval_samples)?;
    let elapsed = started.elapsed().as_secs_f64();
    match &outcome.last_report {
        Some(report) => println!(
            "trained {} steps in {elapsed:.1}s, final loss {:.6}, outputs in {}",
            outcome.steps,
            report.total,
            outdir.display()
        ),
        None => println!(
            "trained {} steps in {elapsed:.1}s, outputs in {}",
            outcome.steps,
            outdir.display()
        ),
    }
    Ok(())
}

// ── eval ──

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (uses the averaged weights).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration naming the task and default solver.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the solver method from the config.
    #[arg(long)]
    pub method: Option<Method>,
    /// Overrides the solver step count from the config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Flows to integrate.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Seed for evaluation draws; defaults to the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let config = RunConfig::load(&args.config).map_err(usage)?;
    let shadow = load_shadow(&args.checkpoint)?;
    check_model_matches_task(&shadow, &config.task)?;

    let mut solver = config.solver;
    if let Some(method) = args.method {
        solver.method = method;
    }
    if let Some(steps) = args.steps {
        solver.steps = steps;
    }
    solver.validate().map_err(usage)?;

    let seed = args.seed.unwrap_or_else(|| config.effective_seed());
    let report = evaluate(
        &ModelField::new(&shadow),
        &config.task,
        &solver,
        args.samples,
        &mut seeded_stream(seed, STREAM_EVAL),
    )
    .map_err(classify_train)?;

    let mut json = serde_json::to_string_pretty(&report).map_err(other)?;
    json.push('\n');
    print!("{json}");
    if let Some(out) = &args.out {
        fs::write(out, &json)
            .with_context(|| format!("writing report to {}", out.display()))
            .map_err(other)?;
    }
    Ok(())
}

// ── export-field ──

#[derive(Args, Debug)]
pub struct ExportFieldArgs {
    /// Checkpoint whose averaged weights define the exported field.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration naming the task.
    #[arg(long)]
    pub config: PathBuf,
    /// Destination CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub t_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub t_max: f64,
    #[arg(long, default_value_t = 11)]
    pub t_res: usize,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = 21)]
    pub x_res: usize,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub y_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub y_max: f64,
    /// Resolution of the second spatial axis; defaults to --x-res.
    #[arg(long)]
    pub y_res: Option<usize>,
    /// Condition vector, comma separated; defaults to all zeros.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub cond: Vec<f64>,
}

pub fn export_field(args: ExportFieldArgs) -> CmdResult {
    let config = RunConfig::load(&args.config).map_err(usage)?;
    let shadow = load_shadow(&args.checkpoint)?;
    check_model_matches_task(&shadow, &config.task)?;

    let dim = shadow.config().action_dim;
    if dim == 0 || dim > 2 {
        return Err(usage(anyhow!(
            "field export covers 1 or 2 action dimensions, the model has {dim}"
        )));
    }
    let cond_dim = shadow.config().cond_dim;
    let cond = if args.cond.is_empty() {
        vec![0.0; cond_dim]
    } else {
        args.cond.clone()
    };
    if cond.len() != cond_dim {
        return Err(usage(anyhow!(
            "condition has {} entries, the model expects {cond_dim}",
            cond.len()
        )));
    }

    let t_axis = Axis {
        min: args.t_min,
        max: args.t_max,
        res: args.t_res,
    };
    t_axis.validate("t").map_err(usage)?;
    let mut space = vec![Axis {
        min: args.x_min,
        max: args.x_max,
        res: args.x_res,
    }];
    if dim == 2 {
        space.push(Axis {
            min: args.y_min,
            max: args.y_max,
            res: args.y_res.unwrap_or(args.x_res),
        });
    }
    for (axis, name) in space.iter().zip(["x", "y"]) {
        axis.validate(name).map_err(usage)?;
    }

    let grid = sample_grid(&ModelField::new(&shadow), &config.task, &cond, &t_axis, &space)
        .map_err(|err| match err {
            SolverError::NonFinite { .. } => numerical(err),
            _ => other(err),
        })?;
    let rows = grid.rows.len();
    grid.write_csv(&args.out)
        .with_context(|| format!("writing grid to {}", args.out.display()))
        .map_err(other)?;
    println!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}

// ── ablate ──

const ABLATION_TERMS: [&str; 5] = ["rect", "multistep", "vel", "action", "rk4"];

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Run configuration shared by every arm.
    pub config: PathBuf,
    /// Overrides the output directory from the config or environment.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Terms to remove, comma separated (rect, multistep, vel, action, rk4);
    /// defaults to all five. "rk4" swaps evaluation to Euler at matched cost.
    #[arg(long, value_delimiter = ',')]
    pub disable: Vec<String>,
    /// Flow samples drawn per arm evaluation.
    #[arg(long, default_value_t = 256)]
    pub eval_samples: usize,
}

/// One ablation arm: a label, the config it trains with, and the solver it
/// is scored with.
fn arm_config(base: &RunConfig, term: &str) -> (String, RunConfig, SolverConfig) {
    let mut config = base.clone();
    let mut solver = base.solver;
    match term {
        "rect" => config.train.loss_config.lambda_rect = 0.0,
        "multistep" => config.train.loss_config.lambda_multistep = 0.0,
        "vel" => config.train.loss_config.lambda_vel = 0.0,
        "action" => config.train.loss_config.lambda_action = 0.0,
        // Same trained weights budget, cheaper integrator at matched cost:
        // Euler spends one evaluation per step where the fourth-order method
        // spends four.
        "rk4" => {
            solver.method = Method::Euler;
            solver.steps = base.solver.steps * 4;
        }
        _ => unreachable!("terms are validated before arms are built"),
    }
    config.loss = Some(config.train.loss_config.clone());
    (format!("wo-{term}"), config, solver)
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let config = RunConfig::load(&args.config).map_err(usage)?;
    let removals: Vec<String> = if args.disable.is_empty() {
        ABLATION_TERMS.iter().map(|t| t.to_string()).collect()
    } else {
        args.disable.clone()
    };
    for term in &removals {
        if !ABLATION_TERMS.contains(&term.as_str()) {
            return Err(usage(anyhow!(
                "unknown ablation term '{term}'; valid terms: {}",
                ABLATION_TERMS.join(", ")
            )));
        }
    }

    let outdir = resolve_output_dir(args.output_dir.as_deref(), &config, &args.config);
    prepare_dir(&outdir)?;
    let resolved = config.resolved(&outdir);

    let mut arms = vec![("full".to_string(), resolved.clone(), resolved.solver)];
    for term in &removals {
        arms.push(arm_config(&resolved, term));
    }

    let seed = resolved.effective_seed();
    let mut rows = Vec::with_capacity(arms.len());
    for (label, arm, solver) in &arms {
        let arm_dir = outdir.join(label);
        let arm_resolved = arm.resolved(&arm_dir);
        let outcome = run_training(&arm_resolved, &arm_dir, args.eval_samples)?;
        let shadow = load_shadow(&outcome.final_checkpoint)?;
        let report = evaluate(
            &ModelField::new(&shadow),
            &arm_resolved.task,
            solver,
            args.eval_samples,
            &mut seeded_stream(seed, STREAM_EVAL),
        )
        .map_err(classify_train)?;
        rows.push(format!("{label},{}", eval_csv_fields(&report)));
    }

    let mut csv = format!("config,{EVAL_COLUMNS}\n");
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    fs::write(outdir.join("ablation.csv"), &csv)
        .with_context(|| format!("writing ablation table into {}", outdir.display()))
        .map_err(other)?;
    print!("{csv}");
    Ok(())
}

// ── solver-bench ──

#[derive(Args, Debug)]
pub struct SolverBenchArgs {
    /// Step counts to fit the order against, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20, 40, 80])]
    pub steps: Vec<usize>,
    /// Starting point of the integrated flow.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub x0: f64,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fits each method's empirical order on the exponential growth flow
/// dx/dt = x, whose endpoint e * x0 is known in closed form. Every method
/// shows its textbook order here; fields with special structure can do
/// better (the linear Gaussian-transport field lets the midpoint rule shave
/// an extra order, for instance), which would muddy the comparison.
pub fn solver_bench(args: SolverBenchArgs) -> CmdResult {
    if args.steps.len() < 2 {
        return Err(usage(anyhow!("need at least two step counts to fit an order")));
    }
    let x0 = [args.x0];
    let exact = [args.x0 * std::f64::consts::E];
    let field = |x: &[f64], _t: f64, _cond: &[f64]| x.to_vec();

    let mut csv = String::from("method,order");
    for steps in &args.steps {
        csv.push_str(&format!(",err_{steps}"));
    }
    csv.push('\n');
    for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
        let fit = convergence_order(&field, &x0, &[], &exact, method, &args.steps).map_err(
            |err| match err {
                SolverError::NonFinite { .. } => numerical(err),
                _ => other(err),
            },
        )?;
        csv.push_str(&format!("{method},{}", fit.estimate));
        for (_, error) in &fit.errors {
            csv.push_str(&format!(",{error}"));
        }
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv)
            .with_context(|| format!("writing benchmark to {}", out.display()))
            .map_err(other)?;
    }
    Ok(())
}
