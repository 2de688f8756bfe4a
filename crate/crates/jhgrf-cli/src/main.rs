//! `jhgrf` — batch command-line surface for the forecasting engine.
//!
//! Subcommands: `train`, `evaluate`, `forecast`, `ablate`, `gen-synthetic`,
//! `export-structure`. Every run resolves one flat configuration (file +
//! `--set` overrides + convenience flags), logs it, and writes all outputs
//! under `--out`. Exit codes: 0 success, 2 configuration error, 3 data/IO
//! error, 4 divergence, 5 checkpoint/config mismatch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jhgrf::checkpoint::{load_model, save_model, CheckpointError};
use jhgrf::config::{parse_pairs, resolved_text, seed_plan, AppConfig, ConfigError};
use jhgrf::data::{
    apply_missingness, generate_synthetic, load_csv, make_windows, split_chronological,
    DataError, Normalizer, SeriesTable, WindowBatch,
};
use jhgrf::model::{Ablation, Model, ModelError};
use jhgrf::structure::{
    eval_incidence, harden_incidence, pairwise_probabilities, StructureError,
};
use jhgrf::train::{evaluate, history_to_csv, train, MetricReport, TrainError};

#[derive(Parser)]
#[command(
    name = "jhgrf",
    version,
    about = "Multivariate time-series forecasting with learned hypergraph structure"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and report test metrics.
    Train(RunArgs),
    /// Score an existing checkpoint on the test split.
    Evaluate(CheckpointArgs),
    /// Write per-series forecast CSVs from a checkpoint.
    Forecast(CheckpointArgs),
    /// Train all five architecture variants and compare them.
    Ablate(RunArgs),
    /// Write the built-in synthetic panel (and its planted structure) as CSV.
    GenSynthetic(RunArgs),
    /// Export the learned incidence structure from a checkpoint.
    ExportStructure(ExportArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set model.d=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (overrides the config file's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Shorthand for `--set model.ablation=…`.
    #[arg(long)]
    ablation: Option<String>,
    /// Shorthand for `--set train.loss=…`.
    #[arg(long)]
    loss: Option<String>,
    /// Shorthand for `--set data.missing=…` (none, point, block).
    #[arg(long)]
    missing: Option<String>,
    /// Shorthand for `--set data.missing_ratio=…`.
    #[arg(long)]
    missing_ratio: Option<f64>,
    /// Shorthand for `--set model.output_activation=…`.
    #[arg(long)]
    output_activation: Option<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint written by `jhgrf train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint written by `jhgrf train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Membership threshold for the hardened incidence.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

/// Failure with its process exit code.
enum CliError {
    Config(String),
    Data(String),
    Diverged(String),
    Mismatch(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Diverged(m)
            | CliError::Mismatch(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<StructureError> for CliError {
    fn from(e: StructureError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::EmptyEvaluation => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(inner) => CliError::Config(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Forecast(args) => cmd_forecast(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::GenSynthetic(args) => cmd_gen_synthetic(&args),
        Command::ExportStructure(args) => cmd_export_structure(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Resolve the run configuration and remember every explicitly assigned key
/// (file first, then `--set`, then convenience flags) for checkpoint
/// conflict checks.
fn resolve_config(args: &RunArgs) -> Result<(AppConfig, Vec<(String, String)>), CliError> {
    let mut config = AppConfig::default();
    let mut explicit: Vec<(String, String)> = Vec::new();

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        for (key, value) in parse_pairs(&text)? {
            config.apply_kv(&key, &value)?;
            explicit.push((key, value));
        }
    }
    for entry in &args.set {
        let Some((key, value)) = entry.split_once('=') else {
            return Err(CliError::Config(format!(
                "override must be `key=value`, got `{entry}`"
            )));
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        config.apply_kv(&key, &value)?;
        explicit.push((key, value));
    }
    let sugar: [(&str, Option<String>); 5] = [
        ("model.ablation", args.ablation.clone()),
        ("train.loss", args.loss.clone()),
        ("data.missing", args.missing.clone()),
        ("data.missing_ratio", args.missing_ratio.map(|v| v.to_string())),
        ("model.output_activation", args.output_activation.clone()),
    ];
    for (key, value) in sugar {
        if let Some(value) = value {
            config.apply_kv(key, &value)?;
            explicit.push((key.to_string(), value));
        }
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
        explicit.push(("seed".to_string(), seed.to_string()));
    }
    Ok((config, explicit))
}

/// Write the resolved configuration into the output directory and echo it.
fn log_resolved(out: &Path, config: &AppConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let text = resolved_text(config);
    std::fs::write(out.join("resolved_config.txt"), &text)?;
    println!("resolved configuration:");
    for line in text.lines() {
        println!("  {line}");
    }
    Ok(())
}

struct Prepared {
    names: Vec<String>,
    channels: usize,
    normalizer: Normalizer,
    train_w: WindowBatch,
    val_w: WindowBatch,
    test_w: WindowBatch,
    /// Absolute row index where the test split starts.
    test_offset: usize,
}

/// Load (or synthesize) the panel, simulate missingness, split, normalize on
/// the training split, and window all three parts.
fn prepare_data(config: &AppConfig) -> Result<Prepared, CliError> {
    let plan = seed_plan(config.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(plan.data);

    let table: SeriesTable = match &config.data.path {
        Some(path) => load_csv(path)
            .map_err(|e| CliError::Data(format!("data file `{}`: {e}", path.display())))?,
        None => {
            let synth = &config.data.synthetic;
            generate_synthetic(synth.n, synth.t, synth.m_true, synth.noise_std, &mut data_rng)?.0
        }
    };

    let table = match config.data.missing {
        Some(pattern) if config.data.missing_ratio > 0.0 || config.data.sensor_fail_prob > 0.0 => {
            apply_missingness(
                &table,
                pattern,
                config.data.missing_ratio,
                config.data.sensor_fail_prob,
                &mut data_rng,
            )?
        }
        None if config.data.sensor_fail_prob > 0.0 => apply_missingness(
            &table,
            jhgrf::data::MissingPattern::Point,
            0.0,
            config.data.sensor_fail_prob,
            &mut data_rng,
        )?,
        _ => table,
    };

    let (train_part, val_part, test_part) = split_chronological(&table, config.data.split)?;
    let test_offset = train_part.t_len() + val_part.t_len();
    let normalizer = Normalizer::fit(config.data.normalization, &train_part);
    let train_scaled = normalizer.normalize(&train_part)?;
    let val_scaled = normalizer.normalize(&val_part)?;
    let test_scaled = normalizer.normalize(&test_part)?;
    let (tau, upsilon, stride) = (config.data.tau, config.data.upsilon, config.data.stride);
    let train_w = make_windows(&train_scaled, tau, upsilon, stride)?.retain_observed_targets();
    let val_w = make_windows(&val_scaled, tau, upsilon, stride)?.retain_observed_targets();
    let test_w = make_windows(&test_scaled, tau, upsilon, stride)?;
    Ok(Prepared {
        names: table.names.clone(),
        channels: table.channels(),
        normalizer,
        train_w,
        val_w,
        test_w,
        test_offset,
    })
}

fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("horizon,mae,rmse,mape\n");
    for (h, row) in report.per_horizon.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", h + 1, row.mae, row.rmse, row.mape);
    }
    let agg = &report.aggregate;
    let _ = writeln!(out, "all,{},{},{}", agg.mae, agg.rmse, agg.mape);
    out
}

fn print_report(label: &str, report: &MetricReport) {
    println!(
        "{label}: MAE {:.6}  RMSE {:.6}  MAPE {:.3}%",
        report.aggregate.mae, report.aggregate.rmse, report.aggregate.mape
    );
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let (config, _) = resolve_config(args)?;
    log_resolved(&args.out, &config)?;
    let prepared = prepare_data(&config)?;

    let model_config = config.resolve_model_config(prepared.names.len(), prepared.channels);
    model_config.validate()?;
    let plan = seed_plan(config.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(plan.init);
    let model = Model::init(model_config, &mut init_rng)?;

    let outcome = train(
        model,
        &prepared.train_w,
        &prepared.val_w,
        Some(&prepared.normalizer),
        &config.resolve_train_config(),
    )?;
    println!(
        "best epoch {} with validation MAE {:.6}",
        outcome.best_epoch, outcome.best_val_mae
    );

    std::fs::write(args.out.join("history.csv"), history_to_csv(&outcome.history))?;
    save_model(&args.out.join("model.ckpt"), &outcome.best)?;
    let report = evaluate(&outcome.best, &prepared.test_w, Some(&prepared.normalizer))?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&report))?;
    print_report("test", &report);
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

/// Verify that explicitly-configured model settings (and windowing lengths)
/// agree with what the checkpoint was trained with.
fn check_conflicts(
    model: &Model,
    explicit: &[(String, String)],
) -> Result<(), CliError> {
    for (key, value) in explicit {
        if let Some(field) = key.strip_prefix("model.") {
            let mut scratch = model.config.clone();
            scratch
                .set_key(field, value)
                .map_err(|e| CliError::Config(e.to_string()))?;
            if scratch != model.config {
                let current = model
                    .config
                    .to_key_values()
                    .into_iter()
                    .find(|(k, _)| k == field)
                    .map(|(_, v)| v)
                    .unwrap_or_default();
                return Err(CliError::Mismatch(format!(
                    "`{key} = {value}` conflicts with the checkpoint (trained with {field} = {current})"
                )));
            }
        }
        if key == "data.tau" && value.parse() != Ok(model.config.tau) {
            return Err(CliError::Mismatch(format!(
                "`data.tau = {value}` conflicts with the checkpoint (trained with tau = {})",
                model.config.tau
            )));
        }
        if key == "data.upsilon" && value.parse() != Ok(model.config.upsilon) {
            return Err(CliError::Mismatch(format!(
                "`data.upsilon = {value}` conflicts with the checkpoint (trained with upsilon = {})",
                model.config.upsilon
            )));
        }
    }
    Ok(())
}

/// Load the checkpoint, enforce config agreement, and prepare matching data.
fn load_for_inference(args: &CheckpointArgs) -> Result<(AppConfig, Model, Prepared), CliError> {
    let (mut config, explicit) = resolve_config(&args.run)?;
    let model = load_model(&args.checkpoint).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Data(format!(
            "cannot read checkpoint `{}`: {io}",
            args.checkpoint.display()
        )),
        other => CliError::from(other),
    })?;
    check_conflicts(&model, &explicit)?;
    // The checkpoint dictates the windowing.
    config.data.tau = model.config.tau;
    config.data.upsilon = model.config.upsilon;
    config.model = model.config.clone();
    log_resolved(&args.run.out, &config)?;
    let prepared = prepare_data(&config)?;
    if prepared.names.len() != model.config.n || prepared.channels != model.config.c {
        return Err(CliError::Mismatch(format!(
            "checkpoint was trained on n={}, c={} but the data has n={}, c={}",
            model.config.n,
            model.config.c,
            prepared.names.len(),
            prepared.channels
        )));
    }
    Ok((config, model, prepared))
}

fn cmd_evaluate(args: &CheckpointArgs) -> Result<(), CliError> {
    let (_, model, prepared) = load_for_inference(args)?;
    let report = evaluate(&model, &prepared.test_w, Some(&prepared.normalizer))?;
    std::fs::write(args.run.out.join("metrics.csv"), metrics_csv(&report))?;
    print_report("test", &report);
    Ok(())
}

fn cmd_forecast(args: &CheckpointArgs) -> Result<(), CliError> {
    let (config, model, prepared) = load_for_inference(args)?;
    let windows = &prepared.test_w;
    if windows.is_empty() {
        return Err(CliError::Data("test split produced no windows".into()));
    }
    let (n, c) = (model.config.n, model.config.c);
    let upsilon = model.config.upsilon;
    let mut files: Vec<String> = vec![String::from("step,truth,point,sigma\n"); n * c];
    for w in 0..windows.len() {
        let window = windows.window(w);
        let forecast = model.forward(&window.input, Some(&window.input_mask))?;
        for i in 0..n {
            for h in 0..upsilon {
                for ch in 0..c {
                    let idx = (i * upsilon + h) * c + ch;
                    let step =
                        prepared.test_offset + w * config.data.stride + config.data.tau + h;
                    let truth = if window.target_mask.values()[idx] == 1.0 {
                        prepared
                            .normalizer
                            .denormalize_value(i, ch, window.target.values()[idx])
                            .to_string()
                    } else {
                        String::new()
                    };
                    let point = prepared
                        .normalizer
                        .denormalize_value(i, ch, forecast.point.values()[idx]);
                    let sigma = match &forecast.sigma {
                        Some(sigma) => {
                            (sigma.values()[idx] * prepared.normalizer.scale_for(i, ch))
                                .to_string()
                        }
                        None => String::new(),
                    };
                    let _ = writeln!(files[i * c + ch], "{step},{truth},{point},{sigma}");
                }
            }
        }
    }
    for i in 0..n {
        for ch in 0..c {
            let name = if c == 1 {
                format!("forecast_{}.csv", prepared.names[i])
            } else {
                format!("forecast_{}.ch{ch}.csv", prepared.names[i])
            };
            std::fs::write(args.run.out.join(&name), &files[i * c + ch])?;
        }
    }
    println!(
        "wrote {} forecast file(s) under {}",
        n * c,
        args.run.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<(), CliError> {
    let (config, _) = resolve_config(args)?;
    log_resolved(&args.out, &config)?;
    let prepared = prepare_data(&config)?;
    let plan = seed_plan(config.seed);

    let mut rows: Vec<(Ablation, MetricReport)> = Vec::new();
    let mut first_error: Option<CliError> = None;
    for ablation in Ablation::all() {
        let mut model_config =
            config.resolve_model_config(prepared.names.len(), prepared.channels);
        model_config.ablation = ablation;
        let attempt = (|| -> Result<MetricReport, CliError> {
            model_config.validate()?;
            let mut init_rng = ChaCha8Rng::seed_from_u64(plan.init);
            let model = Model::init(model_config, &mut init_rng)?;
            let outcome = train(
                model,
                &prepared.train_w,
                &prepared.val_w,
                Some(&prepared.normalizer),
                &config.resolve_train_config(),
            )?;
            Ok(evaluate(
                &outcome.best,
                &prepared.test_w,
                Some(&prepared.normalizer),
            )?)
        })();
        match attempt {
            Ok(report) => {
                print_report(ablation.as_str(), &report);
                rows.push((ablation, report));
            }
            Err(e) => {
                eprintln!("variant {ablation} failed: {}", e.message());
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
        // Preserve partial results: rewrite the comparison after every
        // variant.
        let csv = ablation_csv(&rows);
        std::fs::write(args.out.join("ablation.csv"), csv)?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn ablation_csv(rows: &[(Ablation, MetricReport)]) -> String {
    let mut out =
        String::from("variant,mae,rmse,mape,mae_delta_pct,rmse_delta_pct,mape_delta_pct\n");
    let full = rows
        .iter()
        .find(|(a, _)| *a == Ablation::Full)
        .map(|(_, r)| r.aggregate);
    for (ablation, report) in rows {
        let agg = report.aggregate;
        let delta = |value: f64, base: Option<f64>| -> String {
            match base {
                Some(b) if b != 0.0 => ((value - b) / b * 100.0).to_string(),
                _ => String::new(),
            }
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            ablation,
            agg.mae,
            agg.rmse,
            agg.mape,
            delta(agg.mae, full.map(|f| f.mae)),
            delta(agg.rmse, full.map(|f| f.rmse)),
            delta(agg.mape, full.map(|f| f.mape)),
        );
    }
    out
}

fn cmd_gen_synthetic(args: &RunArgs) -> Result<(), CliError> {
    let (config, _) = resolve_config(args)?;
    log_resolved(&args.out, &config)?;
    let plan = seed_plan(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.data);
    let synth = &config.data.synthetic;
    let (table, incidence) =
        generate_synthetic(synth.n, synth.t, synth.m_true, synth.noise_std, &mut rng)?;

    let mut csv = table.names.join(",");
    csv.push('\n');
    for t in 0..table.t_len() {
        for i in 0..table.series_count() {
            if i > 0 {
                csv.push(',');
            }
            let _ = write!(csv, "{}", table.value(t, i, 0));
        }
        csv.push('\n');
    }
    std::fs::write(args.out.join("synthetic.csv"), csv)?;

    let m = incidence.m();
    let mut inc_csv = String::from("series");
    for j in 0..m {
        let _ = write!(inc_csv, ",edge{j}");
    }
    inc_csv.push('\n');
    for i in 0..incidence.n() {
        let _ = write!(inc_csv, "{}", table.names[i]);
        for j in 0..m {
            let _ = write!(inc_csv, ",{}", incidence.weights.values()[i * m + j]);
        }
        inc_csv.push('\n');
    }
    std::fs::write(args.out.join("planted_incidence.csv"), inc_csv)?;
    println!(
        "wrote synthetic panel ({} steps x {} series) under {}",
        table.t_len(),
        table.series_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_export_structure(args: &ExportArgs) -> Result<(), CliError> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::Config(format!(
            "threshold must lie strictly between 0 and 1, got {}",
            args.threshold
        )));
    }
    let (mut config, explicit) = resolve_config(&args.run)?;
    let model = load_model(&args.checkpoint).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Data(format!(
            "cannot read checkpoint `{}`: {io}",
            args.checkpoint.display()
        )),
        other => CliError::from(other),
    })?;
    check_conflicts(&model, &explicit)?;
    config.data.tau = model.config.tau;
    config.data.upsilon = model.config.upsilon;
    config.model = model.config.clone();
    log_resolved(&args.run.out, &config)?;

    let probs = pairwise_probabilities(&model.params.embeddings)?;
    let soft = eval_incidence(&probs, model.config.gamma, 1e-8)?;
    let hard = harden_incidence(&soft, args.threshold);

    let m = soft.m();
    let write_matrix = |name: &str, weights: &[f64]| -> Result<(), CliError> {
        let mut csv = String::from("series");
        for j in 0..m {
            let _ = write!(csv, ",edge{j}");
        }
        csv.push('\n');
        for i in 0..soft.n() {
            let _ = write!(csv, "series{i}");
            for j in 0..m {
                let _ = write!(csv, ",{}", weights[i * m + j]);
            }
            csv.push('\n');
        }
        std::fs::write(args.run.out.join(name), csv)?;
        Ok(())
    };
    write_matrix("structure.csv", soft.weights.values())?;
    write_matrix("structure_hard.csv", hard.weights.values())?;
    println!(
        "wrote structure.csv and structure_hard.csv (threshold {}) under {}",
        args.threshold,
        args.run.out.display()
    );
    Ok(())
}
