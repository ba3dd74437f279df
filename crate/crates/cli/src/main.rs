//! `dsm`: generate data, train, cross-validate, evaluate and run the
//! transfer experiment.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dsm_core::baselines::{transfer_eval, TransferResult, DEFAULT_RIDGE};
use dsm_core::config::{load_config, RunConfig};
use dsm_core::data::{
    load_csv_raw, support_normal_values, transfer_split, write_csv, CsvOptions, GeneratorSpec, Imputer, SurvivalDataset,
};
use dsm_core::metrics::{absolute_horizons, evaluate_model, event_quantiles, write_metric_rows};
use dsm_core::model::{read_model, save_model};
use dsm_core::training::{fit, grid_search_cv, write_cv_rows, CvOptions, CvReport};

use manifest::{write_atomic, RunManifest};

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "DSM_THREADS";

#[derive(Parser)]
#[command(name = "dsm", version, about = "Deep survival machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the two-risk synthetic dataset as CSV.
    Generate(GenerateArgs),
    /// Fit one model and save it.
    Train(TrainArgs),
    /// Grid search with k-fold cross-validation.
    Cv(CvArgs),
    /// Cross-validation after artificially censoring training folds.
    AblateCensoring(AblateArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Export the learned representation of every row.
    Embed(EmbedArgs),
    /// Representation transfer between the two synthetic risks.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 30_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "censor-frac", default_value_t = 0.5)]
    censor_frac: f64,
    #[arg(long = "block-dim", default_value_t = 4)]
    block_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV with feature columns plus `time` and `event`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "time-column", default_value = "time")]
    time_column: String,
    #[arg(long = "event-column", default_value = "event")]
    event_column: String,
    /// Fill missing cells (column mean or mode over the whole file).
    #[arg(long)]
    impute: bool,
    /// With --impute, use the SUPPORT normal values for physiology columns.
    #[arg(long = "support-normals")]
    support_normals: bool,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set k=4,6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    folds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated fractions of uncensored training rows to censor.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Absolute horizon times; overrides --levels.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<f64>>,
    /// Event-time quantile levels used as horizons.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
    levels: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Seed of the generated dataset; `--seed` seeds training.
    #[arg(long = "data-seed", default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 30_000)]
    n: usize,
    #[command(flatten)]
    config: ConfigArgs,
    /// Folds for the Cox evaluation on the second half.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn load_data(args: &DataArgs, n_risks: Option<usize>) -> Result<SurvivalDataset> {
    let opts = CsvOptions {
        time_column: args.time_column.clone(),
        label_column: args.event_column.clone(),
        n_risks,
        ..CsvOptions::default()
    };
    let raw = load_csv_raw(&args.data, &opts).with_context(|| format!("reading {}", args.data.display()))?;
    let raw = if args.impute && raw.has_missing() {
        let overrides = if args.support_normals {
            support_normal_values()
        } else {
            BTreeMap::new()
        };
        let rows: Vec<usize> = (0..raw.len()).collect();
        Imputer::fit(&raw, &rows, &overrides)?.apply(&raw)?
    } else {
        raw
    };
    Ok(raw.into_dataset()?)
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for item in &args.overrides {
        let (k, v) = item.split_once('=').with_context(|| format!("--set {item}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v).map_err(|m| anyhow::anyhow!("--set {item}: {m}"))?;
    }
    if let Some(seed) = args.seed {
        cfg.base.seed = seed;
        cfg.cv.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let tmp = {
        let mut s = path.as_os_str().to_os_string();
        s.push(".tmp");
        PathBuf::from(s)
    };
    {
        let file = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = GeneratorSpec {
        n: args.n,
        block_dim: args.block_dim,
        seed: args.seed,
        censor_fraction: args.censor_frac,
    };
    RunManifest::new("generate")
        .seed("generator", args.seed)
        .output(&args.out)
        .write(&sidecar(&args.out))?;
    let data = spec.sample()?.data;
    write_file(&args.out, |w| Ok(write_csv(&data, w)?))?;
    println!(
        "wrote {} rows ({} censored, {} risk 1, {} risk 2) to {}",
        data.len(),
        data.censored_count(),
        data.event_count(1),
        data.event_count(2),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let points = cfg.grid_points();
    if points.len() != 1 {
        bail!(
            "train needs a single configuration, the grid has {} points; give one value per grid key with --set",
            points.len()
        );
    }
    let tc = &points[0];
    RunManifest::new("train")
        .config_hash(tc.hash())
        .seed("train", tc.seed)
        .input(&args.data.data)
        .output(&args.out)
        .write(&sidecar(&args.out))?;
    let data = load_data(&args.data, None)?;
    let result = fit(&data, tc)?;
    save_model(&result.model, &args.out)?;
    println!(
        "trained {} parameters for {} epochs (best {}); initial loss {:.6}, best validation loss {:.6}",
        result.model.parameter_count(),
        result.trace.len(),
        result.best_epoch,
        result.initial_train_loss,
        result.trace[result.best_epoch - 1].validation_loss
    );
    Ok(())
}

fn print_report(report: &CvReport) {
    let best = report.best_config();
    println!("best config {} ({} parameters)", best.config_hash, best.parameter_count);
    println!("  {}", best.config.canonical());
    for h in &best.horizons {
        let ctd = h.ctd.map_or("n/a".into(), |c| format!("{:.4} ± {:.4}", c.mean, c.standard_error));
        let brier = h.brier.map_or("n/a".into(), |c| format!("{:.4} ± {:.4}", c.mean, c.standard_error));
        println!(
            "  risk {} q{:<4} t={:<10.4} ctd {ctd}  brier {brier}",
            h.risk, h.horizon_level, h.horizon_time
        );
    }
}

fn run_cv(data: &SurvivalDataset, cfg: &RunConfig, options: &CvOptions, dir: &Path) -> Result<CvReport> {
    let report = grid_search_cv(data, &cfg.grid_points(), options)?;
    write_file(&dir.join("folds.csv"), |w| Ok(write_cv_rows(&report.rows, w)?))?;
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

fn cv_options(cfg: &RunConfig, folds: Option<usize>) -> CvOptions {
    CvOptions {
        folds: folds.unwrap_or(cfg.cv.folds),
        ..cfg.cv.clone()
    }
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let options = cv_options(&cfg, args.folds);
    create_dir(&args.out)?;
    RunManifest::new("cv")
        .config_hash(cfg.hash())
        .seed("cv", options.seed)
        .input(&args.data.data)
        .output(&args.out.join("folds.csv"))
        .output(&args.out.join("summary.json"))
        .write(&args.out.join("manifest.json"))?;
    let data = load_data(&args.data, None)?;
    let report = run_cv(&data, &cfg, &options, &args.out)?;
    print_report(&report);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let fractions = args.fractions.clone().unwrap_or_else(|| cfg.censoring_fractions.clone());
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        bail!("censoring fraction {f} outside [0, 1]");
    }
    create_dir(&args.out)?;
    let dirs: Vec<PathBuf> = fractions.iter().map(|f| args.out.join(format!("fraction_{f}"))).collect();
    let mut top = RunManifest::new("ablate-censoring")
        .config_hash(cfg.hash())
        .seed("cv", cfg.cv.seed)
        .input(&args.data.data)
        .output(&args.out.join("ablation.csv"));
    for d in &dirs {
        top = top.output(d);
    }
    top.write(&args.out.join("manifest.json"))?;
    let data = load_data(&args.data, None)?;

    let mut lines = vec!["fraction,risk,horizon_level,horizon_time,ctd_mean,ctd_se,brier_mean,brier_se".to_string()];
    for (&fraction, dir) in fractions.iter().zip(&dirs) {
        create_dir(dir)?;
        let options = CvOptions {
            artificial_censoring: fraction,
            ..cv_options(&cfg, args.folds)
        };
        RunManifest::new("ablate-censoring")
            .config_hash(cfg.hash())
            .seed("cv", options.seed)
            .fraction(fraction)
            .input(&args.data.data)
            .output(&dir.join("folds.csv"))
            .output(&dir.join("summary.json"))
            .write(&dir.join("manifest.json"))?;
        let report = run_cv(&data, &cfg, &options, dir)?;
        println!("fraction {fraction}:");
        print_report(&report);
        for h in &report.best_config().horizons {
            let (cm, cs) = h.ctd.map_or((String::new(), String::new()), |c| (c.mean.to_string(), c.standard_error.to_string()));
            let (bm, bs) = h.brier.map_or((String::new(), String::new()), |c| (c.mean.to_string(), c.standard_error.to_string()));
            lines.push(format!("{fraction},{},{},{},{cm},{cs},{bm},{bs}", h.risk, h.horizon_level, h.horizon_time));
        }
    }
    lines.push(String::new());
    write_atomic(&args.out.join("ablation.csv"), lines.join("\n").as_bytes())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    create_dir(&args.out)?;
    RunManifest::new("eval")
        .input(&args.model)
        .input(&args.data.data)
        .output(&args.out.join("metrics.csv"))
        .write(&args.out.join("manifest.json"))?;
    let model = read_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let data = load_data(&args.data, Some(model.risks()))?;
    if data.feature_names() != model.feature_names() {
        bail!(
            "data columns {:?} do not match the model's features {:?}",
            data.feature_names(),
            model.feature_names()
        );
    }
    let horizons = match &args.horizons {
        Some(times) => absolute_horizons(times, model.risks())?,
        None => (1..=model.risks())
            .map(|risk| event_quantiles(&data, risk, &args.levels))
            .collect::<dsm_core::Result<Vec<_>>>()?,
    };
    let rows = evaluate_model(&model, &data, &horizons)?;
    write_file(&args.out.join("metrics.csv"), |w| Ok(write_metric_rows(&rows, w)?))?;
    println!("parameters: {}", model.parameter_count());
    for r in &rows {
        let ctd = r.ctd.map_or("n/a".into(), |c| format!("{c:.4}"));
        println!("risk {} t={:.4}: ctd {ctd} brier {:.4} ({} pairs)", r.risk, r.horizon_time, r.brier, r.n_pairs);
    }
    Ok(())
}

fn write_embeddings(path: &Path, values: &[f64], dim: usize) -> Result<()> {
    write_file(path, |w| {
        let header: Vec<String> = (1..=dim).map(|j| format!("h{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in values.chunks(dim) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    RunManifest::new("embed")
        .input(&args.model)
        .input(&args.data.data)
        .output(&args.out)
        .write(&sidecar(&args.out))?;
    let model = read_model(&args.model)?;
    let data = load_data(&args.data, Some(model.risks()))?;
    let reps = model.extract_representations(&data)?;
    write_embeddings(&args.out, &reps, model.representation_dim())?;
    println!("wrote {} embeddings of width {}", data.len(), model.representation_dim());
    Ok(())
}

#[derive(Serialize)]
struct TransferRow<'a> {
    method: &'a str,
    #[serde(flatten)]
    result: &'a TransferResult,
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let points = cfg.grid_points();
    let tc = points.first().context("empty grid")?;
    create_dir(&args.out)?;
    let outputs = ["transfer.csv", "transfer.json", "embeddings_b.csv", "model_a.txt"];
    let mut m = RunManifest::new("transfer")
        .config_hash(tc.hash())
        .seed("generator", args.data_seed)
        .seed("train", tc.seed);
    for o in outputs {
        m = m.output(&args.out.join(o));
    }
    m.write(&args.out.join("manifest.json"))?;

    let data = GeneratorSpec {
        n: args.n,
        seed: args.data_seed,
        ..GeneratorSpec::default()
    }
    .sample()?
    .data;
    let split = transfer_split(&data)?;
    let fitted = fit(&split.a, tc)?;
    save_model(&fitted.model, &args.out.join("model_a.txt"))?;
    let dim = fitted.model.representation_dim();
    let reps = fitted.model.extract_representations(&split.b)?;
    write_embeddings(&args.out.join("embeddings_b.csv"), &reps, dim)?;

    let dsm = transfer_eval(&reps, dim, &split.b, args.folds, tc.seed, args.ridge)?;
    let raw = transfer_eval(split.b.features(), split.b.n_features(), &split.b, args.folds, tc.seed, args.ridge)?;
    let rows = [
        TransferRow {
            method: "dsm_embedding",
            result: &dsm,
        },
        TransferRow {
            method: "raw_features",
            result: &raw,
        },
    ];
    let mut csv = String::from("method,c_index,standard_error,ci_low,ci_high\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.result.mean, r.result.standard_error, r.result.ci_low, r.result.ci_high
        ));
    }
    write_atomic(&args.out.join("transfer.csv"), csv.as_bytes())?;
    write_json(&args.out.join("transfer.json"), &rows)?;
    for r in &rows {
        println!(
            "{}: C-index {:.4} (90% CI {:.4} to {:.4})",
            r.method, r.result.mean, r.result.ci_low, r.result.ci_high
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::AblateCensoring(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Transfer(a) => cmd_transfer(a),
    }
}
