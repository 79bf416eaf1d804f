//! Command-line entry point: dataset generation, training, evaluation,
//! ablation runs, per-page reports, and gradient self-verification.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dei2n::checkpoint::{load_checkpoint, save_checkpoint};
use dei2n::data::{load_dataset, save_dataset, save_manifest, DatasetManifest};
use dei2n::encoding::{encode_sample, EncodedSample, Hyper};
use dei2n::metrics::{rela_impr, spearman};
use dei2n::model::{verification_grad_check, Variant};
use dei2n::report::{page_report, write_page_csv, MetricsReport};
use dei2n::synth::{
    fnv1a64, generate_synthetic, item_pool, load_event_log, negative_sample, synthesize_triggers,
    SynthConfig,
};
use dei2n::train::{ablation_suite, evaluate, train, train_from, TrainConfig, VariantResult};
use dei2n::{Error, Result};

// ── argument surface ──

#[derive(Parser)]
#[command(
    name = "dei2n",
    version,
    about = "Trigger-induced CTR model: data generation, training, and analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset, or attribute triggers in an event log.
    Gen(GenArgs),
    /// Train a model and report test metrics.
    Train(TrainArgs),
    /// Score a dataset with a saved checkpoint.
    Eval(EvalArgs),
    /// Train the full model and every reduced variant on identical data.
    Ablate(AblateArgs),
    /// Per-page statistics of a dataset under a saved checkpoint.
    Report(ReportArgs),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Optional defaults loaded from `--config`; flags take precedence. Keys
/// mirror the flag names.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    dropout: Option<f64>,
    ablation: Option<String>,
    preset: Option<String>,
    neg_ratio: Option<u32>,
    trigger_window_hours: Option<f64>,
    baseline_auc: Option<f64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))
    }
}

#[derive(Args)]
struct GenArgs {
    /// JSON file of default flag values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out/gen")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus size preset: `fig2` (~200k samples) or `tiny` (1k samples).
    #[arg(long)]
    preset: Option<String>,
    /// Click/exposure event log (JSONL). When given, samples come from
    /// trigger attribution over this log instead of the synthetic generator.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Log path only: keep positives and draw this many negatives per
    /// positive from the log's item pool.
    #[arg(long)]
    neg_ratio: Option<u32>,
    /// Log path only: trigger attribution window in hours.
    #[arg(long)]
    trigger_window_hours: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
    /// Dataset directory (train.jsonl + optional test.jsonl) or one file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model variant: FULL, NO-UI2M, NO-TIM, NO-IL, NO-UHIM, or NO-USIM.
    #[arg(long)]
    ablation: Option<String>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/eval")]
    out: PathBuf,
    /// Dataset directory (scores test.jsonl) or one file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Baseline AUC for the relative-improvement column.
    #[arg(long)]
    baseline_auc: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/ablate")]
    out: PathBuf,
    /// Dataset directory with train.jsonl and test.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/report")]
    out: PathBuf,
    /// Dataset directory (reports on test.jsonl) or one file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/gradcheck")]
    out: PathBuf,
    /// Seed for the random parameter point the check runs at.
    #[arg(long)]
    seed: Option<u64>,
}

// ── shared plumbing ──

fn write_resolved<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(resolved)?;
    std::fs::write(out.join("resolved-config.json"), text + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `--data` accepts a dataset directory or a single JSONL file.
fn dataset_file(data: &Path, split: &str) -> Result<PathBuf> {
    if data.is_dir() {
        let path = data.join(format!("{split}.jsonl"));
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} has no {split}.jsonl",
                data.display()
            )));
        }
        Ok(path)
    } else if data.exists() {
        Ok(data.to_path_buf())
    } else {
        Err(Error::InvalidArgument(format!("no such dataset: {}", data.display())))
    }
}

fn load_encoded(path: &Path, hyper: &Hyper) -> Result<Vec<EncodedSample>> {
    let raw = load_dataset(path)?;
    raw.iter().map(|s| encode_sample(s, hyper)).collect()
}

fn parse_variant(name: Option<&str>) -> Result<Variant> {
    match name {
        None => Ok(Variant::Full),
        Some(s) => s
            .parse::<Variant>()
            .map_err(|_| Error::InvalidArgument(format!("unknown model variant: {s}"))),
    }
}

fn resolve_train_config(
    file: &FileConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    ablation: Option<&str>,
) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let variant = parse_variant(ablation.or(file.ablation.as_deref()))?;
    Ok(TrainConfig {
        learning_rate: lr.or(file.lr).unwrap_or(defaults.learning_rate),
        batch_size: batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        epochs: epochs.or(file.epochs).unwrap_or(defaults.epochs),
        dropout: file.dropout.unwrap_or(defaults.dropout),
        seed: seed.or(file.seed).unwrap_or(defaults.seed),
        ablation: variant.config(),
    })
}

// ── subcommands ──

#[derive(Serialize)]
struct ResolvedGen {
    command: &'static str,
    out: PathBuf,
    mode: &'static str,
    preset: Option<String>,
    data: Option<PathBuf>,
    neg_ratio: Option<u32>,
    trigger_window_hours: Option<f64>,
    synth: Option<SynthConfig>,
}

fn preset_config(name: &str, seed: u64) -> Result<SynthConfig> {
    match name {
        "fig2" => Ok(SynthConfig { seed, ..SynthConfig::default() }),
        "tiny" => Ok(SynthConfig {
            n_users: 50,
            n_sessions: 25,
            seed,
            ..SynthConfig::default()
        }),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset {other}; expected fig2 or tiny"
        ))),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(7);
    std::fs::create_dir_all(&args.out)?;

    if let Some(log_path) = &args.data {
        let window_hours =
            args.trigger_window_hours.or(file.trigger_window_hours).unwrap_or(4.0);
        if window_hours < 0.0 {
            return Err(Error::InvalidArgument("trigger window must be non-negative".into()));
        }
        let neg_ratio = args.neg_ratio.or(file.neg_ratio);
        let events = load_event_log(log_path)?;
        let attributed = synthesize_triggers(&events, (window_hours * 3600.0) as i64)?;
        let n_attributed = attributed.len();
        let samples = match neg_ratio {
            Some(ratio) => {
                let positives: Vec<_> =
                    attributed.iter().filter(|s| s.label == 1).cloned().collect();
                let pool = item_pool(&attributed);
                negative_sample(&positives, &pool, ratio, seed)?
            }
            None => attributed,
        };
        let dataset = args.out.join("samples.jsonl");
        save_dataset(&dataset, &samples)?;
        let resolved = ResolvedGen {
            command: "gen",
            out: args.out.clone(),
            mode: "event-log",
            preset: None,
            data: Some(log_path.clone()),
            neg_ratio,
            trigger_window_hours: Some(window_hours),
            synth: None,
        };
        write_resolved(&args.out, &resolved)?;
        let users: std::collections::BTreeSet<u64> = samples.iter().map(|s| s.user_id).collect();
        let manifest = DatasetManifest {
            n_users: users.len() as u64,
            n_items: item_pool(&samples).len() as u64,
            n_categories: samples
                .iter()
                .map(|s| s.target.category_id)
                .collect::<std::collections::BTreeSet<_>>()
                .len() as u64,
            n_samples: samples.len() as u64,
            n_train: samples.len() as u64,
            n_test: 0,
            positive_rate: samples.iter().filter(|s| s.label == 1).count() as f64
                / samples.len().max(1) as f64,
            split_ts: samples.iter().map(|s| s.ts).max().unwrap_or(0) + 1,
            config_hash: format!(
                "{:016x}",
                fnv1a64(serde_json::to_string(&resolved.trigger_window_hours)?.as_bytes())
            ),
        };
        save_manifest(&args.out.join("manifest.json"), &manifest)?;
        if samples.len() == n_attributed {
            println!("attributed {n_attributed} exposures -> {}", dataset.display());
        } else {
            println!(
                "attributed {n_attributed} exposures, {} samples after negative sampling -> {}",
                samples.len(),
                dataset.display()
            );
        }
        return Ok(());
    }

    let preset = args.preset.or(file.preset).unwrap_or_else(|| "fig2".into());
    let synth = preset_config(&preset, seed)?;
    let output = generate_synthetic(&synth)?;
    save_dataset(&args.out.join("train.jsonl"), &output.train)?;
    save_dataset(&args.out.join("test.jsonl"), &output.test)?;
    save_manifest(&args.out.join("manifest.json"), &output.manifest)?;
    write_resolved(
        &args.out,
        &ResolvedGen {
            command: "gen",
            out: args.out.clone(),
            mode: "synthetic",
            preset: Some(preset),
            data: None,
            neg_ratio: None,
            trigger_window_hours: None,
            synth: Some(synth),
        },
    )?;
    println!(
        "wrote {} train + {} test samples (positive rate {:.4}) under {}",
        output.manifest.n_train,
        output.manifest.n_test,
        output.manifest.positive_rate,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrain {
    command: &'static str,
    out: PathBuf,
    data: PathBuf,
    warm_start: Option<PathBuf>,
    train: TrainConfig,
    hyper: Hyper,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let cfg = resolve_train_config(
        &file,
        args.seed,
        args.epochs,
        args.batch_size,
        args.lr,
        args.ablation.as_deref(),
    )?;

    let (initial, hyper) = match &args.checkpoint {
        Some(path) => {
            let model = load_checkpoint(path)?;
            if model.ablation != cfg.ablation {
                return Err(Error::InvalidArgument(
                    "checkpoint variant does not match --ablation".into(),
                ));
            }
            let hyper = model.hyper.clone();
            (Some(model), hyper)
        }
        None => (None, Hyper::default()),
    };

    let train_samples = load_encoded(&dataset_file(&args.data, "train")?, &hyper)?;
    let test_path = if args.data.is_dir() && args.data.join("test.jsonl").exists() {
        Some(args.data.join("test.jsonl"))
    } else {
        None
    };

    write_resolved(
        &args.out,
        &ResolvedTrain {
            command: "train",
            out: args.out.clone(),
            data: args.data.clone(),
            warm_start: args.checkpoint.clone(),
            train: cfg.clone(),
            hyper: hyper.clone(),
        },
    )?;

    let out = match initial {
        Some(model) => train_from(&cfg, model, &train_samples, Some(&args.out))?,
        None => train(&cfg, &hyper, &train_samples, Some(&args.out))?,
    };
    save_checkpoint(&args.out.join("model.ckpt"), &out.model)?;
    for e in &out.epochs {
        println!("epoch {}: mean loss {:.6} over {} batches", e.epoch + 1, e.mean_loss, e.n_batches);
    }

    let (eval_samples, eval_split) = match &test_path {
        Some(p) => (load_encoded(p, &hyper)?, "test"),
        None => (train_samples, "train"),
    };
    let eval = evaluate(&out.model, &eval_samples, cfg.batch_size)?;
    let pages = page_report(&eval_samples, eval.p_tr.as_deref())?;
    let report = MetricsReport {
        auc: eval.auc,
        mean_loss: eval.mean_loss,
        baseline_auc: None,
        rela_impr_vs_baseline: None,
        epoch_loss: out.epochs,
        pages,
    };
    write_json(&args.out.join("metrics.json"), &report)?;
    write_page_csv(&args.out.join("pages.csv"), &report.pages)?;
    println!("{eval_split} AUC {:.4}; outputs under {}", eval.auc, args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedEval {
    command: &'static str,
    out: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    batch_size: usize,
    baseline_auc: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let batch_size = args.batch_size.or(file.batch_size).unwrap_or(256);
    let baseline = args.baseline_auc.or(file.baseline_auc);
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = load_encoded(&dataset_file(&args.data, "test")?, &model.hyper)?;
    write_resolved(
        &args.out,
        &ResolvedEval {
            command: "eval",
            out: args.out.clone(),
            data: args.data.clone(),
            checkpoint: args.checkpoint.clone(),
            batch_size,
            baseline_auc: baseline,
        },
    )?;
    let eval = evaluate(&model, &samples, batch_size)?;
    let pages = page_report(&samples, eval.p_tr.as_deref())?;
    let improvement = baseline.map(|b| rela_impr(eval.auc, b)).transpose()?;
    let report = MetricsReport {
        auc: eval.auc,
        mean_loss: eval.mean_loss,
        baseline_auc: baseline,
        rela_impr_vs_baseline: improvement,
        epoch_loss: vec![],
        pages,
    };
    write_json(&args.out.join("metrics.json"), &report)?;
    write_page_csv(&args.out.join("pages.csv"), &report.pages)?;
    match improvement {
        Some(imp) => println!("AUC {:.4} ({:+.2}% vs baseline)", eval.auc, imp),
        None => println!("AUC {:.4}", eval.auc),
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedAblate {
    command: &'static str,
    out: PathBuf,
    data: PathBuf,
    train: TrainConfig,
    hyper: Hyper,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let cfg =
        resolve_train_config(&file, args.seed, args.epochs, args.batch_size, args.lr, None)?;
    let hyper = Hyper::default();
    let train_samples = load_encoded(&dataset_file(&args.data, "train")?, &hyper)?;
    let test_samples = load_encoded(&dataset_file(&args.data, "test")?, &hyper)?;
    write_resolved(
        &args.out,
        &ResolvedAblate {
            command: "ablate",
            out: args.out.clone(),
            data: args.data.clone(),
            train: cfg.clone(),
            hyper: hyper.clone(),
        },
    )?;
    let rows = ablation_suite(
        &cfg,
        &hyper,
        &train_samples,
        &test_samples,
        Some(&args.out.join("checkpoints")),
        |variant, auc| println!("trained {variant}: test AUC {auc:.4}"),
    )?;
    write_json(&args.out.join("ablation.json"), &rows)?;
    let mut csv = String::from("variant,auc,rela_impr_vs_full\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6},{:.4}\n", r.variant, r.auc, r.rela_impr_vs_full));
    }
    std::fs::write(args.out.join("ablation.csv"), csv)?;
    println!("\n{:<10} {:>8} {:>10}", "variant", "auc", "rela_impr");
    for VariantResult { variant, auc, rela_impr_vs_full } in &rows {
        println!("{variant:<10} {auc:>8.4} {rela_impr_vs_full:>+9.2}%");
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedReport {
    command: &'static str,
    out: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    batch_size: usize,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let batch_size = args.batch_size.or(file.batch_size).unwrap_or(256);
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = load_encoded(&dataset_file(&args.data, "test")?, &model.hyper)?;
    write_resolved(
        &args.out,
        &ResolvedReport {
            command: "report",
            out: args.out.clone(),
            data: args.data.clone(),
            checkpoint: args.checkpoint.clone(),
            batch_size,
        },
    )?;
    let eval = evaluate(&model, &samples, batch_size)?;
    let rows = page_report(&samples, eval.p_tr.as_deref())?;
    write_json(&args.out.join("pages.json"), &rows)?;
    write_page_csv(&args.out.join("pages.csv"), &rows)?;
    println!(
        "{:>4} {:>8} {:>9} {:>9} {:>7} {:>8}",
        "page", "samples", "same_ctr", "diff_ctr", "share", "p_tr"
    );
    for r in &rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>4} {:>8} {:>9} {:>9} {:>7.4} {:>8}",
            r.page,
            r.samples,
            fmt(r.same_category_ctr),
            fmt(r.different_category_ctr),
            r.same_category_share,
            fmt(r.mean_p_tr)
        );
    }
    if rows.len() >= 2 && rows.iter().all(|r| r.mean_p_tr.is_some()) {
        let means: Vec<f64> = rows.iter().map(|r| r.mean_p_tr.unwrap()).collect();
        let pages: Vec<f64> = rows.iter().map(|r| f64::from(r.page)).collect();
        println!("rank correlation of mean p_tr vs page: {:+.4}", spearman(&means, &pages)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedGradcheck {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    step: f64,
    threshold: f64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(1);
    let (step, threshold) = (1e-5, 1e-4);
    write_resolved(
        &args.out,
        &ResolvedGradcheck { command: "gradcheck", out: args.out.clone(), seed, step, threshold },
    )?;
    let max_rel = verification_grad_check(seed, step)?;
    println!("max relative gradient error: {max_rel:.3e} (threshold {threshold:.0e})");
    if max_rel < threshold {
        println!("OK");
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            detail: format!("gradient check failed: {max_rel:.3e} >= {threshold:.0e}"),
        })
    }
}

// ── entry ──

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::Shape { .. }
        | Error::EmptyAttentionRow { .. }
        | Error::UndefinedMetric(_)
        | Error::NonFinite { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
