//! `qsep`: dataset build, training, separation and the experiment harnesses
//! behind one binary.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config keys or
//! values), 2 runtime failure (missing files, corrupt checkpoints, ...).

mod query_spec;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qsep_core::config::RunConfig;
use qsep_core::embedding::{build_query_set, query_aug, EmbeddingProvider, Modality};
use qsep_core::eval::{
    self, aug_table, nq_sweep, query_aug_comparison, render_mask, render_spectrogram, run_task,
    summary_table, sweep_plot, NegativeMethod, QueryBuilder, Task,
};
use qsep_core::sepnet::{load_checkpoint, SeparationModel};
use qsep_core::spectral::Waveform;
use qsep_core::synthdata::{
    separability_audit, Dataset, DatasetManifest, Split, DEFAULT_OOD_MAGNITUDE, SEPARABILITY_BOUND,
};
use qsep_core::training::{train_with, TrainOutput, FINAL_CHECKPOINT_FILE};
use qsep_core::wav::{read_wav, write_wav};

use query_spec::QuerySpec;

pub const OUT_DIR_ENV: &str = "QSEP_OUT_DIR";
const MANIFEST_FILE: &str = "manifest.toml";
const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "qsep",
    version,
    about = "Query-conditioned sound separation on a synthetic benchmark"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration with [dataset], [model], [train] and [eval] tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=5e-4`. Repeatable; applied in order after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for training (mixture sampling, mixup weights, init) and evaluation (mixtures, query draws).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "qsep-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or inspect the synthetic sound-class catalog.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Mix-and-separate training with the weighted binary cross-entropy mask loss.
    Train(TrainArgs),
    /// Separate one source out of a mixture WAV with a query.
    Separate(SeparateArgs),
    /// Evaluate held-out mixtures and write per-sample SDR reports.
    Eval(EvalArgs),
    /// Parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Write the catalog manifest plus one example WAV per class.
    Build {
        /// Also write `mixture.wav`, the sum of train instance 0 of these classes, e.g. `chirp+am_noise`.
        #[arg(long, value_name = "LABEL+LABEL")]
        mix: Option<String>,
    },
    /// Print classes, splits and the separability audit of a manifest.
    Inspect { manifest: PathBuf },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Catalog manifest; built from the [dataset] config table when omitted.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Print the loss every N steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Mixture WAV at the catalog sample rate.
    mixture: PathBuf,
    /// Query spec: `modality:label` terms joined by `+`, each with an optional `@weight`
    /// (query mixup of the anchors, equal weights by default), e.g. `text:chirp+image:chirp@2`.
    #[arg(long, value_name = "SPEC")]
    query: String,
    /// Negative query describing the interference, same grammar as --query.
    #[arg(long, value_name = "SPEC", requires = "alpha")]
    neg: Option<String>,
    /// Negative-query weight alpha; the query becomes (1 + alpha) Q - alpha Q_N.
    #[arg(long)]
    alpha: Option<f64>,
    /// Negative-query rule: proportional (1 + alpha) Q - alpha Q_N, or naive Q - alpha Q_N.
    #[arg(long, value_enum, default_value_t = MethodArg::Proportional)]
    neg_method: MethodArg,
    /// Query-Aug: replace the query with its most cosine-similar stored class anchor.
    #[arg(long)]
    query_aug: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Tasks to run: tqss, iqss, aqss, composed, or `all`. Comma separated.
    #[arg(long, default_value = "all", value_delimiter = ',')]
    task: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum SweepCmd {
    /// Mean SDR over a grid of negative-query weights, proportional vs naive subtraction.
    Nq {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "tqss")]
        task: String,
        /// Negative-query weights.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2")]
        alphas: Vec<f64>,
    },
    /// Out-of-domain text queries with and without Query-Aug retrieval.
    Ood {
        #[command(flatten)]
        model: ModelArgs,
        /// Per-component std of the description perturbation.
        #[arg(long, default_value_t = DEFAULT_OOD_MAGNITUDE)]
        magnitude: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Proportional,
    Naive,
}

impl From<MethodArg> for NegativeMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Proportional => NegativeMethod::Proportional,
            MethodArg::Naive => NegativeMethod::Naive,
        }
    }
}

/// Error caused by the invocation rather than the environment.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides).map_err(|e| match e {
        qsep_core::Error::Config(msg) => usage(msg),
        other => other.into(),
    })?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn open_dataset(cfg: &RunConfig, data: &DataArgs) -> Result<Dataset> {
    let manifest = match &data.manifest {
        Some(p) => DatasetManifest::load(p)?,
        None => cfg.dataset.build()?,
    };
    Ok(Dataset::new(manifest)?)
}

fn open_model(cfg: &RunConfig, args: &ModelArgs) -> Result<(Dataset, SeparationModel<f32>)> {
    let dataset = open_dataset(cfg, &args.data)?;
    let model = load_checkpoint(&args.checkpoint)?;
    if model.hyper().embed_dim != dataset.space().dim() {
        return Err(anyhow!(
            "checkpoint {} expects {}-dimensional queries, catalog provides {}",
            args.checkpoint.display(),
            model.hyper().embed_dim,
            dataset.space().dim()
        ));
    }
    Ok((dataset, model))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for n in names {
        if n == "all" {
            tasks.extend(Task::ALL);
        } else {
            tasks.push(n.parse::<Task>().map_err(|e| usage(e.to_string()))?);
        }
    }
    tasks.dedup();
    Ok(tasks)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.clone();
    match cli.command {
        Command::Dataset(DatasetCmd::Build { mix }) => {
            cmd_dataset_build(&cfg, &out, mix.as_deref())
        }
        Command::Dataset(DatasetCmd::Inspect { manifest }) => cmd_dataset_inspect(&manifest),
        Command::Train(args) => cmd_train(&cfg, &out, &args),
        Command::Separate(args) => cmd_separate(&cfg, &out, &args),
        Command::Eval(args) => cmd_eval(&cfg, &out, &args),
        Command::Sweep(SweepCmd::Nq {
            model,
            task,
            alphas,
        }) => cmd_sweep_nq(&cfg, &out, &model, &task, &alphas),
        Command::Sweep(SweepCmd::Ood { model, magnitude }) => {
            cmd_sweep_ood(&cfg, &out, &model, magnitude)
        }
    }
}

fn cmd_dataset_build(cfg: &RunConfig, out: &Path, mix: Option<&str>) -> Result<()> {
    let manifest = cfg.dataset.build()?;
    create_dir(out)?;
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    let dataset = Dataset::new(manifest)?;
    let sources = out.join("sources");
    create_dir(&sources)?;
    for (id, label) in dataset.labels() {
        write_wav(
            sources.join(format!("{label}.wav")),
            &dataset.source(id, Split::Train, 0)?,
        )?;
    }
    if let Some(mix) = mix {
        let parts = mix
            .split('+')
            .map(|label| {
                let class = dataset
                    .manifest()
                    .class_by_label(label.trim())
                    .map_err(|e| usage(e.to_string()))?;
                Ok(dataset.source(class.class_id, Split::Train, 0)?)
            })
            .collect::<Result<Vec<Waveform>>>()?;
        write_wav(out.join("mixture.wav"), &Waveform::sum(&parts)?)?;
    }
    println!("wrote {} ({} classes)", path.display(), dataset.n_classes());
    Ok(())
}

fn cmd_dataset_inspect(path: &Path) -> Result<()> {
    let m = DatasetManifest::load(path)?;
    println!(
        "schema {}  seed {}  {} Hz  {} s segments",
        m.schema_version, m.seed, m.sample_rate, m.segment_secs
    );
    println!(
        "stft fft {} hop {} window {}",
        m.stft.fft_size, m.stft.hop, m.stft.window_size
    );
    println!(
        "splits train [{}, +{})  eval [{}, +{})",
        m.splits.train.start, m.splits.train.count, m.splits.eval.start, m.splits.eval.count
    );
    println!(
        "embedding dim {}  sigma_inst {}",
        m.embedding.dim, m.embedding.sigma_inst
    );
    println!(
        "{:<4} {:<16} {:<16} {:>20} {:>16}",
        "id", "label", "kind", "freq range (Hz)", "mod range"
    );
    for c in &m.classes {
        println!(
            "{:<4} {:<16} {:<16} {:>9.1}-{:<10.1} {:>7.2}-{:<8.2}",
            c.class_id,
            c.label,
            c.kind.name(),
            c.freq_range[0],
            c.freq_range[1],
            c.mod_range[0],
            c.mod_range[1]
        );
    }
    let (worst, a, b) = separability_audit(&m.classes, m.sample_rate, m.stft, m.seed)?;
    let verdict = if worst < SEPARABILITY_BOUND {
        "ok"
    } else {
        "FAILED"
    };
    println!("separability audit: max cross-class similarity {worst:.3} ({a} / {b}), bound {SEPARABILITY_BOUND}: {verdict}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<()> {
    let dataset = open_dataset(cfg, &args.data)?;
    create_dir(out)?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
    dataset.manifest().save(out.join(MANIFEST_FILE))?;
    let output = TrainOutput {
        dir: Some(out.to_path_buf()),
    };
    let log_every = args.log_every;
    let result = train_with(&dataset, &cfg.model, &cfg.train, &output, |r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  lr {:.2e}  |g| {:.3}",
                r.step, r.loss, r.lr, r.grad_norm
            );
        }
    })?;
    let last = result.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last:.5}; checkpoint {}",
        result.history.len(),
        out.join(FINAL_CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_separate(cfg: &RunConfig, out: &Path, args: &SeparateArgs) -> Result<()> {
    let spec: QuerySpec = args
        .query
        .parse()
        .map_err(|e| usage(format!("--query: {e}")))?;
    let neg: Option<QuerySpec> = args
        .neg
        .as_deref()
        .map(|s| s.parse().map_err(|e| usage(format!("--neg: {e}"))))
        .transpose()?;
    let alpha = args.alpha.unwrap_or(0.0);
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(usage(format!(
            "--alpha {alpha} must be a finite value >= 0"
        )));
    }
    if alpha > 0.0 && neg.is_none() {
        return Err(usage("--alpha needs --neg"));
    }
    let (dataset, model) = open_model(cfg, &args.model)?;
    let mixture = read_wav(&args.mixture, Some(dataset.manifest().sample_rate))?;
    let spectrogram = dataset.stft().analyze(&mixture)?;

    let mut q = spec
        .embed(&dataset)
        .map_err(|e| usage(format!("--query: {e}")))?;
    if let Some(neg) = &neg {
        let qn = neg
            .embed(&dataset)
            .map_err(|e| usage(format!("--neg: {e}")))?;
        q = eval::apply_negative(&q, &qn, alpha, args.neg_method.into())?;
    }
    if args.query_aug {
        let hit = match q.modality() {
            Modality::Mixed => {
                let ec = eval::EvalConfig::default();
                let builder = QueryBuilder::new(&dataset, &ec)?;
                query_aug(&q, builder.query_set(Task::Composed))?.clone()
            }
            m => {
                let set = build_query_set(dataset.space(), &dataset.labels(), m)?;
                query_aug(&q, &set)?.clone()
            }
        };
        println!("query-aug retrieved class {} ({})", hit.class_id, hit.label);
        q = hit.embedding;
    }
    let (mask, estimate) = eval::separate(&model, &dataset, &mixture, &spectrogram, &q)?;
    create_dir(out)?;
    let wav = out.join("separated.wav");
    write_wav(&wav, &estimate)?;
    render_mask(&mask, out.join("mask.pgm"))?;
    render_spectrogram(&spectrogram, out.join("mixture.pgm"))?;
    println!("wrote {}", wav.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, args: &EvalArgs) -> Result<()> {
    let tasks = parse_tasks(&args.task)?;
    let (dataset, model) = open_model(cfg, &args.model)?;
    create_dir(out)?;
    let mut reports = Vec::new();
    for task in tasks {
        let report = run_task(&model, &dataset, task, &cfg.eval)?;
        report.save(out.join(format!("report_{}.jsonl", task.name().to_lowercase())))?;
        reports.push(report);
    }
    let table = summary_table(&reports);
    write_text(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep_nq(
    cfg: &RunConfig,
    out: &Path,
    args: &ModelArgs,
    task: &str,
    alphas: &[f64],
) -> Result<()> {
    let task: Task = task
        .parse()
        .map_err(|e: qsep_core::Error| usage(e.to_string()))?;
    let (dataset, model) = open_model(cfg, args)?;
    let table = nq_sweep(
        &model,
        &dataset,
        task,
        alphas,
        &[NegativeMethod::Proportional, NegativeMethod::Naive],
        &cfg.eval,
    )?;
    create_dir(out)?;
    write_text(&out.join("sweep_nq.jsonl"), &table.to_jsonl())?;
    let mut text = table.to_table();
    for m in [NegativeMethod::Proportional, NegativeMethod::Naive] {
        if let Some(r) = table.range(m) {
            text.push_str(&format!("range {m}: {r:.3} dB\n"));
        }
    }
    write_text(&out.join("sweep_nq.txt"), &text)?;
    sweep_plot(&table).save(out.join("sweep_nq.pgm"))?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep_ood(cfg: &RunConfig, out: &Path, args: &ModelArgs, magnitude: f64) -> Result<()> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(usage(format!(
            "--magnitude {magnitude} must be a finite value >= 0"
        )));
    }
    let (dataset, model) = open_model(cfg, args)?;
    let rows = query_aug_comparison(&model, &dataset, magnitude, &cfg.eval)?;
    create_dir(out)?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    write_text(&out.join("sweep_ood.jsonl"), &jsonl)?;
    let table = aug_table(&rows);
    write_text(&out.join("sweep_ood.txt"), &table)?;
    print!("{table}");
    Ok(())
}
