//! Command-line front end: synthetic data generation, training with
//! component switches, open-set evaluation, augmentation previews, feature
//! export, and the ablation grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use osdg::ablation::{run_ablation, standard_grid};
use osdg::config::TrainConfig;
use osdg::content::{EdgeKind, EdgeOperator, MaskProvider};
use osdg::data::{
    benchmark_spec, generate_synthetic, load_manifest, write_dataset, Manifest, Normalizer,
};
use osdg::error::{Error, Result};
use osdg::eval::evaluate_domain;
use osdg::tools::{export_features, preview_aug};
use osdg::trainer::{AblationSwitches, Checkpoint, Trainer};
use osdg::types::SampleRecord;

#[derive(Parser)]
#[command(
    name = "osdg",
    about = "Open-set single-source domain generalization workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file (one `key = value` per line)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual config overrides, e.g. --set epochs=10 --set lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        for kv in &self.sets {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                Error::config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum MaskMode {
    /// Use <data>/masks sidecars when present, otherwise all-foreground
    Auto,
    /// Require <data>/masks sidecar files
    Sidecar,
    /// Treat every pixel as foreground (disables suppression)
    AllForeground,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain shape benchmark as a dataset
    /// directory (images, masks, known-class list)
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        /// Samples per class per domain
        #[arg(long, default_value_t = 175)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the known classes of the source domains
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Components to disable, comma-separated subset of
        /// bs,gpsa,kd,eova,ova (default: full method)
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Source domains (default: every domain except the target)
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        /// Held-out domain, excluded from training and scored afterwards
        #[arg(long, default_value = "target")]
        target: String,
        #[arg(long, value_enum, default_value_t = MaskMode::Auto)]
        masks: MaskMode,
    },
    /// Score a checkpoint on dataset domains and dump per-sample decisions
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domains to evaluate (default: all in the dataset)
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// Write original / suppressed / edge triptychs for inspection
    PreviewAug {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, value_enum, default_value_t = MaskMode::Auto)]
        masks: MaskMode,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export pooled feature vectors for every sample to CSV
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the five-variant component grid over shared seeds and
    /// tabulate held-out metrics
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Existing dataset directory; omitted = generate the benchmark
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Concurrent training runs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 175)]
        samples_per_class: usize,
        /// Seed for generating the benchmark dataset itself
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Comma-separated subset of the grid to run (default: all five)
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Every command records its full resolved configuration next to its
/// outputs so runs are auditable and reproducible.
fn write_resolved_config<T: Serialize>(dir: &Path, record: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("resolved_config.json");
    let json = serde_json::to_string_pretty(record)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn parse_switches(disable: &[String]) -> Result<AblationSwitches> {
    let mut sw = AblationSwitches::full();
    for name in disable {
        match name.trim() {
            "" => {}
            "bs" => sw.use_bs = false,
            "gpsa" => sw.use_gpsa = false,
            "kd" => sw.use_kd = false,
            "eova" => sw.use_eova = false,
            "ova" => {
                sw.use_ova_at_all = false;
                sw.use_eova = false;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown component {other:?}; expected bs, gpsa, kd, eova, or ova"
                )))
            }
        }
    }
    // dropping both expansion branches leaves distillation nothing to align
    if sw.use_kd && !sw.use_bs && !sw.use_gpsa {
        sw.use_kd = false;
    }
    sw.validate()?;
    Ok(sw)
}

fn mask_provider(mode: MaskMode, data: &Path) -> MaskProvider {
    let has_sidecars = data.join("masks").is_dir();
    match mode {
        MaskMode::Sidecar => MaskProvider::SidecarFiles {
            root: data.to_path_buf(),
        },
        MaskMode::AllForeground => MaskProvider::AllForeground,
        MaskMode::Auto => {
            if has_sidecars {
                MaskProvider::SidecarFiles {
                    root: data.to_path_buf(),
                }
            } else {
                eprintln!(
                    "warning: {} has no masks/ directory, background suppression is a no-op",
                    data.display()
                );
                MaskProvider::AllForeground
            }
        }
    }
}

fn resolve_sources(manifest: &Manifest, sources: &[String], target: &str) -> Result<Vec<String>> {
    let resolved: Vec<String> = if sources.is_empty() {
        manifest
            .domains
            .iter()
            .filter(|d| d.as_str() != target)
            .cloned()
            .collect()
    } else {
        sources.to_vec()
    };
    if resolved.is_empty() {
        return Err(Error::config(
            "no source domains left; pass --sources explicitly",
        ));
    }
    for s in &resolved {
        if !manifest.domains.contains(s) {
            return Err(Error::data(format!(
                "source domain {s:?} not found in the dataset (has {:?})",
                manifest.domains
            )));
        }
    }
    Ok(resolved)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen_synthetic(out: &Path, image_size: usize, samples_per_class: usize, seed: u64) -> Result<()> {
    let spec = benchmark_spec(image_size, samples_per_class, seed);
    let label_space = spec.label_space()?;
    let samples = generate_synthetic(&spec)?;
    write_dataset(out, &samples, &label_space)?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        spec: &'a osdg::data::SyntheticSpec,
    }
    write_resolved_config(out, &Record { command: "gen-synthetic", spec: &spec })?;
    println!(
        "wrote {} samples across {} domains to {}",
        samples.len(),
        spec.domains.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    config: &ConfigArgs,
    ablate: &[String],
    sources: &[String],
    target: &str,
    masks: MaskMode,
) -> Result<()> {
    let cfg = config.resolve()?;
    let switches = parse_switches(ablate)?;
    let manifest = load_manifest(data)?;
    let sources = resolve_sources(&manifest, sources, target)?;
    let pool = manifest.source_training_set(&sources)?;
    let provider = mask_provider(masks, data);

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        data: &'a Path,
        config: &'a TrainConfig,
        config_sha256: String,
        switches: &'a AblationSwitches,
        sources: &'a [String],
        target: &'a str,
    }
    write_resolved_config(
        out,
        &Record {
            command: "train",
            data,
            config: &cfg,
            config_sha256: cfg.sha256_hex(),
            switches: &switches,
            sources: &sources,
            target,
        },
    )?;

    let mut trainer = Trainer::new(
        cfg,
        switches,
        manifest.label_space.clone(),
        &pool,
        &provider,
        EdgeKind::GradientMagnitude,
    )?;
    let run = trainer.run()?;

    run.final_checkpoint.save(&out.join("checkpoint_final.json"))?;
    run.best_checkpoint.save(&out.join("checkpoint_best.json"))?;

    #[derive(Serialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum LogRecord<'a> {
        Step(&'a osdg::trainer::StepLog),
        Epoch(&'a osdg::trainer::EpochLog),
    }
    let mut log: Vec<LogRecord> = Vec::new();
    let mut by_epoch: BTreeMap<usize, Vec<&osdg::trainer::StepLog>> = BTreeMap::new();
    for s in &run.steps {
        by_epoch.entry(s.epoch).or_default().push(s);
    }
    for e in &run.epochs {
        for s in by_epoch.get(&e.epoch).into_iter().flatten() {
            log.push(LogRecord::Step(s));
        }
        log.push(LogRecord::Epoch(e));
    }
    write_jsonl(&out.join("train_log.jsonl"), &log)?;

    // score held-out domains with the validation-selected model
    let best_model = run.best_checkpoint.build_model()?;
    let mut held_out = BTreeMap::new();
    for domain in &manifest.domains {
        if sources.contains(domain) {
            continue;
        }
        let samples = manifest.domain_samples(domain);
        let (_, metrics) = evaluate_domain(
            &best_model,
            &run.best_checkpoint.normalizer,
            &manifest.label_space,
            &samples,
            run.best_checkpoint.config.batch_size,
        )?;
        held_out.insert(domain.clone(), metrics);
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        best_epoch: Option<usize>,
        final_val_acc_known: Option<f64>,
        held_out: &'a BTreeMap<String, osdg::eval::Metrics>,
    }
    let summary = Summary {
        best_epoch: run.best_checkpoint.best_epoch,
        final_val_acc_known: run.epochs.last().map(|e| e.val_acc_known),
        held_out: &held_out,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    let spath = out.join("summary.json");
    std::fs::write(&spath, &json).map_err(|e| Error::io(&spath, e))?;

    println!("trained {} epochs, {} steps", run.epochs.len(), run.steps.len());
    if let Some(e) = run.best_checkpoint.best_epoch {
        println!("best validation epoch: {e}");
    }
    for (domain, m) in &held_out {
        println!(
            "held-out {}: acc_k {:.2} acc_u {} acc {:.2} hs {}",
            domain,
            m.acc_known.unwrap_or(f64::NAN) * 100.0,
            m.acc_unknown
                .map(|v| format!("{:.2}", v * 100.0))
                .unwrap_or_else(|| "n/a".into()),
            m.acc * 100.0,
            m.hs
                .map(|v| format!("{:.2}", v * 100.0))
                .unwrap_or_else(|| "n/a".into()),
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, domains: &[String]) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.build_model()?;
    let manifest = load_manifest(data)?;
    if manifest.label_space != ckpt.label_space {
        return Err(Error::data(
            "dataset known-class list does not match the checkpoint's label space",
        ));
    }
    let requested: Vec<String> = if domains.is_empty() {
        manifest.domains.clone()
    } else {
        domains.to_vec()
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        checkpoint: &'a Path,
        data: &'a Path,
        domains: &'a [String],
        config_sha256: &'a str,
    }
    write_resolved_config(
        out,
        &Record {
            command: "eval",
            checkpoint,
            data,
            domains: &requested,
            config_sha256: &ckpt.config_sha256,
        },
    )?;

    for domain in &requested {
        let samples = manifest.domain_samples(domain);
        if samples.is_empty() {
            return Err(Error::data(format!("domain {domain:?} not in dataset")));
        }
        let (records, metrics) = evaluate_domain(
            &model,
            &ckpt.normalizer,
            &manifest.label_space,
            &samples,
            ckpt.config.batch_size,
        )?;
        write_jsonl(&out.join(format!("predictions_{domain}.jsonl")), &records)?;
        let mpath = out.join(format!("metrics_{domain}.json"));
        let json = serde_json::to_string_pretty(&metrics)?;
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        println!(
            "{}: {} samples, acc {:.2}",
            domain,
            records.len(),
            metrics.acc * 100.0
        );
    }
    Ok(())
}

fn cmd_preview(data: &Path, out: &Path, n: usize, masks: MaskMode, config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve()?;
    let manifest = load_manifest(data)?;
    let provider = mask_provider(masks, data);
    let edge_op = EdgeOperator {
        kind: EdgeKind::GradientMagnitude,
        blur_radius: cfg.edge_blur_radius,
        normalize: cfg.edge_normalize,
    };
    let norm = Normalizer::fit(&manifest.samples)?;
    if n > manifest.samples.len() {
        eprintln!(
            "warning: requested {} previews but the dataset has {}; clipping",
            n,
            manifest.samples.len()
        );
    }
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        data: &'a Path,
        n: usize,
        config: &'a TrainConfig,
    }
    write_resolved_config(out, &Record { command: "preview-aug", data, n, config: &cfg })?;
    let paths = preview_aug(&manifest.samples, &provider, &edge_op, norm.mean, out, n)?;
    println!("wrote {} triptychs to {}", paths.len(), out.display());
    Ok(())
}

fn cmd_export(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.build_model()?;
    let manifest = load_manifest(data)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let rows = export_features(
        &model,
        &ckpt.normalizer,
        &manifest.samples,
        ckpt.config.batch_size,
        out,
    )?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        checkpoint: &'a Path,
        data: &'a Path,
        rows: usize,
        config_sha256: &'a str,
    }
    let sidecar_dir = out.parent().unwrap_or(Path::new("."));
    let record = Record {
        command: "export-features",
        checkpoint,
        data,
        rows,
        config_sha256: &ckpt.config_sha256,
    };
    let json = serde_json::to_string_pretty(&record)?;
    let cfg_path = sidecar_dir.join(format!(
        "{}.config.json",
        out.file_name().and_then(|n| n.to_str()).unwrap_or("export")
    ));
    std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
    println!("exported {rows} rows to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    out: &Path,
    data: Option<&Path>,
    seeds: &[u64],
    jobs: usize,
    image_size: usize,
    samples_per_class: usize,
    data_seed: u64,
    variant_names: Option<&[String]>,
    config: &ConfigArgs,
) -> Result<()> {
    // the grid defaults to the desk-scale benchmark sizing; an explicit
    // config file or --set still wins
    let mut cfg = TrainConfig::default();
    cfg.widths = [8, 24, 48];
    cfg.image_size = image_size;
    cfg.epochs = 30;
    cfg.lr = 0.01;
    cfg.edge_blur_radius = 2;
    if let Some(path) = &config.config {
        cfg = TrainConfig::from_file(path)?;
    }
    for kv in &config.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;

    let mut variants = standard_grid();
    if let Some(names) = variant_names {
        for name in names {
            if !variants.iter().any(|v| &v.name == name) {
                let known: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                return Err(Error::config(format!(
                    "unknown variant {name:?}; the grid has {}",
                    known.join(", ")
                )));
            }
        }
        variants.retain(|v| names.iter().any(|n| n == &v.name));
    }

    let (samples, label_space, sources, target, provider): (
        Vec<SampleRecord>,
        _,
        Vec<String>,
        String,
        MaskProvider,
    ) = match data {
        Some(dir) => {
            let manifest = load_manifest(dir)?;
            let target = "target".to_string();
            let sources = resolve_sources(&manifest, &[], &target)?;
            let provider = mask_provider(MaskMode::Auto, dir);
            (manifest.samples, manifest.label_space, sources, target, provider)
        }
        None => {
            let spec = benchmark_spec(image_size, samples_per_class, data_seed);
            let label_space = spec.label_space()?;
            let samples = generate_synthetic(&spec)?;
            let sources = osdg::data::BENCH_SOURCES.iter().map(|s| s.to_string()).collect();
            (
                samples,
                label_space,
                sources,
                osdg::data::BENCH_TARGET.to_string(),
                MaskProvider::Oracle,
            )
        }
    };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        config: &'a TrainConfig,
        config_sha256: String,
        seeds: &'a [u64],
        variants: &'a [osdg::ablation::Variant],
        sources: &'a [String],
        target: &'a str,
        jobs: usize,
    }
    write_resolved_config(
        out,
        &Record {
            command: "ablate",
            config: &cfg,
            config_sha256: cfg.sha256_hex(),
            seeds,
            variants: &variants,
            sources: &sources,
            target: &target,
            jobs,
        },
    )?;

    let source_refs: Vec<&str> = sources.iter().map(|s| s.as_str()).collect();
    let table = run_ablation(
        &samples,
        &label_space,
        &cfg,
        &source_refs,
        &target,
        &provider,
        &variants,
        seeds,
        jobs,
    )?;

    let json = serde_json::to_string_pretty(&table)?;
    let jpath = out.join("table.json");
    std::fs::write(&jpath, json).map_err(|e| Error::io(&jpath, e))?;
    let text = table.render_text();
    let tpath = out.join("table.txt");
    std::fs::write(&tpath, &text).map_err(|e| Error::io(&tpath, e))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic {
            out,
            image_size,
            samples_per_class,
            seed,
        } => cmd_gen_synthetic(out, *image_size, *samples_per_class, *seed),
        Command::Train {
            data,
            out,
            config,
            ablate,
            sources,
            target,
            masks,
        } => cmd_train(data, out, config, ablate, sources, target, *masks),
        Command::Eval {
            checkpoint,
            data,
            out,
            domains,
        } => cmd_eval(checkpoint, data, out, domains),
        Command::PreviewAug {
            data,
            out,
            n,
            masks,
            config,
        } => cmd_preview(data, out, *n, *masks, config),
        Command::ExportFeatures {
            checkpoint,
            data,
            out,
        } => cmd_export(checkpoint, data, out),
        Command::Ablate {
            out,
            data,
            seeds,
            jobs,
            image_size,
            samples_per_class,
            data_seed,
            variants,
            config,
        } => cmd_ablate(
            out,
            data.as_deref(),
            seeds,
            *jobs,
            *image_size,
            *samples_per_class,
            *data_seed,
            variants.as_deref(),
            config,
        ),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
