//! The component-ablation experiment: trains a grid of switch variants over
//! shared seeds and tabulates open-set metrics on a held-out domain.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::content::{EdgeKind, MaskProvider};
use crate::data::training_pool;
use crate::error::{Error, Result};
use crate::eval::evaluate_domain;
use crate::trainer::{AblationSwitches, Trainer};
use crate::types::{LabelSpace, SampleRecord};

/// One named switch configuration in the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub switches: AblationSwitches,
}

/// The standard five-variant grid: plain cross entropy, binary heads only,
/// the domain-expansion stack (suppression + style augmentation +
/// distillation), edge-coupled binary heads only, and everything together.
pub fn standard_grid() -> Vec<Variant> {
    vec![
        Variant {
            name: "baseline".into(),
            switches: AblationSwitches::baseline(),
        },
        Variant {
            name: "ova".into(),
            switches: AblationSwitches {
                use_ova_at_all: true,
                ..AblationSwitches::baseline()
            },
        },
        Variant {
            name: "expand".into(),
            switches: AblationSwitches {
                use_bs: true,
                use_gpsa: true,
                use_kd: true,
                ..AblationSwitches::baseline()
            },
        },
        Variant {
            name: "eova".into(),
            switches: AblationSwitches {
                use_ova_at_all: true,
                use_eova: true,
                ..AblationSwitches::baseline()
            },
        },
        Variant {
            name: "full".into(),
            switches: AblationSwitches::full(),
        },
    ]
}

/// Metrics for one run (seed set) or a variant mean (seed absent). Values
/// are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub acc_known: f64,
    pub acc_unknown: f64,
    pub acc: f64,
    pub hs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub per_run: Vec<AblationRow>,
    pub means: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_row(&self, variant: &str) -> Option<&AblationRow> {
        self.means.iter().find(|r| r.variant == variant)
    }

    /// Fixed-width text rendering, percentages to two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "seed", "acc_k", "acc_u", "acc", "hs"
        ));
        let fmt = |r: &AblationRow, out: &mut String| {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
            out.push_str(&format!(
                "{:<10} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.variant,
                seed,
                r.acc_known * 100.0,
                r.acc_unknown * 100.0,
                r.acc * 100.0,
                r.hs * 100.0
            ));
        };
        for r in &self.per_run {
            fmt(r, &mut out);
        }
        for r in &self.means {
            fmt(r, &mut out);
        }
        out
    }
}

fn run_one(
    samples: &[SampleRecord],
    label_space: &LabelSpace,
    base_cfg: &TrainConfig,
    sources: &[&str],
    target: &str,
    mask_provider: &MaskProvider,
    variant: &Variant,
    seed: u64,
) -> Result<AblationRow> {
    let mut cfg = base_cfg.clone();
    cfg.seed = seed;
    let pool = training_pool(samples, sources, label_space)?;
    let mut trainer = Trainer::new(
        cfg,
        variant.switches,
        label_space.clone(),
        &pool,
        mask_provider,
        EdgeKind::GradientMagnitude,
    )?;
    let run = trainer.run()?;
    let ckpt = &run.best_checkpoint;
    let model = ckpt.build_model()?;
    let target_samples: Vec<SampleRecord> = samples
        .iter()
        .filter(|s| s.domain == target)
        .cloned()
        .collect();
    if target_samples.is_empty() {
        return Err(Error::data(format!("no samples in target domain {target}")));
    }
    let (_, m) = evaluate_domain(
        &model,
        &ckpt.normalizer,
        label_space,
        &target_samples,
        ckpt.config.batch_size,
    )?;
    let acc_unknown = m.acc_unknown.ok_or_else(|| {
        Error::data("ablation target domain has no unknown-class samples to score")
    })?;
    let hs = m.hs.expect("hs present when both accuracies are");
    Ok(AblationRow {
        variant: variant.name.clone(),
        seed: Some(seed),
        acc_known: m.acc_known.unwrap_or(0.0),
        acc_unknown,
        acc: m.acc,
        hs,
    })
}

/// Train every (variant, seed) pair and tabulate target-domain metrics.
/// `jobs` caps the number of concurrent training runs; results are ordered
/// by grid position regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    samples: &[SampleRecord],
    label_space: &LabelSpace,
    base_cfg: &TrainConfig,
    sources: &[&str],
    target: &str,
    mask_provider: &MaskProvider,
    variants: &[Variant],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    for v in variants {
        v.switches.validate()?;
    }
    let grid: Vec<(usize, &Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .enumerate()
        .map(|(i, (v, s))| (i, v, s))
        .collect();

    let jobs = jobs.max(1).min(grid.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let (slot, variant, seed) = grid[i];
                let row = run_one(
                    samples,
                    label_space,
                    base_cfg,
                    sources,
                    target,
                    mask_provider,
                    variant,
                    seed,
                );
                results.lock().expect("results lock").get_mut(slot).map(|r| *r = Some(row));
            });
        }
    });

    let mut per_run = Vec::with_capacity(grid.len());
    for slot in results.into_inner().expect("results lock") {
        per_run.push(slot.expect("every grid slot runs")?);
    }

    let mut means = Vec::with_capacity(variants.len());
    for v in variants {
        let rows: Vec<&AblationRow> = per_run.iter().filter(|r| r.variant == v.name).collect();
        let n = rows.len() as f64;
        means.push(AblationRow {
            variant: v.name.clone(),
            seed: None,
            acc_known: rows.iter().map(|r| r.acc_known).sum::<f64>() / n,
            acc_unknown: rows.iter().map(|r| r.acc_unknown).sum::<f64>() / n,
            acc: rows.iter().map(|r| r.acc).sum::<f64>() / n,
            hs: rows.iter().map(|r| r.hs).sum::<f64>() / n,
        });
    }
    Ok(AblationTable { per_run, means })
}
