//! The training loop: two-branch step construction (original and
//! background-suppressed views), optional style augmentation and
//! distillation, the boundary losses on edge views, SGD with Nesterov
//! momentum and step decay, validation-based checkpoint selection, and
//! serializable checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph, Gradients, VarId};
use crate::config::TrainConfig;
use crate::content::{extract_edges, suppress_background, EdgeKind, EdgeOperator, MaskProvider};
use crate::data::{stratified_split, Normalizer};
use crate::error::{Error, Result};
use crate::eval::evaluate_domain;
use crate::losses::{ce_loss_tape, eova_loss_tape, kd_loss_tape, ova_loss_tape};
use crate::model::{GpsaCtx, Model, ModelConfig};
use crate::style::{GlobalUncertainty, Mode};
use crate::types::{LabelSpace, LossBreakdown, SampleRecord};

/// Which method components a run trains with. The boundary pair works as:
/// `use_ova_at_all` turns on the binary-head loss, and `use_eova` upgrades
/// it from plain one-vs-all on originals to the edge-coupled variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub use_bs: bool,
    pub use_gpsa: bool,
    pub use_kd: bool,
    pub use_eova: bool,
    pub use_ova_at_all: bool,
}

impl AblationSwitches {
    pub fn full() -> Self {
        Self {
            use_bs: true,
            use_gpsa: true,
            use_kd: true,
            use_eova: true,
            use_ova_at_all: true,
        }
    }

    pub fn baseline() -> Self {
        Self {
            use_bs: false,
            use_gpsa: false,
            use_kd: false,
            use_eova: false,
            use_ova_at_all: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_kd && !self.use_bs && !self.use_gpsa {
            return Err(Error::config(
                "use_kd needs use_bs or use_gpsa, otherwise both branches are identical and \
                 there is nothing to distill",
            ));
        }
        if self.use_eova && !self.use_ova_at_all {
            return Err(Error::config(
                "use_eova refines the binary-head loss and needs use_ova_at_all",
            ));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub eova: f64,
    pub total: f64,
    pub lr: f64,
}

/// Per-epoch validation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub val_acc_known: f64,
}

/// A complete, reloadable training state snapshot. All tensors serialize as
/// exact f64 values, so save/load round-trips are bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_sha256: String,
    pub switches: AblationSwitches,
    pub label_space: LabelSpace,
    pub normalizer: Normalizer,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub gu: BTreeMap<String, GlobalUncertainty>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuild the model this checkpoint captured.
    pub fn build_model(&self) -> Result<Model> {
        let cfg = ModelConfig::from_train(&self.config, self.label_space.num_known())?;
        let mut params = crate::model::ParamStore::new();
        for (name, shape, data) in &self.params {
            let arr = Arr::from_shape_vec(IxDyn(shape), data.clone()).map_err(|_| {
                Error::shape(format!(
                    "checkpoint tensor {} has {} values for shape {:?}",
                    name,
                    data.len(),
                    shape
                ))
            })?;
            params.insert(name, arr);
        }
        Ok(Model { cfg, params })
    }
}

/// Outputs of a full training run.
pub struct TrainingRun {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// A training sample with its deterministic derived views, computed once.
struct PreparedSample {
    image: Arr,
    suppressed: Option<Arr>,
    edge: Option<Arr>,
    label: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub switches: AblationSwitches,
    pub label_space: LabelSpace,
    pub normalizer: Normalizer,
    pub model: Model,
    pub gu: BTreeMap<String, GlobalUncertainty>,
    velocity: BTreeMap<String, Arr>,
    prepared: Vec<PreparedSample>,
    val_samples: Vec<SampleRecord>,
    shuffle_rng: ChaCha8Rng,
    gpsa_rng: ChaCha8Rng,
}

impl Trainer {
    /// Build a trainer over known-class source samples. Derived views
    /// (suppressed, edge) are input-only transforms, so they are computed
    /// once up front; this changes nothing downstream.
    pub fn new(
        cfg: TrainConfig,
        switches: AblationSwitches,
        label_space: LabelSpace,
        pool: &[SampleRecord],
        mask_provider: &MaskProvider,
        edge_kind: EdgeKind,
    ) -> Result<Self> {
        cfg.validate()?;
        switches.validate()?;
        if pool.is_empty() {
            return Err(Error::data("training pool is empty"));
        }
        for class_id in 0..label_space.num_known() {
            if !pool.iter().any(|s| s.label == class_id) {
                return Err(Error::data(format!(
                    "no training samples for class {:?}",
                    label_space.name_of(class_id).unwrap_or("?")
                )));
            }
        }

        let normalizer = Normalizer::fit(pool)?;
        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        split_rng.set_stream(3);
        let (train_idx, val_idx) = stratified_split(pool, cfg.val_fraction, &mut split_rng);

        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(0);
        let model_cfg = ModelConfig::from_train(&cfg, label_space.num_known())?;
        let model = Model::init(model_cfg, &mut init_rng)?;
        let gu = model.fresh_uncertainty(&cfg.gpsa_stages, cfg.alpha)?;

        let edge_op = EdgeOperator {
            kind: edge_kind,
            blur_radius: cfg.edge_blur_radius,
            normalize: cfg.edge_normalize,
        };
        let need_edges = switches.use_ova_at_all && switches.use_eova && cfg.lambda1 > 0.0;
        let fill = normalizer.mean;
        let mut prepared = Vec::with_capacity(train_idx.len());
        for &i in &train_idx {
            let s = &pool[i];
            let suppressed = if switches.use_bs {
                Some(suppress_background(s, mask_provider, fill)?.image)
            } else {
                None
            };
            let edge = if need_edges {
                Some(extract_edges(s, &edge_op)?.edge.expect("edge view"))
            } else {
                None
            };
            prepared.push(PreparedSample {
                image: s.image.clone(),
                suppressed,
                edge,
                label: s.label,
            });
        }
        let val_samples: Vec<SampleRecord> = val_idx.iter().map(|&i| pool[i].clone()).collect();

        let mut velocity = BTreeMap::new();
        for name in model.params.names() {
            velocity.insert(name.clone(), Arr::zeros(model.params.get(name).raw_dim()));
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        let mut gpsa_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        gpsa_rng.set_stream(2);

        Ok(Self {
            cfg,
            switches,
            label_space,
            normalizer,
            model,
            gu,
            velocity,
            prepared,
            val_samples,
            shuffle_rng,
            gpsa_rng,
        })
    }

    fn stack_view<F: Fn(&PreparedSample) -> &Arr>(&self, batch: &[usize], pick: F) -> Arr {
        let first = pick(&self.prepared[batch[0]]);
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut out = Arr::zeros(IxDyn(&[batch.len(), 3, h, w]));
        for (bi, &i) in batch.iter().enumerate() {
            let img = self.normalizer.apply(pick(&self.prepared[i]));
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, c, y, x]] = img[[c, y, x]];
                    }
                }
            }
        }
        out
    }

    /// One optimization step on a batch of prepared-pool indices.
    pub fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<LossBreakdown> {
        let labels: Vec<usize> = batch.iter().map(|&i| self.prepared[i].label).collect();
        let sw = self.switches;
        // a zero weight makes a loss term a no-op, so skip computing it
        let kd_active = sw.use_kd && self.cfg.lambda2 > 0.0;
        let boundary_active = sw.use_ova_at_all && self.cfg.lambda1 > 0.0;

        let x_orig = self.stack_view(batch, |p| &p.image);
        let x_bs = if sw.use_bs {
            self.stack_view(batch, |p| p.suppressed.as_ref().expect("suppressed view"))
        } else {
            x_orig.clone()
        };

        let mut g = Graph::new();
        let vars = self.model.params.to_graph(&mut g);
        let x = g.constant(x_orig);
        let xb = g.constant(x_bs);

        let mode = Mode::Train;
        let out_orig;
        let out_bs;
        if sw.use_gpsa {
            let mut ctx = GpsaCtx {
                gu: &mut self.gu,
                prob: self.cfg.gpsa_prob,
                stages: &self.cfg.gpsa_stages,
                rng: &mut self.gpsa_rng,
            };
            out_orig = self.model.forward(&mut g, &vars, x, mode, Some(&mut ctx))?;
            out_bs = self.model.forward(&mut g, &vars, xb, mode, Some(&mut ctx))?;
        } else {
            out_orig = self.model.forward(&mut g, &vars, x, mode, None)?;
            out_bs = self.model.forward(&mut g, &vars, xb, mode, None)?;
        }

        let kd_id = if kd_active {
            Some(kd_loss_tape(
                &mut g,
                out_orig.prepool,
                out_bs.prepool,
                self.cfg.tau,
            )?)
        } else {
            None
        };

        let boundary_id = if boundary_active {
            if sw.use_eova {
                let x_edge = self.stack_view(batch, |p| p.edge.as_ref().expect("edge view"));
                let xe = g.constant(x_edge);
                let out_edge = self.model.forward(&mut g, &vars, xe, mode, None)?;
                Some(eova_loss_tape(
                    &mut g,
                    out_edge.binary_logits,
                    out_orig.binary_logits,
                    &labels,
                )?)
            } else {
                Some(ova_loss_tape(&mut g, out_orig.binary_logits, &labels)?)
            }
        } else {
            None
        };

        // cross entropy covers both labeled branches
        let ce_a = ce_loss_tape(&mut g, out_orig.class_logits, &labels)?;
        let ce_b = ce_loss_tape(&mut g, out_bs.class_logits, &labels)?;
        let ce_sum = g.add(ce_a, ce_b)?;
        let ce_id = g.mul_scalar(ce_sum, 0.5);

        let mut total_id = ce_id;
        if let Some(b) = boundary_id {
            let wb = g.mul_scalar(b, self.cfg.lambda1);
            total_id = g.add(total_id, wb)?;
        }
        if let Some(k) = kd_id {
            let wk = g.mul_scalar(k, self.cfg.lambda2);
            total_id = g.add(total_id, wk)?;
        }

        let scalar = |g: &Graph, id: VarId| g.value(id)[[0]];
        let breakdown = LossBreakdown {
            ce: scalar(&g, ce_id),
            kd: kd_id.map(|id| scalar(&g, id)).unwrap_or(0.0),
            eova: boundary_id.map(|id| scalar(&g, id)).unwrap_or(0.0),
            total: scalar(&g, total_id),
        };
        // the probability clamp keeps losses finite even when activations
        // blow up, so divergence is detected on the logits themselves
        let logits_finite = g.value(out_orig.class_logits).iter().all(|v| v.is_finite())
            && g.value(out_bs.class_logits).iter().all(|v| v.is_finite());
        if !breakdown.total.is_finite() || !logits_finite {
            return Err(Error::numeric(format!(
                "training diverged: non-finite activations or loss (ce {}, kd {}, boundary {}, total {})",
                breakdown.ce, breakdown.kd, breakdown.eova, breakdown.total
            )));
        }

        let grads = g.backward(total_id)?;
        self.sgd_step(&vars, grads, lr);
        Ok(breakdown)
    }

    /// SGD with Nesterov momentum: g += wd*p; v = mu*v + g; p -= lr*(g + mu*v).
    fn sgd_step(&mut self, vars: &BTreeMap<String, VarId>, mut grads: Gradients, lr: f64) {
        let mu = self.cfg.momentum;
        let wd = self.cfg.weight_decay;
        for name in self.model.params.names().to_vec() {
            let id = vars[&name];
            let mut grad = match grads.take(id) {
                Some(g) => g,
                None => continue,
            };
            let param = self.model.params.get_mut(&name);
            let vel = self.velocity.get_mut(&name).expect("velocity buffer");
            for ((gv, pv), vv) in grad.iter_mut().zip(param.iter_mut()).zip(vel.iter_mut()) {
                *gv += wd * *pv;
                *vv = mu * *vv + *gv;
                *pv -= lr * (*gv + mu * *vv);
            }
        }
    }

    fn snapshot(&self, best_epoch: Option<usize>) -> Checkpoint {
        let params = self
            .model
            .params
            .names()
            .iter()
            .map(|n| {
                let a = self.model.params.get(n);
                (n.clone(), a.shape().to_vec(), a.iter().copied().collect())
            })
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            config_sha256: self.cfg.sha256_hex(),
            switches: self.switches,
            label_space: self.label_space.clone(),
            normalizer: self.normalizer,
            params,
            gu: self.gu.clone(),
            best_epoch,
        }
    }

    fn validation_accuracy(&self) -> Result<f64> {
        if self.val_samples.is_empty() {
            return Ok(0.0);
        }
        let (_, metrics) = evaluate_domain(
            &self.model,
            &self.normalizer,
            &self.label_space,
            &self.val_samples,
            self.cfg.batch_size,
        )?;
        Ok(metrics.acc_known.unwrap_or(0.0))
    }

    /// The full epoch loop. Checkpoints capture the final state and the
    /// state at the best validation accuracy (earliest epoch wins ties).
    pub fn run(&mut self) -> Result<TrainingRun> {
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        let indices: Vec<usize> = (0..self.prepared.len()).collect();

        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at_epoch(epoch);
            let batches =
                crate::data::make_batches(&indices, self.cfg.batch_size, &mut self.shuffle_rng);
            for (step, batch) in batches.iter().enumerate() {
                let breakdown = self.train_step(batch, lr)?;
                steps.push(StepLog {
                    epoch,
                    step,
                    ce: breakdown.ce,
                    kd: breakdown.kd,
                    eova: breakdown.eova,
                    total: breakdown.total,
                    lr,
                });
            }
            let val_acc = self.validation_accuracy()?;
            epochs.push(EpochLog {
                epoch,
                lr,
                val_acc_known: val_acc,
            });
            let is_better = match &best {
                None => true,
                Some((acc, _)) => val_acc > *acc,
            };
            if is_better {
                best = Some((val_acc, self.snapshot(Some(epoch))));
            }
        }

        let final_checkpoint = self.snapshot(best.as_ref().and_then(|(_, c)| c.best_epoch));
        let best_checkpoint = best.map(|(_, c)| c).unwrap_or_else(|| self.snapshot(None));
        Ok(TrainingRun {
            final_checkpoint,
            best_checkpoint,
            steps,
            epochs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::MaskProvider;
    use crate::data::{benchmark_spec, generate_synthetic, training_pool, BENCH_SOURCES};

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.widths = [4, 4, 8];
        cfg.gn_groups = 2;
        cfg.image_size = 16;
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.seed = 13;
        cfg
    }

    fn small_pool(per_class: usize) -> (Vec<SampleRecord>, LabelSpace) {
        let spec = benchmark_spec(16, per_class, 21);
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        let pool = training_pool(&samples, &BENCH_SOURCES, &ls).unwrap();
        (pool, ls)
    }

    fn make_trainer(cfg: TrainConfig, switches: AblationSwitches, per_class: usize) -> Trainer {
        let (pool, ls) = small_pool(per_class);
        Trainer::new(
            cfg,
            switches,
            ls,
            &pool,
            &MaskProvider::Oracle,
            EdgeKind::GradientMagnitude,
        )
        .unwrap()
    }

    #[test]
    fn kd_without_a_distinct_branch_is_rejected() {
        let sw = AblationSwitches {
            use_bs: false,
            use_gpsa: false,
            use_kd: true,
            use_eova: false,
            use_ova_at_all: false,
        };
        assert!(sw.validate().is_err());
        let sw2 = AblationSwitches {
            use_eova: true,
            use_ova_at_all: false,
            ..AblationSwitches::baseline()
        };
        assert!(sw2.validate().is_err());
    }

    #[test]
    fn baseline_breakdown_is_pure_cross_entropy() {
        let mut t = make_trainer(small_cfg(), AblationSwitches::baseline(), 4);
        let b = t.train_step(&[0, 1, 2, 3], 0.001).unwrap();
        assert_eq!(b.kd, 0.0);
        assert_eq!(b.eova, 0.0);
        assert_eq!(b.total, b.ce);
        assert!(b.satisfies_identity(t.cfg.lambda1, t.cfg.lambda2));
    }

    #[test]
    fn zero_weights_reproduce_the_baseline_bit_for_bit() {
        // boundary switch on but weighted zero must leave the parameter
        // trajectory identical to the all-off baseline
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let mut zeroed = cfg.clone();
        zeroed.lambda1 = 0.0;
        zeroed.lambda2 = 0.0;

        let mut base = make_trainer(cfg, AblationSwitches::baseline(), 3);
        let sw = AblationSwitches {
            use_ova_at_all: true,
            use_eova: true,
            ..AblationSwitches::baseline()
        };
        let mut variant = make_trainer(zeroed, sw, 3);

        let run_a = base.run().unwrap();
        let run_b = variant.run().unwrap();
        assert_eq!(
            base.model.params.flatten(),
            variant.model.params.flatten(),
            "parameters must match exactly"
        );
        for (a, b) in run_a.steps.iter().zip(run_b.steps.iter()) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.ce, b.ce);
        }
    }

    #[test]
    fn all_foreground_masks_without_style_noise_zero_the_distillation() {
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let sw = AblationSwitches {
            use_bs: true,
            use_kd: true,
            use_gpsa: false,
            use_eova: false,
            use_ova_at_all: false,
        };
        let (pool, ls) = small_pool(3);
        let mut t = Trainer::new(
            cfg,
            sw,
            ls,
            &pool,
            &MaskProvider::AllForeground,
            EdgeKind::GradientMagnitude,
        )
        .unwrap();
        let b = t.train_step(&[0, 1, 2], 0.001).unwrap();
        assert!(
            b.kd.abs() < 1e-12,
            "identical branches must distill nothing, got {}",
            b.kd
        );
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let mut r1 = make_trainer(small_cfg(), AblationSwitches::full(), 3);
        let mut r2 = make_trainer(small_cfg(), AblationSwitches::full(), 3);
        let a = r1.run().unwrap();
        let b = r2.run().unwrap();
        assert_eq!(a.steps, b.steps, "loss logs must match exactly");
        assert_eq!(
            r1.model.params.flatten(),
            r2.model.params.flatten()
        );
        assert_eq!(r1.gu, r2.gu);
    }

    #[test]
    fn zero_epochs_yield_the_initialized_checkpoint_and_empty_logs() {
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let mut t = make_trainer(cfg.clone(), AblationSwitches::full(), 3);
        let init_params = t.model.params.flatten();
        let run = t.run().unwrap();
        assert!(run.steps.is_empty());
        assert!(run.epochs.is_empty());
        assert_eq!(run.final_checkpoint.best_epoch, None);
        let model = run.final_checkpoint.build_model().unwrap();
        assert_eq!(model.params.flatten(), init_params);
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let mut cfg = small_cfg();
        cfg.epochs = 3;
        cfg.batch_size = 8;
        // 64 training images: 8 per class in the pool after the val split
        let mut t = make_trainer(cfg, AblationSwitches::baseline(), 5);
        let run = t.run().unwrap();
        let epoch_mean = |e: usize| {
            let v: Vec<f64> = run
                .steps
                .iter()
                .filter(|s| s.epoch == e)
                .map(|s| s.total)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(
            epoch_mean(2) < epoch_mean(0),
            "loss must fall: {} -> {}",
            epoch_mean(0),
            epoch_mean(2)
        );
    }

    #[test]
    fn uncertainty_update_count_is_two_per_step() {
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let mut t = make_trainer(cfg, AblationSwitches::full(), 3);
        let run = t.run().unwrap();
        let steps_total = run.steps.len() as u64;
        for (tag, gu) in &t.gu {
            assert_eq!(
                gu.update_count,
                2 * steps_total,
                "stage {} must see both branch forwards each step",
                tag
            );
        }
    }

    #[test]
    fn learning_rate_follows_the_step_decay_in_the_logs() {
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        cfg.lr_decay_every = 1;
        cfg.lr_decay_factor = 0.5;
        let mut t = make_trainer(cfg, AblationSwitches::baseline(), 3);
        let run = t.run().unwrap();
        let lr_of = |e: usize| {
            run.steps
                .iter()
                .find(|s| s.epoch == e)
                .map(|s| s.lr)
                .unwrap()
        };
        assert!((lr_of(0) - 0.001).abs() < 1e-15);
        assert!((lr_of(1) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions_exactly() {
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let mut t = make_trainer(cfg, AblationSwitches::full(), 3);
        let run = t.run().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        run.final_checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        let spec = benchmark_spec(16, 2, 99);
        let eval_samples = generate_synthetic(&spec).unwrap();
        let target: Vec<_> = eval_samples
            .iter()
            .filter(|s| s.domain == "target")
            .cloned()
            .collect();

        let m1 = run.final_checkpoint.build_model().unwrap();
        let m2 = loaded.build_model().unwrap();
        let (r1, _) = evaluate_domain(&m1, &run.final_checkpoint.normalizer, &run.final_checkpoint.label_space, &target, 16).unwrap();
        let (r2, _) = evaluate_domain(&m2, &loaded.normalizer, &loaded.label_space, &target, 16).unwrap();
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a.scores, b.scores, "sample {} diverged after reload", a.id);
            assert_eq!(a.predicted, b.predicted);
            assert!(a.entropy_bits == b.entropy_bits);
        }
        assert_eq!(loaded.gu, run.final_checkpoint.gu);
    }

    #[test]
    fn non_finite_loss_halts_with_a_diagnostic() {
        let mut t = make_trainer(small_cfg(), AblationSwitches::baseline(), 3);
        let n = t.model.params.num_scalars();
        t.model.params.unflatten(&vec![f64::INFINITY; n]).unwrap();
        let err = t.train_step(&[0, 1], 0.001).unwrap_err();
        assert!(err.to_string().contains("diverged"), "{}", err);
    }

    #[test]
    fn missing_class_in_pool_is_a_data_error() {
        let (pool, ls) = small_pool(3);
        let filtered: Vec<SampleRecord> =
            pool.into_iter().filter(|s| s.label != 2).collect();
        let err = Trainer::new(
            small_cfg(),
            AblationSwitches::baseline(),
            ls,
            &filtered,
            &MaskProvider::Oracle,
            EdgeKind::GradientMagnitude,
        )
        .err()
        .expect("pool missing a class must be rejected");
        assert!(err.to_string().contains("class"), "{}", err);
    }
}
