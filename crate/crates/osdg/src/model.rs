//! The classifier: a three-stage convolutional encoder with group
//! normalization, optional per-stage style augmentation during training, and
//! two heads on the pooled feature: a closed-set class head and a bank of
//! per-class binary (one-vs-all) heads.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph, VarId};
use crate::config::{TrainConfig, STAGE_TAGS};
use crate::error::{Error, Result};
use crate::style::{gpsa_layer_tape, GlobalUncertainty, Mode};

const GN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters, fixed at init time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: [usize; 3],
    pub gn_groups: usize,
    pub num_known: usize,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig, num_known: usize) -> Result<Self> {
        let mc = Self {
            widths: cfg.widths,
            gn_groups: cfg.gn_groups,
            num_known,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_known < 2 {
            return Err(Error::config("num_known must be >= 2"));
        }
        for (i, w) in self.widths.iter().enumerate() {
            if *w == 0 {
                return Err(Error::config(format!("widths[{}] must be nonzero", i)));
            }
            if w % self.gn_groups != 0 {
                return Err(Error::config(format!(
                    "gn_groups {} must divide widths[{}] = {}",
                    self.gn_groups, i, w
                )));
            }
        }
        Ok(())
    }

    /// Channel width of the feature map each stage emits.
    pub fn stage_width(&self, tag: &str) -> Option<usize> {
        STAGE_TAGS
            .iter()
            .position(|t| *t == tag)
            .map(|i| self.widths[i])
    }
}

/// Named parameter tensors in a fixed registration order. The order defines
/// the flattened parameter vector used by gradient checks and the optimizer
/// state layout, so it must never depend on map iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        assert!(
            !self.values.contains_key(name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.names.iter().map(|n| self.values[n].len()).sum()
    }

    /// Register every tensor on a fresh graph as a gradient-tracked leaf.
    pub fn to_graph(&self, g: &mut Graph) -> BTreeMap<String, VarId> {
        let mut vars = BTreeMap::new();
        for name in &self.names {
            vars.insert(name.clone(), g.param(self.values[name].clone()));
        }
        vars
    }

    /// Register every tensor as a constant, for gradient-free forwards.
    pub fn to_graph_frozen(&self, g: &mut Graph) -> BTreeMap<String, VarId> {
        let mut vars = BTreeMap::new();
        for name in &self.names {
            vars.insert(name.clone(), g.constant(self.values[name].clone()));
        }
        vars
    }

    /// Copy all values out as a flat vector in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for name in &self.names {
            out.extend(self.values[name].iter().copied());
        }
        out
    }

    /// Overwrite all values from a flat vector in registration order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for name in &self.names {
            let v = self.values.get_mut(name).unwrap();
            for x in v.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything a forward pass produces that later stages consume.
pub struct ForwardOut {
    /// Final stage feature map, before global pooling: [B, C3, H', W'].
    pub prepool: VarId,
    /// Globally averaged feature: [B, C3].
    pub pooled: VarId,
    /// Closed-set class logits: [B, K].
    pub class_logits: VarId,
    /// Per-class binary head logits: [B, K, 2], channel 0 is "positive".
    pub binary_logits: VarId,
}

/// Mutable style-augmentation context threaded through a training forward.
pub struct GpsaCtx<'a> {
    pub gu: &'a mut BTreeMap<String, GlobalUncertainty>,
    pub prob: f64,
    pub stages: &'a [String],
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn he_conv<R: Rng>(rng: &mut R, c_out: usize, c_in: usize) -> Arr {
    let std = (2.0 / (c_in * 9) as f64).sqrt();
    let mut w = Arr::zeros(IxDyn(&[c_out, c_in, 3, 3]));
    for v in w.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * std;
    }
    w
}

fn linear_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Arr {
    let std = (1.0 / cols as f64).sqrt();
    let mut w = Arr::zeros(IxDyn(&[rows, cols]));
    for v in w.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * std;
    }
    w
}

impl Model {
    /// Initialize all parameters. Random draws happen in registration order,
    /// so the same rng state always yields the same model.
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut c_in = 3;
        for (i, tag) in STAGE_TAGS.iter().enumerate() {
            let c_out = cfg.widths[i];
            params.insert(&format!("{tag}.conv.w"), he_conv(rng, c_out, c_in));
            params.insert(&format!("{tag}.conv.b"), Arr::zeros(IxDyn(&[c_out])));
            params.insert(&format!("{tag}.gn.g"), Arr::ones(IxDyn(&[c_out])));
            params.insert(&format!("{tag}.gn.b"), Arr::zeros(IxDyn(&[c_out])));
            c_in = c_out;
        }
        let c3 = cfg.widths[2];
        let k = cfg.num_known;
        params.insert("head_m.w", linear_init(rng, k, c3));
        params.insert("head_m.b", Arr::zeros(IxDyn(&[k])));
        params.insert("head_b.w", linear_init(rng, 2 * k, c3));
        params.insert("head_b.b", Arr::zeros(IxDyn(&[2 * k])));
        Ok(Self { cfg, params })
    }

    /// Run the encoder and heads on a batch already living on the graph.
    /// `gpsa` is only consulted in train mode; eval forwards are fully
    /// deterministic and touch no augmentation state.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, VarId>,
        x: VarId,
        mode: Mode,
        mut gpsa: Option<&mut GpsaCtx<'_>>,
    ) -> Result<ForwardOut> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "model input must be [B,3,H,W], got {:?}",
                shape
            )));
        }
        let mut h = x;
        for (i, tag) in STAGE_TAGS.iter().enumerate() {
            let w = vars[&format!("{tag}.conv.w")];
            let b = vars[&format!("{tag}.conv.b")];
            h = g.conv3x3(h, w, b)?;
            h = group_norm(
                g,
                h,
                self.cfg.gn_groups,
                vars[&format!("{tag}.gn.g")],
                vars[&format!("{tag}.gn.b")],
            )?;
            h = g.relu(h);
            h = g.avg_pool2(h)?;
            if mode == Mode::Train {
                if let Some(ctx) = gpsa.as_deref_mut() {
                    if ctx.stages.iter().any(|s| s == tag) {
                        let gu = ctx.gu.get_mut(*tag).ok_or_else(|| {
                            Error::config(format!("no uncertainty state for stage {tag}"))
                        })?;
                        if gu.channels() != self.cfg.widths[i] {
                            return Err(Error::shape(format!(
                                "stage {tag} uncertainty tracks {} channels, stage emits {}",
                                gu.channels(),
                                self.cfg.widths[i]
                            )));
                        }
                        h = gpsa_layer_tape(g, h, gu, mode, ctx.prob, ctx.rng)?;
                    }
                }
            }
        }
        let prepool = h;
        let c3 = self.cfg.widths[2];
        let batch = g.value(prepool).shape()[0];
        let pooled4 = g.mean_axes(prepool, &[2, 3]);
        let pooled = g.reshape(pooled4, &[batch, c3])?;
        let class_logits = g.linear(pooled, vars["head_m.w"], vars["head_m.b"])?;
        let bin_flat = g.linear(pooled, vars["head_b.w"], vars["head_b.b"])?;
        let binary_logits = g.reshape(bin_flat, &[batch, self.cfg.num_known, 2])?;
        Ok(ForwardOut {
            prepool,
            pooled,
            class_logits,
            binary_logits,
        })
    }

    /// Fresh per-stage uncertainty accumulators sized to this architecture,
    /// one for each stage the config augments.
    pub fn fresh_uncertainty(
        &self,
        stages: &[String],
        alpha: f64,
    ) -> Result<BTreeMap<String, GlobalUncertainty>> {
        let mut map = BTreeMap::new();
        for tag in stages {
            let width = self
                .cfg
                .stage_width(tag)
                .ok_or_else(|| Error::config(format!("unknown augmentation stage {tag}")))?;
            map.insert(tag.clone(), GlobalUncertainty::new(width, alpha));
        }
        Ok(map)
    }
}

/// Group normalization on the tape: per (sample, group) standardization
/// followed by a learned per-channel affine map.
pub fn group_norm(
    g: &mut Graph,
    x: VarId,
    groups: usize,
    gamma: VarId,
    beta: VarId,
) -> Result<VarId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("group_norm expects [B,C,H,W]"));
    }
    let (b, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    if c % groups != 0 {
        return Err(Error::shape(format!(
            "{} channels not divisible into {} groups",
            c, groups
        )));
    }
    let grouped = g.reshape(x, &[b, groups, (c / groups) * hh * ww])?;
    let mean = g.mean_axes(grouped, &[2]);
    let centered = g.sub(grouped, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axes(sq, &[2]);
    let var_eps = g.add_scalar(var, GN_EPS);
    let std = g.sqrt(var_eps);
    let normed = g.div(centered, std)?;
    let back = g.reshape(normed, &[b, c, hh, ww])?;
    let gamma4 = g.reshape(gamma, &[1, c, 1, 1])?;
    let beta4 = g.reshape(beta, &[1, c, 1, 1])?;
    let scaled = g.mul(back, gamma4)?;
    g.add(scaled, beta4)
}

/// Positive-class probabilities from the binary heads: softmax over the last
/// axis of [B, K, 2], keeping channel 0.
pub fn binary_positive_probs(binary_logits: &Arr) -> Result<Arr> {
    let shape = binary_logits.shape();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::shape(format!(
            "binary logits must be [B,K,2], got {:?}",
            shape
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    let mut out = Arr::zeros(IxDyn(&[b, k]));
    for bi in 0..b {
        for ki in 0..k {
            let l0 = binary_logits[[bi, ki, 0]];
            let l1 = binary_logits[[bi, ki, 1]];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            out[[bi, ki]] = e0 / (e0 + e1);
        }
    }
    Ok(out)
}
