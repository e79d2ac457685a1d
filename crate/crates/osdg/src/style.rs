//! Probabilistic style augmentation over intermediate feature maps.
//!
//! Styles are modeled as per-instance channel statistics (mean and standard
//! deviation). A batch yields a variance estimate of those statistics; a
//! moving average accumulates that variance across training into a global
//! uncertainty estimate; new styles are drawn around each instance's own
//! statistics with noise scaled by the accumulated uncertainty, and the
//! feature map is re-normalized to the drawn style.

use ndarray::{Array1, Array2, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph, VarId};
use crate::error::{Error, Result};

/// Guard added under the square root when forming sigma, so constant
/// feature maps cannot divide by zero.
pub const STAT_EPS: f64 = 1e-6;

/// Per-instance channel-wise statistics of a BxCxHxW feature map.
#[derive(Debug, Clone)]
pub struct StyleStats {
    pub mu: Array2<f64>,
    pub var: Array2<f64>,
    pub sigma: Array2<f64>,
}

/// Variance of the instance statistics across the batch axis, per channel.
#[derive(Debug, Clone)]
pub struct BatchStatVariance {
    pub var_mu: Array1<f64>,
    pub var_sigma: Array1<f64>,
}

/// Moving-average accumulator of batch statistic variances. Starts at zero
/// and is updated once per training forward of each branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalUncertainty {
    pub u_mu: Vec<f64>,
    pub u_sigma: Vec<f64>,
    pub alpha: f64,
    pub update_count: u64,
}

/// A drawn style: new per-instance mean (beta) and standard deviation
/// (gamma), together with the standard-normal draws that produced them.
#[derive(Debug, Clone)]
pub struct StylePerturbation {
    pub beta: Array2<f64>,
    pub gamma: Array2<f64>,
    pub xi_mu: Array2<f64>,
    pub xi_sigma: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Channel-wise spatial mean and population variance per instance;
/// sigma = sqrt(var + eps).
pub fn instance_stats(z: &Arr) -> Result<StyleStats> {
    if z.ndim() != 4 {
        return Err(Error::shape(format!(
            "instance_stats expects BxCxHxW, got {:?}",
            z.shape()
        )));
    }
    let (b, c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("instance_stats needs at least one spatial element"));
    }
    let mut mu = Array2::<f64>::zeros((b, c));
    let mut var = Array2::<f64>::zeros((b, c));
    for bb in 0..b {
        let per_b = z.index_axis(Axis(0), bb);
        for cc in 0..c {
            let plane = per_b.index_axis(Axis(0), cc);
            let m = plane.sum() / hw as f64;
            let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            mu[[bb, cc]] = m;
            var[[bb, cc]] = v;
        }
    }
    let sigma = var.mapv(|v| (v + STAT_EPS).sqrt());
    Ok(StyleStats { mu, var, sigma })
}

/// Population variance of mu and sigma over the batch axis. A batch of one
/// yields zeros.
pub fn batch_stat_variance(stats: &StyleStats) -> BatchStatVariance {
    let (b, c) = stats.mu.dim();
    let mut var_mu = Array1::<f64>::zeros(c);
    let mut var_sigma = Array1::<f64>::zeros(c);
    for cc in 0..c {
        let mean_mu = stats.mu.column(cc).sum() / b as f64;
        let mean_sigma = stats.sigma.column(cc).sum() / b as f64;
        let mut acc_mu = 0.0;
        let mut acc_sigma = 0.0;
        for bb in 0..b {
            acc_mu += (stats.mu[[bb, cc]] - mean_mu).powi(2);
            acc_sigma += (stats.sigma[[bb, cc]] - mean_sigma).powi(2);
        }
        var_mu[cc] = acc_mu / b as f64;
        var_sigma[cc] = acc_sigma / b as f64;
    }
    BatchStatVariance { var_mu, var_sigma }
}

impl GlobalUncertainty {
    /// Zero-initialized accumulator for `channels` channels.
    pub fn new(channels: usize, alpha: f64) -> Self {
        Self {
            u_mu: vec![0.0; channels],
            u_sigma: vec![0.0; channels],
            alpha,
            update_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.u_mu.len()
    }

    /// Moving-average step u <- alpha*u + (1-alpha)*variance.
    pub fn update(&mut self, bsv: &BatchStatVariance) -> Result<()> {
        if bsv.var_mu.len() != self.u_mu.len() {
            return Err(Error::shape(format!(
                "uncertainty has {} channels but batch variance has {}",
                self.u_mu.len(),
                bsv.var_mu.len()
            )));
        }
        let a = self.alpha;
        for (u, &v) in self.u_mu.iter_mut().zip(bsv.var_mu.iter()) {
            *u = a * *u + (1.0 - a) * v;
        }
        for (u, &v) in self.u_sigma.iter_mut().zip(bsv.var_sigma.iter()) {
            *u = a * *u + (1.0 - a) * v;
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Draw a new style around each instance's statistics:
/// beta = mu + xi*sqrt(u_mu), gamma = sigma + xi*sqrt(u_sigma), with
/// xi i.i.d. standard normal per instance per channel. All xi_mu entries
/// are drawn before all xi_sigma entries, in row-major order.
pub fn sample_perturbation<R: Rng>(
    stats: &StyleStats,
    gu: &GlobalUncertainty,
    rng: &mut R,
) -> Result<StylePerturbation> {
    let (b, c) = stats.mu.dim();
    if gu.channels() != c {
        return Err(Error::shape(format!(
            "uncertainty has {} channels but stats have {}",
            gu.channels(),
            c
        )));
    }
    let xi_mu = Array2::from_shape_fn((b, c), |_| rng.sample::<f64, _>(StandardNormal));
    let xi_sigma = Array2::from_shape_fn((b, c), |_| rng.sample::<f64, _>(StandardNormal));
    let mut beta = stats.mu.clone();
    let mut gamma = stats.sigma.clone();
    for bb in 0..b {
        for cc in 0..c {
            beta[[bb, cc]] += xi_mu[[bb, cc]] * gu.u_mu[cc].sqrt();
            gamma[[bb, cc]] += xi_sigma[[bb, cc]] * gu.u_sigma[cc].sqrt();
        }
    }
    Ok(StylePerturbation {
        beta,
        gamma,
        xi_mu,
        xi_sigma,
    })
}

/// Replace the style of `z`: z* = gamma * (z - mu)/sigma + beta, with the
/// statistics broadcast over the spatial dimensions.
pub fn restyle(z: &Arr, stats: &StyleStats, pert: &StylePerturbation) -> Result<Arr> {
    if z.ndim() != 4 {
        return Err(Error::shape(format!("restyle expects BxCxHxW, got {:?}", z.shape())));
    }
    let (b, c) = stats.mu.dim();
    if z.shape()[0] != b || z.shape()[1] != c {
        return Err(Error::shape(format!(
            "restyle stats {}x{} do not match feature map {:?}",
            b,
            c,
            z.shape()
        )));
    }
    let mut out = z.clone();
    for bb in 0..b {
        for cc in 0..c {
            let (mu, sigma) = (stats.mu[[bb, cc]], stats.sigma[[bb, cc]]);
            let (beta, gamma) = (pert.beta[[bb, cc]], pert.gamma[[bb, cc]]);
            let mut plane = out.index_axis_mut(Axis(0), bb);
            let mut plane = plane.index_axis_mut(Axis(0), cc);
            plane.mapv_inplace(|v| gamma * (v - mu) / sigma + beta);
        }
    }
    Ok(out)
}

/// The train-mode preparation shared by the plain and tape layer variants:
/// compute statistics, fold their batch variance into `gu`, flip the
/// application coin, and (if it fires) draw a perturbation from the
/// pre-update uncertainty snapshot.
///
/// Returns None when nothing should be applied. Eval mode touches neither
/// `gu` nor `rng`.
fn prepare<R: Rng>(
    z: &Arr,
    gu: &mut GlobalUncertainty,
    mode: Mode,
    prob: f64,
    rng: &mut R,
) -> Result<Option<(StyleStats, StylePerturbation)>> {
    if mode == Mode::Eval {
        return Ok(None);
    }
    let stats = instance_stats(z)?;
    let bsv = batch_stat_variance(&stats);
    // the perturbation is drawn from the uncertainty accumulated on
    // previous batches, not the one this batch contributes to
    let snapshot = gu.clone();
    gu.update(&bsv)?;
    let coin: f64 = rng.gen();
    if coin < prob {
        let pert = sample_perturbation(&stats, &snapshot, rng)?;
        Ok(Some((stats, pert)))
    } else {
        Ok(None)
    }
}

/// Plain-array augmentation layer: in train mode, updates `gu` from this
/// batch and, with probability `prob`, returns the restyled map; otherwise
/// (and always in eval mode) returns the input unchanged.
pub fn gpsa_layer<R: Rng>(
    z: &Arr,
    gu: &mut GlobalUncertainty,
    mode: Mode,
    prob: f64,
    rng: &mut R,
) -> Result<Arr> {
    match prepare(z, gu, mode, prob, rng)? {
        Some((stats, pert)) => restyle(z, &stats, &pert),
        None => Ok(z.clone()),
    }
}

/// Tape variant of [`gpsa_layer`] used inside training forwards. The
/// statistics are recomputed as graph ops so gradients flow through the
/// normalization; the noise offsets (beta - mu, gamma - sigma) enter as
/// constants, matching the reparameterized draw where xi*sqrt(U) carries no
/// gradient.
pub fn gpsa_layer_tape<R: Rng>(
    g: &mut Graph,
    z: VarId,
    gu: &mut GlobalUncertainty,
    mode: Mode,
    prob: f64,
    rng: &mut R,
) -> Result<VarId> {
    let prepared = prepare(g.value(z), gu, mode, prob, rng)?;
    let (stats, pert) = match prepared {
        Some(p) => p,
        None => return Ok(z),
    };
    let (b, c) = stats.mu.dim();
    let mut c_beta = Arr::zeros(IxDyn(&[b, c, 1, 1]));
    let mut c_gamma = Arr::zeros(IxDyn(&[b, c, 1, 1]));
    for bb in 0..b {
        for cc in 0..c {
            c_beta[[bb, cc, 0, 0]] = pert.beta[[bb, cc]] - stats.mu[[bb, cc]];
            c_gamma[[bb, cc, 0, 0]] = pert.gamma[[bb, cc]] - stats.sigma[[bb, cc]];
        }
    }
    let c_beta = g.constant(c_beta);
    let c_gamma = g.constant(c_gamma);

    let mu = g.mean_axes(z, &[2, 3]);
    let centered = g.sub(z, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axes(sq, &[2, 3]);
    let var_eps = g.add_scalar(var, STAT_EPS);
    let sigma = g.sqrt(var_eps);

    let gamma = g.add(sigma, c_gamma)?;
    let beta = g.add(mu, c_beta)?;
    let normed = g.div(centered, sigma)?;
    let scaled = g.mul(gamma, normed)?;
    g.add(scaled, beta)
}
