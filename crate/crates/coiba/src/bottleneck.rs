//! Noise model, activation statistics, the damping transform, and the
//! closed-form per-element KL capacity behind the compression terms.

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, VarId};
use crate::Real;

/// Variance floor; degenerate constant channels would make the KL undefined.
pub const EPS_STD: Real = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    PerSample,
    Calibration,
}

/// Per-channel mean and std of the clean activations at one hooked layer.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
    pub mode: StatsMode,
}

/// Per-channel moments over the patch tokens of one or more clean forward
/// passes. Population convention; std floored at [`EPS_STD`].
pub fn estimate_stats(activations: &[&Tensor], mode: StatsMode) -> Result<LayerStats> {
    let total_rows: usize = activations.iter().map(|t| t.rows()).sum();
    if total_rows < 2 {
        return Err(Error::Stats(format!(
            "need at least 2 tokens to estimate statistics, got {}",
            total_rows
        )));
    }
    let d = activations[0].cols();
    let mut mean = vec![0.0; d];
    for t in activations {
        if t.cols() != d {
            return Err(Error::Dimension("channel count mismatch across samples".into()));
        }
        for row in t.data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total_rows as Real;
    }
    let mut var = vec![0.0; d];
    for t in activations {
        for row in t.data.chunks(d) {
            for j in 0..d {
                let dlt = row[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / total_rows as Real).sqrt().max(EPS_STD))
        .collect();
    Ok(LayerStats { mean, std, mode })
}

impl LayerStats {
    /// Draw `eps = mu + sigma * g`, one row per patch token.
    pub fn sample_noise(&self, tokens: usize, rng: &mut impl Rng) -> Tensor {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(tokens * d);
        for _ in 0..tokens {
            for j in 0..d {
                let gauss: Real = rng.sample(StandardNormal);
                data.push(self.mean[j] + self.std[j] * gauss);
            }
        }
        Tensor { shape: vec![tokens, d], data }
    }

    /// Noise frozen to the channel mean; used by the input-independence check.
    pub fn mean_noise(&self, tokens: usize) -> Tensor {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(tokens * d);
        for _ in 0..tokens {
            data.extend_from_slice(&self.mean);
        }
        Tensor { shape: vec![tokens, d], data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMode {
    Iba,
    IbaStar,
    Coiba,
    CoibaPerLayerBeta,
}

/// Where and how the bottleneck is optimized. Layers are 1-indexed blocks;
/// the representation entering block `l`'s first normalization is replaced
/// for every `l` in `[s, e]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub mode: BottleneckMode,
    pub s: usize,
    pub e: usize,
    pub beta: Real,
    pub beta_per_layer: Option<Vec<Real>>,
    pub iterations: usize,
    pub learning_rate: Real,
    pub noise_batch: usize,
    pub seed: u64,
    pub stats_mode: StatsMode,
    /// Ablation flag: one damping coefficient per channel instead of a
    /// channel-uniform per-token coefficient.
    pub per_channel: bool,
    /// Ablation flag: report raw lambda instead of per-layer capacity.
    pub raw_lambda_scores: bool,
}

impl BottleneckSpec {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.s < 1 || self.s > self.e || self.e > depth {
            return Err(Error::Config(format!(
                "layer range [{}, {}] invalid for depth {}",
                self.s, self.e, depth
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.noise_batch < 1 {
            return Err(Error::Config("noise_batch must be >= 1".into()));
        }
        if let Some(betas) = &self.beta_per_layer {
            if betas.len() != self.layer_count() {
                return Err(Error::Config(format!(
                    "beta_per_layer has {} entries for {} hooked layers",
                    betas.len(),
                    self.layer_count()
                )));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.e - self.s + 1
    }
}

/// Trainable damping parameter alpha; `lambda = sigmoid(alpha)`.
#[derive(Debug, Clone)]
pub struct DampingParams {
    pub alpha: Tensor,
    pub per_channel: bool,
}

impl DampingParams {
    /// Initialized with 5 so the bottleneck starts nearly transparent.
    pub fn init(tokens: usize, channels: usize, per_channel: bool) -> Self {
        let shape = if per_channel { vec![tokens, channels] } else { vec![tokens] };
        DampingParams { alpha: Tensor::full(shape, 5.0), per_channel }
    }

    pub fn lambda(&self) -> Tensor {
        Tensor {
            shape: self.alpha.shape.clone(),
            data: self.alpha.data.iter().map(|&a| crate::tensor::sigmoid_f(a)).collect(),
        }
    }

    /// Insert alpha as a trainable leaf and derive lambda on the tape.
    pub fn into_graph(&self, g: &mut Graph) -> GraphDamping {
        let alpha = g.leaf(self.alpha.clone());
        let lambda = g.sigmoid(alpha);
        GraphDamping { alpha, lambda, per_channel: self.per_channel }
    }
}

/// Graph-resident damping variables shared by every hooked layer.
#[derive(Debug, Clone, Copy)]
pub struct GraphDamping {
    pub alpha: VarId,
    pub lambda: VarId,
    pub per_channel: bool,
}

/// `Z = lambda * R' + (1 - lambda) * eps` over the patch-token block; the
/// class token passes through unchanged.
pub fn apply_bottleneck(
    g: &mut Graph,
    rprime: VarId,
    damping: &GraphDamping,
    noise: &Tensor,
) -> Result<VarId> {
    let rows = g.value(rprime).rows();
    let d = g.value(rprime).cols();
    let p = noise.rows();
    if rows != p + 1 || noise.cols() != d {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match {} patch tokens x {} channels",
            noise.shape,
            rows - 1,
            d
        )));
    }
    let cls = g.slice_rows(rprime, 0, 1)?;
    let patches = g.slice_rows(rprime, 1, p)?;
    let eps = g.constant(noise.clone());
    let z = if damping.per_channel {
        let lam = damping.lambda;
        let keep = g.mul(patches, lam)?;
        let neg = g.scale(lam, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let inject = g.mul(eps, one_minus)?;
        g.add(keep, inject)?
    } else {
        let lam = damping.lambda;
        let keep = g.row_scale(patches, lam)?;
        let neg = g.scale(lam, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let inject = g.row_scale(eps, one_minus)?;
        g.add(keep, inject)?
    };
    g.concat_rows(&[cls, z])
}

/// Per-element KL between the perturbed-activation distribution and the
/// Gaussian prior, in nats:
/// `-log(1 - lambda) + ((1 - lambda)^2 + lambda^2 ((r - mu) / sigma)^2) / 2 - 1/2`.
///
/// `log(1 - lambda)` is evaluated as `-softplus(alpha)` to avoid cancellation
/// when lambda approaches 1.
pub fn kl_capacity_graph(
    g: &mut Graph,
    rprime: VarId,
    damping: &GraphDamping,
    stats: &LayerStats,
) -> Result<VarId> {
    for s in &stats.std {
        if *s < EPS_STD {
            return Err(Error::Stats(format!("std {} below floor {}", s, EPS_STD)));
        }
    }
    let rows = g.value(rprime).rows();
    let p = rows - 1;
    let patches = g.slice_rows(rprime, 1, p)?;
    let u = g.normalize_channels(patches, &stats.mean, &stats.std)?;
    let u2 = g.mul(u, u)?;
    let lam = damping.lambda;
    let lam2 = g.mul(lam, lam)?;
    let neg = g.scale(lam, -1.0);
    let om = g.add_scalar(neg, 1.0);
    let om2 = g.mul(om, om)?;
    let sp = g.softplus(damping.alpha);
    if damping.per_channel {
        let quad = g.mul(u2, lam2)?;
        let half_quad = g.scale(quad, 0.5);
        let half_om2 = g.scale(om2, 0.5);
        let base = g.add(sp, half_om2)?;
        let base = g.add_scalar(base, -0.5);
        g.add(half_quad, base)
    } else {
        let quad = g.row_scale(u2, lam2)?;
        let half_quad = g.scale(quad, 0.5);
        let half_om2 = g.scale(om2, 0.5);
        let base = g.add(sp, half_om2)?;
        let base = g.add_scalar(base, -0.5);
        g.row_add(half_quad, base)
    }
}

/// Closed-form per-element capacity, scalar form. Generic so tests can probe
/// it at different precisions.
pub fn kl_capacity_scalar<F: Float>(lambda: F, r: F, mu: F, sigma: F) -> F {
    let one = F::one();
    let half = F::from(0.5).unwrap();
    let om = one - lambda;
    let c = (r - mu) / sigma;
    -om.ln() + half * (om * om + lambda * lambda * c * c) - half
}

/// One hooked layer as recorded during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HookRecord {
    /// 1-indexed block.
    pub layer: usize,
    /// Representation entering the block before the bottleneck.
    pub rprime: VarId,
    /// Bottleneck output that replaced it.
    pub z: VarId,
}

/// Compression term of the objective, differentiable w.r.t. alpha.
///
/// In `Coiba` (and `Iba`) mode this is the mean per-element capacity of the
/// first hooked layer only; in `CoibaPerLayerBeta` mode it is
/// `(1/L) * sum_l beta_l * mean(capacity at layer l)`.
pub fn compression_term(
    g: &mut Graph,
    trace: &[HookRecord],
    spec: &BottleneckSpec,
    damping: &GraphDamping,
    stats_per_layer: &[LayerStats],
) -> Result<VarId> {
    if trace.len() != spec.layer_count() || stats_per_layer.len() != spec.layer_count() {
        return Err(Error::Contract(format!(
            "trace covers {} layers, spec expects {}",
            trace.len(),
            spec.layer_count()
        )));
    }
    match spec.mode {
        BottleneckMode::Coiba | BottleneckMode::Iba | BottleneckMode::IbaStar => {
            let cap = kl_capacity_graph(g, trace[0].rprime, damping, &stats_per_layer[0])?;
            Ok(g.mean(cap))
        }
        BottleneckMode::CoibaPerLayerBeta => {
            let betas = spec
                .beta_per_layer
                .clone()
                .unwrap_or_else(|| vec![spec.beta; spec.layer_count()]);
            let mut acc: Option<VarId> = None;
            for (i, rec) in trace.iter().enumerate() {
                let cap = kl_capacity_graph(g, rec.rprime, damping, &stats_per_layer[i])?;
                let m = g.mean(cap);
                let w = g.scale(m, betas[i]);
                acc = Some(match acc {
                    Some(a) => g.add(a, w)?,
                    None => w,
                });
            }
            let total = acc.expect("layer_count >= 1");
            Ok(g.scale(total, 1.0 / spec.layer_count() as Real))
        }
    }
}

pub const NATS_TO_BITS: Real = std::f64::consts::LOG2_E;
