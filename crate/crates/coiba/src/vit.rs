//! A minimal pre-norm vision transformer with per-block injection points,
//! deterministic initialization, a toy trainer, and a binary checkpoint
//! format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribution::AdamState;
use crate::bottleneck::{apply_bottleneck, DampingParams, GraphDamping, HookRecord};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, VarId};
use crate::Real;

pub const LN_EPS: Real = 1e-6;
const INIT_STD: Real = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Toy scale: 16 patch tokens, 6 blocks, seconds-scale attribution.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            depth: 6,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.num_classes == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("depth, classes, mlp_ratio, channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Zero,
    One,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let mut v = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d], Init::TruncNormal),
        ("patch_embed.bias".into(), vec![d], Init::Zero),
        ("cls_token".into(), vec![1, d], Init::TruncNormal),
        ("pos_embed".into(), vec![cfg.tokens(), d], Init::TruncNormal),
    ];
    for b in 0..cfg.depth {
        let p = |n: &str| format!("blocks.{}.{}", b, n);
        v.push((p("norm1.gamma"), vec![d], Init::One));
        v.push((p("norm1.beta"), vec![d], Init::Zero));
        v.push((p("attn.qkv.weight"), vec![d, 3 * d], Init::TruncNormal));
        v.push((p("attn.qkv.bias"), vec![3 * d], Init::Zero));
        v.push((p("attn.proj.weight"), vec![d, d], Init::TruncNormal));
        v.push((p("attn.proj.bias"), vec![d], Init::Zero));
        v.push((p("norm2.gamma"), vec![d], Init::One));
        v.push((p("norm2.beta"), vec![d], Init::Zero));
        v.push((p("mlp.fc1.weight"), vec![d, cfg.hidden_dim()], Init::TruncNormal));
        v.push((p("mlp.fc1.bias"), vec![cfg.hidden_dim()], Init::Zero));
        v.push((p("mlp.fc2.weight"), vec![cfg.hidden_dim(), d], Init::TruncNormal));
        v.push((p("mlp.fc2.bias"), vec![d], Init::Zero));
    }
    v.push(("norm.gamma".into(), vec![d], Init::One));
    v.push(("norm.beta".into(), vec![d], Init::Zero));
    v.push(("head.weight".into(), vec![d, cfg.num_classes], Init::TruncNormal));
    v.push(("head.bias".into(), vec![cfg.num_classes], Init::Zero));
    v
}

/// Named-tensor bundle; read-only after load, shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: Real) -> Real {
    loop {
        let g: Real = rng.sample(StandardNormal);
        if g.abs() <= 2.0 {
            return g * std;
        }
    }
}

/// Deterministic initialization: same seed, bit-identical checkpoint.
pub fn init_model(config: &ModelConfig) -> Result<ModelCheckpoint> {
    config.validate()?;
    init_with_rng_seed(config, config.seed)
}

fn init_with_rng_seed(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in param_specs(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, INIT_STD)).collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        tensors.insert(name, Tensor { shape, data });
    }
    Ok(ModelCheckpoint { config: *config, tensors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizeMode {
    Independent,
    Cumulative,
}

/// Parameter-randomization transform for the sanity-check harness.
///
/// Independent mode re-draws only block `layer_index`; cumulative mode
/// re-draws all blocks at or after `layer_index` plus the final norm and
/// head. `layer_index == depth` in cumulative mode re-draws the head only.
pub fn randomize_parameters(
    ckpt: &ModelCheckpoint,
    mode: RandomizeMode,
    layer_index: usize,
    seed: u64,
) -> Result<ModelCheckpoint> {
    let depth = ckpt.config.depth;
    let limit = match mode {
        RandomizeMode::Independent => depth - 1,
        RandomizeMode::Cumulative => depth,
    };
    if layer_index > limit {
        return Err(Error::Index(format!(
            "layer index {} out of range (depth {})",
            layer_index, depth
        )));
    }
    let fresh = init_with_rng_seed(&ckpt.config, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut out = ckpt.clone();
    let affected = |name: &str| -> bool {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let idx: usize = rest.split('.').next().unwrap().parse().unwrap();
            match mode {
                RandomizeMode::Independent => idx == layer_index,
                RandomizeMode::Cumulative => idx >= layer_index,
            }
        } else {
            matches!(mode, RandomizeMode::Cumulative)
                && (name.starts_with("head.") || name.starts_with("norm."))
        }
    };
    for (name, t) in &mut out.tensors {
        if affected(name) {
            *t = fresh.tensors[name].clone();
        }
    }
    Ok(out)
}

// ---- forward pass ----

/// Flatten the image into one row per patch cell, row-major within a patch.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (h, w, ch) = match image.shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Dimension(format!("image must be HxW[xC], got {:?}", s))),
    };
    if h != cfg.image_size || w != cfg.image_size || ch != cfg.channels {
        return Err(Error::Dimension(format!(
            "image {}x{}x{} does not match config {}x{}x{}",
            h, w, ch, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let ps = cfg.patch_size;
    let grid = cfg.grid();
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pi in 0..grid {
        for pj in 0..grid {
            for y in 0..ps {
                for x in 0..ps {
                    let row = pi * ps + y;
                    let col = pj * ps + x;
                    for c in 0..ch {
                        data.push(image.data[(row * w + col) * ch + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Model weights resident on one tape.
pub struct GraphModel {
    vars: BTreeMap<String, VarId>,
}

impl GraphModel {
    pub fn insert(g: &mut Graph, ckpt: &ModelCheckpoint, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            let id = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(name.clone(), id);
        }
        GraphModel { vars }
    }

    pub fn var(&self, name: &str) -> VarId {
        self.vars[name]
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.vars.iter()
    }
}

/// Bottleneck injection request for a hooked forward pass.
pub struct HookPlan<'a> {
    /// 1-indexed inclusive departure and arrival blocks.
    pub s: usize,
    pub e: usize,
    pub damping: GraphDamping,
    /// One noise tensor per hooked layer, `noise[l - s]` for block `l`.
    pub noise: &'a [Tensor],
}

pub struct ForwardRecord {
    /// `1 x C` logits node.
    pub logits: VarId,
    pub hooks: Vec<HookRecord>,
    /// Representation entering each block's first norm (clean value copies),
    /// recorded only when requested.
    pub block_inputs: Vec<Tensor>,
}

pub fn forward_on_graph(
    g: &mut Graph,
    gm: &GraphModel,
    cfg: &ModelConfig,
    image: &Tensor,
    hook: Option<&HookPlan>,
    record_inputs: bool,
) -> Result<ForwardRecord> {
    if let Some(h) = hook {
        if h.s < 1 || h.s > h.e || h.e > cfg.depth {
            return Err(Error::Config(format!(
                "hook range [{}, {}] invalid for depth {}",
                h.s, h.e, cfg.depth
            )));
        }
        if h.noise.len() != h.e - h.s + 1 {
            return Err(Error::Dimension(format!(
                "{} noise tensors for {} hooked layers",
                h.noise.len(),
                h.e - h.s + 1
            )));
        }
    }
    let d = cfg.embed_dim;
    let dh = d / cfg.heads;
    let patches = patchify(image, cfg)?;
    let pv = g.constant(patches);
    let emb = g.matmul(pv, gm.var("patch_embed.weight"))?;
    let emb = g.add_bias(emb, gm.var("patch_embed.bias"))?;
    let mut x = g.concat_rows(&[gm.var("cls_token"), emb])?;
    x = g.add(x, gm.var("pos_embed"))?;

    let mut hooks = Vec::new();
    let mut block_inputs = Vec::new();
    for l in 1..=cfg.depth {
        if record_inputs {
            block_inputs.push(g.value(x).clone());
        }
        if let Some(h) = hook {
            if l >= h.s && l <= h.e {
                let z = apply_bottleneck(g, x, &h.damping, &h.noise[l - h.s])?;
                hooks.push(HookRecord { layer: l, rprime: x, z });
                x = z;
            }
        }
        let p = |n: &str| format!("blocks.{}.{}", l - 1, n);
        let a = g.layer_norm(x, gm.var(&p("norm1.gamma")), gm.var(&p("norm1.beta")), LN_EPS)?;
        let qkv = g.matmul(a, gm.var(&p("attn.qkv.weight")))?;
        let qkv = g.add_bias(qkv, gm.var(&p("attn.qkv.bias")))?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hidx in 0..cfg.heads {
            let q = g.slice_cols(qkv, hidx * dh, dh)?;
            let k = g.slice_cols(qkv, d + hidx * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + hidx * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as Real).sqrt());
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, v)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        let proj = g.matmul(merged, gm.var(&p("attn.proj.weight")))?;
        let proj = g.add_bias(proj, gm.var(&p("attn.proj.bias")))?;
        x = g.add(x, proj)?;

        let f = g.layer_norm(x, gm.var(&p("norm2.gamma")), gm.var(&p("norm2.beta")), LN_EPS)?;
        let h1 = g.matmul(f, gm.var(&p("mlp.fc1.weight")))?;
        let h1 = g.add_bias(h1, gm.var(&p("mlp.fc1.bias")))?;
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, gm.var(&p("mlp.fc2.weight")))?;
        let h2 = g.add_bias(h2, gm.var(&p("mlp.fc2.bias")))?;
        x = g.add(x, h2)?;
    }
    let xf = g.layer_norm(x, gm.var("norm.gamma"), gm.var("norm.beta"), LN_EPS)?;
    let cls = g.slice_rows(xf, 0, 1)?;
    let logits = g.matmul(cls, gm.var("head.weight"))?;
    let logits = g.add_bias(logits, gm.var("head.bias"))?;
    Ok(ForwardRecord { logits, hooks, block_inputs })
}

/// Value-level record of one hooked layer.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layers: Vec<(usize, Tensor, Tensor)>,
}

/// Value-level hook set for the plain `forward` entry point.
pub struct FrozenHooks<'a> {
    pub s: usize,
    pub e: usize,
    pub damping: &'a DampingParams,
    pub noise: &'a [Tensor],
}

/// Plain forward pass; hooks optional. Returns logits of shape `[C]` and the
/// per-layer (R', Z) trace when hooks were active.
pub fn forward(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    hooks: Option<&FrozenHooks>,
) -> Result<(Tensor, ActivationTrace)> {
    let mut g = Graph::new();
    let gm = GraphModel::insert(&mut g, ckpt, false);
    let plan = hooks.map(|h| {
        let damping = h.damping.into_graph(&mut g);
        HookPlan { s: h.s, e: h.e, damping, noise: h.noise }
    });
    let rec = forward_on_graph(&mut g, &gm, &ckpt.config, image, plan.as_ref(), false)?;
    let logits = Tensor {
        shape: vec![ckpt.config.num_classes],
        data: g.value(rec.logits).data.clone(),
    };
    let layers = rec
        .hooks
        .iter()
        .map(|h| (h.layer, g.value(h.rprime).clone(), g.value(h.z).clone()))
        .collect();
    Ok((logits, ActivationTrace { layers }))
}

/// Softmax probability of `target` on the clean forward.
pub fn predict_prob(ckpt: &ModelCheckpoint, image: &Tensor, target: usize) -> Result<Real> {
    let (logits, _) = forward(ckpt, image, None)?;
    Ok(softmax_prob(&logits.data, target))
}

pub fn softmax_prob(logits: &[Real], target: usize) -> Real {
    let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let denom: Real = logits.iter().map(|v| (v - m).exp()).sum();
    (logits[target] - m).exp() / denom
}

pub fn argmax(v: &[Real]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Clean representations entering each block's first norm, for statistics
/// estimation. Index `l - 1` holds block `l`'s input.
pub fn clean_block_inputs(ckpt: &ModelCheckpoint, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let gm = GraphModel::insert(&mut g, ckpt, false);
    let rec = forward_on_graph(&mut g, &gm, &ckpt.config, image, None, true)?;
    Ok(rec.block_inputs)
}

// ---- toy trainer ----

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Real,
    pub holdout_accuracy: Real,
}

/// Per-sample probabilities for the consistency-augmentation branches.
const AUG_TOKEN_SWAP_PROB: f64 = 0.2;
const AUG_STATS_SWAP_PROB: f64 = 0.2;
const AUG_CLOSED_PROB: f64 = 0.25;
/// Keep probability for background tokens in the stats-swap branch.
const AUG_KEEP_PROB: f64 = 0.3;
/// Weight of the own-label probability penalty in the closed branch.
const ANTI_DECODE_WEIGHT: Real = 2.0;
/// Saturating pre-sigmoid values: sigmoid rounds to exactly 1 and 0 in f64.
const ALPHA_OPEN: Real = 800.0;
const ALPHA_CLOSED: Real = -800.0;

/// Training branch for one sample.
enum Aug {
    Clean,
    /// Patch rows at the hooked blocks replaced by another sample's clean
    /// rows; target is that sample's label. Penalizes caching class evidence
    /// in the class token before the hooked range.
    TokenSwap,
    /// Discriminative token kept, background replaced by Gaussian noise
    /// matched to another sample's channel statistics; target is the own
    /// label. Penalizes decoding the class from noise moments.
    StatsSwap,
    /// Every patch token replaced by noise matched to the own statistics;
    /// target is the uniform distribution.
    Closed,
}

/// Minibatch Adam on cross-entropy, with consistency augmentation.
///
/// Besides plain supervised samples, some samples are forwarded with patch
/// tokens replaced at later blocks, mirroring what an information bottleneck
/// injects. The branches are built so that shortcut features disagree with
/// the training target: replaced real rows carry a different label than the
/// class token's early residual path, and noise statistics borrowed from
/// another sample disagree with the kept discriminative token. The network
/// is thereby pushed to read class evidence from structured tokens late in
/// the forward pass, so statistics-matched noise genuinely erases it.
/// Single-threaded and deterministic given the seed and the data order.
pub fn train_toy(
    ckpt: &ModelCheckpoint,
    train: &[SyntheticSample],
    holdout: &[SyntheticSample],
    epochs: usize,
    lr: Real,
    batch_size: usize,
    seed: u64,
) -> Result<(ModelCheckpoint, Vec<EpochLog>)> {
    let mut model = ckpt.clone();
    let mut logs = Vec::new();
    if epochs == 0 {
        return Ok((model, logs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam: BTreeMap<String, AdamState> = model
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), AdamState::new(t.numel(), lr)))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let mut g = Graph::new();
            let gm = GraphModel::insert(&mut g, &model, true);
            let mut acc: Option<VarId> = None;
            for &idx in chunk {
                let s = &train[idx];
                let cfg = model.config;
                let p = cfg.num_patches();
                let d = cfg.embed_dim;
                let aug_s = crate::config::default_departure(cfg.depth);
                let glyph = crate::data::glyph_token_index(s, cfg.patch_size);
                let draw: f64 = rng.gen();
                let mut aug = if draw < AUG_TOKEN_SWAP_PROB {
                    Aug::TokenSwap
                } else if draw < AUG_TOKEN_SWAP_PROB + AUG_STATS_SWAP_PROB {
                    Aug::StatsSwap
                } else if draw < AUG_TOKEN_SWAP_PROB + AUG_STATS_SWAP_PROB + AUG_CLOSED_PROB {
                    Aug::Closed
                } else {
                    Aug::Clean
                };
                if matches!(aug, Aug::StatsSwap) && glyph.is_none() {
                    aug = Aug::Clean;
                }
                // Donor sample for the swap branches; drawn unconditionally
                // to keep the random stream independent of the branch.
                let donor = &train[rng.gen_range(0..train.len())];
                let patch_rows_at = |acts: &[Tensor], l: usize| Tensor {
                    shape: vec![p, d],
                    data: acts[l - 1].data[d..].to_vec(),
                };
                let sample_loss = match aug {
                    Aug::Clean => {
                        let rec =
                            forward_on_graph(&mut g, &gm, &cfg, &s.image, None, false)?;
                        g.cross_entropy(rec.logits, s.label)?
                    }
                    Aug::TokenSwap => {
                        let acts = clean_block_inputs(&model, &donor.image)?;
                        let alpha = Tensor::full(vec![p], ALPHA_CLOSED);
                        let rows: Vec<Tensor> =
                            (aug_s..=cfg.depth).map(|l| patch_rows_at(&acts, l)).collect();
                        let damping =
                            DampingParams { alpha, per_channel: false }.into_graph(&mut g);
                        let plan = HookPlan { s: aug_s, e: cfg.depth, damping, noise: &rows };
                        let rec =
                            forward_on_graph(&mut g, &gm, &cfg, &s.image, Some(&plan), false)?;
                        g.cross_entropy(rec.logits, donor.label)?
                    }
                    Aug::StatsSwap | Aug::Closed => {
                        let stats_src = if matches!(aug, Aug::StatsSwap) { donor } else { s };
                        let acts = clean_block_inputs(&model, &stats_src.image)?;
                        let mut alpha = Tensor::full(vec![p], ALPHA_CLOSED);
                        if matches!(aug, Aug::StatsSwap) {
                            for (t, a) in alpha.data.iter_mut().enumerate() {
                                if Some(t) == glyph || rng.gen_bool(AUG_KEEP_PROB) {
                                    *a = ALPHA_OPEN;
                                }
                            }
                        }
                        let noise: Vec<Tensor> = (aug_s..=cfg.depth)
                            .map(|l| {
                                let rows = patch_rows_at(&acts, l);
                                let stats = crate::bottleneck::estimate_stats(
                                    &[&rows],
                                    crate::bottleneck::StatsMode::PerSample,
                                )?;
                                Ok(stats.sample_noise(p, &mut rng))
                            })
                            .collect::<Result<_>>()?;
                        let damping =
                            DampingParams { alpha, per_channel: false }.into_graph(&mut g);
                        let plan = HookPlan { s: aug_s, e: cfg.depth, damping, noise: &noise };
                        let rec =
                            forward_on_graph(&mut g, &gm, &cfg, &s.image, Some(&plan), false)?;
                        if matches!(aug, Aug::StatsSwap) {
                            g.cross_entropy(rec.logits, s.label)?
                        } else {
                            // Cross-entropy against the uniform target,
                            // averaged over all classes, plus a direct
                            // penalty on the own-label probability. The
                            // penalty keeps its gradient when the logits are
                            // already nearly flat, so residual decoding of
                            // the noise statistics is still suppressed.
                            let mut total: Option<VarId> = None;
                            for c in 0..cfg.num_classes {
                                let ce = g.cross_entropy(rec.logits, c)?;
                                total = Some(match total {
                                    Some(t) => g.add(t, ce)?,
                                    None => ce,
                                });
                            }
                            let uniform =
                                g.scale(total.unwrap(), 1.0 / cfg.num_classes as Real);
                            let probs = g.softmax_rows(rec.logits);
                            let own = g.slice_cols(probs, s.label, 1)?;
                            let own = g.sum(own);
                            let penalty = g.scale(own, ANTI_DECODE_WEIGHT);
                            g.add(uniform, penalty)?
                        }
                    }
                };
                acc = Some(match acc {
                    Some(a) => g.add(a, sample_loss)?,
                    None => sample_loss,
                });
            }
            let total = acc.expect("non-empty batch");
            let loss = g.scale(total, 1.0 / chunk.len() as Real);
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Training { epoch, msg: format!("loss {}", loss_val) });
            }
            epoch_loss += loss_val;
            batches += 1;
            g.backward(loss)?;
            for (name, &id) in gm.names() {
                if let Some(grad) = g.grad(id) {
                    let state = adam.get_mut(name).unwrap();
                    let param = model.tensors.get_mut(name).unwrap();
                    state.step(&mut param.data, grad)?;
                }
            }
        }
        let acc = accuracy(&model, holdout)?;
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as Real,
            holdout_accuracy: acc,
        });
    }
    Ok((model, logs))
}

pub fn accuracy(ckpt: &ModelCheckpoint, samples: &[SyntheticSample]) -> Result<Real> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        let (logits, _) = forward(ckpt, &s.image, None)?;
        if argmax(&logits.data) == s.label {
            hits += 1;
        }
    }
    Ok(hits as Real / samples.len() as Real)
}

// ---- checkpoint file format ----

const MAGIC: &[u8; 4] = b"CIBT";
const VERSION: u32 = 1;

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&ckpt.config).expect("config serializes");
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::data::atomic_write(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected CIBT".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {}", version) });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_at = r.pos;
    let cfg_bytes = r.take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::Parse { offset: cfg_at, msg: format!("config json: {}", e) })?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse { offset: at, msg: "tensor name not utf8".into() })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(Real::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        tensors.insert(name, Tensor { shape, data });
    }
    config.validate()?;
    Ok(ModelCheckpoint { config, tensors })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse { offset: self.pos, msg: "truncated file".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Hex digest of a checkpoint's bytes, for provenance lines in CLI output.
pub fn checkpoint_digest(ckpt: &ModelCheckpoint) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in &ckpt.tensors {
        h.update(name.as_bytes());
        for &v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}
