//! The optimization loop fitting the damping parameter against the
//! bottleneck objective, the single-layer and linear-combination baselines,
//! and attribution-map output.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{
    compression_term, estimate_stats, kl_capacity_graph, BottleneckMode, BottleneckSpec,
    DampingParams, LayerStats, NATS_TO_BITS,
};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, VarId};
use crate::vit::{forward_on_graph, GraphModel, HookPlan, ModelCheckpoint};
use crate::Real;

/// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Real>,
    v: Vec<Real>,
    step: usize,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamState {
    pub fn new(n: usize, lr: Real) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, param: &mut [Real], grad: &[Real]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Optimization("non-finite gradient in Adam step".into()));
        }
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension("Adam state size mismatch".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Per-token scores plus an upsampled per-pixel map with provenance.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub token_scores: Vec<Real>,
    /// `H x W`, deterministic bilinear upsampling of the token grid.
    pub pixel_map: Tensor,
    pub method: String,
    pub layers: (usize, usize),
    pub beta: Real,
    pub iterations: usize,
    pub seed: u64,
    pub loss_ce: Real,
    pub loss_compression: Real,
    /// Logits of the final bottlenecked forward under frozen evaluation
    /// noise; used for accuracy-under-bottleneck reporting.
    pub eval_logits: Vec<Real>,
    pub runtime_ms: Real,
}

/// JSON sidecar schema written next to each PGM map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSidecar {
    pub method: String,
    pub layers: [usize; 2],
    pub beta: Real,
    pub iterations: usize,
    pub seed: u64,
    pub token_scores: Vec<Real>,
    pub loss_ce: Real,
    pub loss_compression: Real,
    pub runtime_ms: Real,
}

impl AttributionMap {
    pub fn sidecar(&self) -> MapSidecar {
        MapSidecar {
            method: self.method.clone(),
            layers: [self.layers.0, self.layers.1],
            beta: self.beta,
            iterations: self.iterations,
            seed: self.seed,
            token_scores: self.token_scores.clone(),
            loss_ce: self.loss_ce,
            loss_compression: self.loss_compression,
            runtime_ms: self.runtime_ms,
        }
    }
}

/// Min-max normalize to [0, 1]; a constant map becomes all zeros.
pub fn normalize01(t: &Tensor) -> Tensor {
    let min = t.data.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = t.data.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let span = max - min;
    let data = if span > 0.0 {
        t.data.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.0; t.data.len()]
    };
    Tensor { shape: t.shape.clone(), data }
}

/// Save the 16-bit PGM (min-max normalized) plus its JSON sidecar.
pub fn save_map(map: &AttributionMap, pgm_path: &Path, json_path: &Path) -> Result<()> {
    let norm = normalize01(&map.pixel_map);
    crate::data::save_pgm(pgm_path, &norm, crate::data::BitDepth::Sixteen)?;
    let json = serde_json::to_vec_pretty(&map.sidecar()).expect("sidecar serializes");
    crate::data::atomic_write(json_path, &json)
}

/// Bilinear upsampling of a square token grid to `size x size`, aligned at
/// patch centers.
pub fn upsample_scores(token_scores: &[Real], size: usize) -> Result<Tensor> {
    let p = token_scores.len();
    let grid = (p as Real).sqrt().round() as usize;
    if grid * grid != p {
        return Err(Error::Config(format!("{} token scores is not a perfect square", p)));
    }
    let mut out = Tensor::zeros(vec![size, size]);
    let scale = grid as Real / size as Real;
    for r in 0..size {
        let gy = ((r as Real + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as Real);
        let i0 = gy.floor() as usize;
        let i1 = (i0 + 1).min(grid - 1);
        let fy = gy - i0 as Real;
        for c in 0..size {
            let gx = ((c as Real + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as Real);
            let j0 = gx.floor() as usize;
            let j1 = (j0 + 1).min(grid - 1);
            let fx = gx - j0 as Real;
            let v = token_scores[i0 * grid + j0] * (1.0 - fy) * (1.0 - fx)
                + token_scores[i0 * grid + j1] * (1.0 - fy) * fx
                + token_scores[i1 * grid + j0] * fy * (1.0 - fx)
                + token_scores[i1 * grid + j1] * fy * fx;
            out.data[r * size + c] = v;
        }
    }
    Ok(out)
}

/// Nearest-neighbor variant; preserves exact per-patch values.
pub fn upsample_scores_nearest(token_scores: &[Real], size: usize) -> Result<Tensor> {
    let p = token_scores.len();
    let grid = (p as Real).sqrt().round() as usize;
    if grid * grid != p {
        return Err(Error::Config(format!("{} token scores is not a perfect square", p)));
    }
    let cell = size / grid;
    let mut out = Tensor::zeros(vec![size, size]);
    for r in 0..size {
        for c in 0..size {
            let i = (r / cell).min(grid - 1);
            let j = (c / cell).min(grid - 1);
            out.data[r * size + c] = token_scores[i * grid + j];
        }
    }
    Ok(out)
}

const EVAL_NOISE_SALT: u64 = 0xa5e1_7a9e_0000_0001;

/// Per-channel statistics of the clean activations entering each hooked
/// layer, per-sample mode.
pub fn per_sample_stats(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    spec: &BottleneckSpec,
) -> Result<Vec<LayerStats>> {
    let acts = crate::vit::clean_block_inputs(ckpt, image)?;
    let d = ckpt.config.embed_dim;
    (spec.s..=spec.e)
        .map(|l| {
            let t = &acts[l - 1];
            let patch_rows = Tensor {
                shape: vec![t.rows() - 1, d],
                data: t.data[d..].to_vec(),
            };
            estimate_stats(&[&patch_rows], spec.stats_mode)
        })
        .collect()
}

/// Calibration-mode statistics aggregated over a set of images.
pub fn calibration_stats(
    ckpt: &ModelCheckpoint,
    images: &[&Tensor],
    spec: &BottleneckSpec,
) -> Result<Vec<LayerStats>> {
    let d = ckpt.config.embed_dim;
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); spec.layer_count()];
    for img in images {
        let acts = crate::vit::clean_block_inputs(ckpt, img)?;
        for l in spec.s..=spec.e {
            let t = &acts[l - 1];
            per_layer[l - spec.s].push(Tensor {
                shape: vec![t.rows() - 1, d],
                data: t.data[d..].to_vec(),
            });
        }
    }
    per_layer
        .iter()
        .map(|ts| {
            let refs: Vec<&Tensor> = ts.iter().collect();
            estimate_stats(&refs, spec.stats_mode)
        })
        .collect()
}

struct IterationEval {
    ce: Real,
    compression: Real,
    capacities: Vec<Tensor>,
    lambda: Tensor,
    logits: Vec<Real>,
}

/// One objective evaluation: `noise_batch` hooked forwards with fresh noise,
/// loss = mean CE + compression. Returns the loss root for backward.
fn build_objective(
    g: &mut Graph,
    gm: &GraphModel,
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    target: usize,
    spec: &BottleneckSpec,
    damping: &crate::bottleneck::GraphDamping,
    stats: &[LayerStats],
    rng: &mut ChaCha8Rng,
    draws: usize,
) -> Result<(VarId, IterationEval)> {
    let p = ckpt.config.num_patches();
    let mut ce_acc: Option<VarId> = None;
    let mut comp_acc: Option<VarId> = None;
    let mut last_caps = Vec::new();
    let mut last_logits = Vec::new();
    for _ in 0..draws {
        let noise: Vec<Tensor> = stats.iter().map(|s| s.sample_noise(p, rng)).collect();
        let plan = HookPlan { s: spec.s, e: spec.e, damping: *damping, noise: &noise };
        let rec = forward_on_graph(g, gm, &ckpt.config, image, Some(&plan), false)?;
        let ce = g.cross_entropy(rec.logits, target)?;
        let comp = compression_term(g, &rec.hooks, spec, damping, stats)?;
        ce_acc = Some(match ce_acc {
            Some(a) => g.add(a, ce)?,
            None => ce,
        });
        comp_acc = Some(match comp_acc {
            Some(a) => g.add(a, comp)?,
            None => comp,
        });
        last_caps = rec
            .hooks
            .iter()
            .zip(stats)
            .map(|(h, st)| {
                let cap = kl_capacity_graph(g, h.rprime, damping, st)?;
                Ok(g.value(cap).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        last_logits = g.value(rec.logits).data.clone();
    }
    let inv = 1.0 / draws as Real;
    let ce_mean = g.scale(ce_acc.unwrap(), inv);
    let comp_mean = g.scale(comp_acc.unwrap(), inv);
    let weighted = match spec.mode {
        // beta_l factors are applied inside the compression term.
        BottleneckMode::CoibaPerLayerBeta => comp_mean,
        _ => g.scale(comp_mean, spec.beta),
    };
    let loss = g.add(ce_mean, weighted)?;
    let eval = IterationEval {
        ce: g.value(ce_mean).item(),
        compression: g.value(comp_mean).item(),
        capacities: last_caps,
        lambda: g.value(damping.lambda).clone(),
        logits: last_logits,
    };
    Ok((loss, eval))
}

/// Fit alpha for one image and read out the attribution map.
///
/// IBA is the `s == e` special case of the same loop, so the two modes
/// collapse bitwise under a shared seed.
pub fn attribute(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    target: usize,
    spec: &BottleneckSpec,
) -> Result<AttributionMap> {
    attribute_with_stats(ckpt, image, target, spec, None)
}

pub fn attribute_with_stats(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    target: usize,
    spec: &BottleneckSpec,
    stats_override: Option<Vec<LayerStats>>,
) -> Result<AttributionMap> {
    let start = Instant::now();
    let cfg = &ckpt.config;
    spec.validate(cfg.depth)?;
    if target >= cfg.num_classes {
        return Err(Error::Index(format!(
            "target {} out of range for {} classes",
            target, cfg.num_classes
        )));
    }
    if spec.mode == BottleneckMode::IbaStar {
        return Err(Error::Config("use attribute_iba_star for the linear-combination mode".into()));
    }
    if matches!(spec.mode, BottleneckMode::Iba) && spec.s != spec.e {
        return Err(Error::Config("IBA mode requires a single layer (s == e)".into()));
    }
    let stats = match stats_override {
        Some(s) => s,
        None => per_sample_stats(ckpt, image, spec)?,
    };
    let p = cfg.num_patches();
    let mut params = DampingParams::init(p, cfg.embed_dim, spec.per_channel);
    let mut adam = AdamState::new(params.alpha.numel(), spec.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for iter in 0..spec.iterations {
        let mut g = Graph::new();
        let gm = GraphModel::insert(&mut g, ckpt, false);
        let damping = params.into_graph(&mut g);
        let (loss, _) = build_objective(
            &mut g, &gm, ckpt, image, target, spec, &damping, &stats, &mut rng, spec.noise_batch,
        )?;
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Optimization(format!(
                "non-finite loss {} at iteration {}",
                loss_val, iter
            )));
        }
        g.backward(loss)?;
        let grad = g
            .grad(damping.alpha)
            .ok_or_else(|| Error::Optimization("no gradient reached alpha".into()))?
            .to_vec();
        adam.step(&mut params.alpha.data, &grad)?;
    }

    // Final read-out with frozen evaluation noise so maps are deterministic.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ EVAL_NOISE_SALT);
    let mut g = Graph::new();
    let gm = GraphModel::insert(&mut g, ckpt, false);
    let damping = params.into_graph(&mut g);
    let (_, eval) = build_objective(
        &mut g, &gm, ckpt, image, target, spec, &damping, &stats, &mut eval_rng, 1,
    )?;

    let token_scores = if spec.raw_lambda_scores {
        lambda_token_scores(&eval.lambda, p, cfg.embed_dim, spec.per_channel)
    } else {
        capacity_token_scores(&eval.capacities, p, cfg.embed_dim)
    };
    let pixel_map = upsample_scores(&token_scores, cfg.image_size)?;
    Ok(AttributionMap {
        token_scores,
        pixel_map,
        method: method_name(spec.mode).to_string(),
        layers: (spec.s, spec.e),
        beta: spec.beta,
        iterations: spec.iterations,
        seed: spec.seed,
        loss_ce: eval.ce,
        loss_compression: eval.compression,
        eval_logits: eval.logits,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn method_name(mode: BottleneckMode) -> &'static str {
    match mode {
        BottleneckMode::Iba => "iba",
        BottleneckMode::IbaStar => "iba_star",
        BottleneckMode::Coiba => "coiba",
        BottleneckMode::CoibaPerLayerBeta => "coiba_per_layer_beta",
    }
}

/// Per-token capacity in bits, summed over channels and averaged over the
/// hooked layers; clamped at zero against rounding.
fn capacity_token_scores(caps: &[Tensor], p: usize, d: usize, ) -> Vec<Real> {
    let mut scores = vec![0.0; p];
    for cap in caps {
        for t in 0..p {
            let sum: Real = cap.data[t * d..(t + 1) * d].iter().sum();
            scores[t] += sum * NATS_TO_BITS;
        }
    }
    for s in &mut scores {
        *s = (*s / caps.len() as Real).max(0.0);
    }
    scores
}

fn lambda_token_scores(lambda: &Tensor, p: usize, d: usize, per_channel: bool) -> Vec<Real> {
    if per_channel {
        (0..p)
            .map(|t| lambda.data[t * d..(t + 1) * d].iter().sum::<Real>() / d as Real)
            .collect()
    } else {
        lambda.data.clone()
    }
}

/// Linear combination of per-layer single-layer maps.
pub fn attribute_iba_star(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    target: usize,
    spec: &BottleneckSpec,
    weights: Option<&[Real]>,
) -> Result<AttributionMap> {
    let start = Instant::now();
    spec.validate(ckpt.config.depth)?;
    let layer_count = spec.layer_count();
    let w: Vec<Real> = match weights {
        Some(w) => {
            if w.len() != layer_count {
                return Err(Error::Config(format!(
                    "{} weights for {} layers",
                    w.len(),
                    layer_count
                )));
            }
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::Config("weights must be non-negative".into()));
            }
            let sum: Real = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("weights sum to {}, expected 1", sum)));
            }
            w.to_vec()
        }
        None => vec![1.0 / layer_count as Real; layer_count],
    };
    let mut token_scores = vec![0.0; ckpt.config.num_patches()];
    let mut ce = 0.0;
    let mut comp = 0.0;
    let mut last_logits = Vec::new();
    for (i, l) in (spec.s..=spec.e).enumerate() {
        let mut layer_spec = spec.clone();
        layer_spec.mode = BottleneckMode::Iba;
        layer_spec.s = l;
        layer_spec.e = l;
        let m = attribute(ckpt, image, target, &layer_spec)?;
        for (acc, v) in token_scores.iter_mut().zip(&m.token_scores) {
            *acc += w[i] * v;
        }
        ce += w[i] * m.loss_ce;
        comp += w[i] * m.loss_compression;
        last_logits = m.eval_logits;
    }
    let pixel_map = upsample_scores(&token_scores, ckpt.config.image_size)?;
    Ok(AttributionMap {
        token_scores,
        pixel_map,
        method: "iba_star".to_string(),
        layers: (spec.s, spec.e),
        beta: spec.beta,
        iterations: spec.iterations,
        seed: spec.seed,
        loss_ce: ce,
        loss_compression: comp,
        eval_logits: last_logits,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Parallel map over images with per-index derived seeds; outputs are
/// independent of the worker count.
pub fn attribute_batch(
    ckpt: &ModelCheckpoint,
    inputs: &[(Tensor, usize)],
    spec: &BottleneckSpec,
    jobs: usize,
) -> Result<Vec<AttributionMap>> {
    let run = |(idx, (image, target)): (usize, &(Tensor, usize))| {
        let mut s = spec.clone();
        s.seed = derive_seed(spec.seed, idx as u64);
        attribute(ckpt, image, *target, &s)
    };
    if jobs <= 1 {
        inputs.iter().enumerate().map(run).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Optimization(format!("thread pool: {}", e)))?;
        pool.install(|| inputs.par_iter().enumerate().map(run).collect())
    }
}
