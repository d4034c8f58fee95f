//! Faithfulness and similarity metrics: insertion/deletion curves, ROAD with
//! noisy-linear imputation, sensitivity-n, SSIM, linear CKA, the effective
//! heat ratio, confidence-binned reporting, and the sanity-check harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, normalize01, AttributionMap};
use crate::bottleneck::BottleneckSpec;
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{predict_prob, randomize_parameters, ModelCheckpoint, RandomizeMode};
use crate::Real;

pub const DEFAULT_STEP_FRACTION: Real = 0.035;
pub const DEFAULT_SIGMA_ROAD: Real = 0.01;
pub const ROAD_FRACTIONS: [Real; 4] = [0.2, 0.4, 0.6, 0.8];

/// Model confidence as a function of the revealed/removed pixel fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCurve {
    pub fractions: Vec<Real>,
    pub scores: Vec<Real>,
    pub auc: Real,
}

pub fn trapezoid_auc(fractions: &[Real], scores: &[Real]) -> Real {
    let mut area = 0.0;
    for i in 1..fractions.len() {
        area += 0.5 * (scores[i] + scores[i - 1]) * (fractions[i] - fractions[i - 1]);
    }
    area
}

impl EvalCurve {
    pub fn new(fractions: Vec<Real>, scores: Vec<Real>) -> Self {
        let auc = trapezoid_auc(&fractions, &scores);
        EvalCurve { fractions, scores, auc }
    }
}

/// Pixel indices sorted by map value descending; ties broken by row-major
/// pixel order so curves are deterministic.
pub fn rank_desc(map: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.data.len()).collect();
    idx.sort_by(|&a, &b| {
        map.data[b].partial_cmp(&map.data[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

fn fraction_grid(step: Real) -> Result<Vec<Real>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("step fraction {} outside (0, 1]", step)));
    }
    let mut f = Vec::new();
    let mut x = 0.0;
    while x < 1.0 - 1e-12 {
        f.push(x);
        x += step;
    }
    f.push(1.0);
    Ok(f)
}

/// Blur kernel and sigma for the insertion baseline, scaled linearly with
/// the image side (11 px / sigma 10 at side 32, 51 px / sigma 50 at 224).
pub fn blur_params(side: usize) -> (usize, Real) {
    let t = (side as Real - 32.0) / 192.0;
    let k = (11.0 + 40.0 * t).round().max(3.0) as usize;
    let k = if k % 2 == 0 { k + 1 } else { k };
    let sigma = (10.0 + 40.0 * t).max(0.5);
    (k, sigma)
}

/// Separable Gaussian blur with clamp-to-edge boundary handling.
pub fn gaussian_blur(image: &Tensor, kernel: usize, sigma: Real) -> Result<Tensor> {
    let (h, w, ch) = match image.shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Dimension(format!("expected HxW[xC] image, got {:?}", s))),
    };
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::Config(format!("blur kernel {} must be odd", kernel)));
    }
    let half = (kernel / 2) as isize;
    let mut taps = Vec::with_capacity(kernel);
    for i in -half..=half {
        taps.push((-0.5 * (i as Real / sigma).powi(2)).exp());
    }
    let norm: Real = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }
    let at = |r: isize, c: isize, k: usize, buf: &[Real]| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        buf[(r * w + c) * ch + k]
    };
    let mut pass1 = vec![0.0; image.data.len()];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for k in 0..ch {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    acc += t * at(r, c + i as isize - half, k, &image.data);
                }
                pass1[((r as usize) * w + c as usize) * ch + k] = acc;
            }
        }
    }
    let mut pass2 = vec![0.0; image.data.len()];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for k in 0..ch {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    acc += t * at(r + i as isize - half, c, k, &pass1);
                }
                pass2[((r as usize) * w + c as usize) * ch + k] = acc;
            }
        }
    }
    Ok(Tensor { shape: image.shape.clone(), data: pass2 })
}

fn check_map_shape(image: &Tensor, map: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w, ch) = match image.shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Dimension(format!("expected HxW[xC] image, got {:?}", s))),
    };
    if map.shape != [h, w] {
        return Err(Error::Dimension(format!(
            "map shape {:?} does not match image {}x{}",
            map.shape, h, w
        )));
    }
    Ok((h, w, ch))
}

fn set_pixel(image: &mut Tensor, pixel: usize, ch: usize, src: Option<&Tensor>) {
    for k in 0..ch {
        image.data[pixel * ch + k] = match src {
            Some(s) => s.data[pixel * ch + k],
            None => 0.0,
        };
    }
}

/// Insertion and deletion curves; score is the softmax probability of
/// `target`. Deletion removes top-ranked pixels to zero; insertion reveals
/// them from a Gaussian-blurred baseline.
pub fn insertion_deletion(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    map: &Tensor,
    target: usize,
    step_fraction: Real,
) -> Result<(EvalCurve, EvalCurve)> {
    let (h, w, ch) = check_map_shape(image, map)?;
    let fractions = fraction_grid(step_fraction)?;
    let order = rank_desc(map);
    let n = h * w;
    let (kernel, sigma) = blur_params(h.max(w));
    let baseline = gaussian_blur(image, kernel, sigma)?;

    let mut del_img = image.clone();
    let mut ins_img = baseline.clone();
    let mut del_scores = Vec::with_capacity(fractions.len());
    let mut ins_scores = Vec::with_capacity(fractions.len());
    let mut cursor = 0usize;
    for &f in &fractions {
        let k = ((f * n as Real).round() as usize).min(n);
        while cursor < k {
            let px = order[cursor];
            set_pixel(&mut del_img, px, ch, None);
            set_pixel(&mut ins_img, px, ch, Some(image));
            cursor += 1;
        }
        del_scores.push(predict_prob(ckpt, &del_img, target)?);
        ins_scores.push(predict_prob(ckpt, &ins_img, target)?);
    }
    Ok((EvalCurve::new(fractions.clone(), ins_scores), EvalCurve::new(fractions, del_scores)))
}

/// Harmonic interpolation of the masked pixels (uniform 8-neighborhood,
/// Gauss-Seidel) plus zero-mean Gaussian noise of scale `sigma_road`.
pub fn harmonic_impute(
    image: &Tensor,
    masked: &[bool],
    sigma_road: Real,
    seed: u64,
) -> Result<Tensor> {
    let (h, w, ch) = match image.shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Dimension(format!("expected HxW[xC] image, got {:?}", s))),
    };
    let n = h * w;
    if masked.len() != n {
        return Err(Error::Dimension("mask length does not match image".into()));
    }
    let unmasked = masked.iter().filter(|&&m| !m).count();
    if unmasked == 0 {
        return Err(Error::Imputation("every pixel is masked; no boundary to interpolate".into()));
    }
    let mut out = image.clone();
    let mut init = vec![0.0; ch];
    for (p, &m) in masked.iter().enumerate() {
        if !m {
            for k in 0..ch {
                init[k] += image.data[p * ch + k];
            }
        }
    }
    for v in &mut init {
        *v /= unmasked as Real;
    }
    let targets: Vec<usize> = (0..n).filter(|&p| masked[p]).collect();
    for &p in &targets {
        for k in 0..ch {
            out.data[p * ch + k] = init[k];
        }
    }
    let neighbors = |p: usize| {
        let (r, c) = (p / w, p % w);
        let mut ns = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                    ns.push(nr as usize * w + nc as usize);
                }
            }
        }
        ns
    };
    let nbrs: Vec<Vec<usize>> = targets.iter().map(|&p| neighbors(p)).collect();
    for _ in 0..20_000 {
        let mut max_delta: Real = 0.0;
        for (ti, &p) in targets.iter().enumerate() {
            for k in 0..ch {
                let mut acc = 0.0;
                for &q in &nbrs[ti] {
                    acc += out.data[q * ch + k];
                }
                let new = acc / nbrs[ti].len() as Real;
                max_delta = max_delta.max((new - out.data[p * ch + k]).abs());
                out.data[p * ch + k] = new;
            }
        }
        if max_delta < 1e-10 {
            break;
        }
    }
    if sigma_road > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &p in &targets {
            for k in 0..ch {
                let g: Real = rng.sample(StandardNormal);
                out.data[p * ch + k] += sigma_road * g;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadOrder {
    Morf,
    Lerf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadScore {
    pub fractions: Vec<Real>,
    pub scores: Vec<Real>,
    /// Mean target confidence over the fractions.
    pub mean: Real,
}

/// ROAD: remove the given fractions of pixels (most or least relevant
/// first), impute them, and report the mean target confidence.
pub fn road(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    map: &Tensor,
    target: usize,
    fractions: &[Real],
    order: RoadOrder,
    sigma_road: Real,
    seed: u64,
) -> Result<RoadScore> {
    let (h, w, _) = check_map_shape(image, map)?;
    let n = h * w;
    let ranked = rank_desc(map);
    let mut scores = Vec::with_capacity(fractions.len());
    for (fi, &f) in fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("ROAD fraction {} outside [0, 1]", f)));
        }
        let k = ((f * n as Real).round() as usize).min(n);
        let mut masked = vec![false; n];
        match order {
            RoadOrder::Morf => {
                for &p in &ranked[..k] {
                    masked[p] = true;
                }
            }
            RoadOrder::Lerf => {
                for &p in &ranked[n - k..] {
                    masked[p] = true;
                }
            }
        }
        let imputed = harmonic_impute(image, &masked, sigma_road, derive_seed(seed, fi as u64))?;
        scores.push(predict_prob(ckpt, &imputed, target)?);
    }
    let mean = scores.iter().sum::<Real>() / scores.len().max(1) as Real;
    Ok(RoadScore { fractions: fractions.to_vec(), scores, mean })
}

/// Sample Pearson correlation with (n-1) normalization; `None` when either
/// series has zero variance.
pub fn pearson(x: &[Real], y: &[Real]) -> Option<Real> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<Real>() / n as Real;
    let my = y.iter().sum::<Real>() / n as Real;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// For each subset size: correlation between attribution mass of a random
/// pixel subset and the confidence drop when that subset is zeroed.
pub fn sensitivity_n(
    ckpt: &ModelCheckpoint,
    image: &Tensor,
    map: &Tensor,
    target: usize,
    n_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<(usize, Option<Real>)>> {
    let (h, w, ch) = check_map_shape(image, map)?;
    if trials < 2 {
        return Err(Error::Contract(format!("sensitivity-n needs >= 2 trials, got {}", trials)));
    }
    let n_pixels = h * w;
    let base = predict_prob(ckpt, image, target)?;
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        if n == 0 || n > n_pixels {
            return Err(Error::Config(format!("subset size {} outside [1, {}]", n, n_pixels)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, n as u64));
        let mut sums = Vec::with_capacity(trials);
        let mut drops = Vec::with_capacity(trials);
        for _ in 0..trials {
            let subset = rand::seq::index::sample(&mut rng, n_pixels, n);
            let mut work = image.clone();
            let mut mass = 0.0;
            for p in subset.iter() {
                mass += map.data[p];
                set_pixel(&mut work, p, ch, None);
            }
            sums.push(mass);
            drops.push(base - predict_prob(ckpt, &work, target)?);
        }
        out.push((n, pearson(&sums, &drops)));
    }
    Ok(out)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: Real = 1.5;
const SSIM_C1: Real = 0.01 * 0.01;
const SSIM_C2: Real = 0.03 * 0.03;

/// Standard SSIM over valid (fully interior) 11x11 Gaussian windows for
/// [0, 1]-valued single-channel images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Real> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!("SSIM shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    let (h, w) = match a.shape.as_slice() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Dimension(format!("SSIM expects HxW maps, got {:?}", s))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "image {}x{} smaller than the {0}x{0} SSIM window",
            h, SSIM_WINDOW
        )));
    }
    let half = SSIM_WINDOW / 2;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as Real - half as Real;
        *t = (-0.5 * (d / SSIM_SIGMA).powi(2)).exp();
    }
    let mut win = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let mut norm = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            win[i][j] = taps[i] * taps[j];
            norm += win[i][j];
        }
    }
    for row in &mut win {
        for v in row {
            *v /= norm;
        }
    }
    let mut total = 0.0;
    let mut windows = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let p = (cy + i - half) * w + (cx + j - half);
                    let (va, vb) = (a.data[p], b.data[p]);
                    let wt = win[i][j];
                    mx += wt * va;
                    my += wt * vb;
                    xx += wt * va * va;
                    yy += wt * vb * vb;
                    xy += wt * va * vb;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as Real)
}

/// Linear CKA between two row-major `n x p` / `n x q` matrices, columns
/// centered internally; `None` when either input has zero norm.
pub fn cka_linear(x: &Tensor, y: &Tensor) -> Result<Option<Real>> {
    let (n, p) = (x.rows(), x.cols());
    let q = y.cols();
    if y.rows() != n || n < 2 {
        return Err(Error::Dimension(format!(
            "CKA needs matching rows >= 2, got {} and {}",
            n,
            y.rows()
        )));
    }
    let center = |t: &Tensor, cols: usize| {
        let mut out = t.data.clone();
        for j in 0..cols {
            let mean: Real = (0..n).map(|i| t.data[i * cols + j]).sum::<Real>() / n as Real;
            for i in 0..n {
                out[i * cols + j] -= mean;
            }
        }
        out
    };
    let xc = center(x, p);
    let yc = center(y, q);
    // ||Yt X||_F^2 via the p x q cross-covariance.
    let mut cross = 0.0;
    for a in 0..p {
        for b in 0..q {
            let mut s = 0.0;
            for i in 0..n {
                s += xc[i * p + a] * yc[i * q + b];
            }
            cross += s * s;
        }
    }
    let self_norm = |m: &[Real], cols: usize| {
        let mut acc = 0.0;
        for a in 0..cols {
            for b in 0..cols {
                let mut s = 0.0;
                for i in 0..n {
                    s += m[i * cols + a] * m[i * cols + b];
                }
                acc += s * s;
            }
        }
        acc.sqrt()
    };
    let nx = self_norm(&xc, p);
    let ny = self_norm(&yc, q);
    if nx == 0.0 || ny == 0.0 {
        return Ok(None);
    }
    Ok(Some(cross / (nx * ny)))
}

/// In-mask fraction of the top-q pixels over the quantile grid 1%..100%.
pub fn ehr_curve(map: &Tensor, mask: &Tensor) -> Result<(Vec<Real>, Vec<Real>)> {
    if map.shape != mask.shape {
        return Err(Error::Dimension(format!("EHR shapes {:?} vs {:?}", map.shape, mask.shape)));
    }
    if !mask.data.iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("empty ground-truth mask".into()));
    }
    let n = map.data.len();
    let ranked = rank_desc(map);
    let mut in_mask_prefix = vec![0usize; n + 1];
    for (i, &p) in ranked.iter().enumerate() {
        in_mask_prefix[i + 1] = in_mask_prefix[i] + (mask.data[p] != 0.0) as usize;
    }
    let mut fracs = Vec::with_capacity(100);
    let mut ratios = Vec::with_capacity(100);
    for qp in 1..=100usize {
        let q = qp as Real / 100.0;
        let k = ((q * n as Real).round() as usize).clamp(1, n);
        fracs.push(q);
        ratios.push(in_mask_prefix[k] as Real / k as Real);
    }
    Ok((fracs, ratios))
}

/// Effective heat ratio: trapezoidal AUC of [`ehr_curve`], normalized by the
/// quantile span so the result stays in [0, 1].
pub fn ehr(map: &Tensor, mask: &Tensor) -> Result<Real> {
    let (fracs, ratios) = ehr_curve(map, mask)?;
    Ok(trapezoid_auc(&fracs, &ratios) / (fracs[fracs.len() - 1] - fracs[0]))
}

/// Map similarity under parameter randomization. `None` entries compare
/// against the untouched model and must give SSIM exactly 1.
pub fn sanity_check(
    ckpt: &ModelCheckpoint,
    inputs: &[(Tensor, usize)],
    spec: &BottleneckSpec,
    mode: RandomizeMode,
    layer_indices: &[Option<usize>],
    seed: u64,
) -> Result<Vec<(Option<usize>, Real)>> {
    let originals: Vec<AttributionMap> = inputs
        .iter()
        .map(|(img, t)| attribute(ckpt, img, *t, spec))
        .collect::<Result<_>>()?;
    let mut table = Vec::with_capacity(layer_indices.len());
    for &li in layer_indices {
        let model = match li {
            Some(idx) => randomize_parameters(ckpt, mode, idx, seed)?,
            None => ckpt.clone(),
        };
        let mut acc = 0.0;
        for ((img, t), orig) in inputs.iter().zip(&originals) {
            let m = attribute(&model, img, *t, spec)?;
            acc += ssim(&normalize01(&orig.pixel_map), &normalize01(&m.pixel_map))?;
        }
        table.push((li, acc / inputs.len() as Real));
    }
    Ok(table)
}

/// One evaluated sample; `delta_insdel = ins - del`, `delta_road = lerf - morf`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub confidence: Real,
    pub ins_auc: Real,
    pub del_auc: Real,
    pub road_morf: Real,
    pub road_lerf: Real,
    pub ehr: Real,
}

impl SampleMetrics {
    pub fn delta_insdel(&self) -> Real {
        self.ins_auc - self.del_auc
    }

    pub fn delta_road(&self) -> Real {
        self.road_lerf - self.road_morf
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinAggregate {
    pub lo: Real,
    pub hi: Real,
    pub count: usize,
    pub mean_delta_insdel: Option<Real>,
    pub mean_delta_road: Option<Real>,
}

/// Metric aggregates over confidence bins of width 0.2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceBinReport {
    pub bins: Vec<BinAggregate>,
}

pub fn confidence_binned_report(samples: &[SampleMetrics]) -> Result<ConfidenceBinReport> {
    const WIDTH: Real = 0.2;
    const NBINS: usize = 5;
    let mut counts = [0usize; NBINS];
    let mut insdel = [0.0; NBINS];
    let mut roadd = [0.0; NBINS];
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(Error::Contract(format!(
                "confidence {} outside [0, 1] for sample {}",
                s.confidence, s.id
            )));
        }
        let b = ((s.confidence / WIDTH) as usize).min(NBINS - 1);
        counts[b] += 1;
        insdel[b] += s.delta_insdel();
        roadd[b] += s.delta_road();
    }
    let bins = (0..NBINS)
        .map(|b| BinAggregate {
            lo: b as Real * WIDTH,
            hi: if b == NBINS - 1 { 1.0 } else { (b + 1) as Real * WIDTH },
            count: counts[b],
            mean_delta_insdel: (counts[b] > 0).then(|| insdel[b] / counts[b] as Real),
            mean_delta_road: (counts[b] > 0).then(|| roadd[b] / counts[b] as Real),
        })
        .collect();
    Ok(ConfidenceBinReport { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{init_model, ModelConfig};

    fn model_32() -> ModelCheckpoint {
        let cfg = ModelConfig { image_size: 32, patch_size: 8, depth: 2, ..Default::default() };
        init_model(&cfg).unwrap()
    }

    /// Zeroing the patch embedding makes the logits input-independent.
    fn constant_model() -> ModelCheckpoint {
        let mut ckpt = model_32();
        let w = ckpt.tensors.get_mut("patch_embed.weight").unwrap();
        w.data.iter_mut().for_each(|v| *v = 0.0);
        ckpt
    }

    fn ramp_image(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| (i % 97) as Real / 96.0).collect();
        Tensor { shape: vec![h, w, 1], data }
    }

    fn ramp_map(h: usize, w: usize, seed: u64) -> Tensor {
        let data = (0..h * w)
            .map(|i| ((crate::data::derive_seed(seed, i as u64) % 1000) as Real) / 1000.0)
            .collect();
        Tensor { shape: vec![h, w], data }
    }

    #[test]
    fn trapezoid_flat_curve() {
        assert!((trapezoid_auc(&[0.0, 0.5, 1.0], &[0.3, 0.3, 0.3]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fraction_grid_contract() {
        let g = fraction_grid(0.035).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(fraction_grid(0.0).is_err());
        assert!(fraction_grid(1.5).is_err());
    }

    #[test]
    fn rank_desc_ties_row_major() {
        let map = Tensor { shape: vec![2, 2], data: vec![1.0, 3.0, 1.0, 3.0] };
        assert_eq!(rank_desc(&map), vec![1, 3, 0, 2]);
    }

    #[test]
    fn blur_params_anchors() {
        assert_eq!(blur_params(32), (11, 10.0));
        let (k, s) = blur_params(224);
        assert_eq!(k, 51);
        assert!((s - 50.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Tensor::full(vec![16, 16, 1], 0.42);
        let out = gaussian_blur(&img, 11, 10.0).unwrap();
        for v in &out.data {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn insdel_constant_model_auc_is_confidence() {
        let ckpt = constant_model();
        let img = ramp_image(32, 32);
        let c = predict_prob(&ckpt, &img, 0).unwrap();
        let (ins, del) = insertion_deletion(&ckpt, &img, &ramp_map(32, 32, 7), 0, 0.1).unwrap();
        assert!((ins.auc - c).abs() < 1e-9, "ins {} vs {}", ins.auc, c);
        assert!((del.auc - c).abs() < 1e-9, "del {} vs {}", del.auc, c);
    }

    #[test]
    fn insdel_endpoint_contract() {
        let ckpt = model_32();
        let img = ramp_image(32, 32);
        let map = ramp_map(32, 32, 3);
        let (ins, del) = insertion_deletion(&ckpt, &img, &map, 1, 0.25).unwrap();
        let zeros = Tensor::zeros(vec![32, 32, 1]);
        let (k, s) = blur_params(32);
        let blurred = gaussian_blur(&img, k, s).unwrap();
        assert_eq!(*del.scores.last().unwrap(), predict_prob(&ckpt, &zeros, 1).unwrap());
        assert_eq!(del.scores[0], predict_prob(&ckpt, &img, 1).unwrap());
        assert_eq!(*ins.scores.last().unwrap(), predict_prob(&ckpt, &img, 1).unwrap());
        assert_eq!(ins.scores[0], predict_prob(&ckpt, &blurred, 1).unwrap());
    }

    #[test]
    fn insdel_rank_invariant() {
        let ckpt = model_32();
        let img = ramp_image(32, 32);
        let map = ramp_map(32, 32, 5);
        let scaled = Tensor {
            shape: map.shape.clone(),
            data: map.data.iter().map(|v| 2.0 * v + 3.0).collect(),
        };
        let (i1, d1) = insertion_deletion(&ckpt, &img, &map, 0, 0.2).unwrap();
        let (i2, d2) = insertion_deletion(&ckpt, &img, &scaled, 0, 0.2).unwrap();
        assert_eq!(i1.scores, i2.scores);
        assert_eq!(d1.scores, d2.scores);
    }

    #[test]
    fn impute_constant_image() {
        let img = Tensor::full(vec![8, 8, 1], 0.6);
        let mut mask = vec![false; 64];
        for p in [9, 10, 27, 36] {
            mask[p] = true;
        }
        let out = harmonic_impute(&img, &mask, 0.0, 0).unwrap();
        for v in &out.data {
            assert!((v - 0.6).abs() < 1e-9);
        }
    }

    #[test]
    fn impute_single_pixel_equals_neighbors() {
        let mut img = Tensor::full(vec![5, 5, 1], 0.3);
        img.data[12] = 0.9;
        let mut mask = vec![false; 25];
        mask[12] = true;
        let out = harmonic_impute(&img, &mask, 0.0, 0).unwrap();
        assert!((out.data[12] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn impute_stays_within_boundary_range() {
        let img = ramp_image(8, 8);
        let mut mask = vec![false; 64];
        for p in 18..22 {
            mask[p] = true;
        }
        let out = harmonic_impute(&img, &mask, 0.0, 0).unwrap();
        let lo = img.data.iter().cloned().fold(Real::INFINITY, Real::min);
        let hi = img.data.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        for p in 18..22 {
            assert!(out.data[p] >= lo - 1e-9 && out.data[p] <= hi + 1e-9);
        }
    }

    #[test]
    fn impute_fully_masked_is_singular() {
        let img = Tensor::full(vec![4, 4, 1], 0.1);
        assert!(matches!(
            harmonic_impute(&img, &vec![true; 16], 0.0, 0),
            Err(Error::Imputation(_))
        ));
    }

    #[test]
    fn road_rank_invariant_and_deterministic() {
        let ckpt = model_32();
        let img = ramp_image(32, 32);
        let map = ramp_map(32, 32, 11);
        let scaled = Tensor {
            shape: map.shape.clone(),
            data: map.data.iter().map(|v| 2.0 * v + 3.0).collect(),
        };
        let a = road(&ckpt, &img, &map, 0, &[0.2, 0.4], RoadOrder::Morf, 0.01, 9).unwrap();
        let b = road(&ckpt, &img, &scaled, 0, &[0.2, 0.4], RoadOrder::Morf, 0.01, 9).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn pearson_contracts() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<Real> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[5.0; 4]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    #[test]
    fn sensitivity_constant_map_is_missing() {
        let ckpt = model_32();
        let img = ramp_image(32, 32);
        let map = Tensor::full(vec![32, 32], 0.5);
        let out = sensitivity_n(&ckpt, &img, &map, 0, &[4], 5, 1).unwrap();
        assert_eq!(out[0], (4, None));
    }

    #[test]
    fn sensitivity_rejects_few_trials() {
        let ckpt = model_32();
        let img = ramp_image(32, 32);
        let map = ramp_map(32, 32, 2);
        assert!(matches!(
            sensitivity_n(&ckpt, &img, &map, 0, &[4], 1, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = ramp_image(16, 16);
        let a2 = Tensor { shape: vec![16, 16], data: a.data.clone() };
        assert_eq!(ssim(&a2, &a2).unwrap(), 1.0);

        let b = ramp_map(16, 16, 4);
        let ab = ssim(&a2, &b).unwrap();
        let ba = ssim(&b, &a2).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        let mut half = Tensor::zeros(vec![16, 16]);
        for r in 0..8 {
            for c in 0..16 {
                half.data[r * 16 + c] = 1.0;
            }
        }
        let inv = Tensor {
            shape: half.shape.clone(),
            data: half.data.iter().map(|v| 1.0 - v).collect(),
        };
        assert!(ssim(&half, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_shape_errors() {
        let a = Tensor::zeros(vec![16, 16]);
        let b = Tensor::zeros(vec![16, 8]);
        assert!(ssim(&a, &b).is_err());
        let tiny = Tensor::zeros(vec![4, 4]);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn cka_identity_rotation_noise() {
        let n = 100;
        let x = Tensor {
            shape: vec![n, 2],
            data: (0..2 * n).map(|i| ((i * 37 + 11) % 101) as Real / 101.0).collect(),
        };
        assert!((cka_linear(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-12);

        let (c, s) = (0.6_f64.cos(), 0.6_f64.sin());
        let mut rot = Tensor::zeros(vec![n, 2]);
        for i in 0..n {
            let (a, b) = (x.data[i * 2], x.data[i * 2 + 1]);
            rot.data[i * 2] = c * a - s * b;
            rot.data[i * 2 + 1] = s * a + c * b;
        }
        assert!((cka_linear(&x, &rot).unwrap().unwrap() - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gauss = |rng: &mut ChaCha8Rng, k: usize| Tensor {
            shape: vec![n, k],
            data: (0..n * k).map(|_| rng.sample::<Real, _>(StandardNormal)).collect(),
        };
        use rand::Rng;
        let a = gauss(&mut rng, 8);
        let b = gauss(&mut rng, 8);
        assert!(cka_linear(&a, &b).unwrap().unwrap() < 0.3);

        let z = Tensor::zeros(vec![n, 3]);
        assert_eq!(cka_linear(&x, &z).unwrap(), None);
    }

    #[test]
    fn ehr_contracts() {
        // Map concentrated inside the mask scores higher than a spread map.
        let mut mask = Tensor::zeros(vec![16, 16]);
        for r in 0..4 {
            for c in 0..4 {
                mask.data[r * 16 + c] = 1.0;
            }
        }
        let mut inside = Tensor::zeros(vec![16, 16]);
        for r in 0..4 {
            for c in 0..4 {
                inside.data[r * 16 + c] = 1.0 + (r * 4 + c) as Real;
            }
        }
        let (fracs, ratios) = ehr_curve(&inside, &mask).unwrap();
        let mask_frac = 16.0 / 256.0;
        for (f, r) in fracs.iter().zip(&ratios) {
            if *f <= mask_frac {
                assert_eq!(*r, 1.0, "quantile {} ratio {}", f, r);
            }
        }
        let e_inside = ehr(&inside, &mask).unwrap();
        let e_uniform_same_mask = ehr(&Tensor::full(vec![16, 16], 0.7), &mask).unwrap();
        assert!(e_inside > e_uniform_same_mask, "{} vs {}", e_inside, e_uniform_same_mask);

        // Checkerboard mask, uniform map: in-mask fraction about 1/2 at
        // every quantile under row-major tie-breaking.
        let mut checker = Tensor::zeros(vec![16, 16]);
        for p in 0..256 {
            if (p / 16 + p % 16) % 2 == 0 {
                checker.data[p] = 1.0;
            }
        }
        let uniform = Tensor::full(vec![16, 16], 0.7);
        let e = ehr(&uniform, &checker).unwrap();
        assert!((e - 0.5).abs() < 0.05, "uniform EHR {}", e);

        assert!(matches!(
            ehr(&uniform, &Tensor::zeros(vec![16, 16])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ehr_rank_invariant() {
        let map = ramp_map(16, 16, 6);
        let scaled = Tensor {
            shape: map.shape.clone(),
            data: map.data.iter().map(|v| 2.0 * v + 3.0).collect(),
        };
        let mut mask = Tensor::zeros(vec![16, 16]);
        mask.data[0] = 1.0;
        mask.data[100] = 1.0;
        assert_eq!(ehr(&map, &mask).unwrap(), ehr(&scaled, &mask).unwrap());
    }

    #[test]
    fn binned_report_partition() {
        let mk = |id, conf, ins, del| SampleMetrics {
            id,
            confidence: conf,
            ins_auc: ins,
            del_auc: del,
            road_morf: 0.0,
            road_lerf: 0.0,
            ehr: 0.0,
        };
        let samples = vec![mk(0, 0.1, 0.0, 0.0), mk(1, 0.9, 1.0, 0.0)];
        let rep = confidence_binned_report(&samples).unwrap();
        assert_eq!(rep.bins.len(), 5);
        assert_eq!(rep.bins[0].count, 1);
        assert_eq!(rep.bins[4].count, 1);
        assert_eq!(rep.bins[0].mean_delta_insdel, Some(0.0));
        assert_eq!(rep.bins[4].mean_delta_insdel, Some(1.0));
        assert_eq!(rep.bins[1].count + rep.bins[2].count + rep.bins[3].count, 0);
        assert_eq!(rep.bins[1].mean_delta_insdel, None);
        let total: usize = rep.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, samples.len());

        let bad = vec![mk(0, 1.2, 0.0, 0.0)];
        assert!(matches!(confidence_binned_report(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn confidence_one_falls_in_last_bin() {
        let s = SampleMetrics {
            id: 0,
            confidence: 1.0,
            ins_auc: 0.5,
            del_auc: 0.25,
            road_morf: 0.0,
            road_lerf: 0.0,
            ehr: 0.0,
        };
        let rep = confidence_binned_report(std::slice::from_ref(&s)).unwrap();
        assert_eq!(rep.bins[4].count, 1);
        assert_eq!(rep.bins[4].mean_delta_insdel, Some(0.25));
    }
}
