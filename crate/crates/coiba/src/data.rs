//! Synthetic dataset generation with ground-truth discriminative masks, and
//! binary PGM/PPM image I/O.

use std::io::Read;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// One labeled image. The label is determined solely by the pixels inside
/// `gt_mask` (by construction the background is class-independent noise).
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// `H x W x ch`, values in [0, 1].
    pub image: Tensor,
    pub label: usize,
    /// `H x W` binary mask over the discriminative cell.
    pub gt_mask: Tensor,
    pub seed: u64,
}

/// Per-index seed derivation: splitmix64 over the base seed and index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Oriented grating for one class, evaluated at glyph-local coordinates.
fn glyph_value(class: usize, classes: usize, x: usize, y: usize) -> Real {
    let theta = class as Real * std::f64::consts::PI / classes as Real;
    let t = x as Real * theta.cos() + y as Real * theta.sin();
    if t.rem_euclid(4.0) < 2.0 {
        0.95
    } else {
        0.05
    }
}

/// Textured-noise background plus one class-identifying oriented glyph in a
/// random patch cell; balanced labels; bitwise deterministic per seed.
pub fn generate_dataset(
    n: usize,
    classes: usize,
    image_size: usize,
    cell_size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n < classes {
        return Err(Error::Config(format!("need at least {} samples for {} classes", classes, n)));
    }
    if image_size % cell_size != 0 {
        return Err(Error::Config(format!(
            "image size {} not divisible by cell size {}",
            image_size, cell_size
        )));
    }
    let grid = image_size / cell_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let label = i % classes;
        let mut image = Tensor::zeros(vec![image_size, image_size, channels]);
        for v in &mut image.data {
            *v = rng.gen_range(0.3..0.7);
        }
        let ci = rng.gen_range(0..grid);
        let cj = rng.gen_range(0..grid);
        let mut gt_mask = Tensor::zeros(vec![image_size, image_size]);
        for y in 0..cell_size {
            for x in 0..cell_size {
                let row = ci * cell_size + y;
                let col = cj * cell_size + x;
                let v = glyph_value(label, classes, x, y);
                for c in 0..channels {
                    image.data[(row * image_size + col) * channels + c] = v;
                }
                gt_mask.data[row * image_size + col] = 1.0;
            }
        }
        out.push(SyntheticSample { image, label, gt_mask, seed: sample_seed });
    }
    Ok(out)
}

/// Patch-token index (row-major over the patch grid) of the discriminative
/// cell, or None when the mask is empty.
pub fn glyph_token_index(sample: &SyntheticSample, patch_size: usize) -> Option<usize> {
    let w = sample.gt_mask.shape[1];
    let grid = w / patch_size;
    sample.gt_mask.data.iter().position(|&v| v > 0.5).map(|i| {
        let (row, col) = (i / w, i % w);
        (row / patch_size) * grid + col / patch_size
    })
}

/// Zero out the masked pixels of a sample's image.
pub fn zero_masked(sample: &SyntheticSample) -> Tensor {
    let mut img = sample.image.clone();
    let (h, w, ch) = (img.shape[0], img.shape[1], img.shape[2]);
    for row in 0..h {
        for col in 0..w {
            if sample.gt_mask.data[row * w + col] > 0.5 {
                for c in 0..ch {
                    img.data[(row * w + col) * ch + c] = 0.0;
                }
            }
        }
    }
    img
}

// ---- netpbm I/O ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn quantize(v: Real, maxval: u32) -> u32 {
    ((v.clamp(0.0, 1.0) * maxval as Real).round() as u32).min(maxval)
}

/// Binary PGM (P5) from an `H x W` (or `H x W x 1`) tensor in [0, 1].
pub fn save_pgm(path: &Path, t: &Tensor, depth: BitDepth) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Dimension(format!("PGM needs a single-channel image, got {:?}", s))),
    };
    let maxval = depth.maxval();
    let mut buf = format!("P5\n{} {}\n{}\n", w, h, maxval).into_bytes();
    for &v in &t.data {
        let q = quantize(v, maxval);
        match depth {
            BitDepth::Eight => buf.push(q as u8),
            BitDepth::Sixteen => buf.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    atomic_write(path, &buf)
}

/// Binary PPM (P6) from an `H x W x 3` tensor in [0, 1].
pub fn save_ppm(path: &Path, t: &Tensor, depth: BitDepth) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Dimension(format!("PPM needs a 3-channel image, got {:?}", s))),
    };
    let maxval = depth.maxval();
    let mut buf = format!("P6\n{} {}\n{}\n", w, h, maxval).into_bytes();
    for &v in &t.data {
        let q = quantize(v, maxval);
        match depth {
            BitDepth::Eight => buf.push(q as u8),
            BitDepth::Sixteen => buf.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    atomic_write(path, &buf)
}

/// Load a binary PGM/PPM, dispatching on the header. Values are scaled to
/// [0, 1]; the result is `H x W x 1` for P5 and `H x W x 3` for P6.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut p = HeaderParser { bytes: &bytes, pos: 0 };
    let magic = p.magic()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::Parse { offset: 0, msg: "expected P5 or P6 magic".into() });
        }
    };
    let w = p.integer()? as usize;
    let h = p.integer()? as usize;
    let maxval = p.integer()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse { offset: p.pos, msg: format!("bad maxval {}", maxval) });
    }
    p.single_whitespace()?;
    let two_byte = maxval > 255;
    let n = h * w * channels;
    let need = n * if two_byte { 2 } else { 1 };
    if p.bytes.len() - p.pos < need {
        return Err(Error::Parse {
            offset: p.bytes.len(),
            msg: format!("truncated pixel data, need {} bytes", need),
        });
    }
    let raster = &p.bytes[p.pos..p.pos + need];
    let scale = 1.0 / maxval as Real;
    let data: Vec<Real> = if two_byte {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as Real * scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as Real * scale).collect()
    };
    Tensor::new(vec![h, w, channels], data)
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn magic(&mut self) -> Result<&'a [u8]> {
        if self.bytes.len() < 2 {
            return Err(Error::Parse { offset: 0, msg: "file too short for magic".into() });
        }
        self.pos = 2;
        Ok(&self.bytes[0..2])
    }

    fn skip_ws_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn integer(&mut self) -> Result<u32> {
        self.skip_ws_and_comments()?;
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Parse { offset: start, msg: "expected integer in header".into() });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse { offset: start, msg: "integer overflow in header".into() })
    }

    /// Exactly one whitespace byte separates the header from the raster.
    fn single_whitespace(&mut self) -> Result<()> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: "missing whitespace before raster".into(),
            });
        }
        self.pos += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(16, 4, 32, 8, 1, 5).unwrap();
        let b = generate_dataset(16, 4, 32, 8, 1, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.label, y.label);
            assert_eq!(x.gt_mask.data, y.gt_mask.data);
        }
    }

    #[test]
    fn dataset_labels_balanced() {
        let ds = generate_dataset(18, 4, 32, 8, 1, 1).unwrap();
        let mut counts = [0usize; 4];
        for s in &ds {
            counts[s.label] += 1;
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn dataset_mask_nonempty_and_binary() {
        let ds = generate_dataset(8, 4, 32, 8, 1, 2).unwrap();
        for s in &ds {
            let area: Real = s.gt_mask.data.iter().sum();
            assert_eq!(area, 64.0);
            assert!(s.gt_mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn pgm_round_trip_quantization_bound() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.1, 0.5, 0.25, 0.99, 1.0]).unwrap();
        for depth in [BitDepth::Eight, BitDepth::Sixteen] {
            save_pgm(&path, &t, depth).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.shape, vec![2, 3, 1]);
            let bound = 0.5 / depth.maxval() as Real + 1e-12;
            for (a, b) in t.data.iter().zip(&back.data) {
                assert!((a - b).abs() <= bound, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn ppm_dispatch_by_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let t = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        save_ppm(&path, &t, BitDepth::Eight).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape, vec![1, 2, 3]);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let t = Tensor::full(vec![4, 4], 0.5);
        save_pgm(&path, &t, BitDepth::Sixteen).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn sixteen_bit_round_trip_is_lossless_on_grid_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let vals: Vec<Real> = (0..8).map(|i| i as Real * 8191.0 / 65535.0).collect();
        let t = Tensor::new(vec![2, 4], vals.clone()).unwrap();
        save_pgm(&path, &t, BitDepth::Sixteen).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in vals.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
