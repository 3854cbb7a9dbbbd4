//! Synthetic anomaly generation: binarized Perlin noise restricted to the
//! image foreground, blended with a texture at random opacity.
//!
//! Everything here is a pure function of its inputs and a seed. Images are
//! unnormalized 3 x H x W tensors in [0,1]; masks are H x W tensors of 0/1.

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::{dims2, dims3, from_vec, slice_of, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Lattice-gradient noise field. `data` is min-max normalized to [-1,1];
/// the raw field is zero at every lattice corner of the Perlin grid.
pub struct NoiseField {
    pub data: Tensor,
    pub freq_x: usize,
    pub freq_y: usize,
    pub seed: u64,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic Perlin noise before normalization. Frequencies that do not
/// divide the requested size are handled by evaluating a padded field and
/// cropping, so cell geometry stays square-ish.
pub fn perlin_raw(h: usize, w: usize, freq_x: usize, freq_y: usize, seed: u64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "perlin dimensions must be positive, got {h}x{w}"
        )));
    }
    if freq_x == 0 || freq_y == 0 {
        return Err(Error::InvalidArgument(
            "perlin frequencies must be >= 1".into(),
        ));
    }
    let cell_w = w.div_ceil(freq_x);
    let cell_h = h.div_ceil(freq_y);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let gw = freq_x + 1;
    let gh = freq_y + 1;
    let grads: Vec<(f64, f64)> = (0..gw * gh)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (angle.cos(), angle.sin())
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y as f64 / cell_h as f64;
        let j0 = gy.floor() as usize;
        let ty = gy - j0 as f64;
        let v = fade(ty);
        for x in 0..w {
            let gx = x as f64 / cell_w as f64;
            let i0 = gx.floor() as usize;
            let tx = gx - i0 as f64;
            let u = fade(tx);
            let g00 = grads[j0 * gw + i0];
            let g10 = grads[j0 * gw + i0 + 1];
            let g01 = grads[(j0 + 1) * gw + i0];
            let g11 = grads[(j0 + 1) * gw + i0 + 1];
            let d00 = g00.0 * tx + g00.1 * ty;
            let d10 = g10.0 * (tx - 1.0) + g10.1 * ty;
            let d01 = g01.0 * tx + g01.1 * (ty - 1.0);
            let d11 = g11.0 * (tx - 1.0) + g11.1 * (ty - 1.0);
            let top = d00 + u * (d10 - d00);
            let bot = d01 + u * (d11 - d01);
            out[y * w + x] = top + v * (bot - top);
        }
    }
    Ok(from_vec(&[h, w], out))
}

/// Perlin noise min-max normalized to [-1, 1]. A constant raw field (which
/// only happens for degenerate sizes) normalizes to all zeros.
pub fn perlin_noise(h: usize, w: usize, freq_x: usize, freq_y: usize, seed: u64) -> Result<NoiseField> {
    let raw = perlin_raw(h, w, freq_x, freq_y, seed)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in raw.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data = if hi - lo > 0.0 {
        raw.mapv(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
    } else {
        raw.mapv(|_| 0.0)
    };
    Ok(NoiseField {
        data,
        freq_x,
        freq_y,
        seed,
    })
}

/// Binary mask of pixels strictly above the threshold.
pub fn binarize_noise(noise: &NoiseField, threshold: f64) -> Tensor {
    noise.data.mapv(|v| if v > threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForegroundMethod {
    /// External graph-cut plugin; not produced by [`extract_foreground`].
    Graphcut,
    BackgroundStat,
    Full,
    Precomputed,
}

pub struct ForegroundMask {
    pub data: Tensor,
    pub method: ForegroundMethod,
}

/// Knobs for the background-statistics extractor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForegroundParams {
    /// Mahalanobis distance above which a pixel stops counting as background.
    pub tau: f64,
    /// Border band width as a fraction of the shorter image side.
    pub border_frac: f64,
    /// Components smaller than this fraction of the image are dropped.
    pub min_component_frac: f64,
    /// Below this total foreground fraction the extractor falls back to full.
    pub min_foreground_frac: f64,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        ForegroundParams {
            tau: 3.0,
            border_frac: 0.04,
            min_component_frac: 0.01,
            min_foreground_frac: 0.05,
        }
    }
}

/// Foreground via border-band background statistics: pixels within
/// Mahalanobis distance `tau` of the border color model are background.
/// The raw mask is cleaned by a 5x5 morphological close + open and small
/// components are dropped; a near-empty result falls back to the full mask
/// so texture categories degrade gracefully.
pub fn extract_foreground(image: &Tensor, params: &ForegroundParams) -> ForegroundMask {
    let (c, h, w) = dims3(image);
    assert_eq!(c, 3, "extract_foreground expects a 3-channel image");
    let xs = slice_of(image);
    let band = ((params.border_frac * h.min(w) as f64).round() as usize).max(1);

    let mut mean = [0.0f64; 3];
    let mut m2 = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y >= band && y < h - band && x >= band && x < w - band {
                continue;
            }
            count += 1;
            for ch in 0..3 {
                mean[ch] += xs[(ch * h + y) * w + x];
                m2[ch] += xs[(ch * h + y) * w + x] * xs[(ch * h + y) * w + x];
            }
        }
    }
    let n = count as f64;
    let mut std = [0.0f64; 3];
    for ch in 0..3 {
        mean[ch] /= n;
        let var = (m2[ch] / n - mean[ch] * mean[ch]).max(0.0);
        // Floor keeps flat backgrounds from flagging sensor noise as object.
        std[ch] = var.sqrt().max(0.02);
    }

    let mut fg = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut d2 = 0.0;
            for ch in 0..3 {
                let z = (xs[(ch * h + y) * w + x] - mean[ch]) / std[ch];
                d2 += z * z;
            }
            if d2.sqrt() > params.tau {
                fg[y * w + x] = 1.0;
            }
        }
    }

    let fg = morph_close(&fg, h, w, 2);
    let mut fg = morph_open(&fg, h, w, 2);

    let min_keep = ((params.min_component_frac * (h * w) as f64).ceil() as usize).max(1);
    let labels = label_regions_8(&fg, h, w);
    for region in &labels {
        if region.len() < min_keep {
            for &(y, x) in region {
                fg[y * w + x] = 0.0;
            }
        }
    }

    let area: f64 = fg.iter().sum();
    if area < params.min_foreground_frac * (h * w) as f64 {
        return ForegroundMask {
            data: from_vec(&[h, w], vec![1.0; h * w]),
            method: ForegroundMethod::Full,
        };
    }
    ForegroundMask {
        data: from_vec(&[h, w], fg),
        method: ForegroundMethod::BackgroundStat,
    }
}

pub fn full_foreground(h: usize, w: usize) -> ForegroundMask {
    ForegroundMask {
        data: from_vec(&[h, w], vec![1.0; h * w]),
        method: ForegroundMethod::Full,
    }
}

fn morph_dilate(mask: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0.0 {
                continue;
            }
            let y0 = y.saturating_sub(r);
            let x0 = x.saturating_sub(r);
            for yy in y0..=(y + r).min(h - 1) {
                for xx in x0..=(x + r).min(w - 1) {
                    out[yy * w + xx] = 1.0;
                }
            }
        }
    }
    out
}

fn morph_erode(mask: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let inverted: Vec<f64> = mask.iter().map(|&v| 1.0 - v).collect();
    let d = morph_dilate(&inverted, h, w, r);
    d.iter().map(|&v| 1.0 - v).collect()
}

fn morph_close(mask: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    morph_erode(&morph_dilate(mask, h, w, r), h, w, r)
}

fn morph_open(mask: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    morph_dilate(&morph_erode(mask, h, w, r), h, w, r)
}

/// 8-connected components of a binary mask, as pixel lists.
pub fn label_regions_8(mask: &[f64], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[sy * w + sx] == 0.0 || seen[sy * w + sx] {
                continue;
            }
            let mut region = Vec::new();
            seen[sy * w + sx] = true;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                region.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[ny * w + nx] != 0.0 && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            regions.push(region);
        }
    }
    regions
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForegroundMode {
    /// Background-statistics extraction with full-mask fallback.
    Auto,
    /// Whole image is eligible (texture categories, or FAS ablated off).
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Blend opacity is drawn uniformly from this closed range.
    pub beta_lo: f64,
    pub beta_hi: f64,
    /// Threshold on the [-1,1]-normalized noise field.
    pub noise_threshold: f64,
    /// Perlin periods per axis, sampled independently. Powers of two.
    pub freq_choices: Vec<usize>,
    /// "self" or a directory of texture images.
    pub texture_source: String,
    pub foreground_mode: ForegroundMode,
    pub foreground: ForegroundParams,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            beta_lo: 0.15,
            beta_hi: 1.0,
            noise_threshold: 0.5,
            freq_choices: vec![2, 4, 8, 16, 32],
            texture_source: "self".into(),
            foreground_mode: ForegroundMode::Auto,
            foreground: ForegroundParams::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_lo > 0.0 && self.beta_lo <= self.beta_hi && self.beta_hi <= 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < lo <= hi <= 1, got [{}, {}]",
                self.beta_lo, self.beta_hi
            )));
        }
        if self.freq_choices.is_empty() {
            return Err(Error::Config("freq_choices must be nonempty".into()));
        }
        for &f in &self.freq_choices {
            if f == 0 || !f.is_power_of_two() {
                return Err(Error::Config(format!(
                    "freq_choices entries must be powers of two, got {f}"
                )));
            }
        }
        Ok(())
    }
}

pub struct SynthesizedAnomaly {
    /// Anomalous image; equals the input bit-exactly outside the mask.
    pub image: Tensor,
    pub mask: Tensor,
    /// Opacity actually drawn, recorded for reconstruction checks and logs.
    pub beta: f64,
}

/// Full synthesis pipeline: sample frequencies, build the binarized Perlin
/// mask, intersect with the foreground, and blend the texture at a random
/// opacity. Deterministic in `seed`.
pub fn synthesize_anomaly(
    image: &Tensor,
    texture: &Tensor,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<SynthesizedAnomaly> {
    let (_, h, w) = dims3(image);
    let fg = match cfg.foreground_mode {
        ForegroundMode::Auto => extract_foreground(image, &cfg.foreground),
        ForegroundMode::Full => full_foreground(h, w),
    };
    synthesize_with_foreground(image, texture, &fg, cfg, seed)
}

/// Synthesis with a caller-supplied foreground (precomputed masks, plugins).
pub fn synthesize_with_foreground(
    image: &Tensor,
    texture: &Tensor,
    foreground: &ForegroundMask,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<SynthesizedAnomaly> {
    cfg.validate()?;
    let (c, h, w) = dims3(image);
    if foreground.data.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "foreground {:?} vs image {}x{}",
            foreground.data.shape(),
            h,
            w
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "synth"));
    let fx = cfg.freq_choices[rng.random_range(0..cfg.freq_choices.len())];
    let fy = cfg.freq_choices[rng.random_range(0..cfg.freq_choices.len())];
    let beta = if cfg.beta_lo == cfg.beta_hi {
        cfg.beta_lo
    } else {
        rng.random_range(cfg.beta_lo..cfg.beta_hi)
    };
    let noise = perlin_noise(h, w, fx, fy, derive_seed(seed, "perlin"))?;
    let noise_mask = binarize_noise(&noise, cfg.noise_threshold);

    let nm = slice_of(&noise_mask);
    let fgm = slice_of(&foreground.data);
    let mask: Vec<f64> = nm
        .iter()
        .zip(fgm)
        .map(|(&a, &b)| if a != 0.0 && b != 0.0 { 1.0 } else { 0.0 })
        .collect();

    let tex = if texture.shape() == image.shape() {
        texture.clone()
    } else {
        let (tc, _, _) = dims3(texture);
        if tc != c {
            return Err(Error::ShapeMismatch(format!(
                "texture has {tc} channels, image has {c}"
            )));
        }
        crate::autodiff::resize_bilinear(texture, h, w)
    };

    let xs = slice_of(image);
    let ts = slice_of(&tex);
    let mut out = xs.to_vec();
    for ch in 0..c {
        for p in 0..h * w {
            if mask[p] != 0.0 {
                let i = xs[ch * h * w + p];
                let a = ts[ch * h * w + p];
                out[ch * h * w + p] = (1.0 - beta) * i + beta * a;
            }
        }
    }

    Ok(SynthesizedAnomaly {
        image: from_vec(&[c, h, w], out),
        mask: from_vec(&[h, w], mask),
        beta,
    })
}

/// Mask intersection helper exposed for tests: a ⊆ b pointwise.
pub fn mask_subset_of(a: &Tensor, b: &Tensor) -> bool {
    let (h, w) = dims2(a);
    debug_assert_eq!(b.shape(), [h, w]);
    slice_of(a).iter().zip(slice_of(b)).all(|(&x, &y)| x == 0.0 || y != 0.0)
}
