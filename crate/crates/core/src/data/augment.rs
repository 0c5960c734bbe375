//! Label-preserving stochastic augmentation on float rasters in [0, 1].
//! Every transform is a pure function of (image, policy, seed); the golden
//! regression fixtures pin the exact arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rec. 601 luma weights, used by saturation and grayscale.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub flip_p: f64,
    pub jitter_strength: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl AugmentationPolicy {
    /// Crop, jitter and flip.
    pub fn standard() -> Self {
        Self {
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            flip_p: 0.5,
            jitter_strength: 0.4,
            jitter_p: 1.0,
            grayscale_p: 0.0,
        }
    }

    /// Aggressive crop, probabilistic jitter, random grayscale.
    pub fn simclr() -> Self {
        Self {
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            flip_p: 0.5,
            jitter_strength: 0.4,
            jitter_p: 0.8,
            grayscale_p: 0.2,
        }
    }

    /// No-op policy: full-frame crop, no flips, no color changes.
    pub fn identity() -> Self {
        Self {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            aspect_min: 1.0,
            aspect_max: 1.0,
            flip_p: 0.0,
            jitter_strength: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self::standard()),
            "simclr" => Some(Self::simclr()),
            "identity" => Some(Self::identity()),
            _ => None,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Augment one CHW image. Output has the same shape, values clamped to
/// [0, 1]; identical (image, policy, seed) triples give bitwise-identical
/// results.
pub fn augment(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Vec<f64> {
    debug_assert_eq!(image.len(), channels * height * width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = random_resized_crop(image, channels, height, width, policy, &mut rng);
    if rng.random::<f64>() < policy.flip_p {
        horizontal_flip(&mut out, channels, height, width);
    }
    if policy.jitter_p > 0.0 && rng.random::<f64>() < policy.jitter_p {
        color_jitter(&mut out, channels, height, width, policy.jitter_strength, &mut rng);
    }
    if policy.grayscale_p > 0.0 && rng.random::<f64>() < policy.grayscale_p {
        grayscale(&mut out, channels, height, width);
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Pick a region of random relative area and log-uniform aspect ratio, then
/// resize it back to the full frame bilinearly. Falls back to the full frame
/// when ten proposals fail to fit.
fn random_resized_crop(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let area = (height * width) as f64;
    let mut region = None;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale_min, policy.crop_scale_max);
        let aspect = uniform(rng, policy.aspect_min.ln(), policy.aspect_max.ln()).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x0 = rng.random_range(0..=(width - w));
            let y0 = rng.random_range(0..=(height - h));
            region = Some((x0, y0, w, h));
            break;
        }
    }
    let (x0, y0, w, h) = region.unwrap_or((0, 0, width, height));
    resize_bilinear(image, channels, height, width, x0, y0, w, h)
}

/// Bilinear resize of the region (x0, y0, w, h) to the full frame. The
/// sampling grid maps destination pixel centers onto source pixel centers,
/// so a full-frame region reproduces the input exactly.
#[allow(clippy::too_many_arguments)]
fn resize_bilinear(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * height * width];
    let sx = w as f64 / width as f64;
    let sy = h as f64 / height as f64;
    for dy in 0..height {
        let fy = (dy as f64 + 0.5) * sy - 0.5;
        let iy = fy.floor();
        let ty = fy - iy;
        let y_lo = (iy.max(0.0) as usize).min(h - 1) + y0;
        let y_hi = ((iy + 1.0).max(0.0) as usize).min(h - 1) + y0;
        for dx in 0..width {
            let fx = (dx as f64 + 0.5) * sx - 0.5;
            let ix = fx.floor();
            let tx = fx - ix;
            let x_lo = (ix.max(0.0) as usize).min(w - 1) + x0;
            let x_hi = ((ix + 1.0).max(0.0) as usize).min(w - 1) + x0;
            for c in 0..channels {
                let plane = &image[c * height * width..(c + 1) * height * width];
                let tl = plane[y_lo * width + x_lo];
                let tr = plane[y_lo * width + x_hi];
                let bl = plane[y_hi * width + x_lo];
                let br = plane[y_hi * width + x_hi];
                let top = tl + (tr - tl) * tx;
                let bot = bl + (br - bl) * tx;
                out[c * height * width + dy * width + dx] = top + (bot - top) * ty;
            }
        }
    }
    out
}

fn horizontal_flip(image: &mut [f64], channels: usize, height: usize, width: usize) {
    for c in 0..channels {
        let plane = &mut image[c * height * width..(c + 1) * height * width];
        for row in plane.chunks_mut(width) {
            row.reverse();
        }
    }
}

fn luminance(image: &[f64], channels: usize, pixels: usize, p: usize) -> f64 {
    if channels < 3 {
        return image[p];
    }
    LUMA[0] * image[p] + LUMA[1] * image[pixels + p] + LUMA[2] * image[2 * pixels + p]
}

/// Brightness, contrast and saturation in fixed order, each with its own
/// uniformly drawn factor in [1−s, 1+s]. Contrast blends toward the image's
/// mean luminance; saturation toward per-pixel luminance.
fn color_jitter(
    image: &mut [f64],
    channels: usize,
    height: usize,
    width: usize,
    strength: f64,
    rng: &mut ChaCha8Rng,
) {
    let pixels = height * width;
    let factor = |rng: &mut ChaCha8Rng| uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength);

    let b = factor(rng);
    for v in image.iter_mut() {
        *v *= b;
    }

    let c = factor(rng);
    let mean_lum =
        (0..pixels).map(|p| luminance(image, channels, pixels, p)).sum::<f64>() / pixels as f64;
    for v in image.iter_mut() {
        *v = c * *v + (1.0 - c) * mean_lum;
    }

    let s = factor(rng);
    if channels >= 3 {
        for p in 0..pixels {
            let lum = luminance(image, channels, pixels, p);
            for ch in 0..channels {
                let v = &mut image[ch * pixels + p];
                *v = s * *v + (1.0 - s) * lum;
            }
        }
    }
}

fn grayscale(image: &mut [f64], channels: usize, height: usize, width: usize) {
    if channels < 3 {
        return;
    }
    let pixels = height * width;
    for p in 0..pixels {
        let lum = luminance(image, channels, pixels, p);
        for ch in 0..channels {
            image[ch * pixels + p] = lum;
        }
    }
}
