//! Seeded augmentation: blur, additive noise, horizontal flip, and
//! brightness/contrast. There is deliberately no vertical flip anywhere —
//! the order of tissue layers is fixed anatomy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::Raster;

/// Per-transform probabilities and magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_blur: f64,
    pub p_noise: f64,
    pub p_hflip: f64,
    pub p_brightness_contrast: f64,
    /// Additive Gaussian noise std, in 0-255 intensity units.
    pub noise_sigma: f64,
    /// Brightness offset range, as a fraction of full scale.
    pub brightness_delta: f64,
    /// Contrast slope range around 1.
    pub contrast_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_blur: 0.3,
            p_noise: 0.3,
            p_hflip: 0.5,
            p_brightness_contrast: 0.3,
            noise_sigma: 8.0,
            brightness_delta: 0.2,
            contrast_delta: 0.2,
        }
    }
}

impl AugmentConfig {
    /// All transforms off; the pipeline becomes the identity.
    pub fn disabled() -> Self {
        Self {
            p_blur: 0.0,
            p_noise: 0.0,
            p_hflip: 0.0,
            p_brightness_contrast: 0.0,
            ..Self::default()
        }
    }
}

/// Applies each transform independently with its configured probability.
/// Transforms run in the fixed order blur, noise, horizontal flip,
/// brightness/contrast. Output shape always equals the input shape.
pub fn augment(image: &Raster, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Raster {
    let mut out = image.clone();
    if rng.random::<f64>() < config.p_blur {
        let sigma = rng.random_range(0.3..1.5);
        out = gaussian_blur(&out, sigma);
    }
    if rng.random::<f64>() < config.p_noise {
        out = add_noise(&out, config.noise_sigma, rng);
    }
    if rng.random::<f64>() < config.p_hflip {
        out = out.flip_horizontal();
    }
    if rng.random::<f64>() < config.p_brightness_contrast {
        let b = rng.random_range(-config.brightness_delta..=config.brightness_delta);
        let c = rng.random_range(-config.contrast_delta..=config.contrast_delta);
        out = brightness_contrast(&out, b, c);
    }
    out
}

/// Separable Gaussian blur with border replication.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    // horizontal pass into f64, vertical pass back to u8
    let mut mid = vec![0.0f64; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * image.get(y, sx, c) as f64;
                }
                mid[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * mid[(sy * w + x) * ch + c];
                }
                out.set(y, x, c, acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn add_noise(image: &Raster, sigma: f64, rng: &mut ChaCha8Rng) -> Raster {
    let normal = Normal::new(0.0, sigma.max(1e-9)).expect("valid sigma");
    let mut out = image.clone();
    for v in out.data_mut() {
        let noisy = *v as f64 + normal.sample(rng);
        *v = noisy.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn brightness_contrast(image: &Raster, brightness: f64, contrast: f64) -> Raster {
    let mut out = image.clone();
    for v in out.data_mut() {
        let x = (*v as f64 - 127.5) * (1.0 + contrast) + 127.5 + brightness * 255.0;
        *v = x.round().clamp(0.0, 255.0) as u8;
    }
    out
}
