//! Training-time augmentation producing the "augmented domain" view:
//! a random color transform (per-channel affine plus a hue-style channel
//! rotation) composed with a radial Fourier amplitude rescaling. Geometry
//! is always preserved, so annotations transfer unchanged.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::imagef::{ImageF, CHANNELS};
use crate::rng::seed_rng;
use crate::scalar::{real, to_f64, Real};

/// Augmentation magnitudes. Every knob at its zero point turns the whole
/// transform into an exact identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-channel gain drawn log-uniform in `[1/(1+m), 1+m]`.
    pub gain_mag: f64,
    /// Per-channel bias drawn uniform in `[-m, m]`.
    pub bias_mag: f64,
    /// Channel-rotation angle about the gray axis, uniform in `[-m, m]`
    /// radians.
    pub hue_mag: f64,
    /// Radial band gains drawn log-uniform in `[1/g, g]`; `g <= 1`
    /// disables the frequency pass entirely.
    pub freq_gain: f64,
    /// Number of radial frequency bands.
    pub freq_bands: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain_mag: 0.25,
            bias_mag: 0.10,
            hue_mag: 0.35,
            freq_gain: 1.6,
            freq_bands: 6,
        }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.gain_mag == 0.0 && self.bias_mag == 0.0 && self.hue_mag == 0.0 && self.freq_gain <= 1.0
    }
}

/// Rotate rgb about the gray axis by `angle`, then apply per-channel
/// affine gain/bias. Gray pixels are fixed points of the rotation.
pub fn color_transform<T: Real>(
    img: &ImageF<T>,
    angle: f64,
    gains: [f64; 3],
    biases: [f64; 3],
) -> ImageF<T> {
    let k = 1.0 / 3.0f64.sqrt();
    let (sin, cos) = angle.sin_cos();
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            let v = [to_f64(p[0]), to_f64(p[1]), to_f64(p[2])];
            // Rodrigues rotation about the unit gray axis (k, k, k).
            let dot = k * (v[0] + v[1] + v[2]);
            let cross = [
                k * (v[2] - v[1]),
                k * (v[0] - v[2]),
                k * (v[1] - v[0]),
            ];
            let mut q = [0.0; 3];
            for c in 0..CHANNELS {
                let rotated = v[c] * cos + cross[c] * sin + k * dot * (1.0 - cos);
                q[c] = (rotated * gains[c] + biases[c]).clamp(0.0, 1.0);
            }
            out.set_pixel(x, y, [real(q[0]), real(q[1]), real(q[2])]);
        }
    }
    out
}

/// Rescale the Fourier amplitude of each channel by per-band gains while
/// preserving phase. Band index comes from normalized radial frequency.
pub fn frequency_rescale<T: Real>(img: &ImageF<T>, band_gains: &[f64]) -> ImageF<T> {
    if band_gains.is_empty() || band_gains.iter().all(|g| *g == 1.0) {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut planner = FftPlanner::<f64>::new();
    let fwd_row = planner.plan_fft_forward(w);
    let fwd_col = planner.plan_fft_forward(h);
    let inv_row = planner.plan_fft_inverse(w);
    let inv_col = planner.plan_fft_inverse(h);
    let n_bands = band_gains.len();
    let mut out = img.clone();
    let mut spectrum = vec![Complex::new(0.0, 0.0); w * h];
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                spectrum[y * w + x] = Complex::new(to_f64(img.get(x, y, c)), 0.0);
            }
        }
        for row in spectrum.chunks_exact_mut(w) {
            fwd_row.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = spectrum[y * w + x];
            }
            fwd_col.process(&mut column);
            for y in 0..h {
                spectrum[y * w + x] = column[y];
            }
        }
        // Signed frequency per axis, normalized so the spectrum corner
        // sits at radius 1.
        for y in 0..h {
            let fy = if y <= h / 2 { y } else { h - y } as f64 / (h as f64 / 2.0);
            for x in 0..w {
                let fx = if x <= w / 2 { x } else { w - x } as f64 / (w as f64 / 2.0);
                let r = (fx * fx + fy * fy).sqrt() / 2.0f64.sqrt();
                let band = ((r * n_bands as f64) as usize).min(n_bands - 1);
                spectrum[y * w + x] *= band_gains[band];
            }
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = spectrum[y * w + x];
            }
            inv_col.process(&mut column);
            for y in 0..h {
                spectrum[y * w + x] = column[y];
            }
        }
        for row in spectrum.chunks_exact_mut(w) {
            inv_row.process(row);
        }
        let scale = 1.0 / (w * h) as f64;
        for y in 0..h {
            for x in 0..w {
                let v = (spectrum[y * w + x].re * scale).clamp(0.0, 1.0);
                out.set(x, y, c, real(v));
            }
        }
    }
    out
}

/// Draw color and frequency parameters from `seed` and apply both passes.
pub fn augment_with<T: Real>(img: &ImageF<T>, cfg: &AugmentConfig, seed: u64) -> ImageF<T> {
    if cfg.is_identity() {
        return img.clone();
    }
    let mut rng = seed_rng(seed);
    let angle = if cfg.hue_mag > 0.0 {
        rng.gen_range(-cfg.hue_mag..cfg.hue_mag)
    } else {
        0.0
    };
    let mut gains = [1.0; 3];
    if cfg.gain_mag > 0.0 {
        let lo = -(1.0 + cfg.gain_mag).ln();
        for g in &mut gains {
            *g = rng.gen_range(lo..-lo).exp();
        }
    }
    let mut biases = [0.0; 3];
    if cfg.bias_mag > 0.0 {
        for b in &mut biases {
            *b = rng.gen_range(-cfg.bias_mag..cfg.bias_mag);
        }
    }
    let colored = color_transform(img, angle, gains, biases);
    if cfg.freq_gain <= 1.0 {
        return colored;
    }
    let span = cfg.freq_gain.ln();
    let band_gains: Vec<f64> = (0..cfg.freq_bands.max(1))
        .map(|_| rng.gen_range(-span..span).exp())
        .collect();
    frequency_rescale(&colored, &band_gains)
}

/// [`augment_with`] under the default magnitudes.
pub fn augment_train<T: Real>(img: &ImageF<T>, seed: u64) -> ImageF<T> {
    augment_with(img, &AugmentConfig::default(), seed)
}
