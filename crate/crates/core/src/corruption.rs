//! The 15-type x 5-severity corruption taxonomy.
//!
//! Every corruption is a pure function of (image, type, severity, seed),
//! keeps the image dimensions (annotations transfer unchanged), and
//! reclamps to `[0, 1]`. Severity schedules are documented parameter
//! tables; the behavioral contract is that expected distortion grows with
//! severity, not any specific constant.
//!
//! Suite layout on disk: `<out>/<corruption>/<severity>/<image-id>.png`
//! plus `<out>/manifest.json` recording every seed used.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{value_noise, DetectionSample};
use crate::error::{CoreError, Result};
use crate::imagef::{ImageF, CHANNELS};
use crate::rng::{indexed_seed, labeled_seed, seed_rng};
use crate::scalar::{real, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorruptionGroup {
    Noise,
    Blur,
    Weather,
    Digital,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionType {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

/// All 15 types in benchmark order: noise, blur, weather, digital.
pub const ALL_CORRUPTIONS: [CorruptionType; 15] = [
    CorruptionType::GaussianNoise,
    CorruptionType::ShotNoise,
    CorruptionType::ImpulseNoise,
    CorruptionType::DefocusBlur,
    CorruptionType::GlassBlur,
    CorruptionType::MotionBlur,
    CorruptionType::ZoomBlur,
    CorruptionType::Snow,
    CorruptionType::Frost,
    CorruptionType::Fog,
    CorruptionType::Brightness,
    CorruptionType::Contrast,
    CorruptionType::Elastic,
    CorruptionType::Pixelate,
    CorruptionType::Jpeg,
];

impl CorruptionType {
    pub fn group(self) -> CorruptionGroup {
        use CorruptionType::*;
        match self {
            GaussianNoise | ShotNoise | ImpulseNoise => CorruptionGroup::Noise,
            DefocusBlur | GlassBlur | MotionBlur | ZoomBlur => CorruptionGroup::Blur,
            Snow | Frost | Fog | Brightness => CorruptionGroup::Weather,
            Contrast | Elastic | Pixelate | Jpeg => CorruptionGroup::Digital,
        }
    }

    /// Stable snake_case name used in paths and reports.
    pub fn name(self) -> &'static str {
        use CorruptionType::*;
        match self {
            GaussianNoise => "gaussian_noise",
            ShotNoise => "shot_noise",
            ImpulseNoise => "impulse_noise",
            DefocusBlur => "defocus_blur",
            GlassBlur => "glass_blur",
            MotionBlur => "motion_blur",
            ZoomBlur => "zoom_blur",
            Snow => "snow",
            Frost => "frost",
            Fog => "fog",
            Brightness => "brightness",
            Contrast => "contrast",
            Elastic => "elastic",
            Pixelate => "pixelate",
            Jpeg => "jpeg",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_CORRUPTIONS
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| {
                CoreError::invalid("CorruptionType::from_name", format!("unknown type {name:?}"))
            })
    }
}

/// Corruption severity level, 1 through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity(1),
        Severity(2),
        Severity(3),
        Severity(4),
        Severity(5),
    ];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Severity(level))
        } else {
            Err(CoreError::invalid(
                "Severity::new",
                format!("level {level} outside [1, 5]"),
            ))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Zero-based index into a 5-entry schedule table.
    pub fn index(self) -> usize {
        usize::from(self.0) - 1
    }
}

impl TryFrom<u8> for Severity {
    type Error = CoreError;
    fn try_from(v: u8) -> Result<Self> {
        Severity::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

// Severity schedules. Five entries each, index = severity - 1.

/// Gaussian noise standard deviation.
const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Shot noise photon budget per unit intensity (lower = noisier).
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
/// Impulse salt/pepper probability per channel sample.
const IMPULSE_P: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
/// Defocus disk radius, pixels.
const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.6, 2.4, 3.4, 4.6];
/// Glass blur shuffle distance and pass count.
const GLASS_DIST: [usize; 5] = [1, 1, 2, 2, 3];
const GLASS_ITERS: [usize; 5] = [1, 2, 2, 3, 3];
/// Motion blur kernel length, pixels.
const MOTION_LEN: [f64; 5] = [3.0, 5.0, 7.0, 9.0, 13.0];
/// Zoom blur maximum magnification.
const ZOOM_MAX: [f64; 5] = [1.06, 1.11, 1.16, 1.21, 1.26];
/// Snowflake density and global whitening.
const SNOW_DENSITY: [f64; 5] = [0.010, 0.018, 0.028, 0.042, 0.060];
const SNOW_BRIGHTEN: [f64; 5] = [0.02, 0.03, 0.04, 0.05, 0.06];
/// Frost coverage threshold (lower = more frost) and overlay weight.
const FROST_THRESH: [f64; 5] = [0.72, 0.65, 0.58, 0.50, 0.42];
const FROST_WEIGHT: [f64; 5] = [0.35, 0.45, 0.55, 0.65, 0.75];
/// Fog mean transmittance loss.
const FOG_STRENGTH: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.58];
/// Additive brightness shift.
const BRIGHTNESS_SHIFT: [f64; 5] = [0.10, 0.18, 0.26, 0.35, 0.45];
/// Contrast gain toward the image mean.
const CONTRAST_GAIN: [f64; 5] = [0.75, 0.60, 0.45, 0.30, 0.18];
/// Elastic displacement amplitude (pixels, max-norm) and field smoothing.
/// The amplitude cap keeps box centers within 2 px of their origin.
const ELASTIC_AMP: [f64; 5] = [0.4, 0.7, 1.0, 1.3, 1.6];
const ELASTIC_SMOOTH: [f64; 5] = [5.0, 5.0, 4.0, 4.0, 3.0];
/// Pixelate downscale fraction of each side. The fractions give odd
/// non-divisor block grids at common sizes; even divisors can realign
/// with periodic structure and shrink the distortion.
const PIXELATE_FRAC: [f64; 5] = [0.609375, 0.484375, 0.359375, 0.296875, 0.203125];
/// Quantization quality for the block-DCT codec emulation.
const JPEG_QUALITY: [f64; 5] = [25.0, 18.0, 12.0, 8.0, 5.0];

/// Apply one corruption. Pure: identical (img, c, s, seed) gives
/// bit-identical output.
pub fn apply_corruption<T: Real>(
    img: &ImageF<T>,
    c: CorruptionType,
    s: Severity,
    seed: u64,
) -> ImageF<T> {
    let i = s.index();
    use CorruptionType::*;
    match c {
        GaussianNoise => gaussian_noise(img, GAUSSIAN_SIGMA[i], seed),
        ShotNoise => shot_noise(img, SHOT_PHOTONS[i], seed),
        ImpulseNoise => impulse_noise(img, IMPULSE_P[i], seed),
        DefocusBlur => defocus_blur(img, DEFOCUS_RADIUS[i]),
        GlassBlur => glass_blur(img, GLASS_DIST[i], GLASS_ITERS[i], seed),
        MotionBlur => motion_blur(img, MOTION_LEN[i], seed),
        ZoomBlur => zoom_blur(img, ZOOM_MAX[i]),
        Snow => snow(img, SNOW_DENSITY[i], SNOW_BRIGHTEN[i], seed),
        Frost => frost(img, FROST_THRESH[i], FROST_WEIGHT[i], seed),
        Fog => fog(img, FOG_STRENGTH[i], seed),
        Brightness => brightness(img, BRIGHTNESS_SHIFT[i]),
        Contrast => contrast(img, CONTRAST_GAIN[i]),
        Elastic => elastic(img, ELASTIC_AMP[i], ELASTIC_SMOOTH[i], seed),
        Pixelate => pixelate(img, PIXELATE_FRAC[i]),
        Jpeg => jpeg(img, JPEG_QUALITY[i]),
    }
}

/// Corrupt every sample with a per-sample derived seed; annotations are
/// copied unchanged (all corruptions preserve geometry).
pub fn corrupt_dataset<T: Real>(
    ds: &[DetectionSample<T>],
    c: CorruptionType,
    s: Severity,
    seed: u64,
) -> Vec<DetectionSample<T>> {
    ds.iter()
        .enumerate()
        .map(|(i, sample)| DetectionSample {
            id: sample.id.clone(),
            image: apply_corruption(&sample.image, c, s, indexed_seed(seed, i as u64)),
            boxes: sample.boxes.clone(),
            labels: sample.labels.clone(),
        })
        .collect()
}

// f64 working buffers. All corruption math runs in f64 regardless of the
// image scalar type so both lanes produce the same quantized pixels.

fn to_buf<T: Real>(img: &ImageF<T>) -> Vec<f64> {
    img.data().iter().map(|v| to_f64(*v)).collect()
}

fn from_buf<T: Real>(img: &ImageF<T>, buf: Vec<f64>) -> ImageF<T> {
    let data = buf
        .into_iter()
        .map(|v| real::<T>(v.clamp(0.0, 1.0)))
        .collect();
    ImageF::from_data(img.width(), img.height(), data).expect("buffer keeps dimensions")
}

#[inline]
fn sample_buf(buf: &[f64], w: usize, h: usize, fx: f64, fy: f64, c: usize) -> f64 {
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let at = |x: usize, y: usize| buf[(y * w + x) * CHANNELS + c];
    (at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx) * (1.0 - ty)
        + (at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx) * ty
}

/// Clamp-to-edge 2-D convolution with an odd-sized kernel, per channel.
fn conv2d(buf: &[f64], w: usize, h: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; buf.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = [0.0; CHANNELS];
            for ky in 0..k as isize {
                let sy = (y + ky - half).clamp(0, h as isize - 1) as usize;
                for kx in 0..k as isize {
                    let sx = (x + kx - half).clamp(0, w as isize - 1) as usize;
                    let kv = kernel[(ky * k as isize + kx) as usize];
                    if kv == 0.0 {
                        continue;
                    }
                    let base = (sy * w + sx) * CHANNELS;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += kv * buf[base + c];
                    }
                }
            }
            let base = (y as usize * w + x as usize) * CHANNELS;
            out[base..base + CHANNELS].copy_from_slice(&acc);
        }
    }
    out
}

/// Normalized disk kernel with 3x3 subpixel edge coverage.
fn disk_kernel(radius: f64) -> (Vec<f64>, usize) {
    let half = radius.ceil() as isize;
    let k = (2 * half + 1) as usize;
    let mut kernel = vec![0.0; k * k];
    let r2 = radius * radius;
    for y in -half..=half {
        for x in -half..=half {
            let mut cov = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let fx = x as f64 + (sx as f64 + 0.5) / 3.0 - 0.5;
                    let fy = y as f64 + (sy as f64 + 0.5) / 3.0 - 0.5;
                    if fx * fx + fy * fy <= r2 {
                        cov += 1.0;
                    }
                }
            }
            kernel[((y + half) * k as isize + (x + half)) as usize] = cov / 9.0;
        }
    }
    let total: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= total;
    }
    (kernel, k)
}

/// Separable Gaussian blur of a single-channel plane, clamp-to-edge.
fn blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for i in -half..=half {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= norm;
    }
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x + i as isize - half).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y + i as isize - half).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy as usize * w + x];
            }
            out[y as usize * w + x] = acc;
        }
    }
    out
}

/// Multi-octave value noise in [0, 1].
fn octave_noise(rng: &mut impl Rng, w: usize, h: usize) -> Vec<f64> {
    let a = value_noise(rng, w, h, (w / 6).max(4));
    let b = value_noise(rng, w, h, (w / 12).max(2));
    let c = value_noise(rng, w, h, 2);
    (0..w * h)
        .map(|i| 0.5 * a[i] + 0.3 * b[i] + 0.2 * c[i])
        .collect()
}

// The 15 corruptions, each parameterized directly so tests can probe
// schedule-independent behavior (for example sigma = 0).

pub fn gaussian_noise<T: Real>(img: &ImageF<T>, sigma: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let mut buf = to_buf(img);
    if sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma validated");
        for v in &mut buf {
            *v += normal.sample(&mut rng);
        }
    }
    from_buf(img, buf)
}

pub fn shot_noise<T: Real>(img: &ImageF<T>, photons: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let mut buf = to_buf(img);
    for v in &mut buf {
        let lambda = *v * photons;
        if lambda > 0.0 {
            let p = Poisson::new(lambda).expect("positive lambda");
            *v = p.sample(&mut rng) / photons;
        }
        // Zero intensity stays zero: Poisson(0) is identically 0.
    }
    from_buf(img, buf)
}

pub fn impulse_noise<T: Real>(img: &ImageF<T>, p: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let mut buf = to_buf(img);
    for v in &mut buf {
        if rng.gen::<f64>() < p {
            *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        }
    }
    from_buf(img, buf)
}

pub fn defocus_blur<T: Real>(img: &ImageF<T>, radius: f64) -> ImageF<T> {
    let (kernel, k) = disk_kernel(radius);
    let buf = to_buf(img);
    from_buf(img, conv2d(&buf, img.width(), img.height(), &kernel, k))
}

pub fn glass_blur<T: Real>(img: &ImageF<T>, dist: usize, iters: usize, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let (w, h) = (img.width(), img.height());
    let mut buf = to_buf(img);
    let d = dist as isize;
    for _ in 0..iters {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let dx = rng.gen_range(-d..=d);
                let dy = rng.gen_range(-d..=d);
                let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                let a = (y as usize * w + x as usize) * CHANNELS;
                let b = (sy * w + sx) * CHANNELS;
                for c in 0..CHANNELS {
                    buf.swap(a + c, b + c);
                }
            }
        }
    }
    from_buf(img, buf)
}

pub fn motion_blur<T: Real>(img: &ImageF<T>, length: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (w, h) = (img.width(), img.height());
    let buf = to_buf(img);
    let taps = length.ceil().max(1.0) as usize;
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for t in 0..taps {
                    let offset = t as f64 - (taps as f64 - 1.0) / 2.0;
                    acc += sample_buf(
                        &buf,
                        w,
                        h,
                        x as f64 + offset * dx,
                        y as f64 + offset * dy,
                        c,
                    );
                }
                out[(y * w + x) * CHANNELS + c] = acc / taps as f64;
            }
        }
    }
    from_buf(img, out)
}

pub fn zoom_blur<T: Real>(img: &ImageF<T>, max_zoom: f64) -> ImageF<T> {
    let (w, h) = (img.width(), img.height());
    let buf = to_buf(img);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut factors = Vec::new();
    let mut z = 1.0;
    while z <= max_zoom + 1e-9 {
        factors.push(z);
        z += 0.02;
    }
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for f in &factors {
                    let sx = cx + (x as f64 - cx) / f;
                    let sy = cy + (y as f64 - cy) / f;
                    acc += sample_buf(&buf, w, h, sx, sy, c);
                }
                out[(y * w + x) * CHANNELS + c] = acc / factors.len() as f64;
            }
        }
    }
    from_buf(img, out)
}

pub fn snow<T: Real>(img: &ImageF<T>, density: f64, brighten: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let (w, h) = (img.width(), img.height());
    // Sparse bright flakes, streaked by a short motion blur.
    let mut layer = vec![0.0; w * h];
    for v in layer.iter_mut() {
        if rng.gen::<f64>() < density {
            *v = rng.gen_range(0.6..1.0);
        }
    }
    let angle = rng.gen_range(0.35..0.75) * std::f64::consts::PI;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut streaks = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc: f64 = 0.0;
            for t in -2i32..=2 {
                let sx = (x as f64 + f64::from(t) * dx).round().clamp(0.0, w as f64 - 1.0) as usize;
                let sy = (y as f64 + f64::from(t) * dy).round().clamp(0.0, h as f64 - 1.0) as usize;
                acc = acc.max(layer[sy * w + sx] * (1.0 - 0.12 * f64::from(t.abs())));
            }
            streaks[y * w + x] = acc;
        }
    }
    let mut buf = to_buf(img);
    for y in 0..h {
        for x in 0..w {
            let sv = streaks[y * w + x];
            for c in 0..CHANNELS {
                let i = (y * w + x) * CHANNELS + c;
                buf[i] = (buf[i] + brighten).max(sv);
            }
        }
    }
    from_buf(img, buf)
}

pub fn frost<T: Real>(img: &ImageF<T>, thresh: f64, weight: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let (w, h) = (img.width(), img.height());
    let field = octave_noise(&mut rng, w, h);
    let detail = value_noise(&mut rng, w, h, 2);
    let mut buf = to_buf(img);
    const FROST_TINT: [f64; 3] = [0.85, 0.9, 1.0];
    for y in 0..h {
        for x in 0..w {
            let f = field[y * w + x];
            // Soft threshold edge so crystals have feathered borders.
            let m = ((f - thresh) / 0.08).clamp(0.0, 1.0) * weight;
            if m == 0.0 {
                continue;
            }
            let shade = 0.75 + 0.25 * detail[y * w + x];
            for c in 0..CHANNELS {
                let i = (y * w + x) * CHANNELS + c;
                buf[i] = buf[i] * (1.0 - m) + FROST_TINT[c] * shade * m;
            }
        }
    }
    from_buf(img, buf)
}

pub fn fog<T: Real>(img: &ImageF<T>, strength: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let (w, h) = (img.width(), img.height());
    let field = octave_noise(&mut rng, w, h);
    let mut buf = to_buf(img);
    const FOG_LIGHT: f64 = 0.85;
    for y in 0..h {
        for x in 0..w {
            let f = (strength * (0.7 + 0.6 * field[y * w + x])).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                let i = (y * w + x) * CHANNELS + c;
                buf[i] = buf[i] * (1.0 - f) + FOG_LIGHT * f;
            }
        }
    }
    from_buf(img, buf)
}

pub fn brightness<T: Real>(img: &ImageF<T>, shift: f64) -> ImageF<T> {
    let mut buf = to_buf(img);
    for v in &mut buf {
        *v += shift;
    }
    from_buf(img, buf)
}

pub fn contrast<T: Real>(img: &ImageF<T>, gain: f64) -> ImageF<T> {
    let buf = to_buf(img);
    let mean = buf.iter().sum::<f64>() / buf.len() as f64;
    let out = buf.iter().map(|v| (v - mean) * gain + mean).collect();
    from_buf(img, out)
}

pub fn elastic<T: Real>(img: &ImageF<T>, amp: f64, smooth: f64, seed: u64) -> ImageF<T> {
    let mut rng = seed_rng(seed);
    let (w, h) = (img.width(), img.height());
    let mut dx: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dy: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    dx = blur_plane(&dx, w, h, smooth);
    dy = blur_plane(&dy, w, h, smooth);
    // Max-norm scaling caps the largest displacement at exactly `amp`.
    let peak = dx
        .iter()
        .zip(&dy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    if peak > 0.0 {
        let scale = amp / peak;
        for v in &mut dx {
            *v *= scale;
        }
        for v in &mut dy {
            *v *= scale;
        }
    }
    let buf = to_buf(img);
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + dx[y * w + x];
            let sy = y as f64 + dy[y * w + x];
            for c in 0..CHANNELS {
                out[(y * w + x) * CHANNELS + c] = sample_buf(&buf, w, h, sx, sy, c);
            }
        }
    }
    from_buf(img, out)
}

pub fn pixelate<T: Real>(img: &ImageF<T>, frac: f64) -> ImageF<T> {
    let (w, h) = (img.width(), img.height());
    let dw = ((w as f64 * frac).round() as usize).max(1);
    let dh = ((h as f64 * frac).round() as usize).max(1);
    let small = img.resize(dw, dh).expect("nonzero target");
    // Nearest-neighbor upscale restores the original size with blocks.
    let mut out = ImageF::new(w, h);
    for y in 0..h {
        let sy = (y * dh / h).min(dh - 1);
        for x in 0..w {
            let sx = (x * dw / w).min(dw - 1);
            out.set_pixel(x, y, small.pixel(sx, sy));
        }
    }
    out
}

/// Base luminance quantization table (quality 50).
const JPEG_Q50: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn jpeg_quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, b) in t.iter_mut().zip(JPEG_Q50.iter()) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// 8x8 block DCT + quality-scaled quantization + inverse, per channel.
/// No entropy coding: only the characteristic quantization artifact.
pub fn jpeg<T: Real>(img: &ImageF<T>, quality: f64) -> ImageF<T> {
    let qt = jpeg_quant_table(quality);
    // DCT-II basis: C[u][x] = alpha(u) cos((2x+1) u pi / 16).
    let mut basis = [[0.0f64; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    let (w, h) = (img.width(), img.height());
    let buf = to_buf(img);
    let mut out = buf.clone();
    for c in 0..CHANNELS {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // Edge-clamped reads pad partial border blocks.
                let mut block = [[0.0f64; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    let sy = (by + y).min(h - 1);
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = (bx + x).min(w - 1);
                        *v = buf[(sy * w + sx) * CHANNELS + c] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for (y, row) in block.iter().enumerate() {
                            for (x, val) in row.iter().enumerate() {
                                acc += val * basis[u][y] * basis[v][x];
                            }
                        }
                        let q = qt[u * 8 + v];
                        coef[u][v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    let oy = by + y;
                    if oy >= h {
                        break;
                    }
                    for x in 0..8 {
                        let ox = bx + x;
                        if ox >= w {
                            break;
                        }
                        let mut acc = 0.0;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, cv) in crow.iter().enumerate() {
                                acc += cv * basis[u][y] * basis[v][x];
                            }
                        }
                        out[(oy * w + ox) * CHANNELS + c] = (acc + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    from_buf(img, out)
}

// Suite persistence.

/// Seeds used for one (corruption, severity) cell of a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteCell {
    pub corruption: String,
    pub severity: u8,
    /// Cell-level seed; per-image seeds derive from it by index.
    pub seed: u64,
    pub image_seeds: Vec<u64>,
}

/// Sidecar manifest: every seed that produced the suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub master_seed: u64,
    pub image_ids: Vec<String>,
    pub cells: Vec<SuiteCell>,
}

fn cell_seed(master: u64, c: CorruptionType, s: Severity) -> u64 {
    labeled_seed(master, &format!("corrupt/{}/{}", c.name(), s.level()))
}

/// Write `<out>/<corruption>/<severity>/<image-id>.png` for every cell
/// plus `<out>/manifest.json`.
pub fn build_suite<T: Real>(
    out: &Path,
    samples: &[DetectionSample<T>],
    types: &[CorruptionType],
    severities: &[Severity],
    master_seed: u64,
) -> Result<SuiteManifest> {
    if samples.is_empty() {
        return Err(CoreError::invalid("build_suite", "empty dataset"));
    }
    let mut manifest = SuiteManifest {
        master_seed,
        image_ids: samples.iter().map(|s| s.id.clone()).collect(),
        cells: Vec::new(),
    };
    for &c in types {
        for &s in severities {
            let seed = cell_seed(master_seed, c, s);
            let corrupted = corrupt_dataset(samples, c, s, seed);
            for sample in &corrupted {
                let path = out
                    .join(c.name())
                    .join(s.level().to_string())
                    .join(format!("{}.png", sample.id));
                sample.image.save_png(&path)?;
            }
            manifest.cells.push(SuiteCell {
                corruption: c.name().to_string(),
                severity: s.level(),
                seed,
                image_seeds: (0..samples.len())
                    .map(|i| indexed_seed(seed, i as u64))
                    .collect(),
            });
        }
    }
    crate::data::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read one suite cell back, attaching the clean dataset's annotations
/// (corruptions preserve geometry, so labels transfer unchanged).
pub fn load_suite_cell<T: Real>(
    out: &Path,
    clean: &[DetectionSample<T>],
    c: CorruptionType,
    s: Severity,
) -> Result<Vec<DetectionSample<T>>> {
    clean
        .iter()
        .map(|sample| {
            let path = out
                .join(c.name())
                .join(s.level().to_string())
                .join(format!("{}.png", sample.id));
            let image = ImageF::load_png(&path)?;
            DetectionSample::new(
                sample.id.clone(),
                image,
                sample.boxes.clone(),
                sample.labels.clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Structured reference with high-frequency energy so blurs move it.
    pub(super) fn reference_image() -> ImageF<f64> {
        ImageF::from_fn(64, 64, |x, y| {
            let checker = if (x / 4 + y / 4) % 2 == 0 { 0.85 } else { 0.25 };
            let wave = 0.5 + 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.5).cos());
            let ramp = (x + y) as f64 / 128.0;
            [checker, wave, ramp]
        })
    }

    #[test]
    fn every_type_is_deterministic_and_in_range() {
        let img = reference_image();
        for c in ALL_CORRUPTIONS {
            let a = apply_corruption(&img, c, Severity::new(3).unwrap(), 42);
            let b = apply_corruption(&img, c, Severity::new(3).unwrap(), 42);
            assert_eq!(a.checksum(), b.checksum(), "{} not deterministic", c.name());
            assert_eq!(a.width(), img.width());
            assert_eq!(a.height(), img.height());
            assert!(
                a.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "{} out of range",
                c.name()
            );
        }
    }

    #[test]
    fn zero_sigma_gaussian_is_identity() {
        let img = reference_image();
        let out = gaussian_noise(&img, 0.0, 7);
        assert_eq!(out, img);
    }

    #[test]
    fn shot_noise_keeps_black_black() {
        let img = ImageF::<f64>::new(16, 16);
        let out = shot_noise(&img, 3.0, 99);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn severity_rejects_out_of_range() {
        assert!(Severity::new(0).is_err());
        assert!(Severity::new(6).is_err());
        assert_eq!(Severity::new(5).unwrap().index(), 4);
    }

    #[test]
    fn gaussian_severity_is_strictly_monotone() {
        let img = reference_image();
        let mut prev = -1.0;
        for s in Severity::ALL {
            let mut acc = 0.0;
            for seed in 0..5 {
                let out = apply_corruption(&img, CorruptionType::GaussianNoise, s, seed);
                acc += mse(&img, &out);
            }
            let m = acc / 5.0;
            assert!(m > prev, "severity {} not above previous", s.level());
            prev = m;
        }
    }

    #[test]
    fn elastic_displacement_stays_under_two_pixels() {
        // Warp a delta image at max severity; the centroid must stay put.
        let mut img = ImageF::<f64>::new(64, 64);
        img.set_pixel(32, 32, [1.0, 1.0, 1.0]);
        for seed in 0..10 {
            let out = apply_corruption(&img, CorruptionType::Elastic, Severity::new(5).unwrap(), seed);
            let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    let v = out.get(x, y, 0);
                    sx += v * x as f64;
                    sy += v * y as f64;
                    total += v;
                }
            }
            assert!(total > 0.0);
            let dx = sx / total - 32.0;
            let dy = sy / total - 32.0;
            assert!((dx * dx + dy * dy).sqrt() < 2.0, "seed {seed} moved too far");
        }
    }

    #[test]
    fn corrupt_dataset_preserves_annotations_and_derives_seeds() {
        use crate::data::{generate_dataset, DatasetSpec};
        let ds = generate_dataset::<f64>(
            &DatasetSpec {
                n_images: 4,
                ..DatasetSpec::default()
            },
            1,
        )
        .unwrap();
        let sev = Severity::new(2).unwrap();
        let out = corrupt_dataset(&ds, CorruptionType::GaussianNoise, sev, 5);
        assert_eq!(out.len(), ds.len());
        for (a, b) in ds.iter().zip(&out) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.labels, b.labels);
        }
        // Per-sample fields differ: the noise is not replicated.
        assert_ne!(out[0].image.checksum(), out[1].image.checksum());
        let again = corrupt_dataset(&ds, CorruptionType::GaussianNoise, sev, 5);
        assert_eq!(
            out.iter().map(|s| s.image.checksum()).collect::<Vec<_>>(),
            again.iter().map(|s| s.image.checksum()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn suite_layout_and_manifest_round_trip() {
        use crate::data::{generate_dataset, DatasetSpec};
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset::<f64>(
            &DatasetSpec {
                n_images: 2,
                ..DatasetSpec::default()
            },
            1,
        )
        .unwrap();
        let types = [CorruptionType::Fog, CorruptionType::Jpeg];
        let sevs = [Severity::new(1).unwrap(), Severity::new(5).unwrap()];
        let manifest = build_suite(dir.path(), &ds, &types, &sevs, 77).unwrap();
        assert_eq!(manifest.cells.len(), 4);
        assert!(dir.path().join("fog/1/img_00000.png").is_file());
        assert!(dir.path().join("jpeg/5/img_00001.png").is_file());
        assert!(dir.path().join("manifest.json").is_file());
        let cell = load_suite_cell(dir.path(), &ds, CorruptionType::Fog, sevs[1]).unwrap();
        assert_eq!(cell.len(), 2);
        assert_eq!(cell[0].boxes, ds[0].boxes);
        // Quantized pixels match an in-memory regeneration of the cell.
        let regen = corrupt_dataset(
            &ds,
            CorruptionType::Fog,
            sevs[1],
            cell_seed(77, CorruptionType::Fog, sevs[1]),
        );
        assert_eq!(cell[0].image.to_bytes(), regen[0].image.to_bytes());
    }

    pub(super) fn mse(a: &ImageF<f64>, b: &ImageF<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.data().len() as f64
    }
}
