//! Float RGB images in `[0, 1]` with PNG round-tripping.
//!
//! Layout is row-major interleaved: index `(y * width + x) * 3 + c`. Every
//! transform in the crate keeps dimensions fixed and reclamps to `[0, 1]`,
//! so a stored image is always 8-bit-quantizable without surprises.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::fnv1a;
use crate::scalar::{real, to_f64, Real};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageF<T: Real> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ImageF<T> {
    /// All-zero (black) image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height * CHANNELS],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(CoreError::invalid(
                "ImageF::from_data",
                format!(
                    "{}x{} rgb needs {} floats, got {}",
                    width,
                    height,
                    width * height * CHANNELS,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Build from a per-pixel closure returning rgb.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, p: [T; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// Clamp every value into `[0, 1]` in place.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// Apply `f` to every value, then clamp.
    pub fn map_values(&mut self, mut f: impl FnMut(T) -> T) {
        for v in &mut self.data {
            *v = f(*v).max(T::zero()).min(T::one());
        }
    }

    /// Bilinear sample at continuous coordinates with clamp-to-edge. The
    /// pixel grid convention puts sample centers at integer coordinates.
    pub fn sample_bilinear(&self, fx: T, fy: T, c: usize) -> T {
        let maxx = real::<T>((self.width - 1) as f64);
        let maxy = real::<T>((self.height - 1) as f64);
        let fx = fx.max(T::zero()).min(maxx);
        let fy = fy.max(T::zero()).min(maxy);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let x0u = to_f64(x0) as usize;
        let y0u = to_f64(y0) as usize;
        let x1u = (x0u + 1).min(self.width - 1);
        let y1u = (y0u + 1).min(self.height - 1);
        let one = T::one();
        let v00 = self.get(x0u, y0u, c);
        let v10 = self.get(x1u, y0u, c);
        let v01 = self.get(x0u, y1u, c);
        let v11 = self.get(x1u, y1u, c);
        (v00 * (one - tx) + v10 * tx) * (one - ty) + (v01 * (one - tx) + v11 * tx) * ty
    }

    /// Resample the box `[x1, x2] x [y1, y2]` (pixel units) to an
    /// `out_w x out_h` patch by bilinear sampling.
    pub fn crop_resize(&self, x1: T, y1: T, x2: T, y2: T, out_w: usize, out_h: usize) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) || out_w == 0 || out_h == 0 {
            return Err(CoreError::invalid(
                "crop_resize",
                format!(
                    "degenerate crop [{}, {}, {}, {}] to {}x{}",
                    x1, y1, x2, y2, out_w, out_h
                ),
            ));
        }
        let half = real::<T>(0.5);
        let sx = (x2 - x1) / real::<T>(out_w as f64);
        let sy = (y2 - y1) / real::<T>(out_h as f64);
        let mut out = ImageF::new(out_w, out_h);
        for oy in 0..out_h {
            let fy = y1 + (real::<T>(oy as f64) + half) * sy - half;
            for ox in 0..out_w {
                let fx = x1 + (real::<T>(ox as f64) + half) * sx - half;
                for c in 0..CHANNELS {
                    out.set(ox, oy, c, self.sample_bilinear(fx, fy, c));
                }
            }
        }
        out.clamp01();
        Ok(out)
    }

    /// Resize the whole image.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Result<Self> {
        self.crop_resize(
            T::zero(),
            T::zero(),
            real(self.width as f64),
            real(self.height as f64),
            out_w,
            out_h,
        )
    }

    /// 8-bit quantization used for PNG persistence: `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| {
                let q = (to_f64(*v) * 255.0).round();
                q.clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes
            .iter()
            .map(|b| real::<T>(f64::from(*b) / 255.0))
            .collect();
        Self::from_data(width, height, data)
    }

    /// Checksum of the quantized bytes; stable across platforms.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        }
        image::save_buffer(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?
            .decode()
            .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?
            .to_rgb8();
        Self::from_bytes(img.width() as usize, img.height() as usize, img.as_raw())
    }
}
