//! Synthetic labeled source domain: shape scenes with tight boxes.
//!
//! Each category maps to a shape archetype (disc, square, triangle, bar)
//! and a category-specific hue range, drawn over a value-noise textured
//! background. Scenes are deterministic per (config, seed, image index).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imagef::ImageF;
use crate::rng::{fnv1a, indexed_seed, seed_rng};
use crate::scalar::{real, to_f64, Real};

/// Axis-aligned box in pixel units, corners exclusive of nothing: the box
/// covers `[x1, x2] x [y1, y2]` with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF<T: Real> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Real> BoxF<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(CoreError::invalid(
                "BoxF::new",
                format!("degenerate box [{}, {}, {}, {}]", x1, y1, x2, y2),
            ));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1
            && self.y2 > self.y1
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = real::<T>(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    pub fn intersection_area(&self, other: &BoxF<T>) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    /// Clip into `[0, w] x [0, h]`; `None` when nothing remains.
    pub fn clip(&self, w: T, h: T) -> Option<BoxF<T>> {
        let b = BoxF {
            x1: self.x1.max(T::zero()),
            y1: self.y1.max(T::zero()),
            x2: self.x2.min(w),
            y2: self.y2.min(h),
        };
        b.is_valid().then_some(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [
            to_f64(self.x1),
            to_f64(self.y1),
            to_f64(self.x2),
            to_f64(self.y2),
        ]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(real(a[0]), real(a[1]), real(a[2]), real(a[3]))
    }
}

/// One labeled image: the unit of datasets and evaluation.
#[derive(Debug, Clone)]
pub struct DetectionSample<T: Real> {
    pub id: String,
    pub image: ImageF<T>,
    pub boxes: Vec<BoxF<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> DetectionSample<T> {
    pub fn new(id: String, image: ImageF<T>, boxes: Vec<BoxF<T>>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(CoreError::invalid(
                "DetectionSample::new",
                format!("{} boxes vs {} labels", boxes.len(), labels.len()),
            ));
        }
        if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
            return Err(CoreError::invalid(
                "DetectionSample::new",
                format!("invalid box {:?}", b.to_array()),
            ));
        }
        Ok(Self {
            id,
            image,
            boxes,
            labels,
        })
    }

    /// Checksum over image bytes and annotations; stable across platforms.
    pub fn checksum(&self) -> u64 {
        let mut bytes = self.image.to_bytes();
        for (b, l) in self.boxes.iter().zip(&self.labels) {
            for v in b.to_array() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&(*l as u64).to_le_bytes());
        }
        bytes.extend_from_slice(self.id.as_bytes());
        fnv1a(&bytes)
    }
}

/// Checksum of a whole dataset in order.
pub fn dataset_checksum<T: Real>(samples: &[DetectionSample<T>]) -> u64 {
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        bytes.extend_from_slice(&s.checksum().to_le_bytes());
    }
    fnv1a(&bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_images: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Number of object categories, K.
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Lower bound on generated box area, pixels squared.
    pub min_box_area: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_images: 100,
            image_size: 64,
            categories: 3,
            min_objects: 1,
            max_objects: 3,
            min_box_area: 100.0,
        }
    }
}

const ARCHETYPES: [&str; 4] = ["disc", "square", "triangle", "bar"];

/// Stable category names: archetype names, suffixed when K exceeds the
/// archetype count.
pub fn category_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|c| {
            let base = ARCHETYPES[c % ARCHETYPES.len()];
            if c < ARCHETYPES.len() {
                base.to_string()
            } else {
                format!("{}-{}", base, c / ARCHETYPES.len() + 1)
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Bilinear lattice noise in [0, 1] with the given lattice pitch.
pub(crate) fn value_noise(rng: &mut impl Rng, w: usize, h: usize, pitch: usize) -> Vec<f64> {
    let gw = w / pitch + 2;
    let gh = h / pitch + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / pitch as f64;
        let y0 = fy as usize;
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / pitch as f64;
            let x0 = fx as usize;
            let tx = fx - x0 as f64;
            let v00 = grid[y0 * gw + x0];
            let v10 = grid[y0 * gw + x0 + 1];
            let v01 = grid[(y0 + 1) * gw + x0];
            let v11 = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = (v00 * (1.0 - tx) + v10 * tx) * (1.0 - ty)
                + (v01 * (1.0 - tx) + v11 * tx) * ty;
        }
    }
    out
}

/// Subpixel coverage of one shape over pixel (px, py), 3x3 supersampling.
fn shape_coverage(archetype: usize, bx: &BoxF<f64>, px: usize, py: usize) -> f64 {
    let (cx, cy) = bx.center();
    let rx = bx.width() / 2.0;
    let ry = bx.height() / 2.0;
    let mut hits = 0u32;
    for sy in 0..3 {
        for sx in 0..3 {
            let x = px as f64 + (sx as f64 + 0.5) / 3.0;
            let y = py as f64 + (sy as f64 + 0.5) / 3.0;
            let inside = match archetype {
                0 => {
                    // Ellipse inscribed in the box.
                    let dx = (x - cx) / rx;
                    let dy = (y - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
                2 => {
                    // Upward triangle: apex at box top midpoint.
                    if y < bx.y1 || y > bx.y2 {
                        false
                    } else {
                        let t = (y - bx.y1) / (bx.y2 - bx.y1);
                        let hw = rx * t;
                        (x - cx).abs() <= hw
                    }
                }
                // Square and bar fill the whole box.
                _ => x >= bx.x1 && x <= bx.x2 && y >= bx.y1 && y <= bx.y2,
            };
            if inside {
                hits += 1;
            }
        }
    }
    f64::from(hits) / 9.0
}

fn pairwise_iou(a: &BoxF<f64>, b: &BoxF<f64>) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generate `n_images` deterministic shape scenes. Placement that stays
/// infeasible after bounded retries drops to fewer objects instead of
/// failing.
pub fn generate_dataset<T: Real>(spec: &DatasetSpec, seed: u64) -> Result<Vec<DetectionSample<T>>> {
    if spec.categories < 2 {
        return Err(CoreError::invalid(
            "generate_dataset",
            format!("need at least 2 categories, got {}", spec.categories),
        ));
    }
    if spec.image_size < 48 {
        return Err(CoreError::invalid(
            "generate_dataset",
            format!("image_size {} below minimum 48", spec.image_size),
        ));
    }
    if spec.min_objects == 0 || spec.max_objects < spec.min_objects {
        return Err(CoreError::invalid(
            "generate_dataset",
            format!(
                "bad objects-per-image range [{}, {}]",
                spec.min_objects, spec.max_objects
            ),
        ));
    }
    let half_side = spec.image_size as f64 / 2.0;
    if spec.min_box_area > half_side * half_side {
        return Err(CoreError::invalid(
            "generate_dataset",
            format!(
                "min_box_area {} cannot fit at image_size {}",
                spec.min_box_area, spec.image_size
            ),
        ));
    }

    let size = spec.image_size;
    let sizef = size as f64;
    let k = spec.categories;
    let mut samples = Vec::with_capacity(spec.n_images);
    for index in 0..spec.n_images {
        let mut rng = seed_rng(indexed_seed(seed, index as u64));

        // Textured background: muted base color modulated by two octaves
        // of value noise, kept dim so objects stand out.
        let base_hue = rng.gen_range(0.0..360.0);
        let base = hsv_to_rgb(base_hue, 0.15, 0.45);
        let coarse = value_noise(&mut rng, size, size, (size / 8).max(2));
        let fine = value_noise(&mut rng, size, size, 3);
        let mut img = vec![0.0f64; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let n = 0.75 + 0.35 * coarse[y * size + x] + 0.12 * (fine[y * size + x] - 0.5);
                for c in 0..3 {
                    img[(y * size + x) * 3 + c] = (base[c] * n).clamp(0.0, 0.62);
                }
            }
        }

        let mut target = rng.gen_range(spec.min_objects..=spec.max_objects);
        let mut boxes: Vec<BoxF<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let min_side = spec.min_box_area.sqrt().max(0.18 * sizef).min(half_side);
        let max_side = (0.42 * sizef).max(min_side);
        let mut rounds = 0;
        while boxes.len() < target && rounds < 200 {
            rounds += 1;
            let mut placed = false;
            for _ in 0..40 {
                let cat = rng.gen_range(0..k);
                let archetype = cat % ARCHETYPES.len();
                let mut w = rng.gen_range(min_side..=max_side);
                let mut h = w;
                if archetype == 3 {
                    // Bars are elongated; keep the area above the floor.
                    let aspect = rng.gen_range(0.35..0.5);
                    h = (w * aspect).max(spec.min_box_area / w);
                    if rng.gen::<bool>() {
                        std::mem::swap(&mut w, &mut h);
                    }
                }
                if w > sizef - 4.0 || h > sizef - 4.0 {
                    continue;
                }
                let x1 = rng.gen_range(2.0..sizef - 2.0 - w);
                let y1 = rng.gen_range(2.0..sizef - 2.0 - h);
                let cand = BoxF {
                    x1,
                    y1,
                    x2: x1 + w,
                    y2: y1 + h,
                };
                if boxes.iter().any(|b| pairwise_iou(b, &cand) > 0.25) {
                    continue;
                }
                // Category hue band + small jitter; bright and saturated
                // against the dim background.
                let hue = 360.0 * cat as f64 / k as f64 + rng.gen_range(-18.0..18.0);
                let color = hsv_to_rgb(hue, rng.gen_range(0.65..0.9), rng.gen_range(0.75..1.0));
                let jitter_seed: u64 = rng.gen();
                let mut jrng = seed_rng(jitter_seed);
                let px1 = cand.x1.floor().max(0.0) as usize;
                let py1 = cand.y1.floor().max(0.0) as usize;
                let px2 = (cand.x2.ceil() as usize).min(size);
                let py2 = (cand.y2.ceil() as usize).min(size);
                for py in py1..py2 {
                    for px in px1..px2 {
                        let cov = shape_coverage(archetype, &cand, px, py);
                        if cov == 0.0 {
                            continue;
                        }
                        let shade = 1.0 + jrng.gen_range(-0.04..0.04);
                        for c in 0..3 {
                            let i = (py * size + px) * 3 + c;
                            let sv = (color[c] * shade).clamp(0.0, 1.0);
                            img[i] = img[i] * (1.0 - cov) + sv * cov;
                        }
                    }
                }
                boxes.push(cand);
                labels.push(cat);
                placed = true;
                break;
            }
            if !placed {
                // Crowded scene: settle for fewer objects, never below one.
                if target > boxes.len().max(1) {
                    target -= 1;
                } else if !boxes.is_empty() {
                    break;
                }
            }
        }

        let data: Vec<T> = img.into_iter().map(real::<T>).collect();
        let image = ImageF::from_data(size, size, data)?;
        let tboxes = boxes
            .iter()
            .map(|b| BoxF {
                x1: real(b.x1),
                y1: real(b.y1),
                x2: real(b.x2),
                y2: real(b.y2),
            })
            .collect();
        samples.push(DetectionSample::new(
            format!("img_{index:05}"),
            image,
            tboxes,
            labels,
        )?);
    }
    Ok(samples)
}

// Persisted dataset schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

/// One scored detection, as persisted in results files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: [f64; 4],
    pub category_id: usize,
    pub score: f64,
}

/// Write PNGs under `<dir>/images/` plus `<dir>/dataset.json`.
pub fn save_dataset<T: Real>(
    dir: &Path,
    samples: &[DetectionSample<T>],
    categories: &[String],
) -> Result<()> {
    let mut file = DatasetFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories
            .iter()
            .enumerate()
            .map(|(id, name)| CategoryRecord {
                id,
                name: name.clone(),
            })
            .collect(),
    };
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save_png(&dir.join(&rel))?;
        file.images.push(ImageRecord {
            id: s.id.clone(),
            file: rel,
            width: s.image.width(),
            height: s.image.height(),
        });
        for (b, l) in s.boxes.iter().zip(&s.labels) {
            file.annotations.push(AnnotationRecord {
                image_id: s.id.clone(),
                bbox: b.to_array(),
                category_id: *l,
            });
        }
    }
    write_json(&dir.join("dataset.json"), &file)
}

/// Load a dataset written by [`save_dataset`]. Returns samples in the
/// annotation file's image order plus the category names by id.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<(Vec<DetectionSample<T>>, Vec<String>)> {
    let file: DatasetFile = read_json(&dir.join("dataset.json"))?;
    let mut by_image: BTreeMap<&str, (Vec<BoxF<T>>, Vec<usize>)> = BTreeMap::new();
    for a in &file.annotations {
        let entry = by_image.entry(&a.image_id).or_default();
        entry.0.push(BoxF::from_array(a.bbox)?);
        entry.1.push(a.category_id);
    }
    let mut samples = Vec::with_capacity(file.images.len());
    for rec in &file.images {
        let image = ImageF::load_png(&dir.join(&rec.file))?;
        if image.width() != rec.width || image.height() != rec.height {
            return Err(CoreError::parse(
                dir.join(&rec.file).display().to_string(),
                format!(
                    "recorded {}x{} but file is {}x{}",
                    rec.width,
                    rec.height,
                    image.width(),
                    image.height()
                ),
            ));
        }
        let (boxes, labels) = by_image.remove(rec.id.as_str()).unwrap_or_default();
        samples.push(DetectionSample::new(rec.id.clone(), image, boxes, labels)?);
    }
    if let Some((orphan, _)) = by_image.into_iter().next() {
        return Err(CoreError::IdMismatch {
            msg: format!("annotation references unknown image id {orphan:?}"),
        });
    }
    let mut names = vec![String::new(); file.categories.len()];
    for c in &file.categories {
        if c.id >= names.len() {
            return Err(CoreError::parse(
                dir.join("dataset.json").display().to_string(),
                format!("category id {} out of range", c.id),
            ));
        }
        names[c.id] = c.name.clone();
    }
    Ok((samples, names))
}

pub fn save_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    write_json(path, &dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_json(path)
}

/// Pretty-printed JSON writer shared by the persistence layer.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            n_images: 6,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset::<f64>(&spec(), 11).unwrap();
        let b = generate_dataset::<f64>(&spec(), 11).unwrap();
        assert_eq!(dataset_checksum(&a), dataset_checksum(&b));
        let c = generate_dataset::<f64>(&spec(), 12).unwrap();
        assert_ne!(dataset_checksum(&a), dataset_checksum(&c));
    }

    #[test]
    fn single_object_range_gives_one_box_each() {
        let s = DatasetSpec {
            n_images: 8,
            min_objects: 1,
            max_objects: 1,
            ..DatasetSpec::default()
        };
        for sample in generate_dataset::<f64>(&s, 3).unwrap() {
            assert_eq!(sample.boxes.len(), 1);
            assert_eq!(sample.labels.len(), 1);
        }
    }

    #[test]
    fn boxes_respect_area_floor_and_bounds() {
        let sp = spec();
        for sample in generate_dataset::<f64>(&sp, 5).unwrap() {
            assert!(!sample.boxes.is_empty());
            for b in &sample.boxes {
                assert!(b.area() >= sp.min_box_area);
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= sp.image_size as f64 && b.y2 <= sp.image_size as f64);
            }
            for l in &sample.labels {
                assert!(*l < sp.categories);
            }
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut s = spec();
        s.categories = 1;
        assert!(generate_dataset::<f64>(&s, 0).is_err());
        let mut s = spec();
        s.image_size = 32;
        assert!(generate_dataset::<f64>(&s, 0).is_err());
        let mut s = spec();
        s.min_objects = 2;
        s.max_objects = 1;
        assert!(generate_dataset::<f64>(&s, 0).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset::<f64>(&spec(), 21).unwrap();
        let names = category_names(3);
        save_dataset(dir.path(), &samples, &names).unwrap();
        let (back, names_back) = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(names_back, names);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.boxes, b.boxes);
            // Pixels round-trip through 8-bit quantization.
            assert_eq!(a.image.to_bytes(), b.image.to_bytes());
        }
    }

    #[test]
    fn category_names_are_distinct() {
        let names = category_names(9);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn box_geometry_basics() {
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoxF::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_eq!(a.area(), 4.0);
        assert_eq!(a.intersection_area(&b), 1.0);
        assert!(BoxF::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(a.clip(1.0, 1.0).is_some());
        assert!(b.clip(1.0, 1.0).is_none());
    }
}
