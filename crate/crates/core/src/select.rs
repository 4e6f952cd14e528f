//! Multi-region text-image selection over a batch.
//!
//! Per image: one representative crop per unique category (largest box,
//! ties by lowest (y1, x1)) plus one background window sampled by
//! rejection until it barely overlaps any ground truth. Crops from the
//! augmented view reuse the same coordinates via [`SelectionOutput::recrop`],
//! keeping region pairs positionally aligned across domains.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxF, DetectionSample};
use crate::error::{CoreError, Result};
use crate::eval::iou;
use crate::imagef::ImageF;
use crate::rng::{indexed_seed, seed_rng};
use crate::scalar::{real, to_f64, Real};

/// Maximum IoU a background window may share with any ground-truth box.
pub const BG_MAX_IOU: f64 = 0.05;
/// Rejection attempts before settling for the least-overlapping window.
const BG_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Original,
    Augmented,
}

/// Prompt templates with a `{c}` placeholder for the category token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub original: String,
    pub augmented: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            original: "a photo of a {c} in clear conditions".to_string(),
            augmented: "a photo of a {c} in adverse conditions".to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn render(&self, category: &str, condition: Condition) -> String {
        let template = match condition {
            Condition::Original => &self.original,
            Condition::Augmented => &self.augmented,
        };
        template.replace("{c}", category)
    }

    /// Invert [`render`](Self::render): recover the category token and
    /// condition from a prompt, if it matches either template.
    pub fn extract<'a>(&self, prompt: &'a str) -> Option<(&'a str, Condition)> {
        for (template, condition) in [
            (&self.original, Condition::Original),
            (&self.augmented, Condition::Augmented),
        ] {
            let (prefix, suffix) = template.split_once("{c}")?;
            if prompt.len() >= prefix.len() + suffix.len()
                && prompt.starts_with(prefix)
                && prompt.ends_with(suffix)
            {
                return Some((&prompt[prefix.len()..prompt.len() - suffix.len()], condition));
            }
        }
        None
    }
}

/// Render one prompt per category name under the given condition.
pub fn render_prompts(
    categories: &[String],
    condition: Condition,
    templates: &PromptTemplates,
) -> Vec<String> {
    categories
        .iter()
        .map(|c| templates.render(c, condition))
        .collect()
}

/// Source location of a crop: which batch image and which window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionRef<T: Real> {
    pub image_index: usize,
    pub box_: BoxF<T>,
    /// Category id for object crops; `None` for background windows.
    pub category: Option<usize>,
}

/// Algorithm output aggregated over the batch in image order.
#[derive(Debug, Clone)]
pub struct SelectionOutput<T: Real> {
    pub crop_size: usize,
    /// O: one crop per unique category per image.
    pub object_crops: Vec<ImageF<T>>,
    pub object_refs: Vec<RegionRef<T>>,
    /// B: exactly one background crop per image.
    pub background_crops: Vec<ImageF<T>>,
    pub background_refs: Vec<RegionRef<T>>,
    /// C_obj: category names aligned with `object_crops`.
    pub obj_categories: Vec<String>,
    /// C_bg: the literal token "background", one per image.
    pub bg_categories: Vec<String>,
    pub prompts_obj_ori: Vec<String>,
    pub prompts_obj_aug: Vec<String>,
    pub prompts_bg_ori: Vec<String>,
    pub prompts_bg_aug: Vec<String>,
    /// Per image: true when no window met the IoU bound and the
    /// least-overlapping attempt was taken instead.
    pub bg_fallback: Vec<bool>,
}

impl<T: Real> SelectionOutput<T> {
    /// Re-extract crops at the recorded coordinates from another view of
    /// the same batch (the augmented images).
    pub fn recrop(&self, samples: &[DetectionSample<T>], refs: &[RegionRef<T>]) -> Result<Vec<ImageF<T>>> {
        refs.iter()
            .map(|r| {
                let s = samples.get(r.image_index).ok_or_else(|| {
                    CoreError::invalid("recrop", format!("image index {} out of range", r.image_index))
                })?;
                s.image.crop_resize(
                    r.box_.x1,
                    r.box_.y1,
                    r.box_.x2,
                    r.box_.y2,
                    self.crop_size,
                    self.crop_size,
                )
            })
            .collect()
    }

    pub fn recrop_objects(&self, samples: &[DetectionSample<T>]) -> Result<Vec<ImageF<T>>> {
        self.recrop(samples, &self.object_refs)
    }

    pub fn recrop_backgrounds(&self, samples: &[DetectionSample<T>]) -> Result<Vec<ImageF<T>>> {
        self.recrop(samples, &self.background_refs)
    }
}

/// Representative instance of one category: largest area, ties broken by
/// lowest (y1, x1).
fn representative<T: Real>(sample: &DetectionSample<T>, category: usize) -> usize {
    let mut best = usize::MAX;
    for (i, (b, l)) in sample.boxes.iter().zip(&sample.labels).enumerate() {
        if *l != category {
            continue;
        }
        if best == usize::MAX {
            best = i;
            continue;
        }
        let cur = &sample.boxes[best];
        let better = match b.area().partial_cmp(&cur.area()) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Equal) => {
                (to_f64(b.y1), to_f64(b.x1)) < (to_f64(cur.y1), to_f64(cur.x1))
            }
            _ => false,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Sample a square background window, rejecting overlap with ground
/// truth. Returns the window and whether the fallback path fired.
fn sample_background<T: Real>(
    sample: &DetectionSample<T>,
    rng: &mut impl Rng,
) -> (BoxF<T>, bool) {
    let w = sample.image.width() as f64;
    let h = sample.image.height() as f64;
    let side_lo = 0.25 * w.min(h);
    let side_hi = 0.50 * w.min(h);
    let mut best: Option<(BoxF<T>, f64)> = None;
    for _ in 0..BG_ATTEMPTS {
        let side = rng.gen_range(side_lo..=side_hi);
        let x1 = rng.gen_range(0.0..=(w - side));
        let y1 = rng.gen_range(0.0..=(h - side));
        let cand = BoxF {
            x1: real::<T>(x1),
            y1: real::<T>(y1),
            x2: real::<T>(x1 + side),
            y2: real::<T>(y1 + side),
        };
        let worst = sample
            .boxes
            .iter()
            .map(|b| to_f64(iou(&cand, b)))
            .fold(0.0f64, f64::max);
        if worst <= BG_MAX_IOU {
            return (cand, false);
        }
        if best.as_ref().map_or(true, |(_, bi)| worst < *bi) {
            best = Some((cand, worst));
        }
    }
    (best.expect("at least one attempt ran").0, true)
}

/// Run the selection over a batch. Deterministic per (batch, seed); the
/// background sampler draws from a per-image derived stream.
pub fn select_regions<T: Real>(
    batch: &[DetectionSample<T>],
    category_names: &[String],
    crop_size: usize,
    templates: &PromptTemplates,
    seed: u64,
) -> Result<SelectionOutput<T>> {
    if crop_size == 0 {
        return Err(CoreError::invalid("select_regions", "crop_size is zero"));
    }
    let mut out = SelectionOutput {
        crop_size,
        object_crops: Vec::new(),
        object_refs: Vec::new(),
        background_crops: Vec::new(),
        background_refs: Vec::new(),
        obj_categories: Vec::new(),
        bg_categories: Vec::new(),
        prompts_obj_ori: Vec::new(),
        prompts_obj_aug: Vec::new(),
        prompts_bg_ori: Vec::new(),
        prompts_bg_aug: Vec::new(),
        bg_fallback: Vec::new(),
    };
    for (i, sample) in batch.iter().enumerate() {
        if sample.boxes.is_empty() {
            return Err(CoreError::invalid(
                "select_regions",
                format!("sample {} has no objects", sample.id),
            ));
        }
        let mut cats: Vec<usize> = sample.labels.clone();
        cats.sort_unstable();
        cats.dedup();
        for cat in cats {
            let name = category_names.get(cat).ok_or_else(|| {
                CoreError::invalid(
                    "select_regions",
                    format!("category id {cat} has no name (got {})", category_names.len()),
                )
            })?;
            let bi = representative(sample, cat);
            let b = sample.boxes[bi];
            let crop = sample
                .image
                .crop_resize(b.x1, b.y1, b.x2, b.y2, crop_size, crop_size)?;
            out.object_crops.push(crop);
            out.object_refs.push(RegionRef {
                image_index: i,
                box_: b,
                category: Some(cat),
            });
            out.obj_categories.push(name.clone());
        }
        let mut rng = seed_rng(indexed_seed(seed, i as u64));
        let (bg, fallback) = sample_background(sample, &mut rng);
        let crop = sample
            .image
            .crop_resize(bg.x1, bg.y1, bg.x2, bg.y2, crop_size, crop_size)?;
        out.background_crops.push(crop);
        out.background_refs.push(RegionRef {
            image_index: i,
            box_: bg,
            category: None,
        });
        out.bg_categories.push("background".to_string());
        out.bg_fallback.push(fallback);
    }
    out.prompts_obj_ori = render_prompts(&out.obj_categories, Condition::Original, templates);
    out.prompts_obj_aug = render_prompts(&out.obj_categories, Condition::Augmented, templates);
    out.prompts_bg_ori = render_prompts(&out.bg_categories, Condition::Original, templates);
    out.prompts_bg_aug = render_prompts(&out.bg_categories, Condition::Augmented, templates);
    Ok(out)
}
