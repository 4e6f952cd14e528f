//! Miniature two-stage detector sized for small synthetic scenes.
//!
//! Three stride-2 convolution blocks feed an anchor-based proposal stage
//! and a pooled ROI head. The proposal stage supports a two-view refine
//! loss and proposal mixing: proposals from the clean and augmented views
//! are concatenated (provenance kept, each pooling from its own view's
//! feature map) so the ROI head trains on both domains against shared
//! ground truth.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{BoxF, DetectionSample};
use crate::error::{CoreError, Result};
use crate::eval::iou;
use crate::grad::{GatherIndices, PoolGroups, Tensor};
use crate::imagef::{ImageF, CHANNELS};
use crate::rng::seed_rng;
use crate::scalar::{real, to_f64, Real};

/// Total spatial downsampling of the backbone.
pub const STRIDE: usize = 8;
/// Box deltas are clamped here before exponentiation when decoding.
const MAX_DELTA: f64 = 4.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DetectorConfig {
    pub n_categories: usize,
    pub channels: [usize; 3],
    pub anchor_scales: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_iou: f64,
    pub rpn_proposals: usize,
    pub roi_pos_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub embed_dim: usize,
    pub smooth_l1_beta: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            n_categories: 3,
            channels: [8, 16, 32],
            anchor_scales: vec![12.0, 24.0, 40.0],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            rpn_proposals: 64,
            roi_pos_iou: 0.5,
            roi_batch: 32,
            roi_pos_fraction: 0.25,
            embed_dim: 64,
            smooth_l1_beta: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 {
            return Err(CoreError::invalid("detector_config", "no categories"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid("detector_config", "zero channel width"));
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::invalid("detector_config", "bad anchor scales"));
        }
        for (name, v) in [
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("roi_pos_iou", self.roi_pos_iou),
            ("roi_pos_fraction", self.roi_pos_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::invalid(
                    "detector_config",
                    format!("{name} = {v} outside [0, 1]"),
                ));
            }
        }
        if self.rpn_neg_iou > self.rpn_pos_iou {
            return Err(CoreError::invalid(
                "detector_config",
                "rpn_neg_iou above rpn_pos_iou",
            ));
        }
        if self.rpn_proposals == 0 || self.roi_batch == 0 {
            return Err(CoreError::invalid("detector_config", "zero budget"));
        }
        if self.embed_dim == 0 {
            return Err(CoreError::invalid("detector_config", "zero embed_dim"));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(CoreError::invalid("detector_config", "non-positive beta"));
        }
        Ok(())
    }

    /// Index used as the background class in the ROI head.
    pub fn background_class(&self) -> usize {
        self.n_categories
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Ori,
    Aug,
}

/// Scored candidate boxes, kept sorted by descending score.
#[derive(Debug, Clone)]
pub struct ProposalSet<T: Real> {
    pub boxes: Vec<BoxF<T>>,
    pub scores: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl<T: Real> ProposalSet<T> {
    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            scores: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn sort_by_score(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.boxes = order.iter().map(|&i| self.boxes[i]).collect();
        self.provenance = order.iter().map(|&i| self.provenance[i]).collect();
        self.scores = order.iter().map(|&i| self.scores[i]).collect();
    }
}

/// Per-view proposal-stage losses over the same scene.
#[derive(Debug, Clone)]
pub struct RpnLossPair<T: Real> {
    pub l_ori: Tensor<T>,
    pub l_aug: Tensor<T>,
}

/// Refine loss: plain mean of the clean-view and augmented-view
/// proposal-stage losses. It replaces the single-view term entirely.
pub fn cprm_refine<T: Real>(pair: &RpnLossPair<T>) -> Result<Tensor<T>> {
    Ok(pair.l_ori.add(&pair.l_aug)?.scale(real::<T>(0.5)))
}

/// Proposal mixing: concatenate both views' proposals, keep provenance,
/// re-sort by score. Boxes pass through untouched.
pub fn cprm_mix<T: Real>(r_ori: &ProposalSet<T>, r_aug: &ProposalSet<T>) -> ProposalSet<T> {
    let mut out = ProposalSet {
        boxes: [r_ori.boxes.clone(), r_aug.boxes.clone()].concat(),
        scores: [r_ori.scores.clone(), r_aug.scores.clone()].concat(),
        provenance: [r_ori.provenance.clone(), r_aug.provenance.clone()].concat(),
    };
    out.sort_by_score();
    out
}

/// Weighted total objective: roi + refine + alpha * region-interaction.
pub fn total_loss<T: Real>(
    l_roi: &Tensor<T>,
    l_cprm: &Tensor<T>,
    l_crfi: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(CoreError::invalid(
            "total_loss",
            format!("alpha must be non-negative, got {alpha}"),
        ));
    }
    l_roi
        .add(l_cprm)?
        .add(&l_crfi.scale(real::<T>(alpha)))
}

/// Backbone output: `[h*w, channels]` rows in row-major spatial order.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Real> {
    pub map: Tensor<T>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// One square anchor per feature cell per scale, clipped to the image.
#[derive(Debug, Clone)]
pub struct AnchorGrid<T: Real> {
    pub anchors: Vec<BoxF<T>>,
    pub image_w: usize,
    pub image_h: usize,
    pub scales: usize,
}

impl<T: Real> AnchorGrid<T> {
    /// Anchor order is cell-major (row-major cells), then scale, which
    /// matches the row layout of the proposal-stage head outputs.
    pub fn build(image_w: usize, image_h: usize, fh: usize, fw: usize, scales: &[f64]) -> Result<Self> {
        if fh == 0 || fw == 0 || scales.is_empty() {
            return Err(CoreError::invalid("anchor_grid", "empty feature map"));
        }
        let mut anchors = Vec::with_capacity(fh * fw * scales.len());
        for y in 0..fh {
            for x in 0..fw {
                let cx = (x as f64 + 0.5) * STRIDE as f64;
                let cy = (y as f64 + 0.5) * STRIDE as f64;
                for &s in scales {
                    let x1 = (cx - s / 2.0).max(0.0);
                    let y1 = (cy - s / 2.0).max(0.0);
                    let x2 = (cx + s / 2.0).min(image_w as f64);
                    let y2 = (cy + s / 2.0).min(image_h as f64);
                    anchors.push(BoxF::new(
                        real::<T>(x1),
                        real::<T>(y1),
                        real::<T>(x2),
                        real::<T>(y2),
                    )?);
                }
            }
        }
        Ok(Self {
            anchors,
            image_w,
            image_h,
            scales: scales.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Deltas of `gt` relative to reference box `r`:
/// (dx, dy) in units of the reference size, (dw, dh) as log ratios.
fn box_targets<T: Real>(r: &BoxF<T>, gt: &BoxF<T>) -> [f64; 4] {
    let (rw, rh) = (to_f64(r.x2 - r.x1), to_f64(r.y2 - r.y1));
    let (rcx, rcy) = (to_f64(r.x1) + rw / 2.0, to_f64(r.y1) + rh / 2.0);
    let (gw, gh) = (to_f64(gt.x2 - gt.x1), to_f64(gt.y2 - gt.y1));
    let (gcx, gcy) = (to_f64(gt.x1) + gw / 2.0, to_f64(gt.y1) + gh / 2.0);
    [
        (gcx - rcx) / rw,
        (gcy - rcy) / rh,
        (gw / rw).ln(),
        (gh / rh).ln(),
    ]
}

/// Apply deltas to a reference box and clip to the image.
fn box_decode<T: Real>(r: &BoxF<T>, d: &[f64], image_w: usize, image_h: usize) -> Option<BoxF<T>> {
    let (rw, rh) = (to_f64(r.x2 - r.x1), to_f64(r.y2 - r.y1));
    let (rcx, rcy) = (to_f64(r.x1) + rw / 2.0, to_f64(r.y1) + rh / 2.0);
    let cx = rcx + d[0].clamp(-MAX_DELTA, MAX_DELTA) * rw;
    let cy = rcy + d[1].clamp(-MAX_DELTA, MAX_DELTA) * rh;
    let w = rw * d[2].clamp(-MAX_DELTA, MAX_DELTA).exp();
    let h = rh * d[3].clamp(-MAX_DELTA, MAX_DELTA).exp();
    let x1 = (cx - w / 2.0).clamp(0.0, image_w as f64);
    let y1 = (cy - h / 2.0).clamp(0.0, image_h as f64);
    let x2 = (cx + w / 2.0).clamp(0.0, image_w as f64);
    let y2 = (cy + h / 2.0).clamp(0.0, image_h as f64);
    if x2 - x1 < 1e-3 || y2 - y1 < 1e-3 {
        return None;
    }
    BoxF::new(real::<T>(x1), real::<T>(y1), real::<T>(x2), real::<T>(y2)).ok()
}

/// Greedy non-maximum suppression over score-descending candidates.
/// Returns indices of the survivors, in score order.
fn nms<T: Real>(boxes: &[BoxF<T>], order: &[usize], iou_thr: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for &i in order {
        if keep
            .iter()
            .all(|&k| to_f64(iou(&boxes[i], &boxes[k])) < iou_thr)
        {
            keep.push(i);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AnchorLabel {
    Pos(usize),
    Neg,
    Ignore,
}

/// Anchor assignment: the best anchor of every ground-truth box is
/// positive, as is any anchor above the positive bound; anchors below
/// the negative bound are negative; everything else is ignored. With no
/// ground truth every anchor is negative.
fn assign_anchors<T: Real>(
    anchors: &[BoxF<T>],
    gts: &[BoxF<T>],
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Neg; anchors.len()];
    }
    let mut labels = vec![AnchorLabel::Ignore; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut gt_best_anchor = vec![usize::MAX; gts.len()];
    let mut gt_best_iou = vec![0.0f64; gts.len()];
    for (a, ab) in anchors.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let v = to_f64(iou(ab, gb));
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
            if v > gt_best_iou[g] {
                gt_best_iou[g] = v;
                gt_best_anchor[g] = a;
            }
        }
    }
    for a in 0..anchors.len() {
        if best_iou[a] >= pos_iou {
            labels[a] = AnchorLabel::Pos(best_gt[a]);
        } else if best_iou[a] <= neg_iou {
            labels[a] = AnchorLabel::Neg;
        }
    }
    for (g, &a) in gt_best_anchor.iter().enumerate() {
        if a != usize::MAX && gt_best_iou[g] > 0.0 {
            labels[a] = AnchorLabel::Pos(g);
        }
    }
    labels
}

#[derive(Debug)]
struct Linear<T: Real> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<T> = (0..in_dim * out_dim)
            .map(|_| real::<T>(rng.sample::<f64, _>(StandardNormal) * scale))
            .collect();
        Ok(Self {
            w: Tensor::param(&[in_dim, out_dim], w)?,
            b: Tensor::zeros(&[out_dim], true),
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

#[derive(Default)]
struct IndexCaches {
    im2col: HashMap<(usize, usize, usize), GatherIndices>,
    pool: HashMap<(usize, usize, usize), (PoolGroups, usize, usize)>,
}

use crate::crfi::ProjectionHead;

/// The detector: shared backbone, proposal stage, ROI head, and the
/// projection head that maps pooled crop features into the text space.
#[derive(Debug)]
pub struct ToyDetector<T: Real> {
    pub config: DetectorConfig,
    blocks: Vec<Linear<T>>,
    rpn_obj: Linear<T>,
    rpn_box: Linear<T>,
    roi_cls: Linear<T>,
    roi_reg: Linear<T>,
    pub projection: ProjectionHead<T>,
    caches: RefCell<IndexCaches>,
}

impl std::fmt::Debug for IndexCaches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexCaches").finish_non_exhaustive()
    }
}

impl<T: Real> ToyDetector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed_rng(seed);
        let [c1, c2, c3] = config.channels;
        let blocks = vec![
            Linear::new(9 * CHANNELS, c1, &mut rng)?,
            Linear::new(9 * c1, c2, &mut rng)?,
            Linear::new(9 * c2, c3, &mut rng)?,
        ];
        let n_scales = config.anchor_scales.len();
        let rpn_obj = Linear::new(c3, n_scales, &mut rng)?;
        let rpn_box = Linear::new(c3, 4 * n_scales, &mut rng)?;
        let pooled = 4 * c3;
        let roi_cls = Linear::new(pooled, config.n_categories + 1, &mut rng)?;
        let roi_reg = Linear::new(pooled, 4, &mut rng)?;
        let projection = ProjectionHead::new(c3, config.embed_dim, rng.gen())?;
        Ok(Self {
            config,
            blocks,
            rpn_obj,
            rpn_box,
            roi_cls,
            roi_reg,
            projection,
            caches: RefCell::new(IndexCaches::default()),
        })
    }

    /// Detection-path parameters, in a stable order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.w.clone());
            out.push(b.b.clone());
        }
        for l in [&self.rpn_obj, &self.rpn_box, &self.roi_cls, &self.roi_reg] {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        out
    }

    /// Detection-path parameters plus the projection head.
    pub fn all_params(&self) -> Vec<Tensor<T>> {
        let mut out = self.params();
        out.extend(self.projection.params());
        out
    }

    fn named_weights(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), b.w.clone()));
            out.push((format!("conv{i}.bias"), b.b.clone()));
        }
        for (name, l) in [
            ("rpn_obj", &self.rpn_obj),
            ("rpn_box", &self.rpn_box),
            ("roi_cls", &self.roi_cls),
            ("roi_reg", &self.roi_reg),
        ] {
            out.push((format!("{name}.weight"), l.w.clone()));
            out.push((format!("{name}.bias"), l.b.clone()));
        }
        out.push(("proj.weight".to_string(), self.projection.weight.clone()));
        out.push(("proj.bias".to_string(), self.projection.bias.clone()));
        out
    }

    fn im2col_indices(&self, h: usize, w: usize, c: usize) -> GatherIndices {
        if let Some(hit) = self.caches.borrow().im2col.get(&(h, w, c)) {
            return Rc::clone(hit);
        }
        let mut idx = Vec::with_capacity(h * w * 9 * c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ny, nx) = (y + dy, x + dx);
                        let inside = ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize;
                        for ch in 0..c {
                            idx.push(if inside {
                                Some((ny as usize * w + nx as usize) * c + ch)
                            } else {
                                None
                            });
                        }
                    }
                }
            }
        }
        let rc: GatherIndices = Rc::new(idx);
        self.caches
            .borrow_mut()
            .im2col
            .insert((h, w, c), Rc::clone(&rc));
        rc
    }

    fn pool_groups(&self, h: usize, w: usize, c: usize) -> (PoolGroups, usize, usize) {
        if let Some(hit) = self.caches.borrow().pool.get(&(h, w, c)) {
            return (Rc::clone(&hit.0), hit.1, hit.2);
        }
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let mut groups = Vec::with_capacity(ho * wo * c);
        for yo in 0..ho {
            for xo in 0..wo {
                for ch in 0..c {
                    let mut g = Vec::with_capacity(4);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * yo + dy, 2 * xo + dx);
                            if y < h && x < w {
                                g.push((y * w + x) * c + ch);
                            }
                        }
                    }
                    groups.push(g);
                }
            }
        }
        let rc: PoolGroups = Rc::new(groups);
        self.caches
            .borrow_mut()
            .pool
            .insert((h, w, c), (Rc::clone(&rc), ho, wo));
        (rc, ho, wo)
    }

    fn image_tensor(img: &ImageF<T>) -> Result<Tensor<T>> {
        Tensor::constant(&[img.width() * img.height(), CHANNELS], img.data().to_vec())
    }

    /// Run the convolution blocks, returning every intermediate feature
    /// map shallow-to-deep (strides 2, 4, 8).
    pub fn backbone_stages(&self, img: &ImageF<T>) -> Result<Vec<FeatureMap<T>>> {
        if img.width() < STRIDE || img.height() < STRIDE {
            return Err(CoreError::invalid(
                "backbone",
                format!("image {}x{} smaller than stride {STRIDE}", img.width(), img.height()),
            ));
        }
        let mut x = Self::image_tensor(img)?;
        let (mut h, mut w, mut c) = (img.height(), img.width(), CHANNELS);
        let mut stages = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let idx = self.im2col_indices(h, w, c);
            let cols = x.gather(&idx, &[h * w, 9 * c])?;
            let cout = block.w.shape()[1];
            let act = block.forward(&cols)?.relu();
            let (groups, ho, wo) = self.pool_groups(h, w, cout);
            x = act.pool_mean(&groups, &[ho * wo, cout])?;
            h = ho;
            w = wo;
            c = cout;
            stages.push(FeatureMap {
                map: x.clone(),
                h,
                w,
                channels: c,
            });
        }
        Ok(stages)
    }

    /// Run the three convolution blocks; output stride is 8.
    pub fn backbone(&self, img: &ImageF<T>) -> Result<FeatureMap<T>> {
        Ok(self
            .backbone_stages(img)?
            .pop()
            .expect("detector always has blocks"))
    }

    pub fn anchor_grid(&self, image_w: usize, image_h: usize, fm: &FeatureMap<T>) -> Result<AnchorGrid<T>> {
        AnchorGrid::build(image_w, image_h, fm.h, fm.w, &self.config.anchor_scales)
    }

    /// Per-anchor objectness logits `[n, 1]` and box deltas `[n, 4]`.
    fn rpn_head(&self, fm: &FeatureMap<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.config.anchor_scales.len();
        let n = fm.h * fm.w * s;
        let obj = self.rpn_obj.forward(&fm.map)?.reshape(&[n, 1])?;
        let deltas = self.rpn_box.forward(&fm.map)?.reshape(&[n, 4])?;
        Ok((obj, deltas))
    }

    fn rpn_loss(
        &self,
        obj: &Tensor<T>,
        deltas: &Tensor<T>,
        grid: &AnchorGrid<T>,
        gts: &[BoxF<T>],
    ) -> Result<Tensor<T>> {
        let labels = assign_anchors(
            &grid.anchors,
            gts,
            self.config.rpn_pos_iou,
            self.config.rpn_neg_iou,
        );
        let mut incl: Vec<Option<usize>> = Vec::new();
        let mut targets: Vec<T> = Vec::new();
        let mut pos: Vec<(usize, usize)> = Vec::new();
        for (a, l) in labels.iter().enumerate() {
            match l {
                AnchorLabel::Pos(g) => {
                    incl.push(Some(a));
                    targets.push(T::one());
                    pos.push((a, *g));
                }
                AnchorLabel::Neg => {
                    incl.push(Some(a));
                    targets.push(T::zero());
                }
                AnchorLabel::Ignore => {}
            }
        }
        let n_incl = incl.len();
        let idx: GatherIndices = Rc::new(incl);
        let cls = obj
            .gather(&idx, &[n_incl, 1])?
            .bce_with_logits(&targets)?
            .mean();
        if pos.is_empty() {
            return Ok(cls);
        }
        let mut didx: Vec<Option<usize>> = Vec::with_capacity(pos.len() * 4);
        let mut dtargets: Vec<T> = Vec::with_capacity(pos.len() * 4);
        for (a, g) in &pos {
            let t = box_targets(&grid.anchors[*a], &gts[*g]);
            for j in 0..4 {
                didx.push(Some(a * 4 + j));
                dtargets.push(real::<T>(t[j]));
            }
        }
        let didx: GatherIndices = Rc::new(didx);
        let reg = deltas
            .gather(&didx, &[pos.len(), 4])?
            .smooth_l1(&dtargets, real::<T>(self.config.smooth_l1_beta))?
            .mean();
        cls.add(&reg)
    }

    fn propose(
        &self,
        obj: &Tensor<T>,
        deltas: &Tensor<T>,
        grid: &AnchorGrid<T>,
        provenance: Provenance,
    ) -> ProposalSet<T> {
        let logits = obj.data_vec();
        let d = deltas.data_vec();
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (a, anchor) in grid.anchors.iter().enumerate() {
            let dv: [f64; 4] = [
                to_f64(d[a * 4]),
                to_f64(d[a * 4 + 1]),
                to_f64(d[a * 4 + 2]),
                to_f64(d[a * 4 + 3]),
            ];
            if let Some(b) = box_decode(anchor, &dv, grid.image_w, grid.image_h) {
                let x = to_f64(logits[a]);
                boxes.push(b);
                scores.push(1.0 / (1.0 + (-x).exp()));
            }
        }
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let keep = nms(&boxes, &order, self.config.rpn_nms_iou);
        let keep = &keep[..keep.len().min(self.config.rpn_proposals)];
        ProposalSet {
            boxes: keep.iter().map(|&i| boxes[i]).collect(),
            scores: keep.iter().map(|&i| scores[i]).collect(),
            provenance: vec![provenance; keep.len()],
        }
    }

    /// Proposal stage over one view: returns scored proposals (detached
    /// geometry) and the stage loss. With no ground truth the loss is
    /// the objectness term over all-negative anchors.
    pub fn rpn_forward(
        &self,
        fm: &FeatureMap<T>,
        grid: &AnchorGrid<T>,
        gts: &[BoxF<T>],
        provenance: Provenance,
    ) -> Result<(ProposalSet<T>, Tensor<T>)> {
        if grid.is_empty() {
            return Err(CoreError::invalid("rpn_forward", "empty anchor grid"));
        }
        if grid.len() != fm.h * fm.w * self.config.anchor_scales.len() {
            return Err(CoreError::invalid(
                "rpn_forward",
                format!(
                    "grid has {} anchors, feature map wants {}",
                    grid.len(),
                    fm.h * fm.w * self.config.anchor_scales.len()
                ),
            ));
        }
        let (obj, deltas) = self.rpn_head(fm)?;
        let loss = self.rpn_loss(&obj, &deltas, grid, gts)?;
        let proposals = self.propose(&obj, &deltas, grid, provenance);
        Ok((proposals, loss))
    }

    /// 2x2 average pooling of a box region on a feature map, flattened
    /// to one `[1, 4*channels]` row.
    fn pool_box(&self, fm: &FeatureMap<T>, b: &BoxF<T>) -> Result<Tensor<T>> {
        let c = fm.channels;
        let fx1 = to_f64(b.x1) / STRIDE as f64;
        let fy1 = to_f64(b.y1) / STRIDE as f64;
        let fx2 = to_f64(b.x2) / STRIDE as f64;
        let fy2 = to_f64(b.y2) / STRIDE as f64;
        let mut groups = Vec::with_capacity(4 * c);
        for by in 0..2 {
            for bx in 0..2 {
                let x_lo = fx1 + (fx2 - fx1) * bx as f64 / 2.0;
                let x_hi = fx1 + (fx2 - fx1) * (bx + 1) as f64 / 2.0;
                let y_lo = fy1 + (fy2 - fy1) * by as f64 / 2.0;
                let y_hi = fy1 + (fy2 - fy1) * (by + 1) as f64 / 2.0;
                let xa = (x_lo.floor().max(0.0) as usize).min(fm.w - 1);
                let xb = ((x_hi.ceil() as usize).max(xa + 1)).min(fm.w);
                let ya = (y_lo.floor().max(0.0) as usize).min(fm.h - 1);
                let yb = ((y_hi.ceil() as usize).max(ya + 1)).min(fm.h);
                for ch in 0..c {
                    let mut g = Vec::new();
                    for y in ya..yb {
                        for x in xa..xb {
                            g.push((y * fm.w + x) * c + ch);
                        }
                    }
                    groups.push(g);
                }
            }
        }
        let groups: PoolGroups = Rc::new(groups);
        fm.map.pool_mean(&groups, &[1, 4 * c])
    }

    /// ROI head loss over mixed-provenance proposals. Each proposal
    /// pools from its own view's feature map; targets come from the
    /// shared ground truth. With `append_gt` the ground-truth boxes join
    /// the pool as clean-view proposals so positives always exist.
    #[allow(clippy::too_many_arguments)]
    pub fn roi_forward(
        &self,
        fm_ori: &FeatureMap<T>,
        fm_aug: Option<&FeatureMap<T>>,
        proposals: &ProposalSet<T>,
        gts: &[BoxF<T>],
        gt_labels: &[usize],
        append_gt: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        if gts.len() != gt_labels.len() {
            return Err(CoreError::invalid("roi_forward", "gt/label length mismatch"));
        }
        if gt_labels
            .iter()
            .any(|&l| l >= self.config.n_categories)
        {
            return Err(CoreError::invalid("roi_forward", "label out of range"));
        }
        let mut boxes = proposals.boxes.clone();
        let mut provs = proposals.provenance.clone();
        if append_gt {
            boxes.extend(gts.iter().copied());
            provs.extend(std::iter::repeat(Provenance::Ori).take(gts.len()));
        }
        if boxes.is_empty() {
            return Err(CoreError::invalid("roi_forward", "no proposals"));
        }
        if provs.iter().any(|p| *p == Provenance::Aug) && fm_aug.is_none() {
            return Err(CoreError::invalid(
                "roi_forward",
                "augmented-view proposals but no augmented feature map",
            ));
        }

        let background = self.config.background_class();
        let mut assigned: Vec<(usize, Option<usize>)> = Vec::with_capacity(boxes.len());
        for b in &boxes {
            let mut best = 0.0f64;
            let mut arg = None;
            for (g, gb) in gts.iter().enumerate() {
                let v = to_f64(iou(b, gb));
                if v > best {
                    best = v;
                    arg = Some(g);
                }
            }
            if best >= self.config.roi_pos_iou {
                assigned.push((gt_labels[arg.unwrap()], arg));
            } else {
                assigned.push((background, None));
            }
        }

        let mut pos_idx: Vec<usize> = (0..boxes.len()).filter(|&i| assigned[i].1.is_some()).collect();
        let mut neg_idx: Vec<usize> = (0..boxes.len()).filter(|&i| assigned[i].1.is_none()).collect();
        pos_idx.shuffle(rng);
        neg_idx.shuffle(rng);
        let pos_budget = ((self.config.roi_batch as f64 * self.config.roi_pos_fraction).round()
            as usize)
            .max(1);
        let n_pos = pos_idx.len().min(pos_budget);
        let n_neg = neg_idx.len().min(self.config.roi_batch - n_pos);
        let mut selected: Vec<usize> = pos_idx[..n_pos]
            .iter()
            .chain(neg_idx[..n_neg].iter())
            .copied()
            .collect();
        selected.sort_unstable();

        let mut rows = Vec::with_capacity(selected.len());
        for &i in &selected {
            let fm = match provs[i] {
                Provenance::Ori => fm_ori,
                Provenance::Aug => fm_aug.expect("checked above"),
            };
            rows.push(self.pool_box(fm, &boxes[i])?);
        }
        let feats = Tensor::concat(&rows, 0)?;
        let labels: Vec<usize> = selected.iter().map(|&i| assigned[i].0).collect();
        let cls = self
            .roi_cls
            .forward(&feats)?
            .log_softmax()?
            .cross_entropy_from_logp(&labels)?;

        let reg_out = self.roi_reg.forward(&feats)?;
        let mut ridx: Vec<Option<usize>> = Vec::new();
        let mut rtargets: Vec<T> = Vec::new();
        for (row, &i) in selected.iter().enumerate() {
            if let Some(g) = assigned[i].1 {
                let t = box_targets(&boxes[i], &gts[g]);
                for j in 0..4 {
                    ridx.push(Some(row * 4 + j));
                    rtargets.push(real::<T>(t[j]));
                }
            }
        }
        if ridx.is_empty() {
            return Ok(cls);
        }
        let n_pos_rows = ridx.len() / 4;
        let ridx: GatherIndices = Rc::new(ridx);
        let reg = reg_out
            .gather(&ridx, &[n_pos_rows, 4])?
            .smooth_l1(&rtargets, real::<T>(self.config.smooth_l1_beta))?
            .mean();
        cls.add(&reg)
    }

    /// Standard two-stage inference on one image. Deterministic given
    /// the weights.
    pub fn detect(
        &self,
        img: &ImageF<T>,
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<(BoxF<T>, usize, f64)>> {
        let fm = self.backbone(img)?;
        let grid = self.anchor_grid(img.width(), img.height(), &fm)?;
        let (obj, deltas) = self.rpn_head(&fm)?;
        let proposals = self.propose(&obj, &deltas, &grid, Provenance::Ori);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let mut rows = Vec::with_capacity(proposals.len());
        for b in &proposals.boxes {
            rows.push(self.pool_box(&fm, b)?);
        }
        let feats = Tensor::concat(&rows, 0)?;
        let logp = self.roi_cls.forward(&feats)?.log_softmax()?.data_vec();
        let reg = self.roi_reg.forward(&feats)?.data_vec();
        let k1 = self.config.n_categories + 1;

        let mut cands: Vec<(BoxF<T>, usize, f64)> = Vec::new();
        for (i, b) in proposals.boxes.iter().enumerate() {
            let dv: [f64; 4] = [
                to_f64(reg[i * 4]),
                to_f64(reg[i * 4 + 1]),
                to_f64(reg[i * 4 + 2]),
                to_f64(reg[i * 4 + 3]),
            ];
            let Some(refined) = box_decode(b, &dv, img.width(), img.height()) else {
                continue;
            };
            for c in 0..self.config.n_categories {
                let score = to_f64(logp[i * k1 + c]).exp();
                if score >= score_thresh {
                    cands.push((refined, c, score));
                }
            }
        }
        let mut out: Vec<(BoxF<T>, usize, f64)> = Vec::new();
        for c in 0..self.config.n_categories {
            let class: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].1 == c).collect();
            let boxes: Vec<BoxF<T>> = class.iter().map(|&i| cands[i].0).collect();
            let mut order: Vec<usize> = (0..class.len()).collect();
            order.sort_by(|&a, &b| {
                cands[class[b]]
                    .2
                    .partial_cmp(&cands[class[a]].2)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for k in nms(&boxes, &order, nms_iou) {
                out.push(cands[class[k]]);
            }
        }
        out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        Ok(out)
    }

    /// Globally averaged channel activations from every backbone stage,
    /// concatenated shallow-to-deep. Shallow stages keep the vector
    /// sensitive to low-level distortion that deep pooling washes out.
    pub fn pooled_feature(&self, img: &ImageF<T>) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for fm in self.backbone_stages(img)? {
            let data = fm.map.data_vec();
            let cells = fm.h * fm.w;
            let n = real::<T>(cells as f64);
            for ch in 0..fm.channels {
                let mut s = T::zero();
                for cell in 0..cells {
                    s += data[cell * fm.channels + ch];
                }
                out.push(s / n);
            }
        }
        Ok(out)
    }

    /// Backbone + global average pooling over a set of crops, stacked
    /// into `[n, channels]`. Gradient flows into the convolution blocks.
    pub fn crop_feature_matrix(&self, crops: &[ImageF<T>]) -> Result<Tensor<T>> {
        if crops.is_empty() {
            return Err(CoreError::invalid("crop_feature_matrix", "no crops"));
        }
        let mut rows = Vec::with_capacity(crops.len());
        for crop in crops {
            let fm = self.backbone(crop)?;
            let c = fm.channels;
            let cells = fm.h * fm.w;
            let mut groups = Vec::with_capacity(c);
            for ch in 0..c {
                groups.push((0..cells).map(|cell| cell * c + ch).collect::<Vec<_>>());
            }
            let groups: PoolGroups = Rc::new(groups);
            rows.push(fm.map.pool_mean(&groups, &[1, c])?);
        }
        Tensor::concat(&rows, 0)
    }

    /// Run detection over samples, producing flat records for scoring.
    pub fn detect_dataset(
        &self,
        samples: &[DetectionSample<T>],
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<crate::data::DetectionRecord>> {
        let mut out = Vec::new();
        for s in samples {
            for (b, c, score) in self.detect(&s.image, score_thresh, nms_iou)? {
                out.push(crate::data::DetectionRecord {
                    image_id: s.id.clone(),
                    bbox: [to_f64(b.x1), to_f64(b.y1), to_f64(b.x2), to_f64(b.y2)],
                    category_id: c,
                    score,
                });
            }
        }
        Ok(out)
    }

    /// Plain-data weight snapshot (f64), independent of the tape.
    pub fn snapshot(&self) -> DetectorSnapshot {
        let mut weights = BTreeMap::new();
        for (name, t) in self.named_weights() {
            weights.insert(name, t.data_vec().iter().map(|v| to_f64(*v)).collect());
        }
        DetectorSnapshot {
            config: self.config.clone(),
            weights,
        }
    }

    /// Rebuild a detector from a snapshot; every expected weight must be
    /// present with the right length.
    pub fn from_snapshot(snap: &DetectorSnapshot) -> Result<Self> {
        let det = Self::new(snap.config.clone(), 0)?;
        for (name, t) in det.named_weights() {
            let stored = snap.weights.get(&name).ok_or_else(|| {
                CoreError::invalid("from_snapshot", format!("missing weight {name}"))
            })?;
            if stored.len() != t.numel() {
                return Err(CoreError::invalid(
                    "from_snapshot",
                    format!("weight {name} has {} values, expected {}", stored.len(), t.numel()),
                ));
            }
            t.set_data(stored.iter().map(|&v| real::<T>(v)).collect())?;
        }
        Ok(det)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_json(path.as_ref(), &self.snapshot())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let snap: DetectorSnapshot = crate::data::read_json(path.as_ref())?;
        Self::from_snapshot(&snap)
    }
}

/// Serializable weight dump: config plus named f64 arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorSnapshot {
    pub config: DetectorConfig,
    pub weights: BTreeMap<String, Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            n_categories: 2,
            channels: [4, 6, 8],
            anchor_scales: vec![16.0, 32.0],
            rpn_proposals: 16,
            roi_batch: 8,
            embed_dim: 8,
            ..DetectorConfig::default()
        }
    }

    fn flat_image(w: usize, h: usize, v: f64) -> ImageF<f64> {
        ImageF::from_fn(w, h, |_, _| [v, v, v])
    }

    #[test]
    fn backbone_output_dims_are_ceil_divisions() {
        let det = ToyDetector::<f64>::new(tiny_config(), 1).unwrap();
        let fm = det.backbone(&flat_image(64, 64, 0.5)).unwrap();
        assert_eq!((fm.h, fm.w, fm.channels), (8, 8, 8));
        assert_eq!(fm.map.shape(), vec![64, 8]);
        let fm2 = det.backbone(&flat_image(18, 10, 0.5)).unwrap();
        assert_eq!((fm2.h, fm2.w), (2, 3));
    }

    #[test]
    fn anchors_sit_on_the_stride_grid_and_stay_inside() {
        let det = ToyDetector::<f64>::new(tiny_config(), 1).unwrap();
        let fm = det.backbone(&flat_image(64, 64, 0.1)).unwrap();
        let grid = det.anchor_grid(64, 64, &fm).unwrap();
        assert_eq!(grid.len(), 8 * 8 * 2);
        for b in &grid.anchors {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        }
        // First cell, first scale: centered at (4, 4) with side 16,
        // clipped at the image border.
        let a0 = &grid.anchors[0];
        assert_eq!((a0.x1, a0.y1, a0.x2, a0.y2), (0.0, 0.0, 12.0, 12.0));
    }

    #[test]
    fn anchor_equal_to_gt_is_positive_with_zero_target() {
        let anchors = vec![
            BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap(),
            BoxF::new(40.0, 40.0, 56.0, 56.0).unwrap(),
        ];
        let gts = vec![BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap()];
        let labels = assign_anchors(&anchors, &gts, 0.7, 0.3);
        assert_eq!(labels[0], AnchorLabel::Pos(0));
        assert_eq!(labels[1], AnchorLabel::Neg);
        let t = box_targets(&anchors[0], &gts[0]);
        assert!(t.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn no_gt_means_all_negative_pure_bce() {
        let det = ToyDetector::<f64>::new(tiny_config(), 2).unwrap();
        let img = flat_image(32, 32, 0.3);
        let fm = det.backbone(&img).unwrap();
        let grid = det.anchor_grid(32, 32, &fm).unwrap();
        let (_, loss) = det
            .rpn_forward(&fm, &grid, &[], Provenance::Ori)
            .unwrap();
        // All anchors negative: the loss equals mean BCE of the raw
        // logits against zero targets.
        let (obj, _) = det.rpn_head(&fm).unwrap();
        let expected: f64 = obj
            .data_vec()
            .iter()
            .map(|&x| x.max(0.0) + (1.0 + (-x.abs()).exp()).ln())
            .sum::<f64>()
            / grid.len() as f64;
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn box_transform_round_trips() {
        let r = BoxF::<f64>::new(10.0, 12.0, 30.0, 40.0).unwrap();
        let g = BoxF::<f64>::new(14.0, 10.0, 36.0, 44.0).unwrap();
        let t = box_targets(&r, &g);
        let back = box_decode(&r, &t, 64, 64).unwrap();
        assert!((back.x1 - g.x1).abs() < 1e-9);
        assert!((back.y2 - g.y2).abs() < 1e-9);
    }

    #[test]
    fn nms_collapses_identical_boxes() {
        let b = BoxF::<f64>::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let boxes = vec![b, b];
        let keep = nms(&boxes, &[0, 1], 0.7);
        assert_eq!(keep, vec![0]);
    }

    #[test]
    fn refine_is_the_mean_of_the_two_views() {
        let pair = RpnLossPair {
            l_ori: Tensor::<f64>::scalar(2.0),
            l_aug: Tensor::<f64>::scalar(0.0),
        };
        assert!((cprm_refine(&pair).unwrap().item() - 1.0).abs() < 1e-12);
        let eq = RpnLossPair {
            l_ori: Tensor::<f64>::scalar(0.7),
            l_aug: Tensor::<f64>::scalar(0.7),
        };
        assert!((cprm_refine(&eq).unwrap().item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mixing_concatenates_and_preserves_boxes() {
        let b1 = BoxF::<f64>::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b2 = BoxF::<f64>::new(5.0, 5.0, 15.0, 15.0).unwrap();
        let b3 = BoxF::<f64>::new(20.0, 20.0, 30.0, 30.0).unwrap();
        let ori = ProposalSet {
            boxes: vec![b1, b2],
            scores: vec![0.9, 0.4],
            provenance: vec![Provenance::Ori; 2],
        };
        let aug = ProposalSet {
            boxes: vec![b3],
            scores: vec![0.6],
            provenance: vec![Provenance::Aug],
        };
        let mixed = cprm_mix(&ori, &aug);
        assert_eq!(mixed.len(), 3);
        assert_eq!(mixed.scores, vec![0.9, 0.6, 0.4]);
        assert_eq!(mixed.provenance, vec![Provenance::Ori, Provenance::Aug, Provenance::Ori]);
        for b in [&b1, &b2, &b3] {
            assert!(mixed.boxes.contains(b));
        }
        let n_ori = mixed.provenance.iter().filter(|p| **p == Provenance::Ori).count();
        assert_eq!(n_ori, 2);

        let alone = cprm_mix(&ori, &ProposalSet::empty());
        assert_eq!(alone.boxes, ori.boxes);
        assert_eq!(alone.scores, ori.scores);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let roi = Tensor::<f64>::scalar(1.0);
        let cprm = Tensor::<f64>::scalar(2.0);
        let crfi = Tensor::<f64>::scalar(10.0);
        let t = total_loss(&roi, &cprm, &crfi, 0.01).unwrap();
        assert!((t.item() - 3.1).abs() < 1e-12);
        let off = total_loss(&roi, &cprm, &crfi, 0.0).unwrap();
        assert!((off.item() - 3.0).abs() < 1e-12);
        let zero = total_loss(
            &Tensor::<f64>::scalar(0.0),
            &Tensor::<f64>::scalar(0.0),
            &Tensor::<f64>::scalar(0.0),
            0.5,
        )
        .unwrap();
        assert!(zero.item().abs() < 1e-12);
        assert!(total_loss(&roi, &cprm, &crfi, -0.1).is_err());
    }

    #[test]
    fn roi_targets_follow_iou_assignment() {
        let det = ToyDetector::<f64>::new(tiny_config(), 3).unwrap();
        let img = flat_image(32, 32, 0.4);
        let fm = det.backbone(&img).unwrap();
        let gts = vec![BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap()];
        let labels = vec![1usize];
        // One proposal identical to the GT, one far away: the first is
        // positive with zero regression target, the second background.
        let props = ProposalSet {
            boxes: vec![
                BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap(),
                BoxF::new(26.0, 26.0, 31.0, 31.0).unwrap(),
            ],
            scores: vec![0.9, 0.8],
            provenance: vec![Provenance::Ori; 2],
        };
        let mut rng = seed_rng(1);
        let loss = det
            .roi_forward(&fm, None, &props, &gts, &labels, false, &mut rng)
            .unwrap();
        assert!(loss.item().is_finite() && loss.item() > 0.0);
    }

    #[test]
    fn far_proposals_are_all_background() {
        let det = ToyDetector::<f64>::new(tiny_config(), 4).unwrap();
        let img = flat_image(32, 32, 0.4);
        let fm = det.backbone(&img).unwrap();
        let gts = vec![BoxF::new(0.0, 0.0, 6.0, 6.0).unwrap()];
        let props = ProposalSet {
            boxes: vec![BoxF::new(20.0, 20.0, 30.0, 30.0).unwrap()],
            scores: vec![0.5],
            provenance: vec![Provenance::Ori],
        };
        let mut rng = seed_rng(2);
        // All-background batch: the regression term disappears, so the
        // loss equals the classification term alone and stays finite.
        let loss = det
            .roi_forward(&fm, None, &props, &gts, &[0], false, &mut rng)
            .unwrap();
        assert!(loss.item().is_finite());
    }

    #[test]
    fn pooling_constant_map_gives_constant_vector() {
        let det = ToyDetector::<f64>::new(tiny_config(), 5).unwrap();
        let c = 3;
        let data: Vec<f64> = (0..16 * c).map(|i| ((i % c) + 1) as f64).collect();
        let fm = FeatureMap {
            map: Tensor::constant(&[16, c], data).unwrap(),
            h: 4,
            w: 4,
            channels: c,
        };
        let b = BoxF::new(2.0, 2.0, 30.0, 30.0).unwrap();
        let pooled = det.pool_box(&fm, &b).unwrap();
        let v = pooled.data_vec();
        assert_eq!(v.len(), 4 * c);
        for bin in 0..4 {
            for ch in 0..c {
                assert!((v[bin * c + ch] - (ch + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aug_proposals_require_aug_features() {
        let det = ToyDetector::<f64>::new(tiny_config(), 6).unwrap();
        let img = flat_image(32, 32, 0.4);
        let fm = det.backbone(&img).unwrap();
        let props = ProposalSet {
            boxes: vec![BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap()],
            scores: vec![0.9],
            provenance: vec![Provenance::Aug],
        };
        let gts = vec![BoxF::new(8.0, 8.0, 24.0, 24.0).unwrap()];
        let mut rng = seed_rng(3);
        assert!(det
            .roi_forward(&fm, None, &props, &gts, &[0], false, &mut rng)
            .is_err());
    }

    #[test]
    fn untrained_detect_with_impossible_threshold_is_empty() {
        let det = ToyDetector::<f64>::new(tiny_config(), 7).unwrap();
        let img = flat_image(64, 64, 0.5);
        let dets = det.detect(&img, 1.1, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn detect_is_deterministic() {
        let det = ToyDetector::<f64>::new(tiny_config(), 8).unwrap();
        let img = ImageF::from_fn(64, 64, |x, y| {
            let v = ((x * 7 + y * 13) % 64) as f64 / 64.0;
            [v, 1.0 - v, 0.5]
        });
        let a = det.detect(&img, 0.05, 0.5).unwrap();
        let b = det.detect(&img, 0.05, 0.5).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn snapshot_round_trip_preserves_behavior() {
        let det = ToyDetector::<f64>::new(tiny_config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        det.save_checkpoint(&path).unwrap();
        let loaded = ToyDetector::<f64>::load_checkpoint(&path).unwrap();
        let img = ImageF::from_fn(64, 64, |x, y| {
            [(x as f64) / 64.0, (y as f64) / 64.0, 0.2]
        });
        let a = det.detect(&img, 0.05, 0.5).unwrap();
        let b = loaded.detect(&img, 0.05, 0.5).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!((x.1, x.2), (y.1, y.2));
        }
    }

    #[test]
    fn snapshot_rejects_wrong_shapes() {
        let det = ToyDetector::<f64>::new(tiny_config(), 10).unwrap();
        let mut snap = det.snapshot();
        snap.weights.get_mut("conv0.weight").unwrap().pop();
        assert!(ToyDetector::<f64>::from_snapshot(&snap).is_err());
        let mut snap2 = det.snapshot();
        snap2.weights.remove("roi_cls.bias");
        assert!(ToyDetector::<f64>::from_snapshot(&snap2).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ToyDetector::<f64>::new(tiny_config(), 11).unwrap();
        let b = ToyDetector::<f64>::new(tiny_config(), 11).unwrap();
        for ((na, ta), (nb, tb)) in a.named_weights().iter().zip(b.named_weights().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data_vec(), tb.data_vec());
        }
    }

    #[test]
    fn crop_features_stack_and_carry_grad() {
        let det = ToyDetector::<f64>::new(tiny_config(), 12).unwrap();
        let crops = vec![flat_image(16, 16, 0.3), flat_image(16, 16, 0.8)];
        let m = det.crop_feature_matrix(&crops).unwrap();
        assert_eq!(m.shape(), vec![2, 8]);
        assert!(m.requires_grad());
        m.mean().backward().unwrap();
        assert!(det.blocks[0].w.grad_vec().is_some());
    }

    #[test]
    fn pooled_feature_concatenates_all_stages() {
        let det = ToyDetector::<f64>::new(tiny_config(), 13).unwrap();
        let f = det.pooled_feature(&flat_image(64, 64, 0.5)).unwrap();
        assert_eq!(f.len(), 4 + 6 + 8);
        assert!(f.iter().all(|v| v.is_finite()));
        let stages = det.backbone_stages(&flat_image(64, 64, 0.5)).unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(
            stages.iter().map(|s| (s.h, s.w)).collect::<Vec<_>>(),
            vec![(32, 32), (16, 16), (8, 8)]
        );
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = tiny_config();
        c.rpn_neg_iou = 0.9;
        assert!(c.validate().is_err());
        let mut c2 = tiny_config();
        c2.anchor_scales = vec![];
        assert!(c2.validate().is_err());
        let mut c3 = tiny_config();
        c3.smooth_l1_beta = 0.0;
        assert!(c3.validate().is_err());
    }
}
