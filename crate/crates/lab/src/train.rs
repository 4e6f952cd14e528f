//! Seeded training loop for the three ablation arms.
//!
//! One master seed fans out into labeled streams (init, data, batch,
//! augment, select, roi, embed). Arms share every stream the baseline
//! consumes and draw arm-specific randomness from streams of their own,
//! so switching `mode` changes the mechanism and nothing else: with
//! alpha = 0 the crfi arm's detection weights match the baseline's bit
//! for bit.

use rand::Rng;

use sdgod_core::crfi::{crfi_total, Temperature};
use sdgod_core::data::generate_dataset;
use sdgod_core::detector::{cprm_mix, cprm_refine, total_loss, Provenance, RpnLossPair};
use sdgod_core::rng::{indexed_seed, labeled_seed, seed_rng};
use sdgod_core::select::{select_regions, PromptTemplates};
use sdgod_core::{
    augment::augment_with, data::category_names, DetectionSample, EmbeddingProvider, FeatureBundle,
    ImageF, Sgd, Tensor, ToyDetector,
};

use crate::config::RunConfig;
use crate::{LabError, Result};

/// Training split pinned to the master seed's "data" stream.
pub fn train_split(config: &RunConfig) -> Result<Vec<DetectionSample>> {
    Ok(generate_dataset(
        &config.data.train_spec(),
        labeled_seed(config.seed, "data"),
    )?)
}

/// Held-out split pinned to the "test" stream; disjoint from training
/// randomness by label.
pub fn test_split(config: &RunConfig) -> Result<Vec<DetectionSample>> {
    Ok(generate_dataset(
        &config.data.test_spec(),
        labeled_seed(config.seed, "test"),
    )?)
}

/// Per-iteration loss components. `crfi` is `None` in baseline mode; the
/// `rpn` column holds the single-view proposal loss in baseline/crfi
/// modes and the two-view refine loss in crfi_cprm mode.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub iter: usize,
    pub total: f64,
    pub roi: f64,
    pub rpn: f64,
    pub crfi: Option<f64>,
}

pub struct TrainState {
    pub config: RunConfig,
    pub detector: ToyDetector,
    pub log: Vec<LossBreakdown>,
    provider: EmbeddingProvider,
    templates: PromptTemplates,
    categories: Vec<String>,
    samples: Vec<DetectionSample>,
    params: Vec<Tensor>,
    opt: Sgd,
    iter: usize,
    batch_stream: u64,
    augment_stream: u64,
    select_stream: u64,
    roi_stream: u64,
}

impl TrainState {
    /// Build a trainer over an existing training split.
    pub fn new(config: RunConfig, samples: Vec<DetectionSample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(LabError::Train("empty training set".into()));
        }
        let master = config.seed;
        let detector = ToyDetector::new(config.detector.clone(), labeled_seed(master, "init"))?;
        let templates = config.prompts.templates();
        let provider = EmbeddingProvider::pseudo_with(
            config.detector.embed_dim,
            labeled_seed(master, "embed"),
            config.train.lambda,
            templates.clone(),
        )?;
        // Baseline never builds the region-interaction graph, so the
        // projection head would see no gradients; keep it out of the
        // optimizer there.
        let params = if config.train.mode.uses_crfi() {
            detector.all_params()
        } else {
            detector.params()
        };
        let opt = Sgd::new(
            config.train.lr,
            config.train.momentum,
            config.train.weight_decay,
        );
        Ok(Self {
            categories: category_names(config.data.categories),
            batch_stream: labeled_seed(master, "batch"),
            augment_stream: labeled_seed(master, "augment"),
            select_stream: labeled_seed(master, "select"),
            roi_stream: labeled_seed(master, "roi"),
            config,
            detector,
            provider,
            templates,
            samples,
            params,
            opt,
            iter: 0,
            log: Vec::new(),
        })
    }

    /// Generate the training split from the config's data section and
    /// the master seed's "data" stream, then build the trainer.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let samples = train_split(&config)?;
        Self::new(config, samples)
    }

    pub fn iterations_done(&self) -> usize {
        self.iter
    }

    /// Mean of per-image scalar losses as one graph node.
    fn batch_mean(parts: Vec<Tensor>) -> Result<Tensor> {
        let n = parts.len() as f64;
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("non-empty batch");
        for t in it {
            acc = acc.add(&t)?;
        }
        Ok(acc.scale(1.0 / n))
    }

    /// The region-interaction term for one batch: representative object
    /// and background crops from both views against prompt embeddings.
    fn crfi_term(&self, batch: &[DetectionSample], aug: &[DetectionSample], it: u64) -> Result<Tensor> {
        let sel = select_regions(
            batch,
            &self.categories,
            self.config.train.crop_size,
            &self.templates,
            indexed_seed(self.select_stream, it),
        )?;
        let obj_t = sel.recrop_objects(aug)?;
        let bg_t = sel.recrop_backgrounds(aug)?;
        let project = |crops: &[ImageF]| -> Result<Tensor> {
            Ok(self
                .detector
                .projection
                .forward(&self.detector.crop_feature_matrix(crops)?)?)
        };
        let bundle = FeatureBundle {
            i_obj_s: project(&sel.object_crops)?,
            i_obj_t: project(&obj_t)?,
            i_bg_s: project(&sel.background_crops)?,
            i_bg_t: project(&bg_t)?,
            t_obj_s: self.provider.embed(&sel.prompts_obj_ori)?,
            t_obj_t: self.provider.embed(&sel.prompts_obj_aug)?,
            t_bg_s: self.provider.embed(&sel.prompts_bg_ori)?,
            t_bg_t: self.provider.embed(&sel.prompts_bg_aug)?,
        };
        Ok(crfi_total(&bundle, Temperature::new(self.config.train.tau)?)?)
    }

    /// One optimization step. Returns the logged loss components.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let it = self.iter as u64;
        let mode = self.config.train.mode;
        let b = self.config.train.batch_size;
        let mut batch_rng = seed_rng(indexed_seed(self.batch_stream, it));
        let batch: Vec<DetectionSample> = (0..b)
            .map(|_| self.samples[batch_rng.gen_range(0..self.samples.len())].clone())
            .collect();
        // Augmented views are only built where a mechanism consumes
        // them; their seeds are positional, not drawn from a shared rng.
        let aug: Vec<DetectionSample> = if mode.uses_crfi() {
            batch
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let img = augment_with(
                        &s.image,
                        &self.config.augment,
                        indexed_seed(self.augment_stream, it * b as u64 + j as u64),
                    );
                    DetectionSample::new(s.id.clone(), img, s.boxes.clone(), s.labels.clone())
                })
                .collect::<sdgod_core::error::Result<_>>()?
        } else {
            Vec::new()
        };

        for p in &self.params {
            p.clear_grad();
        }
        let mut roi_rng = seed_rng(indexed_seed(self.roi_stream, it));
        let mut roi_parts = Vec::with_capacity(b);
        let mut rpn_parts = Vec::with_capacity(b);
        for (j, s) in batch.iter().enumerate() {
            let fm = self.detector.backbone(&s.image)?;
            let grid = self
                .detector
                .anchor_grid(s.image.width(), s.image.height(), &fm)?;
            let (props, l_rpn) =
                self.detector
                    .rpn_forward(&fm, &grid, &s.boxes, Provenance::Ori)?;
            if mode.uses_cprm() {
                let a = &aug[j];
                let fm_aug = self.detector.backbone(&a.image)?;
                let (props_aug, l_aug) =
                    self.detector
                        .rpn_forward(&fm_aug, &grid, &a.boxes, Provenance::Aug)?;
                rpn_parts.push(cprm_refine(&RpnLossPair {
                    l_ori: l_rpn,
                    l_aug,
                })?);
                let mixed = cprm_mix(&props, &props_aug);
                roi_parts.push(self.detector.roi_forward(
                    &fm,
                    Some(&fm_aug),
                    &mixed,
                    &s.boxes,
                    &s.labels,
                    true,
                    &mut roi_rng,
                )?);
            } else {
                rpn_parts.push(l_rpn);
                roi_parts.push(self.detector.roi_forward(
                    &fm,
                    None,
                    &props,
                    &s.boxes,
                    &s.labels,
                    true,
                    &mut roi_rng,
                )?);
            }
        }
        let l_roi = Self::batch_mean(roi_parts)?;
        let l_rpn = Self::batch_mean(rpn_parts)?;

        let (total, crfi_val) = if mode.uses_crfi() {
            let l_crfi = self.crfi_term(&batch, &aug, it)?;
            let total = total_loss(&l_roi, &l_rpn, &l_crfi, self.config.train.alpha)?;
            (total, Some(l_crfi.item()))
        } else {
            (l_roi.add(&l_rpn)?, None)
        };

        let record = LossBreakdown {
            iter: self.iter,
            total: total.item(),
            roi: l_roi.item(),
            rpn: l_rpn.item(),
            crfi: crfi_val,
        };
        if !record.total.is_finite() {
            return Err(LabError::Train(format!(
                "non-finite loss at iteration {}: total={} roi={} rpn={} crfi={:?}",
                record.iter, record.total, record.roi, record.rpn, record.crfi
            )));
        }
        total.backward()?;
        self.opt.step(&self.params)?;
        self.iter += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Run the configured iteration budget.
    pub fn run(&mut self) -> Result<()> {
        while self.iter < self.config.train.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Loss log as CSV; baseline mode has no crfi column.
    pub fn log_csv(&self) -> String {
        let with_crfi = self.config.train.mode.uses_crfi();
        let mut out = String::from(if with_crfi {
            "iter,total,roi,rpn,crfi\n"
        } else {
            "iter,total,roi,rpn\n"
        });
        for r in &self.log {
            if with_crfi {
                out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    r.iter,
                    r.total,
                    r.roi,
                    r.rpn,
                    r.crfi.unwrap_or(f64::NAN)
                ));
            } else {
                out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    r.iter, r.total, r.roi, r.rpn
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn tiny_config(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.data.train_images = 6;
        cfg.data.test_images = 2;
        cfg.data.image_size = 48;
        cfg.train.mode = mode;
        cfg.train.iterations = 2;
        cfg.train.batch_size = 2;
        cfg.train.crop_size = 16;
        cfg.detector.channels = [4, 6, 8];
        cfg.detector.anchor_scales = vec![14.0, 28.0];
        cfg.detector.rpn_proposals = 16;
        cfg.detector.roi_batch = 8;
        cfg.detector.embed_dim = 8;
        cfg
    }

    #[test]
    fn baseline_log_has_no_crfi_column() {
        let mut t = TrainState::from_config(tiny_config(Mode::Baseline)).unwrap();
        t.run().unwrap();
        assert!(t.log.iter().all(|r| r.crfi.is_none()));
        assert!(t.log_csv().starts_with("iter,total,roi,rpn\n"));
        let mut t = TrainState::from_config(tiny_config(Mode::CrfiCprm)).unwrap();
        t.run().unwrap();
        assert!(t.log.iter().all(|r| r.crfi.is_some()));
        assert!(t.log_csv().starts_with("iter,total,roi,rpn,crfi\n"));
    }

    #[test]
    fn reruns_are_bit_identical() {
        let weights = |mode: Mode| {
            let mut t = TrainState::from_config(tiny_config(mode)).unwrap();
            t.run().unwrap();
            t.detector.snapshot()
        };
        for mode in Mode::all() {
            let a = weights(mode);
            let b = weights(mode);
            assert_eq!(a.weights, b.weights, "{mode} rerun diverged");
        }
    }

    #[test]
    fn alpha_zero_crfi_matches_baseline_detection_weights() {
        let mut base = TrainState::from_config(tiny_config(Mode::Baseline)).unwrap();
        base.run().unwrap();
        let mut cfg = tiny_config(Mode::Crfi);
        cfg.train.alpha = 0.0;
        let mut crfi = TrainState::from_config(cfg).unwrap();
        crfi.run().unwrap();
        for (a, b) in base.detector.params().iter().zip(crfi.detector.params().iter()) {
            assert_eq!(a.data_vec(), b.data_vec());
        }
    }

    #[test]
    fn total_is_the_declared_combination() {
        let mut t = TrainState::from_config(tiny_config(Mode::CrfiCprm)).unwrap();
        let r = t.step().unwrap();
        let alpha = t.config.train.alpha;
        let recomputed = r.roi + r.rpn + alpha * r.crfi.unwrap();
        assert!((r.total - recomputed).abs() < 1e-12);
    }
}
