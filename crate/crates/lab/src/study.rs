//! Multi-seed ablation study over the three training arms.
//!
//! The benchmark — train/test splits and corrupted pixels — is pinned to
//! the study config's seed; per-run seeds vary only the training
//! randomness (init, batching, augmentation, region selection, ROI
//! sampling). Cross-seed spread then measures training stochasticity
//! against a fixed measuring stick.

use sdgod_core::DetectionSample;

use crate::config::{Mode, RunConfig};
use crate::evalrun::{evaluate_snapshot, suite_seed_for, EvalOutcome};
use crate::train::{test_split, train_split, TrainState};
use crate::{LabError, Result};

/// One arm of the study: per-seed mPC plus the per-corruption cosine
/// similarities at the configured severity.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub mpcs: Vec<f64>,
    pub clean_maps: Vec<f64>,
    /// `[seed][corruption]`, order matching `corruption_names`.
    pub cosine: Vec<Vec<f64>>,
}

impl ArmResult {
    pub fn mean_mpc(&self) -> f64 {
        mean(&self.mpcs)
    }

    /// Sample standard deviation of mPC across seeds.
    pub fn std_mpc(&self) -> f64 {
        let m = self.mean_mpc();
        let n = self.mpcs.len();
        if n < 2 {
            return 0.0;
        }
        (self.mpcs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// Seed-averaged cosine similarity per corruption type.
    pub fn mean_cosine(&self) -> Vec<f64> {
        let k = self.cosine[0].len();
        (0..k)
            .map(|i| mean(&self.cosine.iter().map(|row| row[i]).collect::<Vec<_>>()))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub corruption_names: Vec<String>,
    pub arms: Vec<ArmResult>,
}

impl StudyResult {
    pub fn arm(&self, mode: Mode) -> &ArmResult {
        self.arms
            .iter()
            .find(|a| a.mode == mode)
            .expect("every study covers all three arms")
    }
}

/// Train and evaluate one arm for one seed on a fixed benchmark.
pub fn run_arm(
    cfg: &RunConfig,
    mode: Mode,
    train_seed: u64,
    train: &[DetectionSample],
    test: &[DetectionSample],
    suite_seed: u64,
) -> Result<EvalOutcome> {
    let mut run_cfg = cfg.clone();
    run_cfg.seed = train_seed;
    run_cfg.train.mode = mode;
    let mut state = TrainState::new(run_cfg, train.to_vec())?;
    state.run()?;
    evaluate_snapshot(&state.detector.snapshot(), test, cfg, suite_seed)
}

/// Run all three arms across `train_seeds` with a benchmark pinned to
/// `cfg.seed`.
pub fn run_study(cfg: &RunConfig, train_seeds: &[u64]) -> Result<StudyResult> {
    if train_seeds.is_empty() {
        return Err(LabError::Config("study needs at least one seed".into()));
    }
    let train = train_split(cfg)?;
    let test = test_split(cfg)?;
    let suite_seed = suite_seed_for(cfg);
    let mut corruption_names = Vec::new();
    let mut arms = Vec::new();
    for mode in Mode::all() {
        let mut arm = ArmResult {
            mode,
            seeds: train_seeds.to_vec(),
            mpcs: Vec::new(),
            clean_maps: Vec::new(),
            cosine: Vec::new(),
        };
        for &s in train_seeds {
            let outcome = run_arm(cfg, mode, s, &train, &test, suite_seed)?;
            arm.mpcs.push(outcome.mpc_report.mpc()?);
            arm.clean_maps.push(outcome.mpc_report.clean_map);
            arm.cosine.push(outcome.cosine.mean_similarity.clone());
            if corruption_names.is_empty() {
                corruption_names = outcome.cosine.corruption_names.clone();
            }
        }
        arms.push(arm);
    }
    Ok(StudyResult {
        corruption_names,
        arms,
    })
}
