//! Cross-modal region feature interaction losses.
//!
//! A projection head maps backbone region features into the text space;
//! three symmetric InfoNCE terms then pull matched rows together: clean
//! vs augmented image features, object features vs object prompts, and
//! background features vs background prompts. Text rows are constants,
//! so gradient flows only into the image branch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grad::Tensor;
use crate::rng::seed_rng;
use crate::scalar::{real, Real};

/// Softmax temperature, validated positive at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(CoreError::invalid(
                "temperature",
                format!("tau must be positive, got {tau}"),
            ));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.1)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = CoreError;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Linear map from backbone features to the text-embedding space, with
/// l2-normalized output rows.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ProjectionHead<T> {
    /// Gaussian init scaled by the input width; bias starts at zero.
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(CoreError::invalid("projection_head", "zero dimension"));
        }
        let mut rng = seed_rng(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<T> = (0..in_dim * out_dim)
            .map(|_| real::<T>(rng.sample::<f64, _>(StandardNormal) * scale))
            .collect();
        Ok(Self {
            weight: Tensor::param(&[in_dim, out_dim], w)?,
            bias: Tensor::zeros(&[out_dim], true),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Project `[n, in_dim]` features to unit rows in `[n, out_dim]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        features
            .matmul(&self.weight)?
            .add_row(&self.bias)?
            .l2_normalize()
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Row-aligned image and text features for one batch, both domains.
/// `s` is the clean view, `t` the augmented view; row i of an image
/// matrix pairs with row i of the same-named text matrix.
#[derive(Debug, Clone)]
pub struct FeatureBundle<T: Real> {
    pub i_obj_s: Tensor<T>,
    pub i_obj_t: Tensor<T>,
    pub i_bg_s: Tensor<T>,
    pub i_bg_t: Tensor<T>,
    pub t_obj_s: Tensor<T>,
    pub t_obj_t: Tensor<T>,
    pub t_bg_s: Tensor<T>,
    pub t_bg_t: Tensor<T>,
}

impl<T: Real> FeatureBundle<T> {
    pub fn n_obj(&self) -> usize {
        self.i_obj_s.shape()[0]
    }

    pub fn n_bg(&self) -> usize {
        self.i_bg_s.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.i_obj_s.shape()[1]
    }

    /// Check rank, consistent width, and matched row counts.
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("i_obj_s", &self.i_obj_s),
            ("i_obj_t", &self.i_obj_t),
            ("i_bg_s", &self.i_bg_s),
            ("i_bg_t", &self.i_bg_t),
            ("t_obj_s", &self.t_obj_s),
            ("t_obj_t", &self.t_obj_t),
            ("t_bg_s", &self.t_bg_s),
            ("t_bg_t", &self.t_bg_t),
        ];
        let dim = self.i_obj_s.shape().get(1).copied().unwrap_or(0);
        for (name, t) in &all {
            let s = t.shape();
            if s.len() != 2 || s[1] != dim {
                return Err(CoreError::invalid(
                    "feature_bundle",
                    format!("{name} has shape {s:?}, expected [_, {dim}]"),
                ));
            }
        }
        let n_obj = self.n_obj();
        let n_bg = self.n_bg();
        for (name, t) in &all {
            let want = if name.ends_with("bg_s") || name.ends_with("bg_t") {
                n_bg
            } else {
                n_obj
            };
            if t.shape()[0] != want {
                return Err(CoreError::invalid(
                    "feature_bundle",
                    format!("{name} has {} rows, expected {want}", t.shape()[0]),
                ));
            }
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over row-aligned unit features: scores S = A·Bᵀ/τ,
/// positives on the diagonal, cross-entropy averaged over both
/// directions.
pub fn info_nce<T: Real>(a: &Tensor<T>, b: &Tensor<T>, tau: Temperature) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa != sb {
        return Err(CoreError::ShapeMismatch {
            op: "info_nce".into(),
            lhs: sa,
            rhs: sb,
        });
    }
    let n = sa[0];
    if n == 0 {
        return Err(CoreError::invalid("info_nce", "no rows"));
    }
    let scores = a
        .matmul(&b.transpose()?)?
        .scale(real::<T>(1.0 / tau.value()));
    let labels: Vec<usize> = (0..n).collect();
    let fwd = scores.log_softmax()?.cross_entropy_from_logp(&labels)?;
    let bwd = scores
        .transpose()?
        .log_softmax()?
        .cross_entropy_from_logp(&labels)?;
    Ok(fwd.add(&bwd)?.scale(real::<T>(0.5)))
}

/// Cross-domain image alignment: object and background rows of each view
/// concatenated, then InfoNCE across the clean/augmented pair.
pub fn loss_img<T: Real>(bundle: &FeatureBundle<T>, tau: Temperature) -> Result<Tensor<T>> {
    bundle.validate()?;
    let s = Tensor::concat(&[bundle.i_obj_s.clone(), bundle.i_bg_s.clone()], 0)?;
    let t = Tensor::concat(&[bundle.i_obj_t.clone(), bundle.i_bg_t.clone()], 0)?;
    info_nce(&s, &t, tau)
}

/// Object image-text alignment, averaged over the two domains.
pub fn loss_text_obj<T: Real>(bundle: &FeatureBundle<T>, tau: Temperature) -> Result<Tensor<T>> {
    bundle.validate()?;
    let clean = info_nce(&bundle.i_obj_s, &bundle.t_obj_s, tau)?;
    let aug = info_nce(&bundle.i_obj_t, &bundle.t_obj_t, tau)?;
    Ok(clean.add(&aug)?.scale(real::<T>(0.5)))
}

/// Background image-text alignment, averaged over the two domains.
pub fn loss_text_bg<T: Real>(bundle: &FeatureBundle<T>, tau: Temperature) -> Result<Tensor<T>> {
    bundle.validate()?;
    let clean = info_nce(&bundle.i_bg_s, &bundle.t_bg_s, tau)?;
    let aug = info_nce(&bundle.i_bg_t, &bundle.t_bg_t, tau)?;
    Ok(clean.add(&aug)?.scale(real::<T>(0.5)))
}

/// Combined region-interaction loss:
/// ½·[L_img + ½·(L_text_obj + L_text_bg)].
pub fn crfi_total<T: Real>(bundle: &FeatureBundle<T>, tau: Temperature) -> Result<Tensor<T>> {
    let img = loss_img(bundle, tau)?;
    let obj = loss_text_obj(bundle, tau)?;
    let bg = loss_text_bg(bundle, tau)?;
    let text = obj.add(&bg)?.scale(real::<T>(0.5));
    Ok(img.add(&text)?.scale(real::<T>(0.5)))
}
