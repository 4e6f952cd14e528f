//! Frozen text embeddings for prompts.
//!
//! Two sources behind one interface: a deterministic pseudo encoder that
//! hashes category and condition tokens into Gaussian vectors, and a file
//! mode that serves precomputed vectors from a JSON map. Either way the
//! output rows are unit-norm constants; no gradient ever reaches them.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::grad::Tensor;
use crate::rng::{fnv1a, mix, seed_rng};
use crate::scalar::{real, Real};
use crate::select::{Condition, PromptTemplates};

/// Default embedding width.
pub const DEFAULT_DIM: usize = 64;
/// Default weight of the condition offset relative to the category base.
pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Debug)]
enum Source {
    /// Category base plus scaled condition offset, both hash-seeded.
    Pseudo { seed: u64, lambda: f64, templates: PromptTemplates },
    /// Verbatim prompt -> vector lookup.
    File { table: HashMap<String, Vec<f64>> },
}

/// Serves unit-norm embedding rows for rendered prompts.
#[derive(Debug)]
pub struct EmbeddingProvider<T: Real> {
    dim: usize,
    source: Source,
    cache: Mutex<HashMap<String, Vec<T>>>,
}

fn gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = seed_rng(seed);
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(CoreError::invalid("embed", "embedding vector has zero norm"));
    }
    for x in v {
        *x /= norm;
    }
    Ok(())
}

impl<T: Real> EmbeddingProvider<T> {
    /// Deterministic encoder with the default offset weight and templates.
    pub fn pseudo(dim: usize, seed: u64) -> Result<Self> {
        Self::pseudo_with(dim, seed, DEFAULT_LAMBDA, PromptTemplates::default())
    }

    /// Deterministic encoder with explicit offset weight and the
    /// templates used to parse prompts back into tokens.
    pub fn pseudo_with(
        dim: usize,
        seed: u64,
        lambda: f64,
        templates: PromptTemplates,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::invalid("embed", "dim is zero"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(CoreError::invalid("embed", format!("lambda {lambda} out of range")));
        }
        Ok(Self {
            dim,
            source: Source::Pseudo { seed, lambda, templates },
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Load a prompt -> vector table from JSON. All vectors must share
    /// one dimension; rows are renormalized on load.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let table: HashMap<String, Vec<f64>> = crate::data::read_json(path)?;
        let mut dim = 0;
        for (prompt, v) in &table {
            if dim == 0 {
                dim = v.len();
            }
            if v.len() != dim || v.is_empty() {
                return Err(CoreError::parse(
                    path.display().to_string(),
                    format!("vector for {prompt:?} has {} entries, expected {dim}", v.len()),
                ));
            }
        }
        if dim == 0 {
            return Err(CoreError::parse(path.display().to_string(), "empty embedding table"));
        }
        Ok(Self {
            dim,
            source: Source::File { table },
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn pseudo_vector(
        &self,
        seed: u64,
        lambda: f64,
        templates: &PromptTemplates,
        prompt: &str,
    ) -> Result<Vec<f64>> {
        // A prompt matching neither template embeds as a bare category
        // token with no condition offset.
        let (category, condition) = match templates.extract(prompt) {
            Some((c, cond)) => (c, Some(cond)),
            None => (prompt, None),
        };
        let base_seed = mix(seed ^ fnv1a(format!("category:{category}").as_bytes()));
        let mut v = gaussian(base_seed, self.dim);
        if let Some(cond) = condition {
            let token = match cond {
                Condition::Original => "clear",
                Condition::Augmented => "adverse",
            };
            let off_seed = mix(seed ^ fnv1a(format!("condition:{token}").as_bytes()));
            let off = gaussian(off_seed, self.dim);
            for (x, o) in v.iter_mut().zip(&off) {
                *x += lambda * o;
            }
        }
        normalize(&mut v)?;
        Ok(v)
    }

    fn vector(&self, prompt: &str) -> Result<Vec<T>> {
        if let Some(v) = self.cache.lock().expect("embed cache lock").get(prompt) {
            return Ok(v.clone());
        }
        let v64 = match &self.source {
            Source::Pseudo { seed, lambda, templates } => {
                self.pseudo_vector(*seed, *lambda, templates, prompt)?
            }
            Source::File { table } => {
                let mut v = table
                    .get(prompt)
                    .ok_or_else(|| CoreError::MissingPrompt { prompt: prompt.to_string() })?
                    .clone();
                normalize(&mut v)?;
                v
            }
        };
        let v: Vec<T> = v64.into_iter().map(real::<T>).collect();
        self.cache
            .lock()
            .expect("embed cache lock")
            .insert(prompt.to_string(), v.clone());
        Ok(v)
    }

    /// Embed prompts into a constant `[n, dim]` matrix of unit rows.
    pub fn embed(&self, prompts: &[String]) -> Result<Tensor<T>> {
        if prompts.is_empty() {
            return Err(CoreError::invalid("embed", "no prompts given"));
        }
        let mut data = Vec::with_capacity(prompts.len() * self.dim);
        for p in prompts {
            data.extend(self.vector(p)?);
        }
        Tensor::constant(&[prompts.len(), self.dim], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::render_prompts;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
        let d = t.shape()[1];
        t.data_vec()[i * d..(i + 1) * d].to_vec()
    }

    #[test]
    fn rows_are_unit_norm_constants() {
        let p = EmbeddingProvider::<f64>::pseudo(64, 7).unwrap();
        let t = p
            .embed(&["a photo of a car in clear conditions".to_string()])
            .unwrap();
        assert!(!t.requires_grad());
        assert_eq!(t.shape(), &[1, 64]);
        let n = row(&t, 0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let p = EmbeddingProvider::<f64>::pseudo(32, 3).unwrap();
        let prompts = vec!["a photo of a disc in adverse conditions".to_string()];
        let a = p.embed(&prompts).unwrap();
        let q = EmbeddingProvider::<f64>::pseudo(32, 3).unwrap();
        let b = q.embed(&prompts).unwrap();
        assert_eq!(a.data_vec(), b.data_vec());
        let c = p.embed(&prompts).unwrap();
        assert_eq!(a.data_vec(), c.data_vec());
    }

    #[test]
    fn distinct_categories_are_nearly_orthogonal() {
        let p = EmbeddingProvider::<f64>::pseudo(64, 11).unwrap();
        let t = PromptTemplates::default();
        let mut far = 0;
        let n = 1000;
        for i in 0..n {
            let a = p.embed(&[t.render(&format!("cat{i}a"), Condition::Original)]).unwrap();
            let b = p.embed(&[t.render(&format!("cat{i}b"), Condition::Original)]).unwrap();
            if cos(&row(&a, 0), &row(&b, 0)).abs() < 0.5 {
                far += 1;
            }
        }
        assert!(far as f64 >= 0.99 * n as f64, "{far}/{n} pairs below 0.5");
    }

    #[test]
    fn condition_offset_preserves_category_structure() {
        let p = EmbeddingProvider::<f64>::pseudo(64, 13).unwrap();
        let t = PromptTemplates::default();
        let mut ok = 0;
        let n = 200;
        for i in 0..n {
            let c = format!("shape{i}");
            let other = format!("shape{}x", i);
            let ori = p.embed(&[t.render(&c, Condition::Original)]).unwrap();
            let aug = p.embed(&[t.render(&c, Condition::Augmented)]).unwrap();
            let cross = p.embed(&[t.render(&other, Condition::Augmented)]).unwrap();
            let same = cos(&row(&ori, 0), &row(&aug, 0));
            let diff = cos(&row(&ori, 0), &row(&cross, 0));
            if same > diff {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * n as f64, "{ok}/{n} kept category closer than condition");
    }

    #[test]
    fn shared_condition_offset_is_common_across_categories() {
        // The augmented-vs-original shift points the same way for every
        // category, so same-category pairs stay highly similar.
        let p = EmbeddingProvider::<f64>::pseudo(64, 1).unwrap();
        let t = PromptTemplates::default();
        let ori = p.embed(&[t.render("car", Condition::Original)]).unwrap();
        let aug = p.embed(&[t.render("car", Condition::Augmented)]).unwrap();
        assert!(cos(&row(&ori, 0), &row(&aug, 0)) > 0.9);
    }

    #[test]
    fn batch_matches_prompt_order() {
        let p = EmbeddingProvider::<f64>::pseudo(16, 5).unwrap();
        let t = PromptTemplates::default();
        let prompts = render_prompts(
            &["disc".to_string(), "square".to_string()],
            Condition::Original,
            &t,
        );
        let both = p.embed(&prompts).unwrap();
        let first = p.embed(&prompts[..1].to_vec()).unwrap();
        assert_eq!(row(&both, 0), row(&first, 0));
        assert_eq!(both.shape(), &[2, 16]);
    }

    #[test]
    fn file_mode_serves_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeds.json");
        let mut table = HashMap::new();
        table.insert("a photo of a car in clear conditions".to_string(), vec![3.0, 4.0]);
        crate::data::write_json(&path, &table).unwrap();
        let p = EmbeddingProvider::<f64>::from_file(&path).unwrap();
        assert_eq!(p.dim(), 2);
        let t = p.embed(&["a photo of a car in clear conditions".to_string()]).unwrap();
        assert_eq!(t.data_vec(), vec![0.6, 0.8]);
        let err = p.embed(&["missing prompt".to_string()]).unwrap_err();
        match err {
            CoreError::MissingPrompt { prompt } => assert_eq!(prompt, "missing prompt"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn file_mode_rejects_ragged_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut table = HashMap::new();
        table.insert("p1".to_string(), vec![1.0, 0.0]);
        table.insert("p2".to_string(), vec![1.0, 0.0, 0.0]);
        crate::data::write_json(&path, &table).unwrap();
        let err = EmbeddingProvider::<f64>::from_file(&path).unwrap_err();
        assert!(matches!(err, CoreError::Parse { .. }));
    }
}
