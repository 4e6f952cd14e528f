use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng::seed_rng;
use crate::scalar::{real, to_f64, Real};

use super::tensor::Tensor;

/// Step sizes tried per element, largest first. A kink (relu, smooth-L1
/// elbow, max) inflates the error for one step size but rarely for all of
/// them, so an element passes if any step size agrees with the tape.
const EPS_LADDER: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// One element whose numeric and analytic gradients disagree at every step
/// size. `numeric` and `error` come from the best step size tried.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central-difference comparison of tape gradients. Tolerances assume the
/// f64 instantiation; the f32 lane needs looser ones.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub rtol: f64,
    pub atol: f64,
    /// Elements probed per parameter; `None` checks every element.
    pub max_per_param: Option<usize>,
    /// Seed for picking which elements to probe when subsampling.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            rtol: 1e-4,
            atol: 1e-6,
            max_per_param: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    /// Compare the tape gradient of `loss_fn` with central differences at
    /// every probed element of `params`. `loss_fn` must rebuild the graph
    /// from the current parameter values on each call and return a scalar.
    pub fn run<T: Real>(
        &self,
        params: &[Tensor<T>],
        mut loss_fn: impl FnMut() -> Result<Tensor<T>>,
    ) -> Result<GradCheckReport> {
        for p in params {
            p.clear_grad();
        }
        let loss = loss_fn()?;
        if loss.numel() != 1 {
            return Err(CoreError::NonScalarLoss { shape: loss.shape() });
        }
        loss.backward()?;
        let analytic: Vec<Vec<T>> = params
            .iter()
            .map(|p| p.grad_vec().unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        for p in params {
            p.clear_grad();
        }

        let mut rng = seed_rng(self.seed);
        let mut report = GradCheckReport {
            checked: 0,
            max_error: 0.0,
            failures: Vec::new(),
        };
        for (pi, p) in params.iter().enumerate() {
            let mut elements: Vec<usize> = (0..p.numel()).collect();
            if let Some(cap) = self.max_per_param {
                elements.shuffle(&mut rng);
                elements.truncate(cap);
                elements.sort_unstable();
            }
            for ei in elements {
                let a = to_f64(analytic[pi][ei]);
                let mut best: Option<(f64, f64)> = None;
                let mut passed = false;
                for eps in EPS_LADDER {
                    let base = p.data_vec();
                    let mut bumped = base.clone();
                    bumped[ei] = bumped[ei] + real::<T>(eps);
                    p.set_data(bumped.clone())?;
                    let up = to_f64(loss_fn()?.item());
                    bumped[ei] = base[ei] - real::<T>(eps);
                    p.set_data(bumped)?;
                    let down = to_f64(loss_fn()?.item());
                    p.set_data(base)?;

                    let numeric = (up - down) / (2.0 * eps);
                    let error = (a - numeric).abs();
                    if best.map_or(true, |(e, _)| error < e) {
                        best = Some((error, numeric));
                    }
                    if error <= self.atol + self.rtol * a.abs().max(numeric.abs()) {
                        passed = true;
                        break;
                    }
                }
                let (error, numeric) = best.expect("ladder is non-empty");
                report.checked += 1;
                report.max_error = report.max_error.max(error);
                if !passed {
                    report.failures.push(GradCheckFailure {
                        param: pi,
                        element: ei,
                        analytic: a,
                        numeric,
                        error,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// [`GradCheck::run`] with default tolerances, probing every element.
pub fn check_gradients<T: Real>(
    params: &[Tensor<T>],
    loss_fn: impl FnMut() -> Result<Tensor<T>>,
) -> Result<GradCheckReport> {
    GradCheck::default().run(params, loss_fn)
}
