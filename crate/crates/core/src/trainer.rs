//! The dual-branch training loop: a trained adaptive model, a frozen
//! evaluation copy that sees the complementary patches, the composed
//! reconstruction loss, per-step parameter sharing and AdamW.

use std::time::Instant;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{ComaError, Result};
use crate::masking::{compose_reconstruction, mask_image, sample_mask_pair, MaskPair, PatchGrid};
use crate::model::{param_specs, DyVit};
use crate::optim::{adamw_step, AdamHyper, AdamState};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean of squared differences.
pub fn mse_loss<T: Scalar>(g: &Graph<T>, prediction: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    let d = g.sub(prediction, target)?;
    g.mean(&g.mul(&d, &d)?)
}

/// Value-only squared error sum, optionally restricted to `weight == 1`.
fn squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, weight: Option<&Tensor<T>>) -> Result<T> {
    a.expect_same_shape(b)?;
    let mut s = T::zero();
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        let w = weight.map_or(T::one(), |w| w.data()[i]);
        s += w * d * d;
    }
    Ok(s)
}

/// Loss value, its per-branch split and (optionally) the adaptive gradient.
pub struct Objective<T> {
    pub loss: T,
    /// Error on the pixels reconstructed by the adaptive branch.
    pub loss_adaptive: T,
    /// Error on the pixels reconstructed by the evaluation branch.
    pub loss_evaluation: T,
    /// One tensor per adaptive parameter; empty when gradients were not requested.
    pub grads: Vec<Tensor<T>>,
}

fn check_batch<T: Scalar>(model: &DyVit<T>, batch: &[Tensor<T>], masks: &[MaskPair]) -> Result<usize> {
    let s = model.config().image_size;
    if batch.is_empty() {
        return Err(ComaError::Config("empty batch".into()));
    }
    if batch.len() != masks.len() {
        return Err(ComaError::Config(format!("{} images but {} masks", batch.len(), masks.len())));
    }
    if let Some(bad) = batch.iter().find(|x| x.shape() != [3, s, s]) {
        return Err(ComaError::Config(format!("batch image shape {:?}, expected [3, {s}, {s}]", bad.shape())));
    }
    Ok(batch.len() * 3 * s * s)
}

fn grid_of(model: &DyVit<impl Scalar>) -> PatchGrid {
    PatchGrid::square(model.config().grid_side())
}

/// The composite objective: both branches reconstruct, the result is
/// composed patch-wise from whichever branch did not see each patch, and
/// the squared error is averaged over every element of the batch.
///
/// Only the adaptive branch is recorded for differentiation; the evaluation
/// forward runs on constants and must leave the graph untouched.
pub fn composite_objective<T: Scalar>(
    model: &DyVit<T>,
    adaptive: &ParamStore<T>,
    evaluation: &ParamStore<T>,
    batch: &[Tensor<T>],
    masks: &[MaskPair],
    with_grads: bool,
) -> Result<Objective<T>> {
    let total = check_batch(model, batch, masks)?;
    let inv_n = T::one() / T::of_usize(total);
    let grid = grid_of(model);
    let px = model.config().patch_size;
    let mut out = Objective { loss: T::zero(), loss_adaptive: T::zero(), loss_evaluation: T::zero(), grads: Vec::new() };
    for (image, pair) in batch.iter().zip(masks) {
        let g = Graph::new();
        let ba = adaptive.bind(&g, with_grads);
        let be = evaluation.bind(&g, false);
        let x = Var::constant(image.clone());
        let a = model.reconstruct(&g, &ba, &x, pair.adaptive_mask())?;
        let before = g.len();
        let e = model.reconstruct(&g, &be, &x, pair.evaluation_mask())?;
        if g.len() != before {
            return Err(ComaError::Invariant("evaluation forward recorded graph nodes".into()));
        }
        let rec = compose_reconstruction(&g, &a, &e, pair, grid)?;
        let d = g.sub(&rec, &x)?;
        let loss = g.scale(&g.sum(&g.mul(&d, &d)?)?, inv_n)?;
        out.loss += loss.value().item()?;

        let from_a = mask_image::<T>(pair.evaluation_mask(), grid, px, 3)?;
        let from_e = mask_image::<T>(pair.adaptive_mask(), grid, px, 3)?;
        out.loss_adaptive += squared_error(a.value(), image, Some(&from_a))? * inv_n;
        out.loss_evaluation += squared_error(e.value(), image, Some(&from_e))? * inv_n;

        if with_grads {
            accumulate(&mut out.grads, ba.gradients(&g.backward(&loss)?))?;
        }
    }
    Ok(out)
}

/// The adaptive branch alone, scored only where it fills in the composition:
/// `Σ ((A − X)∘M̄)² / N`. Its gradient must equal the composite one.
pub fn adaptive_masked_objective<T: Scalar>(
    model: &DyVit<T>,
    adaptive: &ParamStore<T>,
    batch: &[Tensor<T>],
    masks: &[MaskPair],
) -> Result<Objective<T>> {
    let total = check_batch(model, batch, masks)?;
    let inv_n = T::one() / T::of_usize(total);
    let grid = grid_of(model);
    let px = model.config().patch_size;
    let mut out = Objective { loss: T::zero(), loss_adaptive: T::zero(), loss_evaluation: T::zero(), grads: Vec::new() };
    for (image, pair) in batch.iter().zip(masks) {
        let g = Graph::new();
        let ba = adaptive.bind(&g, true);
        let x = Var::constant(image.clone());
        let a = model.reconstruct(&g, &ba, &x, pair.adaptive_mask())?;
        let hidden = Var::constant(mask_image::<T>(pair.evaluation_mask(), grid, px, 3)?);
        let d = g.mul(&g.sub(&a, &x)?, &hidden)?;
        let loss = g.scale(&g.sum(&g.mul(&d, &d)?)?, inv_n)?;
        out.loss += loss.value().item()?;
        accumulate(&mut out.grads, ba.gradients(&g.backward(&loss)?))?;
    }
    out.loss_adaptive = out.loss;
    Ok(out)
}

fn accumulate<T: Scalar>(acc: &mut Vec<Tensor<T>>, grads: Vec<Tensor<T>>) -> Result<()> {
    if acc.is_empty() {
        *acc = grads;
        return Ok(());
    }
    for (a, g) in acc.iter_mut().zip(&grads) {
        a.add_assign(g)?;
    }
    Ok(())
}

/// Draws one complementary pair per image from the `(seed, Mask, step)` stream.
pub fn sample_masks(config: &RunConfig, step: u64, count: usize) -> Result<Vec<MaskPair>> {
    let mut rng = stream_rng(config.train.seed, Stream::Mask, step);
    (0..count)
        .map(|_| sample_mask_pair(config.model.n_patches(), config.model.mask_ratio, &mut rng))
        .collect()
}

/// Indices of the images used at `step`: the whole dataset when it fits in
/// one batch, otherwise a uniform draw without replacement.
pub fn select_batch(seed: u64, step: u64, dataset_len: usize, batch_size: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset_len).collect();
    if dataset_len <= batch_size {
        return idx;
    }
    let mut rng = stream_rng(seed, Stream::Batch, step);
    for i in 0..batch_size {
        let j = rng.random_range(i..dataset_len);
        idx.swap(i, j);
    }
    idx.truncate(batch_size);
    idx
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_adaptive: f64,
    pub loss_evaluation: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,loss_adaptive,loss_evaluation,lr,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:.6}",
            self.step, self.loss, self.loss_adaptive, self.loss_evaluation, self.lr, self.seconds
        )
    }
}

/// Everything needed to continue training.
pub struct TrainState<T> {
    config: RunConfig,
    model: DyVit<T>,
    pub adaptive: ParamStore<T>,
    pub evaluation: ParamStore<T>,
    pub adam: AdamState<T>,
    step: u64,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state: parameters from the init stream, both branches equal.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let adaptive = ParamStore::init(param_specs(&config.model)?, config.train.seed)?;
        let evaluation = adaptive.clone();
        let adam = AdamState::zeros_like(&adaptive);
        Ok(Self { model: DyVit::new(&config.model)?, config, adaptive, evaluation, adam, step: 0 })
    }

    /// Reassembles a state from stored parts, checking every shape.
    pub fn from_parts(
        config: RunConfig,
        adaptive: ParamStore<T>,
        evaluation: ParamStore<T>,
        adam: AdamState<T>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config.model)?;
        for store in [&adaptive, &evaluation] {
            if store.specs() != specs.as_slice() {
                return Err(ComaError::Format("parameter table does not match the configuration".into()));
            }
        }
        let shapes_ok = |ts: &[Tensor<T>]| {
            ts.len() == specs.len() && ts.iter().zip(&specs).all(|(t, s)| t.shape() == s.shape.as_slice())
        };
        if !shapes_ok(&adam.m) || !shapes_ok(&adam.v) {
            return Err(ComaError::Format("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { model: DyVit::new(&config.model)?, config, adaptive, evaluation, adam, step })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &DyVit<T> {
        &self.model
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// `θ_E ← θ_A`, a plain copy.
    pub fn sync_evaluation(&mut self) -> Result<()> {
        self.evaluation.copy_from(&self.adaptive)
    }

    /// One iteration: sync, sample masks, both forwards, composed loss,
    /// backward through the adaptive branch, AdamW on the adaptive parameters.
    pub fn train_step(&mut self, batch: &[Tensor<T>]) -> Result<StepMetrics> {
        let start = Instant::now();
        let t = self.step + 1;
        if (t - 1).is_multiple_of(self.config.train.sync_every) {
            self.sync_evaluation()?;
        }
        let masks = sample_masks(&self.config, t, batch.len())?;
        let diagnose = |what: String| {
            let dump: Vec<String> = masks
                .iter()
                .map(|m| m.adaptive_mask().iter().map(|&b| if b { '1' } else { '0' }).collect())
                .collect();
            ComaError::Numerical(format!(
                "{what} at step {t} (seed {}, adaptive masks [{}])",
                self.config.train.seed,
                dump.join(" ")
            ))
        };
        let obj = composite_objective(&self.model, &self.adaptive, &self.evaluation, batch, &masks, true)
            .map_err(|e| match e {
                ComaError::Numerical(m) => diagnose(m),
                other => other,
            })?;
        if !obj.loss.is_finite() {
            return Err(diagnose("non-finite loss".into()));
        }
        if !obj.grads.iter().all(Tensor::all_finite) {
            return Err(diagnose("non-finite gradient".into()));
        }
        let lr = self.config.optim.lr_at(t, self.config.train.steps);
        let hyper = AdamHyper::from_config(&self.config.optim, lr);
        adamw_step(&mut self.adaptive, &obj.grads, &mut self.adam, &hyper, t)?;
        self.step = t;
        Ok(StepMetrics {
            step: t,
            loss: obj.loss.as_f64(),
            loss_adaptive: obj.loss_adaptive.as_f64(),
            loss_evaluation: obj.loss_evaluation.as_f64(),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Changes the run length and checkpoint period, e.g. when resuming.
    pub fn set_schedule(&mut self, steps: u64, checkpoint_every: u64) {
        self.config.train.steps = steps;
        self.config.train.checkpoint_every = checkpoint_every;
    }

    /// Both branch outputs for one image and their composition.
    pub fn reconstruct(&self, image: &Tensor<T>, pair: &MaskPair) -> Result<Reconstruction<T>> {
        let g = Graph::new();
        let ba = self.adaptive.bind(&g, false);
        let be = self.evaluation.bind(&g, false);
        let x = Var::constant(image.clone());
        let a = self.model.reconstruct(&g, &ba, &x, pair.adaptive_mask())?;
        let e = self.model.reconstruct(&g, &be, &x, pair.evaluation_mask())?;
        let composite = compose_reconstruction(&g, &a, &e, pair, grid_of(&self.model))?;
        Ok(Reconstruction { adaptive: a.value().clone(), evaluation: e.value().clone(), composite: composite.value().clone() })
    }
}

pub struct Reconstruction<T> {
    pub adaptive: Tensor<T>,
    pub evaluation: Tensor<T>,
    pub composite: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn mse_examples() {
        let g = Graph::<f64>::new();
        let x = Var::constant(Tensor::from_vec([2, 2], vec![0.1, -2.0, 3.5, 0.0]).unwrap());
        assert_eq!(mse_loss(&g, &x, &x).unwrap().value().item().unwrap(), 0.0);
        let y = Var::constant(x.value().map(|v| v + 1.0));
        let l = mse_loss(&g, &y, &x).unwrap().value().item().unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_selection_is_deterministic() {
        assert_eq!(select_batch(1, 3, 4, 16), vec![0, 1, 2, 3]);
        let a = select_batch(1, 3, 64, 16);
        assert_eq!(a, select_batch(1, 3, 64, 16));
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 16);
    }

    #[test]
    fn metrics_row_has_six_fields() {
        let m = StepMetrics { step: 3, loss: 0.5, loss_adaptive: 0.2, loss_evaluation: 0.3, lr: 1e-3, seconds: 0.01 };
        assert_eq!(m.csv_row().split(',').count(), StepMetrics::CSV_HEADER.split(',').count());
    }

    #[test]
    fn wrong_batch_shape_rejected() {
        let mut cfg = RunConfig::new(ModelConfig::dyvit_nano());
        cfg.train.batch_size = 1;
        let mut st = TrainState::<f64>::new(cfg).unwrap();
        assert!(st.train_step(&[Tensor::zeros([3, 32, 32])]).is_err());
        assert_eq!(st.step(), 0);
    }
}
