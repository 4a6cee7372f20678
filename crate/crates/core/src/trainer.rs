//! Deterministic training loop for the mapper (and optionally the ITM head).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{sample_subset, select_by_learnability, CurationPlan, PairDataset};
use crate::encoders::{encode_image, encode_text, ModelBundle, TextEncoding, Variant};
use crate::error::{Error, Result};
use crate::numkit::{lit, LayerParams, Scalar, Tensor};
use crate::objectives::{batch_objective, Batch, BatchOptions, Conditioning, PromptSource};
use crate::rng::Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SUBSET_STREAM: u64 = 0x6A09_E667_F3BC_C909;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Defaults to 1e-3 for C/S and 1e-5 for B.
    pub lr: Option<f64>,
    pub steps: usize,
    pub conditioning: Conditioning,
    pub finetune_itm: bool,
    pub jest_fraction: Option<f64>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub subset_fraction: f64,
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C,
            lr: None,
            steps: 500,
            conditioning: Conditioning::PerRow,
            finetune_itm: false,
            jest_fraction: None,
            seed: None,
            subset_fraction: 1.0,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn default_lr(variant: Variant) -> f64 {
        match variant {
            Variant::C | Variant::S => 1e-3,
            Variant::B => 1e-5,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| Self::default_lr(self.variant))
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.effective_lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::config("subset_fraction must be in (0, 1]"));
        }
        if let Some(f) = self.jest_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("jest_fraction must be in (0, 1]"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Adam moments for trainable tensors, keyed `layer.tensor`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, key: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(key)
    }
}

/// Global L2 norm of the accumulated gradients of the trainable layers.
pub fn grad_norm<T: Scalar>(layers: &[&mut LayerParams<T>]) -> f64 {
    layers
        .iter()
        .filter(|l| l.trainable)
        .flat_map(|l| l.grads().values())
        .map(|g| g.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update from the layers' accumulated gradients,
/// after clipping them to global norm `clip`. Frozen layers are skipped.
pub fn adam_step<T: Scalar>(
    layers: &mut [&mut LayerParams<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    for l in layers.iter().filter(|l| l.trainable) {
        if let Some((k, _)) = l.grads().iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for {}.{k}", l.name)));
        }
    }
    let norm = grad_norm(layers);
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2, eps, lr, scale) = (
        lit::<T>(ADAM_BETA1),
        lit::<T>(ADAM_BETA2),
        lit::<T>(ADAM_EPS),
        lit::<T>(lr),
        lit::<T>(scale),
    );
    let (bc1, bc2) = (lit::<T>(bc1), lit::<T>(bc2));
    for l in layers.iter_mut().filter(|l| l.trainable) {
        let name = l.name.clone();
        let moments = &mut state.moments;
        l.update(|key, w, g| {
            let (m, v) = moments
                .entry(format!("{name}.{key}"))
                .or_insert_with(|| (Tensor::zeros(w.rows(), w.cols()), Tensor::zeros(w.rows(), w.cols())));
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
        })?;
    }
    Ok(())
}

/// Stateful training loop over a fixed plan.
pub struct Trainer<'a, T: Scalar = f32> {
    model: ModelBundle<T>,
    ds: &'a PairDataset,
    texts: Vec<TextEncoding<T>>,
    patches: Vec<Tensor<T>>,
    stage1: Vec<Vec<T>>,
    plan: CurationPlan,
    cfg: TrainConfig,
    state: OptimizerState<T>,
    trace: Vec<f64>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Prepares frozen encodings, applies learnability selection and subset
    /// sampling, and sets which layers train.
    pub fn new(
        model: ModelBundle<T>,
        ds: &'a PairDataset,
        plan: &CurationPlan,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.variant != cfg.variant {
            return Err(Error::config(format!(
                "model variant {} differs from training variant {}",
                model.variant, cfg.variant
            )));
        }
        ds.validate_dims(&model.dims)?;
        plan.validate(ds.len())?;
        if plan.batches.iter().any(|b| b.len() < 2) {
            return Err(Error::config("training batches need at least 2 pairs"));
        }
        let (texts, patches): (Vec<_>, Vec<_>) = ds
            .records()
            .par_iter()
            .map(|r| Ok((encode_text(&model, &r.tokens)?, r.patches.cast::<T>())))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let stage1 = if model.variant == Variant::B {
            patches
                .par_iter()
                .map(|p| Ok(encode_image(&model, p, None)?.v_joint))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut model = model;
        model.mapper.trainable = true;
        model.itm_head.trainable = cfg.finetune_itm && cfg.variant == Variant::B;
        let mut trainer = Self {
            model,
            ds,
            texts,
            patches,
            stage1,
            plan: plan.clone(),
            cfg,
            state: OptimizerState::new(),
            trace: Vec::new(),
        };
        let mut rng = Rng::new(trainer.cfg.seed.unwrap_or(seed) ^ SUBSET_STREAM);
        let mut selected = sample_subset(plan, trainer.cfg.subset_fraction, &mut rng)?;
        if let Some(f) = trainer.cfg.jest_fraction {
            let learner = |b: &[usize]| trainer.batch_loss(b, PromptSource::Mapper);
            let reference = |b: &[usize]| trainer.batch_loss(b, PromptSource::None);
            selected = select_by_learnability(&selected, learner, reference, f)?;
        }
        if selected.batches.is_empty() {
            return Err(Error::config("training plan is empty after selection"));
        }
        trainer.plan = selected;
        Ok(trainer)
    }

    fn batch(&self, idx: &[usize]) -> Batch<'_, T> {
        Batch {
            texts: idx.iter().map(|&i| &self.texts[i]).collect(),
            patches: idx.iter().map(|&i| &self.patches[i]).collect(),
            stage1_images: if self.stage1.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.stage1[i].as_slice()).collect()
            },
        }
    }

    /// Loss of the current model on a batch without updating anything.
    pub fn batch_loss(&self, idx: &[usize], prompts: PromptSource) -> Result<f64> {
        let opts = BatchOptions {
            conditioning: self.cfg.conditioning,
            prompts,
            want_grads: false,
            want_itm_grads: false,
        };
        let loss = batch_objective(&self.model, &self.batch(idx), opts)?.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::numeric("non-finite batch loss"));
        }
        Ok(loss)
    }

    /// Runs one optimization step and returns its batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let s = self.trace.len();
        let idx = self.plan.batches[s % self.plan.batches.len()].clone();
        let opts = BatchOptions {
            conditioning: self.cfg.conditioning,
            prompts: PromptSource::Mapper,
            want_grads: true,
            want_itm_grads: self.model.itm_head.trainable,
        };
        let out = batch_objective(&self.model, &self.batch(&idx), opts)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at step {s}")));
        }
        self.model.mapper.zero_grad();
        self.model.itm_head.zero_grad();
        if let Some(g) = &out.mapper_grads {
            self.model.mapper.accumulate(g)?;
        }
        if let Some(g) = &out.itm_grads {
            self.model.itm_head.accumulate(g)?;
        }
        let lr = self.cfg.effective_lr();
        let clip = Some(self.cfg.grad_clip);
        let ModelBundle { mapper, itm_head, .. } = &mut self.model;
        adam_step(&mut [mapper, itm_head], &mut self.state, lr, clip)?;
        self.trace.push(loss);
        Ok(loss)
    }

    /// Runs all configured steps, calling `on_step(step, model, loss)` after
    /// each one.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, &ModelBundle<T>, f64) -> Result<()>) -> Result<()> {
        while self.trace.len() < self.cfg.steps {
            let loss = self.step()?;
            on_step(self.trace.len(), &self.model, loss)?;
        }
        Ok(())
    }

    pub fn model(&self) -> &ModelBundle<T> {
        &self.model
    }

    pub fn plan(&self) -> &CurationPlan {
        &self.plan
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn dataset(&self) -> &PairDataset {
        self.ds
    }

    pub fn into_parts(self) -> (ModelBundle<T>, Vec<f64>) {
        (self.model, self.trace)
    }
}

/// Trains `model` on `plan` and returns it with the per-step loss trace.
pub fn train<T: Scalar>(
    model: ModelBundle<T>,
    ds: &PairDataset,
    plan: &CurationPlan,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle<T>, Vec<f64>)> {
    let mut t = Trainer::new(model, ds, plan, cfg.clone(), seed)?;
    t.run(|_, _, _| Ok(()))?;
    Ok(t.into_parts())
}
