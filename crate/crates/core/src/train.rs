//! Training: Adam on binary cross-entropy with logits.
//!
//! Shuffling, init and updates are all seeded, so the parameter trajectory
//! is reproducible bit for bit at a fixed precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state; moments kept at 64-bit independent of the model precision.
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the model's parameters. `grads` must align with the
    /// model's parameter traversal order; missing gradients count as zero.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let mut i = 0;
        model.for_each_param_mut(&mut |_, tensor| {
            let g = &grads[i];
            if self.m.len() == i {
                self.m.push(vec![0.0; tensor.numel()]);
                self.v.push(vec![0.0; tensor.numel()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.make_mut();
            for j in 0..data.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j].as_f64());
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let update = self.lr * (m[j] / bias1) / ((v[j] / bias2).sqrt() + ADAM_EPS);
                data[j] = data[j] - T::from_f64(update);
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Train in place on the dataset's training split using the model's own
/// config (learning rate, batch size, epochs, seed).
pub fn train<T: Scalar>(model: &mut Model<T>, data: &Dataset) -> Result<TrainReport> {
    train_on(model, data, data.train())
}

/// Train on an explicit example slice (attribute lookups still go through
/// `data`). Aborts with diagnostics when the loss stops being finite.
pub fn train_on<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    examples: &[Example],
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("empty training stream".into()));
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut ctx = Ctx::recording();
            let loss = model.loss_on_batch(&mut ctx, &batch, data)?;
            let loss_val = loss.data()[0].as_f64();
            ctx.backward(&loss)?;
            let params = model.params();
            let grads: Vec<Option<Tensor<T>>> =
                params.iter().map(|(_, t)| ctx.grad(t)).collect();
            drop(ctx);
            if !loss_val.is_finite() {
                let grad_norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                return Err(Error::TrainDiverged {
                    step: report.steps,
                    grad_norm,
                    lr: cfg.learning_rate,
                });
            }
            adam.step(model, &grads);
            report.losses.push(loss_val);
            report.steps += 1;
        }
    }
    model.trained = true;
    Ok(report)
}

/// Sigmoid scores and labels over an example slice, for metric computation.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    examples: &[Example],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut ctx = Ctx::inference();
    for ex in examples {
        let req = model.embed_request(&mut ctx, ex, data)?;
        let logit = model.score(&mut ctx, &req)?;
        let p = ops::sigmoid(&mut ctx, &logit)?;
        preds.push(p.data()[0].as_f64());
        labels.push(f64::from(ex.label));
    }
    Ok((preds, labels))
}
