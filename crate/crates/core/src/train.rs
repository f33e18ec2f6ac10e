//! Denoising objective, its exact gradient, and the training loop.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Condition, DenoiserParams};
use crate::optim::Adam;
use crate::par;
use crate::rng::{label, StreamKey};
use crate::scenario::Dataset;
use crate::schedule::NoiseSchedule;

/// Rows per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how chunks were scheduled.
const CHUNK: usize = 64;

/// One training term with its realized timestep, noise and (possibly dropped) condition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: Vec<f64>,
    pub cond: Condition,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Draws `(t, eps)` per sample and replaces the condition by `Null` with probability `p_uncond`.
pub fn draw_examples(
    batch: &[(&[f64], Condition)],
    schedule: &NoiseSchedule,
    key: StreamKey,
    p_uncond: f64,
) -> Vec<TrainExample> {
    let total = schedule.timesteps();
    batch
        .iter()
        .enumerate()
        .map(|(i, (x0, cond))| {
            let mut rng = key.split(i as u64).rng();
            let t = rng.gen_range(1..=total);
            let drop = rng.gen::<f64>() < p_uncond;
            let eps = (0..x0.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            TrainExample {
                x0: x0.to_vec(),
                cond: if drop { Condition::Null } else { *cond },
                t,
                eps,
            }
        })
        .collect()
}

fn chunk_loss_and_grad(
    params: &DenoiserParams,
    chunk: &[TrainExample],
    schedule: &NoiseSchedule,
    denom: f64,
) -> Result<(f64, DenoiserParams)> {
    let d = params.arch().data_dim;
    let mut xt = Array2::zeros((chunk.len(), d));
    let mut target = Array2::zeros((chunk.len(), d));
    for (i, ex) in chunk.iter().enumerate() {
        check_dim(d, ex.x0.len())?;
        let noisy = schedule.forward_diffuse(&ex.x0, ex.t, &ex.eps)?;
        for k in 0..d {
            xt[[i, k]] = noisy[k];
            target[[i, k]] = ex.eps[k];
        }
    }
    let ts: Vec<usize> = chunk.iter().map(|e| e.t).collect();
    let conds: Vec<Condition> = chunk.iter().map(|e| e.cond).collect();
    let (pred, cache) = params.forward(xt.view(), &ts, &conds)?;
    let resid = &pred - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / denom;
    let grad_out = resid.mapv(|r| 2.0 * r / denom);
    let mut grads = params.zeros_like();
    params.backward(&cache, grad_out.view(), &mut grads);
    Ok((loss, grads))
}

/// Mean over the batch of `|eps - eps_theta(x_t, t, e)|^2` and its exact gradient.
pub fn loss_and_grad(
    params: &DenoiserParams,
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if examples.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let denom = examples.len() as f64;
    let chunks: Vec<&[TrainExample]> = examples.chunks(CHUNK).collect();
    let parts = par::map_indexed(chunks.len(), |i| {
        chunk_loss_and_grad(params, chunks[i], schedule, denom)
    });
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Draws the per-sample noise from `key` and evaluates [`loss_and_grad`].
pub fn loss_and_grad_sampled(
    params: &DenoiserParams,
    batch: &[(&[f64], Condition)],
    schedule: &NoiseSchedule,
    key: StreamKey,
    p_uncond: f64,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    loss_and_grad(params, &draw_examples(batch, schedule, key, p_uncond), schedule)
}

pub fn new_optimizer(params: &DenoiserParams) -> Adam {
    Adam::new(params.tensors().iter().map(|t| t.len()))
}

/// One optimizer step on `examples`. Returns the pre-update loss.
pub fn train_step(
    params: &mut DenoiserParams,
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
    optimizer: &mut Adam,
    lr: f64,
) -> Result<f64> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Usage(format!("learning rate must be >= 0, got {lr}")));
    }
    let (loss, grads) = loss_and_grad(params, examples, schedule)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NumericAbort {
            step: optimizer.steps_taken() as usize,
            reason: format!("non-finite loss or gradient (loss = {loss})"),
        });
    }
    optimizer.update(params.tensors_mut(), grads.tensors(), lr);
    params.steps_trained += 1;
    if !params.all_finite() {
        return Err(Error::NumericAbort {
            step: optimizer.steps_taken() as usize,
            reason: "parameters became non-finite".into(),
        });
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step by cosine decay; equal to `lr` for a constant rate.
    pub lr_final: f64,
    /// Condition-dropout probability.
    pub p_uncond: f64,
    pub log_every: usize,
    /// Decay of the weight average that replaces the parameters after the
    /// last step; 0 keeps the raw final iterate.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 8000,
            batch_size: 256,
            lr: 2e-3,
            lr_final: 1e-4,
            p_uncond: 0.1,
            log_every: 100,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(Error::Config("need 0 < lr_final <= lr".into()));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config("p_uncond must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub probe_loss: f64,
}

/// Trains `params` in place on minibatches drawn with replacement from `dataset`.
///
/// Every `log_every` steps (and after the last) the loss on a frozen probe
/// batch is evaluated; a non-finite probe loss aborts training.
pub fn train(
    params: &mut DenoiserParams,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let root = StreamKey::root(seed).split(label::TRAIN);
    let pick = |key: StreamKey, n: usize| -> Vec<(&[f64], Condition)> {
        let mut rng = key.rng();
        (0..n)
            .map(|_| {
                let r = &dataset.records[rng.gen_range(0..dataset.records.len())];
                (r.x0.as_slice(), Condition::Class(r.condition))
            })
            .collect()
    };
    let probe_batch = pick(root.split(u64::MAX), 128.min(cfg.batch_size.max(16)));
    let probe = draw_examples(&probe_batch, schedule, root.split(u64::MAX - 1), cfg.p_uncond);

    let mut optimizer = new_optimizer(params);
    let mut ema = (cfg.ema_decay > 0.0).then(|| params.clone());
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut since = 0usize;
    for step in 0..cfg.steps {
        let key = root.split(step as u64);
        let batch = pick(key.split(0), cfg.batch_size);
        let examples = draw_examples(&batch, schedule, key.split(1), cfg.p_uncond);
        let loss = train_step(params, &examples, schedule, &mut optimizer, cfg.lr_at(step))
            .map_err(|e| match e {
                Error::NumericAbort { reason, .. } => Error::NumericAbort { step, reason },
                other => other,
            })?;
        if let Some(avg) = ema.as_mut() {
            let d = cfg.ema_decay;
            for (a, p) in avg.tensors_mut().into_iter().zip(params.tensors()) {
                for (x, y) in a.iter_mut().zip(p) {
                    *x = d * *x + (1.0 - d) * y;
                }
            }
        }
        running += loss;
        since += 1;
        let last = step + 1 == cfg.steps;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last {
            let (probe_loss, _) = loss_and_grad(params, &probe, schedule)?;
            if !probe_loss.is_finite() {
                return Err(Error::NumericAbort {
                    step,
                    reason: "probe loss is not finite".into(),
                });
            }
            let point = LossPoint {
                step: step + 1,
                loss: running / since as f64,
                probe_loss,
            };
            on_log(&point);
            curve.push(point);
            running = 0.0;
            since = 0;
        }
    }
    if let Some(mut avg) = ema {
        avg.steps_trained = params.steps_trained;
        *params = avg;
    }
    Ok(curve)
}
