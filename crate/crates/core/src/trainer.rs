//! Adam, accumulated mini-batch gradients, the training loop, and the
//! finite-difference self-check suite.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Utterance;
use crate::encoder::stream_rng;
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::numcore::Scalar;
use crate::sshr_model::{SshrConfig, SshrModel};

mod gradcheck_suite;

pub use gradcheck_suite::{gradcheck_suite, gradcheck_suite_with, GradCase, GradReport, GradReportEntry};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_SHUFFLE: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub accumulation: usize,
    /// Utterances per micro-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_interval: usize,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            accumulation: 1,
            batch_size: 8,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.warmup_steps == 0 || self.accumulation == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config(
                "warmup_steps, accumulation, batch_size and eval_interval must be ≥ 1",
            ));
        }
        Ok(())
    }

    /// Linear warmup to the peak rate, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [T]>) -> Self {
        let m: Vec<Vec<T>> = shapes.into_iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[Vec<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config("adam_step: parameter and gradient counts differ"));
    }
    if params.iter().zip(grads).zip(&state.m).any(|((p, g), m)| p.len() != g.len() || p.len() != m.len()) {
        return Err(Error::config("adam_step: parameter and gradient shapes differ"));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS));
    let (c1, c2, lr) = (T::lit(c1), T::lit(c2), T::lit(lr));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Averaged gradient of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient<T> {
    pub grads: Vec<Vec<T>>,
    /// Mean combined loss over the utterances that contributed.
    pub loss: f64,
    pub used: usize,
    /// Ids of utterances skipped because CTC could not align them.
    pub skipped: Vec<String>,
}

/// Mean over micro-batches of each micro-batch's mean gradient.
///
/// Utterances are processed in parallel but summed in order, so the result
/// does not depend on the thread count.
pub fn step_gradient<T: Scalar>(model: &SshrModel, micro_batches: &[&[Utterance]]) -> Result<StepGradient<T>> {
    let mut total: Option<Vec<Vec<T>>> = None;
    let mut counted = 0usize;
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for batch in micro_batches {
        let results: Vec<_> = batch
            .par_iter()
            .map(|u| model.loss_and_grads::<T>(&u.features, &u.transcript, u.lang))
            .collect();
        let mut sum: Option<Vec<Vec<T>>> = None;
        let mut n = 0usize;
        for (u, r) in batch.iter().zip(results) {
            match r {
                Ok((terms, g)) => {
                    loss += terms.total;
                    n += 1;
                    match &mut sum {
                        None => sum = Some(g),
                        Some(s) => add_into(s, &g),
                    }
                }
                Err(e) if matches!(e.root(), Error::CtcInfeasible { .. }) => {
                    log::warn!("skipping {}: {e}", u.id);
                    skipped.push(u.id.clone());
                }
                Err(e) => return Err(e.at(format!("utterance {}", u.id))),
            }
        }
        let Some(mut s) = sum else { continue };
        scale_all(&mut s, T::lit(n as f64));
        used += n;
        counted += 1;
        match &mut total {
            None => total = Some(s),
            Some(t) => add_into(t, &s),
        }
    }
    let mut grads = match total {
        Some(g) => g,
        None => model.params().iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
    };
    if counted > 1 {
        scale_all(&mut grads, T::lit(counted as f64));
    }
    Ok(StepGradient {
        grads,
        loss: if used > 0 { loss / used as f64 } else { 0.0 },
        used,
        skipped,
    })
}

fn add_into<T: Scalar>(acc: &mut [Vec<T>], g: &[Vec<T>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn scale_all<T: Scalar>(g: &mut [Vec<T>], divisor: T) {
    for v in g.iter_mut().flatten() {
        *v = *v / divisor;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub dev_per: f64,
    pub dev_lid_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SshrModel,
    pub metrics: Vec<MetricsRow>,
    pub skipped: usize,
}

/// Where a run writes its files; `None` keeps everything in memory.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    pub dir: Option<&'a Path>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Trains from the model's seeded initialization.
pub fn train(model_cfg: &SshrConfig, cfg: &TrainConfig, train_set: &[Utterance], dev_set: &[Utterance], out: TrainOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = SshrModel::new(model_cfg.clone())?;
    train_model(model, cfg, train_set, dev_set, out)
}

pub fn train_model(
    mut model: SshrModel,
    cfg: &TrainConfig,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    out: TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }
    let mut metrics_file = match out.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let per_step = cfg.batch_size * cfg.accumulation;
    let mut rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut adam = AdamState::<f32>::new(model.params().iter().map(|p| p.values.as_slice()));
    let mut metrics = Vec::new();
    let mut skipped = 0usize;
    let (mut loss_sum, mut loss_steps) = (0.0, 0usize);
    let mut batch: Vec<Utterance> = Vec::with_capacity(per_step);

    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let micro: Vec<&[Utterance]> = batch.chunks(cfg.batch_size).collect();
        let g = step_gradient::<f32>(&model, &micro).map_err(|e| e.at(format!("step {step}")))?;
        skipped += g.skipped.len();
        if g.used > 0 {
            loss_sum += g.loss;
            loss_steps += 1;
            let mut views: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.values.as_mut_slice()).collect();
            adam_step(&mut views, &g.grads, &mut adam, cfg.lr_at(step))?;
        }

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let ev = evaluate(&model, dev_set)?;
            let row = MetricsRow {
                step: done,
                loss: if loss_steps > 0 { loss_sum / loss_steps as f64 } else { 0.0 },
                dev_per: ev.per,
                dev_lid_acc: ev.lid_accuracy,
            };
            log::info!(
                "step {done} loss {:.4} dev PER {:.4} LID {:?}",
                row.loss,
                row.dev_per,
                row.dev_lid_acc
            );
            if let Some((f, p)) = &mut metrics_file {
                writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&*p, e))?;
            }
            metrics.push(row);
            (loss_sum, loss_steps) = (0.0, 0);
        }
        if let Some(d) = out.dir {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
                model.save(&d.join(format!("step-{done:06}.ckpt")))?;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} utterance presentations skipped as CTC-infeasible");
    }
    if let Some(d) = out.dir {
        model.save(&d.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        skipped,
    })
}
