//! SGD training loop: momentum with coupled weight decay, a single
//! step-function learning-rate drop, Polyak-averaged inference weights,
//! periodic held-out evaluation and a metrics log.

pub mod checkpoint;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use checkpoint::TrainState;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::dataset::{Batch, Loader};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{Bindings, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Fraction of total_steps after which the decay factor applies.
    pub decay_at: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// LSTM state clamp; forwarded to the decoder configuration.
    pub clip: f64,
    /// None picks 0.99 for runs under 10k steps and 0.9999 otherwise.
    pub polyak_decay: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// None evaluates every max(100, total/100) steps.
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn desk(total_steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps,
            base_lr: 0.002,
            lr_decay_factor: 0.1,
            decay_at: 0.6,
            momentum: 0.75,
            weight_decay: 4e-5,
            label_smoothing: 0.9,
            clip: 10.0,
            polyak_decay: None,
            batch_size: 32,
            seed: 1,
            augment: true,
            eval_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("total_steps and batch_size must be positive"));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(0.0 < self.decay_at && self.decay_at < 1.0) {
            return Err(Error::invalid(format!("decay_at {} outside (0,1)", self.decay_at)));
        }
        if let Some(d) = self.polyak_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("polyak_decay {d} outside [0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(0.0 < self.label_smoothing && self.label_smoothing <= 1.0) {
            return Err(Error::invalid("label_smoothing outside (0,1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("negative weight_decay"));
        }
        Ok(())
    }

    pub fn resolved_polyak(&self) -> f64 {
        self.polyak_decay.unwrap_or(if self.total_steps < 10_000 { 0.99 } else { 0.9999 })
    }

    pub fn eval_cadence(&self) -> usize {
        self.eval_every.unwrap_or_else(|| (self.total_steps / 100).max(100))
    }

    /// First step index that uses the decayed rate.
    pub fn decay_step(&self) -> usize {
        (self.decay_at * self.total_steps as f64).round() as usize
    }
}

/// Step-function schedule: base rate, then base times the decay factor from
/// decay_step onward.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.decay_step() {
        cfg.base_lr * cfg.lr_decay_factor
    } else {
        cfg.base_lr
    }
}

/// One momentum step with coupled weight decay:
/// v <- momentum*v + (g + weight_decay*w); w <- w - lr*v.
/// Parameters without a gradient entry take g = 0. A non-finite gradient
/// aborts with the parameter's name.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut ParamStore<S>,
    velocity: &mut ParamStore<S>,
    grads: &BTreeMap<String, Vec<S>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (S::from_f64(lr), S::from_f64(momentum), S::from_f64(weight_decay));
    for (name, w) in params.iter_mut() {
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam { name: format!("velocity/{name}") })?;
        if let Some(g) = grads.get(name) {
            if g.iter().any(|x| !x.as_f64().is_finite()) {
                return Err(Error::NanGradient { name: name.clone() });
            }
            if g.len() != w.values.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_momentum_step",
                    lhs: vec![g.len()],
                    rhs: vec![w.values.len()],
                });
            }
            for i in 0..w.values.len() {
                v.values[i] = m * v.values[i] + (g[i] + wd * w.values[i]);
                w.values[i] -= lr * v.values[i];
            }
        } else {
            for i in 0..w.values.len() {
                v.values[i] = m * v.values[i] + wd * w.values[i];
                w.values[i] -= lr * v.values[i];
            }
        }
    }
    Ok(())
}

/// Exponential moving average toward the current weights:
/// shadow <- decay*shadow + (1-decay)*params.
pub fn polyak_update<S: Scalar>(
    shadow: &mut ParamStore<S>,
    params: &ParamStore<S>,
    decay: f64,
) {
    let d = S::from_f64(decay);
    let one_minus = S::from_f64(1.0 - decay);
    for (name, s) in shadow.iter_mut() {
        let p = &params[name];
        for i in 0..s.values.len() {
            s.values[i] = d * s.values[i] + one_minus * p.values[i];
        }
    }
}

/// Fraction of samples whose padded symbol sequence matches the target
/// exactly, nulls included.
pub fn full_sequence_accuracy(
    predictions: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("no sequences to score"));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean batch loss and summed gradients. Samples run on parallel tapes
/// against shared read-only weights; the reduction folds in sample order,
/// so results do not depend on scheduling.
pub fn batch_gradients(
    mcfg: &ModelConfig,
    params: &ParamStore<f32>,
    batch: &Batch,
    smoothing: f64,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let dcfg = mcfg.decoder()?;
    let per_sample: Vec<Result<(f64, BTreeMap<String, Vec<f32>>)>> = batch
        .views
        .par_iter()
        .zip(&batch.targets)
        .map(|(views, target)| {
            let tensors: Vec<Tensor<f32>> = views.iter().map(|v| v.to_tensor()).collect();
            let mut tape = Tape::new();
            let mut bind = Bindings::new(params);
            let (loss, _) =
                model::train_loss(&mut tape, &mut bind, mcfg, &dcfg, &tensors, target, smoothing)?;
            tape.backward(loss)?;
            let grads = bind.gradients(&tape);
            Ok((tape.values(loss)[0] as f64, grads))
        })
        .collect();

    let scale = 1.0 / batch.views.len() as f32;
    let mut loss_sum = 0.0;
    let mut total: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for r in per_sample {
        let (loss, grads) = r?;
        loss_sum += loss;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum / batch.views.len() as f64, total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

/// Teacher-forced loss plus greedy full-sequence accuracy over a whole
/// loader, without augmentation.
pub fn evaluate(
    mcfg: &ModelConfig,
    params: &ParamStore<f32>,
    loader: &Loader,
    smoothing: f64,
) -> Result<EvalReport> {
    if loader.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let dcfg = mcfg.decoder()?;
    let results: Vec<Result<(f64, bool)>> = (0..loader.len())
        .into_par_iter()
        .map(|i| {
            let tensors: Vec<Tensor<f32>> =
                loader.views(i).iter().map(|v| v.to_tensor()).collect();
            let target = loader.target(i);
            let mut tape = Tape::inference();
            let mut bind = Bindings::new(params);
            let (loss, _) =
                model::train_loss(&mut tape, &mut bind, mcfg, &dcfg, &tensors, target, smoothing)?;
            let loss = tape.values(loss)[0] as f64;
            let pred = model::infer(params, mcfg, &tensors)?;
            Ok((loss, pred.symbols == target))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    for r in results {
        let (loss, hit) = r?;
        loss_sum += loss;
        hits += hit as usize;
    }
    Ok(EvalReport {
        loss: loss_sum / loader.len() as f64,
        accuracy: hits as f64 / loader.len() as f64,
    })
}

/// One metrics row per evaluation event.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_fullseq_acc: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,train_loss,eval_loss,eval_fullseq_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.lr, r.train_loss, r.eval_loss, r.eval_fullseq_acc
        ));
    }
    out
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Run the full training loop. Evaluation always uses the Polyak shadow,
/// which is what inference defaults to.
pub fn train(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &Loader,
    eval: &Loader,
) -> Result<TrainOutcome> {
    let mut mcfg = mcfg.clone();
    mcfg.state_clip = tcfg.clip;
    mcfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if eval.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }

    let mut state = TrainState::new(&mcfg, tcfg.seed)?;
    let polyak_decay = tcfg.resolved_polyak();
    let cadence = tcfg.eval_cadence();
    let root = Rng::new(tcfg.seed);
    let mut shuffle_rng = root.derive(0x7368756666);
    let augment_root = root.derive(0x617567);

    let mut order = data.epoch_order(&mut shuffle_rng);
    let mut pos = 0usize;
    let mut metrics = Vec::new();
    for step in 0..tcfg.total_steps {
        let take = tcfg.batch_size.min(data.len());
        if pos + take > order.len() {
            order = data.epoch_order(&mut shuffle_rng);
            pos = 0;
        }
        let indices = &order[pos..pos + take];
        pos += take;
        let augment = tcfg.augment.then(|| augment_root.derive(step as u64));
        let batch = data.batch(indices, augment);

        let lr = lr_at(step, tcfg);
        let (train_loss, grads) =
            batch_gradients(&mcfg, &state.params, &batch, tcfg.label_smoothing)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        sgd_momentum_step(
            &mut state.params,
            &mut state.velocity,
            &grads,
            lr,
            tcfg.momentum,
            tcfg.weight_decay,
        )?;
        polyak_update(&mut state.polyak, &state.params, polyak_decay);
        state.step = step + 1;

        let done = step + 1 == tcfg.total_steps;
        if (step + 1) % cadence == 0 || done {
            let report = evaluate(&mcfg, &state.polyak, eval, tcfg.label_smoothing)?;
            metrics.push(MetricsRow {
                step: step + 1,
                lr,
                train_loss,
                eval_loss: report.loss,
                eval_fullseq_acc: report.accuracy,
            });
        }
    }
    Ok(TrainOutcome { state, metrics })
}
