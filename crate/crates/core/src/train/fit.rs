//! The epoch loop: seeded shuffling, minibatch assembly, Adam updates with
//! optional clipping, validation-RMSE early stopping, and best-epoch
//! parameter restoration (including batch-norm running statistics).

use std::collections::BTreeMap;

use super::{adam_step, clip_gradients, lr_at_epoch, training_loss, AdamState, EarlyStopping, EpochRecord, ExperimentConfig, History};
use crate::error::{Error, Result};
use crate::layers::{Mode, NormState};
use crate::models::Model;
use crate::rng::{Prng, Stream};
use crate::tensor::graph::NodeId;
use crate::tensor::Tensor;

/// One prepared training sample: per-input tensors (no batch axis) plus the
/// EF target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub inputs: Vec<Tensor>,
    pub label: f64,
}

/// Prepare clips for a family: raw frames plus whatever derived inputs the
/// architecture declares.
pub fn prepare_samples(
    clips: &[crate::data::VideoClip],
    family: crate::models::Family,
) -> Result<Vec<TrainSample>> {
    clips
        .iter()
        .map(|c| {
            Ok(TrainSample {
                inputs: crate::models::model_inputs_for_clip(family, &c.frames)?,
                label: c.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// Training aborted on a non-finite loss or activation; the history up
    /// to the failing epoch is preserved.
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: History,
    pub status: TrainStatus,
}

fn stack_batch(samples: &[&TrainSample], n_inputs: usize) -> Result<(Vec<Tensor>, Tensor)> {
    let k = samples.len();
    let mut inputs = Vec::with_capacity(n_inputs);
    for slot in 0..n_inputs {
        let per_shape = samples[0].inputs[slot].shape().to_vec();
        let mut shape = vec![k];
        shape.extend_from_slice(&per_shape);
        let mut data = Vec::with_capacity(k * samples[0].inputs[slot].numel());
        for s in samples {
            if s.inputs[slot].shape() != per_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: per_shape,
                    right: s.inputs[slot].shape().to_vec(),
                    context: "batch sample shapes",
                });
            }
            data.extend_from_slice(s.inputs[slot].data());
        }
        inputs.push(Tensor::new_unchecked(shape, data));
    }
    let targets = Tensor::new_unchecked(vec![k, 1], samples.iter().map(|s| s.label).collect());
    Ok((inputs, targets))
}

/// Inference-mode predictions for a sample list, batched for memory.
pub fn predict_all(model: &mut Model, samples: &[TrainSample], batch_size: usize) -> Result<Vec<f64>> {
    let n_inputs = model.inputs.len();
    let mut rng = Prng::new(0, Stream::Dropout); // unused in inference
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let (inputs, _) = stack_batch(&refs, n_inputs)?;
        let fwd = model.forward(&inputs, Mode::Infer, &mut rng)?;
        preds.extend_from_slice(fwd.graph.value(fwd.output).data());
    }
    Ok(preds)
}

fn rmse_of(preds: &[f64], samples: &[TrainSample]) -> f64 {
    let sse: f64 = preds
        .iter()
        .zip(samples)
        .map(|(&p, s)| (p - s.label) * (p - s.label))
        .sum();
    (sse / samples.len() as f64).sqrt()
}

struct Snapshot {
    params: Vec<Tensor>,
    norm_states: BTreeMap<String, NormState>,
}

fn take_snapshot(model: &Model) -> Snapshot {
    Snapshot {
        params: model.params.iter().map(|p| p.value.clone()).collect(),
        norm_states: model.norm_states.clone(),
    }
}

fn restore_snapshot(model: &mut Model, snap: &Snapshot) {
    for (p, v) in model.params.iter_mut().zip(&snap.params) {
        p.value = v.clone();
    }
    model.norm_states = snap.norm_states.clone();
}

/// Train `model` on `train`, early-stopping on validation RMSE, and leave the
/// best epoch's parameters (and running statistics) in place.
pub fn fit(
    model: &mut Model,
    train: &[TrainSample],
    val: &[TrainSample],
    config: &ExperimentConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    if config.batch_size > train.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds training-set size {}",
            config.batch_size,
            train.len()
        )));
    }
    model.set_dropout_rate(config.dropout_rate)?;

    let mut shuffle_rng = Prng::new(config.seed, Stream::Shuffle);
    let mut dropout_rng = Prng::new(config.seed, Stream::Dropout);
    let param_refs: Vec<&Tensor> = model.params.iter().map(|p| &p.value).collect();
    let mut adam = AdamState::new(&param_refs);
    let param_names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let reg_names: Vec<String> = model
        .params
        .iter()
        .filter(|p| p.regularizable)
        .map(|p| p.name.clone())
        .collect();

    let mut history = History::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<Snapshot> = None;
    let n_inputs = model.inputs.len();

    for epoch in 0..config.max_epochs {
        let lr = lr_at_epoch(config, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut sse_sum = 0.0;
        let mut diverged: Option<String> = None;
        for batch_idx in order.chunks(config.batch_size) {
            let samples: Vec<&TrainSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let (inputs, targets) = stack_batch(&samples, n_inputs)?;
            let step = run_train_step(
                model,
                &inputs,
                &targets,
                &param_names,
                &reg_names,
                config,
                lr,
                &mut adam,
                &mut dropout_rng,
            );
            match step {
                Ok((batch_loss, batch_sse)) => {
                    loss_sum += batch_loss * samples.len() as f64;
                    sse_sum += batch_sse;
                }
                Err(Error::NonFinite { location }) => {
                    diverged = Some(location);
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        if let Some(location) = diverged {
            if let Some(snap) = &best {
                restore_snapshot(model, snap);
            }
            history.best_epoch = stopper.best_epoch().unwrap_or(0);
            return Ok(FitResult {
                history,
                status: TrainStatus::Diverged(location),
            });
        }

        let train_loss = loss_sum / train.len() as f64;
        let train_rmse = (sse_sum / train.len() as f64).sqrt();
        let val_preds = predict_all(model, val, config.batch_size)?;
        let val_rmse = rmse_of(&val_preds, val);
        let val_loss = val_rmse * val_rmse;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_rmse,
            val_loss,
            val_rmse,
        });

        let (improved, stop) = stopper.observe(epoch, val_rmse);
        if improved {
            best = Some(take_snapshot(model));
        }
        if stop {
            break;
        }
    }

    if let Some(snap) = &best {
        restore_snapshot(model, snap);
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    Ok(FitResult {
        history,
        status: TrainStatus::Completed,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_train_step(
    model: &mut Model,
    inputs: &[Tensor],
    targets: &Tensor,
    param_names: &[String],
    reg_names: &[String],
    config: &ExperimentConfig,
    lr: f64,
    adam: &mut AdamState,
    dropout_rng: &mut Prng,
) -> Result<(f64, f64)> {
    let fwd = model.forward(inputs, Mode::Train, dropout_rng)?;
    let mut graph = fwd.graph;
    let target_node = graph.leaf(targets.clone());
    let reg_nodes: Vec<NodeId> = reg_names
        .iter()
        .map(|n| fwd.param_nodes[n])
        .collect();
    let loss = training_loss(
        &mut graph,
        fwd.output,
        target_node,
        &reg_nodes,
        config.l1,
        config.l2,
    )?;
    let loss_value = graph.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            location: "training loss".to_string(),
        });
    }
    let batch_sse: f64 = graph
        .value(fwd.output)
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();

    let mut grads_map = graph.backward(loss)?;
    let mut grads: Vec<Tensor> = Vec::with_capacity(param_names.len());
    for name in param_names {
        let id = fwd.param_nodes[name];
        grads.push(
            grads_map
                .take(id)
                .expect("every parameter leaf receives a gradient"),
        );
    }
    if let Some(max_norm) = config.clip_norm {
        clip_gradients(&mut grads, max_norm);
    }
    let mut params: Vec<&mut Tensor> = model.params.iter_mut().map(|p| &mut p.value).collect();
    adam_step(&mut params, &grads, adam, lr, config.weight_decay)?;
    Ok((loss_value, batch_sse))
}
