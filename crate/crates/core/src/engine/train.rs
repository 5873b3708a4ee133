use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, case_rng, case_stream, sample_patch};
use crate::engine::model::{LossWeights, Network};
use crate::engine::optim::Adam;
use crate::engine::{mix, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{flatten, parameter_count, zeros_like};
use crate::objective::LossBreakdown;
use crate::tensor::Tensor;
use crate::volume::{ModalityId, MultiModalCase};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub intra: BTreeMap<ModalityId, f64>,
    pub joint: f64,
    pub mimicry: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
}

pub struct TrainState<'a, M> {
    pub model: &'a M,
    pub optimizer: &'a Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub trait TrainObserver<M> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState<'_, M>) -> Result<Flow> {
        Ok(Flow::Continue)
    }

    /// Called with the last finite state before a divergence error is returned.
    fn on_divergence(&mut self, _state: &TrainState<'_, M>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl<M> TrainObserver<M> for NoopObserver {}

/// Appends one JSON object per step to a file.
pub struct JsonlLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub optimizer: Adam,
    pub epochs: usize,
    pub steps: u64,
    /// Mean total loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

fn sample_inputs<M: Network<f32>>(
    model: &M,
    case: &MultiModalCase,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    let mut rng = case_rng(mix(cfg.seed, epoch as u64), case_stream(case.case_id()));
    let patch = sample_patch(case, &cfg.patch, &mut rng)?;
    let patch = augment(&patch, &mut rng, &cfg.augment)?;
    let inputs = model
        .modalities()
        .iter()
        .map(|m| Ok(patch.volume(m)?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, patch.mask().as_slice().to_vec()))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut out = parts[0].clone();
    for (k, v) in out.intra.iter_mut() {
        *v = parts.iter().map(|p| p.intra[k]).sum::<f64>() / n;
    }
    out.joint = parts.iter().map(|p| p.joint).sum::<f64>() / n;
    out.mimicry = parts.iter().map(|p| p.mimicry).sum::<f64>() / n;
    out.total = parts.iter().map(|p| p.total).sum::<f64>() / n;
    out
}

/// Trains every parameter of `model` jointly with Adam.
///
/// Each epoch visits the cases in a seeded random order; every visit draws one
/// patch (and augmentation) from a generator keyed by `(seed, epoch, case_id)`,
/// so the run is a pure function of the configuration and the data.
pub fn train<M: Network<f32>>(
    model: &mut M,
    cases: &[MultiModalCase],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<M>,
) -> Result<TrainOutcome> {
    if cases.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    for case in cases {
        for m in model.modalities() {
            case.volume(m)?;
        }
    }
    let mut optimizer = Adam::new(parameter_count(model));
    let steps_per_epoch = cases.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let weights = LossWeights {
        lambda: cfg.lambda,
        mimicry: cfg.mimicry_weight,
    };
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut case_rng(mix(cfg.seed, epoch as u64), u64::MAX));
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let run = |&i: &usize| -> Result<(LossBreakdown, M)> {
                let (inputs, gt) = sample_inputs(model, &cases[i], cfg, epoch)?;
                let mut grads = zeros_like(model);
                let loss = model.loss_and_grad(&inputs, &gt, weights, &mut grads)?;
                Ok((loss, grads))
            };
            let results: Vec<(LossBreakdown, M)> = if cfg.deterministic {
                batch.iter().map(run).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(run).collect::<Result<_>>()?
            };
            let (losses, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            let mut grads = grads.into_iter();
            let mut total = grads.next().expect("non-empty batch");
            for g in grads {
                let flat = flatten(&g);
                let mut i = 0;
                total.visit_mut("", &mut |_, p| {
                    for w in p.iter_mut() {
                        *w += flat[i];
                        i += 1;
                    }
                });
            }
            let scale = 1.0 / batch.len() as f32;
            let mut finite = true;
            total.visit_mut("", &mut |_, p| {
                for w in p.iter_mut() {
                    *w *= scale;
                    finite &= w.is_finite();
                }
            });
            let loss = mean_breakdown(&losses);
            if !loss.is_finite() || !finite {
                let state = TrainState {
                    model: &*model,
                    optimizer: &optimizer,
                    epoch,
                    step,
                };
                observer.on_divergence(&state)?;
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss or gradient (total loss {})", loss.total),
                });
            }
            let lr = cfg.lr_at(step, total_steps);
            optimizer.update(model, &total, lr);
            step += 1;
            epoch_total += loss.total;
            observer.on_step(&StepRecord {
                step,
                epoch,
                intra: loss.intra,
                joint: loss.joint,
                mimicry: loss.mimicry,
                total: loss.total,
                lambda: loss.lambda,
                lr,
            })?;
        }
        epoch_losses.push(epoch_total / steps_per_epoch as f64);
        let state = TrainState {
            model: &*model,
            optimizer: &optimizer,
            epoch: epoch + 1,
            step,
        };
        if observer.on_epoch(&state)? == Flow::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs: epoch_losses.len(),
        optimizer,
        steps: step,
        epoch_losses,
    })
}
