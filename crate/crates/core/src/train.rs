//! Float training of the zoo networks and scoring helpers.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, Task};
use crate::nn::{Mode, ParamId, ParamKind, TinyNet, ZooNet};
use crate::objective::{task_loss, task_loss_grad};
use crate::optim::{Adam, Hyper};
use crate::{rng, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decoupled weight decay applied to weight tensors each step.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 32,
            lr: 5e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default schedule for a zoo network. The spiral MLP trains longer
    /// with weight decay so its weights stay on the scale of the others.
    pub fn for_net(net: ZooNet, seed: u64) -> Self {
        match net {
            ZooNet::Mlp2x32 => Self {
                epochs: 100,
                weight_decay: 0.1,
                seed,
                ..Self::default()
            },
            _ => Self {
                seed,
                ..Self::default()
            },
        }
    }
}

/// Accuracy for classifiers, R² for regression.
pub fn score(net: &TinyNet, split: &Split, task: Task) -> Result<f64> {
    let out = net.forward(&split.inputs, Mode::Eval)?;
    Ok(score_output(out.output(), &split.targets, task))
}

pub fn score_output(out: &Tensor, targets: &Tensor, task: Task) -> f64 {
    match task {
        Task::Classification { .. } => {
            let n = out.batch();
            let hits = (0..n)
                .filter(|&i| {
                    crate::assignment::argmax(out.row(i))
                        == crate::assignment::argmax(targets.row(i))
                })
                .count();
            hits as f64 / n as f64
        }
        Task::Regression => {
            let mean = targets.sum() / targets.len() as f64;
            let sst: f64 = targets.data().iter().map(|t| (t - mean) * (t - mean)).sum();
            1.0 - out.sq_dist(targets) / sst
        }
    }
}

/// Minibatch Adam on the task loss; batch norm runs in training mode and
/// updates its running statistics. Zero epochs returns the net unchanged.
pub fn train_float(net: &TinyNet, ds: &Dataset, cfg: &TrainConfig) -> Result<(TinyNet, f64)> {
    let mut net = net.clone();
    let ids: Vec<ParamId> = net
        .param_ids()
        .into_iter()
        .filter(|id| id.kind.trainable())
        .collect();
    let mut opts: BTreeMap<ParamId, Adam> = ids
        .iter()
        .map(|&id| {
            (
                id,
                Adam::new(net.param(id).unwrap().len(), Hyper::with_lr(cfg.lr)),
            )
        })
        .collect();
    let mut r = rng::seeded(rng::derive(cfg.seed, 0x7a1));
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let no_taps = BTreeMap::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch = ds.train.subset(chunk);
            let trace = net.forward(&batch.inputs, Mode::Train)?;
            let loss = task_loss(trace.output(), &batch.targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let g = task_loss_grad(trace.output(), &batch.targets)?;
            let grads = net.backward(&trace, &g, &no_taps)?;
            net.update_running_stats(&trace, 0.1);
            for &id in &ids {
                let gid = grads
                    .get(id)
                    .expect("gradient for every trainable parameter");
                let p = net.param_mut(id).unwrap();
                if cfg.weight_decay > 0.0 && id.kind == ParamKind::Weight {
                    let shrink = 1.0 - cfg.lr * cfg.weight_decay;
                    p.data_mut().iter_mut().for_each(|v| *v *= shrink);
                }
                opts.get_mut(&id).unwrap().step(p.data_mut(), gid.data());
            }
        }
        if !net
            .param_ids()
            .iter()
            .all(|&id| net.param(id).unwrap().is_finite())
        {
            return Err(Error::Diverged { epoch });
        }
    }
    let acc = score(&net, &ds.test, ds.task)?;
    Ok((net, acc))
}
