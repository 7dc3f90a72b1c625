//! The compression driver.
//!
//! Each step reconstructs soft weights, evaluates task + distillation +
//! ratio-regularizer losses, pushes gradients into the candidate logits
//! (Adamax) and the remaining float parameters, then freezes every
//! sub-vector whose largest ratio exceeds `alpha`. Frozen sub-vectors stay
//! one-hot for the rest of the run. The loop ends once everything is frozen
//! or the epoch budget runs out.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    argmax, weight_matrix, CandidateMethod, CodebookSource, LayerAssignment, LogitInit,
    SubVectorGrid, DEFAULT_CANDIDATES,
};
use crate::codebook::{kmeans_codebook, Codebook};
use crate::data::{Split, Task};
use crate::nn::{Compress, Mode, ParamId, ParamKind, Session, TinyNet};
use crate::objective::{
    backward_to_logits, kd_loss, kd_loss_grad, reg_loss, task_loss, task_loss_grad, total_loss,
    LossBreakdown, LossWeights,
};
use crate::optim::{Adamax, Hyper, Schedule};
use crate::storage::CompressedModel;
use crate::train::score_output;
use crate::{rng, Error, Result, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.9999;

/// When sub-vectors become hard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Construction {
    /// Freeze each sub-vector as soon as its largest ratio exceeds alpha.
    Progressive,
    /// Train soft for the whole budget, then harden everything at argmax.
    HardenAtEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PncConfig {
    pub alpha: f64,
    pub max_epochs: usize,
    pub harden_leftovers: bool,
    /// Probe hard accuracy every this many epochs; 0 disables probes.
    pub eval_cadence: usize,
    pub construction: Construction,
    pub candidates: usize,
    pub method: CandidateMethod,
    pub init: LogitInit,
    pub batch: usize,
    pub lr_ratios: f64,
    pub lr_params: f64,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    /// Codebook size for per-layer (head) quantization, capped at the
    /// layer's sub-vector count.
    pub head_k: usize,
    pub head_iters: usize,
    pub train_params: bool,
    pub seed: u64,
}

impl Default for PncConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            max_epochs: 100,
            harden_leftovers: true,
            eval_cadence: 0,
            construction: Construction::Progressive,
            candidates: DEFAULT_CANDIDATES,
            method: CandidateMethod::Euclidean,
            init: LogitInit::InverseDistance,
            batch: 64,
            lr_ratios: 0.3,
            lr_params: 1e-3,
            schedule: ScheduleKind::Constant,
            weights: LossWeights::default(),
            head_k: 256,
            head_iters: 25,
            train_params: true,
            seed: 0,
        }
    }
}

impl PncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!(
                "alpha must lie in (0.5, 1), got {}",
                self.alpha
            )));
        }
        if self.candidates == 0 || self.batch == 0 {
            return Err(Error::Parameter(
                "candidates and batch must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub frozen: usize,
    pub newly_frozen: usize,
    pub loss: LossBreakdown,
    pub discrepancy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub epoch: usize,
    pub frozen: usize,
    pub hard_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PncTrace {
    pub total_sub_vectors: usize,
    pub steps: Vec<StepRecord>,
    pub probes: Vec<Probe>,
    /// Sub-vectors still unfrozen when the loop ended.
    pub leftovers: usize,
    /// Frequency of each candidate rank among the final choices.
    pub histogram: Vec<f64>,
    /// MSE of hard weights against float weights over compressed layers.
    pub weight_mse: f64,
    pub final_score: Option<f64>,
}

/// A network whose compressible weights are driven by assignments.
#[derive(Clone, Debug)]
pub struct QuantizedNet {
    pub net: TinyNet,
    pub assignments: Vec<LayerAssignment>,
}

impl QuantizedNet {
    /// Candidate search for every compressible layer. Per-layer layers get a
    /// k-means codebook over their own sub-vectors.
    pub fn prepare(net_fp: &TinyNet, universal: &Codebook, cfg: &PncConfig) -> Result<Self> {
        let d = universal.d();
        let mut assignments = Vec::new();
        for layer in net_fp.compressible_layers() {
            let (w, rows, cols) = weight_matrix(net_fp, layer)?;
            let seed = rng::derive(cfg.seed, layer as u64);
            let (source, n) = match net_fp.layers[layer].compress() {
                Some(Compress::PerLayer) => {
                    let grid = SubVectorGrid::from_matrix(w, rows, cols, d)?;
                    let vectors: Vec<f64> = (0..grid.count())
                        .flat_map(|s| grid.sub_vector(s).to_vec())
                        .collect();
                    let k = cfg.head_k.min(grid.count()).max(1);
                    let cb = kmeans_codebook(&vectors, d, k, cfg.head_iters, seed)?;
                    (CodebookSource::PerLayer(cb), cfg.candidates.min(k))
                }
                _ => (CodebookSource::Universal, cfg.candidates),
            };
            assignments.push(LayerAssignment::build(
                layer, w, rows, cols, source, universal, n, cfg.method, cfg.init, seed,
            )?);
        }
        Ok(Self {
            net: net_fp.clone(),
            assignments,
        })
    }

    pub fn total_sub_vectors(&self) -> usize {
        self.assignments.iter().map(LayerAssignment::count).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.assignments
            .iter()
            .map(LayerAssignment::frozen_count)
            .sum()
    }

    fn set_weights(&mut self, layer: usize, values: Vec<f64>) {
        let w = self
            .net
            .param_mut(ParamId {
                layer,
                kind: ParamKind::Weight,
            })
            .unwrap();
        w.data_mut().copy_from_slice(&values);
    }

    pub fn inject_soft(&mut self, universal: &Codebook) {
        for i in 0..self.assignments.len() {
            let v = self.assignments[i].reconstruct_soft(universal);
            self.set_weights(self.assignments[i].layer, v);
        }
    }

    /// The network with hard weights and `f32`-rounded residual parameters;
    /// identical to decoding the serialized model.
    pub fn hard_net(&self, universal: &Codebook) -> TinyNet {
        let mut net = self.net.clone();
        net.round_to_f32();
        for la in &self.assignments {
            let w = net
                .param_mut(ParamId {
                    layer: la.layer,
                    kind: ParamKind::Weight,
                })
                .unwrap();
            w.data_mut()
                .copy_from_slice(&la.reconstruct_hard(universal));
        }
        net
    }

    /// Freezes every unfrozen sub-vector at its argmax slot.
    pub fn harden_all(&mut self) -> usize {
        let mut count = 0;
        for la in &mut self.assignments {
            for s in 0..la.count() {
                if la.frozen(s).is_none() {
                    let m = la.best_slot(s);
                    la.freeze(s, m);
                    count += 1;
                }
            }
        }
        count
    }
}

/// Freezes every unfrozen sub-vector whose largest ratio exceeds `alpha`.
/// Returns how many were newly frozen.
pub fn freeze_pass(assignments: &mut [LayerAssignment], alpha: f64) -> usize {
    let mut newly = 0;
    for la in assignments {
        for s in 0..la.count() {
            if la.frozen(s).is_some() {
                continue;
            }
            let r = la.ratios_of(s);
            let m = argmax(&r);
            if r[m] > alpha {
                la.freeze(s, m);
                newly += 1;
            }
        }
    }
    newly
}

/// Squared distance between soft and hard reconstructions, summed over layers.
pub fn discrepancy(assignments: &[LayerAssignment], universal: &Codebook) -> f64 {
    assignments
        .iter()
        .map(|la| {
            let soft = la.reconstruct_soft(universal);
            let hard = la.reconstruct_hard(universal);
            soft.iter()
                .zip(&hard)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Frequency of the chosen candidate rank (0 = nearest) over all sub-vectors.
pub fn assignment_histogram(assignments: &[LayerAssignment]) -> Vec<f64> {
    let width = assignments.iter().map(|la| la.n).max().unwrap_or(0);
    let mut counts = vec![0usize; width];
    let mut total = 0usize;
    for la in assignments {
        for s in 0..la.count() {
            counts[la.best_slot(s)] += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| c as f64 / total.max(1) as f64)
        .collect()
}

/// MSE of hard weights against the float weights over compressed layers.
pub fn hard_weight_mse(q: &QuantizedNet, net_fp: &TinyNet, universal: &Codebook) -> Result<f64> {
    let (mut se, mut count) = (0.0, 0usize);
    for la in &q.assignments {
        let (w, _, _) = weight_matrix(net_fp, la.layer)?;
        let h = la.reconstruct_hard(universal);
        se += w
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += w.len();
    }
    Ok(se / count.max(1) as f64)
}

/// Everything a compression run produces.
#[derive(Clone, Debug)]
pub struct CompressionOutcome {
    pub model: CompressedModel,
    pub hard_net: TinyNet,
    pub quantized: QuantizedNet,
    pub trace: PncTrace,
}

/// Evaluation split used for accuracy probes.
#[derive(Clone, Copy, Debug)]
pub struct ProbeSet<'a> {
    pub split: &'a Split,
    pub task: Task,
}

/// Compresses `net_fp` against a frozen universal codebook using the
/// calibration split.
pub fn compress(
    net_fp: &TinyNet,
    universal: &Codebook,
    calib: &Split,
    cfg: &PncConfig,
    probe: Option<ProbeSet<'_>>,
) -> Result<CompressionOutcome> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Parameter("calibration split is empty".into()));
    }
    let fingerprint = universal.fingerprint();
    let mut q = QuantizedNet::prepare(net_fp, universal, cfg)?;
    let mut trace = run(net_fp, universal, calib, cfg, probe, &mut q)?;
    if universal.fingerprint() != fingerprint || !universal.verify() {
        return Err(Error::Contract(
            "universal codebook changed during compression".into(),
        ));
    }
    trace.leftovers = q.total_sub_vectors() - q.frozen_count();
    if trace.leftovers > 0 {
        if cfg.harden_leftovers || cfg.construction == Construction::HardenAtEnd {
            q.harden_all();
        } else {
            return Err(Error::Unconverged {
                leftovers: trace.leftovers,
            });
        }
    }
    trace.histogram = assignment_histogram(&q.assignments);
    trace.weight_mse = hard_weight_mse(&q, net_fp, universal)?;
    let hard_net = q.hard_net(universal);
    if let Some(p) = probe {
        let out = hard_net.forward(&p.split.inputs, Mode::Eval)?;
        trace.final_score = Some(score_output(out.output(), &p.split.targets, p.task));
    }
    let model = CompressedModel::from_assignments(&q.net, &q.assignments, universal)?;
    Ok(CompressionOutcome {
        model,
        hard_net,
        quantized: q,
        trace,
    })
}

fn aux_params(net: &TinyNet, assignments: &[LayerAssignment]) -> Vec<ParamId> {
    net.param_ids()
        .into_iter()
        .filter(|id| id.kind.trainable())
        .filter(|id| {
            !(id.kind == ParamKind::Weight && assignments.iter().any(|la| la.layer == id.layer))
        })
        .collect()
}

fn run(
    net_fp: &TinyNet,
    universal: &Codebook,
    calib: &Split,
    cfg: &PncConfig,
    probe: Option<ProbeSet<'_>>,
    q: &mut QuantizedNet,
) -> Result<PncTrace> {
    let steps_per_epoch = calib.len().div_ceil(cfg.batch);
    let schedule = match cfg.schedule {
        ScheduleKind::Constant => Schedule::Constant,
        ScheduleKind::Cosine => Schedule::Cosine {
            total: steps_per_epoch * cfg.max_epochs,
        },
    };
    let mut logit_opts: Vec<Adamax> = q
        .assignments
        .iter()
        .map(|la| {
            Adamax::new(la.logits().len(), Hyper::with_lr(cfg.lr_ratios)).with_schedule(schedule)
        })
        .collect();
    let aux = if cfg.train_params {
        aux_params(&q.net, &q.assignments)
    } else {
        Vec::new()
    };
    let mut aux_opts: BTreeMap<ParamId, Adamax> = aux
        .iter()
        .map(|&id| {
            (
                id,
                Adamax::new(
                    q.net.param(id).unwrap().len(),
                    Hyper::with_lr(cfg.lr_params),
                ),
            )
        })
        .collect();

    let names = net_fp.block_names();
    let taps: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut r = rng::seeded(rng::derive(cfg.seed, 0x9c));
    let mut order: Vec<usize> = (0..calib.len()).collect();
    let mut trace = PncTrace {
        total_sub_vectors: q.total_sub_vectors(),
        ..PncTrace::default()
    };
    let progressive = cfg.construction == Construction::Progressive;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let batch = calib.subset(chunk);
            let (_, fp_feats) = net_fp.forward_taps(&batch.inputs, &taps, Mode::Eval)?;
            q.inject_soft(universal);

            let mut session = Session::new(&q.net);
            let fwd = session.forward(&batch.inputs, Mode::Eval)?;
            let q_feats = q.net.taps(fwd, &taps)?;
            let output = fwd.output();
            let task = task_loss(output, &batch.targets)?;
            let kd = kd_loss(&fp_feats, &q_feats)?;
            let reg = reg_loss(&q.assignments);
            let loss = total_loss(task, kd, reg, cfg.weights);
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { step });
            }
            let out_grad = task_loss_grad(output, &batch.targets)?.map(|g| g * cfg.weights.task);
            let tap_grads: BTreeMap<_, Tensor> = if cfg.weights.kd != 0.0 {
                kd_loss_grad(&fp_feats, &q_feats)?
                    .into_iter()
                    .map(|(k, g)| (k, g.map(|v| v * cfg.weights.kd)))
                    .collect()
            } else {
                BTreeMap::new()
            };
            let grads = backward_to_logits(
                &session,
                &out_grad,
                &tap_grads,
                &q.assignments,
                universal,
                cfg.weights.reg,
            )?;
            drop(session);

            for ((la, opt), g) in q
                .assignments
                .iter_mut()
                .zip(&mut logit_opts)
                .zip(&grads.logits)
            {
                let mask = la.active_mask();
                opt.step(la.logits_mut(), g, Some(&mask));
            }
            for &id in &aux {
                let g = grads
                    .params
                    .get(id)
                    .expect("gradient for every trainable parameter");
                let p = q.net.param_mut(id).unwrap();
                aux_opts
                    .get_mut(&id)
                    .unwrap()
                    .step(p.data_mut(), g.data(), None);
            }
            let newly = if progressive {
                freeze_pass(&mut q.assignments, cfg.alpha)
            } else {
                0
            };
            let frozen = q.frozen_count();
            trace.steps.push(StepRecord {
                epoch,
                step,
                frozen,
                newly_frozen: newly,
                loss,
                discrepancy: discrepancy(&q.assignments, universal),
            });
            step += 1;
            if progressive && frozen == trace.total_sub_vectors {
                if let Some(p) = probe {
                    trace.probes.push(probe_hard(q, universal, p, epoch)?);
                }
                break 'epochs;
            }
        }
        if let Some(p) = probe {
            if cfg.eval_cadence > 0 && (epoch + 1) % cfg.eval_cadence == 0 {
                trace.probes.push(probe_hard(q, universal, p, epoch)?);
            }
        }
    }
    Ok(trace)
}

fn probe_hard(
    q: &QuantizedNet,
    universal: &Codebook,
    p: ProbeSet<'_>,
    epoch: usize,
) -> Result<Probe> {
    let net = q.hard_net(universal);
    let out = net.forward(&p.split.inputs, Mode::Eval)?;
    Ok(Probe {
        epoch,
        frozen: q.frozen_count(),
        hard_score: score_output(out.output(), &p.split.targets, p.task),
    })
}
