//! Loss terms of the compression objective and the chain from weight
//! gradients into candidate logits.
//!
//! * task: batch mean of `‖y − ε_q(x)‖²`
//! * distillation: sum over blocks of the batch mean of `‖b_fp − b_q‖²`
//! * ratio regularizer: per layer `n · Σ r(1 − r) / #sub-vectors`, over
//!   unfrozen sub-vectors only

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::assignment::LayerAssignment;
use crate::codebook::Codebook;
use crate::nn::{Gradients, ParamId, ParamKind, Session};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub task: f64,
    pub kd: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.0,
            kd: 1.0,
            reg: 1.0,
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub kd: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn total_loss(task: f64, kd: f64, reg: f64, w: LossWeights) -> LossBreakdown {
    let (task, kd, reg) = (w.task * task, w.kd * kd, w.reg * reg);
    LossBreakdown {
        task,
        kd,
        reg,
        total: task + kd + reg,
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn task_loss(output: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(output, target, "task loss")?;
    Ok(output.sq_dist(target) / output.batch() as f64)
}

pub fn task_loss_grad(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(output, target, "task loss")?;
    let scale = 2.0 / output.batch() as f64;
    let data = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| scale * (o - t))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

fn paired<'a>(
    fp: &'a BTreeMap<String, Tensor>,
    q: &'a BTreeMap<String, Tensor>,
) -> Result<Vec<(&'a String, &'a Tensor, &'a Tensor)>> {
    if fp.len() != q.len() {
        return Err(Error::Contract("float and quantized taps differ".into()));
    }
    fp.iter()
        .map(|(name, a)| {
            let b = q.get(name).ok_or_else(|| {
                Error::Contract(format!("quantized net is missing block '{name}'"))
            })?;
            check_same(a, b, name)?;
            Ok((name, a, b))
        })
        .collect()
}

pub fn kd_loss(fp: &BTreeMap<String, Tensor>, q: &BTreeMap<String, Tensor>) -> Result<f64> {
    Ok(paired(fp, q)?
        .into_iter()
        .map(|(_, a, b)| a.sq_dist(b) / a.batch() as f64)
        .sum())
}

/// Gradient of the distillation loss w.r.t. the quantized block features.
pub fn kd_loss_grad(
    fp: &BTreeMap<String, Tensor>,
    q: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    paired(fp, q)?
        .into_iter()
        .map(|(name, a, b)| {
            let scale = 2.0 / a.batch() as f64;
            let data = b
                .data()
                .iter()
                .zip(a.data())
                .map(|(bq, af)| scale * (bq - af))
                .collect();
            Ok((name.clone(), Tensor::new(b.shape().to_vec(), data)?))
        })
        .collect()
}

pub fn reg_loss_layer(la: &LayerAssignment) -> f64 {
    let mut sum = 0.0;
    for s in 0..la.count() {
        if la.frozen(s).is_some() {
            continue;
        }
        sum += la.ratios_of(s).iter().map(|r| r * (1.0 - r)).sum::<f64>();
    }
    la.n as f64 * sum / la.count() as f64
}

pub fn reg_loss(assignments: &[LayerAssignment]) -> f64 {
    assignments.iter().map(reg_loss_layer).sum()
}

/// `∂L/∂z` for one layer from `∂L/∂Ŵ` (canonical `rows × cols` layout).
///
/// Uses the linearity of the soft reconstruction, `∂Ŵ_s/∂r_m = c(a_m)`,
/// adds the regularizer's `n(1 − 2r)/S`, and applies the softmax Jacobian.
/// Frozen sub-vectors get exactly zero.
pub fn logit_grads_layer(
    la: &LayerAssignment,
    weight_grad: &[f64],
    universal: &Codebook,
    reg_weight: f64,
) -> Vec<f64> {
    let cb = la.codebook(universal);
    let (n, d, per_row) = (la.n, la.d, la.per_row());
    let reg_scale = reg_weight * n as f64 / la.count() as f64;
    let mut out = vec![0.0; la.count() * n];
    for s in 0..la.count() {
        if la.frozen(s).is_some() {
            continue;
        }
        let (r_i, j) = (s / per_row, s % per_row);
        let valid = la.valid_len(s);
        let g = &weight_grad[r_i * la.cols + j * d..r_i * la.cols + j * d + valid];
        let ratios = la.ratios_of(s);
        let dr: Vec<f64> = la
            .candidates(s)
            .iter()
            .zip(&ratios)
            .map(|(&a, &r)| {
                let c = cb.codeword(a as usize);
                let lin: f64 = g.iter().zip(c).map(|(x, y)| x * y).sum();
                lin + reg_scale * (1.0 - 2.0 * r)
            })
            .collect();
        let mean: f64 = ratios.iter().zip(&dr).map(|(r, g)| r * g).sum();
        for m in 0..n {
            out[s * n + m] = ratios[m] * (dr[m] - mean);
        }
    }
    out
}

/// Gradients produced by one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    /// `∂L/∂z` per assignment, aligned with the input slice.
    pub logits: Vec<Vec<f64>>,
    /// Network gradients; compressed weights are included but unused.
    pub params: Gradients,
}

/// Runs the reverse pass of the quantized network (which must carry the
/// current soft weights and a recorded forward) and chains the result into
/// candidate logits.
pub fn backward_to_logits(
    session: &Session<'_>,
    out_grad: &Tensor,
    tap_grads: &BTreeMap<String, Tensor>,
    assignments: &[LayerAssignment],
    universal: &Codebook,
    reg_weight: f64,
) -> Result<ObjectiveGrads> {
    let params = session.backward(out_grad, tap_grads)?;
    let logits = assignments
        .iter()
        .map(|la| {
            let id = ParamId {
                layer: la.layer,
                kind: ParamKind::Weight,
            };
            let g = params.get(id).ok_or_else(|| {
                Error::State(format!("no weight gradient for layer {}", la.layer))
            })?;
            Ok(logit_grads_layer(la, g.data(), universal, reg_weight))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectiveGrads { logits, params })
}
