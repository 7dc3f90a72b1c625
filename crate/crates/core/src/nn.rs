//! Fixed-layer networks with a hand-written reverse pass.
//!
//! Activations are batch-major: `[batch, features]` for dense stacks and
//! `[batch, channels, height, width]` for convolutions. A forward pass
//! returns a [`Trace`] holding every intermediate activation; the reverse
//! pass consumes it and may receive extra gradients at block outputs
//! (distillation taps).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_acc, matmul_nt, matmul_tn_acc};
use crate::{rng, Error, Result, Tensor};

/// How a weight-bearing layer is treated by compression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compress {
    /// Stored raw (input layers).
    Keep,
    /// Quantized against the shared universal codebook.
    Universal,
    /// Quantized against its own k-means codebook (output heads).
    PerLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub compress: Compress,
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    /// `[out_channels, in_channels, 3, 3]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub height: usize,
    pub width: usize,
    pub compress: Compress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv3x3(Conv3x3),
    BatchNorm(BatchNorm),
    Relu,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv3x3(_) => "conv2d-3x3",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax-output",
        }
    }

    pub fn compress(&self) -> Option<Compress> {
        match self {
            Layer::Dense(l) => Some(l.compress),
            Layer::Conv3x3(l) => Some(l.compress),
            _ => None,
        }
    }

    /// Weight viewed as a 2-D matrix `(rows, cols)`; conv kernels flatten
    /// input channels and the 3×3 window into columns.
    pub fn weight_matrix_shape(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense(l) => Some((l.weight.shape()[0], l.weight.shape()[1])),
            Layer::Conv3x3(l) => Some((l.weight.shape()[0], l.weight.shape()[1] * 9)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::Gamma,
            "beta" => ParamKind::Beta,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn name(&self) -> String {
        format!("{}.{}", self.layer, self.kind.name())
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (layer, kind) = s.split_once('.')?;
        Some(Self {
            layer: layer.parse().ok()?,
            kind: ParamKind::from_name(kind)?,
        })
    }
}

/// Named contiguous layer range; its output is a distillation tap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug)]
struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
}

/// Recorded intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    mode: Mode,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn activation(&self, i: usize) -> &Tensor {
        &self.acts[i]
    }
}

/// Gradients of every parameter plus the network input.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<ParamId, Tensor>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    pub name: String,
    /// Per-sample input shape (batch axis excluded).
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub blocks: Vec<Block>,
}

impl TinyNet {
    /// Checks that blocks are contiguous, ordered and cover every layer.
    pub fn validate(&self) -> Result<()> {
        let mut at = 0;
        for b in &self.blocks {
            if b.start != at || b.end <= b.start {
                return Err(Error::Contract(format!(
                    "block '{}' breaks the layer partition",
                    b.name
                )));
            }
            at = b.end;
        }
        if at != self.layers.len() {
            return Err(Error::Contract("blocks do not cover every layer".into()));
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kinds: &[ParamKind] = match layer {
                Layer::Dense(l) if l.bias.is_some() => &[ParamKind::Weight, ParamKind::Bias],
                Layer::Conv3x3(l) if l.bias.is_some() => &[ParamKind::Weight, ParamKind::Bias],
                Layer::Dense(_) | Layer::Conv3x3(_) => &[ParamKind::Weight],
                Layer::BatchNorm(_) => &[
                    ParamKind::Gamma,
                    ParamKind::Beta,
                    ParamKind::RunningMean,
                    ParamKind::RunningVar,
                ],
                _ => &[],
            };
            out.extend(kinds.iter().map(|&kind| ParamId { layer: i, kind }));
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match (self.layers.get(id.layer)?, id.kind) {
            (Layer::Dense(l), ParamKind::Weight) => Some(&l.weight),
            (Layer::Dense(l), ParamKind::Bias) => l.bias.as_ref(),
            (Layer::Conv3x3(l), ParamKind::Weight) => Some(&l.weight),
            (Layer::Conv3x3(l), ParamKind::Bias) => l.bias.as_ref(),
            (Layer::BatchNorm(l), ParamKind::Gamma) => Some(&l.gamma),
            (Layer::BatchNorm(l), ParamKind::Beta) => Some(&l.beta),
            (Layer::BatchNorm(l), ParamKind::RunningMean) => Some(&l.running_mean),
            (Layer::BatchNorm(l), ParamKind::RunningVar) => Some(&l.running_var),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match (self.layers.get_mut(id.layer)?, id.kind) {
            (Layer::Dense(l), ParamKind::Weight) => Some(&mut l.weight),
            (Layer::Dense(l), ParamKind::Bias) => l.bias.as_mut(),
            (Layer::Conv3x3(l), ParamKind::Weight) => Some(&mut l.weight),
            (Layer::Conv3x3(l), ParamKind::Bias) => l.bias.as_mut(),
            (Layer::BatchNorm(l), ParamKind::Gamma) => Some(&mut l.gamma),
            (Layer::BatchNorm(l), ParamKind::Beta) => Some(&mut l.beta),
            (Layer::BatchNorm(l), ParamKind::RunningMean) => Some(&mut l.running_mean),
            (Layer::BatchNorm(l), ParamKind::RunningVar) => Some(&mut l.running_var),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_ids()
            .iter()
            .filter_map(|&id| self.param(id))
            .map(Tensor::len)
            .sum()
    }

    /// Layer indices whose weights get quantized, in order.
    pub fn compressible_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.compress(), Some(Compress::Universal | Compress::PerLayer)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    /// Rounds every parameter to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for id in self.param_ids() {
            if let Some(t) = self.param_mut(id) {
                t.round_to_f32();
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "net '{}' expects [batch, {:?}], got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Trace> {
        self.check_input(x)?;
        self.forward_layers(x.clone(), 0..self.layers.len(), mode)
    }

    /// Runs only `range`, starting from an activation of that range's input.
    pub fn forward_range(&self, x: &Tensor, range: Range<usize>, mode: Mode) -> Result<Tensor> {
        Ok(self
            .forward_layers(x.clone(), range, mode)?
            .acts
            .pop()
            .unwrap())
    }

    fn forward_layers(&self, x: Tensor, range: Range<usize>, mode: Mode) -> Result<Trace> {
        let mut acts = Vec::with_capacity(range.len() + 1);
        let mut bn = Vec::with_capacity(range.len());
        acts.push(x);
        for i in range {
            let input = acts.last().unwrap();
            let (out, cache) =
                forward_layer(&self.layers[i], input, mode).map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
                    other => other,
                })?;
            acts.push(out);
            bn.push(cache);
        }
        Ok(Trace { mode, acts, bn })
    }

    /// Output plus the requested block features.
    pub fn forward_taps(
        &self,
        x: &Tensor,
        taps: &[&str],
        mode: Mode,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let trace = self.forward(x, mode)?;
        let feats = self.taps(&trace, taps)?;
        Ok((trace.output().clone(), feats))
    }

    pub fn taps(&self, trace: &Trace, taps: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut feats = BTreeMap::new();
        for &name in taps {
            let b = self
                .block(name)
                .ok_or_else(|| Error::Contract(format!("unknown block '{name}'")))?;
            feats.insert(name.to_string(), trace.acts[b.end].clone());
        }
        Ok(feats)
    }

    /// Reverse pass. `tap_grads` are added at the output of the named blocks.
    pub fn backward(
        &self,
        trace: &Trace,
        out_grad: &Tensor,
        tap_grads: &BTreeMap<String, Tensor>,
    ) -> Result<Gradients> {
        if trace.acts.len() != self.layers.len() + 1 {
            return Err(Error::State(
                "trace was not produced by this network".into(),
            ));
        }
        if out_grad.shape() != trace.output().shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                out_grad.shape(),
                trace.output().shape()
            )));
        }
        for (name, g) in tap_grads {
            let b = self
                .block(name)
                .ok_or_else(|| Error::Contract(format!("unknown block '{name}'")))?;
            if g.shape() != trace.acts[b.end].shape() {
                return Err(Error::Shape(format!("tap gradient for '{name}'")));
            }
        }
        let mut grads = Gradients::default();
        let mut g = out_grad.clone();
        for i in (0..self.layers.len()).rev() {
            for b in self.blocks.iter().filter(|b| b.end == i + 1) {
                if let Some(tg) = tap_grads.get(&b.name) {
                    g.add_assign(tg);
                }
            }
            g = backward_layer(i, &self.layers[i], trace, g, &mut grads)?;
        }
        grads.input = Some(g);
        Ok(grads)
    }

    /// Moves running batch-norm statistics toward the batch statistics
    /// recorded in a training-mode trace.
    pub fn update_running_stats(&mut self, trace: &Trace, momentum: f64) {
        if trace.mode != Mode::Train {
            return;
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let (Layer::BatchNorm(bn), Some(cache)) = (layer, &trace.bn[i]) {
                let n = trace.acts[i].len() / bn.gamma.len();
                let unbias = if n > 1 {
                    n as f64 / (n as f64 - 1.0)
                } else {
                    1.0
                };
                for c in 0..bn.gamma.len() {
                    let rm = &mut bn.running_mean.data_mut()[c];
                    *rm = (1.0 - momentum) * *rm + momentum * cache.mean[c];
                    let rv = &mut bn.running_var.data_mut()[c];
                    *rv = (1.0 - momentum) * *rv + momentum * cache.var[c] * unbias;
                }
            }
        }
    }
}

/// A forward/backward pair; backward is only legal after forward.
pub struct Session<'a> {
    net: &'a TinyNet,
    trace: Option<Trace>,
}

impl<'a> Session<'a> {
    pub fn new(net: &'a TinyNet) -> Self {
        Self { net, trace: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<&Trace> {
        self.trace = Some(self.net.forward(x, mode)?);
        Ok(self.trace.as_ref().unwrap())
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn backward(
        &self,
        out_grad: &Tensor,
        tap_grads: &BTreeMap<String, Tensor>,
    ) -> Result<Gradients> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.net.backward(trace, out_grad, tap_grads)
    }
}

fn channels_and_spatial(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::Shape(format!(
            "expected {channels} channels, got {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

fn forward_layer(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BnCache>)> {
    match layer {
        Layer::Dense(l) => {
            let (out_f, in_f) = (l.weight.shape()[0], l.weight.shape()[1]);
            if x.shape().len() != 2 || x.shape()[1] != in_f {
                return Err(Error::Shape(format!(
                    "dense expects [_, {in_f}], got {:?}",
                    x.shape()
                )));
            }
            let b = x.shape()[0];
            let mut out = vec![0.0; b * out_f];
            matmul_nt(x.data(), l.weight.data(), b, in_f, out_f, &mut out);
            if let Some(bias) = &l.bias {
                for row in out.chunks_mut(out_f) {
                    for (o, bv) in row.iter_mut().zip(bias.data()) {
                        *o += bv;
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, out_f], out), None))
        }
        Layer::Conv3x3(l) => {
            let (co, ci) = (l.weight.shape()[0], l.weight.shape()[1]);
            let (h, w) = (l.height, l.width);
            if x.shape() != [x.batch(), ci, h, w] {
                return Err(Error::Shape(format!(
                    "conv expects [_, {ci}, {h}, {w}], got {:?}",
                    x.shape()
                )));
            }
            let b = x.batch();
            let hw = h * w;
            let mut out = vec![0.0; b * co * hw];
            let mut cols = vec![0.0; ci * 9 * hw];
            for n in 0..b {
                im2col(x.row(n), ci, h, w, &mut cols);
                let o = &mut out[n * co * hw..(n + 1) * co * hw];
                matmul_acc(l.weight.data(), &cols, co, ci * 9, hw, o);
                if let Some(bias) = &l.bias {
                    for c in 0..co {
                        for v in &mut o[c * hw..(c + 1) * hw] {
                            *v += bias.data()[c];
                        }
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, co, h, w], out), None))
        }
        Layer::BatchNorm(l) => {
            let ch = l.gamma.len();
            let (b, sp) = channels_and_spatial(x, ch)?;
            let n = (b * sp) as f64;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    for c in 0..ch {
                        let vals = channel_iter(x.data(), b, ch, sp, c);
                        let m = vals.clone().sum::<f64>() / n;
                        mean[c] = m;
                        var[c] = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                    }
                    (mean, var)
                }
                Mode::Eval => (
                    l.running_mean.data().to_vec(),
                    l.running_var.data().to_vec(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + l.eps)).collect();
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for bi in 0..b {
                for c in 0..ch {
                    let base = (bi * ch + c) * sp;
                    for s in 0..sp {
                        let xh = (x.data()[base + s] - mean[c]) * inv_std[c];
                        xhat[base + s] = xh;
                        out[base + s] = l.gamma.data()[c] * xh + l.beta.data()[c];
                    }
                }
            }
            let cache = BnCache {
                mean,
                var,
                inv_std,
                xhat,
            };
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(cache)))
        }
        Layer::Relu => Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), None)),
        Layer::Flatten => {
            let b = x.batch();
            Ok((x.clone().reshape(&[b, x.row_len()])?, None))
        }
        Layer::Softmax => {
            if x.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "softmax expects 2-D input, got {:?}",
                    x.shape()
                )));
            }
            let w = x.row_len();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(w) {
                softmax_in_place(row);
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), None))
        }
    }
}

fn channel_iter(
    data: &[f64],
    b: usize,
    ch: usize,
    sp: usize,
    c: usize,
) -> impl Iterator<Item = f64> + Clone + '_ {
    (0..b).flat_map(move |bi| {
        data[(bi * ch + c) * sp..(bi * ch + c + 1) * sp]
            .iter()
            .copied()
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn im2col(x: &[f64], ci: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = c * 9 + ky * 3 + kx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        dst[y * w + xx] =
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                0.0
                            } else {
                                x[c * hw + sy as usize * w + sx as usize]
                            };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], ci: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = c * 9 + ky * 3 + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[c * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

fn backward_layer(
    i: usize,
    layer: &Layer,
    trace: &Trace,
    dy: Tensor,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let x = &trace.acts[i];
    let id = |kind| ParamId { layer: i, kind };
    match layer {
        Layer::Dense(l) => {
            let (out_f, in_f) = (l.weight.shape()[0], l.weight.shape()[1]);
            let b = x.batch();
            let mut dw = vec![0.0; out_f * in_f];
            matmul_tn_acc(dy.data(), x.data(), b, out_f, in_f, &mut dw);
            grads.params.insert(
                id(ParamKind::Weight),
                Tensor::from_parts(vec![out_f, in_f], dw),
            );
            if l.bias.is_some() {
                let mut db = vec![0.0; out_f];
                for row in dy.data().chunks(out_f) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                grads
                    .params
                    .insert(id(ParamKind::Bias), Tensor::from_parts(vec![out_f], db));
            }
            let mut dx = vec![0.0; b * in_f];
            matmul_acc(dy.data(), l.weight.data(), b, out_f, in_f, &mut dx);
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
        Layer::Conv3x3(l) => {
            let (co, ci) = (l.weight.shape()[0], l.weight.shape()[1]);
            let (h, w) = (l.height, l.width);
            let hw = h * w;
            let b = x.batch();
            let mut dw = vec![0.0; co * ci * 9];
            let mut db = vec![0.0; co];
            let mut dx = vec![0.0; x.len()];
            let mut cols = vec![0.0; ci * 9 * hw];
            let mut dcols = vec![0.0; ci * 9 * hw];
            let mut dw_n = vec![0.0; co * ci * 9];
            for n in 0..b {
                let g = dy.row(n);
                im2col(x.row(n), ci, h, w, &mut cols);
                matmul_nt(g, &cols, co, hw, ci * 9, &mut dw_n);
                for (a, v) in dw.iter_mut().zip(&dw_n) {
                    *a += v;
                }
                for c in 0..co {
                    db[c] += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                }
                dcols.iter_mut().for_each(|v| *v = 0.0);
                matmul_tn_acc(l.weight.data(), g, co, ci * 9, hw, &mut dcols);
                col2im_acc(&dcols, ci, h, w, &mut dx[n * ci * hw..(n + 1) * ci * hw]);
            }
            grads.params.insert(
                id(ParamKind::Weight),
                Tensor::from_parts(l.weight.shape().to_vec(), dw),
            );
            if l.bias.is_some() {
                grads
                    .params
                    .insert(id(ParamKind::Bias), Tensor::from_parts(vec![co], db));
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
        Layer::BatchNorm(l) => {
            let cache = trace.bn[i]
                .as_ref()
                .ok_or_else(|| Error::State("missing batch-norm cache".into()))?;
            let ch = l.gamma.len();
            let (b, sp) = channels_and_spatial(x, ch)?;
            let n = (b * sp) as f64;
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            let mut dx = vec![0.0; x.len()];
            for c in 0..ch {
                let gamma = l.gamma.data()[c];
                let (mut s_dxhat, mut s_dxhat_xhat) = (0.0, 0.0);
                for bi in 0..b {
                    let base = (bi * ch + c) * sp;
                    for s in 0..sp {
                        let g = dy.data()[base + s];
                        let xh = cache.xhat[base + s];
                        dgamma[c] += g * xh;
                        dbeta[c] += g;
                        s_dxhat += g * gamma;
                        s_dxhat_xhat += g * gamma * xh;
                    }
                }
                let inv = cache.inv_std[c];
                for bi in 0..b {
                    let base = (bi * ch + c) * sp;
                    for s in 0..sp {
                        let dxhat = dy.data()[base + s] * gamma;
                        dx[base + s] = match trace.mode {
                            Mode::Eval => dxhat * inv,
                            Mode::Train => {
                                inv / n
                                    * (n * dxhat - s_dxhat - cache.xhat[base + s] * s_dxhat_xhat)
                            }
                        };
                    }
                }
            }
            grads
                .params
                .insert(id(ParamKind::Gamma), Tensor::from_parts(vec![ch], dgamma));
            grads
                .params
                .insert(id(ParamKind::Beta), Tensor::from_parts(vec![ch], dbeta));
            grads
                .params
                .insert(id(ParamKind::RunningMean), Tensor::zeros(&[ch]));
            grads
                .params
                .insert(id(ParamKind::RunningVar), Tensor::zeros(&[ch]));
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
        Layer::Relu => {
            let data = x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Layer::Flatten => dy.reshape(x.shape()),
        Layer::Softmax => {
            let y = &trace.acts[i + 1];
            let w = y.row_len();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.batch() {
                let yr = y.row(r);
                let gr = dy.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    dx[r * w + j] = yr[j] * (gr[j] - dot);
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
    }
}

// ---------------------------------------------------------------------------
// zoo

/// The four toy networks the universal codebook is shared across.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ZooNet {
    Mlp2x32,
    Mlp3x64,
    CnnSmall,
    AeSmall,
}

impl ZooNet {
    pub const ALL: [ZooNet; 4] = [
        ZooNet::Mlp2x32,
        ZooNet::Mlp3x64,
        ZooNet::CnnSmall,
        ZooNet::AeSmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ZooNet::Mlp2x32 => "mlp-2x32",
            ZooNet::Mlp3x64 => "mlp-3x64",
            ZooNet::CnnSmall => "cnn-small",
            ZooNet::AeSmall => "ae-small",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|z| z.name() == s)
    }

    pub fn build(self, seed: u64) -> TinyNet {
        let mut rng = rng::seeded(rng::derive(seed, self as u64 + 0x200));
        let mut b = NetBuilder::new(self.name(), &mut rng);
        match self {
            ZooNet::Mlp2x32 => {
                b.input(&[2]);
                b.dense(2, 32, Compress::Keep).relu().block("stage1");
                b.dense(32, 32, Compress::Universal).relu().block("stage2");
                b.dense(32, 2, Compress::PerLayer).softmax().block("head");
            }
            ZooNet::Mlp3x64 => {
                b.input(&[8]);
                b.dense(8, 64, Compress::Keep).relu().block("stage1");
                b.dense(64, 64, Compress::Universal).relu().block("stage2");
                b.dense(64, 64, Compress::Universal).relu().block("stage3");
                b.dense(64, 4, Compress::PerLayer).softmax().block("head");
            }
            ZooNet::CnnSmall => {
                b.input(&[1, 8, 8]);
                b.conv(1, 8, 8, 8, Compress::Keep)
                    .batchnorm(8)
                    .relu()
                    .block("conv1");
                b.conv(8, 16, 8, 8, Compress::Universal)
                    .batchnorm(16)
                    .relu()
                    .block("conv2");
                b.flatten()
                    .dense(16 * 64, 4, Compress::PerLayer)
                    .softmax()
                    .block("head");
            }
            ZooNet::AeSmall => {
                b.input(&[16]);
                b.dense(16, 32, Compress::Keep).relu().block("enc1");
                b.dense(32, 32, Compress::Universal).relu().block("enc2");
                b.dense(32, 8, Compress::Universal).relu().block("code");
                b.dense(8, 32, Compress::Universal).relu().block("dec1");
                b.dense(32, 16, Compress::PerLayer).block("out");
            }
        }
        b.finish()
    }
}

/// Incremental network construction with He-normal weights.
pub struct NetBuilder<'r> {
    net: TinyNet,
    block_start: usize,
    rng: &'r mut rng::Rng,
}

impl<'r> NetBuilder<'r> {
    pub fn new(name: &str, rng: &'r mut rng::Rng) -> Self {
        Self {
            net: TinyNet {
                name: name.into(),
                input_shape: Vec::new(),
                layers: Vec::new(),
                blocks: Vec::new(),
            },
            block_start: 0,
            rng,
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> &mut Self {
        self.net.input_shape = shape.to_vec();
        self
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).unwrap();
        Tensor::from_fn(shape, |_| normal.sample(self.rng))
    }

    pub fn dense(&mut self, in_f: usize, out_f: usize, compress: Compress) -> &mut Self {
        let weight = self.he(&[out_f, in_f], in_f);
        self.net.layers.push(Layer::Dense(Dense {
            weight,
            bias: Some(Tensor::zeros(&[out_f])),
            compress,
        }));
        self
    }

    pub fn conv(
        &mut self,
        ci: usize,
        co: usize,
        h: usize,
        w: usize,
        compress: Compress,
    ) -> &mut Self {
        let weight = self.he(&[co, ci, 3, 3], ci * 9);
        self.net.layers.push(Layer::Conv3x3(Conv3x3 {
            weight,
            bias: Some(Tensor::zeros(&[co])),
            height: h,
            width: w,
            compress,
        }));
        self
    }

    pub fn batchnorm(&mut self, ch: usize) -> &mut Self {
        self.net.layers.push(Layer::BatchNorm(BatchNorm {
            gamma: Tensor::filled(&[ch], 1.0),
            beta: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::filled(&[ch], 1.0),
            eps: 1e-5,
        }));
        self
    }

    pub fn relu(&mut self) -> &mut Self {
        self.net.layers.push(Layer::Relu);
        self
    }

    pub fn flatten(&mut self) -> &mut Self {
        self.net.layers.push(Layer::Flatten);
        self
    }

    pub fn softmax(&mut self) -> &mut Self {
        self.net.layers.push(Layer::Softmax);
        self
    }

    /// Closes a block over the layers added since the previous block.
    pub fn block(&mut self, name: &str) -> &mut Self {
        let end = self.net.layers.len();
        self.net.blocks.push(Block {
            name: name.into(),
            start: self.block_start,
            end,
        });
        self.block_start = end;
        self
    }

    pub fn finish(&mut self) -> TinyNet {
        if self.block_start < self.net.layers.len() {
            let name = format!("block{}", self.net.blocks.len());
            self.block(&name);
        }
        core::mem::replace(
            &mut self.net,
            TinyNet {
                name: String::new(),
                input_shape: Vec::new(),
                layers: Vec::new(),
                blocks: Vec::new(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net() -> TinyNet {
        TinyNet {
            name: "id".into(),
            input_shape: vec![2],
            layers: vec![Layer::Dense(Dense {
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: None,
                compress: Compress::Keep,
            })],
            blocks: vec![Block {
                name: "all".into(),
                start: 0,
                end: 1,
            }],
        }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let net = identity_net();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let t = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(t.output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = TinyNet {
            name: "r".into(),
            input_shape: vec![3],
            layers: vec![Layer::Relu],
            blocks: vec![Block {
                name: "b".into(),
                start: 0,
                end: 1,
            }],
        };
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(
            net.forward(&x, Mode::Eval).unwrap().output().data(),
            &[0.0, 0.0, 2.0]
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = identity_net();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_loss_gradient_is_outer_product() {
        let net = identity_net();
        let x = Tensor::new(vec![1, 2], vec![3.0, -5.0]).unwrap();
        let t = net.forward(&x, Mode::Eval).unwrap();
        let g = net
            .backward(&t, &Tensor::filled(&[1, 2], 1.0), &BTreeMap::new())
            .unwrap();
        let dw = g
            .get(ParamId {
                layer: 0,
                kind: ParamKind::Weight,
            })
            .unwrap();
        assert_eq!(dw.data(), &[3.0, -5.0, 3.0, -5.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let net = identity_net();
        let s = Session::new(&net);
        let r = s.backward(&Tensor::zeros(&[1, 2]), &BTreeMap::new());
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zoo_nets_have_valid_block_partitions() {
        for z in ZooNet::ALL {
            let net = z.build(1);
            net.validate().unwrap();
            assert_eq!(ZooNet::from_name(z.name()), Some(z));
            assert!(!net.compressible_layers().is_empty());
        }
    }

    #[test]
    fn param_ids_round_trip_names() {
        let net = ZooNet::CnnSmall.build(0);
        for id in net.param_ids() {
            assert_eq!(ParamId::parse(&id.name()), Some(id));
            assert!(net.param(id).is_some());
        }
    }
}
