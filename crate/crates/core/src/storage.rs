//! Bit-packed assignment streams, the in-memory compressed model, and
//! storage accounting.
//!
//! Indices are packed LSB-first at `ceil(log2 k)` bits each: index `i`
//! occupies stream bits `i*b .. (i+1)*b`, bit `p` living in byte `p / 8` at
//! position `p % 8`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::assignment::{decode_indices, weight_matrix, CodebookSource, LayerAssignment};
use crate::codebook::Codebook;
use crate::nn::{Mode, ParamId, ParamKind, TinyNet};
use crate::{Error, Result, Tensor};

/// `ceil(log2 k)`; zero for `k <= 1`.
pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

pub fn packed_len(count: usize, k: usize) -> usize {
    (count * index_bits(k) as usize).div_ceil(8)
}

pub fn pack_assignments(indices: &[u32], k: usize) -> Result<Vec<u8>> {
    let bits = index_bits(k) as usize;
    let mut out = vec![0u8; packed_len(indices.len(), k)];
    for (i, &idx) in indices.iter().enumerate() {
        if idx as usize >= k {
            return Err(Error::Encode(format!(
                "index {idx} at position {i} is not below k={k}"
            )));
        }
        let mut p = i * bits;
        let mut v = idx as u64;
        let mut left = bits;
        while left > 0 {
            let take = left.min(8 - p % 8);
            out[p / 8] |= ((v & ((1 << take) - 1)) as u8) << (p % 8);
            v >>= take;
            p += take;
            left -= take;
        }
    }
    Ok(out)
}

pub fn unpack_assignments(bytes: &[u8], count: usize, k: usize) -> Result<Vec<u32>> {
    if bytes.len() != packed_len(count, k) {
        return Err(Error::Decode(format!(
            "stream of {} bytes cannot hold {count} indices for k={k}",
            bytes.len()
        )));
    }
    let bits = index_bits(k) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut p = i * bits;
        let mut v = 0u64;
        let mut got = 0;
        while got < bits {
            let take = (bits - got).min(8 - p % 8);
            let chunk = (bytes[p / 8] >> (p % 8)) as u64 & ((1 << take) - 1);
            v |= chunk << got;
            got += take;
            p += take;
        }
        if v as usize >= k {
            return Err(Error::Decode(format!(
                "index {v} at position {i} is not below k={k}"
            )));
        }
        out.push(v as u32);
    }
    Ok(out)
}

/// One quantized layer: packed indices plus, for per-layer quantization,
/// its own codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub k: usize,
    /// `None` means the universal codebook.
    pub codebook: Option<Codebook>,
    pub packed: Vec<u8>,
}

impl CompressedLayer {
    pub fn sub_vectors(&self) -> usize {
        self.rows * self.cols.div_ceil(self.d)
    }

    pub fn weights(&self) -> usize {
        self.rows * self.cols
    }

    pub fn indices(&self) -> Result<Vec<u32>> {
        unpack_assignments(&self.packed, self.sub_vectors(), self.k)
    }
}

/// Identity of the universal codebook a model was built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniversalRef {
    pub k: usize,
    pub d: usize,
    pub fingerprint: u64,
}

impl UniversalRef {
    pub fn of(cb: &Codebook) -> Self {
        Self {
            k: cb.k(),
            d: cb.d(),
            fingerprint: cb.fingerprint(),
        }
    }
}

/// A fully hardened network: residual parameters in `net`, quantized
/// weights as index streams. Quantized weight tensors in `net` are zero
/// placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub net: TinyNet,
    pub layers: Vec<CompressedLayer>,
    pub universal: Option<UniversalRef>,
}

impl CompressedModel {
    /// Packs the hard assignments of `assignments`; residual parameters are
    /// taken from `net` and rounded to `f32`.
    pub fn from_assignments(
        net: &TinyNet,
        assignments: &[LayerAssignment],
        universal: &Codebook,
    ) -> Result<Self> {
        let mut skeleton = net.clone();
        skeleton.round_to_f32();
        let mut layers = Vec::with_capacity(assignments.len());
        let mut uses_universal = false;
        for la in assignments {
            if !la.is_fully_frozen() {
                return Err(Error::Contract(format!(
                    "layer {} is not fully hardened",
                    la.layer
                )));
            }
            let cb = la.codebook(universal);
            let codebook = match &la.source {
                CodebookSource::Universal => {
                    uses_universal = true;
                    None
                }
                CodebookSource::PerLayer(c) => Some(c.clone()),
            };
            layers.push(CompressedLayer {
                layer: la.layer,
                rows: la.rows,
                cols: la.cols,
                d: la.d,
                k: cb.k(),
                codebook,
                packed: pack_assignments(&la.hard_indices(), cb.k())?,
            });
            let w = skeleton
                .param_mut(ParamId {
                    layer: la.layer,
                    kind: ParamKind::Weight,
                })
                .unwrap();
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self {
            net: skeleton,
            layers,
            universal: uses_universal.then(|| UniversalRef::of(universal)),
        })
    }

    fn check_universal<'a>(&self, universal: Option<&'a Codebook>) -> Result<Option<&'a Codebook>> {
        match (self.universal, universal) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Decode("model needs the universal codebook".into())),
            (Some(r), Some(cb)) => {
                if UniversalRef::of(cb) != r || !cb.verify() {
                    return Err(Error::Decode(
                        "universal codebook does not match the model".into(),
                    ));
                }
                Ok(Some(cb))
            }
        }
    }

    /// Rebuilds the hard network.
    pub fn decode(&self, universal: Option<&Codebook>) -> Result<TinyNet> {
        let universal = self.check_universal(universal)?;
        let mut net = self.net.clone();
        for cl in &self.layers {
            let cb = match (&cl.codebook, universal) {
                (Some(c), _) => c,
                (None, Some(u)) => u,
                (None, None) => return Err(Error::Decode("missing universal codebook".into())),
            };
            if cb.k() != cl.k || cb.d() != cl.d {
                return Err(Error::Decode(format!(
                    "layer {} codebook shape mismatch",
                    cl.layer
                )));
            }
            let values = decode_indices(&cl.indices()?, cb, cl.rows, cl.cols);
            let w = net
                .param_mut(ParamId {
                    layer: cl.layer,
                    kind: ParamKind::Weight,
                })
                .ok_or_else(|| Error::Decode(format!("layer {} has no weight", cl.layer)))?;
            if w.len() != values.len() {
                return Err(Error::Decode(format!(
                    "layer {} weight size mismatch",
                    cl.layer
                )));
            }
            w.data_mut().copy_from_slice(&values);
        }
        Ok(net)
    }

    pub fn decode_and_run(&self, universal: Option<&Codebook>, x: &Tensor) -> Result<Tensor> {
        let net = self.decode(universal)?;
        Ok(net.forward(x, Mode::Eval)?.output().clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    /// One codebook per compressed layer.
    PerLayer,
    /// One codebook for everything.
    Universal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub name: String,
    pub compressed_layers: usize,
    pub compressed_weights: usize,
    pub assignment_bits: u64,
    /// Parameters stored as raw 32-bit floats.
    pub raw_params: usize,
    pub per_layer_codebook_bits: u64,
    pub universal_codebook_bits: u64,
    pub bits_per_weight: f64,
    /// `32 · weights / assignment bits`, codebooks excluded.
    pub ratio_weights_only: f64,
    /// Whole model including raw residuals and per-layer codebooks.
    pub ratio_total: f64,
    /// As `ratio_total`, plus this model's share of the universal codebook.
    pub ratio_total_amortized: f64,
    pub codebook_bytes: u64,
    pub codebook_loads: usize,
    /// Mean squared error of the quantized weights, when float weights are given.
    pub mse: Option<f64>,
}

/// Storage and I/O accounting for one compressed model.
///
/// `layer_count_across_tasks` is the number of per-layer codebooks resident
/// across every network sharing the device; `networks_sharing` divides the
/// universal codebook cost.
pub fn account(
    model: &CompressedModel,
    float_net: Option<&TinyNet>,
    universal: Option<&Codebook>,
    sharing: Sharing,
    layer_count_across_tasks: usize,
    networks_sharing: usize,
) -> Result<CompressionReport> {
    let compressed_weights: usize = model.layers.iter().map(CompressedLayer::weights).sum();
    let assignment_bits: u64 = model
        .layers
        .iter()
        .map(|l| l.sub_vectors() as u64 * index_bits(l.k) as u64)
        .sum();
    let per_layer_codebook_bits: u64 = model
        .layers
        .iter()
        .filter_map(|l| l.codebook.as_ref())
        .map(|c| (c.k() * c.d() * 32) as u64)
        .sum();
    let universal_codebook_bits = model.universal.map_or(0, |u| (u.k * u.d * 32) as u64);
    let compressed: Vec<usize> = model.layers.iter().map(|l| l.layer).collect();
    let raw_params: usize = model
        .net
        .param_ids()
        .into_iter()
        .filter(|id| !(id.kind == ParamKind::Weight && compressed.contains(&id.layer)))
        .map(|id| model.net.param(id).unwrap().len())
        .sum();
    let total_weights = (compressed_weights + raw_params) as f64;
    let stored = assignment_bits as f64 + 32.0 * raw_params as f64 + per_layer_codebook_bits as f64;
    let amortized = stored + universal_codebook_bits as f64 / networks_sharing.max(1) as f64;
    let codebook_loads = match sharing {
        Sharing::Universal => 1,
        Sharing::PerLayer => layer_count_across_tasks.max(1),
    };
    let mse = match float_net {
        Some(f) => Some(weight_mse(model, f, universal)?),
        None => None,
    };
    Ok(CompressionReport {
        name: model.net.name.clone(),
        compressed_layers: model.layers.len(),
        compressed_weights,
        assignment_bits,
        raw_params,
        per_layer_codebook_bits,
        universal_codebook_bits,
        bits_per_weight: assignment_bits as f64 / compressed_weights.max(1) as f64,
        ratio_weights_only: 32.0 * compressed_weights as f64 / assignment_bits.max(1) as f64,
        ratio_total: 32.0 * total_weights / stored,
        ratio_total_amortized: 32.0 * total_weights / amortized,
        codebook_bytes: (per_layer_codebook_bits + universal_codebook_bits) / 8,
        codebook_loads,
        mse,
    })
}

/// MSE between the decoded quantized weights and the float weights, over
/// every compressed layer.
pub fn weight_mse(
    model: &CompressedModel,
    float_net: &TinyNet,
    universal: Option<&Codebook>,
) -> Result<f64> {
    let hard = model.decode(universal)?;
    let (mut se, mut count) = (0.0, 0usize);
    for cl in &model.layers {
        let (a, _, _) = weight_matrix(&hard, cl.layer)?;
        let (b, _, _) = weight_matrix(float_net, cl.layer)?;
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "layer {} differs from the float net",
                cl.layer
            )));
        }
        se += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += a.len();
    }
    Ok(se / count.max(1) as f64)
}

/// Weight-only compression ratio of a `(k, d)` codebook: `32·d / log2 k`.
pub fn vq_ratio(k: usize, d: usize) -> f64 {
    32.0 * d as f64 / index_bits(k) as f64
}
