//! Sub-vector decomposition, candidate search and soft/hard reconstruction.
//!
//! A weight matrix `o × i` is cut into `o × ceil(i/d)` sub-vectors of
//! length `d`. When `d` does not divide `i` the last sub-vector of each row
//! is zero-padded; pad positions never enter distances, losses or errors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::codebook::{sq_dist, Codebook};
use crate::nn::TinyNet;
use crate::{rng, Error, Result, Tensor};

/// Floor applied to squared distances before taking logarithms.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Default number of candidate codewords per sub-vector.
pub const DEFAULT_CANDIDATES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SubVectorGrid {
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    /// Zero-padded, `rows × per_row × d`.
    data: Vec<f64>,
}

impl SubVectorGrid {
    /// Splits a 2-D weight matrix into sub-vectors of length `d`.
    pub fn decompose(w: &Tensor, d: usize) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "expected a 2-D matrix, got {:?}",
                w.shape()
            )));
        }
        Self::from_matrix(w.data(), w.shape()[0], w.shape()[1], d)
    }

    pub fn from_matrix(w: &[f64], rows: usize, cols: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("d must be positive".into()));
        }
        let per_row = cols.div_ceil(d);
        let mut data = vec![0.0; rows * per_row * d];
        for r in 0..rows {
            data[r * per_row * d..r * per_row * d + cols]
                .copy_from_slice(&w[r * cols..(r + 1) * cols]);
        }
        Ok(Self {
            rows,
            cols,
            d,
            data,
        })
    }

    /// Grid of a dense or conv layer's canonical weight matrix.
    pub fn from_layer(net: &TinyNet, layer: usize, d: usize) -> Result<Self> {
        let (w, rows, cols) = weight_matrix(net, layer)?;
        Self::from_matrix(w, rows, cols, d)
    }

    pub fn per_row(&self) -> usize {
        self.cols.div_ceil(self.d)
    }

    pub fn count(&self) -> usize {
        self.rows * self.per_row()
    }

    pub fn sub_vector(&self, s: usize) -> &[f64] {
        &self.data[s * self.d..(s + 1) * self.d]
    }

    /// Number of real (non-pad) coordinates in sub-vector `s`.
    pub fn valid_len(&self, s: usize) -> usize {
        valid_len(self.cols, self.d, s)
    }

    /// `true` at pad positions, laid out like the padded grid.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.count())
            .flat_map(|s| {
                let v = self.valid_len(s);
                (0..self.d).map(move |t| t >= v)
            })
            .collect()
    }

    /// Inverse of [`Self::decompose`].
    pub fn reassemble(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.rows, self.cols],
            unpad(&self.data, self.rows, self.cols, self.d),
        )
    }
}

fn valid_len(cols: usize, d: usize, s: usize) -> usize {
    let per_row = cols.div_ceil(d);
    let j = s % per_row;
    (cols - j * d).min(d)
}

/// Drops pad positions from a padded `rows × per_row × d` buffer.
fn unpad(padded: &[f64], rows: usize, cols: usize, d: usize) -> Vec<f64> {
    let stride = cols.div_ceil(d) * d;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend_from_slice(&padded[r * stride..r * stride + cols]);
    }
    out
}

/// Canonical `(data, rows, cols)` view of a weight layer.
pub fn weight_matrix(net: &TinyNet, layer: usize) -> Result<(&[f64], usize, usize)> {
    let l = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::Parameter(format!("no layer {layer}")))?;
    let (rows, cols) = l
        .weight_matrix_shape()
        .ok_or_else(|| Error::Parameter(format!("layer {layer} has no weight")))?;
    let w = net
        .param(crate::nn::ParamId {
            layer,
            kind: crate::nn::ParamKind::Weight,
        })
        .expect("weight layer");
    Ok((w.data(), rows, cols))
}

/// Indices of the `n` codewords nearest to `sv` over its first `valid`
/// coordinates, ascending by squared distance, ties to the lower index.
pub fn find_candidates(sv: &[f64], valid: usize, cb: &Codebook, n: usize) -> Result<Vec<u32>> {
    Ok(find_candidates_with_distance(sv, valid, cb, n)?
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

fn find_candidates_with_distance(
    sv: &[f64],
    valid: usize,
    cb: &Codebook,
    n: usize,
) -> Result<Vec<(u32, f64)>> {
    if n == 0 || n > cb.k() {
        return Err(Error::Parameter(format!(
            "n={} must lie in 1..={}",
            n,
            cb.k()
        )));
    }
    let mut all: Vec<(u32, f64)> = (0..cb.k())
        .map(|i| (i as u32, sq_dist(&sv[..valid], &cb.codeword(i)[..valid])))
        .collect();
    let cmp = |a: &(u32, f64), b: &(u32, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if n < all.len() {
        all.select_nth_unstable_by(n - 1, cmp);
        all.truncate(n);
    }
    all.sort_unstable_by(cmp);
    Ok(all)
}

/// Logits whose softmax is proportional to inverse squared distance:
/// `z_m = ln(d²_far / d²_m)` with `d²_far` the farthest candidate.
pub fn init_logits(sq_dists: &[f64]) -> Vec<f64> {
    let far = sq_dists.last().copied().unwrap_or(0.0).max(DISTANCE_FLOOR);
    sq_dists
        .iter()
        .map(|&d2| libm::log(far / d2.max(DISTANCE_FLOOR)))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut r = z.to_vec();
    crate::nn::softmax_in_place(&mut r);
    r
}

/// How the candidate set of a sub-vector is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateMethod {
    /// `n` nearest codewords in Euclidean distance.
    Euclidean,
    /// `n` codewords of highest cosine similarity.
    Cosine,
    /// `n` distinct codewords chosen uniformly at random.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogitInit {
    /// Ratios proportional to inverse squared distance.
    InverseDistance,
    /// All logits zero, equal ratios.
    Uniform,
}

/// Where a layer's codewords come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CodebookSource {
    Universal,
    PerLayer(Codebook),
}

/// Candidate assignments, logits and freeze state of one weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAssignment {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub n: usize,
    pub source: CodebookSource,
    candidates: Vec<u32>,
    logits: Vec<f64>,
    frozen: Vec<Option<u32>>,
}

impl LayerAssignment {
    /// Candidate search and logit initialization for every sub-vector of
    /// the matrix `w` (`rows × cols`).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        layer: usize,
        w: &[f64],
        rows: usize,
        cols: usize,
        source: CodebookSource,
        universal: &Codebook,
        n: usize,
        method: CandidateMethod,
        init: LogitInit,
        seed: u64,
    ) -> Result<Self> {
        let cb = match &source {
            CodebookSource::Universal => universal,
            CodebookSource::PerLayer(c) => c,
        };
        let d = cb.d();
        if n == 0 || n > cb.k() {
            return Err(Error::Parameter(format!(
                "n={} must lie in 1..={}",
                n,
                cb.k()
            )));
        }
        let grid = SubVectorGrid::from_matrix(w, rows, cols, d)?;
        let count = grid.count();
        let mut candidates = Vec::with_capacity(count * n);
        let mut logits = Vec::with_capacity(count * n);
        let mut r = rng::seeded(rng::derive(seed, layer as u64 + 0x5eed));
        for s in 0..count {
            let sv = grid.sub_vector(s);
            let valid = grid.valid_len(s);
            let mut chosen: Vec<(u32, f64)> = match method {
                CandidateMethod::Euclidean => find_candidates_with_distance(sv, valid, cb, n)?,
                CandidateMethod::Cosine => {
                    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                    let sn = norm(&sv[..valid]);
                    let mut all: Vec<(u32, f64)> = (0..cb.k())
                        .map(|i| {
                            let c = &cb.codeword(i)[..valid];
                            let dot: f64 = sv.iter().zip(c).map(|(a, b)| a * b).sum();
                            let den = sn * norm(c);
                            (i as u32, if den > 0.0 { -dot / den } else { 0.0 })
                        })
                        .collect();
                    all.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                    all.truncate(n);
                    all.into_iter()
                        .map(|(i, _)| (i, sq_dist(&sv[..valid], &cb.codeword(i as usize)[..valid])))
                        .collect()
                }
                CandidateMethod::Random => index::sample(&mut r, cb.k(), n)
                    .into_iter()
                    .map(|i| (i as u32, sq_dist(&sv[..valid], &cb.codeword(i)[..valid])))
                    .collect(),
            };
            // slot order is always ascending distance
            chosen.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let d2: Vec<f64> = chosen.iter().map(|c| c.1).collect();
            candidates.extend(chosen.iter().map(|c| c.0));
            match init {
                LogitInit::InverseDistance => logits.extend(init_logits(&d2)),
                LogitInit::Uniform => logits.extend(core::iter::repeat_n(0.0, n)),
            }
        }
        Ok(Self {
            layer,
            rows,
            cols,
            d,
            n,
            source,
            candidates,
            logits,
            frozen: vec![None; count],
        })
    }

    /// Assembles an assignment from explicit parts (tests, decoding).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layer: usize,
        rows: usize,
        cols: usize,
        d: usize,
        n: usize,
        source: CodebookSource,
        candidates: Vec<u32>,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let count = rows * cols.div_ceil(d);
        if candidates.len() != count * n || logits.len() != count * n {
            return Err(Error::Shape(format!(
                "{count} sub-vectors × {n} candidates"
            )));
        }
        for s in 0..count {
            let c = &candidates[s * n..(s + 1) * n];
            for (a, x) in c.iter().enumerate() {
                if c[..a].contains(x) {
                    return Err(Error::Contract(format!(
                        "duplicate candidate in sub-vector {s}"
                    )));
                }
            }
        }
        Ok(Self {
            layer,
            rows,
            cols,
            d,
            n,
            source,
            candidates,
            logits,
            frozen: vec![None; count],
        })
    }

    pub fn codebook<'a>(&'a self, universal: &'a Codebook) -> &'a Codebook {
        match &self.source {
            CodebookSource::Universal => universal,
            CodebookSource::PerLayer(c) => c,
        }
    }

    pub fn per_row(&self) -> usize {
        self.cols.div_ceil(self.d)
    }

    pub fn count(&self) -> usize {
        self.rows * self.per_row()
    }

    pub fn valid_len(&self, s: usize) -> usize {
        valid_len(self.cols, self.d, s)
    }

    pub fn candidates(&self, s: usize) -> &[u32] {
        &self.candidates[s * self.n..(s + 1) * self.n]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn frozen(&self, s: usize) -> Option<usize> {
        self.frozen[s].map(|m| m as usize)
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|f| f.is_some()).count()
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.frozen.iter().all(Option::is_some)
    }

    /// Fixes sub-vector `s` to one-hot at `slot`. Already-frozen
    /// sub-vectors keep their original slot.
    pub fn freeze(&mut self, s: usize, slot: usize) -> bool {
        if self.frozen[s].is_some() || slot >= self.n {
            return false;
        }
        self.frozen[s] = Some(slot as u32);
        true
    }

    /// Per-slot `true` where logits are still trainable.
    pub fn active_mask(&self) -> Vec<bool> {
        self.frozen
            .iter()
            .flat_map(|f| core::iter::repeat_n(f.is_none(), self.n))
            .collect()
    }

    /// Ratios of one sub-vector: softmax of its logits, or exact one-hot
    /// once frozen.
    pub fn ratios_of(&self, s: usize) -> Vec<f64> {
        match self.frozen[s] {
            Some(m) => (0..self.n)
                .map(|j| if j == m as usize { 1.0 } else { 0.0 })
                .collect(),
            None => softmax(&self.logits[s * self.n..(s + 1) * self.n]),
        }
    }

    /// All ratios, `count × n`.
    pub fn ratios(&self) -> Vec<f64> {
        (0..self.count()).flat_map(|s| self.ratios_of(s)).collect()
    }

    /// Slot of the largest ratio (frozen slot if frozen), ties to the lower slot.
    pub fn best_slot(&self, s: usize) -> usize {
        if let Some(m) = self.frozen[s] {
            return m as usize;
        }
        argmax(&self.ratios_of(s))
    }

    /// Hard codeword index of every sub-vector.
    pub fn hard_indices(&self) -> Vec<u32> {
        (0..self.count())
            .map(|s| self.candidates(s)[self.best_slot(s)])
            .collect()
    }

    /// Weighted average of candidate codewords, `rows × cols`.
    pub fn reconstruct_soft(&self, universal: &Codebook) -> Vec<f64> {
        let cb = self.codebook(universal);
        let d = self.d;
        let mut padded = vec![0.0; self.count() * d];
        for s in 0..self.count() {
            let out = &mut padded[s * d..(s + 1) * d];
            let valid = self.valid_len(s);
            if let Some(m) = self.frozen[s] {
                let c = cb.codeword(self.candidates(s)[m as usize] as usize);
                out[..valid].copy_from_slice(&c[..valid]);
                continue;
            }
            let r = self.ratios_of(s);
            for (m, &a) in self.candidates(s).iter().enumerate() {
                let c = cb.codeword(a as usize);
                for t in 0..valid {
                    out[t] += r[m] * c[t];
                }
            }
        }
        unpad(&padded, self.rows, self.cols, d)
    }

    /// Single-codeword lookup at the best slot, `rows × cols`.
    pub fn reconstruct_hard(&self, universal: &Codebook) -> Vec<f64> {
        let cb = self.codebook(universal);
        decode_indices(&self.hard_indices(), cb, self.rows, self.cols)
    }
}

/// Rebuilds a `rows × cols` matrix from one codeword index per sub-vector.
pub fn decode_indices(indices: &[u32], cb: &Codebook, rows: usize, cols: usize) -> Vec<f64> {
    let d = cb.d();
    let per_row = cols.div_ceil(d);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for j in 0..per_row {
            let valid = (cols - j * d).min(d);
            out.extend_from_slice(&cb.codeword(indices[r * per_row + j] as usize)[..valid]);
        }
    }
    out
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
