//! End-to-end steps shared by the CLI, presets and tests: train the float
//! zoo, fit a universal codebook, compress, and measure baselines.

use uvq_core::assignment::{weight_matrix, SubVectorGrid};
use uvq_core::codebook::{
    default_quota, kmeans_codebook, pool_subvectors, uniform_quantize, universal_subvectors,
    Codebook, KdeModel, DEFAULT_BANDWIDTH,
};
use uvq_core::data::Dataset;
use uvq_core::nn::{Compress, TinyNet, ZooNet};
use uvq_core::pnc::{compress, CompressionOutcome, PncConfig, ProbeSet};
use uvq_core::storage::{vq_ratio, Sharing};
use uvq_core::train::{score, train_float, TrainConfig};
use uvq_core::{rng, Error, Result, Tensor};

use crate::format::{CodebookFile, CodebookMeta, WeightBundle};

/// Desk-scale stand-in for the 2-bit configuration: 8-bit indices over
/// 4-wide sub-vectors.
pub const DESK_K: usize = 256;
pub const DESK_D: usize = 4;

/// A trained float network together with its dataset.
#[derive(Clone, Debug)]
pub struct ZooMember {
    pub kind: ZooNet,
    pub net: TinyNet,
    pub data_seed: u64,
    pub dataset: Dataset,
    pub float_score: f64,
}

impl ZooMember {
    pub fn bundle(&self) -> WeightBundle {
        WeightBundle {
            net: self.net.clone(),
            data_seed: self.data_seed,
        }
    }

    pub fn from_bundle(b: WeightBundle) -> Result<Self> {
        let kind = ZooNet::from_name(&b.net.name)
            .ok_or_else(|| Error::Parameter(format!("'{}' is not a zoo network", b.net.name)))?;
        let dataset = Dataset::for_net(kind, b.data_seed);
        let float_score = score(&b.net, &dataset.test, dataset.task)?;
        Ok(Self {
            kind,
            net: b.net,
            data_seed: b.data_seed,
            dataset,
            float_score,
        })
    }

    pub fn probe(&self) -> ProbeSet<'_> {
        ProbeSet {
            split: &self.dataset.test,
            task: self.dataset.task,
        }
    }
}

/// Trains one zoo network. Weights are rounded to `f32` so the in-memory
/// network equals its serialized bundle.
pub fn train_member(kind: ZooNet, seed: u64) -> Result<ZooMember> {
    let index = ZooNet::ALL.iter().position(|&z| z == kind).unwrap() as u64;
    let init = kind.build(rng::derive(seed, index));
    let dataset = Dataset::for_net(kind, seed);
    let (mut net, _) = train_float(&init, &dataset, &TrainConfig::for_net(kind, seed))?;
    net.round_to_f32();
    let float_score = score(&net, &dataset.test, dataset.task)?;
    Ok(ZooMember {
        kind,
        net,
        data_seed: seed,
        dataset,
        float_score,
    })
}

pub fn train_zoo(seed: u64) -> Result<Vec<ZooMember>> {
    ZooNet::ALL.iter().map(|&k| train_member(k, seed)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookSpec {
    pub k: usize,
    pub d: usize,
    pub bandwidth: f64,
    /// Sub-vectors drawn per network; `None` picks the largest quota every
    /// network can supply, capped at the default.
    pub quota: Option<usize>,
    pub seed: u64,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self {
            k: DESK_K,
            d: DESK_D,
            bandwidth: DEFAULT_BANDWIDTH,
            quota: None,
            seed: 0,
        }
    }
}

/// Largest per-network quota the given networks can all supply, capped at
/// the default quota.
pub fn feasible_quota(nets: &[&TinyNet], k: usize, d: usize) -> usize {
    let available = nets
        .iter()
        .map(|n| universal_subvectors(n, d).len() / d)
        .min()
        .unwrap_or(0);
    default_quota(k, d).min(available)
}

pub fn fit_codebook(nets: &[&TinyNet], spec: &CodebookSpec) -> Result<CodebookFile> {
    if nets.is_empty() {
        return Err(Error::Parameter("no networks to pool".into()));
    }
    let quota = spec
        .quota
        .unwrap_or_else(|| feasible_quota(nets, spec.k, spec.d));
    let pool = pool_subvectors(nets, spec.d, quota, rng::derive(spec.seed, 0x9001))?;
    let kde = KdeModel::new(&pool, spec.bandwidth)?;
    let codebook = kde.sample_codebook(spec.k, rng::derive(spec.seed, 0x9002))?;
    let meta = CodebookMeta {
        bandwidth: spec.bandwidth,
        quota: quota as u64,
        seed: spec.seed,
        sources: pool.sources.clone(),
    };
    Ok(CodebookFile { codebook, meta })
}

pub fn run_compress(
    member: &ZooMember,
    universal: &Codebook,
    cfg: &PncConfig,
) -> Result<CompressionOutcome> {
    compress(
        &member.net,
        universal,
        &member.dataset.calib,
        cfg,
        Some(member.probe()),
    )
}

/// One row of the quantizer comparison.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub config: String,
    pub mse: f64,
    pub bits_per_weight: f64,
    /// Weight-only compression ratio, codebooks excluded.
    pub ratio: f64,
    pub codebook_loads: usize,
}

/// Weight matrices of every universal layer in the zoo.
fn universal_layers<'a>(nets: &[&'a TinyNet]) -> Vec<(&'a TinyNet, usize)> {
    nets.iter()
        .flat_map(|n| {
            n.layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.compress() == Some(Compress::Universal))
                .map(move |(i, _)| (*n, i))
        })
        .collect()
}

fn mean_sq(a: &[f64], b: &[f64]) -> (f64, usize) {
    (
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        a.len(),
    )
}

/// Per-tensor symmetric uniform quantization of every universal layer.
pub fn uq_baseline(nets: &[&TinyNet], bits: u32) -> Result<BaselineRow> {
    let (mut se, mut count) = (0.0, 0);
    for (net, layer) in universal_layers(nets) {
        let (w, rows, cols) = weight_matrix(net, layer)?;
        let t = Tensor::new(vec![rows, cols], w.to_vec())?;
        let (q, _) = uniform_quantize(&t, bits)?;
        let (s, n) = mean_sq(w, q.data());
        se += s;
        count += n;
    }
    Ok(BaselineRow {
        method: "UQ".into(),
        config: format!("b={bits}"),
        mse: se / count.max(1) as f64,
        bits_per_weight: bits as f64,
        ratio: 32.0 / bits as f64,
        codebook_loads: 0,
    })
}

/// Nearest-codeword error of a sub-vector grid against `cb`, over valid
/// (non-pad) coordinates.
fn nearest_error(grid: &SubVectorGrid, cb: &Codebook) -> (f64, usize) {
    let (mut se, mut count) = (0.0, 0);
    for s in 0..grid.count() {
        let valid = grid.valid_len(s);
        let (_, dist) = cb.nearest(grid.sub_vector(s), valid);
        se += dist;
        count += valid;
    }
    (se, count)
}

/// Per-layer k-means VQ of every universal layer; `k` is capped at each
/// layer's sub-vector count.
pub fn pvq_baseline(
    nets: &[&TinyNet],
    k: usize,
    d: usize,
    iters: usize,
    seed: u64,
) -> Result<BaselineRow> {
    let (mut se, mut count, mut layers) = (0.0, 0, 0);
    for (i, (net, layer)) in universal_layers(nets).into_iter().enumerate() {
        let grid = SubVectorGrid::from_layer(net, layer, d)?;
        let vectors: Vec<f64> = (0..grid.count())
            .flat_map(|s| grid.sub_vector(s).to_vec())
            .collect();
        let cb = kmeans_codebook(
            &vectors,
            d,
            k.min(grid.count()),
            iters,
            rng::derive(seed, i as u64),
        )?;
        let (s, n) = nearest_error(&grid, &cb);
        se += s;
        count += n;
        layers += 1;
    }
    Ok(BaselineRow {
        method: "P-VQ".into(),
        config: format!("k={k},d={d}"),
        mse: se / count.max(1) as f64,
        bits_per_weight: uvq_core::storage::index_bits(k) as f64 / d as f64,
        ratio: vq_ratio(k, d),
        codebook_loads: loads(Sharing::PerLayer, layers),
    })
}

/// Nearest-codeword quantization of every universal layer against one
/// shared codebook.
pub fn uvq_baseline(nets: &[&TinyNet], cb: &Codebook) -> Result<BaselineRow> {
    let (mut se, mut count) = (0.0, 0);
    for (net, layer) in universal_layers(nets) {
        let grid = SubVectorGrid::from_layer(net, layer, cb.d())?;
        let (s, n) = nearest_error(&grid, cb);
        se += s;
        count += n;
    }
    Ok(BaselineRow {
        method: "U-VQ".into(),
        config: format!("k={},d={}", cb.k(), cb.d()),
        mse: se / count.max(1) as f64,
        bits_per_weight: cb.index_bits() as f64 / cb.d() as f64,
        ratio: vq_ratio(cb.k(), cb.d()),
        codebook_loads: loads(Sharing::Universal, 1),
    })
}

fn loads(sharing: Sharing, layers: usize) -> usize {
    match sharing {
        Sharing::Universal => 1,
        Sharing::PerLayer => layers.max(1),
    }
}
