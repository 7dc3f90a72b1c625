//! Codebooks: the KDE-sampled universal codebook and the two baselines
//! (per-layer k-means VQ and symmetric uniform quantization).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::SubVectorGrid;
use crate::nn::{Compress, TinyNet};
use crate::{rng, Error, Result, Tensor};

/// Default KDE bandwidth.
pub const DEFAULT_BANDWIDTH: f64 = 0.01;

/// `(k, d)` per nominal bit-width: 3, 2, 1 and 0.5 bits per weight.
pub const DEFAULT_SHAPES: [(f64, usize, usize); 4] = [
    (3.0, 1 << 12, 4),
    (2.0, 1 << 16, 8),
    (1.0, 1 << 16, 16),
    (0.5, 1 << 16, 32),
];

/// Per-network sampling quota in sub-vectors: ten times the codebook size
/// in scalars.
pub fn default_quota(k: usize, d: usize) -> usize {
    10 * k * d
}

/// A frozen `k × d` table of codewords.
///
/// Values are rounded to `f32` on construction, so the in-memory codebook
/// and its serialized form are the same numbers. There is no mutable access.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    codewords: Vec<f64>,
    fingerprint: u64,
}

impl Codebook {
    pub fn new(k: usize, d: usize, mut codewords: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Parameter("codebook needs k >= 1 and d >= 1".into()));
        }
        if codewords.len() != k * d {
            return Err(Error::Shape(format!(
                "{} values for a {k}x{d} codebook",
                codewords.len()
            )));
        }
        for v in &mut codewords {
            if !v.is_finite() {
                return Err(Error::Parameter("non-finite codeword".into()));
            }
            *v = *v as f32 as f64;
        }
        let fingerprint = rng::fingerprint(&codewords);
        Ok(Self {
            k,
            d,
            codewords,
            fingerprint,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.codewords[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.codewords
    }

    /// Content hash fixed at construction.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Recomputes the content hash; differs from [`Self::fingerprint`] only
    /// if the codewords were altered.
    pub fn verify(&self) -> bool {
        rng::fingerprint(&self.codewords) == self.fingerprint
    }

    /// Bits per stored index.
    pub fn index_bits(&self) -> u32 {
        crate::storage::index_bits(self.k)
    }

    /// Index of the nearest codeword over the first `valid` coordinates;
    /// ties go to the lower index.
    pub fn nearest(&self, v: &[f64], valid: usize) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d2 = sq_dist(&v[..valid], &self.codeword(i)[..valid]);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sub-vectors drawn in equal numbers from several networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SubVectorPool {
    pub d: usize,
    /// `N × d`, row-major.
    pub vectors: Vec<f64>,
    /// Index into `sources` for each vector.
    pub provenance: Vec<u16>,
    pub sources: Vec<String>,
}

impl SubVectorPool {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn from_vectors(d: usize, vectors: Vec<f64>, source: &str) -> Result<Self> {
        if d == 0 || !vectors.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} values do not split into d={d}",
                vectors.len()
            )));
        }
        let n = vectors.len() / d;
        Ok(Self {
            d,
            vectors,
            provenance: vec![0; n],
            sources: vec![source.into()],
        })
    }
}

/// Every complete (unpadded) sub-vector of a network's universal layers.
pub fn universal_subvectors(net: &TinyNet, d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.compress() != Some(Compress::Universal) {
            continue;
        }
        let grid = SubVectorGrid::from_layer(net, i, d).expect("weight layer");
        for s in 0..grid.count() {
            if grid.valid_len(s) == d {
                out.extend_from_slice(grid.sub_vector(s));
            }
        }
    }
    out
}

/// Draws `quota` sub-vectors uniformly without replacement from each
/// network and concatenates them.
pub fn pool_subvectors(
    nets: &[&TinyNet],
    d: usize,
    quota: usize,
    seed: u64,
) -> Result<SubVectorPool> {
    if d == 0 {
        return Err(Error::Parameter("d must be positive".into()));
    }
    let mut pool = SubVectorPool {
        d,
        vectors: Vec::new(),
        provenance: Vec::new(),
        sources: Vec::new(),
    };
    for (ni, net) in nets.iter().enumerate() {
        let all = universal_subvectors(net, d);
        let available = all.len() / d;
        if quota > available {
            return Err(Error::Sampling(format!(
                "quota {quota} exceeds the {available} sub-vectors of '{}'",
                net.name
            )));
        }
        let mut r = rng::seeded(rng::derive(seed, ni as u64));
        let mut picks = index::sample(&mut r, available, quota).into_vec();
        picks.sort_unstable();
        for p in picks {
            pool.vectors.extend_from_slice(&all[p * d..(p + 1) * d]);
            pool.provenance.push(ni as u16);
        }
        pool.sources.push(net.name.clone());
    }
    Ok(pool)
}

/// Gaussian kernel density estimate over a sub-vector pool, using a
/// d-dimensional product kernel with one shared bandwidth.
#[derive(Clone, Copy, Debug)]
pub struct KdeModel<'a> {
    pool: &'a SubVectorPool,
    bandwidth: f64,
}

impl<'a> KdeModel<'a> {
    pub fn new(pool: &'a SubVectorPool, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Parameter(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if pool.is_empty() {
            return Err(Error::Sampling("empty sub-vector pool".into()));
        }
        Ok(Self { pool, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn pool(&self) -> &SubVectorPool {
        self.pool
    }

    pub fn density(&self, w: &[f64]) -> Result<f64> {
        let d = self.pool.d;
        if w.len() != d {
            return Err(Error::Shape(format!(
                "query has {} dims, pool has {d}",
                w.len()
            )));
        }
        let h = self.bandwidth;
        let norm = libm::pow(2.0 * PI, -(d as f64) / 2.0);
        let sum: f64 = (0..self.pool.len())
            .map(|i| {
                let u2 = sq_dist(w, self.pool.vector(i)) / (h * h);
                norm * libm::exp(-0.5 * u2)
            })
            .sum();
        Ok(sum / (self.pool.len() as f64 * libm::pow(h, d as f64)))
    }

    /// Draws `k` codewords i.i.d. from the density: a uniformly chosen pool
    /// vector plus isotropic Gaussian noise of scale `h`.
    pub fn sample_codebook(&self, k: usize, seed: u64) -> Result<Codebook> {
        if k < 1 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        let d = self.pool.d;
        let mut r = rng::seeded(rng::derive(seed, 0xc0de));
        let noise = Normal::new(0.0, self.bandwidth).unwrap();
        let mut values = Vec::with_capacity(k * d);
        for _ in 0..k {
            let i = r.random_range(0..self.pool.len());
            values.extend(
                self.pool
                    .vector(i)
                    .iter()
                    .map(|&v| v + noise.sample(&mut r)),
            );
        }
        Codebook::new(k, d, values)
    }
}

// ---------------------------------------------------------------------------
// k-means (per-layer VQ baseline)

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub d: usize,
    /// `k × d`, full precision.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    /// SSE after every assignment step of the returned run.
    pub history: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.d
    }

    pub fn into_codebook(self) -> Result<Codebook> {
        let k = self.k();
        Codebook::new(k, self.d, self.centroids)
    }
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs
/// (by final SSE) is returned.
pub fn kmeans(
    vectors: &[f64],
    d: usize,
    k: usize,
    iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeans> {
    if d == 0 || !vectors.len().is_multiple_of(d) {
        return Err(Error::Shape(
            "vector data does not split into rows of d".into(),
        ));
    }
    let n = vectors.len() / d;
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k={k} needs 1 <= k <= {n}")));
    }
    let mut best: Option<KMeans> = None;
    for run in 0..restarts.max(1) {
        let mut r = rng::seeded(rng::derive(seed, run as u64));
        let init = kmeans_pp(vectors, d, k, &mut r);
        let res = lloyd(vectors, d, init, iters);
        if best.as_ref().is_none_or(|b| res.sse < b.sse) {
            best = Some(res);
        }
    }
    Ok(best.unwrap())
}

fn kmeans_pp(x: &[f64], d: usize, k: usize, r: &mut rng::Rng) -> Vec<f64> {
    let n = x.len() / d;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // guard against rounding landing on a zero-weight tail entry
            while dist[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Lloyd iterations from given initial centroids.
pub fn lloyd(x: &[f64], d: usize, mut centroids: Vec<f64>, iters: usize) -> KMeans {
    let n = x.len() / d;
    let k = centroids.len() / d;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut assignment = vec![usize::MAX; n];
    let mut cost = vec![0.0; n];

    let assign = |centroids: &[f64], assignment: &mut [usize], cost: &mut [f64]| -> (bool, f64) {
        let mut changed = false;
        let mut sse = 0.0;
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d2 = sq_dist(row(i), &centroids[c * d..(c + 1) * d]);
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            if assignment[i] != best.0 {
                changed = true;
                assignment[i] = best.0;
            }
            cost[i] = best.1;
            sse += best.1;
        }
        (changed, sse)
    };

    let (_, sse) = assign(&centroids, &mut assignment, &mut cost);
    let mut history = vec![sse];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for t in 0..d {
                    centroids[c * d + t] = sums[c * d + t] / counts[c] as f64;
                }
            } else {
                // empty cluster: move to the worst-served point
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                cost[far] = 0.0;
                centroids[c * d..(c + 1) * d].copy_from_slice(row(far));
            }
        }
        let (changed, sse) = assign(&centroids, &mut assignment, &mut cost);
        history.push(sse);
        if !changed {
            break;
        }
    }
    let sse = *history.last().unwrap();
    KMeans {
        d,
        centroids,
        assignment,
        sse,
        history,
    }
}

/// Per-layer codebook for the P-VQ baseline and for output heads.
pub fn kmeans_codebook(
    vectors: &[f64],
    d: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    kmeans(vectors, d, k, iters, 1, seed)?.into_codebook()
}

// ---------------------------------------------------------------------------
// uniform quantization baseline

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantizer {
    pub bits: u32,
    pub scale: f64,
}

impl UniformQuantizer {
    /// Largest integer level; 1-bit quantization uses the signs ±1.
    pub fn max_level(&self) -> i64 {
        if self.bits == 1 {
            1
        } else {
            (1i64 << (self.bits - 1)) - 1
        }
    }

    pub fn level(&self, w: f64) -> i64 {
        if self.bits == 1 {
            if w < 0.0 {
                -1
            } else {
                1
            }
        } else {
            let q = libm::round(w / self.scale) as i64;
            q.clamp(-self.max_level(), self.max_level())
        }
    }
}

/// Symmetric per-tensor quantizer `Ŵ = s · W_int`.
///
/// `b >= 2`: `s = max|W| / (2^(b-1) - 1)`, `W_int = clamp(round(W / s))`.
/// `b = 1`: `s = mean|W|`, `W_int = sign(W)`. An all-zero tensor uses `s = 1`.
pub fn uniform_quantize(w: &Tensor, bits: u32) -> Result<(Tensor, UniformQuantizer)> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Parameter(format!("bit-width {bits} outside 1..=8")));
    }
    let n = w.len().max(1) as f64;
    let max_abs = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 {
        1.0
    } else if bits == 1 {
        w.data().iter().map(|v| v.abs()).sum::<f64>() / n
    } else {
        max_abs / ((1u64 << (bits - 1)) - 1) as f64
    };
    let q = UniformQuantizer { bits, scale };
    let out = if max_abs == 0.0 {
        Tensor::zeros(w.shape())
    } else {
        w.map(|v| q.scale * q.level(v) as f64)
    };
    Ok((out, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool1d(values: &[f64]) -> SubVectorPool {
        SubVectorPool::from_vectors(1, values.to_vec(), "t").unwrap()
    }

    #[test]
    fn kde_at_single_center_is_gaussian_peak() {
        let pool = pool1d(&[0.0]);
        let kde = KdeModel::new(&pool, 1.0).unwrap();
        let f = kde.density(&[0.0]).unwrap();
        assert!((f - 1.0 / libm::sqrt(2.0 * PI)).abs() < 1e-15);
        assert!((f - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn kde_tail_and_symmetry() {
        let pool = pool1d(&[-1.0, 1.0]);
        let kde = KdeModel::new(&pool, 1.0).unwrap();
        assert!(kde.density(&[12.0]).unwrap() < 1e-20);
        assert_eq!(kde.density(&[0.5]).unwrap(), kde.density(&[-0.5]).unwrap());
        assert!(kde.density(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn kde_rejects_bad_bandwidth() {
        let pool = pool1d(&[0.0]);
        assert!(KdeModel::new(&pool, 0.0).is_err());
        assert!(KdeModel::new(&pool, -1.0).is_err());
        assert!(KdeModel::new(&pool, 1.0)
            .unwrap()
            .sample_codebook(0, 1)
            .is_err());
    }

    #[test]
    fn vanishing_bandwidth_reproduces_pool_vectors() {
        let vals: Vec<f64> = (0..40).map(|i| ((i as f32) * 0.137 - 2.0) as f64).collect();
        let pool = SubVectorPool::from_vectors(4, vals, "t").unwrap();
        let kde = KdeModel::new(&pool, 1e-12).unwrap();
        let cb = kde.sample_codebook(64, 5).unwrap();
        for c in 0..cb.k() {
            let near = (0..pool.len())
                .map(|i| sq_dist(cb.codeword(c), pool.vector(i)))
                .fold(f64::INFINITY, f64::min);
            assert!(near.sqrt() < 1e-9);
        }
    }

    #[test]
    fn codebook_sampling_is_deterministic() {
        let pool = pool1d(&[0.1, 0.5, -0.3]);
        let kde = KdeModel::new(&pool, 0.01).unwrap();
        let a = kde.sample_codebook(32, 9).unwrap();
        let b = kde.sample_codebook(32, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, kde.sample_codebook(32, 10).unwrap());
        assert!(a.verify());
    }

    #[test]
    fn pool_counts_and_quota_errors() {
        let a = crate::nn::ZooNet::Mlp2x32.build(1);
        let b = crate::nn::ZooNet::Mlp3x64.build(1);
        let pool = pool_subvectors(&[&a, &b], 4, 100, 3).unwrap();
        assert_eq!(pool.len(), 200);
        assert_eq!(pool.provenance.iter().filter(|&&p| p == 0).count(), 100);
        let small = universal_subvectors(&a, 4).len() / 4;
        let full = pool_subvectors(&[&a], 4, small, 3).unwrap();
        let mut got: Vec<Vec<u64>> = (0..full.len())
            .map(|i| full.vector(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let all = universal_subvectors(&a, 4);
        let mut want: Vec<Vec<u64>> = all
            .chunks(4)
            .map(|c| c.iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(matches!(
            pool_subvectors(&[&a], 4, small + 1, 3),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn default_quota_matches_codebook_scalars() {
        assert_eq!(default_quota(1 << 12, 4), 10 * 4096 * 4);
    }

    #[test]
    fn kmeans_separable_and_exhaustive() {
        let km = kmeans(&[0.0, 10.0], 1, 2, 20, 1, 0).unwrap();
        let mut c = km.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(km.sse, 0.0);

        let pts: Vec<f64> = (0..12).map(|i| (i * i) as f64 * 0.3).collect();
        let km = kmeans(&pts, 2, 6, 20, 1, 4).unwrap();
        assert_eq!(km.sse, 0.0);
        assert!(kmeans(&pts, 2, 7, 20, 1, 4).is_err());
    }

    #[test]
    fn kmeans_sse_never_increases() {
        let pts: Vec<f64> = (0..200)
            .map(|i| libm::sin(i as f64 * 1.7) * (i % 7) as f64)
            .collect();
        let km = kmeans(&pts, 2, 9, 50, 1, 2).unwrap();
        for w in km.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", km.history);
        }
    }

    #[test]
    fn empty_cluster_moves_to_farthest_point() {
        // centroid 1 starts far from everything and captures nothing
        let pts = [0.0, 1.0, 2.0, 10.0];
        let km = lloyd(&pts, 1, vec![1.0, 100.0], 10);
        assert!(km.centroids.contains(&10.0));
        assert_eq!(km.sse, 2.0);
    }

    #[test]
    fn two_bit_uniform_example() {
        let w = Tensor::new(vec![4], vec![-1.0, -0.33, 0.33, 1.0]).unwrap();
        let (wh, q) = uniform_quantize(&w, 2).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(wh.data(), &[-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn on_grid_values_are_fixed_points() {
        let w = Tensor::new(vec![5], vec![-0.25, 0.0, 0.25, 0.25, -0.25]).unwrap();
        let (wh, _) = uniform_quantize(&w, 2).unwrap();
        assert_eq!(wh, w);
    }

    #[test]
    fn zero_tensor_and_bad_bits() {
        let (wh, q) = uniform_quantize(&Tensor::zeros(&[3]), 3).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(wh.data(), &[0.0; 3]);
        assert!(uniform_quantize(&Tensor::zeros(&[3]), 0).is_err());
        assert!(uniform_quantize(&Tensor::zeros(&[3]), 9).is_err());
    }

    #[test]
    fn one_bit_uses_mean_magnitude() {
        let w = Tensor::new(vec![4], vec![-2.0, 1.0, 0.5, -0.5]).unwrap();
        let (wh, q) = uniform_quantize(&w, 1).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(wh.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }
}
