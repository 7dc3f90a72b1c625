//! Seeded synthetic datasets for the toy zoo.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::ZooNet;
use crate::{rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// One-hot targets, scored by argmax accuracy.
    Classification { classes: usize },
    /// Real targets, scored by R².
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Calib,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        Split {
            inputs: self.inputs.gather_rows(idx),
            targets: self.targets.gather_rows(idx),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub train: Split,
    pub calib: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Calib => &self.calib,
            SplitTag::Test => &self.test,
        }
    }

    /// The dataset each zoo network is trained and compressed on.
    pub fn for_net(net: ZooNet, seed: u64) -> Dataset {
        match net {
            ZooNet::Mlp2x32 => two_spirals(seed, [1024, 512, 4000], 1.5, 0.04),
            ZooNet::Mlp3x64 => mixture_blobs(seed, [2048, 512, 2048]),
            ZooNet::CnnSmall => line_patterns(seed, [1024, 256, 1024]),
            ZooNet::AeSmall => sine_signals(seed, [1024, 256, 1024]),
        }
    }
}

fn one_hot(label: usize, classes: usize) -> impl Iterator<Item = f64> {
    (0..classes).map(move |c| if c == label { 1.0 } else { 0.0 })
}

fn build(
    name: &str,
    task: Task,
    seed: u64,
    sizes: [usize; 3],
    in_shape: &[usize],
    out_len: usize,
    mut sample: impl FnMut(&mut rng::Rng, &mut Vec<f64>, &mut Vec<f64>),
) -> Dataset {
    let mut splits = sizes.iter().enumerate().map(|(s, &n)| {
        let mut r = rng::seeded(rng::derive(seed, 0x100 + s as u64));
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..n {
            sample(&mut r, &mut xs, &mut ys);
        }
        let mut xshape = vec![n];
        xshape.extend_from_slice(in_shape);
        Split {
            inputs: Tensor::from_parts(xshape, xs),
            targets: Tensor::from_parts(vec![n, out_len], ys),
        }
    });
    Dataset {
        name: name.into(),
        task,
        train: splits.next().unwrap(),
        calib: splits.next().unwrap(),
        test: splits.next().unwrap(),
    }
}

/// Two interleaved Archimedean spirals, one per class.
pub fn two_spirals(seed: u64, sizes: [usize; 3], turns: f64, noise: f64) -> Dataset {
    let normal = Normal::new(0.0, noise).unwrap();
    build(
        "two-spirals",
        Task::Classification { classes: 2 },
        seed,
        sizes,
        &[2],
        2,
        |r, xs, ys| {
            let label = r.random_range(0..2usize);
            let u: f64 = r.random_range(0.0..1.0);
            let t = libm::sqrt(u) * turns * 2.0 * PI;
            let rad = t / (turns * 2.0 * PI);
            let phase = if label == 0 { 0.0 } else { PI };
            xs.push(rad * libm::cos(t + phase) + normal.sample(r));
            xs.push(rad * libm::sin(t + phase) + normal.sample(r));
            ys.extend(one_hot(label, 2));
        },
    )
}

/// Four classes in 8-D, each a mixture of three Gaussian clusters.
pub fn mixture_blobs(seed: u64, sizes: [usize; 3]) -> Dataset {
    let mut cr = rng::seeded(rng::derive(seed, 0x1b));
    let centers: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..8).map(|_| StandardNormal.sample(&mut cr)).collect())
        .collect();
    let spread = Normal::new(0.0, 0.55).unwrap();
    build(
        "mixture-blobs",
        Task::Classification { classes: 4 },
        seed,
        sizes,
        &[8],
        4,
        |r, xs, ys| {
            let c = r.random_range(0..12usize);
            xs.extend(centers[c].iter().map(|m| m + spread.sample(r)));
            ys.extend(one_hot(c % 4, 4));
        },
    )
}

/// 8×8 images holding one noisy line: horizontal, vertical, diagonal or
/// anti-diagonal.
pub fn line_patterns(seed: u64, sizes: [usize; 3]) -> Dataset {
    let noise = Normal::new(0.0, 0.35).unwrap();
    build(
        "line-patterns",
        Task::Classification { classes: 4 },
        seed,
        sizes,
        &[1, 8, 8],
        4,
        |r, xs, ys| {
            let label = r.random_range(0..4usize);
            let off = r.random_range(0..8i64) as isize - 4;
            let mut img = [0.0f64; 64];
            for (i, px) in img.iter_mut().enumerate() {
                let (y, x) = ((i / 8) as isize, (i % 8) as isize);
                let on = match label {
                    0 => y == off + 4,
                    1 => x == off + 4,
                    2 => x - y == off,
                    _ => x + y == 7 + off,
                };
                *px = if on { 1.0 } else { 0.0 } + noise.sample(r);
            }
            xs.extend_from_slice(&img);
            ys.extend(one_hot(label, 4));
        },
    )
}

/// Noisy 16-sample sinusoids; the target is the clean signal.
pub fn sine_signals(seed: u64, sizes: [usize; 3]) -> Dataset {
    let noise = Normal::new(0.0, 0.1).unwrap();
    build(
        "sine-signals",
        Task::Regression,
        seed,
        sizes,
        &[16],
        16,
        |r, xs, ys| {
            let a = r.random_range(0.5..1.5);
            let f = r.random_range(0.5..2.0);
            let ph = r.random_range(0.0..2.0 * PI);
            let c = r.random_range(-0.5..0.5);
            for j in 0..16 {
                let clean = a * libm::sin(2.0 * PI * f * j as f64 / 16.0 + ph) + c;
                ys.push(clean);
                xs.push(clean + noise.sample(r));
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_gives_identical_bytes() {
        for z in ZooNet::ALL {
            let a = Dataset::for_net(z, 7);
            let b = Dataset::for_net(z, 7);
            let bits = |d: &Dataset| -> Vec<u64> {
                d.train
                    .inputs
                    .data()
                    .iter()
                    .chain(d.test.targets.data())
                    .map(|v| v.to_bits())
                    .collect()
            };
            assert_eq!(bits(&a), bits(&b));
            assert_ne!(a.train.inputs, Dataset::for_net(z, 8).train.inputs);
        }
    }

    #[test]
    fn splits_have_matching_shapes() {
        let d = Dataset::for_net(ZooNet::CnnSmall, 0);
        assert_eq!(d.train.inputs.shape(), &[1024, 1, 8, 8]);
        assert_eq!(d.calib.targets.shape(), &[256, 4]);
        assert_eq!(d.test.len(), 1024);
    }
}
