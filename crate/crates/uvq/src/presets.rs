//! Ablation presets. Every arm of a preset shares the base configuration
//! and seed and differs only in the ablated factor.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uvq_core::assignment::{CandidateMethod, LogitInit};
use uvq_core::codebook::Codebook;
use uvq_core::nn::TinyNet;
use uvq_core::objective::LossWeights;
use uvq_core::pnc::{Construction, PncConfig};
use uvq_core::Result;

use crate::pipeline::{fit_codebook, run_compress, CodebookSpec, ZooMember};
use crate::report::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    NSweep,
    AlphaSweep,
    PncOnoff,
    CodebookSourceSweep,
    InitSweep,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::NSweep,
        Preset::AlphaSweep,
        Preset::PncOnoff,
        Preset::CodebookSourceSweep,
        Preset::InitSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::NSweep => "n-sweep",
            Preset::AlphaSweep => "alpha-sweep",
            Preset::PncOnoff => "pnc-onoff",
            Preset::CodebookSourceSweep => "codebook-source-sweep",
            Preset::InitSweep => "init-sweep",
        }
    }
}

pub const N_SWEEP: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const ALPHA_SWEEP: [f64; 5] = [0.9, 0.95, 0.99, 0.999, 0.9999];

/// Labelled configurations for the presets that keep the codebook fixed.
pub fn arms(preset: Preset, base: &PncConfig, k: usize) -> Vec<(String, PncConfig)> {
    let with = |f: &dyn Fn(&mut PncConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match preset {
        Preset::NSweep => N_SWEEP
            .iter()
            .filter(|&&n| n <= k)
            .map(|&n| (format!("n={n}"), with(&|c| c.candidates = n)))
            .collect(),
        Preset::AlphaSweep => ALPHA_SWEEP
            .iter()
            .map(|&a| (format!("alpha={a}"), with(&|c| c.alpha = a)))
            .collect(),
        Preset::PncOnoff => vec![
            ("full".into(), base.clone()),
            (
                "no-task".into(),
                with(&|c| {
                    c.weights = LossWeights {
                        task: 0.0,
                        ..c.weights
                    }
                }),
            ),
            (
                "no-kd".into(),
                with(&|c| {
                    c.weights = LossWeights {
                        kd: 0.0,
                        ..c.weights
                    }
                }),
            ),
            (
                "no-reg".into(),
                with(&|c| {
                    c.weights = LossWeights {
                        reg: 0.0,
                        ..c.weights
                    }
                }),
            ),
            (
                "no-pnc".into(),
                with(&|c| c.construction = Construction::HardenAtEnd),
            ),
        ],
        Preset::InitSweep => [
            ("random", CandidateMethod::Random, LogitInit::Uniform),
            ("cosine", CandidateMethod::Cosine, LogitInit::Uniform),
            ("euclidean", CandidateMethod::Euclidean, LogitInit::Uniform),
            (
                "euclidean+init",
                CandidateMethod::Euclidean,
                LogitInit::InverseDistance,
            ),
        ]
        .into_iter()
        .map(|(label, m, i)| {
            (
                label.to_string(),
                with(&|c| {
                    c.method = m;
                    c.init = i;
                }),
            )
        })
        .collect(),
        Preset::CodebookSourceSweep => vec![("all".into(), base.clone())],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub float_score: f64,
    pub hard_score: f64,
    pub leftovers: usize,
    pub steps: usize,
    pub weight_mse: f64,
    /// Share of sub-vectors whose final choice is the nearest candidate.
    pub nearest_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetResult {
    pub preset: Preset,
    pub network: String,
    pub rows: Vec<ArmResult>,
}

impl PresetResult {
    pub fn arm_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arm) {
                out.push(r.arm.clone());
            }
        }
        out
    }

    /// Mean hard score of an arm over its seeds.
    pub fn mean_score(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.hard_score)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_leftovers(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.leftovers as f64)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn merge(&mut self, other: PresetResult) {
        self.rows.extend(other.rows);
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(
            &format!("{} on {}", self.preset.name(), self.network),
            &[
                "arm",
                "seed",
                "float",
                "hard",
                "leftovers",
                "steps",
                "weight_mse",
                "nearest_share",
            ],
        );
        for r in &self.rows {
            t.push(vec![
                r.arm.clone().into(),
                r.seed.into(),
                r.float_score.into(),
                r.hard_score.into(),
                r.leftovers.into(),
                r.steps.into(),
                r.weight_mse.into(),
                r.nearest_share.into(),
            ]);
        }
        for arm in self.arm_labels() {
            t.push(vec![
                format!("{arm} (mean)").into(),
                Value::Null,
                Value::Null,
                self.mean_score(&arm).into(),
                self.mean_leftovers(&arm).into(),
                Value::Null,
                Value::Null,
                Value::Null,
            ]);
        }
        t
    }
}

fn run_arm(target: &ZooMember, cb: &Codebook, label: &str, cfg: &PncConfig) -> Result<ArmResult> {
    let out = run_compress(target, cb, cfg)?;
    Ok(ArmResult {
        arm: label.into(),
        seed: cfg.seed,
        float_score: target.float_score,
        hard_score: out.trace.final_score.unwrap_or(f64::NAN),
        leftovers: out.trace.leftovers,
        steps: out.trace.steps.len(),
        weight_mse: out.trace.weight_mse,
        nearest_share: out.trace.histogram.first().copied().unwrap_or(0.0),
    })
}

/// Cumulative source subsets `1`, `1+2`, ... over `sources` in order.
pub fn cumulative_sources(sources: &[&TinyNet]) -> Vec<(String, Vec<usize>)> {
    (1..=sources.len())
        .map(|m| {
            let label = (1..=m).map(|i| i.to_string()).collect::<Vec<_>>().join("+");
            (label, (0..m).collect())
        })
        .collect()
}

/// Runs every arm of `preset` on `target`. The codebook-source sweep refits
/// the codebook from cumulative subsets of `sources` with `spec`; the other
/// presets use `universal`.
pub fn run_preset(
    preset: Preset,
    target: &ZooMember,
    universal: &Codebook,
    sources: &[&TinyNet],
    spec: &CodebookSpec,
    base: &PncConfig,
) -> Result<PresetResult> {
    let mut rows = Vec::new();
    if preset == Preset::CodebookSourceSweep {
        for (label, idx) in cumulative_sources(sources) {
            let nets: Vec<&TinyNet> = idx.iter().map(|&i| sources[i]).collect();
            let cb = fit_codebook(&nets, spec)?.codebook;
            rows.push(run_arm(target, &cb, &label, base)?);
        }
    } else {
        for (label, cfg) in arms(preset, base, universal.k()) {
            rows.push(run_arm(target, universal, &label, &cfg)?);
        }
    }
    Ok(PresetResult {
        preset,
        network: target.net.name.clone(),
        rows,
    })
}
