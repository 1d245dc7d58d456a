//! Ablation runner: trains each variant of a suite on shared data with a
//! shared seed and reports training SI-SDRi per variant.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::{AttentionMode, ModelConfig, TrainConfig};
use crate::data::{synth_dataset, Mixture};
use crate::error::{Error, Result};
use crate::model::MossFormer;
use crate::numerics::{Activation, Scalar};
use crate::train::{mean_si_sdri, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    AttentionMode,
    Gating,
    ConvmVsDense,
    Phi,
    K2,
    D,
    P,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::AttentionMode,
        Suite::Gating,
        Suite::ConvmVsDense,
        Suite::Phi,
        Suite::K2,
        Suite::D,
        Suite::P,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::AttentionMode => "attention_mode",
            Suite::Gating => "gating",
            Suite::ConvmVsDense => "convm_vs_dense",
            Suite::Phi => "phi",
            Suite::K2 => "K2",
            Suite::D => "D",
            Suite::P => "P",
        }
    }

    /// Sweeps over one setting print variants as columns; structural
    /// suites print them as rows.
    pub fn columnar(self) -> bool {
        matches!(self, Suite::Phi | Suite::K2 | Suite::D | Suite::P)
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown ablation suite `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub cfg: ModelConfig,
}

fn odd(v: f64) -> usize {
    let r = v.round().max(1.0) as usize;
    if r.is_multiple_of(2) {
        r + 1
    } else {
        r
    }
}

fn even(v: f64) -> usize {
    let r = v.round().max(2.0) as usize;
    r + r % 2
}

/// The variants of `suite` derived from `base`.
pub fn variants(suite: Suite, base: &ModelConfig) -> Vec<Variant> {
    let with = |label: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant {
            label: label.to_owned(),
            cfg,
        }
    };
    match suite {
        Suite::AttentionMode => AttentionMode::ALL
            .iter()
            .map(|&m| with(m.name(), &|c| c.ablation.attention_mode = m))
            .collect(),
        Suite::Gating => vec![
            with("triple_gate", &|c| c.ablation.single_gate = false),
            with("single_gate", &|c| c.ablation.single_gate = true),
        ],
        Suite::ConvmVsDense => vec![
            with("convm", &|c| {
                c.ablation.dense_uv = false;
                c.ablation.dense_qk = false;
            }),
            with("dense_uv", &|c| c.ablation.dense_uv = true),
            with("dense_qk", &|c| c.ablation.dense_qk = true),
            with("dense_uv_qk", &|c| {
                c.ablation.dense_uv = true;
                c.ablation.dense_qk = true;
            }),
        ],
        Suite::Phi => [
            ("ReLU", Activation::Relu),
            ("GELU", Activation::Gelu),
            ("Swish", Activation::Swish),
            ("Bilinear", Activation::Identity),
            ("Sigmoid", Activation::Sigmoid),
        ]
        .iter()
        .map(|&(l, a)| with(l, &|c| c.gate = a))
        .collect(),
        Suite::K2 => {
            let k = base.dw_kernel as f64;
            [odd(k * 21.0 / 31.0), base.dw_kernel, odd(k * 65.0 / 31.0)]
                .iter()
                .map(|&v| with(&format!("K2={v}"), &|c| c.dw_kernel = v))
                .collect()
        }
        Suite::D => {
            let d = base.attn_dim as f64;
            [even(d / 2.0), base.attn_dim, even(d * 2.0)]
                .iter()
                .map(|&v| with(&format!("D={v}"), &|c| c.attn_dim = v))
                .collect()
        }
        Suite::P => {
            let p = base.chunk as f64;
            [
                (p / 2.0).round().max(1.0) as usize,
                base.chunk,
                (p * 1.5).round() as usize,
            ]
            .iter()
            .map(|&v| with(&format!("P={v}"), &|c| c.chunk = v))
            .collect()
        }
    }
}

/// Training budget shared by every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub steps: usize,
    pub mixtures: usize,
    pub len: usize,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub label: String,
    pub params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub si_sdri: f64,
    pub step_losses: Vec<f64>,
}

/// Trains one variant for `train_cfg.max_steps` steps on `data`.
pub fn run_variant<T: Scalar>(
    variant: &Variant,
    train_cfg: &TrainConfig,
    data: &[Mixture<T>],
) -> Result<VariantResult> {
    let mut cfg = train_cfg.clone();
    cfg.max_epochs = usize::MAX;
    cfg.hold_epochs = usize::MAX;
    if cfg.max_steps.is_none() {
        return Err(Error::Config("an ablation run needs a step budget".into()));
    }
    let mut trainer = Trainer::<T>::new(variant.cfg.clone(), cfg)?;
    let report = trainer.fit(data, &[], |_| {})?;
    Ok(VariantResult {
        label: variant.label.clone(),
        params: trainer.model.num_params(),
        steps: report.step_losses.len(),
        final_loss: *report.step_losses.last().unwrap_or(&f64::NAN),
        si_sdri: mean_si_sdri(&trainer.model, &trainer.params, data)?,
        step_losses: report.step_losses,
    })
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<VariantResult>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,variant,params,steps,final_loss,train_si_sdri_db\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.4}",
                self.suite.name(),
                r.label,
                r.params,
                r.steps,
                r.final_loss,
                r.si_sdri
            );
        }
        s
    }

    /// Column-aligned text table.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    format!("{:.2}", r.si_sdri),
                    r.params.to_string(),
                    r.steps.to_string(),
                    format!("{:.4}", r.final_loss),
                ]
            })
            .collect();
        let heads = ["variant", "SI-SDRi (dB)", "params", "steps", "final loss"];
        let grid: Vec<Vec<String>> = if self.suite.columnar() {
            (0..5)
                .map(|i| {
                    std::iter::once(heads[i].to_owned())
                        .chain(cells.iter().map(|c| c[i].clone()))
                        .collect()
                })
                .collect()
        } else {
            std::iter::once(heads.iter().map(|h| (*h).to_owned()).collect())
                .chain(cells.iter().map(|c| c.to_vec()))
                .collect()
        };
        let ncol = grid[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| {
                grid.iter()
                    .map(|row| row[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = format!("ablation suite: {}\n", self.suite.name());
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| {
                    if j == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// Trains every variant of `suite` with the same data and seed.
pub fn run_ablation<T: Scalar>(
    suite: Suite,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    budget: Budget,
    mut progress: impl FnMut(&VariantResult),
) -> Result<AblationReport> {
    let data = synth_dataset::<T>(
        budget.data_seed,
        budget.mixtures,
        base.speakers,
        budget.len,
        base.sample_rate,
    )?;
    let cfg = TrainConfig {
        max_steps: Some(budget.steps),
        ..train_cfg.clone()
    };
    let mut rows = Vec::new();
    for v in variants(suite, base) {
        MossFormer::new(v.cfg.clone())?;
        let r = run_variant(&v, &cfg, &data)?;
        progress(&r);
        rows.push(r);
    }
    Ok(AblationReport { suite, rows })
}
