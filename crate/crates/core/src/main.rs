//! Command-line front end: train, separate, eval, ablate, gradcheck,
//! paramcount.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mossformer::ablation::{run_ablation, Budget, Suite};
use mossformer::checkpoint::{peek_width, Checkpoint};
use mossformer::config::resolve_configs;
use mossformer::data::{split_validation, synth_dataset};
use mossformer::numerics::Scalar;
use mossformer::separate::{check_compatible, separate_wav};
use mossformer::train::{mean_loss, mean_si_sdri, model_gradient_check, Trainer};
use mossformer::{Error, ModelConfig, MossFormer, Preset, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "mossformer", version, about = "Monaural speech separation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.set.is_empty()
    }

    fn resolve(&self, base: ModelConfig) -> Result<(ModelConfig, TrainConfig)> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| Error::File {
                path: p.clone(),
                source,
            })?),
            None => None,
        };
        resolve_configs(base, text.as_deref(), &self.set)
    }
}

#[derive(Args, Clone, Copy)]
struct DataArgs {
    /// Number of synthetic mixtures.
    #[arg(long, default_value_t = 64)]
    mixtures: usize,
    /// Samples per mixture.
    #[arg(long, default_value_t = 4000)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic mixtures; saves the best checkpoint to --out and
    /// the final state to <out>.last.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "mossformer.ckpt")]
        out: PathBuf,
        /// Continue from a checkpoint (its model config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Separate a mono 8 kHz 16-bit WAV into <stem>_spk<i>.wav files.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// When given, the checkpoint must match this model config.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean SI-SDRi and loss of a checkpoint on a synthetic set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        mixtures: usize,
        #[arg(long, default_value_t = 4000)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
    },
    /// Train every variant of an ablation suite under a shared step budget.
    Ablate {
        /// attention_mode, gating, convm_vs_dense, phi, K2, D or P.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        mixtures: usize,
        #[arg(long, default_value_t = 4000)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Compare backprop gradients with central differences for every
    /// trainable scalar of a (small) model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Parameter counts with a per-stage breakdown.
    Paramcount {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            cfg,
            data,
            out,
            resume,
            precision,
        } => {
            let (model_cfg, train_cfg) = cfg.resolve(ModelConfig::tiny())?;
            match precision {
                Precision::F32 => train::<f32>(model_cfg, train_cfg, data, &out, resume.as_deref()),
                Precision::F64 => train::<f64>(model_cfg, train_cfg, data, &out, resume.as_deref()),
            }?;
        }
        Command::Separate {
            checkpoint,
            input,
            out_dir,
            cfg,
        } => {
            let expected = if cfg.is_empty() {
                None
            } else {
                Some(cfg.resolve(ModelConfig::tiny())?.0)
            };
            let outs = match peek_width(&checkpoint)? {
                4 => separate::<f32>(&checkpoint, &input, &out_dir, expected.as_ref()),
                _ => separate::<f64>(&checkpoint, &input, &out_dir, expected.as_ref()),
            }?;
            for p in outs {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            mixtures,
            len,
            data_seed,
        } => {
            let (si_sdri, loss) = match peek_width(&checkpoint)? {
                4 => eval::<f32>(&checkpoint, mixtures, len, data_seed),
                _ => eval::<f64>(&checkpoint, mixtures, len, data_seed),
            }?;
            println!("mixtures={mixtures} si_sdri_db={si_sdri:.4} loss={loss:.6}");
        }
        Command::Ablate {
            suite,
            cfg,
            steps,
            mixtures,
            len,
            data_seed,
            csv,
            precision,
        } => {
            let suite: Suite = suite.parse()?;
            let (base, train_cfg) = cfg.resolve(ModelConfig::tiny())?;
            let budget = Budget {
                steps,
                mixtures,
                len,
                data_seed,
            };
            let progress = |r: &mossformer::ablation::VariantResult| {
                eprintln!("{}: {:.2} dB after {} steps", r.label, r.si_sdri, r.steps)
            };
            let report = match precision {
                Precision::F32 => run_ablation::<f32>(suite, &base, &train_cfg, budget, progress),
                Precision::F64 => run_ablation::<f64>(suite, &base, &train_cfg, budget, progress),
            }?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())
                    .map_err(|source| Error::File { path, source })?;
            }
        }
        Command::Gradcheck {
            cfg,
            len,
            h,
            seed,
            tolerance,
        } => {
            let (model_cfg, _) = cfg.resolve(ModelConfig::tiny())?;
            let start = Instant::now();
            let report = model_gradient_check(&model_cfg, len, seed, h)?;
            let ok = report.max_rel_error < tolerance;
            println!(
                "{} {report} in {:.1}s",
                if ok { "PASS" } else { "FAIL" },
                start.elapsed().as_secs_f64()
            );
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Paramcount { cfg } => {
            let cfgs = if cfg.is_empty() {
                [Preset::Small, Preset::Medium, Preset::Large, Preset::Tiny]
                    .map(ModelConfig::preset)
                    .to_vec()
            } else {
                vec![cfg.resolve(ModelConfig::tiny())?.0]
            };
            print!("{}", param_table(&cfgs)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train<T: Scalar>(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: DataArgs,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::<T>::load(p)?, train_cfg)?,
        None => Trainer::<T>::new(model_cfg, train_cfg)?,
    };
    let cfg = &trainer.model.cfg;
    let set = synth_dataset::<T>(
        data.data_seed,
        data.mixtures,
        cfg.speakers,
        data.len,
        cfg.sample_rate,
    )?;
    let (tr, val) = split_validation(&set);
    eprintln!(
        "training {} parameters on {} mixtures ({} held out)",
        trainer.model.num_params(),
        tr.len(),
        val.len()
    );
    let report = trainer.fit(tr, val, |e| println!("{e}"))?;
    report.best.save(out)?;
    let mut last = out.as_os_str().to_owned();
    last.push(".last");
    report.last.save(Path::new(&last))?;
    eprintln!(
        "best val_loss={:.6} saved to {}",
        report.best_val_loss,
        out.display()
    );
    Ok(())
}

fn separate<T: Scalar>(
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    if let Some(e) = expected {
        check_compatible(e, &ckpt.model)?;
    }
    separate_wav(&ckpt, input, out_dir)
}

fn eval<T: Scalar>(
    checkpoint: &Path,
    mixtures: usize,
    len: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let model = MossFormer::new(ckpt.model.clone())?;
    let data = synth_dataset::<T>(
        seed,
        mixtures,
        model.cfg.speakers,
        len,
        model.cfg.sample_rate,
    )?;
    Ok((
        mean_si_sdri(&model, &ckpt.params, &data)?,
        mean_loss(&model, &ckpt.params, &data)?,
    ))
}

fn param_table(cfgs: &[ModelConfig]) -> Result<String> {
    let mut rows = vec![[
        "preset".to_owned(),
        "total".to_owned(),
        "encoder+decoder".to_owned(),
        "blocks".to_owned(),
        "per block".to_owned(),
        "mask head".to_owned(),
    ]];
    for cfg in cfgs {
        let m = MossFormer::new(cfg.clone())?;
        let blocks = m.masknet.block_params();
        rows.push([
            cfg.preset.name().to_owned(),
            m.num_params().to_string(),
            m.codec.num_params().to_string(),
            blocks.to_string(),
            (blocks / cfg.num_blocks.max(1)).to_string(),
            (m.masknet.num_params() - blocks).to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &rows {
        let line: Vec<String> = r
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
        s.push_str(&line.join("  "));
        s.push('\n');
    }
    Ok(s)
}
