//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mossformer::ablation::{run_variant, Variant};
use mossformer::attention::{
    global_attention_kernel, local_attention_kernel, rope, JointAttention,
};
use mossformer::checkpoint::Checkpoint;
use mossformer::config::{AttentionMode, ModelConfig, Preset, TrainConfig};
use mossformer::conv_module::ProjectionKind;
use mossformer::data::synth_dataset;
use mossformer::graph::Graph;
use mossformer::loss::{pit_loss, si_sdr, si_sdr_eps};
use mossformer::numerics::{NdArray, Tape};
use mossformer::separate::separate_wav;
use mossformer::train::{mean_si_sdri, model_gradient_check, Trainer};
use mossformer::wav::write_wav;
use mossformer::{count_parameters, MossFormer};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray<f64> {
    NdArray::uniform(shape, 1.0, rng)
}

fn local_attention_oracle() -> Outcome {
    let (s, p, d, n) = (8, 8, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random(&[s, d], &mut rng);
    let k = random(&[s, d], &mut rng);
    let w = random(&[s, 2 * n], &mut rng);
    let got = local_attention_kernel(&q, &k, &w, p).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..s {
        for f in 0..2 * n {
            let mut acc = 0.0;
            for j in 0..s {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.at2(i, c) * k.at2(j, c);
                }
                let a = (dot / p as f64).max(0.0);
                acc += a * a * w.at2(j, f);
            }
            worst = worst.max((acc - got.at2(i, f)).abs());
        }
    }
    ensure!(worst < 1e-10, "max abs diff {worst:e}");
    Ok(format!("max abs diff {worst:.2e}"))
}

fn global_attention_associativity() -> Outcome {
    let (s, d, f) = (64, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random(&[s, d], &mut rng);
    let k = random(&[s, d], &mut rng);
    let w = random(&[s, f], &mut rng);
    let fast = global_attention_kernel(&q, &k, &w).map_err(|e| e.to_string())?;
    let beta = 1.0 / s as f64;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..s {
        let scores: Vec<f64> = (0..s)
            .map(|j| beta * (0..d).map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>())
            .collect();
        for c in 0..f {
            let slow: f64 = (0..s).map(|j| scores[j] * w.at2(j, c)).sum();
            num += (slow - fast.at2(i, c)).powi(2);
            den += slow * slow;
        }
    }
    let rel = (num / den).sqrt();
    ensure!(rel < 1e-8, "relative diff {rel:e}");
    Ok(format!("relative diff {rel:.2e}"))
}

fn joint_is_local_plus_global() -> Outcome {
    let cfg = ModelConfig::tiny();
    let (s, n) = (21, cfg.dim);
    for seed in 0..20u64 {
        let mut attn = JointAttention::new(
            "attn",
            n,
            cfg.attn_dim,
            cfg.chunk,
            cfg.dw_kernel,
            0.0,
            ProjectionKind::Conv,
            cfg.norm_eps,
        )
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = mossformer::numerics::ParamStore::<f64>::default();
        attn.init(&mut params, &mut rng)
            .map_err(|e| e.to_string())?;
        for (_, e) in params.iter_mut() {
            for v in e.value_mut().data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = random(&[s, n], &mut rng);
        let v = random(&[s, n], &mut rng);
        let u = random(&[s, n], &mut rng);
        let mut run = |mode| -> Result<(NdArray<f64>, NdArray<f64>), String> {
            attn.mode = mode;
            let mut tape = Tape::inference();
            let mut g = Graph::eval(&mut tape, &params);
            let xs = [&x, &v, &u].map(|a| g.tape.constant(a.clone()));
            let (vo, uo) = attn
                .forward(&mut g, &xs[0], &xs[1], &xs[2])
                .map_err(|e| e.to_string())?;
            Ok((vo.value().clone(), uo.value().clone()))
        };
        let joint = run(AttentionMode::Joint)?;
        let local = run(AttentionMode::LocalOnly)?;
        let global = run(AttentionMode::GlobalOnly)?;
        for (j, (l, g)) in [
            (&joint.0, (&local.0, &global.0)),
            (&joint.1, (&local.1, &global.1)),
        ] {
            let sum = l.zip_map(g, |a, b| a + b);
            ensure!(
                j.data() == sum.data(),
                "seed {seed}: max diff {:e}",
                j.max_abs_diff(&sum)
            );
        }
    }
    Ok("bitwise equal over 20 seeds".into())
}

fn full_model_gradients() -> Outcome {
    let mut cfg = ModelConfig::tiny();
    cfg.dropout = 0.0;
    ensure!(
        (
            cfg.num_blocks,
            cfg.dim,
            cfg.attn_dim,
            cfg.chunk,
            cfg.speakers
        ) == (1, 16, 8, 8, 2),
        "tiny preset drifted"
    );
    let report = model_gradient_check(&cfg, 64, 0, 1e-5).map_err(|e| e.to_string())?;
    ensure!(report.max_rel_error < 1e-4, "{report}");
    Ok(report.to_string())
}

fn preset_shapes() -> Outcome {
    let t = 16_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mixture: Vec<f32> = (0..t).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut notes = Vec::new();
    for p in [Preset::Small, Preset::Medium, Preset::Large] {
        let cfg = ModelConfig::preset(p);
        let model = MossFormer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let params = model.init_params::<f32>(0).map_err(|e| e.to_string())?;
        let (waves, masks) = model
            .separate_with_masks(&params, &mixture)
            .map_err(|e| e.to_string())?;
        let k1 = cfg.enc_kernel;
        let frames = 2 * (t - k1) / k1 + 1;
        ensure!(
            masks.masks.shape() == [cfg.speakers, cfg.dim, frames],
            "{}: masks {:?}, expected [{}, {}, {frames}]",
            p.name(),
            masks.masks.shape(),
            cfg.speakers,
            cfg.dim
        );
        ensure!(
            waves.len() == cfg.speakers,
            "{}: {} outputs",
            p.name(),
            waves.len()
        );
        ensure!(
            waves.iter().all(|w| w.len() == t),
            "{}: output not trimmed to {t}",
            p.name()
        );
        notes.push(format!("{} S={frames}", p.name()));
    }
    Ok(notes.join(", "))
}

fn parameter_counts() -> Outcome {
    let mut notes = Vec::new();
    for (p, reported) in [(Preset::Small, 10.8e6), (Preset::Medium, 25.3e6)] {
        let n = count_parameters(&ModelConfig::preset(p)).map_err(|e| e.to_string())? as f64;
        let dev = n / reported - 1.0;
        ensure!(
            dev.abs() <= 0.25,
            "{}: {n} params, {:+.1}% off",
            p.name(),
            100.0 * dev
        );
        notes.push(format!(
            "{} {:.2}M ({:+.1}%)",
            p.name(),
            n / 1e6,
            100.0 * dev
        ));
    }
    Ok(notes.join(", "))
}

fn si_sdr_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reference: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let est: Vec<f64> = reference
        .iter()
        .map(|r| r + rng.random_range(-0.3..0.3))
        .collect();
    let base = si_sdr_eps(&est, &reference, 0.0).map_err(|e| e.to_string())?;
    for a in [0.1, 2.0, 100.0, -1.0] {
        let scaled: Vec<f64> = est.iter().map(|x| a * x).collect();
        let d = (si_sdr_eps(&scaled, &reference, 0.0).map_err(|e| e.to_string())? - base).abs();
        ensure!(d < 1e-10, "scale {a}: |delta| {d:e}");
    }
    let hand = si_sdr(&[1.0f64, 1.0], &[1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure!(hand == 0.0, "hand case gave {hand} dB");
    for c in [2usize, 3] {
        let refs: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..200).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ests: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| r.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let (loss, perm) = pit_loss(&ests, &refs).map_err(|e| e.to_string())?;
        ensure!(
            perm == (0..c).collect::<Vec<_>>(),
            "C={c}: identity not chosen: {perm:?}"
        );
        for shift in 1..c {
            let rotated: Vec<Vec<f64>> = (0..c).map(|i| ests[(i + shift) % c].clone()).collect();
            let (l2, p2) = pit_loss(&rotated, &refs).map_err(|e| e.to_string())?;
            ensure!(
                l2 == loss,
                "C={c}: loss changed under permutation ({loss} vs {l2})"
            );
            ensure!(
                (0..c).all(|i| (p2[i] + shift) % c == i),
                "C={c}: assignment {p2:?} does not undo shift {shift}"
            );
        }
    }
    Ok(format!(
        "SI-SDR {base:.3} dB invariant to scale and sign; PIT invariant for C=2,3"
    ))
}

fn rope_properties() -> Outcome {
    let (rows, d) = (32, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[rows, d], &mut rng);
    let y = rope(&x, 10_000.0).map_err(|e| e.to_string())?;
    ensure!(y.data()[..d] == x.data()[..d], "position 0 changed");
    let mut norm_err = 0.0f64;
    for r in 0..rows {
        let a: f64 = (0..d).map(|c| x.at2(r, c).powi(2)).sum::<f64>().sqrt();
        let b: f64 = (0..d).map(|c| y.at2(r, c).powi(2)).sum::<f64>().sqrt();
        norm_err = norm_err.max((a - b).abs());
    }
    ensure!(norm_err < 1e-12, "norm changed by {norm_err:e}");
    let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tile = |v: &[f64]| NdArray::from_vec(&[rows, d], v.repeat(rows)).unwrap();
    let (rq, rk) = (
        rope(&tile(&q), 10_000.0).unwrap(),
        rope(&tile(&k), 10_000.0).unwrap(),
    );
    let dot = |m: usize, n: usize| (0..d).map(|c| rq.at2(m, c) * rk.at2(n, c)).sum::<f64>();
    let mut rel_err = 0.0f64;
    for offset in 0..8 {
        let first = dot(offset, 0);
        for n in 1..rows - offset {
            rel_err = rel_err.max((dot(n + offset, n) - first).abs());
        }
    }
    ensure!(
        rel_err < 1e-10,
        "inner products vary by {rel_err:e} at equal offsets"
    );
    Ok(format!("norm err {norm_err:.1e}, offset err {rel_err:.1e}"))
}

fn overfit_smoke() -> Outcome {
    let data = synth_dataset::<f32>(0, 8, 2, 4000, 8000).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 3e-3,
        max_epochs: usize::MAX,
        hold_epochs: usize::MAX,
        max_steps: Some(2000),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(ModelConfig::tiny(), cfg).map_err(|e| e.to_string())?;
    let before = mean_si_sdri(&trainer.model, &trainer.params, &data).map_err(|e| e.to_string())?;
    let report = trainer.fit(&data, &[], |_| {}).map_err(|e| e.to_string())?;
    let after = mean_si_sdri(&trainer.model, &trainer.params, &data).map_err(|e| e.to_string())?;
    let steps = report.step_losses.len();
    ensure!(steps <= 2000, "{steps} steps");
    ensure!(
        after >= 10.0,
        "SI-SDRi {after:.2} dB after {steps} steps (from {before:.2})"
    );
    Ok(format!(
        "SI-SDRi {before:.2} -> {after:.2} dB in {steps} steps"
    ))
}

/// Dense squared-ReLU attention over all `S × S` pairs, one row block at a
/// time so the score matrix is never stored whole.
fn dense_attention(q: &NdArray<f64>, k: &NdArray<f64>, w: &NdArray<f64>) -> NdArray<f64> {
    let (s, d) = (q.shape()[0], q.shape()[1]);
    let f = w.shape()[1];
    let block = 256;
    let mut out = vec![0.0; s * f];
    let mut scores = vec![0.0; block * s];
    for r0 in (0..s).step_by(block) {
        let rows = block.min(s - r0);
        let sc = &mut scores[..rows * s];
        mossformer::numerics::gemm(
            false,
            true,
            rows,
            s,
            d,
            1.0 / s as f64,
            &q.data()[r0 * d..(r0 + rows) * d],
            k.data(),
            0.0,
            sc,
        );
        for v in sc.iter_mut() {
            let r = v.max(0.0);
            *v = r * r;
        }
        mossformer::numerics::gemm(
            false,
            false,
            rows,
            f,
            s,
            1.0,
            sc,
            w.data(),
            0.0,
            &mut out[r0 * f..(r0 + rows) * f],
        );
    }
    NdArray::from_vec(&[s, f], out).unwrap()
}

fn best_of(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn slope(sizes: &[usize], times: &[f64]) -> f64 {
    let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn complexity_scaling() -> Outcome {
    let (p, d, n) = (256, 32, 64);
    let sizes = [2048, 4096, 8192, 16384];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut joint = Vec::new();
    let mut dense = Vec::new();
    for &s in &sizes {
        let q = random(&[s, d], &mut rng);
        let k = random(&[s, d], &mut rng);
        let w = random(&[s, 2 * n], &mut rng);
        joint.push(best_of(5, || {
            let l = local_attention_kernel(&q, &k, &w, p).unwrap();
            let g = global_attention_kernel(&q, &k, &w).unwrap();
            std::hint::black_box(l.zip_map(&g, |a, b| a + b));
        }));
        dense.push(best_of(if s >= 8192 { 1 } else { 3 }, || {
            std::hint::black_box(dense_attention(&q, &k, &w));
        }));
    }
    let (sj, sd) = (slope(&sizes, &joint), slope(&sizes, &dense));
    let ms = |v: &[f64]| {
        v.iter()
            .map(|t| format!("{:.1}", t * 1e3))
            .collect::<Vec<_>>()
            .join("/")
    };
    ensure!(
        sj < 1.3,
        "joint slope {sj:.2} (dense {sd:.2}); joint ms {}, dense ms {}",
        ms(&joint),
        ms(&dense)
    );
    Ok(format!(
        "joint slope {sj:.2} vs dense {sd:.2} (joint ms {}, dense ms {})",
        ms(&joint),
        ms(&dense)
    ))
}

fn ablation_plumbing() -> Outcome {
    let base = ModelConfig::tiny();
    let data = synth_dataset::<f32>(3, 8, 2, 4000, 8000).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 3e-3,
        max_steps: Some(50),
        ..TrainConfig::default()
    };
    let variant = |label: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant {
            label: label.into(),
            cfg: c,
        }
    };
    let variants = [
        variant("local_only", &|c| {
            c.ablation.attention_mode = AttentionMode::LocalOnly
        }),
        variant("global_only", &|c| {
            c.ablation.attention_mode = AttentionMode::GlobalOnly
        }),
        variant("single_gate", &|c| c.ablation.single_gate = true),
        variant("dense_uv", &|c| c.ablation.dense_uv = true),
        variant("dense_qk", &|c| c.ablation.dense_qk = true),
    ];
    let mut results = Vec::new();
    for v in &variants {
        let r = run_variant(v, &cfg, &data).map_err(|e| format!("{}: {e}", v.label))?;
        ensure!(r.steps == 50, "{}: trained {} steps", v.label, r.steps);
        ensure!(
            r.final_loss.is_finite(),
            "{}: loss {}",
            v.label,
            r.final_loss
        );
        results.push(r);
    }
    for (i, a) in results.iter().enumerate() {
        for b in &results[i + 1..] {
            ensure!(
                a.final_loss != b.final_loss,
                "{} and {} share loss {}",
                a.label,
                b.label,
                a.final_loss
            );
        }
    }
    Ok(results
        .iter()
        .map(|r| format!("{} {:.3}", r.label, r.final_loss))
        .collect::<Vec<_>>()
        .join(", "))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synth_dataset::<f32>(4, 2, 2, 1000, 8000).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 3e-3,
        max_steps: Some(5),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(ModelConfig::tiny(), cfg).map_err(|e| e.to_string())?;
    trainer.fit(&data, &[], |_| {}).map_err(|e| e.to_string())?;
    let ckpt = trainer.checkpoint();
    let wav = dir.path().join("fixed.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f32> = (0..3001).map(|_| rng.random_range(-0.4..0.4)).collect();
    write_wav(&wav, &x, 8000).map_err(|e| e.to_string())?;
    let before =
        separate_wav(&ckpt, &wav, &dir.path().join("before")).map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::<f32>::load(&path).map_err(|e| e.to_string())?;
    let after =
        separate_wav(&loaded, &wav, &dir.path().join("after")).map_err(|e| e.to_string())?;
    ensure!(
        before.len() == 2 && after.len() == 2,
        "expected two outputs"
    );
    for (a, b) in before.iter().zip(&after) {
        let (ba, bb) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        ensure!(ba == bb, "{} differs after reload", a.display());
    }
    let model = MossFormer::new(ckpt.model.clone()).map_err(|e| e.to_string())?;
    let raw_a = model
        .separate(&ckpt.params, &x)
        .map_err(|e| e.to_string())?;
    let raw_b = model
        .separate(&loaded.params, &x)
        .map_err(|e| e.to_string())?;
    let bits = |w: &Vec<Vec<f32>>| w.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(
        bits(&raw_a) == bits(&raw_b),
        "float outputs differ after reload"
    );
    Ok("WAV bytes and float outputs bitwise identical".into())
}

fn main() {
    let criteria: [Criterion; 12] = [
        (
            "1 local attention matches naive oracle",
            local_attention_oracle,
            Duration::from_secs(1),
        ),
        (
            "2 global attention associativity",
            global_attention_associativity,
            Duration::from_secs(1),
        ),
        (
            "3 joint = local + global",
            joint_is_local_plus_global,
            Duration::from_secs(1),
        ),
        (
            "4 full-model gradient check",
            full_model_gradients,
            Duration::from_secs(120),
        ),
        (
            "5 preset shapes at T=16000",
            preset_shapes,
            Duration::from_secs(30),
        ),
        (
            "6 parameter counts",
            parameter_counts,
            Duration::from_secs(10),
        ),
        (
            "7 SI-SDR and PIT properties",
            si_sdr_properties,
            Duration::from_secs(1),
        ),
        ("8 RoPE properties", rope_properties, Duration::from_secs(1)),
        (
            "9 overfit smoke test",
            overfit_smoke,
            Duration::from_secs(30 * 60),
        ),
        (
            "10 complexity scaling",
            complexity_scaling,
            Duration::from_secs(300),
        ),
        (
            "11 ablation plumbing",
            ablation_plumbing,
            Duration::from_secs(600),
        ),
        (
            "12 checkpoint round trip",
            checkpoint_round_trip,
            Duration::from_secs(60),
        ),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!(
                "{detail}; took {:.1}s, budget {}s",
                took.as_secs_f64(),
                budget.as_secs()
            )),
            other => other,
        };
        match outcome {
            Ok(detail) => println!(
                "PASS criterion {name}: {detail} [{:.2}s]",
                took.as_secs_f64()
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "FAIL criterion {name}: {detail} [{:.2}s]",
                    took.as_secs_f64()
                );
            }
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
