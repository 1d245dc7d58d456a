//! Synthetic multi-speaker mixtures for desk-scale training.
//!
//! Each source is a harmonic tone with a random fundamental, random
//! per-harmonic amplitudes and phases, a piecewise-linear amplitude envelope,
//! and a white noise floor 30 dB below the tone. Speaker `i` draws its
//! fundamental from the `i`-th of `C` geometrically spaced bands, so
//! speakers in one mixture never share a fundamental.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Lowest and highest fundamental over all bands, in Hz.
const F0_RANGE: (f64, f64) = (100.0, 800.0);
const HARMONICS: usize = 4;
const ENVELOPE_KNOT_SECONDS: f64 = 0.05;
const NOISE_FLOOR_DB: f64 = -30.0;
const BASE_RMS: f64 = 0.1;
const GAIN_SPREAD_DB: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture<T> {
    pub mixture: Vec<T>,
    pub sources: Vec<Vec<T>>,
    pub fundamentals: Vec<f64>,
}

/// Frequency band `(lo, hi)` for speaker `i` of `c`.
pub fn speaker_band(i: usize, c: usize) -> (f64, f64) {
    let (lo, hi) = F0_RANGE;
    let ratio = (hi / lo).powf(1.0 / c as f64);
    (lo * ratio.powi(i as i32), lo * ratio.powi(i as i32 + 1))
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn source<R: Rng>(rng: &mut R, band: (f64, f64), len: usize, sr: f64) -> (Vec<f64>, f64) {
    // Stay inside the middle 80% of the band (log scale).
    let u = rng.random_range(0.1..0.9);
    let f0 = band.0 * (band.1 / band.0).powf(u);
    let mut tone = vec![0.0; len];
    for h in 1..=HARMONICS {
        let f = f0 * h as f64;
        if f >= 0.45 * sr {
            break;
        }
        let amp = rng.random_range(0.3..1.0) / h as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * f / sr;
        for (t, v) in tone.iter_mut().enumerate() {
            *v += amp * (w * t as f64 + phase).sin();
        }
    }
    let spacing = ((ENVELOPE_KNOT_SECONDS * sr) as usize).max(1);
    let knots: Vec<f64> = (0..len / spacing + 2)
        .map(|_| rng.random_range(0.2..1.0))
        .collect();
    for (t, v) in tone.iter_mut().enumerate() {
        let (k, frac) = (t / spacing, (t % spacing) as f64 / spacing as f64);
        *v *= knots[k] * (1.0 - frac) + knots[k + 1] * frac;
    }
    let gain_db = rng.random_range(-GAIN_SPREAD_DB..GAIN_SPREAD_DB);
    let scale = BASE_RMS * 10f64.powf(gain_db / 20.0) / rms(&tone).max(1e-12);
    tone.iter_mut().for_each(|v| *v *= scale);
    // Uniform noise on [−a, a] has RMS a/√3.
    let noise_amp = rms(&tone) * 10f64.powf(NOISE_FLOOR_DB / 20.0) * 3f64.sqrt();
    for v in &mut tone {
        *v += rng.random_range(-noise_amp..noise_amp);
    }
    (tone, f0)
}

/// `count` mixtures of `speakers` sources, `len` samples each. The mixture is
/// the exact sum of the sources in the target precision.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    count: usize,
    speakers: usize,
    len: usize,
    sample_rate: u32,
) -> Result<Vec<Mixture<T>>> {
    if !(2..=3).contains(&speakers) {
        return Err(Error::Config(format!(
            "synthetic mixtures need 2 or 3 speakers, got {speakers}"
        )));
    }
    if len == 0 {
        return Err(Error::Config(
            "synthetic mixtures need at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(sample_rate);
    Ok((0..count)
        .map(|_| {
            let (sources, fundamentals): (Vec<Vec<T>>, Vec<f64>) = (0..speakers)
                .map(|i| {
                    let (wave, f0) = source(&mut rng, speaker_band(i, speakers), len, sr);
                    (wave.into_iter().map(T::of).collect(), f0)
                })
                .unzip();
            let mixture = (0..len)
                .map(|t| sources.iter().fold(T::zero(), |acc, s| acc + s[t]))
                .collect();
            Mixture {
                mixture,
                sources,
                fundamentals,
            }
        })
        .collect())
}

/// Splits off the last eighth of `data` (rounded down) for validation.
pub fn split_validation<T>(data: &[T]) -> (&[T], &[T]) {
    let n_val = data.len() / 8;
    data.split_at(data.len() - n_val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_exact_sum() {
        let data = synth_dataset::<f32>(1, 4, 3, 500, 8000).unwrap();
        for m in &data {
            for t in 0..500 {
                let sum = m.sources[0][t] + m.sources[1][t] + m.sources[2][t];
                assert_eq!(m.mixture[t] - sum, 0.0);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_dataset::<f64>(7, 3, 2, 300, 8000).unwrap();
        let b = synth_dataset::<f64>(7, 3, 2, 300, 8000).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset::<f64>(8, 3, 2, 300, 8000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fundamentals_stay_in_disjoint_bands() {
        let data = synth_dataset::<f64>(3, 20, 2, 100, 8000).unwrap();
        for m in &data {
            for (i, &f) in m.fundamentals.iter().enumerate() {
                let (lo, hi) = speaker_band(i, 2);
                assert!(lo < f && f < hi, "speaker {i}: {f}");
            }
        }
    }

    #[test]
    fn source_levels_stay_near_base_rms() {
        let data = synth_dataset::<f64>(4, 10, 2, 4000, 8000).unwrap();
        for m in &data {
            for s in &m.sources {
                let r = rms(s);
                assert!((0.05..0.2).contains(&r), "rms {r}");
            }
        }
    }

    #[test]
    fn rejects_unsupported_speaker_counts() {
        assert!(synth_dataset::<f64>(0, 1, 1, 10, 8000).is_err());
        assert!(synth_dataset::<f64>(0, 1, 4, 10, 8000).is_err());
    }

    #[test]
    fn validation_split_takes_last_eighth() {
        let v: Vec<usize> = (0..16).collect();
        let (train, val) = split_validation(&v);
        assert_eq!((train.len(), val), (14, &[14, 15][..]));
        let (train, val) = split_validation(&v[..5]);
        assert_eq!((train.len(), val.len()), (5, 0));
    }
}
