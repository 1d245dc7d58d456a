//! Convolutional encoder (`ReLU(Conv1D(x))`), per-speaker mask application,
//! and the transposed-convolution decoder sharing the encoder's kernel size
//! and stride (`K1`, `K1/2`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masking_net::MaskSet;
use crate::numerics::{ops, Activation, NdArray, ParamStore, Scalar, Var};

pub const ENC_WEIGHT: &str = "encoder.weight";
pub const ENC_BIAS: &str = "encoder.bias";
pub const DEC_WEIGHT: &str = "decoder.weight";

/// Raw waveforms, `B × 1 × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBatch<T> {
    pub samples: NdArray<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> SignalBatch<T> {
    pub fn from_signals(signals: &[Vec<T>], sample_rate: u32) -> Result<Self> {
        let len = signals.first().map_or(0, Vec::len);
        if signals.iter().any(|s| s.len() != len) {
            return Err(Error::Dimension {
                op: "SignalBatch",
                detail: "signals differ in length".into(),
            });
        }
        let data = signals.iter().flatten().copied().collect();
        Ok(Self {
            samples: NdArray::from_vec(&[signals.len(), 1, len], data)?,
            sample_rate,
        })
    }

    pub fn batch(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn signal(&self, b: usize) -> &[T] {
        let t = self.len();
        &self.samples.data()[b * t..(b + 1) * t]
    }
}

/// Encoded (or masked) representation, `N × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub values: NdArray<T>,
    pub frame_stride_samples: usize,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDecoder {
    pub dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl EncoderDecoder {
    pub fn new(dim: usize, kernel: usize) -> Result<Self> {
        if kernel < 2 || !kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder kernel {kernel} must be even"
            )));
        }
        Ok(Self {
            dim,
            kernel,
            stride: kernel / 2,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim * self.kernel + self.dim
    }

    /// Weights uniform in ±1/√K1, encoder bias zero. The decoder has no bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (self.kernel as f64).sqrt();
        let shape = [self.dim, 1, self.kernel];
        store.insert(ENC_WEIGHT, NdArray::uniform(&shape, bound, rng), true)?;
        store.insert(ENC_BIAS, NdArray::zeros(&[self.dim]), true)?;
        store.insert(DEC_WEIGHT, NdArray::uniform(&shape, bound, rng), true)
    }

    /// Smallest length `≥ len` with `(len − K1)` divisible by the stride.
    pub fn padded_len(&self, len: usize) -> Result<usize> {
        if len < self.kernel {
            return Err(Error::InputTooShort {
                len,
                min: self.kernel,
            });
        }
        let rem = (len - self.kernel) % self.stride;
        Ok(if rem == 0 {
            len
        } else {
            len + self.stride - rem
        })
    }

    /// `S = 2(T − K1)/K1 + 1` for a stride-compatible length.
    pub fn frames(&self, padded_len: usize) -> usize {
        2 * (padded_len - self.kernel) / self.kernel + 1
    }

    /// Decoder output length `(S − 1)·K1/2 + K1`.
    pub fn decoded_len(&self, frames: usize) -> usize {
        (frames - 1) * self.stride + self.kernel
    }

    pub fn pad<T: Scalar>(&self, signal: &[T]) -> Result<Vec<T>> {
        let padded = self.padded_len(signal.len())?;
        let mut x = signal.to_vec();
        x.resize(padded, T::zero());
        Ok(x)
    }

    /// Encodes a `1 × T` signal (already padded) into `N × S`.
    pub fn encode_var<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(ENC_WEIGHT)?;
        let b = g.param(ENC_BIAS)?;
        let pre = g.tape.conv1d(x, &w, Some(&b), self.stride)?;
        Ok(g.tape.act(&pre, Activation::Relu))
    }

    pub fn decode_var<T: Scalar>(&self, g: &mut Graph<T>, features: &Var<T>) -> Result<Var<T>> {
        let w = g.param(DEC_WEIGHT)?;
        g.tape.transposed_conv1d(features, &w, self.stride)
    }

    /// Encodes every signal of a batch, right-padding each to the next
    /// stride-compatible length.
    pub fn encode<T: Scalar>(
        &self,
        x: &SignalBatch<T>,
        params: &ParamStore<T>,
    ) -> Result<Vec<FeatureSequence<T>>> {
        let w = params.value(ENC_WEIGHT)?;
        let b = params.value(ENC_BIAS)?;
        (0..x.batch())
            .map(|i| {
                let padded = self.pad(x.signal(i))?;
                let n = padded.len();
                let sig = NdArray::from_vec(&[1, n], padded)?;
                let pre = ops::conv1d(&sig, w, Some(b), self.stride)?;
                Ok(FeatureSequence {
                    values: Activation::Relu.forward(&pre),
                    frame_stride_samples: self.stride,
                })
            })
            .collect()
    }

    /// Decodes each feature sequence to a waveform of `(S − 1)·K1/2 + K1`
    /// samples; callers trim to the original length.
    pub fn decode<T: Scalar>(
        &self,
        features: &[FeatureSequence<T>],
        params: &ParamStore<T>,
        sample_rate: u32,
    ) -> Result<SignalBatch<T>> {
        let w = params.value(DEC_WEIGHT)?;
        let outs = features
            .iter()
            .map(|f| Ok(ops::transposed_conv1d(&f.values, w, self.stride)?.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        SignalBatch::from_signals(&outs, sample_rate)
    }
}

/// `M_i ⊙ X′` for speaker `i`.
pub fn apply_mask<T: Scalar>(
    encoded: &FeatureSequence<T>,
    masks: &MaskSet<T>,
    speaker: usize,
) -> Result<FeatureSequence<T>> {
    let m = masks.speaker(speaker)?;
    m.same_shape(&encoded.values, "apply_mask")?;
    Ok(FeatureSequence {
        values: m.zip_map(&encoded.values, |a, b| a * b),
        frame_stride_samples: encoded.frame_stride_samples,
    })
}
