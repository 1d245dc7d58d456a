//! The full separator: encoder → masking net → per-speaker masked decode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder_decoder::EncoderDecoder;
use crate::error::Result;
use crate::graph::Graph;
use crate::masking_net::{MaskSet, MaskingNet};
use crate::numerics::{NdArray, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct MossFormer {
    pub cfg: ModelConfig,
    pub codec: EncoderDecoder,
    pub masknet: MaskingNet,
}

/// Forward outputs kept on the tape.
pub struct Separation<T: Scalar> {
    /// One `1 × T` estimate per speaker, trimmed to the input length.
    pub estimates: Vec<Var<T>>,
    /// Time-major masks, `S × (C·N)`.
    pub masks: Var<T>,
    /// Encoded mixture, `N × S`.
    pub encoded: Var<T>,
}

impl MossFormer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            codec: EncoderDecoder::new(cfg.dim, cfg.enc_kernel)?,
            masknet: MaskingNet::new(&cfg)?,
            cfg,
        })
    }

    /// Trainable scalar count, computed from the architecture alone.
    pub fn num_params(&self) -> usize {
        self.codec.num_params() + self.masknet.num_params()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.codec.init(&mut store, &mut rng)?;
        self.masknet.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mixture: &[T]) -> Result<Separation<T>> {
        let len = mixture.len();
        let padded = self.codec.pad(mixture)?;
        let n_pad = padded.len();
        let x = g.tape.constant(NdArray::from_vec(&[1, n_pad], padded)?);
        let encoded = self.codec.encode_var(g, &x)?;
        let frames = g.tape.transpose(&encoded)?;
        let masks = self.masknet.forward(g, &frames)?;
        let n = self.cfg.dim;
        let mut estimates = Vec::with_capacity(self.cfg.speakers);
        for i in 0..self.cfg.speakers {
            let m = g.tape.slice_cols(&masks, i * n, n)?;
            let m = g.tape.transpose(&m)?;
            let masked = g.tape.mul(&m, &encoded)?;
            let wave = self.codec.decode_var(g, &masked)?;
            estimates.push(g.tape.slice_cols(&wave, 0, len)?);
        }
        Ok(Separation {
            estimates,
            masks,
            encoded,
        })
    }

    /// Eval-mode separation without gradient recording.
    pub fn separate<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        mixture: &[T],
    ) -> Result<Vec<Vec<T>>> {
        Ok(self.separate_with_masks(params, mixture)?.0)
    }

    pub fn separate_with_masks<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        mixture: &[T],
    ) -> Result<(Vec<Vec<T>>, MaskSet<T>)> {
        let mut tape = Tape::inference();
        let mut g = Graph::eval(&mut tape, params);
        let out = self.forward(&mut g, mixture)?;
        let masks = MaskSet::from_frames(out.masks.value(), self.cfg.speakers)?;
        let waves = out
            .estimates
            .iter()
            .map(|v| v.value().data().to_vec())
            .collect();
        Ok((waves, masks))
    }
}

/// Trainable scalars across encoder, masking net and decoder.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(MossFormer::new(cfg.clone())?.num_params())
}
