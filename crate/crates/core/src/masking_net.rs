//! The masking network: normalize the encoded mixture, add sinusoidal
//! positions, run the block stack, expand to one feature group per speaker,
//! gate with a GLU, and project to non-negative masks.
//!
//! Everything runs time-major (`S × features`). The `C·N` mask channels
//! split speaker-major: speaker `i` owns columns `i·N .. (i+1)·N`.

use rand::Rng;

use crate::block::MossFormerBlock;
use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::numerics::{Activation, NdArray, ParamStore, Scalar, Var};

/// Per-speaker masks, `C × N × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T> {
    pub masks: NdArray<T>,
}

impl<T: Scalar> MaskSet<T> {
    /// Reshapes time-major `S × (C·N)` network output into `C × N × S`.
    pub fn from_frames(frames: &NdArray<T>, speakers: usize) -> Result<Self> {
        let (s, cn) = frames.dims2("MaskSet")?;
        if speakers == 0 || cn % speakers != 0 {
            return Err(dim_err(
                "MaskSet",
                format!("{cn} channels do not split across {speakers} speakers"),
            ));
        }
        let n = cn / speakers;
        let src = frames.data();
        let mut data = vec![T::zero(); cn * s];
        for t in 0..s {
            for ch in 0..cn {
                data[ch * s + t] = src[t * cn + ch];
            }
        }
        Ok(Self {
            masks: NdArray::from_vec(&[speakers, n, s], data)?,
        })
    }

    pub fn speakers(&self) -> usize {
        self.masks.shape()[0]
    }

    /// Mask `M_i`, `N × S`.
    pub fn speaker(&self, i: usize) -> Result<NdArray<T>> {
        let [c, n, s] = [
            self.masks.shape()[0],
            self.masks.shape()[1],
            self.masks.shape()[2],
        ];
        if i >= c {
            return Err(Error::Index {
                what: "speaker",
                index: i,
                len: c,
            });
        }
        NdArray::from_vec(
            &[n, s],
            self.masks.data()[i * n * s..(i + 1) * n * s].to_vec(),
        )
    }
}

/// Absolute sinusoidal encodings, `S × N`:
/// `pe[m, 2j] = sin(m / 10000^(2j/N))`, `pe[m, 2j+1] = cos(...)`.
pub fn positional_encoding<T: Scalar>(frames: usize, dim: usize) -> Result<NdArray<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    let inv: Vec<f64> = (0..dim / 2)
        .map(|j| 10000f64.powf(-((2 * j) as f64) / dim as f64))
        .collect();
    let mut data = Vec::with_capacity(frames * dim);
    for m in 0..frames {
        for &f in &inv {
            let a = m as f64 * f;
            data.push(T::of(a.sin()));
            data.push(T::of(a.cos()));
        }
    }
    NdArray::from_vec(&[frames, dim], data)
}

/// A per-frame linear map with bias (kernel-size-1 convolution).
#[derive(Clone, Debug)]
struct Pointwise {
    name: String,
    n_in: usize,
    n_out: usize,
}

impl Pointwise {
    fn new(name: String, n_in: usize, n_out: usize) -> Self {
        Self { name, n_in, n_out }
    }

    fn num_params(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (self.n_in as f64).sqrt();
        store.insert(
            format!("{}.weight", self.name),
            NdArray::uniform(&[self.n_out, self.n_in], bound, rng),
            true,
        )?;
        store.insert(
            format!("{}.bias", self.name),
            NdArray::zeros(&[self.n_out]),
            true,
        )
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(&format!("{}.weight", self.name))?;
        let b = g.param(&format!("{}.bias", self.name))?;
        g.tape.linear(x, &w, Some(&b)).map_err(|e| match e {
            Error::Dimension { detail, .. } => {
                dim_err("masking_net", format!("{}: {detail}", self.name))
            }
            other => other,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MaskingNet {
    pub dim: usize,
    pub speakers: usize,
    pub eps: f64,
    pub blocks: Vec<MossFormerBlock>,
    in_pw: Pointwise,
    expand_pw: Pointwise,
    glu_a: Pointwise,
    glu_b: Pointwise,
    out_pw: Pointwise,
}

pub const NORM_GAIN: &str = "masknet.norm.gain";
pub const NORM_BIAS: &str = "masknet.norm.bias";

impl MaskingNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.dim;
        let cn = cfg.speakers * n;
        let blocks = (0..cfg.num_blocks)
            .map(|i| MossFormerBlock::new(format!("masknet.block{i}"), cfg))
            .collect::<Result<_>>()?;
        let pw = |name: &str, a, b| Pointwise::new(format!("masknet.{name}"), a, b);
        Ok(Self {
            dim: n,
            speakers: cfg.speakers,
            eps: cfg.norm_eps,
            blocks,
            in_pw: pw("in_pw", n, n),
            expand_pw: pw("expand_pw", n, cn),
            glu_a: pw("glu_a", cn, cn),
            glu_b: pw("glu_b", cn, cn),
            out_pw: pw("out_pw", cn, cn),
        })
    }

    pub fn block_params(&self) -> usize {
        self.blocks.iter().map(MossFormerBlock::num_params).sum()
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
            + self.block_params()
            + [
                &self.in_pw,
                &self.expand_pw,
                &self.glu_a,
                &self.glu_b,
                &self.out_pw,
            ]
            .iter()
            .map(|p| p.num_params())
            .sum::<usize>()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(NORM_GAIN, NdArray::ones(&[self.dim]), true)?;
        store.insert(NORM_BIAS, NdArray::zeros(&[self.dim]), true)?;
        self.in_pw.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.expand_pw.init(store, rng)?;
        self.glu_a.init(store, rng)?;
        self.glu_b.init(store, rng)?;
        self.out_pw.init(store, rng)
    }

    /// `x: S × N` (time-major encoded mixture) → masks `S × (C·N)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let (s, n) = x.value().dims2("masking_net")?;
        if n != self.dim {
            return Err(dim_err(
                "masking_net",
                format!("input: expected {} features, got {n}", self.dim),
            ));
        }
        let gain = g.param(NORM_GAIN)?;
        let bias = g.param(NORM_BIAS)?;
        let normed = g.tape.layer_norm(x, &gain, &bias, T::of(self.eps))?;
        let pe = g.tape.constant(positional_encoding(s, n)?);
        let y = g.tape.add(&normed, &pe)?;
        let mut y = self.in_pw.forward(g, &y)?;
        for b in &self.blocks {
            y = b.forward(g, &y)?;
        }
        let y = g.tape.act(&y, Activation::Relu);
        let y = self.expand_pw.forward(g, &y)?;
        let a = self.glu_a.forward(g, &y)?;
        let gate = self.glu_b.forward(g, &y)?;
        let gate = g.tape.act(&gate, Activation::Sigmoid);
        let y = g.tape.mul(&a, &gate)?;
        let y = self.out_pw.forward(g, &y)?;
        Ok(g.tape.act(&y, Activation::Relu))
    }

    /// Inference helper returning the reshaped masks.
    pub fn masks<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<MaskSet<T>> {
        let frames = self.forward(g, x)?;
        MaskSet::from_frames(frames.value(), self.speakers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (MaskingNet, ParamStore<f64>) {
        let cfg = ModelConfig::preset(Preset::Tiny);
        let net = MaskingNet::new(&cfg).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        (net, store)
    }

    fn run(net: &MaskingNet, store: &ParamStore<f64>, x: NdArray<f64>) -> NdArray<f64> {
        let mut tape = Tape::inference();
        let mut g = Graph::eval(&mut tape, store);
        let x = g.tape.constant(x);
        net.forward(&mut g, &x).unwrap().value().clone()
    }

    #[test]
    fn encoding_first_row_and_range() {
        let pe = positional_encoding::<f64>(50, 8).unwrap();
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for m in 0..50 {
            for k in m + 1..50 {
                let a = &pe.data()[m * 8..(m + 1) * 8];
                let b = &pe.data()[k * 8..(k + 1) * 8];
                assert!(
                    a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6),
                    "rows {m} and {k}"
                );
            }
        }
        assert!(matches!(
            positional_encoding::<f64>(4, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_split_is_speaker_major() {
        let frames =
            NdArray::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let set = MaskSet::from_frames(&frames, 2).unwrap();
        assert_eq!(set.masks.shape(), &[2, 2, 2]);
        assert_eq!(set.speaker(0).unwrap().data(), &[1.0, 5.0, 2.0, 6.0]);
        assert_eq!(set.speaker(1).unwrap().data(), &[3.0, 7.0, 4.0, 8.0]);
        assert!(matches!(set.speaker(2), Err(Error::Index { .. })));
    }

    #[test]
    fn masks_are_non_negative() {
        let (net, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = run(&net, &store, NdArray::uniform(&[21, 16], 2.0, &mut rng));
        assert_eq!(y.shape(), &[21, 32]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        assert!(y.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn zero_output_projection_gives_zero_masks() {
        let (net, mut store) = tiny();
        store
            .set("masknet.out_pw.weight", NdArray::zeros(&[32, 32]))
            .unwrap();
        store
            .set("masknet.out_pw.bias", NdArray::zeros(&[32]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = run(&net, &store, NdArray::uniform(&[9, 16], 1.0, &mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic() {
        let (net, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = NdArray::uniform(&[13, 16], 1.0, &mut rng);
        assert_eq!(run(&net, &store, x.clone()), run(&net, &store, x));
    }

    #[test]
    fn wrong_width_names_stage() {
        let (net, store) = tiny();
        let mut tape = Tape::inference();
        let mut g = Graph::eval(&mut tape, &store);
        let x = g.tape.constant(NdArray::zeros(&[4, 12]));
        let err = net.forward(&mut g, &x).unwrap_err().to_string();
        assert!(err.contains("masking_net"), "{err}");
    }

    #[test]
    fn counted_params_match_store() {
        let (net, store) = tiny();
        assert_eq!(net.num_params(), store.num_trainable());
        let blocks = store.num_trainable_with_prefix("masknet.block");
        assert_eq!(net.block_params(), blocks);
    }
}
