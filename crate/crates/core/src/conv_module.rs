//! The convolution module: layer norm, expanding linear projection, SiLU,
//! and a same-length depthwise convolution wrapped by a skip connection,
//! followed by dropout.
//!
//! Input and output are time-major (`S × features`). The depthwise
//! convolution runs along time, one filter per projected feature.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::numerics::{Activation, NdArray, ParamStore, Scalar, Var};

/// How the module produces its output features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Full module: norm → linear → SiLU → depthwise conv (+ skip).
    Conv,
    /// Ablation stand-in: norm → linear.
    Dense,
}

#[derive(Clone, Debug)]
pub struct ConvModule {
    pub prefix: String,
    pub n_in: usize,
    pub n_out: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub kind: ProjectionKind,
    pub eps: f64,
}

impl ConvModule {
    pub fn new(
        prefix: impl Into<String>,
        n_in: usize,
        n_out: usize,
        kernel: usize,
        dropout: f64,
        kind: ProjectionKind,
        eps: f64,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            n_in,
            n_out,
            kernel,
            dropout,
            kind,
            eps,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn num_params(&self) -> usize {
        let base = 2 * self.n_in + self.n_out * self.n_in + self.n_out;
        match self.kind {
            ProjectionKind::Conv => base + self.n_out * self.kernel,
            ProjectionKind::Dense => base,
        }
    }

    /// Norm gain 1, bias 0; projection uniform in ±1/√n_in with zero bias;
    /// depthwise taps uniform in ±1/√K.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(self.name("norm.gain"), NdArray::ones(&[self.n_in]), true)?;
        store.insert(self.name("norm.bias"), NdArray::zeros(&[self.n_in]), true)?;
        let bound = 1.0 / (self.n_in as f64).sqrt();
        store.insert(
            self.name("proj.weight"),
            NdArray::uniform(&[self.n_out, self.n_in], bound, rng),
            true,
        )?;
        store.insert(self.name("proj.bias"), NdArray::zeros(&[self.n_out]), true)?;
        if self.kind == ProjectionKind::Conv {
            let bound = 1.0 / (self.kernel as f64).sqrt();
            store.insert(
                self.name("dw.weight"),
                NdArray::uniform(&[self.n_out, self.kernel], bound, rng),
                true,
            )?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, n) = x.value().dims2("conv_module")?;
        if n != self.n_in {
            return Err(dim_err(
                "conv_module",
                format!(
                    "{}: expected {} input features, got {n}",
                    self.prefix, self.n_in
                ),
            ));
        }
        let gain = g.param(&self.name("norm.gain"))?;
        let bias = g.param(&self.name("norm.bias"))?;
        let normed = g.tape.layer_norm(x, &gain, &bias, T::of(self.eps))?;
        let w = g.param(&self.name("proj.weight"))?;
        let b = g.param(&self.name("proj.bias"))?;
        let projected = g.tape.linear(&normed, &w, Some(&b))?;
        let y = match self.kind {
            ProjectionKind::Dense => projected,
            ProjectionKind::Conv => {
                let y0 = g.tape.act(&projected, Activation::Silu);
                let dw = g.param(&self.name("dw.weight"))?;
                let conv = g.tape.depthwise_conv1d_rows(&y0, &dw)?;
                g.tape.add(&y0, &conv)?
            }
        };
        Ok(g.dropout(&y, self.dropout))
    }
}
