//! The gated block: convolution modules produce `U` and `V`, joint attention
//! produces `V′ = A·V` and `U′ = A·U`, and three elementwise gates combine
//! them before a width-reducing convolution module and the residual add.
//!
//! ```text
//! O′ = φ(U ⊙ V′)
//! O″ = U′ ⊙ V
//! O  = x + ConvM(O′ ⊙ O″)
//! ```

use rand::Rng;

use crate::attention::JointAttention;
use crate::config::ModelConfig;
use crate::conv_module::{ConvModule, ProjectionKind};
use crate::error::{dim_err, Result};
use crate::graph::Graph;
use crate::numerics::{Activation, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct MossFormerBlock {
    pub prefix: String,
    pub dim: usize,
    pub convm_u: ConvModule,
    /// `None` when `U` and `V` share one module.
    pub convm_v: Option<ConvModule>,
    pub attn: JointAttention,
    pub convm_out: ConvModule,
    pub gate: Activation,
    pub single_gate: bool,
}

impl MossFormerBlock {
    pub fn new(prefix: impl Into<String>, cfg: &ModelConfig) -> Result<Self> {
        let prefix = prefix.into();
        let n = cfg.dim;
        let abl = &cfg.ablation;
        let uv_kind = if abl.dense_uv {
            ProjectionKind::Dense
        } else {
            ProjectionKind::Conv
        };
        let qk_kind = if abl.dense_qk {
            ProjectionKind::Dense
        } else {
            ProjectionKind::Conv
        };
        let convm = |name: &str, n_in: usize, n_out: usize, kind: ProjectionKind| {
            ConvModule::new(
                format!("{prefix}.{name}"),
                n_in,
                n_out,
                cfg.dw_kernel,
                cfg.dropout,
                kind,
                cfg.norm_eps,
            )
        };
        let convm_u = convm("convm_u", n, 2 * n, uv_kind)?;
        let convm_v = if cfg.tie_uv {
            None
        } else {
            Some(convm("convm_v", n, 2 * n, uv_kind)?)
        };
        let convm_out = convm("convm_out", 2 * n, n, ProjectionKind::Conv)?;
        let mut attn = JointAttention::new(
            format!("{prefix}.attn"),
            n,
            cfg.attn_dim,
            cfg.chunk,
            cfg.dw_kernel,
            cfg.dropout,
            qk_kind,
            cfg.norm_eps,
        )?;
        attn.rope_base = cfg.rope_base;
        attn.mode = abl.attention_mode;
        attn.global_qk_act = cfg.global_qk_act;
        Ok(Self {
            prefix,
            dim: n,
            convm_u,
            convm_v,
            attn,
            convm_out,
            gate: cfg.gate,
            single_gate: abl.single_gate,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convm_u.num_params()
            + self.convm_v.as_ref().map_or(0, ConvModule::num_params)
            + self.attn.num_params()
            + self.convm_out.num_params()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.convm_u.init(store, rng)?;
        if let Some(v) = &self.convm_v {
            v.init(store, rng)?;
        }
        self.attn.init(store, rng)?;
        self.convm_out.init(store, rng)
    }

    /// `x: S × N` → `S × N`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, n) = x.value().dims2("mossformer_block")?;
        if n != self.dim {
            return Err(dim_err(
                "mossformer_block",
                format!("{}: expected {} features, got {n}", self.prefix, self.dim),
            ));
        }
        let u = self.convm_u.forward(g, x)?;
        let v = match &self.convm_v {
            Some(m) => m.forward(g, x)?,
            None => u.clone(),
        };
        let (v_att, u_att) = self.attn.forward(g, x, &v, &u)?;
        let o2 = g.tape.mul(&u_att, &v)?;
        let gated = if self.single_gate {
            o2
        } else {
            let uv = g.tape.mul(&u, &v_att)?;
            let o1 = g.tape.act(&uv, self.gate);
            g.tape.mul(&o1, &o2)?
        };
        let residual = self.convm_out.forward(g, &gated)?;
        g.tape.add(x, &residual)
    }
}
