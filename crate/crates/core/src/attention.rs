//! Joint local/global single-head attention.
//!
//! A shared representation `Z = ConvM(x)` of width D yields four query/key
//! tensors through per-dimension scale and offset followed by rotary
//! position embedding. The local branch applies squared-ReLU attention with
//! scale `1/P` inside non-overlapping chunks of `P` frames; the global branch
//! is the linearized product `Q′·((1/S)·K′ᵀ·W)` and never forms an `S × S`
//! matrix. Both branches act on `W = [V | U]`, so every chunk score matrix
//! is computed once and shared by the two value streams.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;

use crate::config::AttentionMode;
use crate::conv_module::{ConvModule, ProjectionKind};
use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::numerics::{gemm, Activation, CustomOp, NdArray, ParamStore, Scalar, Tape, Var};

/// Partition of `len` frames into `chunks` blocks of `chunk` frames; the last
/// block is zero-padded by `pad` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub len: usize,
    pub chunk: usize,
    pub chunks: usize,
    pub pad: usize,
}

impl ChunkPlan {
    pub fn new(len: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        let chunks = len.div_ceil(chunk);
        Ok(Self {
            len,
            chunk,
            chunks,
            pad: chunks * chunk - len,
        })
    }

    /// Row range of chunk `h` inside the unpadded sequence. Padded rows are
    /// zero and contribute nothing, so they are never materialized.
    pub fn rows(&self, h: usize) -> std::ops::Range<usize> {
        let start = h * self.chunk;
        start..(start + self.chunk).min(self.len)
    }
}

thread_local! {
    static SCORE_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Chunk score matrices computed by local-attention forward passes on this
/// thread since the last [`reset_score_evaluations`].
pub fn score_evaluations() -> usize {
    SCORE_EVALS.with(Cell::get)
}

pub fn reset_score_evaluations() {
    SCORE_EVALS.with(|c| c.set(0));
}

/// Rotation angles `m·base^(−2j/D)` for `rows` positions, as cos/sin pairs.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    rows: usize,
    dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(rows: usize, dim: usize, base: f64) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embedding needs an even width, got {dim}"
            )));
        }
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|j| base.powf(-2.0 * j as f64 / dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for m in 0..rows {
            for &f in &freqs {
                let (s, c) = (m as f64 * f).sin_cos();
                sin.push(T::of(s));
                cos.push(T::of(c));
            }
        }
        Ok(Self {
            rows,
            dim,
            cos,
            sin,
        })
    }

    /// Rotates each row forward (`inverse = false`) or back.
    pub fn apply(&self, x: &NdArray<T>, inverse: bool) -> Result<NdArray<T>> {
        let (rows, d) = x.dims2("rope")?;
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even width, got {d}"
            )));
        }
        if (rows, d) != (self.rows, self.dim) {
            return Err(dim_err(
                "rope",
                format!("table is {}×{}, input is {rows}×{d}", self.rows, self.dim),
            ));
        }
        let half = d / 2;
        let mut out = x.clone();
        for (m, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            let cs = &self.cos[m * half..(m + 1) * half];
            let sn = &self.sin[m * half..(m + 1) * half];
            for ((pair, &c), &s) in row.chunks_exact_mut(2).zip(cs).zip(sn) {
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
        Ok(out)
    }
}

/// Rotary position embedding: rotates feature pair `(2j, 2j+1)` of row `m`
/// by `m·base^(−2j/D)`.
pub fn rope<T: Scalar>(x: &NdArray<T>, base: f64) -> Result<NdArray<T>> {
    let (rows, d) = x.dims2("rope")?;
    RopeTable::new(rows, d, base)?.apply(x, false)
}

struct RopeOp<T> {
    table: Rc<RopeTable<T>>,
}

impl<T: Scalar> CustomOp<T> for RopeOp<T> {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        _inputs: &[Rc<NdArray<T>>],
        grad_out: &NdArray<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<NdArray<T>>>> {
        Ok(vec![Some(self.table.apply(grad_out, true)?)])
    }
}

pub fn tape_rope_with<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    table: &Rc<RopeTable<T>>,
) -> Result<Var<T>> {
    let out = table.apply(x.value(), false)?;
    Ok(tape.custom(
        &[x],
        out,
        Box::new(RopeOp {
            table: Rc::clone(table),
        }),
    ))
}

pub fn tape_rope<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, base: f64) -> Result<Var<T>> {
    let (rows, d) = x.value().dims2("rope")?;
    tape_rope_with(tape, x, &Rc::new(RopeTable::new(rows, d, base)?))
}

fn check_attention<T: Scalar>(
    op: &'static str,
    q: &NdArray<T>,
    k: &NdArray<T>,
    w: &NdArray<T>,
) -> Result<(usize, usize, usize)> {
    let (s, d) = q.dims2(op)?;
    let (sk, dk) = k.dims2(op)?;
    let (sw, f) = w.dims2(op)?;
    if (sk, dk) != (s, d) {
        return Err(dim_err(op, format!("queries {s}×{d} vs keys {sk}×{dk}")));
    }
    if sw != s {
        return Err(dim_err(
            op,
            format!("{s} query frames vs {sw} value frames"),
        ));
    }
    Ok((s, d, f))
}

fn chunk_scores<T: Scalar>(q: &[T], k: &[T], p: usize, d: usize, gamma: T) -> Vec<T> {
    let mut scores = vec![T::zero(); p * p];
    gemm(false, true, p, p, d, gamma, q, k, T::zero(), &mut scores);
    scores
}

/// Chunked squared-ReLU attention `relu²(γ·Q_h·K_hᵀ)·W_h` with `γ = 1/P`,
/// concatenated over chunks. `q, k: S × D`, `w: S × F` → `S × F`.
pub fn local_attention_kernel<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    w: &NdArray<T>,
    chunk: usize,
) -> Result<NdArray<T>> {
    let (s, d, f) = check_attention("local_attention", q, k, w)?;
    let plan = ChunkPlan::new(s, chunk)?;
    let gamma = T::of(1.0 / chunk as f64);
    let mut out = vec![T::zero(); s * f];
    for h in 0..plan.chunks {
        let r = plan.rows(h);
        let p = r.len();
        let mut a = chunk_scores(
            &q.data()[r.start * d..r.end * d],
            &k.data()[r.start * d..r.end * d],
            p,
            d,
            gamma,
        );
        SCORE_EVALS.with(|c| c.set(c.get() + 1));
        for v in &mut a {
            *v = Activation::ReluSquared.apply(*v);
        }
        gemm(
            false,
            false,
            p,
            f,
            p,
            T::one(),
            &a,
            &w.data()[r.start * f..r.end * f],
            T::zero(),
            &mut out[r.start * f..r.end * f],
        );
    }
    NdArray::from_vec(&[s, f], out)
}

/// Gradients of [`local_attention_kernel`]: `(dq, dk, dw)`. Scores are
/// recomputed per chunk rather than stored.
pub fn local_attention_backward<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    w: &NdArray<T>,
    chunk: usize,
    dout: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (s, d, f) = check_attention("local_attention_backward", q, k, w)?;
    let plan = ChunkPlan::new(s, chunk)?;
    let gamma = T::of(1.0 / chunk as f64);
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dw = vec![T::zero(); s * f];
    for h in 0..plan.chunks {
        let r = plan.rows(h);
        let p = r.len();
        let qh = &q.data()[r.start * d..r.end * d];
        let kh = &k.data()[r.start * d..r.end * d];
        let wh = &w.data()[r.start * f..r.end * f];
        let gh = &dout.data()[r.start * f..r.end * f];
        let scores = chunk_scores(qh, kh, p, d, gamma);
        let a: Vec<T> = scores
            .iter()
            .map(|&v| Activation::ReluSquared.apply(v))
            .collect();
        gemm(
            true,
            false,
            p,
            f,
            p,
            T::one(),
            &a,
            gh,
            T::zero(),
            &mut dw[r.start * f..r.end * f],
        );
        let mut da = vec![T::zero(); p * p];
        gemm(false, true, p, p, f, T::one(), gh, wh, T::zero(), &mut da);
        for (g, &sv) in da.iter_mut().zip(&scores) {
            *g = *g * Activation::ReluSquared.derivative(sv) * gamma;
        }
        gemm(
            false,
            false,
            p,
            d,
            p,
            T::one(),
            &da,
            kh,
            T::zero(),
            &mut dq[r.start * d..r.end * d],
        );
        gemm(
            true,
            false,
            p,
            d,
            p,
            T::one(),
            &da,
            qh,
            T::zero(),
            &mut dk[r.start * d..r.end * d],
        );
    }
    Ok((
        NdArray::from_vec(&[s, d], dq)?,
        NdArray::from_vec(&[s, d], dk)?,
        NdArray::from_vec(&[s, f], dw)?,
    ))
}

/// Linearized attention `Q′·(β·K′ᵀ·W)` with `β = 1/S`. The `D × F` product
/// `K′ᵀ·W` is formed first.
pub fn global_attention_kernel<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    w: &NdArray<T>,
) -> Result<NdArray<T>> {
    let (s, d, f) = check_attention("global_attention", q, k, w)?;
    let beta = T::of(1.0 / s as f64);
    let mut kv = vec![T::zero(); d * f];
    gemm(
        true,
        false,
        d,
        f,
        s,
        beta,
        k.data(),
        w.data(),
        T::zero(),
        &mut kv,
    );
    let mut out = vec![T::zero(); s * f];
    gemm(
        false,
        false,
        s,
        f,
        d,
        T::one(),
        q.data(),
        &kv,
        T::zero(),
        &mut out,
    );
    NdArray::from_vec(&[s, f], out)
}

/// Gradients of [`global_attention_kernel`]: `(dq, dk, dw)`.
pub fn global_attention_backward<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    w: &NdArray<T>,
    dout: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (s, d, f) = check_attention("global_attention_backward", q, k, w)?;
    let beta = T::of(1.0 / s as f64);
    let mut kv = vec![T::zero(); d * f];
    gemm(
        true,
        false,
        d,
        f,
        s,
        beta,
        k.data(),
        w.data(),
        T::zero(),
        &mut kv,
    );
    let mut dq = vec![T::zero(); s * d];
    gemm(
        false,
        true,
        s,
        d,
        f,
        T::one(),
        dout.data(),
        &kv,
        T::zero(),
        &mut dq,
    );
    let mut dkv = vec![T::zero(); d * f];
    gemm(
        true,
        false,
        d,
        f,
        s,
        T::one(),
        q.data(),
        dout.data(),
        T::zero(),
        &mut dkv,
    );
    let mut dk = vec![T::zero(); s * d];
    gemm(
        false,
        true,
        s,
        d,
        f,
        beta,
        w.data(),
        &dkv,
        T::zero(),
        &mut dk,
    );
    let mut dw = vec![T::zero(); s * f];
    gemm(
        false,
        false,
        s,
        f,
        d,
        beta,
        k.data(),
        &dkv,
        T::zero(),
        &mut dw,
    );
    Ok((
        NdArray::from_vec(&[s, d], dq)?,
        NdArray::from_vec(&[s, d], dk)?,
        NdArray::from_vec(&[s, f], dw)?,
    ))
}

fn split_halves<T: Scalar>(x: &NdArray<T>, width: usize) -> Result<(NdArray<T>, NdArray<T>)> {
    Ok((x.slice_cols(0, width)?, x.slice_cols(width, width)?))
}

/// `(V′_local, U′_local)` for `q, k: S × D` and `v, u: S × F`.
pub fn local_attention<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    v: &NdArray<T>,
    u: &NdArray<T>,
    chunk: usize,
) -> Result<(NdArray<T>, NdArray<T>)> {
    v.same_shape(u, "local_attention")?;
    let w = v.concat_cols(u)?;
    split_halves(&local_attention_kernel(q, k, &w, chunk)?, v.shape()[1])
}

/// `(V′_global, U′_global)` for `q, k: S × D` and `v, u: S × F`.
pub fn global_attention<T: Scalar>(
    q: &NdArray<T>,
    k: &NdArray<T>,
    v: &NdArray<T>,
    u: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>)> {
    v.same_shape(u, "global_attention")?;
    let w = v.concat_cols(u)?;
    split_halves(&global_attention_kernel(q, k, &w)?, v.shape()[1])
}

struct LocalAttentionOp {
    chunk: usize,
}

impl<T: Scalar> CustomOp<T> for LocalAttentionOp {
    fn name(&self) -> &'static str {
        "local_attention"
    }

    fn backward(
        &self,
        inputs: &[Rc<NdArray<T>>],
        grad_out: &NdArray<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<NdArray<T>>>> {
        let (dq, dk, dw) =
            local_attention_backward(&inputs[0], &inputs[1], &inputs[2], self.chunk, grad_out)?;
        Ok(vec![Some(dq), Some(dk), Some(dw)])
    }
}

struct GlobalAttentionOp;

impl<T: Scalar> CustomOp<T> for GlobalAttentionOp {
    fn name(&self) -> &'static str {
        "global_attention"
    }

    fn backward(
        &self,
        inputs: &[Rc<NdArray<T>>],
        grad_out: &NdArray<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<NdArray<T>>>> {
        let (dq, dk, dw) = global_attention_backward(&inputs[0], &inputs[1], &inputs[2], grad_out)?;
        Ok(vec![Some(dq), Some(dk), Some(dw)])
    }
}

pub fn tape_local_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    w: &Var<T>,
    chunk: usize,
) -> Result<Var<T>> {
    let out = local_attention_kernel(q.value(), k.value(), w.value(), chunk)?;
    Ok(tape.custom(&[q, k, w], out, Box::new(LocalAttentionOp { chunk })))
}

pub fn tape_global_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    w: &Var<T>,
) -> Result<Var<T>> {
    let out = global_attention_kernel(q.value(), k.value(), w.value())?;
    Ok(tape.custom(&[q, k, w], out, Box::new(GlobalAttentionOp)))
}

/// Queries and keys for both branches.
pub struct QueryKeys<T> {
    pub q_local: Var<T>,
    pub k_local: Var<T>,
    pub q_global: Var<T>,
    pub k_global: Var<T>,
}

const QK_NAMES: [&str; 4] = ["q_local", "k_local", "q_global", "k_global"];

#[derive(Clone, Debug)]
pub struct JointAttention {
    pub prefix: String,
    pub dim: usize,
    pub attn_dim: usize,
    pub chunk: usize,
    pub rope_base: f64,
    pub mode: AttentionMode,
    pub global_qk_act: Option<Activation>,
    pub shared: ConvModule,
}

impl JointAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        attn_dim: usize,
        chunk: usize,
        dw_kernel: usize,
        dropout: f64,
        kind: ProjectionKind,
        eps: f64,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if !attn_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention dim {attn_dim} must be even"
            )));
        }
        if chunk == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        let shared = ConvModule::new(
            format!("{prefix}.z"),
            dim,
            attn_dim,
            dw_kernel,
            dropout,
            kind,
            eps,
        )?;
        Ok(Self {
            prefix,
            dim,
            attn_dim,
            chunk,
            rope_base: 10_000.0,
            mode: AttentionMode::Joint,
            global_qk_act: None,
            shared,
        })
    }

    pub fn num_params(&self) -> usize {
        self.shared.num_params() + 8 * self.attn_dim
    }

    /// Scales start at 1 and offsets at 0.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.shared.init(store, rng)?;
        for n in QK_NAMES {
            store.insert(
                format!("{}.{n}.scale", self.prefix),
                NdArray::ones(&[self.attn_dim]),
                true,
            )?;
            store.insert(
                format!("{}.{n}.offset", self.prefix),
                NdArray::zeros(&[self.attn_dim]),
                true,
            )?;
        }
        Ok(())
    }

    /// `Z = ConvM(x)`, `S × D`.
    pub fn shared_representation<T: Scalar>(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        self.shared.forward(g, x)
    }

    /// `rope(scale_i ⊙ Z + offset_i)` for the four query/key tensors.
    pub fn derive_qk<T: Scalar>(&self, g: &mut Graph<T>, z: &Var<T>) -> Result<QueryKeys<T>> {
        let (rows, d) = z.value().dims2("derive_qk")?;
        let table = Rc::new(RopeTable::new(rows, d, self.rope_base)?);
        let mut out = Vec::with_capacity(4);
        for n in QK_NAMES {
            let scale = g.param(&format!("{}.{n}.scale", self.prefix))?;
            let offset = g.param(&format!("{}.{n}.offset", self.prefix))?;
            let affine = g.tape.row_affine(z, &scale, &offset)?;
            out.push(tape_rope_with(g.tape, &affine, &table)?);
        }
        let mut it = out.into_iter();
        let mut next = || it.next().expect("four tensors");
        Ok(QueryKeys {
            q_local: next(),
            k_local: next(),
            q_global: next(),
            k_global: next(),
        })
    }

    /// Attention over the value matrix `w = [V | U]` given precomputed
    /// queries and keys.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        qk: &QueryKeys<T>,
        w: &Var<T>,
    ) -> Result<Var<T>> {
        let local = if self.mode.uses_local() {
            Some(tape_local_attention(
                g.tape,
                &qk.q_local,
                &qk.k_local,
                w,
                self.chunk,
            )?)
        } else {
            None
        };
        let global = if self.mode.uses_global() {
            let (q, k) = match self.global_qk_act {
                Some(act) => (g.tape.act(&qk.q_global, act), g.tape.act(&qk.k_global, act)),
                None => (qk.q_global.clone(), qk.k_global.clone()),
            };
            Some(tape_global_attention(g.tape, &q, &k, w)?)
        } else {
            None
        };
        match (local, global) {
            (Some(l), Some(gl)) => g.tape.add(&l, &gl),
            (Some(l), None) => Ok(l),
            (None, Some(gl)) => Ok(gl),
            (None, None) => unreachable!("every mode uses at least one branch"),
        }
    }

    /// `(V′, U′)` for input `x: S × N` and value streams `v, u: S × F`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        v: &Var<T>,
        u: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let width = v.value().dims2("joint_attention")?.1;
        let z = self.shared_representation(g, x)?;
        let qk = self.derive_qk(g, &z)?;
        let w = g.tape.concat_cols(v, u)?;
        let out = self.attend(g, &qk, &w)?;
        Ok((
            g.tape.slice_cols(&out, 0, width)?,
            g.tape.slice_cols(&out, width, width)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> NdArray<f64> {
        NdArray::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum(tape: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
        let t = tape.constant(rand(y.shape(), seed));
        let prod = tape.mul(y, &t)?;
        Ok(tape.sum(&prod))
    }

    #[test]
    fn chunk_plan_pads_last_chunk() {
        let p = ChunkPlan::new(10, 4).unwrap();
        assert_eq!((p.chunks, p.pad), (3, 2));
        assert_eq!(p.rows(2), 8..10);
        let exact = ChunkPlan::new(8, 4).unwrap();
        assert_eq!((exact.chunks, exact.pad), (2, 0));
        assert!(ChunkPlan::new(8, 0).is_err());
    }

    #[test]
    fn rope_hand_values() {
        // Row 1, single pair at frequency 1: rotation by one radian.
        let x = NdArray::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = rope(&x, 10_000.0).unwrap();
        assert_eq!(&y.data()[..2], &[1.0, 0.0]);
        assert!((y.data()[2] - 1f64.cos()).abs() < 1e-15);
        assert!((y.data()[3] - 1f64.sin()).abs() < 1e-15);
        assert!(matches!(
            rope(&rand(&[3, 5], 0), 10_000.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_score_matrix_per_chunk() {
        let (q, k, w) = (rand(&[37, 4], 1), rand(&[37, 4], 2), rand(&[37, 6], 3));
        reset_score_evaluations();
        local_attention_kernel(&q, &k, &w, 8).unwrap();
        assert_eq!(score_evaluations(), 5);
        reset_score_evaluations();
        local_attention(&q, &k, &w, &w, 8).unwrap();
        assert_eq!(score_evaluations(), 5);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let q = rand(&[8, 4], 1);
        assert!(local_attention_kernel(&q, &rand(&[8, 6], 2), &rand(&[8, 2], 3), 4).is_err());
        assert!(global_attention_kernel(&q, &rand(&[8, 4], 2), &rand(&[7, 2], 3)).is_err());
        assert!(local_attention(&q, &q, &rand(&[8, 2], 3), &rand(&[8, 3], 3), 4).is_err());
    }

    #[test]
    fn branch_kernels_match_finite_differences() {
        for (s, chunk) in [(11, 4), (8, 8)] {
            let mut store = ParamStore::new();
            store.insert("q", rand(&[s, 4], 10), true).unwrap();
            store.insert("k", rand(&[s, 4], 11), true).unwrap();
            store.insert("w", rand(&[s, 6], 12), true).unwrap();
            let report = gradient_check(&mut store, 1e-5, |tape, p| {
                let mut g = Graph::eval(tape, p);
                let (q, k, w) = (g.param("q")?, g.param("k")?, g.param("w")?);
                let qr = tape_rope(g.tape, &q, 10_000.0)?;
                let l = tape_local_attention(g.tape, &qr, &k, &w, chunk)?;
                let gl = tape_global_attention(g.tape, &q, &k, &w)?;
                let y = g.tape.add(&l, &gl)?;
                weighted_sum(g.tape, &y, 13)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report}");
            assert_eq!(report.checked, s * 14);
        }
    }

    fn module(mode: AttentionMode) -> (JointAttention, ParamStore<f64>) {
        let mut a = JointAttention::new("a", 6, 4, 4, 3, 0.0, ProjectionKind::Conv, 1e-5).unwrap();
        a.mode = mode;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        a.init(&mut store, &mut rng).unwrap();
        for n in QK_NAMES {
            store
                .set(
                    &format!("a.{n}.scale"),
                    NdArray::uniform(&[4], 1.0, &mut rng),
                )
                .unwrap();
            store
                .set(
                    &format!("a.{n}.offset"),
                    NdArray::uniform(&[4], 0.5, &mut rng),
                )
                .unwrap();
        }
        (a, store)
    }

    #[test]
    fn joint_module_matches_finite_differences() {
        for mode in AttentionMode::ALL {
            let (a, mut store) = module(mode);
            let x = rand(&[10, 6], 21);
            let v = rand(&[10, 5], 22);
            let u = rand(&[10, 5], 23);
            let report = gradient_check(&mut store, 1e-5, |tape, p| {
                let mut g = Graph::eval(tape, p);
                let xv = g.tape.constant(x.clone());
                let vv = g.tape.constant(v.clone());
                let uv = g.tape.constant(u.clone());
                let (va, ua) = a.forward(&mut g, &xv, &vv, &uv)?;
                let both = g.tape.concat_cols(&va, &ua)?;
                weighted_sum(g.tape, &both, 24)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode}: {report}");
            assert_eq!(report.checked, a.num_params());
        }
    }

    #[test]
    fn modes_select_branches() {
        let x = rand(&[10, 6], 30);
        let v = rand(&[10, 5], 31);
        let run = |mode| {
            let (a, store) = module(mode);
            let mut tape = Tape::inference();
            let mut g = Graph::eval(&mut tape, &store);
            let (xv, vv) = (g.tape.constant(x.clone()), g.tape.constant(v.clone()));
            a.forward(&mut g, &xv, &vv, &vv).unwrap().0.value().clone()
        };
        let joint = run(AttentionMode::Joint);
        let sum =
            run(AttentionMode::LocalOnly).zip_map(&run(AttentionMode::GlobalOnly), |a, b| a + b);
        assert!(joint.max_abs_diff(&sum) < 1e-14);
    }
}
