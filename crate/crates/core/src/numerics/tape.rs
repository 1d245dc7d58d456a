//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records primitive ops while the forward pass executes. Every
//! result is a [`Var`] holding its value; vars produced while the tape is
//! recording also carry a node id. [`Tape::backward`] replays the recorded
//! nodes in exact reverse order. A tape is rebuilt for every forward pass.

use std::rc::Rc;

use rand::Rng;

use super::activation::Activation;
use super::ops::{self, LayerNormCache};
use super::{NdArray, Scalar};
use crate::error::{dim_err, Result};

/// A value flowing through the tape.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Rc<NdArray<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &NdArray<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn rc(&self) -> Rc<NdArray<T>> {
        Rc::clone(&self.value)
    }
}

/// Backward rule for a fused op defined outside the numerics core.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries for inputs with `needs[i] ==
    /// false` may be `None`.
    fn backward(
        &self,
        inputs: &[Rc<NdArray<T>>],
        grad_out: &NdArray<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<NdArray<T>>>>;
}

type Id = Option<usize>;
type Val<T> = Rc<NdArray<T>>;

enum Op<T: Scalar> {
    Leaf {
        name: Option<String>,
    },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Val<T>, Id, Val<T>),
    Scale(Id, T),
    Act(Id, Val<T>, Activation),
    Linear {
        x: (Id, Val<T>),
        w: (Id, Val<T>),
        b: Id,
    },
    Conv1d {
        x: (Id, Val<T>),
        w: (Id, Val<T>),
        b: Id,
        stride: usize,
    },
    TransposedConv1d {
        x: (Id, Val<T>),
        w: (Id, Val<T>),
        stride: usize,
    },
    Depthwise {
        x: (Id, Val<T>),
        w: (Id, Val<T>),
        time_major: bool,
    },
    LayerNorm {
        x: Id,
        gain: (Id, Val<T>),
        bias: Id,
        cache: LayerNormCache<T>,
    },
    RowAffine {
        x: (Id, Val<T>),
        scale: (Id, Val<T>),
        offset: Id,
    },
    Transpose(Id),
    SliceCols {
        x: Id,
        start: usize,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        x: Id,
        start: usize,
        rows: usize,
        cols: usize,
    },
    ConcatCols(Id, usize, Id, usize),
    Dropout(Id, NdArray<T>),
    Sum(Id, Vec<usize>),
    Custom {
        inputs: Vec<(Id, Val<T>)>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Recorder of executed primitive ops.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads<T> {
    grads: Vec<Option<NdArray<T>>>,
    visit_order: Vec<usize>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&NdArray<T>> {
        v.id.and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&NdArray<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Node ids in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records every op for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing is recorded and no memory is
    /// retained beyond the live vars.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, tracked: bool) -> Var<T> {
        let id = if self.recording && tracked {
            self.nodes.push(Node {
                op,
                shape: value.shape().to_vec(),
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Var {
            id,
            value: Rc::new(value),
        }
    }

    /// A differentiable input. Named leaves are parameters.
    pub fn leaf(&mut self, value: Rc<NdArray<T>>, name: Option<&str>) -> Var<T> {
        let id = if self.recording {
            self.nodes.push(Node {
                op: Op::Leaf {
                    name: name.map(str::to_owned),
                },
                shape: value.shape().to_vec(),
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Var { id, value }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: NdArray<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// Names and node ids of every parameter leaf.
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name: Some(name) } => Some((i, name.as_str())),
                _ => None,
            })
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        a.value.same_shape(&b.value, "add")?;
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        Ok(self.push(out, Op::Add(a.id, b.id), a.id.is_some() || b.id.is_some()))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        a.value.same_shape(&b.value, "sub")?;
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a.id, b.id), a.id.is_some() || b.id.is_some()))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        a.value.same_shape(&b.value, "mul")?;
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        Ok(self.push(
            out,
            Op::Mul(a.id, a.rc(), b.id, b.rc()),
            a.id.is_some() || b.id.is_some(),
        ))
    }

    pub fn scale(&mut self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value.map(|x| x * c);
        self.push(out, Op::Scale(a.id, c), a.id.is_some())
    }

    pub fn act(&mut self, x: &Var<T>, kind: Activation) -> Var<T> {
        if kind == Activation::Identity {
            return x.clone();
        }
        let out = kind.forward(&x.value);
        self.push(out, Op::Act(x.id, x.rc(), kind), x.id.is_some())
    }

    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let out = ops::linear(&x.value, &w.value, b.map(|b| &*b.value))?;
        let bid = b.and_then(|b| b.id);
        let tracked = x.id.is_some() || w.id.is_some() || bid.is_some();
        Ok(self.push(
            out,
            Op::Linear {
                x: (x.id, x.rc()),
                w: (w.id, w.rc()),
                b: bid,
            },
            tracked,
        ))
    }

    pub fn conv1d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
    ) -> Result<Var<T>> {
        let out = ops::conv1d(&x.value, &w.value, b.map(|b| &*b.value), stride)?;
        let bid = b.and_then(|b| b.id);
        let tracked = x.id.is_some() || w.id.is_some() || bid.is_some();
        Ok(self.push(
            out,
            Op::Conv1d {
                x: (x.id, x.rc()),
                w: (w.id, w.rc()),
                b: bid,
                stride,
            },
            tracked,
        ))
    }

    pub fn transposed_conv1d(&mut self, x: &Var<T>, w: &Var<T>, stride: usize) -> Result<Var<T>> {
        let out = ops::transposed_conv1d(&x.value, &w.value, stride)?;
        let tracked = x.id.is_some() || w.id.is_some();
        Ok(self.push(
            out,
            Op::TransposedConv1d {
                x: (x.id, x.rc()),
                w: (w.id, w.rc()),
                stride,
            },
            tracked,
        ))
    }

    pub fn depthwise_conv1d(&mut self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let out = ops::depthwise_conv1d(&x.value, &w.value)?;
        let tracked = x.id.is_some() || w.id.is_some();
        Ok(self.push(
            out,
            Op::Depthwise {
                x: (x.id, x.rc()),
                w: (w.id, w.rc()),
                time_major: false,
            },
            tracked,
        ))
    }

    /// Depthwise convolution along the rows of time-major `x: L × C`.
    pub fn depthwise_conv1d_rows(&mut self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let out = ops::depthwise_conv1d_rows(&x.value, &w.value)?;
        let tracked = x.id.is_some() || w.id.is_some();
        Ok(self.push(
            out,
            Op::Depthwise {
                x: (x.id, x.rc()),
                w: (w.id, w.rc()),
                time_major: true,
            },
            tracked,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: &Var<T>,
        gain: &Var<T>,
        bias: &Var<T>,
        eps: T,
    ) -> Result<Var<T>> {
        let (out, cache) = ops::layer_norm(&x.value, &gain.value, &bias.value, eps)?;
        let tracked = x.id.is_some() || gain.id.is_some() || bias.id.is_some();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.id,
                gain: (gain.id, gain.rc()),
                bias: bias.id,
                cache,
            },
            tracked,
        ))
    }

    pub fn row_affine(&mut self, x: &Var<T>, scale: &Var<T>, offset: &Var<T>) -> Result<Var<T>> {
        let out = ops::row_affine(&x.value, &scale.value, &offset.value)?;
        let tracked = x.id.is_some() || scale.id.is_some() || offset.id.is_some();
        Ok(self.push(
            out,
            Op::RowAffine {
                x: (x.id, x.rc()),
                scale: (scale.id, scale.rc()),
                offset: offset.id,
            },
            tracked,
        ))
    }

    pub fn transpose(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = x.value.transpose()?;
        Ok(self.push(out, Op::Transpose(x.id), x.id.is_some()))
    }

    pub fn slice_cols(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let (rows, cols) = x.value.dims2("slice_cols")?;
        let out = x.value.slice_cols(start, len)?;
        Ok(self.push(
            out,
            Op::SliceCols {
                x: x.id,
                start,
                rows,
                cols,
            },
            x.id.is_some(),
        ))
    }

    pub fn slice_rows(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let (rows, cols) = x.value.dims2("slice_rows")?;
        let out = x.value.slice_rows(start, len)?;
        Ok(self.push(
            out,
            Op::SliceRows {
                x: x.id,
                start,
                rows,
                cols,
            },
            x.id.is_some(),
        ))
    }

    pub fn concat_cols(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (_, ca) = a.value.dims2("concat_cols")?;
        let (_, cb) = b.value.dims2("concat_cols")?;
        let out = a.value.concat_cols(&b.value)?;
        Ok(self.push(
            out,
            Op::ConcatCols(a.id, ca, b.id, cb),
            a.id.is_some() || b.id.is_some(),
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 − p` and
    /// rescales kept elements by `1/(1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: &Var<T>, p: f64, rng: &mut R) -> Var<T> {
        if p <= 0.0 {
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mut mask = NdArray::zeros(x.shape());
        for m in mask.data_mut() {
            if rng.random::<f64>() >= p {
                *m = keep;
            }
        }
        let out = x.value.zip_map(&mask, |a, m| a * m);
        self.push(out, Op::Dropout(x.id, mask), x.id.is_some())
    }

    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let out = NdArray::scalar(x.value.sum());
        self.push(out, Op::Sum(x.id, x.shape().to_vec()), x.id.is_some())
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[&Var<T>],
        value: NdArray<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var<T> {
        let tracked = inputs.iter().any(|v| v.id.is_some());
        let inputs = if self.recording && tracked {
            inputs.iter().map(|v| (v.id, v.rc())).collect()
        } else {
            Vec::new()
        };
        self.push(value, Op::Custom { inputs, op }, tracked)
    }

    /// Reverse pass seeded with ones at `root` (the gradient of `sum(root)`).
    pub fn backward(&self, root: &Var<T>) -> Result<Grads<T>> {
        let root_id = root
            .id
            .ok_or_else(|| dim_err("backward", "root is not recorded on this tape"))?;
        let mut grads: Vec<Option<NdArray<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root_id] = Some(NdArray::ones(root.shape()));
        let mut visit_order = Vec::new();

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visit_order.push(id);
            let node = &self.nodes[id];
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |target: Id, d: NdArray<T>| {
                if let Some(t) = target {
                    match &mut grads[t] {
                        Some(acc) => acc.add_assign(&d),
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::Add(a, b) => {
                    if b.is_some() {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if b.is_some() {
                        send(*b, g.map(|v| -v));
                    }
                    send(*a, g);
                }
                Op::Mul(a, av, b, bv) => {
                    if a.is_some() {
                        send(*a, g.zip_map(bv, |x, y| x * y));
                    }
                    if b.is_some() {
                        send(*b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, g.map(|v| v * c));
                }
                Op::Act(x, xv, kind) => {
                    let kind = *kind;
                    send(*x, g.zip_map(xv, |gv, xv| gv * kind.derivative(xv)));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(&x.1, &w.1, &g)?;
                    send(x.0, dx);
                    send(w.0, dw);
                    send(*b, db);
                }
                Op::Conv1d { x, w, b, stride } => {
                    let (dx, dw, db) = ops::conv1d_backward(&x.1, &w.1, &g, *stride)?;
                    send(x.0, dx);
                    send(w.0, dw);
                    send(*b, db);
                }
                Op::TransposedConv1d { x, w, stride } => {
                    let (dx, dw) = ops::transposed_conv1d_backward(&x.1, &w.1, &g, *stride)?;
                    send(x.0, dx);
                    send(w.0, dw);
                }
                Op::Depthwise { x, w, time_major } => {
                    let (dx, dw) = if *time_major {
                        ops::depthwise_conv1d_rows_backward(&x.1, &w.1, &g)?
                    } else {
                        ops::depthwise_conv1d_backward(&x.1, &w.1, &g)?
                    };
                    send(x.0, dx);
                    send(w.0, dw);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let (dx, dgain, dbias) = ops::layer_norm_backward(cache, &gain.1, &g)?;
                    send(*x, dx);
                    send(gain.0, dgain);
                    send(*bias, dbias);
                }
                Op::RowAffine { x, scale, offset } => {
                    let (rows, n) = g.dims2("row_affine_backward")?;
                    let mut dx = vec![T::zero(); rows * n];
                    let mut ds = vec![T::zero(); n];
                    let mut doff = vec![T::zero(); n];
                    let (gd, xd, sd) = (g.data(), x.1.data(), scale.1.data());
                    for r in 0..rows {
                        for j in 0..n {
                            let gv = gd[r * n + j];
                            dx[r * n + j] = gv * sd[j];
                            ds[j] += gv * xd[r * n + j];
                            doff[j] += gv;
                        }
                    }
                    send(x.0, NdArray::from_vec(&[rows, n], dx)?);
                    send(scale.0, NdArray::from_vec(&[n], ds)?);
                    send(*offset, NdArray::from_vec(&[n], doff)?);
                }
                Op::Transpose(x) => send(*x, g.transpose()?),
                Op::SliceCols {
                    x,
                    start,
                    rows,
                    cols,
                } => {
                    let len = node.shape[1];
                    let mut dx = vec![T::zero(); rows * cols];
                    for (r, row) in g.data().chunks_exact(len).enumerate() {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(row);
                    }
                    send(*x, NdArray::from_vec(&[*rows, *cols], dx)?);
                }
                Op::SliceRows {
                    x,
                    start,
                    rows,
                    cols,
                } => {
                    let mut dx = vec![T::zero(); rows * cols];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    send(*x, NdArray::from_vec(&[*rows, *cols], dx)?);
                }
                Op::ConcatCols(a, ca, b, cb) => {
                    if a.is_some() {
                        send(*a, g.slice_cols(0, *ca)?);
                    }
                    if b.is_some() {
                        send(*b, g.slice_cols(*ca, *cb)?);
                    }
                }
                Op::Dropout(x, mask) => send(*x, g.zip_map(mask, |a, m| a * m)),
                Op::Sum(x, shape) => send(*x, NdArray::full(shape, g.data()[0])),
                Op::Custom { inputs, op } => {
                    let values: Vec<_> = inputs.iter().map(|(_, v)| Rc::clone(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|(id, _)| id.is_some()).collect();
                    let dins = op.backward(&values, &g, &needs)?;
                    for ((tid, _), d) in inputs.iter().zip(dins) {
                        if let (Some(_), Some(d)) = (tid, d) {
                            send(*tid, d);
                        }
                    }
                }
            }
        }
        Ok(Grads { grads, visit_order })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var<f64> {
        tape.leaf(Rc::new(NdArray::from_f64(shape, v).unwrap()), None)
    }

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1., 2.]);
        let b = leaf(&mut tape, &[2], &[3., 4.]);
        let c = tape.mul(&a, &b).unwrap();
        let d = tape.add(&c, &a).unwrap();
        let e = tape.sum(&d);
        let grads = tape.backward(&e).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), e.id().as_ref());
        assert_eq!(grads.get(&a).unwrap().data(), &[4., 5.]);
        assert_eq!(grads.get(&b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f64>::inference();
        let a = leaf(&mut tape, &[2], &[1., 2.]);
        let b = tape.scale(&a, 3.0);
        assert!(tape.is_empty());
        assert!(!b.is_tracked());
        assert_eq!(b.value().data(), &[3., 6.]);
        assert!(tape.backward(&b).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1., 2.]);
        let k = tape.constant(NdArray::from_f64(&[2], &[10., 20.]).unwrap());
        let p = tape.mul(&a, &k).unwrap();
        let s = tape.sum(&p);
        let grads = tape.backward(&s).unwrap();
        assert!(grads.get(&k).is_none());
        assert_eq!(grads.get(&a).unwrap().data(), &[10., 20.]);
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Rc::new(NdArray::<f64>::ones(&[1000])), None);
        let y = tape.dropout(&x, 0.25, &mut rng);
        let kept = y.value().data().iter().filter(|&&v| v != 0.0).count();
        assert!(y
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        assert!((kept as f64 / 1000.0 - 0.75).abs() < 0.05);
        let y0 = tape.dropout(&x, 0.0, &mut rng);
        assert_eq!(y0.value(), x.value());
    }
}
