//! Scale-invariant SDR, its improvement over the mixture, and
//! utterance-level permutation-invariant assignment.
//!
//! Both signals are centered before scoring:
//!
//! ```text
//! α      = ⟨est, ref⟩ / (‖ref‖² + eps)
//! target = α·ref,  e = est − target
//! sdr    = 10·log10((‖target‖² + eps) / (‖e‖² + eps))
//! ```

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{CustomOp, NdArray, Scalar, Tape, Var};

pub const EPS: f64 = 1e-8;

/// Largest speaker count the exhaustive assignment search accepts.
pub const MAX_PIT_SPEAKERS: usize = 4;

fn centered<T: Scalar>(x: &[T]) -> Vec<T> {
    let mean = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
    x.iter().map(|&v| v - mean).collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn check_pair<T: Scalar>(est: &[T], reference: &[T]) -> Result<()> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(dim_err(
            "si_sdr",
            format!(
                "estimate has {} samples, reference {}",
                est.len(),
                reference.len()
            ),
        ));
    }
    if reference.iter().all(|v| *v == T::zero()) {
        return Err(Error::InvalidReference);
    }
    Ok(())
}

struct Parts<T> {
    value: T,
    alpha: T,
    r: Vec<T>,
    e: Vec<T>,
    ref_energy: T,
    num: T,
    den: T,
}

fn parts<T: Scalar>(est: &[T], reference: &[T], eps: T) -> Parts<T> {
    let x = centered(est);
    let r = centered(reference);
    let ref_energy = dot(&r, &r);
    let alpha = dot(&x, &r) / (ref_energy + eps);
    let e: Vec<T> = x.iter().zip(&r).map(|(&xi, &ri)| xi - alpha * ri).collect();
    let num = alpha * alpha * ref_energy + eps;
    let den = dot(&e, &e) + eps;
    Parts {
        value: T::of(10.0) * (num / den).log10(),
        alpha,
        r,
        e,
        ref_energy,
        num,
        den,
    }
}

/// SI-SDR in dB, evaluated in the signals' own precision.
pub fn si_sdr_eps<T: Scalar>(est: &[T], reference: &[T], eps: f64) -> Result<T> {
    check_pair(est, reference)?;
    Ok(parts(est, reference, T::of(eps)).value)
}

/// SI-SDR in dB with `eps = 1e-8`.
pub fn si_sdr<T: Scalar>(est: &[T], reference: &[T]) -> Result<T> {
    si_sdr_eps(est, reference, EPS)
}

/// `si_sdr(est, ref) − si_sdr(mix, ref)`.
pub fn si_sdri<T: Scalar>(est: &[T], mix: &[T], reference: &[T]) -> Result<T> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Gradient of SI-SDR with respect to the raw estimate.
fn si_sdr_grad<T: Scalar>(p: &Parts<T>, eps: T) -> Vec<T> {
    let two = T::of(2.0);
    let r_e = dot(&p.r, &p.e);
    let ref_total = p.ref_energy + eps;
    let c_num = two * p.alpha * p.ref_energy / ref_total / p.num;
    let c = T::of(10.0 / std::f64::consts::LN_10);
    let mut g: Vec<T> =
        p.r.iter()
            .zip(&p.e)
            .map(|(&r, &e)| c * (c_num * r - two * (e - r * r_e / ref_total) / p.den))
            .collect();
    let mean = g.iter().copied().sum::<T>() / T::of(g.len() as f64);
    g.iter_mut().for_each(|v| *v -= mean);
    g
}

struct SiSdrOp<T> {
    reference: Vec<T>,
    eps: T,
}

impl<T: Scalar> CustomOp<T> for SiSdrOp<T> {
    fn name(&self) -> &'static str {
        "si_sdr"
    }

    fn backward(
        &self,
        inputs: &[Rc<NdArray<T>>],
        grad_out: &NdArray<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<NdArray<T>>>> {
        let est = &inputs[0];
        let p = parts(est.data(), &self.reference, self.eps);
        let upstream = grad_out.data()[0];
        let g = si_sdr_grad(&p, self.eps)
            .into_iter()
            .map(|v| v * upstream)
            .collect();
        Ok(vec![Some(NdArray::from_vec(est.shape(), g)?)])
    }
}

/// SI-SDR of a recorded estimate (any shape, flattened) against a fixed
/// reference; returns a scalar node.
pub fn tape_si_sdr<T: Scalar>(
    tape: &mut Tape<T>,
    est: &Var<T>,
    reference: &[T],
    eps: f64,
) -> Result<Var<T>> {
    check_pair(est.value().data(), reference)?;
    let eps = T::of(eps);
    let p = parts(est.value().data(), reference, eps);
    let value = NdArray::scalar(p.value);
    Ok(tape.custom(
        &[est],
        value,
        Box::new(SiSdrOp {
            reference: reference.to_vec(),
            eps,
        }),
    ))
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// The assignment maximizing mean SI-SDR, where `perm[i]` is the estimate
/// matched to reference `i`. Ties keep the lexicographically smallest
/// permutation. Returns `(perm, mean SI-SDR)`.
pub fn pit_assign<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(
    ests: &[E],
    refs: &[R],
) -> Result<(Vec<usize>, T)> {
    let c = refs.len();
    if ests.len() != c || c == 0 {
        return Err(dim_err(
            "pit_loss",
            format!("{} estimates for {c} references", ests.len()),
        ));
    }
    if c > MAX_PIT_SPEAKERS {
        return Err(Error::Unsupported(format!(
            "exhaustive assignment supports at most {MAX_PIT_SPEAKERS} speakers, got {c}"
        )));
    }
    let mut table = vec![T::zero(); c * c];
    for (i, r) in refs.iter().enumerate() {
        for (j, e) in ests.iter().enumerate() {
            table[i * c + j] = si_sdr(e.as_ref(), r.as_ref())?;
        }
    }
    let mut best: Option<(Vec<usize>, T)> = None;
    for perm in permutations(c) {
        let total: T = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| table[i * c + j])
            .sum();
        let mean = total / T::of(c as f64);
        if best.as_ref().is_none_or(|(_, b)| mean > *b) {
            best = Some((perm, mean));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// `(−max mean SI-SDR, perm)`.
pub fn pit_loss<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(
    ests: &[E],
    refs: &[R],
) -> Result<(T, Vec<usize>)> {
    let (perm, mean) = pit_assign(ests, refs)?;
    Ok((-mean, perm))
}

/// PIT loss on the tape: the assignment is chosen from the current values,
/// then only the selected pairs are recorded.
pub fn tape_pit_loss<T: Scalar, R: AsRef<[T]>>(
    tape: &mut Tape<T>,
    ests: &[Var<T>],
    refs: &[R],
) -> Result<(Var<T>, Vec<usize>)> {
    let values: Vec<&[T]> = ests.iter().map(|v| v.value().data()).collect();
    let (perm, _) = pit_assign(&values, refs)?;
    let mut total: Option<Var<T>> = None;
    for (i, &j) in perm.iter().enumerate() {
        let s = tape_si_sdr(tape, &ests[j], refs[i].as_ref(), EPS)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(&t, &s)?,
        });
    }
    let total = total.expect("at least one speaker");
    Ok((tape.scale(&total, T::of(-1.0 / refs.len() as f64)), perm))
}

/// One separated utterance with its references and mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult<T> {
    pub estimates: Vec<Vec<T>>,
    pub references: Vec<Vec<T>>,
    pub mixture: Vec<T>,
}

impl<T: Scalar> SeparationResult<T> {
    pub fn new(estimates: Vec<Vec<T>>, references: Vec<Vec<T>>, mixture: Vec<T>) -> Result<Self> {
        let len = mixture.len();
        if estimates.len() != references.len()
            || estimates.iter().chain(&references).any(|s| s.len() != len)
        {
            return Err(dim_err(
                "SeparationResult",
                "estimates, references and mixture must agree in count and length".to_string(),
            ));
        }
        Ok(Self {
            estimates,
            references,
            mixture,
        })
    }

    /// Mean SI-SDRi over speakers under the best assignment.
    pub fn si_sdri(&self) -> Result<T> {
        let (perm, _) = pit_assign(&self.estimates, &self.references)?;
        let mut total = T::zero();
        for (i, &j) in perm.iter().enumerate() {
            total += si_sdri(&self.estimates[j], &self.mixture, &self.references[i])?;
        }
        Ok(total / T::of(perm.len() as f64))
    }
}
