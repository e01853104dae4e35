//! Value-level tensor kernels. Every kernel is a pure function of its
//! inputs; [`super::Graph`] wraps them with backward rules.

use super::{gemm, strides, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Strict division: a zero denominator is an error. Guarded division
    /// is expressed as `a / (b + eps)` by the caller.
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Square,
    Sqrt,
    Relu,
    Tanh,
    Exp,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Population variance (divisor = count).
    Variance,
}

/// Broadcast shape under the trailing-dimension rule.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero where
/// the extent is stretched).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output position of a broadcast together with the matching
/// flat offsets into `a` and `b`.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f: fn(Real, Real) -> Real = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    };
    if op == BinaryOp::Div {
        if let Some(index) = b.data().iter().position(|&y| y == 0.0) {
            return Err(Error::ZeroDenominator { index });
        }
    }
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let n = out.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    Ok(Tensor::from_parts(out, data))
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Tensor {
    match op {
        UnaryOp::Neg => a.map(|x| -x),
        UnaryOp::Square => a.map(|x| x * x),
        UnaryOp::Sqrt => a.map(Real::sqrt),
        UnaryOp::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
        UnaryOp::Tanh => a.map(Real::tanh),
        UnaryOp::Exp => a.map(Real::exp),
        UnaryOp::Sigmoid => a.map(sigmoid),
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `t` down to `shape`, undoing a broadcast.
pub fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let out = t.shape();
    if broadcast_shape(shape, out)? != out {
        return Err(Error::ShapeMismatch {
            op: "sum_to_shape",
            lhs: out.to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let mut data = vec![0.0; shape.iter().product()];
    let src = t.data();
    for_each_broadcast(out, shape, out, |o, i, _| data[i] += src[o]);
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Expands `t` to `shape` by the broadcast rule.
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    if broadcast_shape(t.shape(), shape)? != shape {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let mut data = vec![0.0; shape.iter().product()];
    let src = t.data();
    for_each_broadcast(shape, t.shape(), shape, |o, i, _| data[o] = src[i]);
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Matrix product of two rank-2 tensors, or a batched product of two
/// rank-3 tensors with equal batch extent.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// [`matmul`] with optional transposition of the last two axes of either
/// operand, without materialising the transpose.
pub fn matmul_t(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (batch, sa, sb) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) => (1, [*m, *k], [*k2, *n]),
        ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, [*m, *k], [*k2, *n]),
        _ => return Err(mismatch()),
    };
    let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
    let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            trans_a,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            trans_b,
            &mut out[bi * m * n..(bi + 1) * m * n],
            0.0,
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let src = t.data();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Swaps two axes.
pub fn transpose(t: &Tensor, d0: usize, d1: usize) -> Result<Tensor> {
    let rank = t.rank();
    for d in [d0, d1] {
        if d >= rank {
            return Err(Error::AxisOutOfRange { axis: d, rank });
        }
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(d0, d1);
    permute(t, &perm)
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (i != axis).then_some(d))
        .collect()
}

/// Reduces along `axis`, removing it from the shape.
pub fn reduce(op: ReduceOp, t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(t.shape(), axis)?;
    let src = t.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let lane = (0..len).map(|l| src[base + l * inner + i]);
            out[o * inner + i] = match op {
                ReduceOp::Sum => lane.sum(),
                ReduceOp::Mean => lane.sum::<Real>() / len as Real,
                ReduceOp::Max => lane.fold(Real::NEG_INFINITY, Real::max),
                ReduceOp::Variance => variance(lane, len),
            };
        }
    }
    Ok(Tensor::from_parts(drop_axis(t.shape(), axis), out))
}

/// Population variance as mean-of-squares minus square-of-mean, with the
/// lane shifted by its first element and Kahan-compensated sums.
fn variance(mut lane: impl Iterator<Item = Real>, len: usize) -> Real {
    let Some(shift) = lane.next() else { return 0.0 };
    let (mut s1, mut c1, mut s2, mut c2) = (0.0, 0.0, 0.0, 0.0);
    for x in lane {
        let d = x - shift;
        kahan_add(&mut s1, &mut c1, d);
        kahan_add(&mut s2, &mut c2, d * d);
    }
    let n = len as Real;
    let mean = s1 / n;
    (s2 / n - mean * mean).max(0.0)
}

fn kahan_add(sum: &mut Real, comp: &mut Real, x: Real) {
    let y = x - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(t.shape(), axis)?;
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |l: usize| base + l * inner + i;
            let max = (0..len).map(|l| src[at(l)]).fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for l in 0..len {
                let e = (src[at(l)] - max).exp();
                out[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[at(l)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let others_match = same_rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !others_match {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, full, inner) = split_axis(t.shape(), axis)?;
    if len == 0 || start + len > full {
        return Err(Error::invalid(format!(
            "narrow [{start}, {}) out of extent {full}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Reverses the order of elements along `axis`.
pub fn flip(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(t.shape(), axis)?;
    let src = t.data();
    let mut data = Vec::with_capacity(t.numel());
    for o in 0..outer {
        for l in (0..len).rev() {
            let base = (o * len + l) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn self_subtraction_and_square() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(binary(BinaryOp::Sub, &a, &a).unwrap().data(), &[0.0, 0.0]);
        let b = t(&[2], &[-2.0, 3.0]);
        assert_eq!(unary(UnaryOp::Square, &b).data(), &[4.0, 9.0]);
    }

    #[test]
    fn divide_rejects_zero_denominator() {
        let a = t(&[2], &[1.0, 0.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert!(matches!(
            binary(BinaryOp::Div, &a, &b),
            Err(Error::ZeroDenominator { index: 0 })
        ));
        // Guarded form used by the normalizations: a / (b + eps).
        let eps = Tensor::scalar(1e-6);
        let guarded = binary(BinaryOp::Add, &b, &eps).unwrap();
        let q = binary(BinaryOp::Div, &a, &guarded).unwrap();
        assert!(q.is_finite());
        assert_eq!(q.data()[1], 0.0);
    }

    #[test]
    fn broadcast_trailing_rule() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = t(&[3], &[10.0, 20.0, 30.0]);
        let col = t(&[2, 1], &[100.0, 200.0]);
        assert_eq!(
            binary(BinaryOp::Add, &a, &row).unwrap().data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        assert_eq!(
            binary(BinaryOp::Add, &a, &col).unwrap().data(),
            &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]
        );
        let bad = t(&[2], &[1.0, 2.0]);
        assert!(matches!(
            binary(BinaryOp::Add, &a, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sum_to_shape_inverts_broadcast() {
        let g = Tensor::ones([2, 3]).unwrap();
        assert_eq!(sum_to_shape(&g, &[3]).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(sum_to_shape(&g, &[2, 1]).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(sum_to_shape(&g, &[]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_small_cases() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&m, &v).unwrap().data(), &[3.0, 7.0]);
        let i3 = Tensor::eye(3).unwrap();
        let x = Tensor::from_fn([3, 4], |i| i as Real * 0.5 - 1.0).unwrap();
        assert_eq!(matmul(&i3, &x).unwrap(), x);
        assert!(matmul(&m, &x).is_err());
    }

    #[test]
    fn reductions() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce(ReduceOp::Sum, &a, 1).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(reduce(ReduceOp::Mean, &a, 0).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(reduce(ReduceOp::Max, &a, 1).unwrap().data(), &[2.0, 4.0]);
        let v = t(&[2], &[0.0, 2.0]);
        assert_eq!(reduce(ReduceOp::Variance, &v, 0).unwrap().data(), &[1.0]);
        let c = Tensor::full([5], 0.1).unwrap();
        assert_eq!(reduce(ReduceOp::Variance, &c, 0).unwrap().data(), &[0.0]);
        assert!(matches!(
            reduce(ReduceOp::Sum, &a, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_cases() {
        let z = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5]);
        let big = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() <= Real::EPSILON && big.data()[1] <= Real::MIN_POSITIVE);
        // direct formula on [1,2,3]
        let s = softmax(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        let den: Real = (1..=3).map(|k| (k as Real).exp()).sum();
        for (k, &p) in s.data().iter().enumerate() {
            let direct = ((k + 1) as Real).exp() / den;
            assert!((p - direct).abs() <= 4.0 * Real::EPSILON * direct);
        }
    }

    #[test]
    fn layout_ops() {
        let a = Tensor::from_fn([2, 3, 4], |i| i as Real).unwrap();
        let p = permute(&a, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), a.at(&[1, 2, 3]));
        let c = concat(&[a.clone(), a.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6, 4]);
        assert_eq!(narrow(&c, 1, 3, 3).unwrap(), a);
        let f = flip(&a, 2).unwrap();
        assert_eq!(f.at(&[1, 1, 0]), a.at(&[1, 1, 3]));
        assert_eq!(flip(&f, 2).unwrap(), a);
        assert!(permute(&a, &[0, 0, 1]).is_err());
    }
}
