//! Elementwise, reduction and layout operations.

use super::{numel, split_axis, Backward, GradSink, Tape, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

struct AddOp(Var, Var);

impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(self.0, grad);
        sink.add(self.1, grad);
    }
}

struct SubOp(Var, Var);

impl<T: Scalar> Backward<T> for SubOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(self.0, grad);
        if let Some(s) = sink.slot(self.1) {
            for (s, &g) in s.iter_mut().zip(grad) {
                *s -= g;
            }
        }
    }
}

struct MulOp(Var, Var);

impl<T: Scalar> Backward<T> for MulOp {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (a, b) = (tape.value(self.0), tape.value(self.1));
        if let Some(s) = sink.slot(self.0) {
            for ((s, &g), &bv) in s.iter_mut().zip(grad).zip(b) {
                *s += g * bv;
            }
        }
        if let Some(s) = sink.slot(self.1) {
            for ((s, &g), &av) in s.iter_mut().zip(grad).zip(a) {
                *s += g * av;
            }
        }
    }
}

struct AffineOp<T> {
    input: Var,
    scale: T,
}

impl<T: Scalar> Backward<T> for AffineOp<T> {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(self.input) {
            for (s, &g) in s.iter_mut().zip(grad) {
                *s += g * self.scale;
            }
        }
    }
}

struct ExpOp(Var);

impl<T: Scalar> Backward<T> for ExpOp {
    fn backward(&self, tape: &Tape<T>, out: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let y = tape.value(out);
        if let Some(s) = sink.slot(self.0) {
            for ((s, &g), &y) in s.iter_mut().zip(grad).zip(y) {
                *s += g * y;
            }
        }
    }
}

struct SumAllOp(Var);

impl<T: Scalar> Backward<T> for SumAllOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(self.0) {
            for s in s.iter_mut() {
                *s += grad[0];
            }
        }
    }
}

struct SumAxisOp<T> {
    input: Var,
    outer: usize,
    len: usize,
    inner: usize,
    scale: T,
}

impl<T: Scalar> Backward<T> for SumAxisOp<T> {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(self.input) {
            for o in 0..self.outer {
                for a in 0..self.len {
                    let dst = &mut s[(o * self.len + a) * self.inner..][..self.inner];
                    let src = &grad[o * self.inner..][..self.inner];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g * self.scale;
                    }
                }
            }
        }
    }
}

struct ReshapeOp(Var);

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(self.0, grad);
    }
}

struct PermuteOp {
    input: Var,
    /// For each output element, the flat index of its source.
    gather: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PermuteOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(self.input) {
            for (&src, &g) in self.gather.iter().zip(grad) {
                s[src] += g;
            }
        }
    }
}

struct RepeatLeadingOp(Var);

impl<T: Scalar> Backward<T> for RepeatLeadingOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(self.0) {
            let n = s.len();
            for chunk in grad.chunks(n) {
                for (d, &g) in s.iter_mut().zip(chunk) {
                    *d += g;
                }
            }
        }
    }
}

struct PairwiseDiffOp {
    row: Var,
    col: Var,
    groups: usize,
    n_row: usize,
    n_col: usize,
}

impl<T: Scalar> Backward<T> for PairwiseDiffOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (g_n, nr, nc) = (self.groups, self.n_row, self.n_col);
        if let Some(s) = sink.slot(self.row) {
            for g in 0..g_n {
                for i in 0..nr {
                    let row = &grad[(g * nr + i) * nc..][..nc];
                    s[g * nr + i] += row.iter().copied().sum::<T>();
                }
            }
        }
        if let Some(s) = sink.slot(self.col) {
            for g in 0..g_n {
                for i in 0..nr {
                    let row = &grad[(g * nr + i) * nc..][..nc];
                    for (j, &v) in row.iter().enumerate() {
                        s[g * nc + j] -= v;
                    }
                }
            }
        }
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push("add", self.shape(a).to_vec(), v, &[a, b], AddOp(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push("sub", self.shape(a).to_vec(), v, &[a, b], SubOp(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push("mul", self.shape(a).to_vec(), v, &[a, b], MulOp(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).iter().map(|&x| scale * x + shift).collect();
        self.push("affine", self.shape(x).to_vec(), v, &[x], AffineOp { input: x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&x| x.exp()).collect();
        self.push("exp", self.shape(x).to_vec(), v, &[x], ExpOp(x))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], &[x], SumAllOp(x))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(contract(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(contract("cannot reduce over an empty axis"));
        }
        let scale = if mean { T::one() / T::from_usize_lossy(len) } else { T::one() };
        let src = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for a in 0..len {
                for (d, &v) in dst.iter_mut().zip(&src[(o * len + a) * inner..][..inner]) {
                    *d += v;
                }
            }
            if mean {
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let label = if mean { "mean_axis" } else { "sum_axis" };
        Ok(self.push(label, out_shape, out, &[x], SumAxisOp { input: x, outer, len, inner, scale }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(contract(format!("cannot reshape {:?} into {:?}", self.shape(x), shape)));
        }
        let v = self.value(x).to_vec();
        Ok(self.push("reshape", shape.to_vec(), v, &[x], ReshapeOp(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out_shape, gather) = permute_gather(&shape, perm)?;
        let src = self.value(x);
        let v = gather.iter().map(|&i| src[i]).collect();
        Ok(self.push("permute", out_shape, v, &[x], PermuteOp { input: x, gather }))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(contract("repeat count must be positive"));
        }
        let src = self.value(x);
        let mut v = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            v.extend_from_slice(src);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        Ok(self.push("repeat_leading", shape, v, &[x], RepeatLeadingOp(x)))
    }

    /// `out[.., i, j] = row[.., i] - col[.., j]` over matching leading axes.
    pub fn pairwise_diff(&mut self, row: Var, col: Var) -> Result<Var> {
        let (rs, cs) = (self.shape(row).to_vec(), self.shape(col).to_vec());
        if rs.is_empty() || cs.len() != rs.len() || rs[..rs.len() - 1] != cs[..cs.len() - 1] {
            return Err(contract(format!("pairwise_diff: incompatible shapes {rs:?} and {cs:?}")));
        }
        let n_row = rs[rs.len() - 1];
        let n_col = cs[cs.len() - 1];
        let groups = numel(&rs[..rs.len() - 1]);
        let (r, c) = (self.value(row), self.value(col));
        let mut v = Vec::with_capacity(groups * n_row * n_col);
        for g in 0..groups {
            for i in 0..n_row {
                let ri = r[g * n_row + i];
                v.extend(c[g * n_col..][..n_col].iter().map(|&cj| ri - cj));
            }
        }
        let mut shape = rs.clone();
        shape.push(n_col);
        Ok(self.push("pairwise_diff", shape, v, &[row, col], PairwiseDiffOp { row, col, groups, n_row, n_col }))
    }
}

/// Output shape and source-index table of an axis permutation.
pub(crate) fn permute_gather(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(contract(format!("{perm:?} is not a permutation of {rank} axes")));
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut gather = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        gather.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok((out_shape, gather))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y), &[1., 4., 2., 5., 3., 6.]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn pairwise_diff_example() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&[2], vec![0.2, 0.8]).unwrap();
        let k = tape.constant(&[1], vec![0.5]).unwrap();
        let d = tape.pairwise_diff(q, k).unwrap();
        assert_eq!(tape.shape(d), &[2, 1]);
        assert!((tape.value(d)[0] + 0.3).abs() < 1e-15);
        assert!((tape.value(d)[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reductions_and_layout_gradients() {
        let x = t(&[2, 3, 2], &[0.3, -1.2, 0.5, 0.9, 2.0, -0.4, 0.1, 0.7, -0.8, 1.1, 0.6, -0.2]);
        let w = t(&[3, 2, 2], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let report = finite_diff_check(
            |tape, x| {
                let p = tape.permute(x, &[1, 2, 0])?;
                let c = tape.constant(w.shape(), w.data().to_vec())?;
                let m = tape.mul(p, c)?;
                let e = tape.exp(m);
                let r = tape.mean_axis(e, 1)?;
                let rep = tape.repeat_leading(r, 2)?;
                let s = tape.sum_axis(rep, 2)?;
                let d = tape.pairwise_diff(s, s)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
