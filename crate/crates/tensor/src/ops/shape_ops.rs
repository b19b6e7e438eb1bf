//! Layout ops: reshape, permute, concat, slice, broadcast.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, broadcast_strides, check_axis, for_each_offset, numel, strides};
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Same elements under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().any(|&d| d == 0) || numel(&shape) != self.numel(x) {
            return Err(TensorError::invalid(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let value = self.value_arc(x);
        if !self.needs_grad(x) {
            return Ok(self.record_value(shape, value.to_vec()));
        }
        let n = value.len();
        Ok(self.record_arc(shape, value, move |gout, sink| {
            let g = sink.accum(x, n);
            for (gi, &go) in g.iter_mut().zip(gout) {
                *gi += go;
            }
        }))
    }

    /// Reorder axes; `perm[i]` names the input axis that becomes output
    /// axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let sets = [perm.iter().map(|&p| in_strides[p]).collect::<Vec<_>>()];

        let xv = self.value_arc(x);
        let mut out = vec![T::zero(); xv.len()];
        for_each_offset(&out_shape, &sets, |flat, offs| {
            out[flat] = xv[offs[0]];
        });
        if !self.needs_grad(x) {
            return Ok(self.record_value(out_shape, out));
        }
        let n = xv.len();
        let shape_back = out_shape.clone();
        Ok(self.record(out_shape, out, move |gout, sink| {
            let g = sink.accum(x, n);
            for_each_offset(&shape_back, &sets, |flat, offs| {
                g[offs[0]] += gout[flat];
            });
        }))
    }

    /// Concatenate along an axis; all other extents must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        check_axis("concat", axis, first.len())?;
        let mut axis_total = 0usize;
        for &x in xs {
            let sh = self.shape(x);
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_row = axis_total * inner;

        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offsets = Vec::with_capacity(xs.len());
        let mut pos = 0usize;
        for &x in xs {
            let len = self.shape(x)[axis];
            let xv = self.value_arc(x);
            for o in 0..outer {
                let src = &xv[o * len * inner..(o + 1) * len * inner];
                out[o * out_row + pos * inner..o * out_row + (pos + len) * inner]
                    .copy_from_slice(src);
            }
            offsets.push((x, pos, len, self.needs_grad(x)));
            pos += len;
        }
        if offsets.iter().all(|&(_, _, _, ng)| !ng) {
            return Ok(self.record_value(out_shape, out));
        }
        Ok(self.record(out_shape, out, move |gout, sink| {
            for &(x, pos, len, ng) in &offsets {
                if !ng {
                    continue;
                }
                let g = sink.accum(x, outer * len * inner);
                for o in 0..outer {
                    let src = &gout[o * out_row + pos * inner..o * out_row + (pos + len) * inner];
                    for (gi, &go) in g[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                        *gi += go;
                    }
                }
            }
        }))
    }

    /// Contiguous range `start..start + len` along an axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        check_axis("slice", axis, in_shape.len())?;
        let extent = in_shape[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} exceeds extent {extent}", start + len),
            ));
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let in_row = extent * inner;

        let xv = self.value_arc(x);
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &xv[o * in_row + start * inner..o * in_row + (start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        if !self.needs_grad(x) {
            return Ok(self.record_value(out_shape, out));
        }
        let n = xv.len();
        Ok(self.record(out_shape, out, move |gout, sink| {
            let g = sink.accum(x, n);
            for o in 0..outer {
                let dst = &mut g[o * in_row + start * inner..o * in_row + (start + len) * inner];
                let src = &gout[o * len * inner..(o + 1) * len * inner];
                for (gi, &go) in dst.iter_mut().zip(src) {
                    *gi += go;
                }
            }
        }))
    }

    /// Materialize `x` stretched to `target` (trailing-axis broadcast
    /// rules). The gradient sums over every stretched axis.
    pub fn broadcast_to(&mut self, x: Var, target: Vec<usize>) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let joint = broadcast_shapes("broadcast_to", &in_shape, &target)?;
        if joint != target {
            return Err(TensorError::ShapeMismatch { op: "broadcast_to", lhs: in_shape, rhs: target });
        }
        let sets = [broadcast_strides(&in_shape, &target)];
        let xv = self.value_arc(x);
        let mut out = vec![T::zero(); numel(&target)];
        for_each_offset(&target, &sets, |flat, offs| {
            out[flat] = xv[offs[0]];
        });
        if !self.needs_grad(x) {
            return Ok(self.record_value(target, out));
        }
        let n = xv.len();
        let shape_back = target.clone();
        Ok(self.record(target, out, move |gout, sink| {
            let g = sink.accum(x, n);
            for_each_offset(&shape_back, &sets, |flat, offs| {
                g[offs[0]] += gout[flat];
            });
        }))
    }
}
