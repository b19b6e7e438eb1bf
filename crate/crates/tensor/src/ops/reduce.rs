//! Reductions: full sums and means, plus sums over selected axes.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_strides, check_axis, for_each_offset, numel};
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let total: T = xv.iter().copied().sum();
        if !self.needs_grad(x) {
            return self.record_value(vec![], vec![total]);
        }
        let n = xv.len();
        self.record(vec![], vec![total], move |gout, sink| {
            let g = sink.accum(x, n);
            for v in g.iter_mut() {
                *v += gout[0];
            }
        })
    }

    /// Arithmetic mean of all elements as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of_usize(n))
    }

    /// Sum over the given axes. With `keepdims` the reduced axes stay as
    /// extent-1 dimensions, otherwise they are removed (reducing every axis
    /// without `keepdims` yields a rank-0 tensor).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut reduce = vec![false; rank];
        for &ax in axes {
            check_axis("sum_axes", ax, rank)?;
            if reduce[ax] {
                return Err(TensorError::invalid("sum_axes", format!("duplicate axis {ax}")));
            }
            reduce[ax] = true;
        }
        let kept_shape: Vec<usize> =
            (0..rank).map(|i| if reduce[i] { 1 } else { in_shape[i] }).collect();
        let out_shape: Vec<usize> = if keepdims {
            kept_shape.clone()
        } else {
            (0..rank).filter(|&i| !reduce[i]).map(|i| in_shape[i]).collect()
        };

        let xv = self.value_arc(x);
        let sets = [broadcast_strides(&kept_shape, &in_shape)];
        let mut out = vec![T::zero(); numel(&kept_shape)];
        for_each_offset(&in_shape, &sets, |flat, offs| {
            out[offs[0]] += xv[flat];
        });
        if !self.needs_grad(x) {
            return Ok(self.record_value(out_shape, out));
        }
        let n = xv.len();
        Ok(self.record(out_shape, out, move |gout, sink| {
            let g = sink.accum(x, n);
            for_each_offset(&in_shape, &sets, |flat, offs| {
                g[flat] += gout[offs[0]];
            });
        }))
    }

    /// Mean over the given axes; same axis semantics as [`Tape::sum_axes`].
    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut count = 1usize;
        for &ax in axes {
            check_axis("mean_axes", ax, in_shape.len())?;
            count *= in_shape[ax];
        }
        let s = self.sum_axes(x, axes, keepdims)?;
        Ok(self.scale(s, T::one() / T::of_usize(count)))
    }
}
