//! Batched matrix multiplication with broadcasting over batch dimensions.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, broadcast_strides, for_each_offset, numel};
use crate::tape::{Tape, Var};

fn mm_kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// dA[i,p] += sum_j gout[i,j] * B[p,j]
fn mm_grad_a<T: Scalar>(gout: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &gout[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            ga[i * k + p] += acc;
        }
    }
}

/// dB[p,j] += sum_i A[i,p] * gout[i,j]
fn mm_grad_b<T: Scalar>(gout: &[T], a: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &gout[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &mut gb[p * n..(p + 1) * n];
            for (bv, &g) in brow.iter_mut().zip(grow) {
                *bv += av * g;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `a` has shape `[..., m, k]` and `b` shape `[..., k, n]`; batch
    /// dimensions broadcast against each other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(TensorError::invalid(
                "matmul",
                format!("operands must have rank >= 2, got {ash:?} and {bsh:?}"),
            ));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ash, rhs: bsh });
        }
        let batch_a = ash[..ash.len() - 2].to_vec();
        let batch_b = bsh[..bsh.len() - 2].to_vec();
        let batch = broadcast_shapes("matmul", &batch_a, &batch_b)?;
        let nb = numel(&batch);
        let sets = [broadcast_strides(&batch_a, &batch), broadcast_strides(&batch_b, &batch)];

        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let mut out = vec![T::zero(); nb * m * n];
        for_each_offset(&batch, &sets, |flat, offs| {
            mm_kernel(
                &av[offs[0] * m * k..],
                &bv[offs[1] * k * n..],
                &mut out[flat * m * n..(flat + 1) * m * n],
                m,
                k,
                n,
            );
        });

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let ga = self.needs_grad(a);
        let gb = self.needs_grad(b);
        if !ga && !gb {
            return Ok(self.record_value(out_shape, out));
        }
        let (an, bn) = (av.len(), bv.len());
        Ok(self.record(out_shape, out, move |gout, sink| {
            if ga {
                let g = sink.accum(a, an);
                for_each_offset(&batch, &sets, |flat, offs| {
                    mm_grad_a(
                        &gout[flat * m * n..(flat + 1) * m * n],
                        &bv[offs[1] * k * n..],
                        &mut g[offs[0] * m * k..(offs[0] + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                });
            }
            if gb {
                let g = sink.accum(b, bn);
                for_each_offset(&batch, &sets, |flat, offs| {
                    mm_grad_b(
                        &gout[flat * m * n..(flat + 1) * m * n],
                        &av[offs[0] * m * k..],
                        &mut g[offs[1] * k * n..(offs[1] + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                });
            }
        }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::invalid("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }
}
