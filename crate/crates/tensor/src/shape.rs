//! Index arithmetic shared by the op kernels: row-major strides and
//! trailing-axis broadcast alignment.

use crate::error::{Result, TensorError};

/// Number of elements implied by a shape. Empty shape = scalar = 1 element.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes with trailing-axis alignment (an extent of 1
/// stretches; missing leading axes are treated as 1).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_shape`
/// (broadcast axes read with stride 0). `shape` must broadcast to `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 { 0 } else { base[i] };
    }
    s
}

/// Walk every index of `out_shape` in row-major order, tracking one flat
/// offset per stride set. Stride sets may contain zeros (broadcast) or a
/// permutation of another layout's strides. Calls `f(out_flat, offsets)`.
pub fn for_each_offset(
    out_shape: &[usize],
    stride_sets: &[Vec<usize>],
    mut f: impl FnMut(usize, &[usize]),
) {
    let rank = out_shape.len();
    let n = numel(out_shape);
    let k = stride_sets.len();
    let mut counters = vec![0usize; rank];
    let mut offs = vec![0usize; k];
    for flat in 0..n {
        f(flat, &offs);
        for ax in (0..rank).rev() {
            counters[ax] += 1;
            for (o, s) in offs.iter_mut().zip(stride_sets) {
                *o += s[ax];
            }
            if counters[ax] < out_shape[ax] {
                break;
            }
            counters[ax] = 0;
            for (o, s) in offs.iter_mut().zip(stride_sets) {
                *o -= s[ax] * out_shape[ax];
            }
        }
    }
}

/// Iterate flat indices of a broadcast operand aligned to an output shape.
/// Calls `f(out_flat, in_flat)` for every element of the output.
pub fn for_each_broadcast(out_shape: &[usize], in_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let sets = [broadcast_strides(in_shape, out_shape)];
    for_each_offset(out_shape, &sets, |flat, offs| f(flat, offs[0]));
}

/// Validate an axis against a rank.
pub fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_trailing_alignment() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_stride_zeroes_stretched_axes() {
        assert_eq!(broadcast_strides(&[3], &[2, 3]), vec![0, 1]);
        assert_eq!(broadcast_strides(&[2, 1], &[2, 5]), vec![1, 0]);
    }

    #[test]
    fn offset_walk_matches_manual_decompose() {
        let out = [2usize, 3, 4];
        let inp = [3usize, 1];
        let mut got = Vec::new();
        for_each_broadcast(&out, &inp, |flat, src| got.push((flat, src)));
        assert_eq!(got.len(), 24);
        for (flat, src) in got {
            let j = (flat / 4) % 3;
            assert_eq!(src, j, "flat {flat}");
        }
    }

    #[test]
    fn offset_walk_scalar_output() {
        let mut calls = 0;
        for_each_offset(&[], &[vec![]], |flat, offs| {
            assert_eq!(flat, 0);
            assert_eq!(offs, &[0]);
            calls += 1;
        });
        assert_eq!(calls, 1);
    }
}
