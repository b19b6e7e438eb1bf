//! Bilinear upsampling of the last two axes by an integer factor.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Source taps for one output coordinate: (low index, high index, high
/// weight). Uses half-pixel centers with edge clamping.
fn taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let lo = src.floor();
            let w = src - lo;
            let i0 = (lo.max(0.0) as usize).min(in_len - 1);
            let i1 = ((lo + 1.0).max(0.0) as usize).min(in_len - 1);
            (i0, i1, w.clamp(0.0, 1.0))
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    /// Upsample the last two axes by `factor` using bilinear interpolation
    /// with half-pixel alignment. Leading axes are treated as batch.
    pub fn upsample_bilinear2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("upsample_bilinear2d", "input rank must be >= 2"));
        }
        if factor == 0 {
            return Err(TensorError::invalid("upsample_bilinear2d", "factor must be >= 1"));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        let (oh, ow) = (h * factor, w * factor);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let row_taps = taps(oh, h, factor);
        let col_taps = taps(ow, w, factor);

        let xv = self.value_arc(x);
        let mut out = vec![T::zero(); batch * oh * ow];
        for b in 0..batch {
            let src = &xv[b * h * w..(b + 1) * h * w];
            let dst = &mut out[b * oh * ow..(b + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in row_taps.iter().enumerate() {
                let wy = T::of_f64(wy);
                for (ox, &(x0, x1, wx)) in col_taps.iter().enumerate() {
                    let wx = T::of_f64(wx);
                    let one = T::one();
                    let top = src[y0 * w + x0] * (one - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (one - wx) + src[y1 * w + x1] * wx;
                    dst[oy * ow + ox] = top * (one - wy) + bot * wy;
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(oh);
        out_shape.push(ow);
        if !self.needs_grad(x) {
            return Ok(self.record_value(out_shape, out));
        }
        let n = xv.len();
        Ok(self.record(out_shape, out, move |gout, sink| {
            let g = sink.accum(x, n);
            for b in 0..batch {
                let dst = &mut g[b * h * w..(b + 1) * h * w];
                let src = &gout[b * oh * ow..(b + 1) * oh * ow];
                for (oy, &(y0, y1, wy)) in row_taps.iter().enumerate() {
                    let wy = T::of_f64(wy);
                    for (ox, &(x0, x1, wx)) in col_taps.iter().enumerate() {
                        let wx = T::of_f64(wx);
                        let one = T::one();
                        let go = src[oy * ow + ox];
                        dst[y0 * w + x0] += go * (one - wy) * (one - wx);
                        dst[y0 * w + x1] += go * (one - wy) * wx;
                        dst[y1 * w + x0] += go * wy * (one - wx);
                        dst[y1 * w + x1] += go * wy * wx;
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::from_vec(shape, data).unwrap().with_grad(true);
        tape.input(&t)
    }

    #[test]
    fn doubling_2x2_matches_hand_interpolation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = tape.upsample_bilinear2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 4]);
        let want = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (got, want) in tape.data(y).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3, 3], vec![7.0; 9]);
        let y = tape.upsample_bilinear2d(x, 4).unwrap();
        assert_eq!(tape.shape(y), &[1, 12, 12]);
        assert!(tape.data(y).iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_conserves_mass() {
        // sum of output equals weighted sum of inputs, so d(sum)/dx sums
        // the interpolation weights, which total factor^2 per input cell
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.upsample_bilinear2d(x, 2).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        let total: f64 = g.wrt(x).data().iter().sum();
        assert!((total - 16.0).abs() < 1e-12);
    }

    #[test]
    fn factor_one_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.upsample_bilinear2d(x, 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }
}
