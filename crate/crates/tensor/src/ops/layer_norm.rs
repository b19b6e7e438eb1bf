//! Layer normalisation over the last axis with learned gain and bias.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Normalise the last axis of `x` to zero mean and unit variance
    /// (biased variance, `eps` added under the square root), then apply
    /// `gamma` and `beta`, both of shape `[d]` where `d` is the last extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::invalid("layer_norm", "input must have rank >= 1")
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.numel(x) / d;
        let xv = self.value_arc(x);
        let gv = self.value_arc(gamma);
        let bv = self.value_arc(beta);
        let inv_d = T::one() / T::of_usize(d);

        let mut out = vec![T::zero(); xv.len()];
        let mut mu = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let is = T::one() / (var + eps).sqrt();
            mu[r] = mean;
            inv_std[r] = is;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * is * gv[j] + bv[j];
            }
        }

        let gx = self.needs_grad(x);
        let gg = self.needs_grad(gamma);
        let gb = self.needs_grad(beta);
        if !gx && !gg && !gb {
            return Ok(self.record_value(shape, out));
        }
        let mu = Arc::new(mu);
        let inv_std = Arc::new(inv_std);
        let n = xv.len();
        Ok(self.record(shape, out, move |gout, sink| {
            if gb {
                let g = sink.accum(beta, d);
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += gout[r * d + j];
                    }
                }
            }
            if gg {
                let g = sink.accum(gamma, d);
                for r in 0..rows {
                    let is = inv_std[r];
                    let m = mu[r];
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - m) * is;
                        g[j] += gout[r * d + j] * xhat;
                    }
                }
            }
            if gx {
                let g = sink.accum(x, n);
                for r in 0..rows {
                    let is = inv_std[r];
                    let m = mu[r];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let h = gout[r * d + j] * gv[j];
                        let xhat = (xv[r * d + j] - m) * is;
                        m1 += h;
                        m2 += h * xhat;
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let h = gout[r * d + j] * gv[j];
                        let xhat = (xv[r * d + j] - m) * is;
                        g[r * d + j] += is * (h - m1 - xhat * m2);
                    }
                }
            }
        }))
    }
}
