//! Softmax along one axis, stabilised by a per-lane max shift.

use std::sync::Arc;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::shape::check_axis;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();

        let xv = self.value_arc(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = xv[base];
                for l in 1..lane {
                    let v = xv[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for l in 0..lane {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    denom += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= denom;
                }
            }
        }
        if !self.needs_grad(x) {
            return Ok(self.record_value(shape, out));
        }
        let yv = Arc::new(out);
        let y_back = Arc::clone(&yv);
        let n = xv.len();
        Ok(self.record_arc(shape, yv, move |gout, sink| {
            let g = sink.accum(x, n);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = T::zero();
                    for l in 0..lane {
                        let idx = base + l * inner;
                        dot += gout[idx] * y_back[idx];
                    }
                    for l in 0..lane {
                        let idx = base + l * inner;
                        g[idx] += y_back[idx] * (gout[idx] - dot);
                    }
                }
            }
        }))
    }
}
