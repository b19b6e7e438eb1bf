//! Direct 2-D convolution over `[batch, channels, height, width]` input.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

fn out_extent(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(TensorError::invalid(op, format!("kernel {k} exceeds padded extent {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

impl<T: Scalar> Tape<T> {
    /// Convolve `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]` plus an
    /// optional `bias: [Cout]`, using zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 4 || wsh.len() != 4 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("expected rank-4 input and kernel, got {xsh:?} and {wsh:?}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        let (bsz, cin, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (cout, wcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if cin != wcin {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xsh, rhs: wsh });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let oh = out_extent("conv2d", h, kh, stride, pad)?;
        let ow = out_extent("conv2d", wd, kw, stride, pad)?;

        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bv = bias.map(|b| self.value_arc(b));
        let mut out = vec![T::zero(); bsz * cout * oh * ow];
        for bi in 0..bsz {
            for co in 0..cout {
                let plane = &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                if let Some(bv) = &bv {
                    plane.fill(bv[co]);
                }
                for ci in 0..cin {
                    let xplane = &xv[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wval = wv[((co * cin + ci) * kh + ky) * kw + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    orow[ox] += wval * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }

        let out_shape = vec![bsz, cout, oh, ow];
        let gx = self.needs_grad(x);
        let gw = self.needs_grad(w);
        let gb = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        if !gx && !gw && !gb {
            return Ok(self.record_value(out_shape, out));
        }
        let (xn, wn) = (xv.len(), wv.len());
        Ok(self.record(out_shape, out, move |gout, sink| {
            if gb {
                let b = bias.expect("bias gradient requested");
                let g = sink.accum(b, cout);
                for bi in 0..bsz {
                    for co in 0..cout {
                        let plane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                        g[co] += plane.iter().copied().sum::<T>();
                    }
                }
            }
            if gw {
                let g = sink.accum(w, wn);
                for bi in 0..bsz {
                    for co in 0..cout {
                        let gplane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                        for ci in 0..cin {
                            let xplane = &xv[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut acc = T::zero();
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow =
                                            &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += grow[ox] * xrow[ix as usize];
                                        }
                                    }
                                    g[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if gx {
                let g = sink.accum(x, xn);
                for bi in 0..bsz {
                    for co in 0..cout {
                        let gplane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                        for ci in 0..cin {
                            let xgrad = &mut g[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wval = wv[((co * cin + ci) * kh + ky) * kw + kx];
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                                        let xrow = &mut xgrad
                                            [iy as usize * wd..(iy as usize + 1) * wd];
                                        for ox in 0..ow {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            xrow[ix as usize] += wval * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }))
    }
}
