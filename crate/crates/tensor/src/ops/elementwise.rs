//! Pointwise arithmetic with trailing-axis broadcasting.

use std::sync::Arc;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, broadcast_strides, for_each_offset, numel};
use crate::tape::{Tape, Var};

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T, T) -> T + 'static,
        dfb: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(op, &ash, &bsh)?;
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let sets = [broadcast_strides(&ash, &out_shape), broadcast_strides(&bsh, &out_shape)];
        let mut out = vec![T::zero(); numel(&out_shape)];
        for_each_offset(&out_shape, &sets, |flat, offs| {
            out[flat] = f(av[offs[0]], bv[offs[1]]);
        });
        let ga = self.needs_grad(a);
        let gb = self.needs_grad(b);
        if !ga && !gb {
            return Ok(self.record_value(out_shape, out));
        }
        let yv = Arc::new(out);
        let y_back = Arc::clone(&yv);
        let (an, bn) = (av.len(), bv.len());
        let shape_back = out_shape.clone();
        Ok(self.record_arc(out_shape, yv, move |gout, sink| {
            if ga {
                let g = sink.accum(a, an);
                for_each_offset(&shape_back, &sets, |flat, offs| {
                    g[offs[0]] += dfa(av[offs[0]], bv[offs[1]], y_back[flat]) * gout[flat];
                });
            }
            if gb {
                let g = sink.accum(b, bn);
                for_each_offset(&shape_back, &sets, |flat, offs| {
                    g[offs[1]] += dfb(av[offs[0]], bv[offs[1]], y_back[flat]) * gout[flat];
                });
            }
        }))
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value_arc(x);
        let out: Vec<T> = xv.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        if !self.needs_grad(x) {
            return self.record_value(shape, out);
        }
        let yv = Arc::new(out);
        let y_back = Arc::clone(&yv);
        let n = xv.len();
        self.record_arc(shape, yv, move |gout, sink| {
            let g = sink.accum(x, n);
            for i in 0..n {
                g[i] += df(xv[i], y_back[i]) * gout[i];
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |_, y, _| T::one() / y, |_, y, out| -out / y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, |_, _| T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, |v, _| sigmoid_scalar(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |v, _| T::one() / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| T::one() / ((T::one() + T::one()) * y))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.data(x).to_vec();
        self.record_value(shape, value)
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
    fn add_broadcasts_rows() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = leaf(&mut tape, vec![3], vec![10.0, 20.0, 30.0]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.data(y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0; 6]);
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mul_gradient_swaps_operands() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![3.0, -1.0]);
        let b = leaf(&mut tape, vec![2], vec![4.0, 5.0]);
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[4.0, 5.0]);
        assert_eq!(g.wrt(b).data(), &[3.0, -1.0]);
    }

    #[test]
    fn div_matches_quotient_rule() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1], vec![6.0]);
        let b = leaf(&mut tape, vec![1], vec![3.0]);
        let y = tape.div(a, b).unwrap();
        assert_eq!(tape.data(y), &[2.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!((g.wrt(a).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.wrt(b).data()[0] + 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn x_plus_x_doubles_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.5, -2.0]);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn sigmoid_values_and_extremes_stay_finite() {
        assert!((sigmoid_scalar(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid_scalar(800.0f64).is_finite());
        assert!(sigmoid_scalar(-800.0f64).is_finite());
        assert!((sigmoid_scalar(-800.0f64)).abs() < 1e-300);
    }

    #[test]
    fn softplus_matches_reference_and_stays_stable() {
        assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(700.0f64) - 700.0).abs() < 1e-12);
        assert!(softplus_scalar(-700.0f64) >= 0.0);
        assert!(softplus_scalar(-700.0f64) < 1e-300);
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }
}
