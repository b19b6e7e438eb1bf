//! Attention, feed-forward, and normalization blocks shared by every module,
//! plus the fixed sinusoidal position tables.

use ccformer_tensor::{Result, Scalar, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::params::{ones, xavier, zeros, Ctx, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        LnParams {
            gamma: store.register(format!("{prefix}.gamma"), ones(&[d])),
            beta: store.register(format!("{prefix}.beta"), zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.tape.layer_norm(x, gamma, beta, T::of_f64(LN_EPS))
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        LinearParams {
            w: store.register(format!("{prefix}.w"), xavier(rng, &[d_in, d_out], d_in, d_out)),
            b: store.register(format!("{prefix}.b"), zeros(&[d_out])),
        }
    }

    /// `x: [..., d_in] -> [..., d_out]`
    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Multi-head attention. Self- and cross-attention share this block; the
/// caller picks what it passes as `kv`.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
    pub d: usize,
}

impl MhaParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && d % heads == 0, "d={d} not divisible by heads={heads}");
        MhaParams {
            wq: LinearParams::new(store, rng, &format!("{prefix}.wq"), d, d),
            wk: LinearParams::new(store, rng, &format!("{prefix}.wk"), d, d),
            wv: LinearParams::new(store, rng, &format!("{prefix}.wv"), d, d),
            wo: LinearParams::new(store, rng, &format!("{prefix}.wo"), d, d),
            heads,
            d,
        }
    }

    /// `q: [B, Lq, d]`, `kv: [Bk, Lkv, d]` where `Bk` is `B` or 1. Returns
    /// the attended output `[B, Lq, d]` and the attention weights
    /// `[B, heads, Lq, Lkv]` (rows sum to one).
    pub fn attend_with_weights<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        q: Var,
        kv: Var,
    ) -> Result<(Var, Var)> {
        let qsh = ctx.tape.shape(q).to_vec();
        let ksh = ctx.tape.shape(kv).to_vec();
        if qsh.len() != 3 || ksh.len() != 3 || qsh[2] != self.d || ksh[2] != self.d {
            return Err(TensorError::invalid(
                "attend",
                format!("expected [B,L,{}] operands, got {qsh:?} and {ksh:?}", self.d),
            ));
        }
        if ksh[0] != qsh[0] && ksh[0] != 1 {
            return Err(TensorError::invalid(
                "attend",
                format!("kv batch {} incompatible with query batch {}", ksh[0], qsh[0]),
            ));
        }
        let dh = self.d / self.heads;
        let qp = self.wq.apply(ctx, q)?;
        let kp = self.wk.apply(ctx, kv)?;
        let vp = self.wv.apply(ctx, kv)?;
        let qh = split_heads(ctx, qp, self.heads)?;
        let kh = split_heads(ctx, kp, self.heads)?;
        let vh = split_heads(ctx, vp, self.heads)?;
        let kt = ctx.tape.transpose(kh)?;
        let scores = ctx.tape.matmul(qh, kt)?;
        let scaled = ctx.tape.scale(scores, T::of_f64(1.0 / (dh as f64).sqrt()));
        let attn = ctx.tape.softmax(scaled, 3)?;
        let mixed = ctx.tape.matmul(attn, vh)?;
        let merged = merge_heads(ctx, mixed)?;
        let out = self.wo.apply(ctx, merged)?;
        Ok((out, attn))
    }

    pub fn attend<T: Scalar>(&self, ctx: &mut Ctx<T>, q: Var, kv: Var) -> Result<Var> {
        self.attend_with_weights(ctx, q, kv).map(|(out, _)| out)
    }

    pub fn param_count(d: usize) -> usize {
        4 * LinearParams::param_count(d, d)
    }
}

fn split_heads<T: Scalar>(ctx: &mut Ctx<T>, x: Var, heads: usize) -> Result<Var> {
    let sh = ctx.tape.shape(x).to_vec();
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    let x = ctx.tape.reshape(x, vec![b, l, heads, d / heads])?;
    ctx.tape.permute(x, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let sh = ctx.tape.shape(x).to_vec();
    let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
    ctx.tape.reshape(x, vec![sh[0], sh[2], sh[1] * sh[3]])
}

/// Two-layer feed-forward with ReLU, `d -> d_ff -> d`.
#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: LinearParams,
    pub w2: LinearParams,
}

impl FfnParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
    ) -> Self {
        assert!(d_ff >= d, "d_ff={d_ff} must be >= d={d}");
        FfnParams {
            w1: LinearParams::new(store, rng, &format!("{prefix}.w1"), d, d_ff),
            w2: LinearParams::new(store, rng, &format!("{prefix}.w2"), d_ff, d),
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.w1.apply(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.w2.apply(ctx, h)
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        LinearParams::param_count(d, d_ff) + LinearParams::param_count(d_ff, d)
    }
}

/// `LN(sub + x)`: the residual-then-normalize step every block here ends in.
pub fn residual_norm<T: Scalar>(ctx: &mut Ctx<T>, ln: &LnParams, sub: Var, x: Var) -> Result<Var> {
    let s = ctx.tape.add(sub, x)?;
    ln.apply(ctx, s)
}

/// Fixed 1-d sinusoid table `[len, d]`: even channels sine, odd cosine, with
/// the usual geometric frequency ladder.
pub fn sincos_1d<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    assert!(d % 2 == 0, "1-d sinusoids need even d, got {d}");
    Tensor::from_fn(vec![len, d], |idx| {
        let p = (idx / d) as f64;
        let c = idx % d;
        let k = (c / 2) as f64;
        let angle = p / 10000f64.powf(2.0 * k / d as f64);
        T::of_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Fixed 2-d sinusoid table `[h * w, d]`, rows in row-major pixel order. The
/// first d/2 channels encode the row coordinate, the last d/2 the column.
pub fn sincos_2d<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    assert!(d % 4 == 0, "2-d sinusoids need d divisible by 4, got {d}");
    let half = d / 2;
    Tensor::from_fn(vec![h * w, d], |idx| {
        let pix = idx / d;
        let c = idx % d;
        let pos = if c < half { (pix / w) as f64 } else { (pix % w) as f64 };
        let ch = c % half;
        let k = (ch / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * k / half as f64);
        T::of_f64(if ch % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal, Ctx, ParamStore};
    use ccformer_tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_matches_hand_math() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let lin = LinearParams::new(&mut store, &mut r, "lin", 2, 3);
        store
            .set(lin.w, Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        store.set(lin.b, Tensor::from_vec(vec![3], vec![0.5, -0.5, 1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let x = ctx.tape.input(&Tensor::from_vec(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.apply(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.data(y), &[9.5, 11.5, 16.0]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_shapes_hold() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MhaParams::new(&mut store, &mut r, "mha", 8, 2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let q = ctx.tape.input(&normal::<f64>(&mut r, &[3, 5, 8], 1.0));
        let kv = ctx.tape.input(&normal::<f64>(&mut r, &[3, 7, 8], 1.0));
        let (out, attn) = mha.attend_with_weights(&mut ctx, q, kv).unwrap();
        assert_eq!(ctx.tape.shape(out), &[3, 5, 8]);
        assert_eq!(ctx.tape.shape(attn), &[3, 2, 5, 7]);
        let w = ctx.tape.data(attn);
        for row in w.chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn single_token_kv_broadcasts_over_query_batch() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MhaParams::new(&mut store, &mut r, "mha", 4, 1);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let q = ctx.tape.input(&normal::<f64>(&mut r, &[5, 3, 4], 1.0));
        let kv = ctx.tape.input(&normal::<f64>(&mut r, &[1, 1, 4], 1.0));
        let (out, attn) = mha.attend_with_weights(&mut ctx, q, kv).unwrap();
        assert_eq!(ctx.tape.shape(out), &[5, 3, 4]);
        assert_eq!(ctx.tape.shape(attn), &[5, 1, 3, 1]);
        // a single key means every attention weight is exactly one
        assert!(ctx.tape.data(attn).iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn attend_rejects_bad_ranks_and_batches() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MhaParams::new(&mut store, &mut r, "mha", 4, 2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let q = ctx.tape.input(&Tensor::<f64>::zeros(vec![2, 3, 4]));
        let kv_bad_batch = ctx.tape.input(&Tensor::<f64>::zeros(vec![3, 3, 4]));
        assert!(mha.attend(&mut ctx, q, kv_bad_batch).is_err());
        let kv_bad_rank = ctx.tape.input(&Tensor::<f64>::zeros(vec![3, 4]));
        assert!(mha.attend(&mut ctx, q, kv_bad_rank).is_err());
    }

    #[test]
    fn ffn_with_identity_weights_recovers_relu_sum() {
        // W1 = [I; -I], W2 = [I; -I]^T stacked gives w2(relu(w1 x)) = x
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let ffn = FfnParams::new(&mut store, &mut r, "ffn", d, 2 * d);
        let mut w1 = vec![0.0; d * 2 * d];
        let mut w2 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w1[i * 2 * d + i] = 1.0;
            w1[i * 2 * d + d + i] = -1.0;
            w2[i * d + i] = 1.0;
            w2[(d + i) * d + i] = -1.0;
        }
        store.set(ffn.w1.w, Tensor::from_vec(vec![d, 2 * d], w1).unwrap()).unwrap();
        store.set(ffn.w2.w, Tensor::from_vec(vec![2 * d, d], w2).unwrap()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let x = ctx.tape.input(&Tensor::from_vec(vec![1, 2, 3], vec![0.5, -1.5, 2.0, -0.25, 0.0, 3.0]).unwrap());
        let y = ffn.apply(&mut ctx, x).unwrap();
        let got = ctx.tape.data(y).to_vec();
        for (a, b) in got.iter().zip([0.5, -1.5, 2.0, -0.25, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_norm_centers_and_scales() {
        let mut store = ParamStore::<f64>::new();
        let ln = LnParams::new(&mut store, "ln", 4);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let x = ctx.tape.input(&Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = ctx.tape.input(&Tensor::<f64>::zeros(vec![1, 4]));
        let y = residual_norm(&mut ctx, &ln, z, x).unwrap();
        let out = ctx.tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gradients_flow_through_attention() {
        let mut r = rng();
        let q: Tensor<f64> = normal(&mut r, &[2, 3, 4], 0.8);
        let kv: Tensor<f64> = normal(&mut r, &[2, 2, 4], 0.8);
        let mut store = ParamStore::<f64>::new();
        let mha = MhaParams::new(&mut store, &mut r, "mha", 4, 2);
        let ids: Vec<_> = store.ids().collect();
        let mut inputs = vec![q, kv];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let report = ccformer_tensor::gradcheck::finite_diff_check_refined(
            &inputs,
            &[1e-4, 2e-5, 1e-3],
            1e-6,
            |tape, vars| {
                let mut ctx = Ctx::new(tape, &store, true);
                for (i, &id) in ids.iter().enumerate() {
                    ctx.assign(id, vars[2 + i]);
                }
                let out = mha.attend(&mut ctx, vars[0], vars[1])?;
                Ok(ctx.tape.sum_all(out))
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {:e}", report.max_rel_err);
    }

    #[test]
    fn sinusoid_tables_are_bounded_and_right_shaped() {
        let t1: Tensor<f64> = sincos_1d(10, 8);
        assert_eq!(t1.shape(), &[10, 8]);
        assert!(t1.data().iter().all(|v| v.abs() <= 1.0));
        // position 0 is (0, 1) interleaved
        assert_eq!(&t1.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let t2: Tensor<f64> = sincos_2d(4, 6, 8);
        assert_eq!(t2.shape(), &[24, 8]);
        assert!(t2.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn no_two_grid_positions_collide_on_a_64_canvas() {
        let d = 64;
        let table: Tensor<f64> = sincos_2d(64, 64, d);
        let rows: Vec<&[f64]> = table.data().chunks(d).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            rows[a]
                .iter()
                .zip(rows[b])
                .find_map(|(x, y)| {
                    let c = x.partial_cmp(y).unwrap();
                    (c != std::cmp::Ordering::Equal).then_some(c)
                })
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for pair in order.windows(2) {
            assert_ne!(rows[pair[0]], rows[pair[1]], "positions {} and {} collide", pair[0], pair[1]);
        }
    }
}
