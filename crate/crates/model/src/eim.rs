//! Early fusion of audio and the visual pyramid: every scale's pixels are
//! enhanced by attending to that frame's audio vector (parallel branches),
//! while the audio vector is refined scale by scale against the original
//! pixels (a sequential chain ending in the decoder's audio token).

use ccformer_tensor::{Result, Scalar, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::nn::{FfnParams, LnParams, MhaParams};
use crate::params::{Ctx, ParamStore};

/// Cross-attention block with post-norm residuals on both the attention and
/// feed-forward halves. Both fusion directions instantiate this per scale.
#[derive(Debug, Clone, Copy)]
pub struct FusionBlockParams {
    pub attn: MhaParams,
    pub ln1: LnParams,
    pub ffn: FfnParams,
    pub ln2: LnParams,
}

impl FusionBlockParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        FusionBlockParams {
            attn: MhaParams::new(store, rng, &format!("{prefix}.attn"), d, heads),
            ln1: LnParams::new(store, &format!("{prefix}.ln1"), d),
            ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ff),
            ln2: LnParams::new(store, &format!("{prefix}.ln2"), d),
        }
    }

    /// `LN(attn(q, kv) + q)` then `LN(FFN(x) + x)`.
    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, q: Var, kv: Var) -> Result<Var> {
        let attended = self.attn.attend(ctx, q, kv)?;
        let x = ctx.tape.add(attended, q)?;
        let x = self.ln1.apply(ctx, x)?;
        let f = self.ffn.apply(ctx, x)?;
        let y = ctx.tape.add(f, x)?;
        self.ln2.apply(ctx, y)
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        MhaParams::param_count(d) + 2 * LnParams::param_count(d) + FfnParams::param_count(d, d_ff)
    }
}

/// Flatten `[T, d, H, W]` into per-frame token rows `[T, H*W, d]`.
pub fn map_to_tokens<T: Scalar>(ctx: &mut Ctx<T>, map: Var) -> Result<Var> {
    let sh = ctx.tape.shape(map).to_vec();
    let x = ctx.tape.reshape(map, vec![sh[0], sh[1], sh[2] * sh[3]])?;
    ctx.tape.permute(x, &[0, 2, 1])
}

/// Inverse of [`map_to_tokens`] for a known spatial extent.
pub fn tokens_to_map<T: Scalar>(ctx: &mut Ctx<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let sh = ctx.tape.shape(tokens).to_vec();
    let x = ctx.tape.permute(tokens, &[0, 2, 1])?;
    ctx.tape.reshape(x, vec![sh[0], sh[2], h, w])
}

pub struct EimParams {
    ave: Option<[FusionBlockParams; 4]>,
    vae: Option<[FusionBlockParams; 4]>,
    cross_frame: bool,
}

pub struct EimState {
    /// Enhanced pyramid, same shapes as the input scales.
    pub fv: [Var; 4],
    /// Audio chain: original plus one refinement per scale (5 entries).
    pub fa_chain: Vec<Var>,
    /// Final audio tokens `[T, 1, d]`, a pure reshape of the chain's tail.
    pub fa_prime: Var,
}

impl EimParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        d_ff: usize,
        enable_ave: bool,
        enable_vae: bool,
        cross_frame: bool,
    ) -> Self {
        let build = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, kind: &str| {
            let blocks: Vec<FusionBlockParams> = (0..4)
                .map(|i| FusionBlockParams::new(store, rng, &format!("eim.{kind}{i}"), d, heads, d_ff))
                .collect();
            blocks.try_into().ok().unwrap()
        };
        EimParams {
            ave: enable_ave.then(|| build(store, rng, "ave")),
            vae: enable_vae.then(|| build(store, rng, "vae")),
            cross_frame,
        }
    }

    pub fn param_count(d: usize, d_ff: usize, enable_ave: bool, enable_vae: bool) -> usize {
        let per_side = 4 * FusionBlockParams::param_count(d, d_ff);
        (enable_ave as usize + enable_vae as usize) * per_side
    }

    pub fn ave_enabled(&self) -> bool {
        self.ave.is_some()
    }

    pub fn vae_enabled(&self) -> bool {
        self.vae.is_some()
    }
}

/// One visual scale enhanced by the original audio: pixel tokens query their
/// frame's audio vector, then pass through the block's FFN half.
pub fn ave_scale<T: Scalar>(
    ctx: &mut Ctx<T>,
    block: &FusionBlockParams,
    fv_i: Var,
    fa: Var,
    cross_frame: bool,
) -> Result<Var> {
    let sh = ctx.tape.shape(fv_i).to_vec();
    if sh.len() != 4 {
        return Err(TensorError::invalid(
            "ave_scale",
            format!("expected [T,d,H,W] map, got {sh:?}"),
        ));
    }
    let (h, w) = (sh[2], sh[3]);
    let t = sh[0];
    let d = sh[1];
    let pixels = map_to_tokens(ctx, fv_i)?;
    let kv = if cross_frame {
        ctx.tape.reshape(fa, vec![1, t, d])?
    } else {
        ctx.tape.reshape(fa, vec![t, 1, d])?
    };
    let out = block.apply(ctx, pixels, kv)?;
    tokens_to_map(ctx, out, h, w)
}

/// One audio refinement step: the frame's audio vector queries that scale's
/// pixels.
pub fn vae_scale<T: Scalar>(
    ctx: &mut Ctx<T>,
    block: &FusionBlockParams,
    fa_prev: Var,
    fv_i: Var,
    cross_frame: bool,
) -> Result<Var> {
    let ash = ctx.tape.shape(fa_prev).to_vec();
    if ash.len() != 2 {
        return Err(TensorError::invalid(
            "vae_scale",
            format!("expected [T,d] audio, got {ash:?}"),
        ));
    }
    let (t, d) = (ash[0], ash[1]);
    let q = ctx.tape.reshape(fa_prev, vec![t, 1, d])?;
    let pixels = map_to_tokens(ctx, fv_i)?;
    let kv = if cross_frame {
        let psh = ctx.tape.shape(pixels).to_vec();
        ctx.tape.reshape(pixels, vec![1, psh[0] * psh[1], psh[2]])?
    } else {
        pixels
    };
    let out = block.apply(ctx, q, kv)?;
    ctx.tape.reshape(out, vec![t, d])
}

/// Full fusion pass. Every enhanced scale reads the ORIGINAL audio, every
/// audio refinement reads the ORIGINAL pixels; the two directions never feed
/// each other.
pub fn eim_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &EimParams,
    pyramid: &[Var; 4],
    fa: Var,
) -> Result<EimState> {
    let fv = match &params.ave {
        Some(blocks) => {
            let mut out = Vec::with_capacity(4);
            for (block, &scale) in blocks.iter().zip(pyramid) {
                out.push(ave_scale(ctx, block, scale, fa, params.cross_frame)?);
            }
            out.try_into().ok().unwrap()
        }
        None => *pyramid,
    };
    let mut fa_chain = vec![fa];
    match &params.vae {
        Some(blocks) => {
            for (block, &scale) in blocks.iter().zip(pyramid) {
                let prev = *fa_chain.last().unwrap();
                fa_chain.push(vae_scale(ctx, block, prev, scale, params.cross_frame)?);
            }
        }
        None => fa_chain.extend(std::iter::repeat(fa).take(4)),
    }
    let tail = *fa_chain.last().unwrap();
    let ash = ctx.tape.shape(tail).to_vec();
    let fa_prime = ctx.tape.reshape(tail, vec![ash[0], 1, ash[1]])?;
    Ok(EimState { fv, fa_chain, fa_prime })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use ccformer_tensor::gradcheck::finite_diff_check_refined;
    use ccformer_tensor::{Tape, Tensor};
    use rand::SeedableRng;

    const D: usize = 8;
    const HEADS: usize = 2;
    const DFF: usize = 16;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn tiny_pyramid(r: &mut ChaCha8Rng, t: usize) -> Vec<Tensor<f64>> {
        [(8, 8), (4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| normal(r, &[t, D, h, w], 0.7))
            .collect()
    }

    #[test]
    fn shapes_and_chain_arity() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        assert_eq!(store.total_elems(), EimParams::param_count(D, DFF, true, true));
        let maps = tiny_pyramid(&mut r, 3);
        let audio: Tensor<f64> = normal(&mut r, &[3, D], 0.7);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let pyramid: Vec<Var> = maps.iter().map(|m| ctx.tape.input(m)).collect();
        let fa = ctx.tape.input(&audio);
        let state = eim_forward(&mut ctx, &eim, &pyramid.clone().try_into().unwrap(), fa).unwrap();
        for (out, src) in state.fv.iter().zip(&pyramid) {
            assert_eq!(ctx.tape.shape(*out), ctx.tape.shape(*src));
        }
        assert_eq!(state.fa_chain.len(), 5);
        assert_eq!(ctx.tape.shape(state.fa_prime), &[3, 1, D]);
        let tail = state.fa_chain[4];
        assert_eq!(ctx.tape.data(state.fa_prime), ctx.tape.data(tail));
    }

    #[test]
    fn single_audio_key_collapses_to_value_broadcast() {
        // with one key the attention weights are exactly 1, so the block
        // reduces to LN(V_a + pixels) -> FFN half; rebuild that directly
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        let blocks = eim.ave.as_ref().unwrap();
        let map: Tensor<f64> = normal(&mut r, &[2, D, 2, 2], 0.7);
        let audio: Tensor<f64> = normal(&mut r, &[2, D], 0.7);

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let fv = ctx.tape.input(&map);
        let fa = ctx.tape.input(&audio);
        let got = ave_scale(&mut ctx, &blocks[0], fv, fa, false).unwrap();
        let got = ctx.tape.data(got).to_vec();

        let block = &blocks[0];
        let kv = ctx.tape.reshape(fa, vec![2, 1, D]).unwrap();
        let v = block.attn.wv.apply(&mut ctx, kv).unwrap();
        let o = block.attn.wo.apply(&mut ctx, v).unwrap();
        let pixels = map_to_tokens(&mut ctx, fv).unwrap();
        let x = ctx.tape.add(o, pixels).unwrap();
        let x = block.ln1.apply(&mut ctx, x).unwrap();
        let f = block.ffn.apply(&mut ctx, x).unwrap();
        let y = ctx.tape.add(f, x).unwrap();
        let y = block.ln2.apply(&mut ctx, y).unwrap();
        let want_tokens = tokens_to_map(&mut ctx, y, 2, 2).unwrap();
        let want = ctx.tape.data(want_tokens);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_pixels_make_vae_attention_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        let block = &eim.vae.as_ref().unwrap()[1];
        let constant = Tensor::<f64>::full(vec![1, D, 3, 3], 0.4);
        let single = Tensor::<f64>::full(vec![1, D, 1, 1], 0.4);
        let audio: Tensor<f64> = normal(&mut r, &[1, D], 0.7);
        let run = |map: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, false);
            let fv = ctx.tape.input(map);
            let fa = ctx.tape.input(&audio);
            let out = vae_scale(&mut ctx, block, fa, fv, false).unwrap();
            ctx.tape.data(out).to_vec()
        };
        // nine identical keys average to the same value as one key
        let wide = run(&constant);
        let one = run(&single);
        for (a, b) in wide.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ave_branches_are_parallel_across_scales() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        let maps = tiny_pyramid(&mut r, 2);
        let audio: Tensor<f64> = normal(&mut r, &[2, D], 0.7);
        let run = |scale3: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, false);
            let pyramid: [Var; 4] = [
                ctx.tape.input(&maps[0]),
                ctx.tape.input(&maps[1]),
                ctx.tape.input(scale3),
                ctx.tape.input(&maps[3]),
            ];
            let fa = ctx.tape.input(&audio);
            let state = eim_forward(&mut ctx, &eim, &pyramid, fa).unwrap();
            ctx.tape.data(state.fv[1]).to_vec()
        };
        let base = run(&maps[2]);
        let bumped: Tensor<f64> = normal(&mut r, &[2, D, 2, 2], 2.0);
        let after = run(&bumped);
        assert_eq!(base, after);
    }

    #[test]
    fn vae_chain_depends_on_every_scale() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        let maps = tiny_pyramid(&mut r, 2);
        let audio: Tensor<f64> = normal(&mut r, &[2, D], 0.7);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, true);
        let pyramid: [Var; 4] = [
            ctx.tape.input(&maps[0].clone().with_grad(true)),
            ctx.tape.input(&maps[1].clone().with_grad(true)),
            ctx.tape.input(&maps[2].clone().with_grad(true)),
            ctx.tape.input(&maps[3].clone().with_grad(true)),
        ];
        let fa = ctx.tape.input(&audio);
        let state = eim_forward(&mut ctx, &eim, &pyramid, fa).unwrap();
        let tail = state.fa_chain[4];
        let readout = crate::testutil::weighted_sum(ctx.tape, tail, 99).unwrap();
        drop(ctx);
        let grads = tape.backward(readout).unwrap();
        for (i, &scale) in pyramid.iter().enumerate() {
            let g = grads.wrt(scale);
            assert!(
                g.data().iter().any(|v| v.abs() > 1e-9),
                "audio tail insensitive to scale {i}"
            );
        }
    }

    #[test]
    fn disabled_directions_wire_identities() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, D, HEADS, DFF, false, false, false);
        assert_eq!(store.total_elems(), 0);
        let maps = tiny_pyramid(&mut r, 2);
        let audio: Tensor<f64> = normal(&mut r, &[2, D], 0.7);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let pyramid: [Var; 4] = std::array::from_fn(|i| ctx.tape.input(&maps[i]));
        let fa = ctx.tape.input(&audio);
        let state = eim_forward(&mut ctx, &eim, &pyramid, fa).unwrap();
        for (out, src) in state.fv.iter().zip(&pyramid) {
            assert_eq!(ctx.tape.data(*out), ctx.tape.data(*src));
        }
        for link in &state.fa_chain {
            assert_eq!(ctx.tape.data(*link), ctx.tape.data(fa));
        }
        assert_eq!(ctx.tape.data(state.fa_prime), ctx.tape.data(fa));
    }

    #[test]
    fn end_to_end_gradient_to_pyramid() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let eim = EimParams::new(&mut store, &mut r, 4, 2, 8, true, true, false);
        let maps: Vec<Tensor<f64>> = [(2, 2), (2, 1), (1, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| normal(&mut r, &[2, 4, h, w], 0.7))
            .collect();
        let audio: Tensor<f64> = normal(&mut r, &[2, 4], 0.7);
        let mut inputs = maps.clone();
        inputs.push(audio);
        let report = finite_diff_check_refined(&inputs, &crate::testutil::FD_STEPS, 1e-6, |tape, vars| {
            let mut ctx = Ctx::new(tape, &store, true);
            let pyramid: [Var; 4] = [vars[0], vars[1], vars[2], vars[3]];
            let state = eim_forward(&mut ctx, &eim, &pyramid, vars[4])?;
            let mut acc = crate::testutil::weighted_sum(ctx.tape, state.fa_prime, 7)?;
            for (k, &v) in state.fv.iter().enumerate() {
                let s = crate::testutil::weighted_sum(ctx.tape, v, 8 + k as u64)?;
                acc = ctx.tape.add(acc, s)?;
            }
            Ok(acc)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {:e}", report.max_rel_err);
    }

    #[test]
    fn cross_frame_flag_widens_the_key_set() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let per_frame = EimParams::new(&mut store, &mut r, D, HEADS, DFF, true, true, false);
        let maps = tiny_pyramid(&mut r, 2);
        let audio: Tensor<f64> = normal(&mut r, &[2, D], 0.7);
        let run = |cross: bool| -> Vec<f64> {
            let eim = EimParams {
                ave: per_frame.ave,
                vae: per_frame.vae,
                cross_frame: cross,
            };
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, false);
            let pyramid: [Var; 4] = std::array::from_fn(|i| ctx.tape.input(&maps[i]));
            let fa = ctx.tape.input(&audio);
            let state = eim_forward(&mut ctx, &eim, &pyramid, fa).unwrap();
            ctx.tape.data(state.fv[0]).to_vec()
        };
        assert_ne!(run(false), run(true));
    }
}
