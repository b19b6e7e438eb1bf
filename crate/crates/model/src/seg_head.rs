//! Cross-modal feature pyramid and dynamic-kernel mask head: fuses audio
//! into each coarse scale on a top-down path ending at stride 8, then turns
//! each segmentation query into a 1x1 kernel over the mask feature.

use ccformer_tensor::{Result, Scalar, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::eim::tokens_to_map;
use crate::encoders::Conv2dParams;
use crate::mtm::EncoderTokens;
use crate::nn::LinearParams;
use crate::params::{Ctx, ParamStore};

pub struct FpnParams {
    /// Per-scale audio injection, coarsest first. Single-token attention
    /// collapses to a per-frame channel modulation, so it is stored in that
    /// collapsed form: one linear map applied to the frame's audio token and
    /// broadcast-added over pixels.
    audio_mod: [LinearParams; 3],
    out_proj: [Conv2dParams; 3],
    lateral: [Conv2dParams; 2],
    fuse: Conv2dParams,
    d: usize,
}

impl FpnParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let audio_mod = std::array::from_fn(|i| {
            LinearParams::new(store, rng, &format!("fpn.scale{i}.audio"), d, d)
        });
        let out_proj = std::array::from_fn(|i| {
            Conv2dParams::new(store, rng, &format!("fpn.scale{i}.proj"), d, d, 1, 1, 0)
        });
        let lateral = std::array::from_fn(|i| {
            Conv2dParams::new(store, rng, &format!("fpn.lateral{i}"), d, d, 1, 1, 0)
        });
        let fuse = Conv2dParams::new(store, rng, "fpn.fuse", d, d, 3, 2, 1);
        FpnParams { audio_mod, out_proj, lateral, fuse, d }
    }

    pub fn param_count(d: usize) -> usize {
        3 * LinearParams::param_count(d, d) + 5 * (d * d + d) + (d * d * 9 + d)
    }
}

/// Top-down pathway over the un-flattened scales, coarsest first: inject the
/// frame's audio token, 1x1-project, upsample x2 and add the next finer
/// scale's lateral; at stride 8 fuse the bypassed stride-4 map through a
/// strided conv. `fa` is the original audio feature `[T, d]`.
pub fn cross_modal_fpn<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &FpnParams,
    tokens: &EncoderTokens,
    fa: Var,
) -> Result<Var> {
    let tsh = ctx.tape.shape(tokens.tokens).to_vec();
    let total: usize = tokens.scale_dims.iter().map(|&(h, w)| h * w).sum();
    if tsh.len() != 3 || tsh[1] != total || tsh[2] != params.d {
        return Err(TensorError::invalid(
            "cross_modal_fpn",
            format!("boundary map {:?} does not partition tokens {tsh:?}", tokens.scale_dims),
        ));
    }
    let ash = ctx.tape.shape(fa).to_vec();
    if ash.len() != 2 || ash[0] != tsh[0] || ash[1] != params.d {
        return Err(TensorError::invalid(
            "cross_modal_fpn",
            format!("audio features {ash:?} do not match tokens {tsh:?}"),
        ));
    }
    let t = tsh[0];
    let d = params.d;

    let mut maps = Vec::with_capacity(3);
    for (range, &(h, w)) in tokens.boundaries().into_iter().zip(&tokens.scale_dims) {
        let part = ctx.tape.slice(tokens.tokens, 1, range.start, range.len())?;
        maps.push(tokens_to_map(ctx, part, h, w)?);
    }

    let fa_row = ctx.tape.reshape(fa, vec![t, 1, d])?;
    let inject = |ctx: &mut Ctx<T>, x: Var, scale: usize| -> Result<Var> {
        let m = params.audio_mod[scale].apply(ctx, fa_row)?;
        let sh = ctx.tape.shape(x).to_vec();
        let m = ctx.tape.reshape(m, vec![t, d, 1, 1])?;
        let m = ctx.tape.broadcast_to(m, sh)?;
        let x = ctx.tape.add(x, m)?;
        params.out_proj[scale].apply(ctx, x)
    };

    let mut x = inject(ctx, maps[2], 0)?;
    x = ctx.tape.upsample_bilinear2d(x, 2)?;
    let lat = params.lateral[0].apply(ctx, maps[1])?;
    x = ctx.tape.add(x, lat)?;
    x = inject(ctx, x, 1)?;
    x = ctx.tape.upsample_bilinear2d(x, 2)?;
    let lat = params.lateral[1].apply(ctx, maps[0])?;
    x = ctx.tape.add(x, lat)?;
    x = inject(ctx, x, 2)?;
    let fused = params.fuse.apply(ctx, tokens.fv1)?;
    ctx.tape.add(x, fused)
}

pub struct MaskHeadParams {
    /// Linear map from each query to its 1x1 kernel: d weights plus a bias.
    kernel: LinearParams,
    mlp1: Conv2dParams,
    mlp2: Conv2dParams,
    fc: Conv2dParams,
    pub n: usize,
    pub n_class: usize,
    pub d: usize,
}

impl MaskHeadParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        n_class: usize,
    ) -> Self {
        MaskHeadParams {
            kernel: LinearParams::new(store, rng, "head.kernel", d, d + 1),
            mlp1: Conv2dParams::new(store, rng, "head.mlp1", n, d, 1, 1, 0),
            mlp2: Conv2dParams::new(store, rng, "head.mlp2", d, d, 1, 1, 0),
            fc: Conv2dParams::new(store, rng, "head.fc", d, n_class, 1, 1, 0),
            n,
            n_class,
            d,
        }
    }

    pub fn param_count(n: usize, d: usize, n_class: usize) -> usize {
        LinearParams::param_count(d, d + 1)
            + (n * d + d)
            + (d * d + d)
            + (d * n_class + n_class)
    }
}

pub struct MaskPrediction {
    /// Per-query mask logits `[T, n, h, w]`.
    pub m_s: Var,
    /// Channel-mapped masks `[T, d, h, w]` before the residual projection.
    pub m_proj: Var,
    /// Final logits `[T, n_class, h, w]`.
    pub m: Var,
}

/// Dynamic 1x1 convolution: each query emits `d` weights and a bias applied
/// to the mask feature, then the per-query masks are channel-mapped back to
/// width d, added to the feature, and projected to class logits.
pub fn predict_masks<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &MaskHeadParams,
    q_segment: Var,
    feat: Var,
) -> Result<Var> {
    predict_masks_full(ctx, params, q_segment, feat).map(|p| p.m)
}

pub fn predict_masks_full<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &MaskHeadParams,
    q_segment: Var,
    feat: Var,
) -> Result<MaskPrediction> {
    let qsh = ctx.tape.shape(q_segment).to_vec();
    let fsh = ctx.tape.shape(feat).to_vec();
    if qsh.len() != 3 || qsh[1] != params.n || qsh[2] != params.d {
        return Err(TensorError::invalid(
            "predict_masks",
            format!("queries {qsh:?}, expected [T,{},{}]", params.n, params.d),
        ));
    }
    if fsh.len() != 4 || fsh[0] != qsh[0] || fsh[1] != params.d {
        return Err(TensorError::invalid(
            "predict_masks",
            format!("mask feature {fsh:?} does not match queries {qsh:?}"),
        ));
    }
    let (t, n, d) = (qsh[0], params.n, params.d);
    let (h, w) = (fsh[2], fsh[3]);

    let kb = params.kernel.apply(ctx, q_segment)?;
    let kw = ctx.tape.slice(kb, 2, 0, d)?;
    let bias = ctx.tape.slice(kb, 2, d, 1)?;
    let flat = ctx.tape.reshape(feat, vec![t, d, h * w])?;
    let m_s = ctx.tape.matmul(kw, flat)?;
    let bias = ctx.tape.broadcast_to(bias, vec![t, n, h * w])?;
    let m_s = ctx.tape.add(m_s, bias)?;
    let m_s = ctx.tape.reshape(m_s, vec![t, n, h, w])?;

    let hidden = params.mlp1.apply(ctx, m_s)?;
    let hidden = ctx.tape.relu(hidden);
    let m_proj = params.mlp2.apply(ctx, hidden)?;
    let sum = ctx.tape.add(m_proj, feat)?;
    let m = params.fc.apply(ctx, sum)?;
    Ok(MaskPrediction { m_s, m_proj, m })
}

/// Bilinear x8 back to input resolution.
pub fn upsample_to_full<T: Scalar>(ctx: &mut Ctx<T>, m: Var) -> Result<Var> {
    ctx.tape.upsample_bilinear2d(m, 8)
}
