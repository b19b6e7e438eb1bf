//! Trainable visual pyramid and audio encoders. The visual side is a small
//! strided conv net emitting four scales at strides 4/8/16/32, each projected
//! to width d; the audio side is a per-frame two-layer FFN.

use ccformer_tensor::{Result, Scalar, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::params::{xavier, zeros, Ctx, ParamId, ParamStore};
use crate::nn::LinearParams;

#[derive(Debug, Clone, Copy)]
pub struct Conv2dParams {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Conv2dParams {
            w: store.register(
                format!("{prefix}.w"),
                xavier(rng, &[c_out, c_in, k, k], fan_in, fan_out),
            ),
            b: store.register(format!("{prefix}.b"), zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    down: Conv2dParams,
    keep: Conv2dParams,
}

/// Four-scale conv pyramid: stem (stride 2) then four stages of
/// [stride-2 3x3, stride-1 3x3] with ReLU, widths {d/4, d/2, d, d},
/// each scale finished by a 1x1 projection to d.
pub struct VisualEncoderParams {
    stem: Conv2dParams,
    stages: [Stage; 4],
    proj: [Conv2dParams; 4],
    d: usize,
}

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

fn stage_widths(d: usize) -> [usize; 4] {
    [d / 4, d / 2, d, d]
}

impl VisualEncoderParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize) -> Self {
        assert!(d % 4 == 0, "visual encoder needs d divisible by 4, got {d}");
        let widths = stage_widths(d);
        let stem = Conv2dParams::new(store, rng, "visual.stem", 3, widths[0], 3, 2, 1);
        let mut c_in = widths[0];
        let mut stages = Vec::with_capacity(4);
        let mut proj = Vec::with_capacity(4);
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Stage {
                down: Conv2dParams::new(store, rng, &format!("visual.stage{i}.down"), c_in, w, 3, 2, 1),
                keep: Conv2dParams::new(store, rng, &format!("visual.stage{i}.keep"), w, w, 3, 1, 1),
            });
            proj.push(Conv2dParams::new(store, rng, &format!("visual.proj{i}"), w, d, 1, 1, 0));
            c_in = w;
        }
        VisualEncoderParams {
            stem,
            stages: stages.try_into().ok().unwrap(),
            proj: proj.try_into().ok().unwrap(),
            d,
        }
    }

    /// `frames: [T, 3, H, W]` with H, W divisible by 32 -> four maps
    /// `[T, d, H/s, W/s]` for s in {4, 8, 16, 32}. Frames never mix.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<T>, frames: Var) -> Result<[Var; 4]> {
        let sh = ctx.tape.shape(frames).to_vec();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(TensorError::invalid(
                "encode_visual",
                format!("expected [T,3,H,W] frames, got {sh:?}"),
            ));
        }
        if sh[2] % 32 != 0 || sh[3] % 32 != 0 {
            return Err(TensorError::invalid(
                "encode_visual",
                format!("spatial size {}x{} not divisible by 32", sh[2], sh[3]),
            ));
        }
        let mut x = self.stem.apply(ctx, frames)?;
        x = ctx.tape.relu(x);
        let mut outs = Vec::with_capacity(4);
        for (stage, proj) in self.stages.iter().zip(&self.proj) {
            x = stage.down.apply(ctx, x)?;
            x = ctx.tape.relu(x);
            x = stage.keep.apply(ctx, x)?;
            x = ctx.tape.relu(x);
            outs.push(proj.apply(ctx, x)?);
        }
        Ok(outs.try_into().ok().unwrap())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn param_count(d: usize) -> usize {
        let widths = stage_widths(d);
        let mut n = Conv2dParams::param_count(3, widths[0], 3);
        let mut c_in = widths[0];
        for &w in &widths {
            n += Conv2dParams::param_count(c_in, w, 3);
            n += Conv2dParams::param_count(w, w, 3);
            n += Conv2dParams::param_count(w, d, 1);
            c_in = w;
        }
        n
    }
}

/// Per-frame audio projection `d_a -> d -> d` with one ReLU.
pub struct AudioEncoderParams {
    w1: LinearParams,
    w2: LinearParams,
    d_a: usize,
}

impl AudioEncoderParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        d_a: usize,
        d: usize,
    ) -> Self {
        AudioEncoderParams {
            w1: LinearParams::new(store, rng, "audio.w1", d_a, d),
            w2: LinearParams::new(store, rng, "audio.w2", d, d),
            d_a,
        }
    }

    /// `audio: [T, d_a] -> [T, d]`
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<T>, audio: Var) -> Result<Var> {
        let sh = ctx.tape.shape(audio).to_vec();
        if sh.len() != 2 || sh[1] != self.d_a {
            return Err(TensorError::invalid(
                "encode_audio",
                format!("expected [T,{}] audio, got {sh:?}", self.d_a),
            ));
        }
        let h = self.w1.apply(ctx, audio)?;
        let h = ctx.tape.relu(h);
        self.w2.apply(ctx, h)
    }

    pub fn param_count(d_a: usize, d: usize) -> usize {
        LinearParams::param_count(d_a, d) + LinearParams::param_count(d, d)
    }
}
