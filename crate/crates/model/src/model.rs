//! Full network assembly: visual/audio encoders, early fusion, the
//! multi-query transformer, and the segmentation head, with every wiring
//! switch the ablation suites exercise.

use ccformer_tensor::{Result, Scalar, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::eim::{eim_forward, EimParams};
use crate::encoders::{AudioEncoderParams, VisualEncoderParams};
use crate::losses::BclProjection;
use crate::mtm::{encoder_forward, mtd_forward, MtmConfig, MtmParams, QueryGenerator};
use crate::params::{Ctx, ParamStore};
use crate::seg_head::{cross_modal_fpn, predict_masks, FpnParams, MaskHeadParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclBranch {
    /// Audio features after early fusion (the default pairing).
    EnhancedAudio,
    /// Spatial mean of the highest-resolution visual scale, pre-fusion.
    OriginalVisual,
    /// Spatial mean of the highest-resolution visual scale, post-fusion.
    EnhancedVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_a: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub n_class: usize,
    pub encoder_layers: usize,
    pub aqg_layers: usize,
    pub decoder_blocks: usize,
    pub iti_per_block: usize,
    pub query_generator: QueryGenerator,
    pub enable_ave: bool,
    pub enable_vae: bool,
    pub eim_cross_frame: bool,
    pub enable_ici: bool,
    pub enable_iti: bool,
    pub enable_bcl: bool,
    pub iti_temporal_pos: bool,
    pub bcl_second_branch: BclBranch,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    fn mtm(&self) -> MtmConfig {
        MtmConfig {
            n: self.n_queries,
            d: self.d,
            heads: self.heads,
            d_ff: self.d_ff(),
            encoder_layers: self.encoder_layers,
            aqg_layers: self.aqg_layers,
            blocks: self.decoder_blocks,
            per_block: self.iti_per_block,
            qgen: self.query_generator,
            enable_ici: self.enable_ici,
            enable_iti: self.enable_iti,
            temporal_pos: self.iti_temporal_pos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(TensorError::invalid("model_config", "d must divide by heads"));
        }
        if self.d % 4 != 0 {
            return Err(TensorError::invalid("model_config", "d must be a multiple of 4"));
        }
        if self.n_queries == 0 || self.n_class == 0 || self.decoder_blocks == 0 {
            return Err(TensorError::invalid(
                "model_config",
                "query, class, and decoder block counts must be positive",
            ));
        }
        if self.query_generator == QueryGenerator::Attention && self.aqg_layers == 0 {
            return Err(TensorError::invalid(
                "model_config",
                "attention query generator needs at least one layer",
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_a: 16,
            heads: 4,
            n_queries: 5,
            n_class: 1,
            encoder_layers: 3,
            aqg_layers: 3,
            decoder_blocks: 3,
            iti_per_block: 3,
            query_generator: QueryGenerator::Attention,
            enable_ave: true,
            enable_vae: true,
            eim_cross_frame: false,
            enable_ici: true,
            enable_iti: true,
            enable_bcl: true,
            iti_temporal_pos: false,
            bcl_second_branch: BclBranch::EnhancedAudio,
        }
    }
}

pub struct CcformerParams {
    pub visual: VisualEncoderParams,
    pub audio: AudioEncoderParams,
    pub eim: EimParams,
    pub mtm: MtmParams,
    pub fpn: FpnParams,
    pub head: MaskHeadParams,
    pub bcl: Option<BclProjection>,
    pub cfg: ModelConfig,
}

impl CcformerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let visual = VisualEncoderParams::new(store, rng, cfg.d);
        let audio = AudioEncoderParams::new(store, rng, cfg.d_a, cfg.d);
        let eim = EimParams::new(
            store,
            rng,
            cfg.d,
            cfg.heads,
            cfg.d_ff(),
            cfg.enable_ave,
            cfg.enable_vae,
            cfg.eim_cross_frame,
        );
        let mtm = MtmParams::new(store, rng, &cfg.mtm());
        let fpn = FpnParams::new(store, rng, cfg.d);
        let head = MaskHeadParams::new(store, rng, cfg.n_queries, cfg.d, cfg.n_class);
        let bcl = cfg.enable_bcl.then(|| BclProjection::new(store, rng, cfg.d));
        Ok(CcformerParams { visual, audio, eim, mtm, fpn, head, bcl, cfg })
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let mut n = VisualEncoderParams::param_count(cfg.d)
            + AudioEncoderParams::param_count(cfg.d_a, cfg.d)
            + EimParams::param_count(cfg.d, cfg.d_ff(), cfg.enable_ave, cfg.enable_vae)
            + MtmParams::param_count(&cfg.mtm())
            + FpnParams::param_count(cfg.d)
            + MaskHeadParams::param_count(cfg.n_queries, cfg.d, cfg.n_class);
        if cfg.enable_bcl {
            n += BclProjection::param_count(cfg.d);
        }
        n
    }
}

pub struct ForwardOutput {
    /// Final mask logits `[T, n_class, H/8, W/8]`.
    pub logits: Var,
    /// One auxiliary logits tensor per decoder block, shared head weights.
    pub aux_logits: Vec<Var>,
    /// The two `[T, d]` streams entering the contrastive projector.
    pub bcl_pair: Option<(Var, Var)>,
}

/// Whole-clip forward: `frames [T,3,H,W]`, `audio [T,d_a]`.
pub fn forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &CcformerParams,
    frames: Var,
    audio: Var,
) -> Result<ForwardOutput> {
    let pyramid = params.visual.encode(ctx, frames)?;
    let fa = params.audio.encode(ctx, audio)?;
    let state = eim_forward(ctx, &params.eim, &pyramid, fa)?;
    let tokens = encoder_forward(ctx, &params.mtm.encoder, &state)?;
    let q0 = params.mtm.seed_queries(ctx, state.fa_prime)?;
    let decoded = mtd_forward(ctx, &params.mtm, q0, &tokens)?;
    let feat = cross_modal_fpn(ctx, &params.fpn, &tokens, fa)?;
    let logits = predict_masks(ctx, &params.head, decoded.q_segment, feat)?;
    let mut aux_logits = Vec::with_capacity(decoded.aux.len());
    for &aux in &decoded.aux {
        aux_logits.push(predict_masks(ctx, &params.head, aux, feat)?);
    }
    let bcl_pair = if params.bcl.is_some() {
        let second = match params.cfg.bcl_second_branch {
            BclBranch::EnhancedAudio => *state.fa_chain.last().unwrap(),
            BclBranch::OriginalVisual => ctx.tape.mean_axes(pyramid[0], &[2, 3], false)?,
            BclBranch::EnhancedVisual => ctx.tape.mean_axes(state.fv[0], &[2, 3], false)?,
        };
        Some((fa, second))
    } else {
        None
    };
    Ok(ForwardOutput { logits, aux_logits, bcl_pair })
}
