//! Multi-query transformer: a dense self-attention encoder over the three
//! coarse scales, an audio-conditioned query generator, and a decoder that
//! interleaves per-frame query/pixel interaction with cross-frame temporal
//! interaction, combining both query streams into the segmentation queries.

use ccformer_tensor::{Result, Scalar, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::eim::{map_to_tokens, EimState, FusionBlockParams};
use crate::nn::{sincos_1d, sincos_2d, FfnParams, LnParams, MhaParams};
use crate::params::{normal, Ctx, ParamId, ParamStore};

/// Flattened scale 2-4 tokens plus the bypassed stride-4 map.
pub struct EncoderTokens {
    /// `[T, L, d]` with `L = sum of Hi*Wi` over the three coarse scales.
    pub tokens: Var,
    /// Spatial extent of each flattened scale, in token order.
    pub scale_dims: Vec<(usize, usize)>,
    /// The untouched stride-4 map `[T, d, H/4, W/4]`.
    pub fv1: Var,
}

impl EncoderTokens {
    /// Token ranges of each scale inside the flattened axis.
    pub fn boundaries(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.scale_dims.len());
        let mut start = 0;
        for &(h, w) in &self.scale_dims {
            out.push(start..start + h * w);
            start += h * w;
        }
        out
    }
}

pub struct EncoderParams {
    level_embed: ParamId,
    layers: Vec<FusionBlockParams>,
    d: usize,
}

impl EncoderParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
    ) -> Self {
        EncoderParams {
            level_embed: store.register("encoder.level_embed", normal(rng, &[3, d], 0.02)),
            layers: (0..layers)
                .map(|i| FusionBlockParams::new(store, rng, &format!("encoder.layer{i}"), d, heads, d_ff))
                .collect(),
            d,
        }
    }

    pub fn param_count(d: usize, d_ff: usize, layers: usize) -> usize {
        3 * d + layers * FusionBlockParams::param_count(d, d_ff)
    }
}

/// Flatten scales 2-4, add fixed 2-d sinusoids plus the per-scale level
/// embedding, then run per-frame self-attention layers. Scale 1 bypasses.
pub fn encoder_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &EncoderParams,
    state: &EimState,
) -> Result<EncoderTokens> {
    let mut parts = Vec::with_capacity(3);
    let mut scale_dims = Vec::with_capacity(3);
    for (level, &map) in state.fv[1..].iter().enumerate() {
        let sh = ctx.tape.shape(map).to_vec();
        let (t, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if d != params.d {
            return Err(TensorError::invalid(
                "encoder_forward",
                format!("scale has width {d}, expected {}", params.d),
            ));
        }
        let tokens = map_to_tokens(ctx, map)?;
        let pos = sincos_2d::<T>(h, w, d);
        let pos = ctx.tape.constant(&pos.reshaped(vec![1, h * w, d])?);
        let tokens = ctx.tape.add(tokens, pos)?;
        let level_all = ctx.p(params.level_embed);
        let level_row = ctx.tape.slice(level_all, 0, level, 1)?;
        let level_row = ctx.tape.reshape(level_row, vec![1, 1, d])?;
        let level_row = ctx.tape.broadcast_to(level_row, vec![t, h * w, d])?;
        let tokens = ctx.tape.add(tokens, level_row)?;
        parts.push(tokens);
        scale_dims.push((h, w));
    }
    let mut tokens = ctx.tape.concat(&parts, 1)?;
    for layer in &params.layers {
        tokens = layer.apply(ctx, tokens, tokens)?;
    }
    Ok(EncoderTokens { tokens, scale_dims, fv1: state.fv[0] })
}

/// One generator layer: query self-attention then cross-attention into the
/// per-frame audio token, both post-norm, no feed-forward half.
#[derive(Debug, Clone, Copy)]
pub struct AqgLayerParams {
    pub self_attn: MhaParams,
    pub ln1: LnParams,
    pub cross_attn: MhaParams,
    pub ln2: LnParams,
}

impl AqgLayerParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        AqgLayerParams {
            self_attn: MhaParams::new(store, rng, &format!("{prefix}.self"), d, heads),
            ln1: LnParams::new(store, &format!("{prefix}.ln1"), d),
            cross_attn: MhaParams::new(store, rng, &format!("{prefix}.cross"), d, heads),
            ln2: LnParams::new(store, &format!("{prefix}.ln2"), d),
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, q: Var, fa_prime: Var) -> Result<Var> {
        let sa = self.self_attn.attend(ctx, q, q)?;
        let x = ctx.tape.add(sa, q)?;
        let x = self.ln1.apply(ctx, x)?;
        let ca = self.cross_attn.attend(ctx, x, fa_prime)?;
        let y = ctx.tape.add(ca, x)?;
        self.ln2.apply(ctx, y)
    }

    pub fn param_count(d: usize) -> usize {
        2 * MhaParams::param_count(d) + 2 * LnParams::param_count(d)
    }
}

pub struct AqgParams {
    pub q0: ParamId,
    pub layers: Vec<AqgLayerParams>,
}

impl AqgParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        AqgParams {
            q0: store.register("aqg.q0", normal(rng, &[n, d], 0.02)),
            layers: (0..layers)
                .map(|i| AqgLayerParams::new(store, rng, &format!("aqg.layer{i}"), d, heads))
                .collect(),
        }
    }

    pub fn param_count(n: usize, d: usize, layers: usize) -> usize {
        n * d + layers * AqgLayerParams::param_count(d)
    }
}

/// Audio-conditioned query generation: trainable seeds refined over layers
/// of self-attention plus cross-attention into `F'_a` (`[T,1,d]`).
pub fn generate_queries<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &AqgParams,
    fa_prime: Var,
) -> Result<Var> {
    let fsh = ctx.tape.shape(fa_prime).to_vec();
    if fsh.len() != 3 || fsh[1] != 1 {
        return Err(TensorError::invalid(
            "generate_queries",
            format!("expected [T,1,d] audio tokens, got {fsh:?}"),
        ));
    }
    let t = fsh[0];
    let q0 = ctx.p(params.q0);
    let qsh = ctx.tape.shape(q0).to_vec();
    let q = ctx.tape.reshape(q0, vec![1, qsh[0], qsh[1]])?;
    let mut q = ctx.tape.broadcast_to(q, vec![t, qsh[0], qsh[1]])?;
    for layer in &params.layers {
        q = layer.apply(ctx, q, fa_prime)?;
    }
    Ok(q)
}

/// Per-frame decoder layer: query self-attention, cross-attention into the
/// frame's encoder tokens, then the feed-forward half; post-norm residuals.
#[derive(Debug, Clone, Copy)]
pub struct IciLayerParams {
    pub self_attn: MhaParams,
    pub ln1: LnParams,
    pub cross_attn: MhaParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub ln3: LnParams,
}

impl IciLayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        IciLayerParams {
            self_attn: MhaParams::new(store, rng, &format!("{prefix}.self"), d, heads),
            ln1: LnParams::new(store, &format!("{prefix}.ln1"), d),
            cross_attn: MhaParams::new(store, rng, &format!("{prefix}.cross"), d, heads),
            ln2: LnParams::new(store, &format!("{prefix}.ln2"), d),
            ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ff),
            ln3: LnParams::new(store, &format!("{prefix}.ln3"), d),
        }
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        2 * MhaParams::param_count(d)
            + 3 * LnParams::param_count(d)
            + FfnParams::param_count(d, d_ff)
    }
}

/// `q_intra: [T,n,d]`, `tokens: [T,L,d]` -> `[T,n,d]`; frames never mix.
pub fn ici_layer<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &IciLayerParams,
    q_intra: Var,
    tokens: Var,
) -> Result<Var> {
    let sa = params.self_attn.attend(ctx, q_intra, q_intra)?;
    let x = ctx.tape.add(sa, q_intra)?;
    let x = params.ln1.apply(ctx, x)?;
    let ca = params.cross_attn.attend(ctx, x, tokens)?;
    let y = ctx.tape.add(ca, x)?;
    let y = params.ln2.apply(ctx, y)?;
    let f = params.ffn.apply(ctx, y)?;
    let z = ctx.tape.add(f, y)?;
    params.ln3.apply(ctx, z)
}

/// Temporal interaction layer: self-attention over all `n*T` intra queries,
/// then the inter queries read that pool and self-attend.
#[derive(Debug, Clone, Copy)]
pub struct ItiLayerParams {
    pub intra_self: MhaParams,
    pub ln1: LnParams,
    pub inter_cross: MhaParams,
    pub ln2: LnParams,
    pub inter_self: MhaParams,
    pub ln3: LnParams,
}

impl ItiLayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        ItiLayerParams {
            intra_self: MhaParams::new(store, rng, &format!("{prefix}.intra_self"), d, heads),
            ln1: LnParams::new(store, &format!("{prefix}.ln1"), d),
            inter_cross: MhaParams::new(store, rng, &format!("{prefix}.inter_cross"), d, heads),
            ln2: LnParams::new(store, &format!("{prefix}.ln2"), d),
            inter_self: MhaParams::new(store, rng, &format!("{prefix}.inter_self"), d, heads),
            ln3: LnParams::new(store, &format!("{prefix}.ln3"), d),
        }
    }

    pub fn param_count(d: usize) -> usize {
        3 * MhaParams::param_count(d) + 3 * LnParams::param_count(d)
    }
}

/// `q_intra_flat: [nT,d]`, `q_inter: [n,d]` -> updated pair, same shapes.
/// `temporal_pos` optionally adds a per-frame 1-d sinusoid to the pooled
/// queries before their self-attention (`n` consecutive tokens per frame).
pub fn iti_layer<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &ItiLayerParams,
    q_intra_flat: Var,
    q_inter: Var,
    temporal_pos: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let ish = ctx.tape.shape(q_intra_flat).to_vec();
    let rsh = ctx.tape.shape(q_inter).to_vec();
    if ish.len() != 2 || rsh.len() != 2 || ish[1] != rsh[1] {
        return Err(TensorError::invalid(
            "iti_layer",
            format!("expected [nT,d] and [n,d], got {ish:?} and {rsh:?}"),
        ));
    }
    let intra = ctx.tape.reshape(q_intra_flat, vec![1, ish[0], ish[1]])?;
    let sa_in = match temporal_pos {
        Some(pos) => {
            let p = ctx.tape.constant(&pos.reshaped(vec![1, ish[0], ish[1]])?);
            ctx.tape.add(intra, p)?
        }
        None => intra,
    };
    let sa = params.intra_self.attend(ctx, sa_in, sa_in)?;
    let x = ctx.tape.add(sa, intra)?;
    let intra_out = params.ln1.apply(ctx, x)?;

    let inter = ctx.tape.reshape(q_inter, vec![1, rsh[0], rsh[1]])?;
    let ca = params.inter_cross.attend(ctx, inter, intra_out)?;
    let y = ctx.tape.add(ca, inter)?;
    let y = params.ln2.apply(ctx, y)?;
    let sa2 = params.inter_self.attend(ctx, y, y)?;
    let z = ctx.tape.add(sa2, y)?;
    let inter_out = params.ln3.apply(ctx, z)?;

    let intra_flat = ctx.tape.reshape(intra_out, vec![ish[0], ish[1]])?;
    let inter_flat = ctx.tape.reshape(inter_out, vec![rsh[0], rsh[1]])?;
    Ok((intra_flat, inter_flat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryGenerator {
    /// Learnable embeddings only.
    None,
    /// Per-frame audio token repeated over the query axis, plus embeddings.
    Repeat,
    /// Attention-generated queries plus embeddings.
    Attention,
}

pub struct MtmParams {
    pub encoder: EncoderParams,
    pub aqg: Option<AqgParams>,
    pub qgen: QueryGenerator,
    pub intra_embed: ParamId,
    pub q_inter: Option<ParamId>,
    pub ici: Option<Vec<IciLayerParams>>,
    pub iti: Option<Vec<ItiLayerParams>>,
    pub n: usize,
    pub d: usize,
    /// Decoder block count (ICI positions), even when ICI is ablated.
    pub blocks: usize,
    /// Temporal-interaction layers per block.
    pub per_block: usize,
    pub temporal_pos: bool,
}

#[allow(clippy::too_many_arguments)]
pub struct MtmConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub aqg_layers: usize,
    pub blocks: usize,
    pub per_block: usize,
    pub qgen: QueryGenerator,
    pub enable_ici: bool,
    pub enable_iti: bool,
    pub temporal_pos: bool,
}

impl MtmParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &MtmConfig) -> Self {
        let encoder = EncoderParams::new(store, rng, cfg.d, cfg.heads, cfg.d_ff, cfg.encoder_layers);
        let aqg = (cfg.qgen == QueryGenerator::Attention)
            .then(|| AqgParams::new(store, rng, cfg.n, cfg.d, cfg.heads, cfg.aqg_layers));
        let intra_embed = store.register("mtd.intra_embed", normal(rng, &[cfg.n, cfg.d], 0.02));
        let q_inter = cfg
            .enable_iti
            .then(|| store.register("mtd.q_inter", normal(rng, &[cfg.n, cfg.d], 0.02)));
        let ici = cfg.enable_ici.then(|| {
            (0..cfg.blocks)
                .map(|i| IciLayerParams::new(store, rng, &format!("mtd.ici{i}"), cfg.d, cfg.heads, cfg.d_ff))
                .collect()
        });
        let iti = cfg.enable_iti.then(|| {
            (0..cfg.blocks * cfg.per_block)
                .map(|i| ItiLayerParams::new(store, rng, &format!("mtd.iti{i}"), cfg.d, cfg.heads))
                .collect()
        });
        MtmParams {
            encoder,
            aqg,
            qgen: cfg.qgen,
            intra_embed,
            q_inter,
            ici,
            iti,
            n: cfg.n,
            d: cfg.d,
            blocks: cfg.blocks,
            per_block: cfg.per_block,
            temporal_pos: cfg.temporal_pos,
        }
    }

    pub fn param_count(cfg: &MtmConfig) -> usize {
        let mut n = EncoderParams::param_count(cfg.d, cfg.d_ff, cfg.encoder_layers);
        if cfg.qgen == QueryGenerator::Attention {
            n += AqgParams::param_count(cfg.n, cfg.d, cfg.aqg_layers);
        }
        n += cfg.n * cfg.d;
        if cfg.enable_iti {
            n += cfg.n * cfg.d;
            n += cfg.blocks * cfg.per_block * ItiLayerParams::param_count(cfg.d);
        }
        if cfg.enable_ici {
            n += cfg.blocks * IciLayerParams::param_count(cfg.d, cfg.d_ff);
        }
        n
    }

    /// Initial intra queries `[T,n,d]`: generator output plus the learnable
    /// embeddings broadcast over frames.
    pub fn seed_queries<T: Scalar>(&self, ctx: &mut Ctx<T>, fa_prime: Var) -> Result<Var> {
        let t = ctx.tape.shape(fa_prime)[0];
        let embed = ctx.p(self.intra_embed);
        let embed = ctx.tape.reshape(embed, vec![1, self.n, self.d])?;
        let embed = ctx.tape.broadcast_to(embed, vec![t, self.n, self.d])?;
        match self.qgen {
            QueryGenerator::None => Ok(embed),
            QueryGenerator::Repeat => {
                let rep = ctx.tape.broadcast_to(fa_prime, vec![t, self.n, self.d])?;
                ctx.tape.add(rep, embed)
            }
            QueryGenerator::Attention => {
                let gen = generate_queries(ctx, self.aqg.as_ref().unwrap(), fa_prime)?;
                ctx.tape.add(gen, embed)
            }
        }
    }
}

pub struct MtdOutput {
    /// Final segmentation queries `[T,n,d]`.
    pub q_segment: Var,
    /// Final intra stream `[T,n,d]` (equals `q_segment` minus the repeated
    /// inter queries when temporal interaction is enabled).
    pub q_intra_final: Var,
    /// One combined emission per decoder block, for deep supervision.
    pub aux: Vec<Var>,
}

fn combine<T: Scalar>(ctx: &mut Ctx<T>, q_intra: Var, q_inter: Option<Var>) -> Result<Var> {
    match q_inter {
        Some(inter) => {
            let sh = ctx.tape.shape(q_intra).to_vec();
            let ish = ctx.tape.shape(inter).to_vec();
            let r = ctx.tape.reshape(inter, vec![1, ish[0], ish[1]])?;
            let r = ctx.tape.broadcast_to(r, sh)?;
            ctx.tape.add(q_intra, r)
        }
        None => Ok(q_intra),
    }
}

/// Decoder loop: per block, one per-frame interaction layer (when enabled)
/// followed by the block's temporal layers, the intra stream flowing through
/// both. Emits a combined snapshot after every block position for deep
/// supervision and the final combination at the end.
pub fn mtd_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    params: &MtmParams,
    q_intra0: Var,
    tokens: &EncoderTokens,
) -> Result<MtdOutput> {
    let sh = ctx.tape.shape(q_intra0).to_vec();
    let (t, n, d) = (sh[0], sh[1], sh[2]);
    let mut q_intra = q_intra0;
    let mut q_inter = params.q_inter.map(|id| ctx.p(id));
    let temporal_pos = params.temporal_pos.then(|| {
        let table = sincos_1d::<T>(t, d);
        let mut data = Vec::with_capacity(t * n * d);
        for frame in 0..t {
            for _ in 0..n {
                data.extend_from_slice(&table.data()[frame * d..(frame + 1) * d]);
            }
        }
        Tensor::from_vec(vec![t * n, d], data).expect("temporal pos")
    });
    let mut aux = Vec::with_capacity(params.blocks);
    for block in 0..params.blocks {
        if let Some(ici) = &params.ici {
            q_intra = ici_layer(ctx, &ici[block], q_intra, tokens.tokens)?;
        }
        aux.push(combine(ctx, q_intra, q_inter)?);
        if let Some(iti) = &params.iti {
            let mut flat = ctx.tape.reshape(q_intra, vec![t * n, d])?;
            for m in 0..params.per_block {
                let layer = &iti[block * params.per_block + m];
                let (new_flat, new_inter) =
                    iti_layer(ctx, layer, flat, q_inter.unwrap(), temporal_pos.as_ref())?;
                flat = new_flat;
                q_inter = Some(new_inter);
            }
            q_intra = ctx.tape.reshape(flat, vec![t, n, d])?;
        }
    }
    let q_segment = combine(ctx, q_intra, q_inter)?;
    Ok(MtdOutput { q_segment, q_intra_final: q_intra, aux })
}
