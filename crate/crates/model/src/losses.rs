//! Training objectives: dice over clip masks, stable per-pixel BCE, and the
//! bi-modal contrastive loss over projected audio streams.

use ccformer_tensor::{Result, Scalar, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::nn::LinearParams;
use crate::params::{Ctx, ParamStore};

pub const DICE_EPS: f64 = 1.0;
pub const BCL_PROJ_DIM: usize = 128;

fn check_binary<T: Scalar>(op: &'static str, target: &[T]) -> Result<()> {
    if target.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(TensorError::invalid(op, "target must be exactly 0/1"));
    }
    Ok(())
}

/// Per-frame dice on sigmoid probabilities, averaged over frames:
/// `1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps)` with pixel sums taken per
/// frame across all channels.
pub fn dice_loss<T: Scalar>(ctx: &mut Ctx<T>, logits: Var, target: Var) -> Result<Var> {
    let lsh = ctx.tape.shape(logits).to_vec();
    let tsh = ctx.tape.shape(target).to_vec();
    if lsh != tsh || lsh.len() != 4 {
        return Err(TensorError::invalid(
            "dice_loss",
            format!("logits {lsh:?} and target {tsh:?} must be equal rank-4 shapes"),
        ));
    }
    check_binary("dice_loss", ctx.tape.data(target))?;
    let p = ctx.tape.sigmoid(logits);
    let pg = ctx.tape.mul(p, target)?;
    let axes = [1usize, 2, 3];
    let inter = ctx.tape.sum_axes(pg, &axes, false)?;
    let psum = ctx.tape.sum_axes(p, &axes, false)?;
    let gsum = ctx.tape.sum_axes(target, &axes, false)?;
    let num = ctx.tape.scale(inter, T::of_f64(2.0));
    let num = ctx.tape.add_scalar(num, T::of_f64(DICE_EPS));
    let den = ctx.tape.add(psum, gsum)?;
    let den = ctx.tape.add_scalar(den, T::of_f64(DICE_EPS));
    let frac = ctx.tape.div(num, den)?;
    let per_frame = ctx.tape.neg(frac);
    let per_frame = ctx.tape.add_scalar(per_frame, T::one());
    Ok(ctx.tape.mean_all(per_frame))
}

/// Numerically stable binary cross-entropy against a one-hot target
/// (background channel included), mean over every element.
pub fn bce_loss<T: Scalar>(ctx: &mut Ctx<T>, logits: Var, target: Var) -> Result<Var> {
    let lsh = ctx.tape.shape(logits).to_vec();
    let tsh = ctx.tape.shape(target).to_vec();
    if lsh != tsh || lsh.len() != 4 {
        return Err(TensorError::invalid(
            "bce_loss",
            format!("logits {lsh:?} and target {tsh:?} must be equal rank-4 shapes"),
        ));
    }
    let data = ctx.tape.data(target);
    check_binary("bce_loss", data)?;
    let (t, c, h, w) = (lsh[0], lsh[1], lsh[2], lsh[3]);
    for frame in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut ones = 0usize;
                for ch in 0..c {
                    if data[((frame * c + ch) * h + y) * w + x] == T::one() {
                        ones += 1;
                    }
                }
                if ones != 1 {
                    return Err(TensorError::invalid(
                        "bce_loss",
                        "target must be one-hot across channels",
                    ));
                }
            }
        }
    }
    // -[g ln s(x) + (1-g) ln(1-s(x))] == softplus(x) - g*x
    let sp = ctx.tape.softplus(logits);
    let gx = ctx.tape.mul(target, logits)?;
    let diff = ctx.tape.sub(sp, gx)?;
    Ok(ctx.tape.mean_all(diff))
}

/// Shared projection into the contrastive space, one linear map applied to
/// both audio streams.
pub struct BclProjection {
    pub proj: LinearParams,
}

impl BclProjection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize) -> Self {
        BclProjection { proj: LinearParams::new(store, rng, "bcl.proj", d, BCL_PROJ_DIM) }
    }

    pub fn param_count(d: usize) -> usize {
        LinearParams::param_count(d, BCL_PROJ_DIM)
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.proj.apply(ctx, x)
    }
}

fn l2_normalize_rows<T: Scalar>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let sq = ctx.tape.mul(x, x)?;
    let rank = ctx.tape.shape(x).len();
    let sum = ctx.tape.sum_axes(sq, &[rank - 1], true)?;
    let sum = ctx.tape.add_scalar(sum, T::of_f64(1e-12));
    let norm = ctx.tape.sqrt(sum);
    let shape = ctx.tape.shape(x).to_vec();
    let norm = ctx.tape.broadcast_to(norm, shape)?;
    ctx.tape.div(x, norm)
}

/// One directional term: anchors along rows, candidates along columns.
/// `mask[r*n+c] == 1` marks a usable denominator entry for row r.
fn info_nce_rows<T: Scalar>(ctx: &mut Ctx<T>, logits: Var, mask: &[T]) -> Result<Var> {
    let n = ctx.tape.shape(logits)[0];
    // constant shift per row for a stable log-sum-exp; detached by construction
    let vals = ctx.tape.data(logits).to_vec();
    let mut shift = Vec::with_capacity(n);
    for r in 0..n {
        let row = &vals[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(row[r], |a, b| if b > a { b } else { a });
        shift.push(m);
    }
    let shift_t = Tensor::from_vec(vec![n, 1], shift)?;
    let shift_v = ctx.tape.constant(&shift_t);
    let shift_b = ctx.tape.broadcast_to(shift_v, vec![n, n])?;
    let centered = ctx.tape.sub(logits, shift_b)?;
    let expd = ctx.tape.exp(centered);
    let mask_v = ctx.tape.constant(&Tensor::from_vec(vec![n, n], mask.to_vec())?);
    let masked = ctx.tape.mul(expd, mask_v)?;
    let denom = ctx.tape.sum_axes(masked, &[1], false)?;
    let log_denom = ctx.tape.ln(denom);
    // row diagonal, centered by the same shift
    let eye: Vec<T> = (0..n * n)
        .map(|i| if i / n == i % n { T::one() } else { T::zero() })
        .collect();
    let eye_v = ctx.tape.constant(&Tensor::from_vec(vec![n, n], eye)?);
    let pos = ctx.tape.mul(centered, eye_v)?;
    let pos = ctx.tape.sum_axes(pos, &[1], false)?;
    let per_row = ctx.tape.sub(log_denom, pos)?;
    Ok(ctx.tape.sum_all(per_row))
}

/// Bi-modal contrastive loss over two projected audio streams `[B,T,p]`.
/// Cross-sample entries form the denominator; the positive joins it only
/// when `include_positive` is set. Symmetric in the two streams, averaged
/// by `1/(B*T)`.
pub fn bcl_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    f_a: Var,
    f_a_prime: Var,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let ash = ctx.tape.shape(f_a).to_vec();
    let bsh = ctx.tape.shape(f_a_prime).to_vec();
    if ash != bsh || ash.len() != 3 {
        return Err(TensorError::invalid(
            "bcl_loss",
            format!("streams must share a [B,T,p] shape, got {ash:?} and {bsh:?}"),
        ));
    }
    if ash[0] < 2 {
        return Err(TensorError::invalid(
            "bcl_loss",
            "batch size must be >= 2 so negatives exist; raise the batch size or disable the contrastive term",
        ));
    }
    if tau <= 0.0 {
        return Err(TensorError::invalid("bcl_loss", "temperature must be positive"));
    }
    let (b, t, p) = (ash[0], ash[1], ash[2]);
    let n = b * t;
    let fa = l2_normalize_rows(ctx, f_a)?;
    let fap = l2_normalize_rows(ctx, f_a_prime)?;
    let fa = ctx.tape.reshape(fa, vec![n, p])?;
    let fap = ctx.tape.reshape(fap, vec![n, p])?;
    let fap_t = ctx.tape.transpose(fap)?;
    let sim = ctx.tape.matmul(fa, fap_t)?;
    let logits = ctx.tape.scale(sim, T::of_f64(1.0 / tau));

    let mut mask = vec![T::zero(); n * n];
    for r in 0..n {
        for c in 0..n {
            let cross_sample = r / t != c / t;
            let positive = r == c;
            if cross_sample || (include_positive && positive) {
                mask[r * n + c] = T::one();
            }
        }
    }
    let term_a = info_nce_rows(ctx, logits, &mask)?;
    let logits_t = ctx.tape.transpose(logits)?;
    let term_b = info_nce_rows(ctx, logits_t, &mask)?;
    let total = ctx.tape.add(term_a, term_b)?;
    Ok(ctx.tape.scale(total, T::of_f64(1.0 / n as f64)))
}

/// Clip-level objective: sum of per-layer dice terms plus the weighted
/// contrastive term.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    dice_terms: &[Var],
    bcl: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if dice_terms.is_empty() {
        return Err(TensorError::invalid("total_loss", "at least one dice term required"));
    }
    let mut total = dice_terms[0];
    for &term in &dice_terms[1..] {
        total = ctx.tape.add(total, term)?;
    }
    if let Some(bcl) = bcl {
        let weighted = ctx.tape.scale(bcl, T::of_f64(lambda));
        total = ctx.tape.add(total, weighted)?;
    }
    Ok(total)
}
