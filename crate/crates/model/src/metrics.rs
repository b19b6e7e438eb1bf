//! Evaluation metrics over binarized masks: region similarity (mean IoU per
//! frame) and the F-measure with beta^2 = 0.3.

use ccformer_tensor::{Result, Scalar, Tensor, TensorError};

pub const F_BETA_SQ: f64 = 0.3;

/// Threshold sigmoid probabilities at 0.5, i.e. logits at zero.
pub fn binarize_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let data = logits
        .data()
        .iter()
        .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(logits.shape().to_vec(), data).expect("same shape")
}

/// Per-pixel argmax over the channel axis of `[T, C, h, w]` logits.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let sh = logits.shape();
    if sh.len() != 4 {
        return Err(TensorError::invalid("argmax_channels", "expected [T,C,h,w]"));
    }
    let (t, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let data = logits.data();
    let mut out = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = data[((f * c) * h + y) * w + x];
                for ch in 1..c {
                    let v = data[((f * c + ch) * h + y) * w + x];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(out)
}

/// Binary mask `[T, h, w]` selecting one class out of per-pixel labels.
pub fn class_mask<T: Scalar>(
    labels: &[usize],
    shape: &[usize],
    class: usize,
) -> Result<Tensor<T>> {
    if shape.len() != 3 || shape.iter().product::<usize>() != labels.len() {
        return Err(TensorError::invalid("class_mask", "labels do not fill [T,h,w]"));
    }
    let data = labels
        .iter()
        .map(|&l| if l == class { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn frame_counts<T: Scalar>(
    op: &'static str,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<Vec<(f64, f64, f64)>> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 {
        return Err(TensorError::invalid(
            op,
            format!("masks must share a [T,h,w] shape, got {:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    for t in [pred, gt] {
        if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(TensorError::invalid(op, "masks must be binary"));
        }
    }
    let frames = pred.shape()[0];
    let per = pred.data().len() / frames;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let (mut inter, mut p, mut g) = (0.0, 0.0, 0.0);
        for i in 0..per {
            let pv = pred.data()[f * per + i] == T::one();
            let gv = gt.data()[f * per + i] == T::one();
            if pv && gv {
                inter += 1.0;
            }
            if pv {
                p += 1.0;
            }
            if gv {
                g += 1.0;
            }
        }
        out.push((inter, p, g));
    }
    Ok(out)
}

/// Mean per-frame intersection-over-union; an empty prediction against an
/// empty ground truth counts as a perfect frame.
pub fn jaccard<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let counts = frame_counts("jaccard", pred, gt)?;
    let frames = counts.len() as f64;
    let mut acc = 0.0;
    for (inter, p, g) in counts {
        let union = p + g - inter;
        acc += if union == 0.0 { 1.0 } else { inter / union };
    }
    Ok(acc / frames)
}

/// Mean per-frame F-measure with beta^2 = 0.3. Empty prediction gives
/// precision 1; both-empty frames score 1, frames where exactly one side is
/// empty score 0.
pub fn fscore<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let counts = frame_counts("fscore", pred, gt)?;
    let frames = counts.len() as f64;
    let mut acc = 0.0;
    for (inter, p, g) in counts {
        let f = if p == 0.0 && g == 0.0 {
            1.0
        } else if p == 0.0 || g == 0.0 {
            0.0
        } else {
            let precision = inter / p;
            let recall = inter / g;
            if precision == 0.0 && recall == 0.0 {
                0.0
            } else {
                (1.0 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall)
            }
        };
        acc += f;
    }
    Ok(acc / frames)
}
