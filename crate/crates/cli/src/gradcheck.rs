//! Named central-difference checks covering every differentiable tensor op
//! and each fused module, each runnable across many seeds. The trainer never
//! calls these; they exist so `gradcheck` can re-verify the backward pass of
//! the exact building blocks the model is composed from.

use anyhow::{bail, Result};
use ccformer_model::eim::{eim_forward, EimParams};
use ccformer_model::losses::{bce_loss, bcl_loss, dice_loss, BclProjection};
use ccformer_model::mtm::{generate_queries, ici_layer, iti_layer, AqgParams, IciLayerParams, ItiLayerParams};
use ccformer_model::params::{normal, Ctx, ParamStore};
use ccformer_model::seg_head::{predict_masks, MaskHeadParams};
use ccformer_tensor::gradcheck::{finite_diff_check_refined, rel_err, GradCheckReport};
use ccformer_tensor::{Result as TensorResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 10;
const STEPS: [f64; 3] = [1e-4, 2e-5, 1e-3];

pub const NAMES: [&str; 40] = [
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "exp",
    "ln",
    "sqrt",
    "sigmoid",
    "softplus",
    "relu",
    "softmax",
    "layer_norm",
    "matmul",
    "matmul_rhs_rank2",
    "matmul_kv_broadcast",
    "transpose",
    "permute",
    "reshape",
    "slice",
    "concat",
    "broadcast_to",
    "sum_all",
    "mean_all",
    "sum_axes",
    "mean_axes",
    "conv2d",
    "conv2d_strided",
    "upsample_bilinear2d",
    "detach",
    "eim",
    "aqg",
    "ici",
    "iti",
    "head",
    "dice",
    "bce",
    "bcl",
];

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.max_rel_err <= TOL
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample(seed: u64, shape: &[usize], std: f64) -> Tensor<f64> {
    normal(&mut rng(seed), shape, std)
}

/// Strictly positive samples, for domains like `ln` and `div` denominators.
fn positive(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let t = sample(seed, shape, 0.5);
    let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Samples pushed away from zero so kinked ops see no crossing under fd.
fn off_kink(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let t = sample(seed, shape, 0.8);
    let data = t.data().iter().map(|v| v + 0.3 * v.signum()).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Scalar readout `sum(v * w)` with fixed pseudo-random weights; a plain sum
/// readout loses gradient through normalizing ops.
fn readout(tape: &mut Tape<f64>, v: Var, salt: u64) -> TensorResult<Var> {
    let shape = tape.shape(v).to_vec();
    let w = normal::<f64>(&mut rng(salt ^ 0x5EED), &shape, 1.0);
    let wv = tape.constant(&w);
    let p = tape.mul(v, wv)?;
    Ok(tape.sum_all(p))
}

fn fd(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> TensorResult<Var>,
) -> Result<GradCheckReport> {
    Ok(finite_diff_check_refined(inputs, &STEPS, 1e-6, f)?)
}

/// One named check at one seed.
pub fn check(name: &str, seed: u64) -> Result<GradCheckReport> {
    let s = seed.wrapping_mul(1000).wrapping_add(1);
    match name {
        "add" => fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[3, 4], 0.8)], |t, v| {
            let x = t.add(v[0], v[1])?;
            readout(t, x, s)
        }),
        "sub" => fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[3, 1], 0.8)], |t, v| {
            let x = t.sub(v[0], v[1])?;
            readout(t, x, s)
        }),
        "mul" => fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[4], 0.8)], |t, v| {
            let x = t.mul(v[0], v[1])?;
            readout(t, x, s)
        }),
        "div" => fd(&[sample(s, &[2, 3, 4], 0.8), positive(s + 1, &[3, 4])], |t, v| {
            let x = t.div(v[0], v[1])?;
            readout(t, x, s)
        }),
        "neg" => fd(&[sample(s, &[2, 5], 0.8)], |t, v| {
            let x = t.neg(v[0]);
            readout(t, x, s)
        }),
        "scale" => fd(&[sample(s, &[2, 5], 0.8)], |t, v| {
            let x = t.scale(v[0], 1.7);
            readout(t, x, s)
        }),
        "add_scalar" => fd(&[sample(s, &[2, 5], 0.8)], |t, v| {
            let x = t.add_scalar(v[0], -0.4);
            readout(t, x, s)
        }),
        "exp" => fd(&[sample(s, &[3, 4], 0.5)], |t, v| {
            let x = t.exp(v[0]);
            readout(t, x, s)
        }),
        "ln" => fd(&[positive(s, &[3, 4])], |t, v| {
            let x = t.ln(v[0]);
            readout(t, x, s)
        }),
        "sqrt" => fd(&[positive(s, &[3, 4])], |t, v| {
            let x = t.sqrt(v[0]);
            readout(t, x, s)
        }),
        "sigmoid" => fd(&[sample(s, &[3, 4], 1.0)], |t, v| {
            let x = t.sigmoid(v[0]);
            readout(t, x, s)
        }),
        "softplus" => fd(&[sample(s, &[3, 4], 1.0)], |t, v| {
            let x = t.softplus(v[0]);
            readout(t, x, s)
        }),
        "relu" => fd(&[off_kink(s, &[3, 4])], |t, v| {
            let x = t.relu(v[0]);
            readout(t, x, s)
        }),
        "softmax" => fd(&[sample(s, &[2, 3, 4], 1.0)], |t, v| {
            let x = t.softmax(v[0], 2)?;
            readout(t, x, s)
        }),
        "layer_norm" => fd(
            &[sample(s, &[2, 3, 6], 0.8), sample(s + 1, &[6], 0.4), sample(s + 2, &[6], 0.4)],
            |t, v| {
                let x = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                readout(t, x, s)
            },
        ),
        "matmul" => fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[2, 4, 2], 0.8)], |t, v| {
            let x = t.matmul(v[0], v[1])?;
            readout(t, x, s)
        }),
        "matmul_rhs_rank2" => fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[4, 2], 0.8)], |t, v| {
            let x = t.matmul(v[0], v[1])?;
            readout(t, x, s)
        }),
        "matmul_kv_broadcast" => {
            fd(&[sample(s, &[2, 3, 4], 0.8), sample(s + 1, &[1, 4, 2], 0.8)], |t, v| {
                let x = t.matmul(v[0], v[1])?;
                readout(t, x, s)
            })
        }
        "transpose" => fd(&[sample(s, &[2, 3, 4], 0.8)], |t, v| {
            let x = t.transpose(v[0])?;
            readout(t, x, s)
        }),
        "permute" => fd(&[sample(s, &[2, 3, 4], 0.8)], |t, v| {
            let x = t.permute(v[0], &[2, 0, 1])?;
            readout(t, x, s)
        }),
        "reshape" => fd(&[sample(s, &[2, 6], 0.8)], |t, v| {
            let x = t.reshape(v[0], vec![4, 3])?;
            readout(t, x, s)
        }),
        "slice" => fd(&[sample(s, &[2, 5, 3], 0.8)], |t, v| {
            let x = t.slice(v[0], 1, 1, 3)?;
            readout(t, x, s)
        }),
        "concat" => fd(&[sample(s, &[2, 2, 3], 0.8), sample(s + 1, &[2, 1, 3], 0.8)], |t, v| {
            let x = t.concat(&[v[0], v[1]], 1)?;
            readout(t, x, s)
        }),
        "broadcast_to" => fd(&[sample(s, &[2, 1, 3], 0.8)], |t, v| {
            let x = t.broadcast_to(v[0], vec![2, 4, 3])?;
            readout(t, x, s)
        }),
        "sum_all" => fd(&[sample(s, &[3, 4], 0.8)], |t, v| Ok(t.sum_all(v[0]))),
        "mean_all" => fd(&[sample(s, &[3, 4], 0.8)], |t, v| Ok(t.mean_all(v[0]))),
        "sum_axes" => fd(&[sample(s, &[2, 3, 4], 0.8)], |t, v| {
            let x = t.sum_axes(v[0], &[0, 2], false)?;
            readout(t, x, s)
        }),
        "mean_axes" => fd(&[sample(s, &[2, 3, 4], 0.8)], |t, v| {
            let x = t.mean_axes(v[0], &[1], true)?;
            readout(t, x, s)
        }),
        "conv2d" => fd(
            &[
                sample(s, &[2, 3, 5, 5], 0.6),
                sample(s + 1, &[4, 3, 3, 3], 0.4),
                sample(s + 2, &[4], 0.4),
            ],
            |t, v| {
                let x = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                readout(t, x, s)
            },
        ),
        "conv2d_strided" => fd(
            &[
                sample(s, &[1, 2, 6, 6], 0.6),
                sample(s + 1, &[3, 2, 3, 3], 0.4),
                sample(s + 2, &[3], 0.4),
            ],
            |t, v| {
                let x = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                readout(t, x, s)
            },
        ),
        "upsample_bilinear2d" => fd(&[sample(s, &[1, 2, 3, 3], 0.8)], |t, v| {
            let x = t.upsample_bilinear2d(v[0], 2)?;
            readout(t, x, s)
        }),
        "detach" => check_detach(s),
        "eim" => check_eim(s),
        "aqg" => check_aqg(s),
        "ici" => check_ici(s),
        "iti" => check_iti(s),
        "head" => check_head(s),
        "dice" => check_dice(s),
        "bce" => check_bce(s),
        "bcl" => check_bcl(s),
        other => bail!("unknown gradient check `{other}`"),
    }
}

/// `detach` blocks flow, so fd cannot probe it; instead verify the closed
/// form: d/dx sum(detach(x) * x) must equal x itself.
fn check_detach(s: u64) -> Result<GradCheckReport> {
    let x = sample(s, &[3, 4], 0.8).with_grad(true);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let frozen = tape.detach(xv);
    let prod = tape.mul(frozen, xv)?;
    let out = tape.sum_all(prod);
    let grads = tape.backward(out)?;
    let g = grads.wrt(xv);
    let mut worst = 0.0f64;
    for (a, e) in g.data().iter().zip(x.data()) {
        worst = worst.max(rel_err(*a, *e));
    }
    Ok(GradCheckReport { max_rel_err: worst, worst: None, checked: g.data().len() })
}

fn check_eim(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let eim = EimParams::new(&mut store, &mut r, 4, 2, 8, true, true, false);
    let w1 = store.lookup("eim.ave0.ffn.w1.w").unwrap();
    let wq = store.lookup("eim.vae0.attn.wq.w").unwrap();
    let mut inputs: Vec<Tensor<f64>> = [(2usize, 2usize), (2, 1), (1, 2), (1, 1)]
        .iter()
        .map(|&(h, w)| normal(&mut r, &[2, 4, h, w], 0.7))
        .collect();
    inputs.push(normal(&mut r, &[2, 4], 0.7));
    inputs.push(store.get(w1).clone());
    inputs.push(store.get(wq).clone());
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        ctx.assign(w1, v[5]);
        ctx.assign(wq, v[6]);
        let pyramid = [v[0], v[1], v[2], v[3]];
        let state = eim_forward(&mut ctx, &eim, &pyramid, v[4])?;
        let mut acc = readout(ctx.tape, state.fa_prime, s)?;
        for (k, &fv) in state.fv.iter().enumerate() {
            let part = readout(ctx.tape, fv, s + 10 + k as u64)?;
            acc = ctx.tape.add(acc, part)?;
        }
        Ok(acc)
    })
}

fn check_aqg(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let aqg = AqgParams::new(&mut store, &mut r, 2, 4, 2, 2);
    let q0 = aqg.q0;
    let wq = aqg.layers[0].self_attn.wq.w;
    let mut inputs = vec![normal(&mut r, &[3, 1, 4], 0.7)];
    inputs.push(store.get(q0).clone());
    inputs.push(store.get(wq).clone());
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        ctx.assign(q0, v[1]);
        ctx.assign(wq, v[2]);
        let q = generate_queries(&mut ctx, &aqg, v[0])?;
        readout(ctx.tape, q, s)
    })
}

fn check_ici(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let layer = IciLayerParams::new(&mut store, &mut r, "ici", 4, 2, 8);
    let wq = layer.cross_attn.wq.w;
    let inputs = vec![
        normal(&mut r, &[2, 2, 4], 0.7),
        normal(&mut r, &[2, 5, 4], 0.7),
        store.get(wq).clone(),
    ];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        ctx.assign(wq, v[2]);
        let q = ici_layer(&mut ctx, &layer, v[0], v[1])?;
        readout(ctx.tape, q, s)
    })
}

fn check_iti(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let layer = ItiLayerParams::new(&mut store, &mut r, "iti", 4, 2);
    let wq = layer.intra_self.wq.w;
    let inputs = vec![
        normal(&mut r, &[4, 4], 0.7),
        normal(&mut r, &[2, 4], 0.7),
        store.get(wq).clone(),
    ];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        ctx.assign(wq, v[2]);
        let (intra, inter) = iti_layer(&mut ctx, &layer, v[0], v[1], None)?;
        let a = readout(ctx.tape, intra, s)?;
        let b = readout(ctx.tape, inter, s + 1)?;
        Ok(ctx.tape.add(a, b)?)
    })
}

fn check_head(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let head = MaskHeadParams::new(&mut store, &mut r, 2, 4, 2);
    let kw = store.lookup("head.kernel.w").unwrap();
    let inputs = vec![
        normal(&mut r, &[2, 2, 4], 0.7),
        normal(&mut r, &[2, 4, 3, 3], 0.7),
        store.get(kw).clone(),
    ];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        ctx.assign(kw, v[2]);
        let m = predict_masks(&mut ctx, &head, v[0], v[1])?;
        readout(ctx.tape, m, s)
    })
}

fn check_dice(s: u64) -> Result<GradCheckReport> {
    let store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let target_data: Vec<f64> =
        (0..2 * 1 * 4 * 4).map(|_| if r.gen::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
    let target = Tensor::from_vec(vec![2, 1, 4, 4], target_data).unwrap();
    let inputs = vec![normal(&mut r, &[2, 1, 4, 4], 1.0)];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        let tgt = ctx.tape.constant(&target);
        dice_loss(&mut ctx, v[0], tgt)
    })
}

fn check_bce(s: u64) -> Result<GradCheckReport> {
    let store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let (t, c, h, w) = (2usize, 3usize, 2usize, 2usize);
    let mut target_data = vec![0.0f64; t * c * h * w];
    for f in 0..t {
        for p in 0..h * w {
            let cl = r.gen_range(0..c);
            target_data[(f * c + cl) * h * w + p] = 1.0;
        }
    }
    let target = Tensor::from_vec(vec![t, c, h, w], target_data).unwrap();
    let inputs = vec![normal(&mut r, &[t, c, h, w], 1.0)];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        let tgt = ctx.tape.constant(&target);
        bce_loss(&mut ctx, v[0], tgt)
    })
}

fn check_bcl(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(s);
    let proj = BclProjection::new(&mut store, &mut r, 5);
    let inputs = vec![normal(&mut r, &[2, 2, 5], 0.7), normal(&mut r, &[2, 2, 5], 0.7)];
    fd(&inputs, |tape, v| {
        let mut ctx = Ctx::new(tape, &store, true);
        let a = proj.apply(&mut ctx, v[0])?;
        let b = proj.apply(&mut ctx, v[1])?;
        bcl_loss(&mut ctx, a, b, 0.07, false)
    })
}

pub fn run_one(name: &'static str, seeds: u64) -> Result<CheckOutcome> {
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..seeds {
        let report = check(name, seed)?;
        max_rel_err = max_rel_err.max(report.max_rel_err);
        checked += report.checked;
    }
    Ok(CheckOutcome { name, seeds, max_rel_err, checked })
}

/// Runs every check whose name contains `filter` (all when absent), printing
/// one line per check. The returned outcomes carry the worst error seen.
pub fn run(filter: Option<&str>, seeds: u64) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<&'static str> = NAMES
        .iter()
        .copied()
        .filter(|n| filter.is_none_or(|f| n.contains(f)))
        .collect();
    if selected.is_empty() {
        bail!("no gradient check matches `{}`", filter.unwrap_or(""));
    }
    let mut outcomes = Vec::with_capacity(selected.len());
    for name in selected {
        let outcome = run_one(name, seeds)?;
        println!(
            "[gradcheck] {:<20} seeds {:>2} derivatives {:>5} max rel err {:.3e} {}",
            outcome.name,
            outcome.seeds,
            outcome.checked,
            outcome.max_rel_err,
            if outcome.ok() { "ok" } else { "FAIL" }
        );
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
