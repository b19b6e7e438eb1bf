//! Central-difference verification of every differentiable op, repeated
//! across seeds. Inputs are drawn away from kinks (relu) and poles (div,
//! ln, sqrt) so the numeric derivative is trustworthy.

use ccformer_tensor::gradcheck::finite_diff_check;
use ccformer_tensor::{Tape, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-6;
/// Long chains amplify central-difference truncation, so they get a
/// slightly looser bound than single ops.
const TOL_CHAIN: f64 = 1e-5;
const SEEDS: u64 = 12;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values with |v| >= margin, for ops with a kink or pole at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check_tol(
    name: &str,
    tol: f64,
    inputs: &[Tensor64],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> ccformer_tensor::Result<Var>,
) {
    let report = finite_diff_check(inputs, H, f).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.passes(tol),
        "{name}: max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

fn check(
    name: &str,
    inputs: &[Tensor64],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> ccformer_tensor::Result<Var>,
) {
    check_tol(name, TOL, inputs, f);
}

#[test]
fn binary_elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, vec![2, 3], -2.0, 2.0);
        let b = uniform(&mut rng, vec![3], -2.0, 2.0);
        check("add", &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            Ok(t.mean_all(y))
        });
        check("sub", &[a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            Ok(t.mean_all(y))
        });
        check("mul", &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.mean_all(y))
        });
        let denom = away_from_zero(&mut rng, vec![2, 3], 0.4);
        check("div", &[a, denom], |t, v| {
            let y = t.div(v[0], v[1])?;
            Ok(t.mean_all(y))
        });
    }
}

#[test]
fn unary_elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = uniform(&mut rng, vec![2, 4], -2.0, 2.0);
        check("scale", &[x.clone()], |t, v| {
            let y = t.scale(v[0], -1.7);
            Ok(t.mean_all(y))
        });
        check("add_scalar", &[x.clone()], |t, v| {
            let y = t.add_scalar(v[0], 0.9);
            Ok(t.mean_all(y))
        });
        check("sigmoid", &[x.clone()], |t, v| {
            let y = t.sigmoid(v[0]);
            Ok(t.mean_all(y))
        });
        check("softplus", &[x.clone()], |t, v| {
            let y = t.softplus(v[0]);
            Ok(t.mean_all(y))
        });
        check("exp", &[x.clone()], |t, v| {
            let y = t.exp(v[0]);
            Ok(t.mean_all(y))
        });
        let kinked = away_from_zero(&mut rng, vec![3, 3], 0.05);
        check("relu", &[kinked], |t, v| {
            let y = t.relu(v[0]);
            Ok(t.mean_all(y))
        });
        let positive = uniform(&mut rng, vec![2, 3], 0.2, 2.5);
        check("ln", &[positive.clone()], |t, v| {
            let y = t.ln(v[0]);
            Ok(t.mean_all(y))
        });
        check("sqrt", &[positive], |t, v| {
            let y = t.sqrt(v[0]);
            Ok(t.mean_all(y))
        });
    }
}

#[test]
fn matmul_including_batch_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = uniform(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, vec![4, 2], -1.0, 1.0);
        check("matmul_2d", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.mean_all(y))
        });
        let a = uniform(&mut rng, vec![2, 2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, vec![3, 2], -1.0, 1.0);
        check("matmul_broadcast_rhs", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let z = t.sigmoid(y);
            Ok(t.mean_all(z))
        });
        let a = uniform(&mut rng, vec![1, 2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, vec![4, 1, 3], -1.0, 1.0);
        check("matmul_broadcast_both", &[a, b], |t, v| {
            let bt = t.transpose(v[1])?;
            let y = t.matmul(v[0], bt)?;
            Ok(t.mean_all(y))
        });
    }
}

#[test]
fn softmax_every_axis() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = uniform(&mut rng, vec![2, 3, 4], -2.0, 2.0);
        let w = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
        for axis in 0..3 {
            check("softmax", &[x.clone(), w.clone()], |t, v| {
                let y = t.softmax(v[0], axis)?;
                let weighted = t.mul(y, v[1])?;
                Ok(t.mean_all(weighted))
            });
        }
    }
}

#[test]
fn layer_norm_full_triplet() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = uniform(&mut rng, vec![3, 5], -2.0, 2.0);
        let gamma = uniform(&mut rng, vec![5], 0.5, 1.5);
        let beta = uniform(&mut rng, vec![5], -0.5, 0.5);
        let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
        check("layer_norm", &[x, gamma, beta, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let weighted = t.mul(y, v[3])?;
            Ok(t.mean_all(weighted))
        });
    }
}

#[test]
fn reductions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = uniform(&mut rng, vec![2, 3, 2], -2.0, 2.0);
        check("sum_axes", &[x.clone()], |t, v| {
            let y = t.sum_axes(v[0], &[1], false)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        });
        check("sum_axes_keepdims", &[x.clone()], |t, v| {
            let y = t.sum_axes(v[0], &[0, 2], true)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        });
        check("mean_axes", &[x], |t, v| {
            let y = t.mean_axes(v[0], &[2], false)?;
            let e = t.exp(y);
            Ok(t.mean_all(e))
        });
    }
}

#[test]
fn layout_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = uniform(&mut rng, vec![2, 3, 4], -2.0, 2.0);
        let w = uniform(&mut rng, vec![4, 3, 2], -1.0, 1.0);
        check("permute", &[x.clone(), w], |t, v| {
            let y = t.permute(v[0], &[2, 1, 0])?;
            let weighted = t.mul(y, v[1])?;
            Ok(t.mean_all(weighted))
        });
        let w2 = uniform(&mut rng, vec![4, 6], -1.0, 1.0);
        check("reshape", &[x.clone(), w2], |t, v| {
            let y = t.reshape(v[0], vec![4, 6])?;
            let weighted = t.mul(y, v[1])?;
            Ok(t.mean_all(weighted))
        });
        let a = uniform(&mut rng, vec![2, 2], -1.0, 1.0);
        let b = uniform(&mut rng, vec![2, 3], -1.0, 1.0);
        check("concat_slice", &[a, b], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(c, 1, 1, 3)?;
            let e = t.sigmoid(s);
            Ok(t.mean_all(e))
        });
        let small = uniform(&mut rng, vec![1, 3], -1.0, 1.0);
        let w3 = uniform(&mut rng, vec![4, 3], -1.0, 1.0);
        check("broadcast_to", &[small, w3], |t, v| {
            let y = t.broadcast_to(v[0], vec![4, 3])?;
            let weighted = t.mul(y, v[1])?;
            Ok(t.mean_all(weighted))
        });
    }
}

#[test]
fn upsample_and_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = uniform(&mut rng, vec![2, 3, 3], -1.0, 1.0);
        let w = uniform(&mut rng, vec![2, 6, 6], -1.0, 1.0);
        check("upsample_bilinear2d", &[x, w], |t, v| {
            let y = t.upsample_bilinear2d(v[0], 2)?;
            let weighted = t.mul(y, v[1])?;
            Ok(t.mean_all(weighted))
        });

        let x = uniform(&mut rng, vec![2, 2, 5, 5], -1.0, 1.0);
        let k = uniform(&mut rng, vec![3, 2, 3, 3], -0.7, 0.7);
        let b = uniform(&mut rng, vec![3], -0.3, 0.3);
        check("conv2d_s1_p1", &[x.clone(), k.clone(), b.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let z = t.sigmoid(y);
            Ok(t.mean_all(z))
        });
        check("conv2d_s2_p1", &[x, k, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            Ok(t.mean_all(y))
        });
        let x = uniform(&mut rng, vec![1, 3, 4, 4], -1.0, 1.0);
        let k = uniform(&mut rng, vec![2, 3, 1, 1], -1.0, 1.0);
        check("conv2d_1x1", &[x, k], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            Ok(t.mean_all(y))
        });
    }
}

#[test]
fn deep_composition_stays_accurate() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = uniform(&mut rng, vec![2, 4], -1.0, 1.0);
        let w1 = uniform(&mut rng, vec![4, 4], -0.8, 0.8);
        let gamma = uniform(&mut rng, vec![4], 0.7, 1.3);
        let beta = uniform(&mut rng, vec![4], -0.2, 0.2);
        check_tol("mlp_ln_softmax_chain", TOL_CHAIN, &[x, w1, gamma, beta], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let hn = t.layer_norm(h, v[2], v[3], 1e-5)?;
            let a = t.softmax(hn, 1)?;
            let picked = t.mul(a, hn)?;
            let s = t.sum_all(picked);
            let sp = t.softplus(s);
            Ok(t.sum_all(sp))
        });
    }
}
