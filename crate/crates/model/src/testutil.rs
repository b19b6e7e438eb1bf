//! Shared helpers for the crate's unit tests.

use ccformer_tensor::{Result, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar readout `sum(v * w)` with fixed pseudo-random weights. A plain
/// `sum_all` readout is useless after a layer norm (normalized rows sum to a
/// constant, so the all-ones cotangent vanishes); weighting keeps gradient
/// magnitudes healthy for sensitivity and finite-difference tests.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = crate::params::normal::<f64>(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let wv = tape.constant(&w);
    let p = tape.mul(v, wv)?;
    Ok(tape.sum_all(p))
}

/// Step-size ladder used by the module-level finite-difference tests.
pub const FD_STEPS: [f64; 3] = [1e-4, 2e-5, 1e-3];
