//! Finite-difference oracles for the differentiable primitives and the
//! assembled network. These helpers never touch the reverse pass they
//! check: values are recomputed from scratch with perturbed inputs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Shape, Tape, Var};

/// Central-difference step, f64.
pub const FD_STEP: f64 = 1e-5;
/// Accepted relative error between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero.
pub const FD_ZERO_FLOOR: f64 = 1e-7;

pub fn random_buffer(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Compares one analytic/numeric gradient pair.
pub fn fd_agree(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_ZERO_FLOOR {
        return true;
    }
    (analytic - numeric).abs() / scale <= FD_REL_TOL
}

/// Checks every element of every leaf against central differences.
///
/// `build` must deterministically construct the same graph for the same
/// leaf values and return a scalar output.
pub fn check_leaf_gradients<F>(shapes: &[Shape], seed: u64, build: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_leaf_gradients_sampled(shapes, seed, usize::MAX, &build)
}

/// Like [`check_leaf_gradients`] but checks at most `max_per_leaf` randomly
/// chosen elements per leaf; used where exhaustive sweeps are too slow.
pub fn check_leaf_gradients_sampled<F>(
    shapes: &[Shape],
    seed: u64,
    max_per_leaf: usize,
    build: &F,
) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let values: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_buffer(s.len(), seed.wrapping_add(i as u64 * 0x9e37)))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.leaf(*s, v.clone()))
            .collect();
        let out = build(&mut tape, &leaves);
        let value = tape.value(out)[0];
        let grads = tape.backward(out);
        let leaf_grads = leaves
            .iter()
            .map(|&l| {
                grads
                    .get(l)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(l).len()])
            })
            .collect();
        (value, leaf_grads)
    };
    let eval_value = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.leaf(*s, v.clone()))
            .collect();
        let out = build(&mut tape, &leaves);
        tape.value(out)[0]
    };

    let (_, analytic) = eval(&values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ce);
    for (li, shape) in shapes.iter().enumerate() {
        let n = shape.len();
        let indices: Vec<usize> = if n <= max_per_leaf {
            (0..n).collect()
        } else {
            (0..max_per_leaf).map(|_| rng.random_range(0..n)).collect()
        };
        for k in indices {
            let mut plus = values.clone();
            plus[li][k] += FD_STEP;
            let mut minus = values.clone();
            minus[li][k] -= FD_STEP;
            let numeric = (eval_value(&plus) - eval_value(&minus)) / (2.0 * FD_STEP);
            let a = analytic[li][k];
            if !fd_agree(a, numeric) {
                return Err(format!(
                    "leaf {li} element {k}: analytic {a} vs numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}
