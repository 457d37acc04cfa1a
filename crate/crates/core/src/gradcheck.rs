//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Matrix, Tape, Var};
use crate::params::{BoundParams, ParamSet};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

/// Adds uniform noise on ±`scale` to every entry, so gains and biases are
/// not sitting at their symmetric initial values during a check.
pub fn jitter(params: &ParamSet, scale: f64, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for (_, m) in out.iter_mut() {
        m.mapv_inplace(|v| v + rng.gen_range(-scale..scale));
    }
    out
}

fn weighted_sum(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.mul_const(out, weights.clone());
    tape.sum_all(w)
}

/// Largest per-entry relative error between the analytic gradient and a
/// central difference, over every scalar in `params`.
///
/// The scalar being differentiated is a fixed random weighting of the output
/// node, so normalized outputs (whose plain sum is constant) still carry a
/// gradient.
pub fn max_relative_error<F>(params: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    let weights = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = build(&mut tape, &bound);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        Matrix::from_shape_simple_fn(tape.value(out).raw_dim(), || rng.gen_range(-1.0..1.0))
    };
    let eval = |p: &ParamSet| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = build(&mut tape, &bound);
        let s = weighted_sum(&mut tape, out, &weights);
        tape.scalar(s)
    };

    let analytic = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = build(&mut tape, &bound);
        let s = weighted_sum(&mut tape, out, &weights);
        let grads = tape.backward(s);
        bound.grads(&grads)
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, m) in params.iter() {
        for idx in 0..m.len() {
            let (r, c) = (idx / m.ncols(), idx % m.ncols());
            let orig = m[[r, c]];
            probe.get_mut(name).unwrap()[[r, c]] = orig + STEP;
            let plus = eval(&probe);
            probe.get_mut(name).unwrap()[[r, c]] = orig - STEP;
            let minus = eval(&probe);
            probe.get_mut(name).unwrap()[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.get(name).unwrap()[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
