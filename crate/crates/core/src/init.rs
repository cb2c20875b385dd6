//! Seeded random number generation and parameter initialization. A fixed
//! seed fully determines every run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-scale, scale]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

pub fn uniform_param(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64, tape: &Tape) -> Tensor {
    let data = uniform(rng, shape.clone(), scale);
    Tensor::param(shape, data, tape)
}

pub fn const_param(shape: Vec<usize>, value: f64, tape: &Tape) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![value; n], tape)
}
