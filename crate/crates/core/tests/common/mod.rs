#![allow(dead_code)]

pub mod checks;

use dsmoe::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Worst elementwise relative error between backprop and central
/// differences, `|a - n| / max(|a|, |n|, floor)`, ignoring entries that
/// agree to within `ATOL`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: Fn(&ParamStore) -> (Tape, Var),
{
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    // Central differences on an O(1) loss carry ~1e-10 of roundoff, which
    // swamps structurally zero gradients such as attention key biases.
    const ATOL: f64 = 1e-9;
    store.set_trainable(ids);
    store.zero_grad();
    let (tape, loss) = f(store);
    tape.backward(loss, store).unwrap();
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = store.grad(id).unwrap().to_vec();
        for i in 0..analytic.len() {
            let x0 = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x0 + H;
            let (t, l) = f(store);
            let up = t.scalar(l);
            store.value_mut(id).data_mut()[i] = x0 - H;
            let (t, l) = f(store);
            let down = t.scalar(l);
            store.value_mut(id).data_mut()[i] = x0;
            let num = (up - down) / (2.0 * H);
            let a = analytic[i];
            if (a - num).abs() < ATOL {
                continue;
            }
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `sum(x * r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let r = rand_tensor(&mut rng(seed), &shape, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(x, r).unwrap();
    tape.sum(p)
}
