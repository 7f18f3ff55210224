//! Records a small computation on the tape, runs the backward pass and
//! compares every gradient with central finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_gradcheck
//! ```

use privpool::tensor::{grad_check_sampled, GradCheckOptions};
use privpool::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn main() -> privpool::Result<()> {
    // conv -> relu -> max-pool -> mean -> linear -> cross-entropy
    let tape = Tape::new();
    let x = tape.leaf(random(&[2, 6, 6, 3], 1));
    let k = tape.leaf(random(&[3, 3, 3, 4], 2));
    let w = tape.leaf(random(&[4, 5], 3));
    let h = x.conv2d(k, 1, 1)?.relu().maxpool2d(2, 2, 0)?.mean(&[1, 2])?;
    let loss = h.matmul(w)?.cross_entropy(&[1, 4])?;
    tape.backward(loss)?;
    println!("loss {:.6}", loss.value().item());
    for (name, v) in [("input", x), ("kernel", k), ("weight", w)] {
        let g = tape.grad(v).expect("leaf has a gradient");
        let norm = g.data().iter().map(|v| v * v).sum::<Real>().sqrt();
        println!("  d loss / d {name:<6} shape {:?}, norm {norm:.4e}", g.shape());
    }

    let report = grad_check_sampled(
        |_, v| {
            let h = v[0].conv2d(v[1], 1, 1)?.relu().maxpool2d(2, 2, 0)?.mean(&[1, 2])?;
            h.matmul(v[2])?.cross_entropy(&[1, 4])
        },
        |seed| vec![random(&[2, 6, 6, 3], seed), random(&[3, 3, 3, 4], seed + 1), random(&[4, 5], seed + 2)],
        &GradCheckOptions::default(),
    )?;
    println!("finite differences: {report}");
    Ok(())
}
