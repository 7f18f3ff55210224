//! Newton–Schulz square roots of random SPD matrices against the Jacobi
//! eigendecomposition oracle, for a range of iteration counts.
//!
//! ```text
//! cargo run --release --example matrix_sqrt -- [n] [cond] [trials]
//! ```

use privpool::linalg::{eig_sqrt_oracle, ns_sqrt, random_spd, sqrt_residual, DEFAULT_NS_ITERS};
use privpool::{Real, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> privpool::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(16);
    let cond: Real = args.next().map(|a| a.parse().expect("cond")).unwrap_or(1e3);
    let trials: usize = args.next().map(|a| a.parse().expect("trials")).unwrap_or(100);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let matrices: Vec<_> = (0..trials).map(|_| random_spd(n, cond, &mut rng)).collect();
    let oracle_worst = matrices
        .iter()
        .map(|a| Ok(sqrt_residual(&eig_sqrt_oracle(a)?, a)))
        .collect::<privpool::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, Real::max);
    println!("{trials} SPD {n}x{n} matrices, condition number {cond:.0e}");
    println!("eigendecomposition oracle: worst |YY-A|/|A| = {oracle_worst:.2e}");
    println!("{:>6} {:>14} {:>14}", "iters", "worst resid", "mean resid");
    for iters in [1, 2, 3, 4, DEFAULT_NS_ITERS, 6, 8, 10, 12, 15, 20] {
        let mut worst: Real = 0.0;
        let mut sum = 0.0;
        for a in &matrices {
            let tape = Tape::new();
            let y = ns_sqrt(tape.constant(a.clone()), iters)?.value();
            let r = sqrt_residual(&y, a);
            worst = worst.max(r);
            sum += r;
        }
        let mark = if iters == DEFAULT_NS_ITERS { "  (model default)" } else { "" };
        println!("{iters:>6} {worst:>14.3e} {:>14.3e}{mark}", sum / trials as Real);
    }
    Ok(())
}
