//! The four pooling operators on a toy feature map, including the identities
//! that tie the privileged variants to the plain ones.
//!
//! ```text
//! cargo run --release --example privileged_pooling
//! ```

use privpool::pooling::{avg_pool, avg_pr_pool, cov_pool, expand, PoolMode};
use privpool::{Real, Tape, Tensor};

fn main() -> privpool::Result<()> {
    let (h, w, d) = (4, 4, 3);
    // channel 0 lights up in the top-left quadrant only
    let f = Tensor::from_fn(&[1, h, w, d], |i| match i[3] {
        0 if i[1] < 2 && i[2] < 2 => 1.0,
        0 => 0.0,
        c => 0.1 * (c * (i[1] + i[2])) as Real,
    });
    let attention = Tensor::from_fn(&[1, h, w, 2], |i| match i[3] {
        0 if i[1] < 2 && i[2] < 2 => 0.95,
        0 => 0.05,
        _ => 0.5,
    });
    let tape = Tape::new();
    let fv = tape.constant(f);
    let av = tape.constant(attention);
    let fp = expand(fv, av)?;

    println!("feature map [1,{h},{w},{d}], two attention maps: top-left spot and uniform 0.5");
    for mode in PoolMode::ALL {
        println!("  {mode:<7} pooled width {}", mode.pooled_dim(d, 2, d));
    }
    println!("avg     {:?}", avg_pool(fv)?.value().data());
    let pr = avg_pr_pool(fp)?.value();
    for m in 0..2 {
        let block = &pr.data()[m * 2 * d..(m + 1) * 2 * d];
        println!("avg_pr  map {m}: mean {:?} max {:?}", &block[..d], &block[d..]);
    }
    let cov = cov_pool(fv, 5)?.value();
    let cov_pr = cov_pool(fp, 5)?.value();
    println!("cov     diag {:?}", (0..d).map(|i| cov.data()[i * d + i]).collect::<Vec<_>>());
    println!("cov_pr  diag {:?}", (0..d).map(|i| cov_pr.data()[i * d + i]).collect::<Vec<_>>());

    let ones = tape.constant(Tensor::full(&[1, h, w, 1], 1.0));
    let plain = expand(fv, ones)?;
    let same_avg = avg_pr_pool(plain)?.value().data()[..d] == *avg_pool(fv)?.value().data();
    let same_cov = cov_pool(plain, 5)?.value() == cov;
    println!("one all-ones map: avg_pr mean block == avg: {same_avg}; cov_pr == cov: {same_cov}");
    Ok(())
}
