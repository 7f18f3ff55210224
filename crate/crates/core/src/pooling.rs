//! First- and second-order pooling over plain and attention-expanded
//! feature maps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::ns_sqrt;
use crate::nn::{Binder, LinearLayer};
use crate::tensor::{Real, Tensor, TensorError, Var};

type Res<T> = std::result::Result<T, TensorError>;

/// Ridge added to every covariance is `RIDGE_SCALE·tr(Σ)/D̃·I`.
pub const RIDGE_SCALE: Real = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    AvgPr,
    Cov,
    CovPr,
}

impl PoolMode {
    pub const ALL: [PoolMode; 4] = [PoolMode::Avg, PoolMode::AvgPr, PoolMode::Cov, PoolMode::CovPr];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Avg => "avg",
            PoolMode::AvgPr => "avg_pr",
            PoolMode::Cov => "cov",
            PoolMode::CovPr => "cov_pr",
        }
    }

    /// Whether the pooled features are gated by an attention stack.
    pub fn uses_attention(self) -> bool {
        matches!(self, PoolMode::AvgPr | PoolMode::CovPr)
    }

    pub fn uses_reduction(self) -> bool {
        matches!(self, PoolMode::Cov | PoolMode::CovPr)
    }

    /// Width `P` of the pooled vector.
    pub fn pooled_dim(self, d: usize, m: usize, d_reduced: usize) -> usize {
        match self {
            PoolMode::Avg => d,
            PoolMode::AvgPr => 2 * m * d,
            PoolMode::Cov | PoolMode::CovPr => d_reduced * d_reduced,
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PoolMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown pool mode '{s}' (valid: avg, avg_pr, cov, cov_pr)"))
    }
}

/// `F′[n,h,w,m,d] = F[n,h,w,d]·a[n,h,w,m]`.
pub fn expand<'t>(f: Var<'t>, a: Var<'t>) -> Res<Var<'t>> {
    let fs = f.shape();
    let as_ = a.shape();
    if fs.len() != 4 || as_.len() != 4 || fs[..3] != as_[..3] {
        return Err(TensorError::mismatch("expand", &fs, &as_));
    }
    let (n, h, w, d, m) = (fs[0], fs[1], fs[2], fs[3], as_[3]);
    let target = [n, h, w, m, d];
    let fb = f.reshape(&[n, h, w, 1, d])?.broadcast_to(&target)?;
    let ab = a.reshape(&[n, h, w, m, 1])?.broadcast_to(&target)?;
    fb.mul(ab)
}

/// Per-channel spatial mean of `[N,H,W,D]`.
pub fn avg_pool<'t>(f: Var<'t>) -> Res<Var<'t>> {
    if f.shape().len() != 4 {
        return Err(TensorError::invalid("avg_pool", format!("expected [N,H,W,D], got {:?}", f.shape())));
    }
    f.mean(&[1, 2])
}

/// Per attention slice, spatial mean then spatial max of `[N,H,W,M,D]`;
/// returns `[N, 2MD]` laid out as `[mean_0, max_0, mean_1, max_1, …]`.
pub fn avg_pr_pool<'t>(fp: Var<'t>) -> Res<Var<'t>> {
    let s = fp.shape();
    if s.len() != 5 {
        return Err(TensorError::invalid("avg_pr_pool", format!("expected [N,H,W,M,D], got {s:?}")));
    }
    let (n, m, d) = (s[0], s[3], s[4]);
    let mean = fp.mean(&[1, 2])?;
    let max = fp.max(&[1, 2])?;
    fp.tape().concat(&[mean, max], 2)?.reshape(&[n, 2 * m * d])
}

/// Learned 1×1 convolution over the last axis, shared by every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReduction {
    pub layer: LinearLayer,
}

impl ChannelReduction {
    pub fn init(d: usize, d_reduced: usize, rng: &mut impl Rng) -> Res<Self> {
        if d_reduced == 0 || d_reduced > d {
            return Err(TensorError::invalid(
                "channel reduction",
                format!("reduced width {d_reduced} must be in 1..={d}"),
            ));
        }
        Ok(ChannelReduction {
            layer: LinearLayer::init(d, d_reduced, rng),
        })
    }

    pub fn identity(d: usize) -> Self {
        ChannelReduction {
            layer: LinearLayer {
                weight: Tensor::eye(d),
                bias: Tensor::zeros(&[d]),
            },
        }
    }

    pub fn d_in(&self) -> usize {
        self.layer.din()
    }

    pub fn d_out(&self) -> usize {
        self.layer.dout()
    }

    /// Maps `[…, D]` to `[…, D̃]`.
    pub fn forward<'t>(&self, binder: &Binder<'t>, name: &str, x: Var<'t>) -> Res<Var<'t>> {
        let mut shape = x.shape();
        let d = *shape.last().unwrap_or(&0);
        if d != self.d_in() {
            return Err(TensorError::mismatch("channel reduction", &shape, &[self.d_in()]));
        }
        let rows = x.value().numel() / d;
        let y = self.layer.forward(binder, name, x.reshape(&[rows, d])?)?;
        *shape.last_mut().expect("non-empty") = self.d_out();
        y.reshape(&shape)
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.layer.params(name, out);
    }

    pub fn params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.layer.params_mut(name, out);
    }
}

/// Sample covariance `(1/S)·(X−X̄)ᵀ(X−X̄)` of `[N,S,D]`; returns `[N,D,D]`.
pub fn covariance<'t>(x: Var<'t>) -> Res<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(TensorError::invalid("covariance", format!("expected [N,S,D], got {s:?}")));
    }
    if s[1] < 2 {
        return Err(TensorError::invalid("covariance", format!("need at least 2 samples, got {}", s[1])));
    }
    let (n, samples, d) = (s[0], s[1], s[2]);
    let mean = x.mean(&[1])?.reshape(&[n, 1, d])?.broadcast_to(&s)?;
    let centered = x.sub(mean)?;
    Ok(centered.transpose()?.matmul(centered)?.scale(1.0 / samples as Real))
}

/// Adds `RIDGE_SCALE·tr(Σ)/D·I` to each `[D,D]` item of `[N,D,D]`.
pub fn add_ridge<'t>(sigma: Var<'t>) -> Res<Var<'t>> {
    let s = sigma.shape();
    let (n, d) = (s[0], s[1]);
    let tape = sigma.tape();
    let eye = tape.constant(Tensor::eye(d)).broadcast_to(&s)?;
    let trace = sigma.mul(eye)?.sum(&[1, 2])?;
    let ridge = trace
        .scale(RIDGE_SCALE / d as Real)
        .reshape(&[n, 1, 1])?
        .broadcast_to(&s)?
        .mul(eye)?;
    sigma.add(ridge)
}

/// Square-rooted covariance over all positions of `[N, …, D̃]`, flattened
/// row-major to `[N, D̃²]`.
pub fn cov_pool<'t>(x: Var<'t>, ns_iters: usize) -> Res<Var<'t>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(TensorError::invalid("cov_pool", format!("expected [N,…,D], got {s:?}")));
    }
    let (n, d) = (s[0], s[s.len() - 1]);
    let samples: usize = s[1..s.len() - 1].iter().product();
    let sigma = covariance(x.reshape(&[n, samples, d])?)?;
    ns_sqrt(add_ridge(sigma)?, ns_iters)?.reshape(&[n, d * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eig_sqrt_oracle, symmetric_eigen};
    use crate::tensor::{grad_check_sampled, GradCheckOptions, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn unit(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn pool_mode_parsing() {
        for m in PoolMode::ALL {
            assert_eq!(m.as_str().parse::<PoolMode>().unwrap(), m);
        }
        let err = "max".parse::<PoolMode>().unwrap_err();
        assert!(err.contains("avg_pr") && err.contains("cov_pr"));
        assert_eq!(serde_json::to_string(&PoolMode::CovPr).unwrap(), "\"cov_pr\"");
    }

    #[test]
    fn expand_matches_loop() {
        let tape = Tape::new();
        let f = random(&[2, 3, 4, 5], 1);
        let a = unit(&[2, 3, 4, 2], 2);
        let out = expand(tape.constant(f.clone()), tape.constant(a.clone())).unwrap().value();
        assert_eq!(out.shape(), &[2, 3, 4, 2, 5]);
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..4 {
                    for m in 0..2 {
                        for d in 0..5 {
                            let want = f.get(&[n, h, w, d]) * a.get(&[n, h, w, m]);
                            assert_eq!(out.get(&[n, h, w, m, d]), want);
                        }
                    }
                }
            }
        }
        let bad = tape.constant(Tensor::ones(&[2, 3, 3, 2]));
        assert!(expand(tape.constant(f), bad).is_err());
    }

    #[test]
    fn expand_trivial_masks() {
        let tape = Tape::new();
        let f = random(&[1, 2, 2, 3], 3);
        let mut a = Tensor::zeros(&[1, 2, 2, 2]);
        for h in 0..2 {
            for w in 0..2 {
                a.set(&[0, h, w, 0], 1.0);
            }
        }
        let out = expand(tape.constant(f.clone()), tape.constant(a)).unwrap().value();
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..3 {
                    assert_eq!(out.get(&[0, h, w, 0, d]), f.get(&[0, h, w, d]));
                    assert_eq!(out.get(&[0, h, w, 1, d]), 0.0);
                }
            }
        }
    }

    #[test]
    fn avg_pool_values() {
        let tape = Tape::new();
        let c = avg_pool(tape.constant(Tensor::full(&[1, 3, 3, 2], 1.5))).unwrap().value();
        assert!(c.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        let mut one = Tensor::zeros(&[1, 4, 4, 2]);
        one.set(&[0, 1, 2, 1], 8.0);
        let p = avg_pool(tape.constant(one)).unwrap().value();
        assert_eq!(p.data(), &[0.0, 0.5]);

        let f = random(&[2, 3, 5, 4], 4);
        let p = avg_pool(tape.constant(f.clone())).unwrap().value();
        for n in 0..2 {
            for d in 0..4 {
                let mut s = 0.0;
                for h in 0..3 {
                    for w in 0..5 {
                        s += f.get(&[n, h, w, d]);
                    }
                }
                assert!((p.get(&[n, d]) - s / 15.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn avg_pr_pool_matches_loop() {
        let tape = Tape::new();
        let (n, h, w, m, d) = (2, 3, 4, 3, 5);
        let f = random(&[n, h, w, d], 5);
        let a = unit(&[n, h, w, m], 6);
        let fp = expand(tape.constant(f.clone()), tape.constant(a.clone())).unwrap();
        let p = avg_pr_pool(fp).unwrap().value();
        assert_eq!(p.shape(), &[n, 2 * m * d]);
        for nn in 0..n {
            for mm in 0..m {
                for dd in 0..d {
                    let mut sum = 0.0;
                    let mut max = Real::NEG_INFINITY;
                    for y in 0..h {
                        for x in 0..w {
                            let v = f.get(&[nn, y, x, dd]) * a.get(&[nn, y, x, mm]);
                            sum += v;
                            max = max.max(v);
                        }
                    }
                    let base = mm * 2 * d;
                    assert!((p.get(&[nn, base + dd]) - sum / (h * w) as Real).abs() < 1e-14);
                    assert_eq!(p.get(&[nn, base + d + dd]), max);
                }
            }
        }
    }

    #[test]
    fn avg_pr_constant_feature_scales_by_mean_attention() {
        let tape = Tape::new();
        let a = unit(&[1, 4, 4, 2], 7);
        let fp = expand(tape.constant(Tensor::full(&[1, 4, 4, 3], 2.0)), tape.constant(a.clone())).unwrap();
        let p = avg_pr_pool(fp).unwrap().value();
        for m in 0..2 {
            let abar: Real = (0..16).map(|i| a.get(&[0, i / 4, i % 4, m])).sum::<Real>() / 16.0;
            for d in 0..3 {
                assert!((p.get(&[0, m * 6 + d]) - 2.0 * abar).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_ones_map_reduces_exactly() {
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let f = tape.constant(random(&[2, 4, 4, 6], 8));
        let ones = tape.constant(Tensor::ones(&[2, 4, 4, 1]));
        let fp = expand(f, ones).unwrap();

        let avg = avg_pool(f).unwrap().value();
        let pr = avg_pr_pool(fp).unwrap().value();
        for n in 0..2 {
            for d in 0..6 {
                assert_eq!(pr.get(&[n, d]), avg.get(&[n, d]));
            }
        }

        let red = ChannelReduction::init(6, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let cov = cov_pool(red.forward(&binder, "r", f).unwrap(), 5).unwrap().value();
        let cov_pr = cov_pool(red.forward(&binder, "r", fp).unwrap(), 5).unwrap().value();
        assert_eq!(cov.data(), cov_pr.data());
    }

    #[test]
    fn permuting_maps_permutes_avg_pr_and_fixes_cov_pr() {
        let tape = Tape::new();
        let f = tape.constant(random(&[1, 3, 3, 4], 10));
        let a = unit(&[1, 3, 3, 2], 11);
        let swapped = Tensor::from_fn(&[1, 3, 3, 2], |i| a.get(&[0, i[1], i[2], 1 - i[3]]));
        let fp = expand(f, tape.constant(a)).unwrap();
        let fq = expand(f, tape.constant(swapped)).unwrap();
        let p = avg_pr_pool(fp).unwrap().value();
        let q = avg_pr_pool(fq).unwrap().value();
        assert_eq!(&p.data()[..8], &q.data()[8..]);
        assert_eq!(&p.data()[8..], &q.data()[..8]);
        let cp = cov_pool(fp, 5).unwrap().value();
        let cq = cov_pool(fq, 5).unwrap().value();
        assert!(cp.max_abs_diff(&cq) < 1e-12);
    }

    #[test]
    fn covariance_hand_case() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let sigma = covariance(tape.constant(x.clone())).unwrap().value();
        assert_eq!(sigma.data(), &[1.0, 0.0, 0.0, 0.0]);
        let p = cov_pool(tape.constant(x), 20).unwrap().value();
        let oracle = eig_sqrt_oracle(&Tensor::new(vec![2, 2], vec![1.0 + 5e-6, 0.0, 0.0, 5e-6]).unwrap()).unwrap();
        assert!((p.get(&[0, 0]) - 1.0).abs() < 1e-5);
        assert!(p.get(&[0, 3]).abs() < 1e-2);
        assert!((p.get(&[0, 0]) - oracle.get(&[0, 0])).abs() < 1e-6);
        assert!(p.get(&[0, 1]).abs() < 1e-12 && p.get(&[0, 2]).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_pool_to_zero() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[1, 3, 3, 2], |i| [0.5, -2.0][i[3]]);
        let p = cov_pool(tape.constant(x), 5).unwrap().value();
        assert!(p.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn covariance_needs_two_samples() {
        let tape = Tape::new();
        assert!(cov_pool(tape.constant(Tensor::ones(&[1, 1, 1, 3])), 5).is_err());
    }

    #[test]
    fn ridged_covariance_is_psd() {
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 4, 5], 12));
        let sigma = add_ridge(covariance(x).unwrap()).unwrap().value();
        for n in 0..3 {
            let item = Tensor::new(vec![5, 5], sigma.data()[n * 25..(n + 1) * 25].to_vec()).unwrap();
            let (vals, _) = symmetric_eigen(&item).unwrap();
            // four samples in five dimensions leave a null direction filled by the ridge
            assert!(vals.iter().all(|&v| v > 0.0), "{vals:?}");
        }
    }

    #[test]
    fn reduction_identity_and_linearity() {
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let x = random(&[2, 3, 3, 4], 13);
        let id = ChannelReduction::identity(4);
        let y = id.forward(&binder, "r", tape.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x);

        let mut red = ChannelReduction::init(4, 2, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        red.layer.bias = Tensor::zeros(&[2]);
        let y1 = red.forward(&binder, "r", tape.constant(x.map(|v| 2.5 * v))).unwrap().value();
        let y0 = red.forward(&binder, "r", tape.constant(x)).unwrap().value();
        assert!(y1.max_abs_diff(&y0.map(|v| 2.5 * v)) < 1e-14);
        assert!(ChannelReduction::init(4, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn pooled_dims() {
        assert_eq!(PoolMode::Avg.pooled_dim(32, 4, 16), 32);
        assert_eq!(PoolMode::AvgPr.pooled_dim(32, 4, 16), 256);
        assert_eq!(PoolMode::Cov.pooled_dim(32, 4, 16), 256);
        assert_eq!(PoolMode::CovPr.pooled_dim(32, 4, 16), 256);
    }

    #[test]
    fn first_order_pools_pass_gradient_check() {
        let report = grad_check_sampled(
            |tape, v| {
                let fp = expand(v[0], v[1].sigmoid())?;
                tape.concat(&[avg_pr_pool(fp)?, avg_pool(v[0])?], 1)
            },
            |seed| vec![random(&[2, 3, 3, 3], seed), random(&[2, 3, 3, 2], seed + 100)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn reduction_and_covariance_pass_gradient_check() {
        let red = ChannelReduction::init(4, 3, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
        let report = grad_check_sampled(
            |tape, v| {
                let binder = Binder::new(tape, false);
                let fp = expand(v[0], v[1].sigmoid())?;
                let r = red.forward(&binder, "r", fp)?;
                let sigma = add_ridge(covariance(r.reshape(&[1, 18, 3])?)?)?;
                sigma.reshape(&[9])
            },
            |seed| vec![random(&[1, 3, 3, 4], seed), random(&[1, 3, 3, 2], seed + 7)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn covariance_pool_with_sqrt_passes_gradient_check() {
        let report = grad_check_sampled(
            |_, v| cov_pool(expand(v[0], v[1].sigmoid())?, 5),
            |seed| vec![random(&[1, 3, 3, 3], seed), random(&[1, 3, 3, 2], seed + 3)],
            &GradCheckOptions::default().with_tolerance(1e-3),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
