//! Property suites run by `privpool check`: finite-difference gradients of
//! every differentiable operation, the Newton–Schulz square root against an
//! eigendecomposition, and the exact pooling reduction identities.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bce_loss, multiscale_loss_batch, total_loss, variance_regularizer_batch, KeypointTargets, LossConfig,
    DEFAULT_SCALES,
};
use crate::linalg::{eig_sqrt_oracle, ns_sqrt, random_spd, sqrt_residual, symmetric_eigen, symmetry_defect, DEFAULT_NS_ITERS};
use crate::model::{Model, ModelConfig};
use crate::nn::Binder;
use crate::pooling::{add_ridge, avg_pool, avg_pr_pool, cov_pool, covariance, expand, PoolMode};
use crate::tensor::{grad_check_sampled, GradCheckOptions, Real, Tape, Tensor, TensorError, Var};
use crate::Result;

/// Tolerance for gradients of first-order operations.
pub const GRAD_TOL: Real = 1e-4;
/// Tolerance for gradients that pass through the Newton–Schulz iteration.
pub const SQRT_GRAD_TOL: Real = 1e-3;
/// Tolerance of the exact reduction identities.
pub const IDENTITY_TOL: Real = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Sqrt,
    PoolIdentities,
    All,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Sqrt, Suite::PoolIdentities, Suite::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Sqrt => "sqrt",
            Suite::PoolIdentities => "pool-identities",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (valid: grad, sqrt, pool-identities, all)"))
    }
}

/// Worst error of one property against its pinned tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub worst: Real,
    pub tolerance: Real,
}

impl CheckOutcome {
    fn new(suite: &'static str, name: impl Into<String>, worst: Real, tolerance: Real) -> Self {
        CheckOutcome { suite, name: name.into(), worst, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: worst {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.tolerance
        )
    }
}

/// Runs one suite, or every suite for [`Suite::All`].
pub fn run_suite(suite: Suite) -> Result<Vec<CheckOutcome>> {
    match suite {
        Suite::Grad => grad_suite(),
        Suite::Sqrt => sqrt_suite(&SqrtCheckConfig::default()),
        Suite::PoolIdentities => pool_identity_suite(),
        Suite::All => {
            let mut out = grad_suite()?;
            out.extend(sqrt_suite(&SqrtCheckConfig::default())?);
            out.extend(pool_identity_suite()?);
            Ok(out)
        }
    }
}

fn uniform(shape: &[usize], lo: Real, hi: Real, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed)
}

fn binary(shape: &[usize], p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

fn tensor_err(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::invalid("check", other.to_string()),
    }
}

/// Finite-difference checks; every case is a `(name, tolerance, report)` row.
pub fn grad_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut push = |name: &str, tol: Real, f: &dyn Fn(&GradCheckOptions) -> std::result::Result<Real, TensorError>| -> Result<()> {
        let opts = GradCheckOptions::default().with_tolerance(tol);
        out.push(CheckOutcome::new("grad", name, f(&opts)?, tol));
        Ok(())
    };

    push("conv2d stride 1 pad 1", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| v[0].conv2d(v[1], 1, 1)?.bias_add(v[2]),
            |s| vec![normal(&[2, 5, 5, 3], s), normal(&[3, 3, 3, 4], s + 1), normal(&[4], s + 2)],
            o,
        )?
        .max_rel_error())
    })?;
    push("conv2d stride 2 pad 0", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| v[0].conv2d(v[1], 2, 0),
            |s| vec![normal(&[1, 7, 7, 2], s), normal(&[3, 3, 2, 3], s + 1)],
            o,
        )?
        .max_rel_error())
    })?;
    push("relu + maxpool2d", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| v[0].relu().maxpool2d(2, 2, 0),
            |s| vec![normal(&[2, 4, 6, 3], s)],
            o,
        )?
        .max_rel_error())
    })?;
    push("same max-pool 3x3", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| v[0].maxpool2d(3, 1, 1), |s| vec![normal(&[1, 5, 5, 2], s)], o)?.max_rel_error())
    })?;
    push("linear", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| v[0].matmul(v[1])?.bias_add(v[2]),
            |s| vec![normal(&[3, 5], s), normal(&[5, 4], s + 1), normal(&[4], s + 2)],
            o,
        )?
        .max_rel_error())
    })?;
    push("softmax cross-entropy", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| v[0].cross_entropy(&[2, 0, 1]), |s| vec![normal(&[3, 4], s)], o)?.max_rel_error())
    })?;
    let target = binary(&[4, 5], 0.3, 11);
    push("sigmoid + bce", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| bce_loss(v[0].sigmoid(), &target), |s| vec![normal(&[4, 5], s)], o)?.max_rel_error())
    })?;
    let maps = binary(&[2, 6, 6, 2], 0.15, 12);
    push("multi-scale attention loss", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| multiscale_loss_batch(v[0].sigmoid(), &maps, &DEFAULT_SCALES),
            |s| vec![normal(&[2, 6, 6, 2], s)],
            o,
        )?
        .max_rel_error())
    })?;
    push("variance regularizer", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| variance_regularizer_batch(v[0].sigmoid()), |s| vec![normal(&[2, 4, 4, 3], s)], o)?
            .max_rel_error())
    })?;
    push("expand", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| expand(v[0], v[1]), |s| vec![normal(&[2, 3, 3, 4], s), normal(&[2, 3, 3, 2], s + 1)], o)?
            .max_rel_error())
    })?;
    push("avg and avg_pr pooling", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |tape, v| tape.concat(&[avg_pr_pool(expand(v[0], v[1].sigmoid())?)?, avg_pool(v[0])?], 1),
            |s| vec![normal(&[2, 3, 3, 3], s), normal(&[2, 3, 3, 2], s + 1)],
            o,
        )?
        .max_rel_error())
    })?;
    push("covariance + ridge", GRAD_TOL, &|o| {
        Ok(grad_check_sampled(|_, v| add_ridge(covariance(v[0])?), |s| vec![normal(&[2, 7, 4], s)], o)?.max_rel_error())
    })?;
    push("ns_sqrt", SQRT_GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |tape, v| {
                let eye = tape.constant(Tensor::eye(4)).broadcast_to(&[2, 4, 4])?;
                let spd = v[0].matmul(v[0].permute(&[0, 2, 1])?)?.add(eye)?;
                ns_sqrt(spd, DEFAULT_NS_ITERS)
            },
            |s| vec![normal(&[2, 4, 4], s)],
            o,
        )?
        .max_rel_error())
    })?;
    push("cov_pr pooling", SQRT_GRAD_TOL, &|o| {
        Ok(grad_check_sampled(
            |_, v| cov_pool(expand(v[0], v[1].sigmoid())?, DEFAULT_NS_ITERS),
            |s| vec![normal(&[1, 3, 3, 3], s), normal(&[1, 3, 3, 2], s + 1)],
            o,
        )?
        .max_rel_error())
    })?;
    for pool in PoolMode::ALL {
        let tol = if pool.uses_reduction() { SQRT_GRAD_TOL } else { GRAD_TOL };
        push(&format!("full model loss ({pool})"), tol, &|o| full_model_check(pool, o))?;
    }
    Ok(out)
}

fn check_model_config(pool: PoolMode) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        channels: vec![3, 4],
        pool,
        k: 2,
        q: 1,
        d_reduced: 3,
        num_classes: 3,
        ns_iters: DEFAULT_NS_ITERS,
    }
}

/// Gradient of the total training loss with respect to the input image,
/// which flows backwards through every layer of the model.
fn full_model_check(pool: PoolMode, opts: &GradCheckOptions) -> std::result::Result<Real, TensorError> {
    let cfg = check_model_config(pool);
    let model = Model::init(cfg.clone(), 3).map_err(tensor_err)?;
    let fs = cfg.feature_size();
    let mut maps = binary(&[2, fs, fs, cfg.k], 0.3, 21);
    let visible = vec![vec![true, false], vec![true, true]];
    for y in 0..fs {
        for x in 0..fs {
            maps.set(&[0, y, x, 1], 0.0);
        }
    }
    let targets = KeypointTargets::new(maps, visible, vec![true, true])?;
    let loss_cfg = LossConfig::default();
    let opts = GradCheckOptions {
        min_kink_margin: 1e-4,
        max_resamples: 50,
        ..*opts
    };
    let report = grad_check_sampled(
        |tape, v| {
            let binder = Binder::new(tape, false);
            let out = model.forward(&binder, v[0]).map_err(tensor_err)?;
            let terms = total_loss(out.logits, &[0, 2], out.attention.as_ref(), Some(&targets), &loss_cfg)?;
            Ok(terms.total)
        },
        |s| vec![uniform(&[2, 8, 8, 3], 0.0, 1.0, s)],
        &opts,
    )?;
    Ok(report.max_rel_error())
}

/// Newton–Schulz accuracy over random SPD matrices.
#[derive(Debug, Clone, Copy)]
pub struct SqrtCheckConfig {
    pub trials: usize,
    pub n: usize,
    pub cond: Real,
    pub iters: usize,
    pub residual_tol: Real,
    pub symmetry_tol: Real,
    pub seed: u64,
}

impl Default for SqrtCheckConfig {
    fn default() -> Self {
        SqrtCheckConfig {
            trials: 100,
            n: 16,
            cond: 1e3,
            iters: DEFAULT_NS_ITERS,
            residual_tol: 1e-3,
            symmetry_tol: 1e-6,
            seed: 0,
        }
    }
}

/// Worst `‖YY−A‖_F/‖A‖_F` and symmetry defect of the Newton–Schulz root, and
/// the worst residual of the eigendecomposition oracle on the same matrices.
pub fn sqrt_suite(cfg: &SqrtCheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut residual, mut symmetry, mut oracle) = (0.0 as Real, 0.0 as Real, 0.0 as Real);
    for _ in 0..cfg.trials {
        let a = random_spd(cfg.n, cfg.cond, &mut rng);
        let tape = Tape::new();
        let y = (*ns_sqrt(tape.constant(a.clone()), cfg.iters)?.value()).clone();
        residual = residual.max(sqrt_residual(&y, &a));
        symmetry = symmetry.max(symmetry_defect(y.data(), cfg.n));
        oracle = oracle.max(sqrt_residual(&eig_sqrt_oracle(&a)?, &a));
    }
    let label = format!("{} SPD {}x{} cond {:.0e}, {} iters", cfg.trials, cfg.n, cfg.n, cfg.cond, cfg.iters);
    Ok(vec![
        CheckOutcome::new("sqrt", format!("residual ({label})"), residual, cfg.residual_tol),
        CheckOutcome::new("sqrt", format!("symmetry defect ({label})"), symmetry, cfg.symmetry_tol),
        CheckOutcome::new("sqrt", "eigendecomposition oracle residual", oracle, 1e-9),
    ])
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Real {
    if a.shape() != b.shape() {
        return Real::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

/// Reduction identities with a single all-ones map, permutation behaviour,
/// and positive semi-definiteness of the pooled covariance.
pub fn pool_identity_suite() -> Result<Vec<CheckOutcome>> {
    let (n, h, w, d) = (3, 4, 5, 6);
    let f = uniform(&[n, h, w, d], 0.0, 2.0, 31);
    let ones = Tensor::full(&[n, h, w, 1], 1.0);
    let tape = Tape::new();
    let fv = tape.constant(f.clone());
    let value = |v: Var<'_>| (*v.value()).clone();

    let avg = value(avg_pool(fv)?);
    let pr = value(avg_pr_pool(expand(fv, tape.constant(ones.clone()))?)?);
    let mean_block = Tensor::from_fn(&[n, d], |i| pr.get(&[i[0], i[1]]));
    let cov = value(cov_pool(fv, DEFAULT_NS_ITERS)?);
    let cov_pr = value(cov_pool(expand(fv, tape.constant(ones))?, DEFAULT_NS_ITERS)?);

    let m = 3;
    let a = uniform(&[n, h, w, m], 0.0, 1.0, 32);
    let perm = [2, 0, 1];
    let a_perm = Tensor::from_fn(&[n, h, w, m], |i| a.get(&[i[0], i[1], i[2], perm[i[3]]]));
    let pr_a = value(avg_pr_pool(expand(fv, tape.constant(a.clone()))?)?);
    let pr_p = value(avg_pr_pool(expand(fv, tape.constant(a_perm.clone()))?)?);
    let blocks_moved = Tensor::from_fn(&[n, 2 * m * d], |i| {
        let (slot, rest) = (i[1] / (2 * d), i[1] % (2 * d));
        pr_a.get(&[i[0], perm[slot] * 2 * d + rest])
    });
    let cv_a = value(cov_pool(expand(fv, tape.constant(a.clone()))?, DEFAULT_NS_ITERS)?);
    let cv_p = value(cov_pool(expand(fv, tape.constant(a_perm))?, DEFAULT_NS_ITERS)?);

    let sigma = value(add_ridge(covariance(expand(fv, tape.constant(a))?.reshape(&[n, h * w * m, d])?)?)?);
    let mut min_eig: Real = Real::INFINITY;
    for b in 0..n {
        let block = Tensor::new(vec![d, d], sigma.data()[b * d * d..(b + 1) * d * d].to_vec())?;
        let (eig, _) = symmetric_eigen(&block)?;
        min_eig = eig.into_iter().fold(min_eig, Real::min);
    }

    let scale = cv_a.data().iter().fold(1.0 as Real, |m, v| m.max(v.abs()));
    Ok(vec![
        CheckOutcome::new("pool-identities", "avg_pr mean block == avg with one all-ones map", max_abs_diff(&mean_block, &avg), IDENTITY_TOL),
        CheckOutcome::new("pool-identities", "cov_pr == cov with one all-ones map", max_abs_diff(&cov_pr, &cov), IDENTITY_TOL),
        CheckOutcome::new("pool-identities", "avg_pr blocks follow map permutation", max_abs_diff(&pr_p, &blocks_moved), IDENTITY_TOL),
        CheckOutcome::new(
            "pool-identities",
            "cov_pr invariant to map permutation (relative)",
            max_abs_diff(&cv_a, &cv_p) / scale,
            1e-10,
        ),
        CheckOutcome::new("pool-identities", "ridged covariance is PSD (negated min eigenvalue)", (-min_eig).max(0.0), IDENTITY_TOL),
    ])
}
