//! Attention head and the losses that supervise it.
//!
//! The head maps a feature map `F: [N,H,W,D]` to `M = K + Q` sigmoid maps.
//! The first `K` maps are trained against binary keypoint maps with a
//! multi-scale BCE; the remaining `Q` complementary maps only receive the
//! classification gradient plus a variance bonus that pushes their mean
//! activation away from 0 and 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Binder, Conv2dLayer, ConvSpec};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor, TensorError, Var};

type Res<T> = std::result::Result<T, TensorError>;

pub const DEFAULT_SCALES: [usize; 3] = [1, 3, 7];
pub const LOG_CLAMP: Real = 1e-7;

/// `maps: [N,H,W,M]`, supervised maps first.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStack<'t> {
    pub maps: Var<'t>,
    pub k: usize,
    pub q: usize,
}

impl<'t> AttentionStack<'t> {
    pub fn m(&self) -> usize {
        self.k + self.q
    }

    pub fn supervised(&self) -> Res<Var<'t>> {
        self.maps.narrow(3, 0, self.k)
    }

    pub fn complementary(&self) -> Res<Var<'t>> {
        self.maps.narrow(3, self.k, self.q)
    }
}

/// Binary keypoint maps at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTargets {
    /// `[N,H,W,K]`, values in {0,1}.
    pub maps: Tensor,
    /// `[N][K]`.
    pub visible: Vec<Vec<bool>>,
    /// Whether sample `n` carries keypoint annotations at all.
    pub annotated: Vec<bool>,
}

impl KeypointTargets {
    pub fn new(maps: Tensor, visible: Vec<Vec<bool>>, annotated: Vec<bool>) -> Res<Self> {
        let s = maps.shape().to_vec();
        if s.len() != 4 || visible.len() != s[0] || annotated.len() != s[0] {
            return Err(TensorError::invalid(
                "keypoint targets",
                format!("maps {s:?} with {} visibility rows and {} flags", visible.len(), annotated.len()),
            ));
        }
        let (h, w, k) = (s[1], s[2], s[3]);
        for (n, vis) in visible.iter().enumerate() {
            if vis.len() != k {
                return Err(TensorError::invalid("keypoint targets", format!("sample {n}: {} flags for {k} keypoints", vis.len())));
            }
            for (kk, &v) in vis.iter().enumerate() {
                let any = (0..h).any(|y| (0..w).any(|x| maps.get(&[n, y, x, kk]) != 0.0));
                if !v && any {
                    return Err(TensorError::invalid(
                        "keypoint targets",
                        format!("sample {n} keypoint {kk} is invisible but its map is not empty"),
                    ));
                }
            }
        }
        if maps.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TensorError::invalid("keypoint targets", "maps must be binary"));
        }
        Ok(KeypointTargets {
            maps,
            visible,
            annotated,
        })
    }

    pub fn k(&self) -> usize {
        self.maps.shape()[3]
    }

    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }
}

/// Two 3×3 same-padded convolutions `D → max(D/4,1) → M` with ReLU between
/// and a sigmoid on top.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub hidden: Conv2dLayer,
    pub out: Conv2dLayer,
    pub k: usize,
    pub q: usize,
}

impl AttentionHead {
    pub fn init(d: usize, k: usize, q: usize, rng: &mut impl Rng) -> Res<Self> {
        if k == 0 || q == 0 {
            return Err(TensorError::invalid("attention head", "need K ≥ 1 and Q ≥ 1"));
        }
        let hidden = (d / 4).max(1);
        Ok(AttentionHead {
            hidden: Conv2dLayer::init(ConvSpec::same(3, d, hidden), rng)?,
            out: Conv2dLayer::init(ConvSpec::same(3, hidden, k + q), rng)?,
            k,
            q,
        })
    }

    pub fn forward<'t>(&self, binder: &Binder<'t>, name: &str, f: Var<'t>) -> Res<AttentionStack<'t>> {
        let h = self.hidden.forward(binder, &format!("{name}.hidden"), f)?.relu();
        let maps = self.out.forward(binder, &format!("{name}.out"), h)?.sigmoid();
        Ok(AttentionStack {
            maps,
            k: self.k,
            q: self.q,
        })
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.params(&format!("{name}.hidden"), out);
        self.out.params(&format!("{name}.out"), out);
    }

    pub fn params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.hidden.params_mut(&format!("{name}.hidden"), out);
        self.out.params_mut(&format!("{name}.out"), out);
    }
}

/// Mean BCE of one `[H,W]` attention map against a binary target.
pub fn bce_loss<'t>(a: Var<'t>, target: &Tensor) -> Res<Var<'t>> {
    if a.shape() != target.shape() {
        return Err(TensorError::mismatch("bce_loss", &a.shape(), target.shape()));
    }
    Ok(a.bce(target, LOG_CLAMP)?.mean_all())
}

fn check_scales(scales: &[usize]) -> Res<()> {
    if scales.is_empty() {
        return Err(TensorError::invalid("multiscale_attention_loss", "no scales configured"));
    }
    if let Some(bad) = scales.iter().find(|&&k| k % 2 == 0) {
        return Err(TensorError::invalid(
            "multiscale_attention_loss",
            format!("max-pool kernel sizes must be odd, got {bad}"),
        ));
    }
    Ok(())
}

/// Stride-1 same-padded max pooling of a plain `[N,H,W,C]` tensor.
pub fn maxpool_same(x: &Tensor, kernel: usize) -> Tensor {
    let s = x.shape();
    let geom = ConvGeom {
        n: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        kh: kernel,
        kw: kernel,
        stride: 1,
        pad: kernel / 2,
    };
    let (out, _) = kernels::maxpool2d(x.data(), &geom);
    Tensor::new(s.to_vec(), out).expect("same padding keeps shape")
}

/// Multi-scale BCE for batched maps `a: [N,H,W,K]`; returns `[N,K]`.
pub fn multiscale_loss_batch<'t>(a: Var<'t>, targets: &Tensor, scales: &[usize]) -> Res<Var<'t>> {
    check_scales(scales)?;
    if a.shape() != targets.shape() || targets.ndim() != 4 {
        return Err(TensorError::mismatch("multiscale_attention_loss", &a.shape(), targets.shape()));
    }
    let mut total: Option<Var<'t>> = None;
    for &k in scales {
        let (pa, pt) = if k == 1 {
            (a, targets.clone())
        } else {
            (a.maxpool2d(k, 1, k / 2)?, maxpool_same(targets, k))
        };
        let term = pa.bce(&pt, LOG_CLAMP)?.mean(&[1, 2])?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("scales is non-empty"))
}

/// Sum over scales of the BCE between max-pooled map and max-pooled target,
/// for a single `[H,W]` map.
pub fn multiscale_attention_loss<'t>(a: Var<'t>, target: &Tensor, scales: &[usize]) -> Res<Var<'t>> {
    let s = a.shape();
    if s.len() != 2 || target.shape() != s.as_slice() {
        return Err(TensorError::mismatch("multiscale_attention_loss", &s, target.shape()));
    }
    let a4 = a.reshape(&[1, s[0], s[1], 1])?;
    let t4 = target.clone().reshape(&[1, s[0], s[1], 1])?;
    multiscale_loss_batch(a4, &t4, scales)?.reshape(&[])
}

/// `ā·(1−ā)` with `ā` the mean of the `[H,W]` map.
pub fn variance_regularizer<'t>(a: Var<'t>) -> Var<'t> {
    let mean = a.mean_all();
    let one_minus = mean.scale(-1.0).add_scalar(1.0);
    mean.mul(one_minus).expect("scalars share a shape")
}

/// `ā·(1−ā)` per sample and map for batched `[N,H,W,Q]`; returns `[N,Q]`.
pub fn variance_regularizer_batch<'t>(a: Var<'t>) -> Res<Var<'t>> {
    let mean = a.mean(&[1, 2])?;
    mean.mul(mean.scale(-1.0).add_scalar(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub scales: Vec<usize>,
    /// When false, no map is keypoint-supervised and the variance term
    /// covers all `M` maps.
    pub keypoint_supervision: bool,
    /// Factor on the keypoint term; 1 gives the unweighted objective.
    pub attention_weight: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scales: DEFAULT_SCALES.to_vec(),
            keypoint_supervision: true,
            attention_weight: 1.0,
        }
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub ce: Var<'t>,
    pub attn: Var<'t>,
    pub reg: Var<'t>,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.value().item(),
            ce: self.ce.value().item(),
            attn: self.attn.value().item(),
            reg: self.reg.value().item(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: Real,
    pub ce: Real,
    pub attn: Real,
    pub reg: Real,
}

/// `CE + λ·(1/K)·Σ_k l_attention − (1/Q)·Σ_q l_reg`, batch-averaged, with
/// `λ = cfg.attention_weight`.
///
/// The attention term is averaged over the annotated samples only; a batch
/// without annotations contributes zero. Without an attention stack only the
/// cross-entropy remains.
pub fn total_loss<'t>(
    logits: Var<'t>,
    labels: &[usize],
    stack: Option<&AttentionStack<'t>>,
    targets: Option<&KeypointTargets>,
    cfg: &LossConfig,
) -> Res<LossTerms<'t>> {
    let tape = logits.tape();
    let ce = logits.cross_entropy(labels)?;
    let zero = || tape.constant(Tensor::scalar(0.0));
    let Some(stack) = stack else {
        return Ok(LossTerms {
            total: ce,
            ce,
            attn: zero(),
            reg: zero(),
        });
    };
    let n = labels.len();

    let (attn, complementary) = if cfg.keypoint_supervision {
        let targets = targets.ok_or_else(|| {
            TensorError::invalid("total_loss", "keypoint supervision needs targets")
        })?;
        if targets.batch() != n || targets.k() != stack.k {
            return Err(TensorError::invalid(
                "total_loss",
                format!(
                    "targets for {} samples × {} keypoints, stack has {} × {}",
                    targets.batch(),
                    targets.k(),
                    n,
                    stack.k
                ),
            ));
        }
        let annotated = targets.annotated.iter().filter(|&&a| a).count();
        let attn = if annotated == 0 {
            zero()
        } else {
            let per = multiscale_loss_batch(stack.supervised()?, &targets.maps, &cfg.scales)?
                .mean(&[1])?;
            let weights: Vec<Real> = targets
                .annotated
                .iter()
                .map(|&a| if a { 1.0 / annotated as Real } else { 0.0 })
                .collect();
            per.mul(tape.constant(Tensor::from_vec(weights)))?.sum_all()
        };
        (attn, stack.complementary()?)
    } else {
        (zero(), stack.maps)
    };

    let reg = variance_regularizer_batch(complementary)?.mean_all();
    let total = ce.add(attn.scale(cfg.attention_weight))?.sub(reg)?;
    Ok(LossTerms {
        total,
        ce,
        attn,
        reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_sampled, GradCheckOptions, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        Tensor::from_fn(&[h, w], |i| if on.contains(&(i[0], i[1])) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4], 0.5));
        for target in [map(4, 4, &[]), map(4, 4, &[(1, 2)]), Tensor::ones(&[4, 4])] {
            let l = bce_loss(a, &target).unwrap().value().item();
            assert!((l - (2.0 as Real).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_hand_evaluated() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 2], 0.25));
        let l = bce_loss(a, &map(2, 2, &[(0, 0)])).unwrap().value().item();
        let want = -((0.25 as Real).ln() + 3.0 * (0.75 as Real).ln()) / 4.0;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let tape = Tape::new();
        let t = map(5, 5, &[(2, 2), (1, 3)]);
        let a = tape.constant(t.map(|v| v.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)));
        let l = bce_loss(a, &t).unwrap().value().item();
        assert!((0.0..1e-6).contains(&l), "{l}");
        assert!(bce_loss(a, &map(4, 4, &[])).is_err());
    }

    #[test]
    fn multiscale_perfect_attention() {
        let tape = Tape::new();
        let t = map(8, 8, &[(3, 4)]);
        let a = tape.constant(t.map(|v| v.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)));
        let l = multiscale_attention_loss(a, &t, &DEFAULT_SCALES).unwrap().value().item();
        assert!((0.0..3e-6).contains(&l), "{l}");
    }

    #[test]
    fn multiscale_absent_keypoint_with_empty_map() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[6, 6], 1e-6));
        let l = multiscale_attention_loss(a, &map(6, 6, &[]), &DEFAULT_SCALES).unwrap().value().item();
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn even_scale_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4], 0.5));
        assert!(multiscale_attention_loss(a, &map(4, 4, &[]), &[1, 2]).is_err());
    }

    #[test]
    fn pooled_targets_tolerate_one_pixel_shift() {
        let truth = (4usize, 4usize);
        for shifted in [(3, 4), (5, 4), (4, 3), (4, 5), (5, 5)] {
            let t = map(9, 9, &[shifted]).reshape(&[1, 9, 9, 1]).unwrap();
            assert_eq!(maxpool_same(&t, 1).get(&[0, truth.0, truth.1, 0]), 0.0);
            assert_eq!(maxpool_same(&t, 3).get(&[0, truth.0, truth.1, 0]), 1.0);
            assert_eq!(maxpool_same(&t, 7).get(&[0, truth.0, truth.1, 0]), 1.0);
        }
        // kernel 3 tolerates exactly one pixel, kernel 7 up to three
        let far = map(9, 9, &[(6, 4)]).reshape(&[1, 9, 9, 1]).unwrap();
        assert_eq!(maxpool_same(&far, 3).get(&[0, 4, 4, 0]), 0.0);
        assert_eq!(maxpool_same(&far, 7).get(&[0, 4, 4, 0]), 1.0);
    }

    #[test]
    fn variance_regularizer_values() {
        let tape = Tape::new();
        let r = |t: Tensor| variance_regularizer(tape.constant(t)).value().item();
        assert!((r(Tensor::full(&[3, 3], 0.5)) - 0.25).abs() < 1e-12);
        assert_eq!(r(Tensor::zeros(&[3, 3])), 0.0);
        let half = Tensor::from_fn(&[4, 4], |i| if i[1] < 2 { 1.0 } else { 0.0 });
        assert!((r(half.clone()) - 0.25).abs() < 1e-12);
        // depends on the mean only
        let flipped = half.map(|v| 1.0 - v);
        assert_eq!(r(half), r(flipped));
    }

    #[test]
    fn invisible_keypoint_pushes_map_down() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[5, 5], 0.5));
        let l = multiscale_attention_loss(a, &map(5, 5, &[]), &DEFAULT_SCALES).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(a).unwrap();
        // max pooling routes each window's gradient to one cell; every cell
        // receives at least the kernel-1 term
        assert!(g.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn head_zero_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = AttentionHead::init(8, 2, 1, &mut rng).unwrap();
        head.hidden.kernel = Tensor::zeros(head.hidden.kernel.shape());
        head.out.kernel = Tensor::zeros(head.out.kernel.shape());
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let f = tape.constant(Tensor::from_fn(&[2, 4, 4, 8], |i| i[3] as Real - 3.0));
        let stack = head.forward(&binder, "att", f).unwrap();
        assert_eq!(stack.maps.shape(), vec![2, 4, 4, 3]);
        assert!(stack.maps.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_output_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = AttentionHead::init(16, 3, 1, &mut rng).unwrap();
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let f = tape.constant(Tensor::from_fn(&[1, 6, 6, 16], |_| rng.gen_range(-2.0..2.0)));
        let stack = head.forward(&binder, "att", f).unwrap();
        assert!(stack.maps.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn head_receptive_field_is_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut head = AttentionHead::init(8, 1, 1, &mut rng).unwrap();
        // positive weights so the impulse survives the ReLU everywhere it reaches
        head.hidden.kernel = head.hidden.kernel.map(|v| v.abs() + 0.05);
        head.out.kernel = head.out.kernel.map(|v| v.abs() + 0.05);
        let (h, w) = (9, 9);
        let mut f = Tensor::zeros(&[1, h, w, 8]);
        for c in 0..8 {
            f.set(&[0, 4, 4, c], 1.0);
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let maps = head.forward(&binder, "att", tape.constant(f)).unwrap().maps.value();
        for y in 0..h {
            for x in 0..w {
                let inside = y.abs_diff(4) <= 2 && x.abs_diff(4) <= 2;
                let moved = maps.get(&[0, y, x, 0]) != 0.5;
                assert_eq!(inside, moved, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.4]).unwrap());
        let t = map(4, 4, &[(1, 1)]);
        let sup = t.map(|v| v.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP));
        let comp = Tensor::from_fn(&[4, 4], |i| if i[0] < 2 { 1.0 } else { 0.0 });
        let maps = Tensor::from_fn(&[1, 4, 4, 2], |i| {
            if i[3] == 0 { sup.get(&[i[1], i[2]]) } else { comp.get(&[i[1], i[2]]) }
        });
        let stack = AttentionStack { maps: tape.constant(maps), k: 1, q: 1 };
        let targets = KeypointTargets::new(t.reshape(&[1, 4, 4, 1]).unwrap(), vec![vec![true]], vec![true]).unwrap();
        let terms = total_loss(logits, &[2], Some(&stack), Some(&targets), &LossConfig::default()).unwrap();
        let v = terms.values();
        let ce = logits.cross_entropy(&[2]).unwrap().value().item();
        assert!((v.ce - ce).abs() < 1e-15);
        assert!(v.attn < 3e-6);
        assert!((v.reg - 0.25).abs() < 1e-12);
        assert!((v.total - (ce + v.attn - 0.25)).abs() < 1e-12);
        // dropping the regularizer changes the total by exactly the regularizer
        assert!(((v.total + v.reg) - (v.ce + v.attn)).abs() < 1e-15);
    }

    #[test]
    fn unannotated_samples_carry_no_attention_loss() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let maps = tape.constant(Tensor::full(&[2, 3, 3, 2], 0.3));
        let stack = AttentionStack { maps, k: 1, q: 1 };
        let mut kp = Tensor::zeros(&[2, 3, 3, 1]);
        kp.set(&[0, 1, 1, 0], 1.0);
        let both = KeypointTargets::new(kp.clone(), vec![vec![true], vec![false]], vec![true, true]).unwrap();
        let first = KeypointTargets::new(kp, vec![vec![true], vec![false]], vec![true, false]).unwrap();
        let cfg = LossConfig::default();
        let a_both = total_loss(logits, &[0, 1], Some(&stack), Some(&both), &cfg).unwrap().values();
        let a_first = total_loss(logits, &[0, 1], Some(&stack), Some(&first), &cfg).unwrap().values();
        // first sample alone has the keypoint, so its term is larger than the average
        assert!(a_first.attn > a_both.attn);
        assert_eq!(a_first.ce, a_both.ce);
        let none = KeypointTargets::new(Tensor::zeros(&[2, 3, 3, 1]), vec![vec![false]; 2], vec![false; 2]).unwrap();
        assert_eq!(total_loss(logits, &[0, 1], Some(&stack), Some(&none), &cfg).unwrap().values().attn, 0.0);
    }

    #[test]
    fn targets_reject_marked_invisible_keypoint() {
        let mut kp = Tensor::zeros(&[1, 3, 3, 1]);
        kp.set(&[0, 0, 0, 0], 1.0);
        assert!(KeypointTargets::new(kp, vec![vec![false]], vec![true]).is_err());
    }

    #[test]
    fn attention_losses_pass_gradient_check() {
        let kp = {
            let mut t = Tensor::zeros(&[2, 5, 5, 2]);
            t.set(&[0, 1, 2, 0], 1.0);
            t.set(&[1, 3, 3, 1], 1.0);
            t
        };
        let report = grad_check_sampled(
            |_, v| {
                let a = v[0].sigmoid();
                let ms = multiscale_loss_batch(a, &kp, &DEFAULT_SCALES)?;
                let reg = variance_regularizer_batch(a)?;
                ms.sub(reg)
            },
            |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![Tensor::from_fn(&[2, 5, 5, 2], |_| rng.gen_range(-2.0..2.0))]
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
