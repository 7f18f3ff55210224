//! Reference classifiers that certify the dataset's structure: one sees only
//! the background, the other only the pixels at the head and tail.

use super::LabeledSample;
use crate::tensor::Real;

const BINS: usize = 4;
/// Pixels whose channel spread exceeds this are creature or distractor
/// colours and are ignored by the background histogram.
const SATURATION_CUTOFF: Real = 0.5;
const PATCH_RADIUS: i64 = 2;

fn nearest(protos: &[Option<Vec<Real>>], x: &[Real], l1: bool) -> usize {
    let mut best = (0, Real::INFINITY);
    for (c, p) in protos.iter().enumerate() {
        let Some(p) = p else { continue };
        let d: Real = p
            .iter()
            .zip(x)
            .map(|(a, b)| if l1 { (a - b).abs() } else { (a - b) * (a - b) })
            .sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn fit_prototypes(features: impl Iterator<Item = (usize, Vec<Real>)>, num_classes: usize) -> Vec<Option<Vec<Real>>> {
    let mut sums: Vec<Option<(Vec<Real>, usize)>> = vec![None; num_classes];
    for (c, f) in features {
        match &mut sums[c] {
            Some((s, n)) => {
                s.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
                *n += 1;
            }
            slot @ None => *slot = Some((f, 1)),
        }
    }
    sums.into_iter()
        .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as Real).collect()))
        .collect()
}

fn accuracy(samples: &[LabeledSample], predict: impl Fn(&LabeledSample) -> Option<usize>) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in samples {
        if let Some(p) = predict(s) {
            total += 1;
            hit += (p == s.label) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Nearest class prototype of the background colour histogram.
#[derive(Debug, Clone)]
pub struct TextureOracle {
    prototypes: Vec<Option<Vec<Real>>>,
}

impl TextureOracle {
    pub fn histogram(sample: &LabeledSample) -> Vec<Real> {
        let mut h = vec![0.0; BINS * BINS * BINS];
        let mut n = 0.0;
        for px in sample.image.data().chunks(3) {
            let max = px.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let min = px.iter().cloned().fold(Real::INFINITY, Real::min);
            if max - min > SATURATION_CUTOFF {
                continue;
            }
            let bin = |v: Real| ((v * BINS as Real) as usize).min(BINS - 1);
            h[(bin(px[0]) * BINS + bin(px[1])) * BINS + bin(px[2])] += 1.0;
            n += 1.0;
        }
        if n > 0.0 {
            h.iter_mut().for_each(|v| *v /= n);
        }
        h
    }

    pub fn fit(train: &[LabeledSample], num_classes: usize) -> Self {
        TextureOracle {
            prototypes: fit_prototypes(train.iter().map(|s| (s.label, Self::histogram(s))), num_classes),
        }
    }

    pub fn predict(&self, sample: &LabeledSample) -> usize {
        nearest(&self.prototypes, &Self::histogram(sample), true)
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> f64 {
        accuracy(samples, |s| Some(self.predict(s)))
    }
}

/// Nearest class prototype of the mean colours of 5×5 patches at the head
/// and tail keypoints. Samples without visible head and tail are skipped.
#[derive(Debug, Clone)]
pub struct KeypointPatchOracle {
    prototypes: Vec<Option<Vec<Real>>>,
}

impl KeypointPatchOracle {
    pub fn features(sample: &LabeledSample) -> Option<Vec<Real>> {
        let kps = sample.keypoints.as_ref()?;
        let s = sample.image.shape();
        let (h, w) = (s[0] as i64, s[1] as i64);
        let mut out = Vec::with_capacity(6);
        for name in ["head", "tail"] {
            let kp = kps.iter().find(|k| k.name == name && k.visible)?;
            let (px, py) = kp.pixel();
            let mut acc = [0.0 as Real; 3];
            let mut n = 0.0;
            for y in (py - PATCH_RADIUS).max(0)..=(py + PATCH_RADIUS).min(h - 1) {
                for x in (px - PATCH_RADIUS).max(0)..=(px + PATCH_RADIUS).min(w - 1) {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += sample.image.get(&[y as usize, x as usize, c]);
                    }
                    n += 1.0;
                }
            }
            out.extend(acc.iter().map(|a| a / n));
        }
        Some(out)
    }

    pub fn fit(train: &[LabeledSample], num_classes: usize) -> Self {
        KeypointPatchOracle {
            prototypes: fit_prototypes(
                train.iter().filter_map(|s| Some((s.label, Self::features(s)?))),
                num_classes,
            ),
        }
    }

    pub fn predict(&self, sample: &LabeledSample) -> Option<usize> {
        Some(nearest(&self.prototypes, &Self::features(sample)?, false))
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> f64 {
        accuracy(samples, |s| self.predict(s))
    }
}
