//! Keypoints to binary maps at feature-grid resolution.

use super::{Keypoint, LabeledSample};
use crate::attention::KeypointTargets;
use crate::tensor::Tensor;
use crate::Result;

/// `maps: [fh, fw, K]` plus per-keypoint visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedKeypoints {
    pub maps: Tensor,
    pub visible: Vec<bool>,
}

/// Marks the cell containing each visible keypoint and its 8 neighbours
/// (clipped at the border). Invisible keypoints leave an all-zero plane.
pub fn rasterize_keypoints(keypoints: &[Keypoint], image_hw: (usize, usize), feature_hw: (usize, usize)) -> RasterizedKeypoints {
    let (ih, iw) = image_hw;
    let (fh, fw) = feature_hw;
    let k = keypoints.len();
    let mut maps = Tensor::zeros(&[fh, fw, k.max(1)]);
    let mut visible = Vec::with_capacity(k);
    for (i, kp) in keypoints.iter().enumerate() {
        let inside = kp.x >= 0.0 && kp.y >= 0.0 && kp.x < iw as f64 && kp.y < ih as f64;
        let vis = kp.visible && inside;
        visible.push(vis);
        if !vis {
            continue;
        }
        let cx = ((kp.x / iw as f64 * fw as f64).floor() as usize).min(fw - 1);
        let cy = ((kp.y / ih as f64 * fh as f64).floor() as usize).min(fh - 1);
        for y in cy.saturating_sub(1)..=(cy + 1).min(fh - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(fw - 1) {
                maps.set(&[y, x, i], 1.0);
            }
        }
    }
    RasterizedKeypoints { maps, visible }
}

/// Batched targets `[N, fh, fw, K]`. Samples without annotations get empty
/// maps and are flagged as unannotated.
pub fn keypoint_targets<'a>(
    samples: impl IntoIterator<Item = &'a LabeledSample>,
    k: usize,
    feature_hw: (usize, usize),
) -> Result<KeypointTargets> {
    let (fh, fw) = feature_hw;
    let mut data = Vec::new();
    let mut visible = Vec::new();
    let mut annotated = Vec::new();
    for s in samples {
        let hw = (s.image.shape()[0], s.image.shape()[1]);
        match &s.keypoints {
            Some(kps) if kps.len() == k => {
                let r = rasterize_keypoints(kps, hw, feature_hw);
                data.extend_from_slice(r.maps.data());
                visible.push(r.visible);
                annotated.push(true);
            }
            Some(kps) => {
                return Err(crate::Error::Data(format!("sample has {} keypoints, model expects {k}", kps.len())))
            }
            None => {
                data.extend(std::iter::repeat(0.0).take(fh * fw * k));
                visible.push(vec![false; k]);
                annotated.push(false);
            }
        }
    }
    let n = annotated.len();
    let maps = Tensor::new(vec![n, fh, fw, k], data)?;
    Ok(KeypointTargets::new(maps, visible, annotated)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, visible: bool) -> Keypoint {
        Keypoint { name: "head".into(), x, y, visible }
    }

    fn marked(r: &RasterizedKeypoints, k: usize) -> Vec<(usize, usize)> {
        let s = r.maps.shape();
        let mut out = Vec::new();
        for y in 0..s[0] {
            for x in 0..s[1] {
                if r.maps.get(&[y, x, k]) == 1.0 {
                    out.push((y, x));
                }
            }
        }
        out
    }

    #[test]
    fn center_keypoint_on_4x4_grid() {
        let r = rasterize_keypoints(&[kp(32.0, 32.0, true)], (64, 64), (4, 4));
        let cells = marked(&r, 0);
        assert!(cells.contains(&(2, 2)));
        assert_eq!(cells.len(), 9);
        assert!(cells.iter().all(|&(y, x)| (1..=3).contains(&y) && (1..=3).contains(&x)));
    }

    #[test]
    fn corner_dilation_is_clipped() {
        let r = rasterize_keypoints(&[kp(0.5, 63.5, true)], (64, 64), (8, 8));
        assert_eq!(marked(&r, 0), vec![(6, 0), (6, 1), (7, 0), (7, 1)]);
    }

    #[test]
    fn invisible_keypoint_gives_empty_plane() {
        let r = rasterize_keypoints(&[kp(30.5, 30.5, false), kp(10.5, 10.5, true)], (64, 64), (8, 8));
        assert!(marked(&r, 0).is_empty());
        assert_eq!(r.visible, vec![false, true]);
        assert_eq!(marked(&r, 1).len(), 9);
    }

    #[test]
    fn coincident_keypoints_mark_the_same_cells() {
        let r = rasterize_keypoints(&[kp(20.5, 41.5, true), kp(20.5, 41.5, true)], (64, 64), (8, 8));
        assert_eq!(marked(&r, 0), marked(&r, 1));
    }

    #[test]
    fn batch_targets_flag_unannotated_samples() {
        let with = LabeledSample {
            image: Tensor::zeros(&[64, 64, 3]),
            label: 0,
            keypoints: Some(vec![kp(5.5, 5.5, true), kp(50.5, 50.5, false), kp(33.5, 12.5, true)]),
            context_id: 0,
        };
        let without = LabeledSample { keypoints: None, ..with.clone() };
        let t = keypoint_targets([&with, &without], 3, (8, 8)).unwrap();
        assert_eq!(t.maps.shape(), &[2, 8, 8, 3]);
        assert_eq!(t.annotated, vec![true, false]);
        assert_eq!(t.visible[0], vec![true, false, true]);
        assert!(t.maps.data()[8 * 8 * 3..].iter().all(|&v| v == 0.0));
        assert!(keypoint_targets([&with], 2, (8, 8)).is_err());
    }
}
