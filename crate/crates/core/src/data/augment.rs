//! Random-scale cropping with nearest-neighbour resizing.

use rand::Rng;

use super::{Keypoint, LabeledSample};
use crate::tensor::Tensor;

pub const MIN_CROP_SCALE: f64 = 0.5;

/// Source rectangle `[x0, x0+w) × [y0, y0+h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CropWindow {
    pub fn full(size: usize) -> Self {
        CropWindow {
            x0: 0,
            y0: 0,
            w: size,
            h: size,
        }
    }

    /// Square window of side `round(scale·size)` at offset `(x0, y0)`.
    pub fn square(size: usize, scale: f64, x0: usize, y0: usize) -> Self {
        let side = ((scale * size as f64).round() as usize).clamp(1, size);
        CropWindow {
            x0: x0.min(size - side),
            y0: y0.min(size - side),
            w: side,
            h: side,
        }
    }

    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        let scale = rng.gen_range(MIN_CROP_SCALE..=1.0);
        let side = ((scale * size as f64).round() as usize).clamp(1, size);
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        CropWindow::square(size, scale, x0, y0)
    }

    pub fn is_full(&self, width: usize, height: usize) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.w == width && self.h == height
    }

    /// Source column sampled by output column `u` of an `out`-wide image.
    pub fn src_x(&self, u: usize, out: usize) -> usize {
        self.x0 + ((2 * u + 1) * self.w) / (2 * out)
    }

    pub fn src_y(&self, v: usize, out: usize) -> usize {
        self.y0 + ((2 * v + 1) * self.h) / (2 * out)
    }
}

/// Crops `[H,W,C]` to `win` and resizes to `out × out` by nearest neighbour.
pub fn crop_resize(image: &Tensor, win: &CropWindow, out: usize) -> Tensor {
    let s = image.shape();
    let (w, c) = (s[1], s[2]);
    if win.is_full(w, s[0]) && out == w && out == s[0] {
        return image.clone();
    }
    let cols: Vec<usize> = (0..out).map(|u| win.src_x(u, out)).collect();
    let mut data = Vec::with_capacity(out * out * c);
    for v in 0..out {
        let sy = win.src_y(v, out);
        for &sx in &cols {
            let base = (sy * w + sx) * c;
            data.extend_from_slice(&image.data()[base..base + c]);
        }
    }
    Tensor::new(vec![out, out, c], data).expect("out×out×C buffer")
}

/// Maps a keypoint through [`crop_resize`]. The result lies at the centre of
/// an output pixel that samples the keypoint's source pixel, or is marked
/// invisible when that pixel is outside the window.
pub fn transform_keypoint(kp: &Keypoint, win: &CropWindow, out: usize) -> Keypoint {
    let map = |p: f64, o: usize, len: usize| (p - o as f64) * out as f64 / len as f64;
    let mut res = Keypoint {
        name: kp.name.clone(),
        x: map(kp.x, win.x0, win.w),
        y: map(kp.y, win.y0, win.h),
        visible: false,
    };
    if !kp.visible {
        return res;
    }
    let (px, py) = kp.pixel();
    let inside = |p: i64, o: usize, len: usize| p >= o as i64 && p < (o + len) as i64;
    if !inside(px, win.x0, win.w) || !inside(py, win.y0, win.h) {
        return res;
    }
    let pick = |p: usize, cont: f64, src: &dyn Fn(usize) -> usize| {
        (0..out)
            .filter(|&u| src(u) == p)
            .min_by(|&a, &b| {
                let da = (a as f64 + 0.5 - cont).abs();
                let db = (b as f64 + 0.5 - cont).abs();
                da.total_cmp(&db)
            })
    };
    let ux = pick(px as usize, res.x, &|u| win.src_x(u, out));
    let uy = pick(py as usize, res.y, &|v| win.src_y(v, out));
    if let (Some(ux), Some(uy)) = (ux, uy) {
        res.x = ux as f64 + 0.5;
        res.y = uy as f64 + 0.5;
        res.visible = true;
    }
    res
}

/// Random scale in `[0.5, 1]`, random crop, resize back to the input size.
pub fn augment(sample: &LabeledSample, rng: &mut impl Rng) -> LabeledSample {
    let size = sample.size();
    let win = CropWindow::random(size, rng);
    LabeledSample {
        image: crop_resize(&sample.image, &win, size),
        label: sample.label,
        keypoints: sample
            .keypoints
            .as_ref()
            .map(|kps| kps.iter().map(|k| transform_keypoint(k, &win, size)).collect()),
        context_id: sample.context_id,
    }
}
