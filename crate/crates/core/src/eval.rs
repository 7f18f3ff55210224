//! Accuracy reports, attention boxes with crop-and-refeed, and attention map
//! export.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop_resize, stack_images, tensor_to_image, CropWindow, LabeledSample};
use crate::model::Model;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const DEFAULT_BOX_THRESHOLD: Real = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub crop_refeed: bool,
    /// Box mask keeps pixels at or above this fraction of the maximum.
    pub threshold_frac: Real,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            crop_refeed: false,
            threshold_frac: DEFAULT_BOX_THRESHOLD,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub crop_refeed: bool,
    pub top1: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// Mean over classes with at least one sample.
    pub mean_per_class: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(split: &str, labels: &[usize], preds: &[usize], num_classes: usize, crop_refeed: bool) -> Self {
        assert_eq!(labels.len(), preds.len(), "one prediction per label");
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(preds) {
            confusion[y][p] += 1;
        }
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class: Vec<Option<f64>> = (0..num_classes)
            .map(|c| (support[c] > 0).then(|| confusion[c][c] as f64 / support[c] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let n = labels.len();
        EvalReport {
            split: split.to_string(),
            n,
            crop_refeed,
            top1: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_class,
            support,
            mean_per_class: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            confusion,
        }
    }

    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut out = String::from("true\\pred");
        for c in 0..self.confusion.len() {
            out.push(',');
            out.push_str(&name(c));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            out.push_str(&name(c));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rpath = dir.join(REPORT_FILE);
        std::fs::write(&rpath, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&rpath, e))?;
        let cpath = dir.join(CONFUSION_FILE);
        std::fs::write(&cpath, self.confusion_csv(class_names)).map_err(|e| Error::io(&cpath, e))
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl AttentionBox {
    pub fn full(size: usize) -> Self {
        AttentionBox {
            x0: 0,
            y0: 0,
            x1: size,
            y1: size,
        }
    }

    pub fn window(&self) -> CropWindow {
        CropWindow {
            x0: self.x0,
            y0: self.y0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }
}

/// Mean over the last axis of `[h,w,M]`.
pub fn mean_map(maps: &Tensor) -> Tensor {
    let s = maps.shape();
    let m = s[2];
    let data = maps.data().chunks(m).map(|c| c.iter().sum::<Real>() / m as Real).collect();
    Tensor::new(vec![s[0], s[1]], data).expect("[h,w] buffer")
}

/// Bilinear resize of `[h,w]` to `size × size` with half-pixel centres.
pub fn upsample_bilinear(map: &Tensor, size: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let coord = |u: usize, n: usize| {
        let src = ((u as Real + 0.5) * n as Real / size as Real - 0.5).clamp(0.0, (n - 1) as Real);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as Real)
    };
    Tensor::from_fn(&[size, size], |idx| {
        let (y0, y1, fy) = coord(idx[0], h);
        let (x0, x1, fx) = coord(idx[1], w);
        let top = map.get(&[y0, x0]) * (1.0 - fx) + map.get(&[y0, x1]) * fx;
        let bot = map.get(&[y1, x0]) * (1.0 - fx) + map.get(&[y1, x1]) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Tight box around pixels whose upsampled mean attention reaches
/// `threshold_frac·max`; the full image when nothing qualifies.
pub fn attention_box(maps: &Tensor, size: usize, threshold_frac: Real) -> AttentionBox {
    let up = upsample_bilinear(&mean_map(maps), size);
    let max = up.data().iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if !(max > 0.0) {
        return AttentionBox::full(size);
    }
    let cut = threshold_frac * max;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if up.get(&[y, x]) >= cut {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        AttentionBox::full(size)
    } else {
        AttentionBox { x0, y0, x1, y1 }
    }
}

/// Per-sample slice `[h,w,M]` of batched maps `[N,h,w,M]`.
pub fn sample_maps(maps: &Tensor, n: usize) -> Tensor {
    let s = maps.shape();
    let len = s[1] * s[2] * s[3];
    Tensor::new(s[1..].to_vec(), maps.data()[n * len..(n + 1) * len].to_vec()).expect("slice of a 4-d tensor")
}

/// Softmax outputs `[N,C]` for `samples`; with crop-refeed, the average of
/// the full-image and the attention-cropped predictions.
pub fn predict(model: &Model, samples: &[LabeledSample], opts: &EvalOptions) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    if opts.crop_refeed && !model.config.pool.uses_attention() {
        return Err(Error::Config(format!(
            "crop-refeed needs attention maps; {} pooling has none",
            model.config.pool
        )));
    }
    let size = model.config.input_size;
    let chunks: Vec<&[LabeledSample]> = samples.chunks(opts.batch.max(1)).collect();
    let parts: Vec<Tensor> = chunks
        .par_iter()
        .map(|chunk| {
            let (probs, maps) = model.infer(&stack_images(chunk.iter())?)?;
            if !opts.crop_refeed {
                return Ok(probs);
            }
            let maps = maps.expect("attention model returns maps");
            let crops: Vec<LabeledSample> = chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let b = attention_box(&sample_maps(&maps, i), size, opts.threshold_frac);
                    LabeledSample {
                        image: crop_resize(&s.image, &b.window(), size),
                        ..s.clone()
                    }
                })
                .collect();
            let (second, _) = model.infer(&stack_images(crops.iter())?)?;
            let avg: Vec<Real> = probs.data().iter().zip(second.data()).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok(Tensor::new(probs.shape().to_vec(), avg)?)
        })
        .collect::<Result<_>>()?;
    let c = model.config.num_classes;
    let data: Vec<Real> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![samples.len(), c], data)?)
}

pub fn evaluate(model: &Model, samples: &[LabeledSample], split: &str, opts: &EvalOptions) -> Result<EvalReport> {
    let probs = predict(model, samples, opts)?;
    let preds = probs.argmax_rows();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(EvalReport::from_predictions(split, &labels, &preds, model.config.num_classes, opts.crop_refeed))
}

fn map_to_gray(map: &Tensor, size: usize) -> GrayImage {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let v = map.get(&[y as usize * h / size, x as usize * w / size]);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn draw_box(img: &mut RgbImage, b: &AttentionBox) {
    let red = Rgb([255, 0, 0]);
    for x in b.x0..b.x1 {
        img.put_pixel(x as u32, b.y0 as u32, red);
        img.put_pixel(x as u32, (b.y1 - 1) as u32, red);
    }
    for y in b.y0..b.y1 {
        img.put_pixel(b.x0 as u32, y as u32, red);
        img.put_pixel((b.x1 - 1) as u32, y as u32, red);
    }
}

/// File names written for sample `index`: input, overlay, mean, then one
/// per map (supervised maps named after their keypoint).
pub fn export_file_names(index: usize, keypoint_names: &[String], k: usize, q: usize) -> Vec<String> {
    let mut names = vec![
        format!("{index:04}_input.png"),
        format!("{index:04}_overlay.png"),
        format!("{index:04}_mean.png"),
    ];
    for i in 0..k {
        let kp = keypoint_names.get(i).cloned().unwrap_or_else(|| format!("kp_{i}"));
        names.push(format!("{index:04}_{kp}.png"));
    }
    for i in 0..q {
        names.push(format!("{index:04}_comp_{i}.png"));
    }
    names
}

/// Writes `M + 3` PNGs per sample into `out_dir` and returns the boxes.
pub fn export_attention(
    model: &Model,
    samples: &[LabeledSample],
    keypoint_names: &[String],
    out_dir: &Path,
    threshold_frac: Real,
) -> Result<Vec<AttentionBox>> {
    let (k, q) = (model.config.k, model.config.q);
    if !model.config.pool.uses_attention() {
        return Err(Error::Config(format!("{} pooling has no attention maps to export", model.config.pool)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let size = model.config.input_size;
    let mut boxes = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (_, maps) = model.infer(&stack_images([s])?)?;
        let maps = sample_maps(&maps.expect("attention model returns maps"), 0);
        let b = attention_box(&maps, size, threshold_frac);
        let names = export_file_names(i, keypoint_names, k, q);
        let save = |name: &str, res: image::ImageResult<()>| {
            res.map_err(|source| Error::Image {
                path: out_dir.join(name),
                source,
            })
        };
        let input = tensor_to_image(&s.image);
        save(&names[0], input.save(out_dir.join(&names[0])))?;
        let mut overlay = input;
        draw_box(&mut overlay, &b);
        save(&names[1], overlay.save(out_dir.join(&names[1])))?;
        save(&names[2], map_to_gray(&mean_map(&maps), size).save(out_dir.join(&names[2])))?;
        let (h, w, m) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        for j in 0..m {
            let single = Tensor::from_fn(&[h, w], |idx| maps.get(&[idx[0], idx[1], j]));
            let name = &names[3 + j];
            save(name, map_to_gray(&single, size).save(out_dir.join(name)))?;
        }
        boxes.push(b);
    }
    Ok(boxes)
}
