//! Synthetic biased dataset: generation, on-disk format, keypoint
//! rasterization and training augmentation.
//!
//! A dataset directory holds `manifest.json`, `annotations.jsonl` (one
//! [`Record`] per line) and `images/<split>/<index>.png`.

mod augment;
mod generate;
mod oracle;
mod rasterize;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub use augment::{augment, crop_resize, transform_keypoint, CropWindow, MIN_CROP_SCALE};
pub use generate::{
    generate, generate_samples, render_sample, Creature, GeneratedSample, HEAD_PALETTE, NUM_CONTEXTS,
    NUM_TRAIN_CONTEXTS, TAIL_PALETTE,
};
pub use oracle::{KeypointPatchOracle, TextureOracle};
pub use rasterize::{keypoint_targets, rasterize_keypoints, RasterizedKeypoints};

pub const KEYPOINT_NAMES: [&str; 3] = ["head", "body", "tail"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValCis,
    ValTrans,
    TestCis,
    TestTrans,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::ValCis, Split::ValTrans, Split::TestCis, Split::TestTrans];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValCis => "val_cis",
            Split::ValTrans => "val_trans",
            Split::TestCis => "test_cis",
            Split::TestTrans => "test_trans",
        }
    }

    /// Trans splits only show contexts never seen in training.
    pub fn is_trans(self) -> bool {
        matches!(self, Split::ValTrans | Split::TestTrans)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                format!("unknown split '{s}' (valid: train, val_cis, val_trans, test_cis, test_trans)")
            })
    }
}

/// Pixel coordinates; pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    /// Integer pixel containing the keypoint.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the dataset root.
    pub path: String,
    pub split: Split,
    pub class: usize,
    /// `None` when the annotation was withheld.
    pub keypoints: Option<Vec<Keypoint>>,
    pub context_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Samples per class in each validation and test split.
    pub eval_per_class: usize,
    pub image_size: usize,
    /// Probability that a cis sample shows its class's own context.
    pub bias: f64,
    pub seed: u64,
    /// Fraction of training samples that keep their keypoints.
    pub kp_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 8,
            per_class: 20,
            eval_per_class: 25,
            image_size: 64,
            bias: 0.9,
            seed: 0,
            kp_frac: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let max_classes = HEAD_PALETTE.len() * TAIL_PALETTE.len();
        if !(2..=max_classes).contains(&self.classes) {
            return bad(format!("classes must be in 2..={max_classes}, got {}", self.classes));
        }
        if self.per_class == 0 || self.eval_per_class == 0 {
            return bad("per-class counts must be positive".into());
        }
        if !(32..=512).contains(&self.image_size) {
            return bad(format!("image size must be in 32..=512, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return bad(format!("bias must be in [0,1], got {}", self.bias));
        }
        if !(self.kp_frac > 0.0 && self.kp_frac <= 1.0) {
            return bad(format!("keypoint fraction must be in (0,1], got {}", self.kp_frac));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.classes
            * match split {
                Split::Train => self.per_class,
                _ => self.eval_per_class,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: Split,
    pub count: usize,
    pub contexts: Vec<usize>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub keypoint_names: Vec<String>,
    pub splits: Vec<SplitInfo>,
    pub config: GenConfig,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }
}

/// One decoded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[H,W,3]` in `[0,1]`.
    pub image: Tensor,
    pub label: usize,
    pub keypoints: Option<Vec<Keypoint>>,
    pub context_id: usize,
}

impl LabeledSample {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Stacks sample images into `[N,H,W,3]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.image.shape() => {
                return Err(Error::Data(format!("image shapes differ: {sh:?} vs {:?}", s.image.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        n += 1;
    }
    let sh = shape.ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    Ok(Tensor::new(vec![n, sh[0], sh[1], sh[2]], data)?)
}

pub(crate) fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as Real / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer matches its dimensions")
}

pub(crate) fn tensor_to_image(t: &Tensor) -> image::RgbImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let raw = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw).expect("tensor is [H,W,3]")
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let apath = root.join(ANNOTATIONS_FILE);
        let file = std::fs::File::open(&apath).map_err(|e| Error::io(&apath, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&apath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", apath.display(), i + 1)))?;
            if rec.class >= manifest.num_classes() {
                return Err(Error::Data(format!("{}:{}: class {} out of range", apath.display(), i + 1, rec.class)));
            }
            records.push(rec);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records(split).count()
    }

    /// Decodes every image of `split`, in annotation order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledSample>> {
        let recs: Vec<&Record> = self.records(split).collect();
        if recs.is_empty() {
            return Err(Error::Data(format!("split {split} is empty or missing")));
        }
        recs.par_iter()
            .map(|r| {
                Ok(LabeledSample {
                    image: read_png(&self.root.join(&r.path))?,
                    label: r.class,
                    keypoints: r.keypoints.clone(),
                    context_id: r.context_id,
                })
            })
            .collect()
    }

    pub fn class_counts(&self, split: Split) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for r in self.records(split) {
            *out.entry(r.class).or_insert(0) += 1;
        }
        out
    }
}
