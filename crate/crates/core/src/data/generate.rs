//! Procedural images: a textured background context plus a creature whose
//! class is visible only in its head colour and tail colour.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    image_to_tensor, GenConfig, Keypoint, LabeledSample, Manifest, Record, Split, SplitInfo, ANNOTATIONS_FILE,
    IMAGES_DIR, KEYPOINT_NAMES, MANIFEST_FILE,
};
use crate::{Error, Result};

/// Contexts `0..NUM_TRAIN_CONTEXTS` appear in cis splits, the rest only in
/// trans splits.
pub const NUM_TRAIN_CONTEXTS: usize = 8;
pub const NUM_CONTEXTS: usize = 12;

pub const HEAD_PALETTE: [[f64; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
];
pub const TAIL_PALETTE: [[f64; 3]; 2] = [[0.85, 0.20, 0.85], [0.10, 0.85, 0.85]];
const HEAD_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
const TAIL_NAMES: [&str; 2] = ["magenta", "cyan"];
const BODY_COLOR: [f64; 3] = [0.55, 0.47, 0.38];
const COLOR_JITTER: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.03;

#[derive(Clone, Copy)]
enum Pattern {
    Stripes,
    Checker,
    Plaid,
    Dots,
    Blotches,
}

#[derive(Clone, Copy)]
struct Texture {
    a: [f64; 3],
    b: [f64; 3],
    pattern: Pattern,
    period: f64,
    angle: f64,
}

const fn tex(a: [f64; 3], b: [f64; 3], pattern: Pattern, period: f64, angle: f64) -> Texture {
    Texture {
        a,
        b,
        pattern,
        period,
        angle,
    }
}

const TEXTURES: [Texture; NUM_CONTEXTS] = [
    tex([0.80, 0.72, 0.55], [0.65, 0.55, 0.40], Pattern::Stripes, 8.0, 0.3),
    tex([0.35, 0.50, 0.25], [0.25, 0.38, 0.18], Pattern::Checker, 6.0, 0.0),
    tex([0.45, 0.50, 0.58], [0.30, 0.33, 0.40], Pattern::Plaid, 10.0, 0.5),
    tex([0.62, 0.38, 0.28], [0.45, 0.25, 0.18], Pattern::Dots, 7.0, 0.2),
    tex([0.45, 0.48, 0.30], [0.58, 0.60, 0.42], Pattern::Blotches, 14.0, 1.0),
    tex([0.38, 0.30, 0.45], [0.55, 0.45, 0.60], Pattern::Stripes, 5.0, 1.3),
    tex([0.88, 0.90, 0.92], [0.72, 0.76, 0.80], Pattern::Checker, 9.0, 0.8),
    tex([0.70, 0.55, 0.50], [0.55, 0.40, 0.38], Pattern::Plaid, 6.0, 0.1),
    tex([0.30, 0.52, 0.52], [0.20, 0.38, 0.40], Pattern::Stripes, 6.0, 0.9),
    tex([0.55, 0.55, 0.25], [0.40, 0.40, 0.15], Pattern::Dots, 8.0, 0.6),
    tex([0.25, 0.25, 0.27], [0.38, 0.38, 0.40], Pattern::Blotches, 12.0, 0.4),
    tex([0.90, 0.70, 0.58], [0.78, 0.58, 0.48], Pattern::Plaid, 8.0, 1.1),
];

impl Texture {
    /// Blend factor in `[0,1]` at `(x, y)` for phases `(px, py)` in `[0,1)`.
    fn factor(&self, x: f64, y: f64, px: f64, py: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let u = (x * c + y * s) / self.period + px;
        let v = (-x * s + y * c) / self.period + py;
        match self.pattern {
            Pattern::Stripes => ((2.0 * PI * u).sin() > 0.0) as u8 as f64,
            Pattern::Checker => ((u.floor() + v.floor()) as i64).rem_euclid(2) as f64,
            Pattern::Plaid => 0.5 + 0.25 * ((2.0 * PI * u).sin() + (2.0 * PI * v).sin()),
            Pattern::Dots => {
                let du = u - u.round();
                let dv = v - v.round();
                ((du * du + dv * dv).sqrt() < 0.3) as u8 as f64
            }
            Pattern::Blotches => {
                let n = (2.0 * PI * u).sin() + (2.0 * PI * (0.7 * v + 0.4 * u)).sin() + (2.0 * PI * (1.3 * v - 0.5 * u)).sin();
                (n > 0.3) as u8 as f64
            }
        }
    }
}

fn jitter(c: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0))
}

/// Pose and colours of the drawn creature, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Creature {
    pub center: (f64, f64),
    pub angle: f64,
    pub scale: f64,
    /// Pixels per unit at the 64-pixel reference size.
    pub unit: f64,
    pub head_color: [f64; 3],
    pub tail_color: [f64; 3],
}

impl Creature {
    fn dir(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (c, s)
    }

    fn k(&self) -> f64 {
        self.scale * self.unit
    }

    fn body_axes(&self) -> (f64, f64) {
        (9.0 * self.k(), 5.0 * self.k())
    }

    pub fn head_radius(&self) -> f64 {
        (5.0 * self.k()).max(4.0 * self.unit)
    }

    fn tail_half_width(&self) -> f64 {
        (2.8 * self.k()).max(2.0 * self.unit)
    }

    fn along(&self, t: f64) -> (f64, f64) {
        let (dx, dy) = self.dir();
        (self.center.0 + t * dx, self.center.1 + t * dy)
    }

    pub fn head_center(&self) -> (f64, f64) {
        self.along(self.body_axes().0 + 0.4 * self.head_radius())
    }

    fn tail_segment(&self) -> ((f64, f64), (f64, f64)) {
        (self.along(-7.0 * self.k()), self.along(-18.0 * self.k()))
    }

    pub fn tail_point(&self) -> (f64, f64) {
        self.along(-13.5 * self.k())
    }

    /// Radius of a disc around the centre that contains the whole creature.
    pub fn extent(&self) -> f64 {
        let head = self.body_axes().0 + 1.4 * self.head_radius();
        let tail = 18.0 * self.k() + self.tail_half_width();
        head.max(tail) + 1.0
    }

    /// Colour of the creature at `(x, y)`, if it covers that point.
    fn color_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (hx, hy) = self.head_center();
        let r = self.head_radius();
        if (x - hx).powi(2) + (y - hy).powi(2) <= r * r {
            return Some(self.head_color);
        }
        let (dx, dy) = self.dir();
        let (rx, ry) = (x - self.center.0, y - self.center.1);
        let u = rx * dx + ry * dy;
        let v = -rx * dy + ry * dx;
        let (a, b) = self.body_axes();
        if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
            return Some(BODY_COLOR);
        }
        let (p0, p1) = self.tail_segment();
        if segment_distance((x, y), p0, p1) <= self.tail_half_width() {
            return Some(self.tail_color);
        }
        None
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

fn snap(v: f64) -> f64 {
    v.floor() + 0.5
}

pub fn class_name(class: usize) -> String {
    let (h, t) = class_parts(class);
    format!("{}_{}", HEAD_NAMES[h], TAIL_NAMES[t])
}

fn class_parts(class: usize) -> (usize, usize) {
    (class % HEAD_PALETTE.len(), (class / HEAD_PALETTE.len()) % TAIL_PALETTE.len())
}

/// Draws one image. Returns the image, its creature and keypoints.
pub fn render_sample(size: usize, class: usize, context: usize, rng: &mut impl Rng) -> (RgbImage, Creature, Vec<Keypoint>) {
    let unit = size as f64 / 64.0;
    let (h, t) = class_parts(class);
    let mut creature = Creature {
        center: (0.0, 0.0),
        angle: rng.gen_range(0.0..2.0 * PI),
        scale: rng.gen_range(0.6..=1.0),
        unit,
        head_color: jitter(HEAD_PALETTE[h], rng),
        tail_color: jitter(TAIL_PALETTE[t], rng),
    };
    let ext = creature.extent();
    let lo = ext + 1.0;
    let hi = size as f64 - ext - 1.0;
    creature.center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));

    // distractor discs in the class palettes, clear of the creature
    let mut discs = Vec::new();
    let count = rng.gen_range(1..=3);
    for _ in 0..count {
        let r = rng.gen_range(3.5..5.0) * unit;
        let palette = rng.gen_range(0..HEAD_PALETTE.len() + TAIL_PALETTE.len());
        let base = if palette < HEAD_PALETTE.len() {
            HEAD_PALETTE[palette]
        } else {
            TAIL_PALETTE[palette - HEAD_PALETTE.len()]
        };
        let color = jitter(base, rng);
        for _ in 0..50 {
            let c = (rng.gen_range(r..size as f64 - r), rng.gen_range(r..size as f64 - r));
            let far = ((c.0 - creature.center.0).powi(2) + (c.1 - creature.center.1).powi(2)).sqrt() > ext + r + 1.0;
            let apart = discs
                .iter()
                .all(|&(d, dr, _): &((f64, f64), f64, [f64; 3])| ((c.0 - d.0).powi(2) + (c.1 - d.1).powi(2)).sqrt() > r + dr + 1.0);
            if far && apart {
                discs.push((c, r, color));
                break;
            }
        }
    }

    let texture = TEXTURES[context];
    let (px, py) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let tex_a = jitter(texture.a, rng);
    let tex_b = jitter(texture.b, rng);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let color = creature.color_at(cx, cy).unwrap_or_else(|| {
                discs
                    .iter()
                    .find(|(c, r, _)| (cx - c.0).powi(2) + (cy - c.1).powi(2) <= r * r)
                    .map(|d| d.2)
                    .unwrap_or_else(|| {
                        let f = texture.factor(cx / unit, cy / unit, px, py);
                        [0, 1, 2].map(|i| tex_a[i] + f * (tex_b[i] - tex_a[i]))
                    })
            });
            let px = color.map(|v| {
                let n = v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
                (n.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }

    let points = [creature.head_center(), creature.center, creature.tail_point()];
    let keypoints = KEYPOINT_NAMES
        .iter()
        .zip(points)
        .map(|(name, (x, y))| Keypoint {
            name: name.to_string(),
            x: snap(x),
            y: snap(y),
            visible: true,
        })
        .collect();
    (img, creature, keypoints)
}

/// A rendered sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: Record,
    pub image: RgbImage,
}

impl GeneratedSample {
    pub fn to_labeled(&self) -> LabeledSample {
        LabeledSample {
            image: image_to_tensor(&self.image),
            label: self.record.class,
            keypoints: self.record.keypoints.clone(),
            context_id: self.record.context_id,
        }
    }
}

struct Plan {
    split: Split,
    index: usize,
    class: usize,
    context: usize,
    keep_keypoints: bool,
}

fn split_contexts(split: Split) -> Vec<usize> {
    if split.is_trans() {
        (NUM_TRAIN_CONTEXTS..NUM_CONTEXTS).collect()
    } else {
        (0..NUM_TRAIN_CONTEXTS).collect()
    }
}

fn plan_split(cfg: &GenConfig, split: Split, split_idx: u64) -> Vec<Plan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split_idx);
    let per = cfg.split_size(split) / cfg.classes;
    let mut classes: Vec<usize> = (0..cfg.classes).flat_map(|c| std::iter::repeat(c).take(per)).collect();
    classes.shuffle(&mut rng);
    let n = classes.len();
    let mut keep = vec![true; n];
    if split == Split::Train {
        let strip = ((1.0 - cfg.kp_frac) * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..strip.min(n)] {
            keep[i] = false;
        }
    }
    classes
        .into_iter()
        .enumerate()
        .map(|(index, class)| {
            let context = if split.is_trans() {
                rng.gen_range(NUM_TRAIN_CONTEXTS..NUM_CONTEXTS)
            } else if rng.gen_bool(cfg.bias) {
                class % NUM_TRAIN_CONTEXTS
            } else {
                rng.gen_range(0..NUM_TRAIN_CONTEXTS)
            };
            Plan {
                split,
                index,
                class,
                context,
                keep_keypoints: keep[index],
            }
        })
        .collect()
}

/// Renders every split in memory. Identical configs give identical samples.
pub fn generate_samples(cfg: &GenConfig) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    let plans: Vec<Plan> = Split::ALL
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| plan_split(cfg, s, i as u64))
        .collect();
    Ok(plans
        .par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((Split::ALL.len() as u64 + p.split as u64) << 32) | p.index as u64);
            let (image, _, keypoints) = render_sample(cfg.image_size, p.class, p.context, &mut rng);
            GeneratedSample {
                record: Record {
                    path: format!("{IMAGES_DIR}/{}/{:05}.png", p.split, p.index),
                    split: p.split,
                    class: p.class,
                    keypoints: p.keep_keypoints.then_some(keypoints),
                    context_id: p.context,
                },
                image,
            }
        })
        .collect())
}

pub fn manifest_for(cfg: &GenConfig) -> Manifest {
    Manifest {
        classes: (0..cfg.classes).map(class_name).collect(),
        keypoint_names: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        splits: Split::ALL
            .iter()
            .map(|&s| SplitInfo {
                name: s,
                count: cfg.split_size(s),
                contexts: split_contexts(s),
            })
            .collect(),
        config: cfg.clone(),
    }
}

/// Writes a dataset into `out`. A non-empty `out` is an error unless
/// `force` is set, in which case previous dataset files are replaced.
pub fn generate(cfg: &GenConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        let images = out.join(IMAGES_DIR);
        if images.exists() {
            std::fs::remove_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        }
    }
    let samples = generate_samples(cfg)?;
    for s in Split::ALL {
        let dir = out.join(IMAGES_DIR).join(s.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    samples.par_iter().try_for_each(|s| {
        let path = out.join(&s.record.path);
        s.image.save(&path).map_err(|source| Error::Image { path, source })
    })?;

    let apath = out.join(ANNOTATIONS_FILE);
    let file = std::fs::File::create(&apath).map_err(|e| Error::io(&apath, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in &samples {
        serde_json::to_writer(&mut w, &s.record)?;
        w.write_all(b"\n").map_err(|e| Error::io(&apath, e))?;
    }
    w.flush().map_err(|e| Error::io(&apath, e))?;

    let manifest = manifest_for(cfg);
    let mpath = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn small() -> GenConfig {
        GenConfig {
            per_class: 3,
            eval_per_class: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn keypoints_sit_on_their_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 0..8 {
            let (img, creature, kps) = render_sample(64, class, class % 8, &mut rng);
            assert_eq!(kps.len(), 3);
            let (h, t) = class_parts(class);
            for (kp, expected) in kps.iter().zip([Some(creature.head_color), Some(BODY_COLOR), Some(creature.tail_color)]) {
                assert!(kp.visible);
                assert!((0.0..64.0).contains(&kp.x) && (0.0..64.0).contains(&kp.y));
                assert_eq!(kp.x.fract(), 0.5);
                let c = creature.color_at(kp.x, kp.y);
                assert_eq!(c, expected, "{} of class {class}", kp.name);
            }
            let head = img.get_pixel(kps[0].x as u32, kps[0].y as u32).0;
            let want = HEAD_PALETTE[h];
            for i in 0..3 {
                let v = head[i] as f64 / 255.0;
                assert!((v - want[i]).abs() <= COLOR_JITTER + PIXEL_NOISE + 0.01);
            }
            let tail = img.get_pixel(kps[2].x as u32, kps[2].y as u32).0;
            for i in 0..3 {
                assert!((tail[i] as f64 / 255.0 - TAIL_PALETTE[t][i]).abs() <= COLOR_JITTER + PIXEL_NOISE + 0.01);
            }
        }
    }

    #[test]
    fn head_disc_covers_a_5x5_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (_, creature, kps) = render_sample(64, 0, 0, &mut rng);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let c = creature.color_at(kps[0].x + dx as f64, kps[0].y + dy as f64);
                    assert_eq!(c, Some(creature.head_color));
                }
            }
        }
    }

    #[test]
    fn splits_are_balanced_and_contexts_disjoint() {
        let cfg = small();
        let samples = generate_samples(&cfg).unwrap();
        assert_eq!(samples.len(), 8 * 3 + 4 * 8 * 2);
        for s in Split::ALL {
            let recs: Vec<&Record> = samples.iter().map(|g| &g.record).filter(|r| r.split == s).collect();
            assert_eq!(recs.len(), cfg.split_size(s));
            for c in 0..8 {
                assert_eq!(recs.iter().filter(|r| r.class == c).count(), cfg.split_size(s) / 8);
            }
            for r in &recs {
                assert_eq!(r.context_id >= NUM_TRAIN_CONTEXTS, s.is_trans());
            }
        }
    }

    #[test]
    fn zero_bias_and_full_bias_contexts() {
        let full = GenConfig { bias: 1.0, ..small() };
        for g in generate_samples(&full).unwrap() {
            if !g.record.split.is_trans() {
                assert_eq!(g.record.context_id, g.record.class);
            }
        }
    }

    #[test]
    fn keypoint_fraction_strips_training_annotations_only() {
        let cfg = GenConfig { kp_frac: 0.25, per_class: 4, ..small() };
        let samples = generate_samples(&cfg).unwrap();
        let train: Vec<_> = samples.iter().filter(|g| g.record.split == Split::Train).collect();
        assert_eq!(train.iter().filter(|g| g.record.keypoints.is_some()).count(), 8);
        assert!(samples
            .iter()
            .filter(|g| g.record.split != Split::Train)
            .all(|g| g.record.keypoints.is_some()));
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&cfg, a.path(), false).unwrap();
        generate(&cfg, b.path(), false).unwrap();
        for f in [MANIFEST_FILE, ANNOTATIONS_FILE, "images/train/00000.png", "images/test_trans/00007.png"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = GenConfig { seed: 1, ..small() };
        let c = tempfile::tempdir().unwrap();
        generate(&other, c.path(), false).unwrap();
        assert_ne!(
            std::fs::read(a.path().join(ANNOTATIONS_FILE)).unwrap(),
            std::fs::read(c.path().join(ANNOTATIONS_FILE)).unwrap()
        );
    }

    #[test]
    fn non_empty_output_needs_force() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path(), false).unwrap();
        assert!(matches!(generate(&cfg, dir.path(), false), Err(Error::Config(_))));
        generate(&cfg, dir.path(), true).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest.splits.len(), 5);
        assert_eq!(ds.records.len(), 8 * 3 + 4 * 8 * 2);
        let train = ds.load_split(Split::Train).unwrap();
        let mem: Vec<LabeledSample> = generate_samples(&cfg)
            .unwrap()
            .iter()
            .filter(|g| g.record.split == Split::Train)
            .map(GeneratedSample::to_labeled)
            .collect();
        assert_eq!(train, mem);
    }
}
