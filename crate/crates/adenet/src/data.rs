//! Manifest-driven dataset handling: bounding-box cropping, batch padding,
//! stratified splits and k-fold plans, plus a seeded synthetic
//! insulator-defect generator for desk-scale experiments.
//!
//! Manifest CSV schema: header `image_path,x,y,w,h,label`, UTF-8, one record
//! per line; paths are resolved relative to the manifest file. The synthetic
//! generator writes a sidecar `defects.jsonl` with one
//! `{record_index, defect_bbox:[x,y,w,h]}` line per damaged record (bbox in
//! source-image coordinates, always inside the crop bbox).

use crate::tensor::Tensor;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing image for record {index}: {path}")]
    MissingImage { index: usize, path: PathBuf },
    #[error("record {index}: bbox ({x},{y},{w},{h}) out of bounds for {iw}x{ih} image")]
    BboxOutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        iw: u32,
        ih: u32,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {label} has {count} samples, needs at least {needed}")]
    ClassTooSmall {
        label: u8,
        count: usize,
        needed: usize,
    },
    #[error("invalid split fraction {0}")]
    BadFraction(f64),
    #[error("image error: {0}")]
    Image(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bbox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Bbox {
    pub fn contains(&self, other: &Bbox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

#[derive(Clone, Debug)]
pub struct AnnotationRecord {
    pub image_path: PathBuf,
    pub bbox: Bbox,
    /// damaged = 1, undamaged = 0
    pub label: u8,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    pub damaged: usize,
    pub undamaged: usize,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }
}

/// Load and validate a manifest: every image must exist and every bbox must
/// lie inside its image. Out-of-bounds boxes are rejected, not clamped.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut lines = text.lines().enumerate();
    // header is optional on empty files
    if let Some((_, header)) = lines.next() {
        if header.trim() != "image_path,x,y,w,h,label" {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("expected header 'image_path,x,y,w,h,label', got '{header}'"),
            });
        }
    }
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DataError::Parse {
                line: lineno + 1,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<u32, DataError> {
            fields[i].trim().parse().map_err(|_| DataError::Parse {
                line: lineno + 1,
                msg: format!("invalid number '{}'", fields[i]),
            })
        };
        let (x, y, w, h) = (num(1)?, num(2)?, num(3)?, num(4)?);
        let label: u8 = num(5)? as u8;
        if label > 1 {
            return Err(DataError::Parse {
                line: lineno + 1,
                msg: format!("label must be 0 or 1, got {label}"),
            });
        }
        if w == 0 || h == 0 {
            return Err(DataError::Parse {
                line: lineno + 1,
                msg: "bbox must have positive size".into(),
            });
        }
        records.push(AnnotationRecord {
            image_path: root.join(fields[0].trim()),
            bbox: Bbox { x, y, w, h },
            label,
        });
    }
    // validate against the images
    for (index, rec) in records.iter().enumerate() {
        let (iw, ih) = image::image_dimensions(&rec.image_path).map_err(|_| {
            DataError::MissingImage {
                index,
                path: rec.image_path.clone(),
            }
        })?;
        let b = rec.bbox;
        if b.x + b.w > iw || b.y + b.h > ih {
            return Err(DataError::BboxOutOfBounds {
                index,
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
                iw,
                ih,
            });
        }
    }
    let damaged = records.iter().filter(|r| r.label == 1).count();
    let undamaged = records.len() - damaged;
    Ok(DatasetManifest {
        records,
        damaged,
        undamaged,
    })
}

/// One crop per record, dimensions exactly the bbox, order preserved.
/// Decoding runs in parallel; results are assembled in manifest order.
pub fn crop_insulators(manifest: &DatasetManifest) -> Result<Vec<(RgbImage, u8)>, DataError> {
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let img = image::open(&rec.image_path)
                .map_err(|e| DataError::Image(format!("{}: {e}", rec.image_path.display())))?
                .to_rgb8();
            let b = rec.bbox;
            let crop = image::imageops::crop_imm(&img, b.x, b.y, b.w, b.h).to_image();
            Ok((crop, rec.label))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// (n, 3, H, W) with H, W the per-batch maxima rounded up to a multiple
    /// of 8, pixels scaled to [0,1], padding exactly zero.
    pub x: Tensor<f32>,
    pub sizes: Vec<(u32, u32)>,
    pub labels: Vec<usize>,
}

fn round_up8(v: u32) -> u32 {
    v.div_ceil(8) * 8
}

pub fn pad_batch(crops: &[RgbImage], labels: &[usize]) -> Result<Batch, DataError> {
    if crops.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let hmax = round_up8(crops.iter().map(|c| c.height()).max().unwrap());
    let wmax = round_up8(crops.iter().map(|c| c.width()).max().unwrap());
    let (hh, ww) = (hmax as usize, wmax as usize);
    let mut x = Tensor::zeros(crops.len(), 3, hh, ww);
    for (n, crop) in crops.iter().enumerate() {
        for (px, py, pixel) in crop.enumerate_pixels() {
            for ch in 0..3 {
                x.set(
                    n,
                    ch,
                    py as usize,
                    px as usize,
                    pixel.0[ch] as f32 / 255.0,
                );
            }
        }
    }
    Ok(Batch {
        x,
        sizes: crops.iter().map(|c| (c.height(), c.width())).collect(),
        labels: labels.to_vec(),
    })
}

/// Grayscale (0.299 R + 0.587 G + 0.114 B) single-channel tensor, bilinearly
/// resized to `side` x `side`. Feeds the LeNet-5 comparison arm.
pub fn to_gray_square(crop: &RgbImage, side: u32) -> Tensor<f32> {
    let gray = image::imageops::resize(crop, side, side, image::imageops::FilterType::Triangle);
    let s = side as usize;
    let mut t = Tensor::zeros(1, 1, s, s);
    for (px, py, p) in gray.enumerate_pixels() {
        let luma =
            0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32;
        t.set(0, 0, py as usize, px as usize, luma / 255.0);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitPlan {
    Holdout {
        train: Vec<usize>,
        test: Vec<usize>,
        seed: u64,
    },
    KFold { folds: Vec<Vec<usize>>, seed: u64 },
}

fn per_class_shuffled(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    (pos, neg)
}

/// Seeded stratified holdout; per-class train counts are floor(fraction *
/// class_count).
pub fn stratified_holdout(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(DataError::BadFraction(train_fraction));
    }
    let labels = manifest.labels();
    let (pos, neg) = per_class_shuffled(&labels, seed);
    for (label, v) in [(1u8, &pos), (0u8, &neg)] {
        if v.is_empty() {
            return Err(DataError::ClassTooSmall {
                label,
                count: 0,
                needed: 1,
            });
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [&pos, &neg] {
        let n_train = (train_fraction * class.len() as f64).floor() as usize;
        train.extend_from_slice(&class[..n_train]);
        test.extend_from_slice(&class[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan::Holdout { train, test, seed })
}

/// Seeded stratified k-fold: every index lands in exactly one validation
/// fold and each fold's class ratio is within one sample of the global ratio.
pub fn kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitPlan, DataError> {
    assert!(k >= 2, "k must be at least 2");
    let labels = manifest.labels();
    let (pos, neg) = per_class_shuffled(&labels, seed);
    for (label, v) in [(1u8, &pos), (0u8, &neg)] {
        if v.len() < k {
            return Err(DataError::ClassTooSmall {
                label,
                count: v.len(),
                needed: k,
            });
        }
    }
    let mut folds = vec![Vec::new(); k];
    for class in [&pos, &neg] {
        for (i, &idx) in class.iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(SplitPlan::KFold { folds, seed })
}

impl SplitPlan {
    /// (train, validation) index pairs: one pair for a holdout, k pairs for
    /// a k-fold plan.
    pub fn splits(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        match self {
            SplitPlan::Holdout { train, test, .. } => vec![(train.clone(), test.clone())],
            SplitPlan::KFold { folds, .. } => (0..folds.len())
                .map(|i| {
                    let val = folds[i].clone();
                    let mut train: Vec<usize> = folds
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .flat_map(|(_, f)| f.iter().copied())
                        .collect();
                    train.sort_unstable();
                    (train, val)
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic insulator-defect generator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectKind {
    MissingDisc,
    Flashover,
    Fracture,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub damaged_ratio: f64,
    pub image_size: u32,
    pub defect_kinds: Vec<DefectKind>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 600,
            damaged_ratio: 1.0 / 3.0,
            image_size: 80,
            defect_kinds: vec![
                DefectKind::MissingDisc,
                DefectKind::Flashover,
                DefectKind::Fracture,
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefectSidecar {
    pub record_index: usize,
    pub defect_bbox: [u32; 4],
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>, a: f32) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        let p = img.get_pixel(x as u32, y as u32);
        let mix = |old: u8, new: u8| ((1.0 - a) * old as f32 + a * new as f32) as u8;
        img.put_pixel(
            x as u32,
            y as u32,
            Rgb([mix(p.0[0], c.0[0]), mix(p.0[1], c.0[1]), mix(p.0[2], c.0[2])]),
        );
    }
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, base: Rgb<u8>) {
    let r2 = r * r;
    for y in (cy - r).floor() as i64..=(cy + r).ceil() as i64 {
        for x in (cx - r).floor() as i64..=(cx + r).ceil() as i64 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                // simple top-left shading so discs look rounded
                let shade = 1.0 - 0.25 * (d2 / r2) + 0.1 * (-(dx + dy) / r).clamp(-1.0, 1.0);
                let s = shade.clamp(0.5, 1.2);
                let c = Rgb([
                    (base.0[0] as f64 * s).min(255.0) as u8,
                    (base.0[1] as f64 * s).min(255.0) as u8,
                    (base.0[2] as f64 * s).min(255.0) as u8,
                ]);
                put(img, x, y, c);
            }
        }
    }
}

struct RenderedInsulator {
    crop: Bbox,
    defect: Option<Bbox>,
}

fn clamp_bbox(x0: f64, y0: f64, x1: f64, y1: f64, size: u32) -> Bbox {
    let xa = x0.floor().max(0.0) as u32;
    let ya = y0.floor().max(0.0) as u32;
    let xb = (x1.ceil() as u32).min(size - 1).max(xa + 1);
    let yb = (y1.ceil() as u32).min(size - 1).max(ya + 1);
    Bbox {
        x: xa,
        y: ya,
        w: xb - xa,
        h: yb - ya,
    }
}

fn render_insulator(
    img: &mut RgbImage,
    rng: &mut ChaCha8Rng,
    damaged: bool,
    kinds: &[DefectKind],
) -> RenderedInsulator {
    let size = img.width();
    let n_discs = rng.gen_range(4..=5);
    let radius = rng.gen_range(3.5..5.0);
    let spacing = radius * 1.5;
    let length = spacing * (n_discs as f64 - 1.0);
    let vertical = rng.gen_bool(0.5);
    let tilt: f64 = rng.gen_range(-0.12..0.12);
    let margin = radius + 4.5;
    let (cx0, cy0) = (
        rng.gen_range(margin + 2.0..size as f64 - margin - 2.0 - if vertical { 0.0 } else { length }),
        rng.gen_range(margin + 2.0..size as f64 - margin - 2.0 - if vertical { length } else { 0.0 }),
    );
    let (dx, dy) = if vertical {
        (tilt.sin(), tilt.cos())
    } else {
        (tilt.cos(), tilt.sin())
    };

    let ceramic = Rgb([
        rng.gen_range(180..=230),
        rng.gen_range(170..=220),
        rng.gen_range(160..=210),
    ]);

    // central rod
    let rod = Rgb([60, 55, 50]);
    let steps = (length * 2.0) as usize + 1;
    for s in 0..=steps {
        let t = s as f64 / 2.0;
        put(img, (cx0 + dx * t) as i64, (cy0 + dy * t) as i64, rod);
        put(
            img,
            (cx0 + dx * t + dy) as i64,
            (cy0 + dy * t - dx) as i64,
            rod,
        );
    }

    let missing = if damaged && kinds.contains(&DefectKind::MissingDisc) {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        if kind == DefectKind::MissingDisc {
            Some(rng.gen_range(1..n_discs - 1))
        } else {
            None
        }
    } else {
        None
    };

    let mut centers = Vec::new();
    for d in 0..n_discs {
        let t = spacing * d as f64;
        let (cx, cy) = (cx0 + dx * t, cy0 + dy * t);
        centers.push((cx, cy));
        if Some(d) != missing {
            fill_disc(img, cx, cy, radius, ceramic);
        }
    }

    let mut defect = None;
    if let Some(m) = missing {
        let (cx, cy) = centers[m];
        defect = Some(clamp_bbox(
            cx - radius,
            cy - radius,
            cx + radius,
            cy + radius,
            size,
        ));
    } else if damaged {
        // choose between the remaining defect kinds
        let usable: Vec<DefectKind> = kinds
            .iter()
            .copied()
            .filter(|k| *k != DefectKind::MissingDisc)
            .collect();
        let kind = if usable.is_empty() {
            DefectKind::Flashover
        } else {
            usable[rng.gen_range(0..usable.len())]
        };
        let d = rng.gen_range(0..n_discs);
        let (cx, cy) = centers[d];
        match kind {
            DefectKind::Flashover => {
                // dark scorch blotch across a disc
                let br = radius * rng.gen_range(0.7..1.0);
                let scorch = Rgb([75, 28, 16]);
                for _ in 0..((br * br * 6.0) as usize) {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let rr = br * rng.gen_range(0.0f64..1.0).sqrt();
                    blend(
                        img,
                        (cx + a.cos() * rr) as i64,
                        (cy + a.sin() * rr) as i64,
                        scorch,
                        0.85,
                    );
                }
                defect = Some(clamp_bbox(cx - br, cy - br, cx + br, cy + br, size));
            }
            DefectKind::Fracture => {
                // dark crack across one or two discs
                let along: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let len = radius * rng.gen_range(1.5..2.2);
                let dark = Rgb([42, 16, 12]);
                for s in 0..(len * 2.0) as usize {
                    let t = s as f64 / 2.0 - len / 2.0;
                    let (px, py) = (cx + along.cos() * t, cy + along.sin() * t);
                    put(img, px as i64, py as i64, dark);
                    put(img, px as i64 + 1, py as i64, dark);
                }
                let half = len / 2.0 + 1.0;
                defect = Some(clamp_bbox(cx - half, cy - half, cx + half, cy + half, size));
            }
            DefectKind::MissingDisc => unreachable!(),
        }
    }

    // Background clutter, drawn for both classes: dark marks in the band
    // between the discs and the crop edge. The clutter palette matches the
    // defect palette in luma (so grayscale statistics no longer separate the
    // labels) but differs in hue, which only the RGB pipeline can exploit.
    let scorch = Rgb([20, 45, 35]);
    let dark = Rgb([10, 28, 25]);
    for _ in 0..rng.gen_range(2..=4) {
        let br: f64 = rng.gen_range(1.2..2.0);
        let t = rng.gen_range(-1.0..length + 1.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let off = side * rng.gen_range(radius + br + 0.6..margin - 0.3);
        // (dy, -dx) is the unit normal to the rod axis
        let (bx, by) = (cx0 + dx * t + dy * off, cy0 + dy * t - dx * off);
        for _ in 0..((br * br * 6.0) as usize) {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rr = br * rng.gen_range(0.0f64..1.0).sqrt();
            blend(
                img,
                (bx + a.cos() * rr) as i64,
                (by + a.sin() * rr) as i64,
                scorch,
                0.85,
            );
        }
    }
    for _ in 0..rng.gen_range(1..=2) {
        let t = rng.gen_range(0.0..length.max(1.0));
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let off = side * rng.gen_range(radius + 1.5..margin - 0.5);
        let (sx, sy) = (cx0 + dx * t + dy * off, cy0 + dy * t - dx * off);
        // roughly parallel to the rod so the streak stays clear of the discs
        let jitter: f64 = rng.gen_range(-0.2..0.2);
        let (ux, uy) = (dx * jitter.cos() - dy * jitter.sin(), dy * jitter.cos() + dx * jitter.sin());
        let len = radius * rng.gen_range(1.5..2.2);
        for s in 0..(len * 2.0) as usize {
            let tt = s as f64 / 2.0 - len / 2.0;
            put(img, (sx + ux * tt) as i64, (sy + uy * tt) as i64, dark);
            put(img, (sx + ux * tt) as i64 + 1, (sy + uy * tt) as i64, dark);
        }
    }

    // crop bbox: insulator extent plus margin, clamped inside the image
    let xs: Vec<f64> = centers.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = centers.iter().map(|c| c.1).collect();
    let minx = xs.iter().cloned().fold(f64::MAX, f64::min) - margin;
    let maxx = xs.iter().cloned().fold(f64::MIN, f64::max) + margin;
    let miny = ys.iter().cloned().fold(f64::MAX, f64::min) - margin;
    let maxy = ys.iter().cloned().fold(f64::MIN, f64::max) + margin;
    let mut crop = clamp_bbox(minx, miny, maxx, maxy, size);

    // make sure the defect stays inside the crop
    if let Some(d) = defect {
        let x0 = crop.x.min(d.x);
        let y0 = crop.y.min(d.y);
        let x1 = (crop.x + crop.w).max(d.x + d.w);
        let y1 = (crop.y + crop.h).max(d.y + d.h);
        crop = Bbox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        };
    }
    RenderedInsulator { crop, defect }
}

/// Deterministically generate a synthetic dataset under `out_dir` and return
/// the manifest path. Reruns with the same seed produce byte-identical files.
pub fn synth_dataset(
    config: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, DataError> {
    let img_dir = out_dir.join("imgs");
    std::fs::create_dir_all(&img_dir)?;
    let n_damaged = (config.n_images as f64 * config.damaged_ratio).round() as usize;
    let mut manifest_text = String::from("image_path,x,y,w,h,label\n");
    let mut sidecar_text = String::new();
    for i in 0..config.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let damaged = i < n_damaged;
        let size = config.image_size;
        let mut img = RgbImage::new(size, size);
        // noisy outdoor-ish background
        let base = (
            rng.gen_range(90..140) as f32,
            rng.gen_range(100..150) as f32,
            rng.gen_range(90..140) as f32,
        );
        for p in img.pixels_mut() {
            let n: f32 = rng.gen_range(-18.0..18.0);
            *p = Rgb([
                (base.0 + n).clamp(0.0, 255.0) as u8,
                (base.1 + n).clamp(0.0, 255.0) as u8,
                (base.2 + n).clamp(0.0, 255.0) as u8,
            ]);
        }
        let rendered = render_insulator(&mut img, &mut rng, damaged, &config.defect_kinds);
        let name = format!("img_{i:05}.png");
        img.save(img_dir.join(&name))
            .map_err(|e| DataError::Image(e.to_string()))?;
        let b = rendered.crop;
        manifest_text.push_str(&format!(
            "imgs/{name},{},{},{},{},{}\n",
            b.x,
            b.y,
            b.w,
            b.h,
            u8::from(damaged)
        ));
        if let Some(d) = rendered.defect {
            let sc = DefectSidecar {
                record_index: i,
                defect_bbox: [d.x, d.y, d.w, d.h],
            };
            sidecar_text.push_str(&serde_json::to_string(&sc).unwrap());
            sidecar_text.push('\n');
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest_text)?;
    std::fs::write(out_dir.join("defects.jsonl"), sidecar_text)?;
    Ok(manifest_path)
}

pub fn load_sidecar(path: &Path) -> Result<Vec<DefectSidecar>, DataError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| DataError::Parse {
                line: 0,
                msg: e.to_string(),
            })
        })
        .collect()
}
