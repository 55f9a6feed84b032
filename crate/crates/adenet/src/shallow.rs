//! Handcrafted-feature baseline: multi-scale histograms, Chebyshev
//! statistics and Radon projections feeding a from-scratch random forest.

use image::RgbImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Bump whenever the feature list, ordering, or any binning rule changes.
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_COUNT: usize = 68;

const HIST_BINS: usize = 8;
const CHEB_ORDER: usize = 20;
const CHEB_BINS: usize = 32;
const RADON_BINS: usize = 3;
const RADON_ANGLES: [&str; 4] = ["000", "045", "090", "135"];

#[derive(Debug, Error)]
pub enum ShallowError {
    #[error("crop {0}x{1} is degenerate; need at least 2x2")]
    DegenerateCrop(u32, u32),
    #[error("feature length {got} does not match model dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Names for every slot of the 68-value vector, in emission order.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    for scale in ["s1", "s2", "s4"] {
        for b in 0..HIST_BINS {
            names.push(format!("hist_{scale}_b{b}"));
        }
    }
    for b in 0..CHEB_BINS {
        names.push(format!("cheb_b{b}"));
    }
    for a in RADON_ANGLES {
        for b in 0..RADON_BINS {
            names.push(format!("radon_{a}_b{b}"));
        }
    }
    names
}

fn to_gray(img: &RgbImage) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut g = Vec::with_capacity(w * h);
    for p in img.pixels() {
        g.push(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64);
    }
    (g, h, w)
}

/// Box-filter 2x downscale (trailing odd row/column averaged into the last cell).
fn halve(g: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let nh = (h / 2).max(1);
    let nw = (w / 2).max(1);
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            let mut s = 0.0;
            let mut cnt = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (yy, xx) = (2 * y + dy, 2 * x + dx);
                    if yy < h && xx < w {
                        s += g[yy * w + xx];
                        cnt += 1.0;
                    }
                }
            }
            out[y * nw + x] = s / cnt;
        }
    }
    (out, nh, nw)
}

fn gray_histogram(g: &[f64], bins: usize) -> Vec<f32> {
    let mut hist = vec![0.0f32; bins];
    for &v in g {
        let b = ((v / 256.0 * bins as f64) as usize).min(bins - 1);
        hist[b] += 1.0;
    }
    let total = g.len() as f32;
    for v in hist.iter_mut() {
        *v /= total;
    }
    hist
}

/// Histogram over an arbitrary-ranged slice: `bins` equal-width bins spanning
/// [min, max]; a constant slice puts all mass in bin 0.
fn range_histogram(vals: &[f64], bins: usize) -> Vec<f32> {
    let mut hist = vec![0.0f32; bins];
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for &v in vals {
        let b = if span > 0.0 {
            (((v - lo) / span) * bins as f64).min(bins as f64 - 1.0) as usize
        } else {
            0
        };
        hist[b] += 1.0;
    }
    let total = vals.len() as f32;
    for v in hist.iter_mut() {
        *v /= total;
    }
    hist
}

/// Chebyshev polynomial T_p(x) by recurrence.
fn cheb_t(p: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    match p {
        0 => 1.0,
        1 => x,
        _ => {
            for _ in 2..=p {
                let c = 2.0 * x * b - a;
                a = b;
                b = c;
            }
            b
        }
    }
}

/// Bilinear sample of the grayscale image at (u, v) in [-1, 1]^2.
fn sample_unit(g: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let fx = ((u + 1.0) / 2.0) * (w - 1) as f64;
    let fy = ((v + 1.0) / 2.0) * (h - 1) as f64;
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let top = g[y0 * w + x0] * (1.0 - tx) + g[y0 * w + x1] * tx;
    let bot = g[y1 * w + x0] * (1.0 - tx) + g[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// 2-D Chebyshev coefficients a_pq for p,q < CHEB_ORDER, computed at the
/// Gauss-Chebyshev nodes where the discrete orthogonality relation is exact,
/// so a constant image yields a nonzero (0,0) coefficient only.
pub fn chebyshev_coefficients(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let m = CHEB_ORDER;
    let nodes: Vec<f64> = (0..m)
        .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / m as f64).cos())
        .collect();
    // f sampled on the node grid
    let mut f = vec![0.0; m * m];
    for (j, &v) in nodes.iter().enumerate() {
        for (i, &u) in nodes.iter().enumerate() {
            f[j * m + i] = sample_unit(g, h, w, u, v);
        }
    }
    // cache T_p at every node
    let mut t = vec![0.0; m * m];
    for p in 0..m {
        for (i, &x) in nodes.iter().enumerate() {
            t[p * m + i] = cheb_t(p, x);
        }
    }
    let mut coeffs = vec![0.0; m * m];
    for p in 0..m {
        let cp = if p == 0 { 1.0 } else { 2.0 };
        for q in 0..m {
            let cq = if q == 0 { 1.0 } else { 2.0 };
            let mut s = 0.0;
            for j in 0..m {
                for i in 0..m {
                    s += f[j * m + i] * t[p * m + i] * t[q * m + j];
                }
            }
            coeffs[p * m + q] = cp * cq * s / (m * m) as f64;
        }
    }
    coeffs
}

/// Radon-style line sums at one of the four supported angles.
fn radon_projection(g: &[f64], h: usize, w: usize, angle: &str) -> Vec<f64> {
    match angle {
        "000" => (0..w)
            .map(|x| (0..h).map(|y| g[y * w + x]).sum())
            .collect(),
        "090" => (0..h)
            .map(|y| (0..w).map(|x| g[y * w + x]).sum())
            .collect(),
        "045" => {
            // lines of constant x + y
            let mut p = vec![0.0; h + w - 1];
            for y in 0..h {
                for x in 0..w {
                    p[x + y] += g[y * w + x];
                }
            }
            p
        }
        "135" => {
            // lines of constant x - y
            let mut p = vec![0.0; h + w - 1];
            for y in 0..h {
                for x in 0..w {
                    p[x + (h - 1) - y] += g[y * w + x];
                }
            }
            p
        }
        _ => unreachable!(),
    }
}

/// Deterministic 68-value descriptor: 3 scales x 8 gray-histogram bins,
/// a 32-bin histogram of the 2-D Chebyshev coefficients, and 3-bin summaries
/// of 4 Radon projections.
pub fn extract_features(img: &RgbImage) -> Result<Vec<f32>, ShallowError> {
    if img.width() < 2 || img.height() < 2 {
        return Err(ShallowError::DegenerateCrop(img.width(), img.height()));
    }
    let (g, h, w) = to_gray(img);
    let mut out = Vec::with_capacity(FEATURE_COUNT);

    out.extend(gray_histogram(&g, HIST_BINS));
    let (g2, h2, w2) = halve(&g, h, w);
    out.extend(gray_histogram(&g2, HIST_BINS));
    let (g4, _, _) = halve(&g2, h2, w2);
    out.extend(gray_histogram(&g4, HIST_BINS));

    out.extend(range_histogram(&chebyshev_coefficients(&g, h, w), CHEB_BINS));

    for angle in RADON_ANGLES {
        out.extend(range_histogram(&radon_projection(&g, h, w, angle), RADON_BINS));
    }
    debug_assert_eq!(out.len(), FEATURE_COUNT);
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Ok(out)
}

/// Parallel feature extraction; output order matches input order.
pub fn extract_features_batch(crops: &[RgbImage]) -> Result<Vec<Vec<f32>>, ShallowError> {
    crops.par_iter().map(extract_features).collect()
}

/// Write a feature cache CSV with one named column per feature plus a label.
pub fn write_feature_cache(
    path: &Path,
    rows: &[Vec<f32>],
    labels: &[u8],
) -> Result<(), ShallowError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "label,{}", feature_names().join(","))?;
    for (row, lab) in rows.iter().zip(labels) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{lab},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<(Vec<Vec<f32>>, Vec<u8>), ShallowError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| ShallowError::Cache("empty feature cache".into()))??;
    let expect = format!("label,{}", feature_names().join(","));
    if header != expect {
        return Err(ShallowError::Cache(
            "feature cache header does not match the current feature version".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for line in lines {
        let line = line?;
        let mut cells = line.split(',');
        let lab: u8 = cells
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| ShallowError::Cache("bad label cell".into()))?;
        let row: Result<Vec<f32>, _> = cells.map(|c| c.parse::<f32>()).collect();
        let row = row.map_err(|e| ShallowError::Cache(format!("bad feature cell: {e}")))?;
        if row.len() != FEATURE_COUNT {
            return Err(ShallowError::Cache(format!(
                "expected {FEATURE_COUNT} features, got {}",
                row.len()
            )));
        }
        labels.push(lab);
        rows.push(row);
    }
    Ok((rows, labels))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        counts: [usize; 2],
    },
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    /// 0 means the default ceil(sqrt(d)).
    pub features_per_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 1,
            bootstrap: true,
            features_per_split: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestModel {
    pub feature_version: u32,
    pub dimension: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f32>],
    y: &'a [u8],
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut c = [0usize; 2];
        for &i in idx {
            c[self.y[i] as usize] += 1;
        }
        c
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.counts(idx);
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            self.nodes.push(TreeNode::Leaf { counts });
            return self.nodes.len() - 1;
        }

        let d = self.x[0].len();
        let feats = sample(rng, d, self.mtry.min(d));
        let parent_gini = gini(counts);
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f32)> = None;
        for feature in feats.iter() {
            idx.sort_by(|&a, &b| {
                self.x[a][feature]
                    .partial_cmp(&self.x[b][feature])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut left = [0usize; 2];
            let mut right = counts;
            for cut in 1..idx.len() {
                let moved = self.y[idx[cut - 1]] as usize;
                left[moved] += 1;
                right[moved] -= 1;
                let (lo, hi) = (self.x[idx[cut - 1]][feature], self.x[idx[cut]][feature]);
                if lo == hi {
                    continue;
                }
                let (nl, nr) = (cut, idx.len() - cut);
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let decrease = parent_gini
                    - (nl as f64 * gini(left) + nr as f64 * gini(right)) / n;
                if decrease > best.map_or(1e-12, |b| b.0) {
                    best = Some((decrease, feature, (lo + hi) / 2.0));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            self.nodes.push(TreeNode::Leaf { counts });
            return self.nodes.len() - 1;
        };
        let (mut li, mut ri): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { counts }); // placeholder
        let left = self.grow(&mut li, depth + 1, rng);
        let right = self.grow(&mut ri, depth + 1, rng);
        self.nodes[slot] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Train a random forest with per-tree derived seeds; the result is
/// deterministic for a fixed seed regardless of worker-thread count.
pub fn train_forest(
    x: &[Vec<f32>],
    y: &[u8],
    config: &ForestConfig,
) -> Result<ForestModel, ShallowError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(ShallowError::EmptyTrainingSet);
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(ShallowError::DimensionMismatch {
                got: row.len(),
                want: d,
            });
        }
    }
    let mtry = if config.features_per_split > 0 {
        config.features_per_split
    } else {
        (d as f64).sqrt().ceil() as usize
    };

    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut idx: Vec<usize> = if config.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            let mut builder = TreeBuilder {
                x,
                y,
                mtry,
                max_depth: config.max_depth,
                min_leaf: config.min_leaf.max(1),
                nodes: Vec::new(),
            };
            builder.grow(&mut idx, 0, &mut rng);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(ForestModel {
        feature_version: FEATURE_VERSION,
        dimension: d,
        config: config.clone(),
        trees,
    })
}

fn tree_vote(tree: &Tree, feats: &[f32]) -> u8 {
    // the root always occupies slot 0
    let mut at = 0;
    loop {
        match &tree.nodes[at] {
            TreeNode::Leaf { counts } => {
                // leaf majority; ties predict undamaged
                return u8::from(counts[1] > counts[0]);
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                at = if feats[*feature] <= *threshold {
                    *left
                } else {
                    *right
                };
            }
        }
    }
}

/// Returns (label, score). Score is the fraction of trees voting damaged;
/// the label is damaged only when the score strictly exceeds one half, so an
/// exact tie predicts undamaged.
pub fn forest_predict(model: &ForestModel, feats: &[f32]) -> Result<(u8, f64), ShallowError> {
    if feats.len() != model.dimension {
        return Err(ShallowError::DimensionMismatch {
            got: feats.len(),
            want: model.dimension,
        });
    }
    let votes: usize = model
        .trees
        .iter()
        .map(|t| tree_vote(t, feats) as usize)
        .sum();
    let score = votes as f64 / model.trees.len() as f64;
    Ok((u8::from(score > 0.5), score))
}

pub fn save_forest(model: &ForestModel, path: &Path) -> Result<(), ShallowError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, model)?;
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<ForestModel, ShallowError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn random_img(h: u32, w: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| {
            Rgb([rng.gen(), rng.gen(), rng.gen()])
        })
    }

    #[test]
    fn names_match_vector_length() {
        assert_eq!(feature_names().len(), FEATURE_COUNT);
        let v = extract_features(&random_img(24, 20, 1)).unwrap();
        assert_eq!(v.len(), FEATURE_COUNT);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = random_img(30, 22, 2);
        assert_eq!(
            extract_features(&img).unwrap(),
            extract_features(&img).unwrap()
        );
    }

    #[test]
    fn constant_image_concentrates_every_histogram() {
        let img = RgbImage::from_pixel(16, 16, Rgb([120, 120, 120]));
        let v = extract_features(&img).unwrap();
        // three gray histograms: all mass in the bin holding 120
        for s in 0..3 {
            let h = &v[s * 8..(s + 1) * 8];
            assert_eq!(h[3], 1.0, "scale {s}: {h:?}");
            assert_eq!(h.iter().sum::<f32>(), 1.0);
        }
        // axis-aligned radon projections are constant and collapse into bin 0
        // (diagonal ones vary with line length even for a flat image)
        for a in [0usize, 2] {
            let h = &v[56 + a * 3..56 + (a + 1) * 3];
            assert_eq!(h, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn constant_image_has_single_chebyshev_coefficient() {
        let img = RgbImage::from_pixel(12, 18, Rgb([200, 10, 30]));
        let (g, h, w) = to_gray(&img);
        let coeffs = chebyshev_coefficients(&g, h, w);
        let gray = 0.299 * 200.0 + 0.587 * 10.0 + 0.114 * 30.0;
        assert!((coeffs[0] - gray).abs() < 1e-9);
        for (i, c) in coeffs.iter().enumerate().skip(1) {
            assert!(c.abs() < 1e-9, "coeff {i} = {c}");
        }
    }

    #[test]
    fn chebyshev_matches_bruteforce_projection() {
        let img = random_img(16, 16, 3);
        let (g, h, w) = to_gray(&img);
        let coeffs = chebyshev_coefficients(&g, h, w);
        let m = CHEB_ORDER;
        let nodes: Vec<f64> = (0..m)
            .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / m as f64).cos())
            .collect();
        for &(p, q) in &[(0usize, 0usize), (1, 0), (3, 2), (7, 7), (19, 4)] {
            let cp = if p == 0 { 1.0 } else { 2.0 };
            let cq = if q == 0 { 1.0 } else { 2.0 };
            let mut s = 0.0;
            for &yv in &nodes {
                for &xv in &nodes {
                    s += sample_unit(&g, h, w, xv, yv) * cheb_t(p, xv) * cheb_t(q, yv);
                }
            }
            let oracle = cp * cq * s / (m * m) as f64;
            assert!(
                (coeffs[p * m + q] - oracle).abs() < 1e-6,
                "({p},{q}): {} vs {oracle}",
                coeffs[p * m + q]
            );
        }
    }

    #[test]
    fn radon_projections_sum_to_image_total() {
        let img = random_img(9, 13, 4);
        let (g, h, w) = to_gray(&img);
        let total: f64 = g.iter().sum();
        for a in RADON_ANGLES {
            let p = radon_projection(&g, h, w, a);
            assert!((p.iter().sum::<f64>() - total).abs() < 1e-6, "angle {a}");
        }
    }

    #[test]
    fn single_pixel_crop_rejected() {
        let img = RgbImage::new(1, 1);
        assert!(matches!(
            extract_features(&img),
            Err(ShallowError::DegenerateCrop(1, 1))
        ));
    }

    fn xor_data(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f32 = rng.gen_range(-1.0..1.0);
            let b: f32 = rng.gen_range(-1.0..1.0);
            x.push(vec![a, b]);
            y.push(u8::from((a > 0.0) != (b > 0.0)));
        }
        (x, y)
    }

    #[test]
    fn forest_learns_xor() {
        let (x, y) = xor_data(200, 5);
        let cfg = ForestConfig {
            n_trees: 100,
            max_depth: 5,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, yi)| forest_predict(&model, xi).unwrap().0 == **yi)
            .count();
        assert!(correct as f64 / x.len() as f64 >= 0.95, "{correct}/200");
    }

    #[test]
    fn stump_threshold_sits_between_class_extremes() {
        let x: Vec<Vec<f32>> = [0.1f32, 0.2, 0.3, 0.9, 1.1, 1.4]
            .iter()
            .map(|v| vec![*v])
            .collect();
        let y = vec![0, 0, 0, 1, 1, 1];
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            bootstrap: false,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        let TreeNode::Split { threshold, .. } = model.trees[0].nodes[0] else {
            panic!("expected a split at the root");
        };
        assert!(threshold > 0.3 && threshold < 0.9, "threshold {threshold}");
    }

    #[test]
    fn single_class_data_yields_constant_forest() {
        let x = vec![vec![1.0f32, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let y = vec![1, 1, 1];
        let model = train_forest(&x, &y, &ForestConfig::default()).unwrap();
        let (label, score) = forest_predict(&model, &[0.0, 0.0]).unwrap();
        assert_eq!((label, score), (1, 1.0));
    }

    #[test]
    fn identical_trees_without_randomness_vote_unanimously() {
        let (x, y) = xor_data(80, 6);
        let cfg = ForestConfig {
            n_trees: 7,
            bootstrap: false,
            features_per_split: 2,
            max_depth: 6,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        for xi in &x {
            let (_, score) = forest_predict(&model, xi).unwrap();
            assert!(score == 0.0 || score == 1.0, "score {score}");
        }
    }

    #[test]
    fn score_is_vote_fraction() {
        let (x, y) = xor_data(100, 7);
        let cfg = ForestConfig {
            n_trees: 9,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        let (_, score) = forest_predict(&model, &x[0]).unwrap();
        let scaled = score * 9.0;
        assert!((scaled - scaled.round()).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = xor_data(120, 8);
        let cfg = ForestConfig::default();
        let a = train_forest(&x, &y, &cfg).unwrap();
        let b = train_forest(&x, &y, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (x, y) = xor_data(50, 9);
        let model = train_forest(&x, &y, &ForestConfig::default()).unwrap();
        assert!(forest_predict(&model, &[1.0, 2.0, 3.0]).is_err());
        assert!(train_forest(&[], &[], &ForestConfig::default()).is_err());
    }

    #[test]
    fn forest_json_roundtrip() {
        let (x, y) = xor_data(60, 10);
        let cfg = ForestConfig {
            n_trees: 5,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        save_forest(&model, &path).unwrap();
        let back = load_forest(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&model).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }

    #[test]
    fn feature_cache_roundtrip_and_version_check() {
        let rows = vec![
            extract_features(&random_img(16, 16, 11)).unwrap(),
            extract_features(&random_img(20, 14, 12)).unwrap(),
        ];
        let labels = vec![0u8, 1];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        write_feature_cache(&path, &rows, &labels).unwrap();
        let (rback, lback) = read_feature_cache(&path).unwrap();
        assert_eq!(lback, labels);
        for (a, b) in rows.iter().zip(&rback) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        // corrupt the header -> version error
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("hist_s1_b0", "hist_v0_b0", 1)).unwrap();
        assert!(read_feature_cache(&path).is_err());
    }

    #[test]
    fn trees_beat_majority_on_their_own_sample() {
        let (x, y) = xor_data(150, 13);
        let cfg = ForestConfig {
            n_trees: 20,
            bootstrap: false,
            ..Default::default()
        };
        let model = train_forest(&x, &y, &cfg).unwrap();
        let majority = y.iter().filter(|&&v| v == 0).count().max(
            y.iter().filter(|&&v| v == 1).count(),
        );
        for tree in &model.trees {
            let correct = x
                .iter()
                .zip(&y)
                .filter(|(xi, yi)| tree_vote(tree, xi) == **yi)
                .count();
            assert!(correct >= majority, "{correct} < {majority}");
        }
    }
}
