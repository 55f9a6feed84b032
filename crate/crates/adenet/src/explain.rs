//! Grad-CAM heatmaps, overlay rendering, and a localization score against
//! ground-truth defect boxes.

#![allow(clippy::needless_range_loop)]

use image::{Rgb, RgbImage};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::model::{gradcam_capture_index, ModelGraph};
use crate::nn::NnError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("model has no convolutional layer to attach to")]
    NoConvLayer,
    #[error("target class {0} out of range (model has {1} classes)")]
    ClassOutOfRange(usize, usize),
    #[error("crop {0}x{1} is too small for grad-cam (need at least 8x8)")]
    CropTooSmall(usize, usize),
    #[error("heatmap size {hm_w}x{hm_h} does not match crop {crop_w}x{crop_h}")]
    SizeMismatch {
        hm_w: usize,
        hm_h: usize,
        crop_w: usize,
        crop_h: usize,
    },
    #[error("degenerate bbox (zero area or outside the heatmap)")]
    DegenerateBbox,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Bilinear,
    /// Exact-cell debugging mode: each output pixel copies its source cell.
    Nearest,
}

/// A Grad-CAM attention map. `raw` is at the captured layer's resolution,
/// `up` is interpolated to the crop's resolution. All values lie in [0,1];
/// the max is 1 unless the raw map is identically zero.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub raw: Vec<f32>,
    pub raw_h: usize,
    pub raw_w: usize,
    pub up: Vec<f32>,
    pub up_h: usize,
    pub up_w: usize,
    pub model: String,
    pub target_class: usize,
}

/// Grad-CAM against the last conv block: capture the post-ReLU activation
/// feeding the final pooling stage, backprop the target logit to it, weight
/// each channel by its mean gradient, and ReLU the weighted sum.
pub fn gradcam(
    model: &ModelGraph,
    crop: &Tensor<f32>,
    target_class: usize,
    upsample: Upsample,
) -> Result<Heatmap, ExplainError> {
    if crop.h < 8 || crop.w < 8 {
        return Err(ExplainError::CropTooSmall(crop.h, crop.w));
    }
    if target_class >= model.class_count {
        return Err(ExplainError::ClassOutOfRange(
            target_class,
            model.class_count,
        ));
    }
    let capture = gradcam_capture_index(model).ok_or(ExplainError::NoConvLayer)?;

    let (acts, ctxs) = model.forward_trace(crop)?;
    let logits = acts.last().expect("trace always has the input");

    // Seed with d(target logit)/d(logits) and pull it back to the capture
    // point layer by layer.
    let mut dy = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    for n in 0..logits.n {
        dy.data[n * logits.c + target_class] = 1.0;
    }
    for i in (capture + 1..model.layers.len()).rev() {
        let (dx, _) = ModelGraph::layer_vjp(&model.layers[i], &ctxs[i], &dy)?;
        dy = dx;
    }

    let a = &acts[capture + 1];
    debug_assert_eq!(dy.shape(), a.shape());
    let (rh, rw) = (a.h, a.w);
    let plane = rh * rw;
    let mut raw = vec![0.0f32; plane];
    for c in 0..a.c {
        let base = a.idx(0, c, 0, 0);
        let mut wsum = 0.0f32;
        for k in 0..plane {
            wsum += dy.data[base + k];
        }
        let wk = wsum / plane as f32;
        for k in 0..plane {
            raw[k] += wk * a.data[base + k];
        }
    }
    for v in raw.iter_mut() {
        *v = v.max(0.0);
    }
    let peak = raw.iter().cloned().fold(0.0f32, f32::max);
    if peak > 0.0 {
        for v in raw.iter_mut() {
            *v /= peak;
        }
    }

    let up = match upsample {
        Upsample::Bilinear => bilinear_resize(&raw, rh, rw, crop.h, crop.w),
        Upsample::Nearest => nearest_resize(&raw, rh, rw, crop.h, crop.w),
    };
    Ok(Heatmap {
        raw,
        raw_h: rh,
        raw_w: rw,
        up,
        up_h: crop.h,
        up_w: crop.w,
        model: model.name.clone(),
        target_class,
    })
}

fn bilinear_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let sy = sh as f32 / dh as f32;
    let sx = sw as f32 / dw as f32;
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn nearest_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    for y in 0..dh {
        let sy = (y * sh) / dh;
        for x in 0..dw {
            let sx = (x * sw) / dw;
            out[y * dw + x] = src[sy * sw + sx];
        }
    }
    out
}

/// Jet-style colormap: 0 maps to deep blue, 1 to deep red.
pub fn jet(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let seg = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let r = seg(1.5 - (4.0 * v - 3.0).abs());
    let g = seg(1.5 - (4.0 * v - 2.0).abs());
    let b = seg(1.5 - (4.0 * v - 1.0).abs());
    Rgb([r, g, b])
}

/// Alpha-blend the upsampled heatmap over the crop and write a PNG with the
/// crop's dimensions. `alpha = 0` reproduces the crop exactly.
pub fn overlay(
    heatmap: &Heatmap,
    crop: &RgbImage,
    alpha: f32,
    out_path: &Path,
) -> Result<(), ExplainError> {
    let (cw, ch) = (crop.width() as usize, crop.height() as usize);
    if heatmap.up_w != cw || heatmap.up_h != ch {
        return Err(ExplainError::SizeMismatch {
            hm_w: heatmap.up_w,
            hm_h: heatmap.up_h,
            crop_w: cw,
            crop_h: ch,
        });
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let mut out = RgbImage::new(crop.width(), crop.height());
    for y in 0..ch {
        for x in 0..cw {
            let c = crop.get_pixel(x as u32, y as u32);
            let m = jet(heatmap.up[y * cw + x]);
            let mut px = [0u8; 3];
            for i in 0..3 {
                px[i] = ((1.0 - alpha) * c[i] as f32 + alpha * m[i] as f32).round() as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out.save(out_path)?;
    Ok(())
}

/// Enrichment of top-decile attention inside a defect box, in heatmap pixel
/// coordinates: (fraction of the top decile inside the box) / (box area
/// fraction). Pixels tied at the decile cutoff contribute pro-rata, so a
/// uniform map scores exactly 1 (chance level).
pub fn localization_score(
    heatmap: &Heatmap,
    bx: usize,
    by: usize,
    bw: usize,
    bh: usize,
) -> Result<f64, ExplainError> {
    let (h, w) = (heatmap.up_h, heatmap.up_w);
    if bw == 0 || bh == 0 || bx + bw > w || by + bh > h {
        return Err(ExplainError::DegenerateBbox);
    }
    let n = h * w;
    let k = ((n as f64) * 0.1).ceil() as usize;
    let k = k.max(1);

    let mut vals: Vec<f32> = heatmap.up.clone();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cutoff = vals[k - 1];

    let inside = |i: usize| {
        let (y, x) = (i / w, i % w);
        x >= bx && x < bx + bw && y >= by && y < by + bh
    };
    let mut above = 0usize;
    let mut above_in = 0usize;
    let mut ties = 0usize;
    let mut ties_in = 0usize;
    for (i, &v) in heatmap.up.iter().enumerate() {
        if v > cutoff {
            above += 1;
            if inside(i) {
                above_in += 1;
            }
        } else if v == cutoff {
            ties += 1;
            if inside(i) {
                ties_in += 1;
            }
        }
    }
    let tie_weight = if ties > 0 {
        (k - above) as f64 / ties as f64
    } else {
        0.0
    };
    let frac_in = (above_in as f64 + tie_weight * ties_in as f64) / k as f64;
    let area_frac = (bw * bh) as f64 / n as f64;
    Ok(frac_in / area_frac)
}

/// Emit the raw (capture-resolution) heatmap as a CSV grid.
pub fn heatmap_csv(heatmap: &Heatmap, out: &mut dyn Write) -> Result<(), ExplainError> {
    for y in 0..heatmap.raw_h {
        let row: Vec<String> = (0..heatmap.raw_w)
            .map(|x| format!("{}", heatmap.raw[y * heatmap.raw_w + x]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
