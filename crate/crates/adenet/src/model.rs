//! Model graphs: the AdeNet and LeNet-5 builders, parameter accounting,
//! end-to-end forward/backward execution, and checkpoint serialization.
//!
//! AdeNet is reconstructed from its published parameter counts: 448
//! non-trainable parameters force batch-norm channels 32/64/128 (2*(32+64+128)
//! running stats), and the remaining trainable budget forces a 64-unit hidden
//! dense layer behind a global average pool. See README for the derivation.

use crate::nn::{self, BnMode, ConvParams, NnError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvParams<f32>),
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
        momentum: f32,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    Dense {
        w: Vec<f32>,
        b: Vec<f32>,
        d: usize,
        k: usize,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(p) => {
                if p.pad > 0 {
                    "conv3x3-same"
                } else {
                    "conv5x5-valid"
                }
            }
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::AvgPool2 => "avgpool2",
            Layer::GlobalAvgPool => "global-avg-pool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }
}

pub enum LayerContext {
    Conv(nn::ConvCtx<f32>),
    Bn(nn::BnCtx<f32>, BnMode),
    Relu(nn::ReluCtx<f32>),
    MaxPool(nn::MaxPoolCtx),
    AvgPool(nn::AvgPoolCtx),
    Gap(nn::GapCtx),
    Flatten((usize, usize, usize, usize)),
    Dense(nn::DenseCtx<f32>),
}

#[derive(Clone, Debug)]
pub enum LayerGrads {
    Conv { dw: Vec<f32>, db: Vec<f32> },
    Bn { dgamma: Vec<f32>, dbeta: Vec<f32> },
    Dense { dw: Vec<f32>, db: Vec<f32> },
}

pub struct ForwardPass {
    pub probs: Tensor<f32>,
    pub logits: Tensor<f32>,
    /// Present only in train mode.
    pub contexts: Option<Vec<LayerContext>>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub name: String,
    pub in_channels: usize,
    pub class_count: usize,
    pub seed: u64,
    pub mode: Mode,
    pub layers: Vec<Layer>,
}

fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos() * std) as f32);
        if out.len() < n {
            out.push((r * theta.sin() * std) as f32);
        }
    }
    out
}

fn conv_layer(rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize, pad: usize) -> Layer {
    let mut p = ConvParams::zeros(co, ci, k, pad);
    p.weight = he_normal(rng, co * ci * k * k, ci * k * k);
    Layer::Conv(p)
}

fn bn_layer(c: usize) -> Layer {
    Layer::BatchNorm {
        gamma: vec![1.0; c],
        beta: vec![0.0; c],
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
        eps: BN_EPS,
        momentum: BN_MOMENTUM,
    }
}

fn dense_layer(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Layer {
    Layer::Dense {
        w: he_normal(rng, d * k, d),
        b: vec![0.0; k],
        d,
        k,
    }
}

/// Three conv blocks (32/64/128 channels, 3x3 same-pad), each followed by
/// BN, ReLU and 2x2 max pool, then GAP, dense 128->64, ReLU, dense 64->2.
pub fn build_adenet(in_channels: usize, with_batchnorm: bool, seed: u64) -> ModelGraph {
    assert!(in_channels >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut ci = in_channels;
    for co in [32usize, 64, 128] {
        layers.push(conv_layer(&mut rng, ci, co, 3, 1));
        if with_batchnorm {
            layers.push(bn_layer(co));
        }
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        ci = co;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(dense_layer(&mut rng, 128, 64));
    layers.push(Layer::Relu);
    layers.push(dense_layer(&mut rng, 64, 2));
    ModelGraph {
        name: if with_batchnorm {
            "adenet".into()
        } else {
            "adenet-nobn".into()
        },
        in_channels,
        class_count: 2,
        seed,
        mode: Mode::Infer,
        layers,
    }
}

/// Classic LeNet-5 stack on 32x32 single-channel input, adapted to 2 output
/// classes and ReLU activations.
pub fn build_lenet5(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv_layer(&mut rng, 1, 6, 5, 0),
        Layer::Relu,
        Layer::AvgPool2,
        conv_layer(&mut rng, 6, 16, 5, 0),
        Layer::Relu,
        Layer::AvgPool2,
        Layer::Flatten,
        dense_layer(&mut rng, 400, 120),
        Layer::Relu,
        dense_layer(&mut rng, 120, 84),
        Layer::Relu,
        dense_layer(&mut rng, 84, 2),
    ];
    ModelGraph {
        name: "lenet5".into(),
        in_channels: 1,
        class_count: 2,
        seed,
        mode: Mode::Infer,
        layers,
    }
}

/// (trainable, non_trainable) parameter counts. Batch-norm running stats are
/// the only non-trainable parameters.
pub fn count_params(m: &ModelGraph) -> (usize, usize) {
    let mut trainable = 0;
    let mut non_trainable = 0;
    for layer in &m.layers {
        match layer {
            Layer::Conv(p) => trainable += p.weight.len() + p.bias.len(),
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                trainable += gamma.len() + beta.len();
                non_trainable += running_mean.len() + running_var.len();
            }
            Layer::Dense { w, b, .. } => trainable += w.len() + b.len(),
            _ => {}
        }
    }
    (trainable, non_trainable)
}

fn rowwise_softmax(logits: &Tensor<f32>) -> Tensor<f32> {
    let k = logits.c * logits.h * logits.w;
    let mut probs = logits.clone();
    for r in 0..logits.n {
        let base = r * k;
        let mut mx = f32::NEG_INFINITY;
        for j in 0..k {
            mx = mx.max(probs.data[base + j]);
        }
        let mut z = 0.0f32;
        for j in 0..k {
            let e = (probs.data[base + j] - mx).exp();
            probs.data[base + j] = e;
            z += e;
        }
        for j in 0..k {
            probs.data[base + j] /= z;
        }
    }
    probs
}

impl ModelGraph {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn forward_one(
        layer: &mut Layer,
        x: &Tensor<f32>,
        mode: Mode,
    ) -> Result<(Tensor<f32>, LayerContext), NnError> {
        match layer {
            Layer::Conv(p) => {
                let (y, ctx) = nn::conv2d_forward(x, p)?;
                Ok((y, LayerContext::Conv(ctx)))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train,
                    Mode::Infer => BnMode::Infer,
                };
                let (y, ctx) = nn::batchnorm_forward(
                    x,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    bn_mode,
                    *eps,
                    *momentum,
                )?;
                Ok((y, LayerContext::Bn(ctx, bn_mode)))
            }
            Layer::Relu => {
                let (y, ctx) = nn::relu_forward(x);
                Ok((y, LayerContext::Relu(ctx)))
            }
            Layer::MaxPool2 => {
                let (y, ctx) = nn::maxpool2_forward(x)?;
                Ok((y, LayerContext::MaxPool(ctx)))
            }
            Layer::AvgPool2 => {
                let (y, ctx) = nn::avgpool2_forward(x)?;
                Ok((y, LayerContext::AvgPool(ctx)))
            }
            Layer::GlobalAvgPool => {
                let (y, ctx) = nn::global_avg_pool_forward(x)?;
                Ok((y, LayerContext::Gap(ctx)))
            }
            Layer::Flatten => {
                let shape = x.shape();
                let y = Tensor::matrix(x.n, x.c * x.h * x.w, x.data.clone());
                Ok((y, LayerContext::Flatten(shape)))
            }
            Layer::Dense { w, b, d, k } => {
                let (y, ctx) = nn::dense_forward(x, w, b, *d, *k)?;
                Ok((y, LayerContext::Dense(ctx)))
            }
        }
    }

    /// Run the full stack. Contexts are returned only in train mode.
    pub fn forward(&mut self, batch: &Tensor<f32>) -> Result<ForwardPass, NnError> {
        if batch.c != self.in_channels {
            return Err(NnError::ChannelMismatch {
                input: batch.c,
                expected: self.in_channels,
            });
        }
        let mode = self.mode;
        let mut cur = batch.clone();
        let mut contexts = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let (y, ctx) = Self::forward_one(layer, &cur, mode)?;
            contexts.push(ctx);
            cur = y;
        }
        let probs = rowwise_softmax(&cur);
        Ok(ForwardPass {
            probs,
            logits: cur,
            contexts: if mode == Mode::Train {
                Some(contexts)
            } else {
                None
            },
        })
    }

    /// Read-only inference; running statistics are never touched.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>), NnError> {
        let mut clone = self.clone();
        clone.mode = Mode::Infer;
        let pass = clone.forward(batch)?;
        Ok((pass.probs, pass.logits))
    }

    /// Inference-mode forward that records every inter-layer activation.
    /// activations[0] is the input; activations[i+1] the output of layer i.
    #[allow(clippy::type_complexity)]
    pub fn forward_trace(
        &self,
        batch: &Tensor<f32>,
    ) -> Result<(Vec<Tensor<f32>>, Vec<LayerContext>), NnError> {
        let mut clone = self.clone();
        let mut activations = vec![batch.clone()];
        let mut contexts = Vec::with_capacity(self.layers.len());
        let mut cur = batch.clone();
        for layer in clone.layers.iter_mut() {
            let (y, ctx) = Self::forward_one(layer, &cur, Mode::Infer)?;
            contexts.push(ctx);
            activations.push(y.clone());
            cur = y;
        }
        Ok((activations, contexts))
    }

    /// Vector-Jacobian product for one layer.
    pub fn layer_vjp(
        layer: &Layer,
        ctx: &LayerContext,
        dy: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Option<LayerGrads>), NnError> {
        match (layer, ctx) {
            (Layer::Conv(p), LayerContext::Conv(c)) => {
                let (dx, dw, db) = nn::conv2d_backward(p, c, dy)?;
                Ok((dx, Some(LayerGrads::Conv { dw, db })))
            }
            (Layer::BatchNorm { gamma, .. }, LayerContext::Bn(c, bn_mode)) => {
                match bn_mode {
                    BnMode::Train => {
                        let (dx, dgamma, dbeta) = nn::batchnorm_backward(c, dy)?;
                        Ok((dx, Some(LayerGrads::Bn { dgamma, dbeta })))
                    }
                    BnMode::Infer => {
                        // running stats are constants: dx = gamma * inv_std * dy
                        let mut dx = dy.clone();
                        let mut dgamma = vec![0.0f32; gamma.len()];
                        let mut dbeta = vec![0.0f32; gamma.len()];
                        for n in 0..dx.n {
                            for ch in 0..dx.c {
                                let base = dx.idx(n, ch, 0, 0);
                                for k in 0..dx.h * dx.w {
                                    dgamma[ch] += dy.data[base + k] * c.xhat.data[base + k];
                                    dbeta[ch] += dy.data[base + k];
                                    dx.data[base + k] =
                                        gamma[ch] * c.inv_std[ch] * dy.data[base + k];
                                }
                            }
                        }
                        Ok((dx, Some(LayerGrads::Bn { dgamma, dbeta })))
                    }
                }
            }
            (Layer::Relu, LayerContext::Relu(c)) => Ok((nn::relu_backward(c, dy)?, None)),
            (Layer::MaxPool2, LayerContext::MaxPool(c)) => {
                Ok((nn::maxpool2_backward(c, dy)?, None))
            }
            (Layer::AvgPool2, LayerContext::AvgPool(c)) => {
                Ok((nn::avgpool2_backward(c, dy)?, None))
            }
            (Layer::GlobalAvgPool, LayerContext::Gap(c)) => {
                Ok((nn::global_avg_pool_backward(c, dy)?, None))
            }
            (Layer::Flatten, LayerContext::Flatten(shape)) => {
                let (n, c, h, w) = *shape;
                if dy.len() != n * c * h * w {
                    return Err(NnError::ShapeMismatch(
                        "flatten backward size mismatch".into(),
                    ));
                }
                Ok((Tensor::from_vec(n, c, h, w, dy.data.clone()), None))
            }
            (Layer::Dense { w, d, k, .. }, LayerContext::Dense(c)) => {
                let (dx, dw, db) = nn::dense_backward(c, w, *d, *k, dy)?;
                Ok((dx, Some(LayerGrads::Dense { dw, db })))
            }
            _ => Err(NnError::ShapeMismatch(
                "context does not match layer kind".into(),
            )),
        }
    }

    /// Backprop dlogits through the whole stack. Returns the input gradient
    /// and per-layer parameter gradients (None for parameterless layers).
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        contexts: &[LayerContext],
        dlogits: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Vec<Option<LayerGrads>>), NnError> {
        if contexts.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} contexts for {} layers",
                contexts.len(),
                self.layers.len()
            )));
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut dcur = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let (dx, g) = Self::layer_vjp(&self.layers[i], &contexts[i], &dcur)?;
            grads[i] = g;
            dcur = dx;
        }
        Ok((dcur, grads))
    }

    /// Trainable parameter buffers in a fixed traversal order (two per
    /// parameterized layer). Optimizer state and flattened gradients use the
    /// same order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Layer::Dense { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
                _ => {}
            }
        }
        out
    }

    pub fn all_params_finite(&self) -> bool {
        for layer in &self.layers {
            let slices: Vec<&[f32]> = match layer {
                Layer::Conv(p) => vec![&p.weight, &p.bias],
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => vec![gamma, beta, running_mean, running_var],
                Layer::Dense { w, b, .. } => vec![w, b],
                _ => vec![],
            };
            for s in slices {
                if s.iter().any(|v| !v.is_finite()) {
                    return false;
                }
            }
        }
        true
    }
}

/// Flatten per-layer grads into the same order as `trainable_params_mut`.
pub fn flatten_grads(grads: &[Option<LayerGrads>]) -> Vec<&Vec<f32>> {
    let mut out = Vec::new();
    for g in grads.iter().flatten() {
        match g {
            LayerGrads::Conv { dw, db } | LayerGrads::Dense { dw, db } => {
                out.push(dw);
                out.push(db);
            }
            LayerGrads::Bn { dgamma, dbeta } => {
                out.push(dgamma);
                out.push(dbeta);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   bytes 0..8   magic "ADENETCK"
//   u32 LE       format version (1)
//   u64 LE       JSON header length, then the header (model metadata and the
//                per-layer shape table)
//   u64 LE       payload length, then the payload: every parameter and
//                running-stat buffer as little-endian f32, in layer order
//                (conv: weight, bias; bn: gamma, beta, running_mean,
//                running_var; dense: w, b)
//   u32 LE       CRC-32 (IEEE) of the payload bytes
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"ADENETCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not an AdeNet checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("invalid header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<(usize, usize, usize, usize)>, // co, ci, k, pad
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dense: Option<(usize, usize)>, // d, k
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    name: String,
    in_channels: usize,
    class_count: usize,
    seed: u64,
    layers: Vec<LayerMeta>,
}

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, e) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *e = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn payload_buffers(m: &ModelGraph) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = Vec::new();
    for layer in &m.layers {
        match layer {
            Layer::Conv(p) => {
                out.push(&p.weight);
                out.push(&p.bias);
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                out.push(gamma);
                out.push(beta);
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::Dense { w, b, .. } => {
                out.push(w);
                out.push(b);
            }
            _ => {}
        }
    }
    out
}

pub fn save_checkpoint(m: &ModelGraph, path: &Path) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        name: m.name.clone(),
        in_channels: m.in_channels,
        class_count: m.class_count,
        seed: m.seed,
        layers: m
            .layers
            .iter()
            .map(|l| LayerMeta {
                kind: l.kind().to_string(),
                conv: match l {
                    Layer::Conv(p) => Some((p.co, p.ci, p.k, p.pad)),
                    _ => None,
                },
                bn_channels: match l {
                    Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
                    _ => None,
                },
                dense: match l {
                    Layer::Dense { d, k, .. } => Some((*d, *k)),
                    _ => None,
                },
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut payload = Vec::new();
    for buf in payload_buffers(m) {
        for v in buf {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32(&payload);

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&(payload.len() as u64).to_le_bytes())?;
    f.write_all(&payload)?;
    f.write_all(&checksum.to_le_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, hlen)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let plen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let payload = take(&mut pos, plen)?.to_vec();
    let stored = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let computed = crc32(&payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut layers = Vec::new();
    for meta in &header.layers {
        let layer = match meta.kind.as_str() {
            "conv3x3-same" | "conv5x5-valid" => {
                let (co, ci, k, pad) = meta
                    .conv
                    .ok_or_else(|| CheckpointError::Header("conv layer without dims".into()))?;
                Layer::Conv(ConvParams::zeros(co, ci, k, pad))
            }
            "batchnorm" => {
                let c = meta
                    .bn_channels
                    .ok_or_else(|| CheckpointError::Header("bn layer without channels".into()))?;
                bn_layer(c)
            }
            "relu" => Layer::Relu,
            "maxpool2" => Layer::MaxPool2,
            "avgpool2" => Layer::AvgPool2,
            "global-avg-pool" => Layer::GlobalAvgPool,
            "flatten" => Layer::Flatten,
            "dense" => {
                let (d, k) = meta
                    .dense
                    .ok_or_else(|| CheckpointError::Header("dense layer without dims".into()))?;
                Layer::Dense {
                    w: vec![0.0; d * k],
                    b: vec![0.0; k],
                    d,
                    k,
                }
            }
            other => {
                return Err(CheckpointError::Header(format!("unknown layer kind {other}")))
            }
        };
        layers.push(layer);
    }
    let mut model = ModelGraph {
        name: header.name,
        in_channels: header.in_channels,
        class_count: header.class_count,
        seed: header.seed,
        mode: Mode::Infer,
        layers,
    };

    // fill buffers from the payload in the exact save order
    let mut off = 0usize;
    let mut fill = |buf: &mut Vec<f32>| -> Result<(), CheckpointError> {
        let need = buf.len() * 4;
        if off + need > payload.len() {
            return Err(CheckpointError::Truncated);
        }
        for (i, v) in buf.iter_mut().enumerate() {
            let s = &payload[off + 4 * i..off + 4 * i + 4];
            *v = f32::from_le_bytes(s.try_into().unwrap());
        }
        off += need;
        Ok(())
    };
    for layer in model.layers.iter_mut() {
        match layer {
            Layer::Conv(p) => {
                fill(&mut p.weight)?;
                fill(&mut p.bias)?;
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                fill(gamma)?;
                fill(beta)?;
                fill(running_mean)?;
                fill(running_var)?;
            }
            Layer::Dense { w, b, .. } => {
                fill(w)?;
                fill(b)?;
            }
            _ => {}
        }
    }
    if off != payload.len() {
        return Err(CheckpointError::Header(
            "payload size does not match shape table".into(),
        ));
    }
    Ok(model)
}

/// Index of the Grad-CAM capture layer: the post-ReLU activation of the last
/// conv block, before its pool.
pub fn gradcam_capture_index(m: &ModelGraph) -> Option<usize> {
    let mut last = None;
    for i in 0..m.layers.len().saturating_sub(1) {
        if matches!(m.layers[i], Layer::Relu)
            && matches!(m.layers[i + 1], Layer::MaxPool2 | Layer::AvgPool2)
        {
            last = Some(i);
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adenet_parameter_counts_match_reference() {
        let m = build_adenet(3, true, 0);
        assert_eq!(count_params(&m), (102_082, 448));
    }

    #[test]
    fn adenet_without_bn_drops_448_each_way() {
        let m = build_adenet(3, false, 0);
        assert_eq!(count_params(&m), (101_634, 0));
    }

    #[test]
    fn single_conv_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelGraph {
            name: "probe".into(),
            in_channels: 3,
            class_count: 2,
            seed: 0,
            mode: Mode::Infer,
            layers: vec![conv_layer(&mut rng, 3, 32, 3, 1)],
        };
        assert_eq!(count_params(&m), (896, 0));
    }

    #[test]
    fn empty_model_count() {
        let m = ModelGraph {
            name: "empty".into(),
            in_channels: 3,
            class_count: 2,
            seed: 0,
            mode: Mode::Infer,
            layers: vec![],
        };
        assert_eq!(count_params(&m), (0, 0));
    }

    #[test]
    fn lenet5_shape_chain_and_count() {
        let m = build_lenet5(0);
        // 32 -> conv5 valid 28 -> pool 14 -> conv5 valid 10 -> pool 5 -> flatten 400
        let x = Tensor::zeros(1, 1, 32, 32);
        let (acts, _) = m.forward_trace(&x).unwrap();
        assert_eq!(acts[1].shape(), (1, 6, 28, 28));
        assert_eq!(acts[3].shape(), (1, 6, 14, 14));
        assert_eq!(acts[4].shape(), (1, 16, 10, 10));
        assert_eq!(acts[6].shape(), (1, 16, 5, 5));
        assert_eq!(acts[7].shape(), (1, 400, 1, 1));
        // 156 + 2416 + 48120 + 10164 + 170 = 61026
        assert_eq!(count_params(&m), (61_026, 0));
    }

    #[test]
    fn probs_sum_to_one_on_zero_image() {
        let mut m = build_adenet(3, true, 1);
        let x = Tensor::zeros(1, 3, 8, 8);
        let pass = m.forward(&x).unwrap();
        let s: f32 = pass.probs.data.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);

        let mut l = build_lenet5(1);
        let x = Tensor::zeros(1, 1, 32, 32);
        let pass = l.forward(&x).unwrap();
        let s: f32 = pass.probs.data.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn count_invariant_under_mode_switch() {
        let mut m = build_adenet(3, true, 2);
        let before = count_params(&m);
        m.set_mode(Mode::Train);
        assert_eq!(count_params(&m), before);
    }

    #[test]
    fn infer_forward_is_pure() {
        use rand::Rng;
        let mut m = build_adenet(3, true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_vec(
            2,
            3,
            16,
            16,
            (0..2 * 3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.probs.data, b.probs.data);
        assert_eq!(a.logits.data, b.logits.data);
    }

    #[test]
    fn undersized_input_fails() {
        let mut m = build_adenet(3, true, 0);
        let x = Tensor::zeros(1, 3, 4, 4);
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn gradcam_capture_is_third_block_relu() {
        let m = build_adenet(3, true, 0);
        let i = gradcam_capture_index(&m).unwrap();
        assert!(matches!(m.layers[i], Layer::Relu));
        assert!(matches!(m.layers[i + 1], Layer::MaxPool2));
        // third block: conv,bn,relu,pool per block -> index 10
        assert_eq!(i, 10);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_adenet(3, true, 7);
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let x = Tensor::from_vec(
                1,
                3,
                16,
                16,
                (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
            );
            let (pa, _) = m.predict(&x).unwrap();
            let (pb, _) = loaded.predict(&x).unwrap();
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_adenet(3, true, 7);
        save_checkpoint(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // corrupted magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let p2 = dir.path().join("bad_magic.ckpt");
        std::fs::write(&p2, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&p2),
            Err(CheckpointError::BadMagic)
        ));

        // flipped payload byte -> checksum mismatch
        let mut bad = bytes.clone();
        let k = bytes.len() - 100;
        bad[k] ^= 0xFF;
        let p3 = dir.path().join("bad_sum.ckpt");
        std::fs::write(&p3, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&p3),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));

        // truncated
        let p4 = dir.path().join("trunc.ckpt");
        std::fs::write(&p4, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&p4),
            Err(CheckpointError::Truncated)
        ));
    }
}
