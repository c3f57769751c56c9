//! The pluggable box denoiser: given noisy signal-space boxes, a time step
//! and the conditioning image, predict clean boxes and confidence logits.
//!
//! Two implementations:
//! - [`MlpDenoiser`]: a small trainable perceptron (60 -> 64 -> 64 -> 5, tanh
//!   hidden) over per-box features `[signal coords | time embedding |
//!   ROI-pooled multi-window intensities]`, with exact reverse-mode
//!   gradients and an Adam optimizer with decoupled weight decay.
//! - [`OracleDenoiser`]: a cheating stand-in that snaps each box to the
//!   nearest ground-truth lesion; used to validate the refinement loop
//!   independently of training.
//!
//! The perceptron predicts a residual in signal space; the clean-box estimate
//! is `sanitize(decode(clamp(box + residual)))`. The clamp and sanitation are
//! treated as identity in the backward pass (straight-through).

use crate::diffusion::TimeStep;
use crate::geometry::{self, Box, SignalPoint4};
use crate::synthdata::MultiWindow;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const TIME_EMBED_DIM: usize = 8;
pub const ROI_GRID: usize = 4;
pub const ROI_FEATURES: usize = 3 * ROI_GRID * ROI_GRID;
pub const INPUT_DIM: usize = 4 + TIME_EMBED_DIM + ROI_FEATURES;
pub const HIDDEN_DIM: usize = 64;
pub const OUTPUT_DIM: usize = 5;

const W1_LEN: usize = HIDDEN_DIM * INPUT_DIM;
const W2_LEN: usize = HIDDEN_DIM * HIDDEN_DIM;
const W3_LEN: usize = OUTPUT_DIM * HIDDEN_DIM;
const W1_OFF: usize = 0;
const B1_OFF: usize = W1_OFF + W1_LEN;
const W2_OFF: usize = B1_OFF + HIDDEN_DIM;
const B2_OFF: usize = W2_OFF + W2_LEN;
const W3_OFF: usize = B2_OFF + HIDDEN_DIM;
const B3_OFF: usize = W3_OFF + W3_LEN;
pub const PARAM_COUNT: usize = B3_OFF + OUTPUT_DIM;

/// Geometric time-embedding frequencies (radians at `t = T`).
const EMBED_FREQS: [f64; TIME_EMBED_DIM / 2] = [1.0, 10.0, 100.0, 1000.0];

pub const ADAM_LR: f64 = 2e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAM_WEIGHT_DECAY: f64 = 1e-4;

/// Oracle logit magnitude and its IoU gate.
const ORACLE_LOGIT: f64 = 4.0;
const ORACLE_IOU_GATE: f64 = 0.05;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),
}

/// Flat parameter vector of the perceptron, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub data: Vec<f64>,
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; PARAM_COUNT],
        }
    }

    /// Glorot-uniform weights, zero biases, seed-controlled.
    pub fn glorot(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; PARAM_COUNT];
        let fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize,
                        rng: &mut ChaCha8Rng, data: &mut Vec<f64>| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut data[range] {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * limit;
            }
        };
        fill(W1_OFF..W1_OFF + W1_LEN, INPUT_DIM, HIDDEN_DIM, &mut rng, &mut data);
        fill(W2_OFF..W2_OFF + W2_LEN, HIDDEN_DIM, HIDDEN_DIM, &mut rng, &mut data);
        fill(W3_OFF..W3_OFF + W3_LEN, HIDDEN_DIM, OUTPUT_DIM, &mut rng, &mut data);
        Self { data }
    }

    fn w1(&self) -> &[f64] {
        &self.data[W1_OFF..W1_OFF + W1_LEN]
    }
    fn b1(&self) -> &[f64] {
        &self.data[B1_OFF..B1_OFF + HIDDEN_DIM]
    }
    fn w2(&self) -> &[f64] {
        &self.data[W2_OFF..W2_OFF + W2_LEN]
    }
    fn b2(&self) -> &[f64] {
        &self.data[B2_OFF..B2_OFF + HIDDEN_DIM]
    }
    fn w3(&self) -> &[f64] {
        &self.data[W3_OFF..W3_OFF + W3_LEN]
    }
    fn b3(&self) -> &[f64] {
        &self.data[B3_OFF..B3_OFF + OUTPUT_DIM]
    }
}

/// Predicted clean boxes (unit space, sanitized) plus confidence logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub pred_boxes: Vec<Box>,
    pub conf_logits: Vec<f64>,
}

/// Per-box activations kept for the backward pass.
pub struct ForwardCache {
    x: Vec<[f64; INPUT_DIM]>,
    h1: Vec<[f64; HIDDEN_DIM]>,
    h2: Vec<[f64; HIDDEN_DIM]>,
    b_scale: f64,
}

/// Interleaved sin/cos of `t / t_max` at geometric frequencies.
pub fn time_embed(t: TimeStep, t_max: usize) -> [f64; TIME_EMBED_DIM] {
    let x = t.0 as f64 / t_max as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for (k, f) in EMBED_FREQS.iter().enumerate() {
        let (s, c) = (f * x).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

/// Sample each channel at the centers of a `G x G` grid of cells covering
/// the box (nearest pixel, border-clamped). Channel-major, then row-major.
pub fn roi_pool(win: &MultiWindow, bx: &Box) -> [f64; ROI_FEATURES] {
    let mut out = [0.0; ROI_FEATURES];
    let g = ROI_GRID;
    for c in 0..3 {
        let chan = &win.channels[c];
        for gy in 0..g {
            let v = bx.y1 + (gy as f64 + 0.5) / g as f64 * bx.height();
            let py = ((v * win.h as f64).floor() as isize).clamp(0, win.h as isize - 1) as usize;
            for gx in 0..g {
                let u = bx.x1 + (gx as f64 + 0.5) / g as f64 * bx.width();
                let px =
                    ((u * win.w as f64).floor() as isize).clamp(0, win.w as isize - 1) as usize;
                out[c * g * g + gy * g + gx] = chan[py * win.w + px];
            }
        }
    }
    out
}

/// Forward pass over a batch of boxes. Per box, the residual head produces
/// `z0_hat = sanitize(decode(clamp(box + r)))` and a confidence logit.
pub fn mlp_forward(
    params: &MlpParams,
    boxes: &[SignalPoint4],
    t: TimeStep,
    win: &MultiWindow,
    t_max: usize,
    b_scale: f64,
) -> (DenoiserOutput, ForwardCache) {
    let embed = time_embed(t, t_max);
    let mut pred_boxes = Vec::with_capacity(boxes.len());
    let mut conf_logits = Vec::with_capacity(boxes.len());
    let mut cache = ForwardCache {
        x: Vec::with_capacity(boxes.len()),
        h1: Vec::with_capacity(boxes.len()),
        h2: Vec::with_capacity(boxes.len()),
        b_scale,
    };

    for bx in boxes {
        let decoded = geometry::signal_decode(bx, b_scale);
        let roi = roi_pool(win, &decoded);
        let mut x = [0.0; INPUT_DIM];
        x[..4].copy_from_slice(&bx.0);
        x[4..4 + TIME_EMBED_DIM].copy_from_slice(&embed);
        x[4 + TIME_EMBED_DIM..].copy_from_slice(&roi);

        let mut h1 = [0.0; HIDDEN_DIM];
        matvec(params.w1(), &x, params.b1(), &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());

        let mut h2 = [0.0; HIDDEN_DIM];
        matvec(params.w2(), &h1, params.b2(), &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());

        let mut out = [0.0; OUTPUT_DIM];
        matvec(params.w3(), &h2, params.b3(), &mut out);

        let z0_hat = SignalPoint4([
            bx.0[0] + out[0],
            bx.0[1] + out[1],
            bx.0[2] + out[2],
            bx.0[3] + out[3],
        ])
        .clamped(b_scale);
        pred_boxes.push(geometry::signal_decode(&z0_hat, b_scale));
        conf_logits.push(out[4]);

        cache.x.push(x);
        cache.h1.push(h1);
        cache.h2.push(h2);
    }

    (
        DenoiserOutput {
            pred_boxes,
            conf_logits,
        },
        cache,
    )
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// Exact reverse-mode gradients of the forward map with respect to the
/// parameters, given upstream gradients on the predicted unit-space boxes and
/// the logits. Clamp and sanitation are treated as identity; the unit decode
/// contributes its slope `1 / (2 b_scale)`.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_boxes: &[[f64; 4]],
    grad_logits: &[f64],
) -> Vec<f64> {
    assert_eq!(cache.x.len(), grad_boxes.len());
    assert_eq!(cache.x.len(), grad_logits.len());
    let mut grads = vec![0.0f64; PARAM_COUNT];
    let decode_slope = 1.0 / (2.0 * cache.b_scale);

    for i in 0..cache.x.len() {
        let mut go = [0.0; OUTPUT_DIM];
        for k in 0..4 {
            go[k] = grad_boxes[i][k] * decode_slope;
        }
        go[4] = grad_logits[i];

        let (x, h1, h2) = (&cache.x[i], &cache.h1[i], &cache.h2[i]);

        // Output layer.
        let mut gh2 = [0.0; HIDDEN_DIM];
        for r in 0..OUTPUT_DIM {
            grads[B3_OFF + r] += go[r];
            let row = W3_OFF + r * HIDDEN_DIM;
            for c in 0..HIDDEN_DIM {
                grads[row + c] += go[r] * h2[c];
                gh2[c] += go[r] * params.data[row + c];
            }
        }

        // Second hidden layer (tanh).
        let mut gh1 = [0.0; HIDDEN_DIM];
        for r in 0..HIDDEN_DIM {
            let gz = gh2[r] * (1.0 - h2[r] * h2[r]);
            grads[B2_OFF + r] += gz;
            let row = W2_OFF + r * HIDDEN_DIM;
            for c in 0..HIDDEN_DIM {
                grads[row + c] += gz * h1[c];
                gh1[c] += gz * params.data[row + c];
            }
        }

        // First hidden layer (tanh).
        for r in 0..HIDDEN_DIM {
            let gz = gh1[r] * (1.0 - h1[r] * h1[r]);
            grads[B1_OFF + r] += gz;
            let row = W1_OFF + r * INPUT_DIM;
            for c in 0..INPUT_DIM {
                grads[row + c] += gz * x[c];
            }
        }
    }
    grads
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; PARAM_COUNT],
            v: vec![0.0; PARAM_COUNT],
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(ADAM_LR, ADAM_WEIGHT_DECAY)
    }
}

pub fn adam_step(params: &mut MlpParams, grads: &[f64], state: &mut AdamState) {
    assert_eq!(grads.len(), PARAM_COUNT);
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((p, &g), (m, v)) in params.data.iter_mut().zip(grads).zip(moments) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * (1.0 - state.lr * state.weight_decay)
            - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Conditioning context shared by denoiser implementations.
pub struct DenoiseContext<'a> {
    pub windows: &'a MultiWindow,
    /// Unit-space ground truth; only the oracle looks at it.
    pub gt_unit: &'a [Box],
    pub t_max: usize,
    pub b_scale: f64,
}

pub trait Denoiser {
    fn denoise(&self, boxes: &[SignalPoint4], t: TimeStep, ctx: &DenoiseContext) -> DenoiserOutput;
}

/// Trained-perceptron denoiser.
pub struct MlpDenoiser<'a> {
    pub params: &'a MlpParams,
}

impl Denoiser for MlpDenoiser<'_> {
    fn denoise(&self, boxes: &[SignalPoint4], t: TimeStep, ctx: &DenoiseContext) -> DenoiserOutput {
        mlp_forward(self.params, boxes, t, ctx.windows, ctx.t_max, ctx.b_scale).0
    }
}

/// Cheating denoiser: snaps every box to the nearest ground-truth lesion.
pub struct OracleDenoiser;

impl Denoiser for OracleDenoiser {
    fn denoise(
        &self,
        boxes: &[SignalPoint4],
        _t: TimeStep,
        ctx: &DenoiseContext,
    ) -> DenoiserOutput {
        oracle_denoise(boxes, ctx.gt_unit, ctx.b_scale)
    }
}

/// Snap each box to the ground-truth lesion whose center is nearest; the
/// logit is positive only when the incoming box already overlaps it.
pub fn oracle_denoise(boxes: &[SignalPoint4], gt_unit: &[Box], b_scale: f64) -> DenoiserOutput {
    let mut pred_boxes = Vec::with_capacity(boxes.len());
    let mut conf_logits = Vec::with_capacity(boxes.len());
    for p in boxes {
        let decoded = geometry::signal_decode(p, b_scale);
        if gt_unit.is_empty() {
            pred_boxes.push(decoded);
            conf_logits.push(-ORACLE_LOGIT);
            continue;
        }
        let (cx, cy) = decoded.center();
        let nearest = gt_unit
            .iter()
            .min_by(|a, b| {
                let da = dist2(a.center(), (cx, cy));
                let db = dist2(b.center(), (cx, cy));
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let logit = if geometry::iou(&decoded, nearest) > ORACLE_IOU_GATE {
            ORACLE_LOGIT
        } else {
            -ORACLE_LOGIT
        };
        pred_boxes.push(*nearest);
        conf_logits.push(logit);
    }
    DenoiserOutput {
        pred_boxes,
        conf_logits,
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchSpec {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    time_embed_dim: usize,
    roi_grid: usize,
}

impl ArchSpec {
    fn current() -> Self {
        Self {
            input_dim: INPUT_DIM,
            hidden_dim: HIDDEN_DIM,
            output_dim: OUTPUT_DIM,
            time_embed_dim: TIME_EMBED_DIM,
            roi_grid: ROI_GRID,
        }
    }
}

/// On-disk checkpoint: architecture constants, provenance and parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    arch: ArchSpec,
    pub seed: u64,
    pub t_max: usize,
    pub b_scale: f64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &MlpParams, seed: u64, t_max: usize, b_scale: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: ArchSpec::current(),
            seed,
            t_max,
            b_scale,
            params: params.data.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let cur = ArchSpec::current();
        let want = &ckpt.arch;
        if (
            want.input_dim,
            want.hidden_dim,
            want.output_dim,
            want.time_embed_dim,
            want.roi_grid,
        ) != (
            cur.input_dim,
            cur.hidden_dim,
            cur.output_dim,
            cur.time_embed_dim,
            cur.roi_grid,
        ) || ckpt.version != CHECKPOINT_VERSION
            || ckpt.params.len() != PARAM_COUNT
        {
            return Err(CheckpointError::ArchMismatch(format!(
                "file declares {:?} v{}, expected {:?} v{}",
                ckpt.arch, ckpt.version, cur, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    pub fn into_params(self) -> MlpParams {
        MlpParams { data: self.params }
    }
}
