//! Ground-truth box padding: expand the sparse lesion boxes of an image to a
//! fixed count of training targets.
//!
//! The interesting strategy is `center_aligned`: perturbated copies of each
//! ground-truth box whose width/height are scaled uniformly within
//! `[(1 - lambda) w, (1 + lambda) w]` and whose center is drawn from an
//! isotropic Gaussian (std `sigma = (w + h) / 6`) truncated to the interior
//! of the original box. The remaining strategies exist as ablation baselines.

use crate::geometry::{self, Box, SignalPoint4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// How the ground-truth set is expanded to `n` targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadStrategy {
    /// Originals only, topped up with Gaussian-signal boxes.
    None,
    /// Originals repeated round-robin.
    Duplicate,
    /// Originals plus boxes with corners drawn uniformly in `[0, 1]`.
    Uniform,
    /// Originals plus boxes decoded from standard-normal signal points.
    Gaussian,
    /// Originals plus center-aligned perturbated copies.
    CenterAligned,
}

impl PadStrategy {
    pub const ALL: [PadStrategy; 5] = [
        PadStrategy::None,
        PadStrategy::Duplicate,
        PadStrategy::Uniform,
        PadStrategy::Gaussian,
        PadStrategy::CenterAligned,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PadStrategy::None => "none",
            PadStrategy::Duplicate => "duplicate",
            PadStrategy::Uniform => "uniform",
            PadStrategy::Gaussian => "gaussian",
            PadStrategy::CenterAligned => "center_aligned",
        }
    }

    pub fn from_name(name: &str) -> Option<PadStrategy> {
        PadStrategy::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PaddingConfig {
    pub strategy: PadStrategy,
    /// Fixed number of targets per image.
    pub n: usize,
    /// Relative width/height perturbation for `center_aligned`.
    pub lambda_scale: f64,
}

impl Default for PaddingConfig {
    fn default() -> Self {
        Self {
            strategy: PadStrategy::CenterAligned,
            n: 300,
            lambda_scale: 0.4,
        }
    }
}

impl PaddingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n < 1 {
            return Err(format!("padding.n must be >= 1, got {}", self.n));
        }
        if !(self.lambda_scale > 0.0 && self.lambda_scale < 1.0) {
            return Err(format!(
                "padding.lambda_scale must lie in (0, 1), got {}",
                self.lambda_scale
            ));
        }
        Ok(())
    }
}

/// Exactly `n` sanitized boxes plus, per box, the index of the ground-truth
/// box it derives from (`None` for random fill).
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTargets {
    pub boxes: Vec<Box>,
    pub origins: Vec<Option<usize>>,
}

/// Size-adaptive center-sampling std: `(w + h) / 6`.
pub fn sigma_wh(w: f64, h: f64) -> f64 {
    (w + h) / 6.0
}

/// [`sigma_wh`] of a box's extents.
pub fn sigma_of(gt: &Box) -> f64 {
    sigma_wh(gt.width(), gt.height())
}

const REJECTION_CAP: usize = 1000;

/// Draw one center-aligned perturbated copy of `gt`.
///
/// Width and height are uniform in `[(1 - lambda) d, (1 + lambda) d]`; the
/// center is Gaussian around the ground-truth center, rejection-sampled until
/// it falls strictly inside `gt` and the whole box fits in the unit square
/// (so sanitation never distorts the sampled dimensions). After
/// [`REJECTION_CAP`] failed draws the original box is returned unchanged.
pub fn sample_center_aligned(gt: &Box, lambda_scale: f64, rng: &mut impl Rng) -> Box {
    let (cx, cy, w, h) = geometry::corner_to_center(gt);
    let wn = uniform_in(rng, (1.0 - lambda_scale) * w, (1.0 + lambda_scale) * w);
    let hn = uniform_in(rng, (1.0 - lambda_scale) * h, (1.0 + lambda_scale) * h);
    let sigma = sigma_wh(w, h);
    for _ in 0..REJECTION_CAP {
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let cxn = cx + sigma * nx;
        let cyn = cy + sigma * ny;
        if !gt.contains_strict(cxn, cyn) {
            continue;
        }
        let (x1, y1, x2, y2) = (
            cxn - wn / 2.0,
            cyn - hn / 2.0,
            cxn + wn / 2.0,
            cyn + hn / 2.0,
        );
        if x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
            continue;
        }
        return geometry::sanitize(x1, y1, x2, y2).expect("finite sample");
    }
    *gt
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Expand `gt_boxes` to exactly `cfg.n` targets under the configured strategy.
/// With no ground truth every strategy falls back to Gaussian-signal fill.
pub fn pad_targets(
    gt_boxes: &[Box],
    cfg: &PaddingConfig,
    b_scale: f64,
    rng: &mut impl Rng,
) -> PaddedTargets {
    let n = cfg.n;
    let m = gt_boxes.len();
    let mut boxes = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);

    if m == 0 {
        for _ in 0..n {
            boxes.push(gaussian_fill(b_scale, rng));
            origins.push(None);
        }
        return PaddedTargets { boxes, origins };
    }

    if cfg.strategy == PadStrategy::Duplicate {
        for i in 0..n {
            boxes.push(gt_boxes[i % m]);
            origins.push(Some(i % m));
        }
        return PaddedTargets { boxes, origins };
    }

    for (i, gt) in gt_boxes.iter().take(n).enumerate() {
        boxes.push(*gt);
        origins.push(Some(i));
    }
    for j in 0..n.saturating_sub(m) {
        match cfg.strategy {
            PadStrategy::None | PadStrategy::Gaussian => {
                boxes.push(gaussian_fill(b_scale, rng));
                origins.push(None);
            }
            PadStrategy::Uniform => {
                let b = geometry::sanitize(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                )
                .expect("finite sample");
                boxes.push(b);
                origins.push(None);
            }
            PadStrategy::CenterAligned => {
                let idx = j % m;
                boxes.push(sample_center_aligned(&gt_boxes[idx], cfg.lambda_scale, rng));
                origins.push(Some(idx));
            }
            PadStrategy::Duplicate => unreachable!(),
        }
    }
    PaddedTargets { boxes, origins }
}

fn gaussian_fill(b_scale: f64, rng: &mut impl Rng) -> Box {
    let p = SignalPoint4(std::array::from_fn(|_| rng.sample(StandardNormal)));
    geometry::signal_decode(&p, b_scale)
}
