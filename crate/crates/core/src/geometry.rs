//! Axis-aligned boxes, coordinate conversions and overlap measures.
//!
//! Boxes live in corner form `[x1, y1, x2, y2]`. Pipeline internals keep
//! coordinates unit-normalized (fractions of image width/height); pixel
//! coordinates appear only at the dataset and evaluation boundaries. The
//! overlap measures ([`iou`], [`giou`]) only assume a common unit and work in
//! either space.
//!
//! The diffusion process operates on a scaled encoding of the unit box,
//! [`SignalPoint4`], chosen so that unit-variance Gaussian noise is a
//! meaningful perturbation: `u -> (2u - 1) * b_scale` per coordinate.

use thiserror::Error;

/// Smallest side length a sanitized box may have, in unit coordinates.
pub const MIN_SIDE: f64 = 1e-3;

/// Default signal-space scale. Unit boxes map to `[-B_SCALE, B_SCALE]^4`.
pub const B_SCALE: f64 = 2.0;

/// Expansion threshold with one-ulp slack so that `sanitize` is exactly
/// idempotent: a freshly expanded side re-measures within rounding of
/// `MIN_SIDE` and must not trigger a second expansion.
const MIN_SIDE_TRIGGER: f64 = MIN_SIDE * (1.0 - 1e-6);

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate: ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("center form requires positive extents, got w={w}, h={h}")]
    NonPositiveExtent { w: f64, h: f64 },
}

/// Axis-aligned rectangle in corner form with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True if `(x, y)` lies strictly inside the box.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    /// Scale both axes, e.g. unit -> pixel coordinates.
    pub fn scaled(&self, sx: f64, sy: f64) -> Box {
        Box::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

/// A point in signal space: four reals in `[-b_scale, b_scale]` once clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalPoint4(pub [f64; 4]);

impl SignalPoint4 {
    /// Clamp every component into `[-b_scale, b_scale]`.
    pub fn clamped(self, b_scale: f64) -> SignalPoint4 {
        SignalPoint4(self.0.map(|v| v.clamp(-b_scale, b_scale)))
    }

    pub fn is_within(&self, b_scale: f64) -> bool {
        self.0.iter().all(|v| v.abs() <= b_scale)
    }
}

/// Intersection over union of two sanitized boxes; 0 when disjoint.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: `IoU - (enclosure - union) / enclosure`, in `(-1, 1]`.
pub fn giou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let encl = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if union <= 0.0 || encl <= 0.0 {
        return 0.0;
    }
    inter / union - (encl - union) / encl
}

/// Corner form -> `(cx, cy, w, h)`.
pub fn corner_to_center(b: &Box) -> (f64, f64, f64, f64) {
    (
        (b.x1 + b.x2) / 2.0,
        (b.y1 + b.y2) / 2.0,
        b.x2 - b.x1,
        b.y2 - b.y1,
    )
}

/// `(cx, cy, w, h)` -> corner form. Rejects non-positive extents.
pub fn center_to_corner(cx: f64, cy: f64, w: f64, h: f64) -> Result<Box, GeometryError> {
    if !(w > 0.0 && h > 0.0) {
        return Err(GeometryError::NonPositiveExtent { w, h });
    }
    Ok(Box::new(
        cx - w / 2.0,
        cy - h / 2.0,
        cx + w / 2.0,
        cy + h / 2.0,
    ))
}

/// Map a unit box into signal space: each coordinate `u -> (2u - 1) * b_scale`.
pub fn signal_encode(b: &Box, b_scale: f64) -> SignalPoint4 {
    SignalPoint4([
        (2.0 * b.x1 - 1.0) * b_scale,
        (2.0 * b.y1 - 1.0) * b_scale,
        (2.0 * b.x2 - 1.0) * b_scale,
        (2.0 * b.y2 - 1.0) * b_scale,
    ])
}

/// Inverse of [`signal_encode`]: clamp to `[-b_scale, b_scale]`, map back to
/// unit coordinates, then sanitize.
pub fn signal_decode(p: &SignalPoint4, b_scale: f64) -> Box {
    let q = p.clamped(b_scale).0.map(|v| (v / b_scale + 1.0) / 2.0);
    // Clamped input is finite, so sanitation cannot fail.
    sanitize(q[0], q[1], q[2], q[3]).expect("clamped signal is finite")
}

/// Repair four raw reals into a valid unit box: clamp to `[0, 1]`, reorder
/// corners, and expand any side below [`MIN_SIDE`] symmetrically about its
/// center (shifted inward at the image border).
pub fn sanitize(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Box, GeometryError> {
    if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
        return Err(GeometryError::NonFinite(x1, y1, x2, y2));
    }
    let (mut ax, mut bx) = order(x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
    let (mut ay, mut by) = order(y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
    if bx - ax < MIN_SIDE_TRIGGER {
        (ax, bx) = expand_side(ax, bx);
    }
    if by - ay < MIN_SIDE_TRIGGER {
        (ay, by) = expand_side(ay, by);
    }
    Ok(Box::new(ax, ay, bx, by))
}

fn order(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn expand_side(a: f64, b: f64) -> (f64, f64) {
    let half = MIN_SIDE / 2.0;
    let c = ((a + b) / 2.0).clamp(half, 1.0 - half);
    (c - half, c + half)
}
