//! Synthetic CT-like phantoms with elliptical lesions and exact ground-truth
//! boxes, plus the multi-window intensity transform and dataset persistence.
//!
//! Values are HU-like: a dark background around -200 with a random linear
//! gradient and pixel noise, and bright elliptical lesions (offset
//! +100..+400). The ranges are chosen so all three HU windows produce
//! non-degenerate channels.
//!
//! On disk a dataset is a `manifest.json` plus `raster.bin` holding the
//! images as little-endian f32, row-major, samples concatenated.

use crate::geometry::Box;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Organ-specific HU windows as `(width, level)`: chest, soft tissue, abdomen.
pub const HU_WINDOWS: [(f64, f64); 3] = [(1200.0, -600.0), (400.0, 50.0), (200.0, 30.0)];

/// Bump when the generator's sampling scheme changes.
pub const GENERATOR_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const RASTER_FILE: &str = "raster.bin";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("raster length mismatch: expected {expected} bytes, found {actual}")]
    RasterLength { expected: u64, actual: u64 },
    #[error("raster offset of sample {index} is {found}, expected {expected}")]
    OffsetMismatch {
        index: usize,
        found: u64,
        expected: u64,
    },
    #[error("unsupported generator version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
}

/// Row-major grid of HU-like values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

/// A rotated ellipse in pixel coordinates with an additive intensity offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub intensity: f64,
}

/// One image with its exact lesion bounding boxes (pixel coordinates).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageGrid,
    pub lesions: Vec<Lesion>,
    pub gt_boxes: Vec<Box>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub image_id: String,
    /// Byte offset of this sample's grid inside the raster file.
    pub raster_offset: u64,
    pub lesions: Vec<Lesion>,
    pub gt_boxes: Vec<Box>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub image_h: usize,
    pub image_w: usize,
    pub count: usize,
    pub seed: u64,
    pub samples: Vec<SampleMeta>,
}

/// Tight axis-aligned bounding box of a rotated ellipse.
pub fn ellipse_bbox(l: &Lesion) -> Box {
    let (s, c) = l.theta.sin_cos();
    let half_w = (l.a * l.a * c * c + l.b * l.b * s * s).sqrt();
    let half_h = (l.a * l.a * s * s + l.b * l.b * c * c).sqrt();
    Box::new(l.cx - half_w, l.cy - half_h, l.cx + half_w, l.cy + half_h)
}

/// True if the pixel-center point `(x, y)` lies inside the lesion's ellipse.
pub fn lesion_contains(l: &Lesion, x: f64, y: f64) -> bool {
    let (s, c) = l.theta.sin_cos();
    let dx = x - l.cx;
    let dy = y - l.cy;
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / l.a).powi(2) + (v / l.b).powi(2) <= 1.0
}

const LESION_COUNT_WEIGHTS: [(usize, f64); 4] =
    [(0, 0.1), (1, 0.5), (2, 0.3), (3, 0.1)];
const SEMI_AXIS_RANGE: (f64, f64) = (5.0, 16.0);
const INTENSITY_RANGE: (f64, f64) = (100.0, 400.0);
const BACKGROUND_HU: f64 = -200.0;
const GRADIENT_MAX: f64 = 100.0;
const PIXEL_NOISE_STD: f64 = 30.0;
const OVERLAP_IOU_MAX: f64 = 0.2;
const PLACEMENT_TRIES: usize = 1000;
const BORDER_MARGIN: f64 = 2.0;

/// Generate one phantom. The caller owns the rng stream and the id.
pub fn generate_sample(rng: &mut impl Rng, size: usize, image_id: String) -> Sample {
    let (w, h) = (size, size);
    let grad_phi = rng.random::<f64>() * std::f64::consts::TAU;
    let grad_amp = rng.random::<f64>() * GRADIENT_MAX;

    let count = {
        let r = rng.random::<f64>();
        let mut acc = 0.0;
        let mut chosen = LESION_COUNT_WEIGHTS[0].0;
        for (k, p) in LESION_COUNT_WEIGHTS {
            acc += p;
            if r < acc {
                chosen = k;
                break;
            }
            chosen = k;
        }
        chosen
    };

    let mut lesions: Vec<Lesion> = Vec::with_capacity(count);
    let mut boxes: Vec<Box> = Vec::with_capacity(count);
    for _ in 0..count {
        for _try in 0..PLACEMENT_TRIES {
            let a = SEMI_AXIS_RANGE.0 + rng.random::<f64>() * (SEMI_AXIS_RANGE.1 - SEMI_AXIS_RANGE.0);
            let b = SEMI_AXIS_RANGE.0 + rng.random::<f64>() * (SEMI_AXIS_RANGE.1 - SEMI_AXIS_RANGE.0);
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let intensity =
                INTENSITY_RANGE.0 + rng.random::<f64>() * (INTENSITY_RANGE.1 - INTENSITY_RANGE.0);
            let probe = Lesion {
                cx: 0.0,
                cy: 0.0,
                a,
                b,
                theta,
                intensity,
            };
            let half = ellipse_bbox(&probe);
            let (half_w, half_h) = (half.x2, half.y2);
            let lo_x = half_w + BORDER_MARGIN;
            let hi_x = w as f64 - half_w - BORDER_MARGIN;
            let lo_y = half_h + BORDER_MARGIN;
            let hi_y = h as f64 - half_h - BORDER_MARGIN;
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let cx = lo_x + rng.random::<f64>() * (hi_x - lo_x);
            let cy = lo_y + rng.random::<f64>() * (hi_y - lo_y);
            let lesion = Lesion {
                cx,
                cy,
                ..probe
            };
            let bbox = ellipse_bbox(&lesion);
            if boxes
                .iter()
                .all(|b| crate::geometry::iou(b, &bbox) <= OVERLAP_IOU_MAX)
            {
                lesions.push(lesion);
                boxes.push(bbox);
                break;
            }
        }
    }

    let mut data = vec![0.0f32; w * h];
    for py in 0..h {
        for px in 0..w {
            let u = (px as f64 + 0.5) / w as f64 - 0.5;
            let v = (py as f64 + 0.5) / h as f64 - 0.5;
            let noise: f64 = rng.sample(StandardNormal);
            let mut val = BACKGROUND_HU
                + grad_amp * (u * grad_phi.cos() + v * grad_phi.sin())
                + PIXEL_NOISE_STD * noise;
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            for l in &lesions {
                if lesion_contains(l, x, y) {
                    val += l.intensity;
                }
            }
            data[py * w + px] = val as f32;
        }
    }

    Sample {
        image_id,
        image: ImageGrid { h, w, data },
        lesions,
        gt_boxes: boxes,
    }
}

/// Derive the rng stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Generate `count` samples with per-sample derived rng streams.
pub fn generate_dataset(seed: u64, count: usize, size: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| generate_sample(&mut sample_rng(seed, i), size, sample_id(i)))
        .collect()
}

/// Linear HU window: `clamp((v - (level - width/2)) / width, 0, 1)`.
pub fn window_transform(image: &ImageGrid, width: f64, level: f64) -> Vec<f64> {
    let lo = level - width / 2.0;
    image
        .data
        .iter()
        .map(|&v| ((v as f64 - lo) / width).clamp(0.0, 1.0))
        .collect()
}

/// The three windowed channels of an image, each in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MultiWindow {
    pub h: usize,
    pub w: usize,
    pub channels: [Vec<f64>; 3],
}

pub fn multi_window(image: &ImageGrid) -> MultiWindow {
    let channels = HU_WINDOWS.map(|(width, level)| window_transform(image, width, level));
    MultiWindow {
        h: image.h,
        w: image.w,
        channels,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `manifest.json` and `raster.bin` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, samples: &[Sample], seed: u64) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (image_h, image_w) = samples
        .first()
        .map(|s| (s.image.h, s.image.w))
        .unwrap_or((0, 0));
    let stride = (image_h * image_w * 4) as u64;

    let raster_path = dir.join(RASTER_FILE);
    let mut raster = std::io::BufWriter::new(
        std::fs::File::create(&raster_path).map_err(|e| io_err(&raster_path, e))?,
    );
    let mut metas = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for &v in &s.image.data {
            raster
                .write_all(&v.to_le_bytes())
                .map_err(|e| io_err(&raster_path, e))?;
        }
        metas.push(SampleMeta {
            image_id: s.image_id.clone(),
            raster_offset: i as u64 * stride,
            lesions: s.lesions.clone(),
            gt_boxes: s.gt_boxes.clone(),
        });
    }
    raster.flush().map_err(|e| io_err(&raster_path, e))?;

    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION,
        image_h,
        image_w,
        count: samples.len(),
        seed,
        samples: metas,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let file =
        std::fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &manifest)?;
    writer.write_all(b"\n").map_err(|e| io_err(&manifest_path, e))?;
    writer.flush().map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

/// Read a dataset back; the inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>), DatasetError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(DatasetError::Version {
            found: manifest.generator_version,
            supported: GENERATOR_VERSION,
        });
    }

    let stride = (manifest.image_h * manifest.image_w * 4) as u64;
    let raster_path = dir.join(RASTER_FILE);
    let mut file = std::fs::File::open(&raster_path).map_err(|e| io_err(&raster_path, e))?;
    let actual = file
        .metadata()
        .map_err(|e| io_err(&raster_path, e))?
        .len();
    let expected = manifest.count as u64 * stride;
    if actual != expected {
        return Err(DatasetError::RasterLength { expected, actual });
    }

    let mut bytes = Vec::with_capacity(expected as usize);
    file.read_to_end(&mut bytes)
        .map_err(|e| io_err(&raster_path, e))?;

    let mut samples = Vec::with_capacity(manifest.count);
    for (i, meta) in manifest.samples.iter().enumerate() {
        let expected_offset = i as u64 * stride;
        if meta.raster_offset != expected_offset {
            return Err(DatasetError::OffsetMismatch {
                index: i,
                found: meta.raster_offset,
                expected: expected_offset,
            });
        }
        let start = expected_offset as usize;
        let data: Vec<f32> = bytes[start..start + stride as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        samples.push(Sample {
            image_id: meta.image_id.clone(),
            image: ImageGrid {
                h: manifest.image_h,
                w: manifest.image_w,
                data,
            },
            lesions: meta.lesions.clone(),
            gt_boxes: meta.gt_boxes.clone(),
        });
    }
    Ok((manifest, samples))
}
