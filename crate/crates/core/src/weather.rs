//! Procedural road scenes and parametric weather corruption.
//!
//! Scenes are gray-road trapezoids over a textured background with a
//! gradient sky band; the label is the exact rasterization of the road
//! polygon. Corruptions provide severity axes: fog visibility in meters
//! (Koschmieder attenuation against a row-linear depth proxy), rain
//! intensity in millimeters (seeded anti-aliased streaks plus blur), and a
//! night luminance factor (gamma curve plus sensor noise). Every function
//! here is a pure map of (inputs, seed); corruptions never touch labels.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{BinaryMask, Tensor};

/// Fixed fog airlight intensity.
pub const AIRLIGHT: f64 = 0.8;
/// Depth proxy of the bottom image row, meters.
pub const DEPTH_NEAR: f64 = 5.0;
/// Depth proxy of the top image row, meters.
pub const DEPTH_FAR: f64 = 300.0;

/// Weather corruption axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Fog,
    Rain,
    Night,
}

/// A corruption with its severity: fog visibility V in meters (30-750),
/// rain intensity in mm (1-200), or night luminance factor in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl CorruptionSpec {
    pub fn fog(visibility_m: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Fog,
            severity: visibility_m,
        }
    }

    pub fn rain(mm: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Rain,
            severity: mm,
        }
    }

    pub fn night(factor: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Night,
            severity: factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            CorruptionKind::Fog => (30.0..=750.0).contains(&self.severity),
            CorruptionKind::Rain => (1.0..=200.0).contains(&self.severity),
            CorruptionKind::Night => self.severity > 0.0 && self.severity <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "severity {} out of range for {:?}",
                self.severity, self.kind
            )))
        }
    }

    /// Stable tag used to derive per-corruption RNG streams and group names.
    pub fn tag(&self) -> String {
        match self.kind {
            CorruptionKind::Fog => format!("fog_{}", self.severity),
            CorruptionKind::Rain => format!("rain_{}", self.severity),
            CorruptionKind::Night => format!("night_{}", self.severity),
        }
    }
}

/// One labeled image: `[3, h, w]` values in [0, 1], a road mask, the seed
/// it was generated from, and the corruption applied to it (if any).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub label: BinaryMask,
    pub seed: u64,
    pub corruption: Option<CorruptionSpec>,
}

/// Continuous-coordinate road quadrilateral: two horizontal edges at
/// `top_y` and `bottom_y`, linear sides.
#[derive(Clone, Copy, Debug)]
pub struct RoadQuad {
    pub top_y: f64,
    pub bottom_y: f64,
    pub top_left_x: f64,
    pub top_right_x: f64,
    pub bottom_left_x: f64,
    pub bottom_right_x: f64,
}

impl RoadQuad {
    /// Corners in drawing order (tl, tr, br, bl), for point-in-polygon tests.
    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.top_left_x, self.top_y),
            (self.top_right_x, self.top_y),
            (self.bottom_right_x, self.bottom_y),
            (self.bottom_left_x, self.bottom_y),
        ]
    }

    /// Row-interpolated horizontal extent at height `y`.
    fn span_at(&self, y: f64) -> (f64, f64) {
        let t = (y - self.top_y) / (self.bottom_y - self.top_y);
        (
            self.top_left_x + t * (self.bottom_left_x - self.top_left_x),
            self.top_right_x + t * (self.bottom_right_x - self.top_right_x),
        )
    }
}

/// The geometry drawn for a given scene seed. Exposed so tests can check
/// the rasterized label against an independent point-in-polygon oracle.
pub fn road_geometry(seed: u64, w: usize, h: usize) -> (RoadQuad, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "geometry"));
    let wf = w as f64;
    let hf = h as f64;
    let horizon_y = rng.random_range(0.25..0.40) * hf;
    let vanish_x = rng.random_range(0.35..0.65) * wf;
    let top_y = horizon_y + rng.random_range(0.02..0.08) * hf;
    let top_half = rng.random_range(0.01..0.05) * wf;
    let bottom_half = rng.random_range(0.30..0.45) * wf;
    let bottom_center = vanish_x + rng.random_range(-0.08..0.08) * wf;
    let quad = RoadQuad {
        top_y,
        bottom_y: hf,
        top_left_x: vanish_x - top_half,
        top_right_x: vanish_x + top_half,
        bottom_left_x: bottom_center - bottom_half,
        bottom_right_x: bottom_center + bottom_half,
    };
    (quad, horizon_y)
}

/// Deterministic labeled road scene. Road pixel fraction stays within
/// [0.1, 0.6] by construction of the geometry ranges.
pub fn generate_scene(seed: u64, w: usize, h: usize) -> Result<Scene> {
    if w < 16 || h < 16 {
        return Err(Error::InvalidInput(format!(
            "scene size must be at least 16x16, got {w}x{h}"
        )));
    }
    let (quad, horizon_y) = road_geometry(seed, w, h);
    let mut label = vec![0u8; h * w];
    for y in 0..h {
        let yc = y as f64 + 0.5;
        if yc < quad.top_y {
            continue;
        }
        let (xl, xr) = quad.span_at(yc);
        let row = &mut label[y * w..(y + 1) * w];
        for (x, cell) in row.iter_mut().enumerate() {
            let xc = x as f64 + 0.5;
            if xc >= xl && xc <= xr {
                *cell = 1;
            }
        }
    }
    let label = BinaryMask::new(h, w, label)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "texture"));
    let road_gray = rng.random_range(0.30..0.40);
    let ground_tint = rng.random_range(-0.05..0.05);
    // Per-scene illumination: global brightness and a mild white-balance
    // tilt. Clean scenes spanning lighting conditions force the model to
    // learn illumination-invariant road cues instead of absolute color.
    let brightness = rng.random_range(0.70..1.25);
    let warm = rng.random_range(-0.06..0.06);
    let mut image = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let noise = rng.random_range(-0.05..0.05);
            let idx = y * w + x;
            let (r, g, b) = if label.get(y, x) == 1 {
                let v = road_gray + noise;
                (v, v, v + 0.01)
            } else if (y as f64 + 0.5) < horizon_y {
                // Sky: vertical gradient from deep to pale blue.
                let t = (y as f64 + 0.5) / horizon_y;
                (
                    0.45 + 0.30 * t + 0.3 * noise,
                    0.60 + 0.22 * t + 0.3 * noise,
                    0.85 + 0.10 * t + 0.3 * noise,
                )
            } else {
                (
                    0.25 + ground_tint + noise,
                    0.52 + ground_tint + noise,
                    0.18 + ground_tint + noise,
                )
            };
            image[idx] = (r * brightness + warm).clamp(0.0, 1.0);
            image[h * w + idx] = (g * brightness).clamp(0.0, 1.0);
            image[2 * h * w + idx] = (b * brightness - warm).clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, h, w], image)?,
        label,
        seed,
        corruption: None,
    })
}

/// Row-linear depth proxy: `DEPTH_NEAR` at the bottom row rising to
/// `DEPTH_FAR` at the top (sky) rows.
pub fn depth_at_row(row: usize, h: usize) -> f64 {
    if h <= 1 {
        return DEPTH_NEAR;
    }
    let t = (h - 1 - row) as f64 / (h - 1) as f64;
    DEPTH_NEAR + (DEPTH_FAR - DEPTH_NEAR) * t
}

/// Koschmieder fog: `I' = I t + A (1 - t)` with `t = exp(-3.912 d / V)`.
pub fn apply_fog(image: &Tensor, visibility_m: f64) -> Result<Tensor> {
    if visibility_m <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "fog visibility must be positive, got {visibility_m}"
        )));
    }
    let shape = image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let beta = 3.912 / visibility_m;
    let mut out = image.data().to_vec();
    for c in 0..shape[0] {
        for y in 0..h {
            let t = (-beta * depth_at_row(y, h)).exp();
            let row = &mut out[(c * h + y) * w..(c * h + y + 1) * w];
            for v in row.iter_mut() {
                *v = (*v * t + AIRLIGHT * (1.0 - t)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Number of rain streaks drawn at `mm` on a `w`x`h` image.
pub fn rain_streak_count(mm: f64, w: usize, h: usize) -> usize {
    (mm * (w * h) as f64 / 4096.0).round() as usize
}

/// Seeded rain: near-vertical anti-aliased streaks alpha-blended toward a
/// bright value, then a 3x3 box blur whose strength grows with `mm`.
pub fn apply_rain(image: &Tensor, mm: f64, seed: u64) -> Result<Tensor> {
    if !(1.0..=200.0).contains(&mm) {
        return Err(Error::InvalidInput(format!(
            "rain intensity must be in [1, 200] mm, got {mm}"
        )));
    }
    let shape = image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rain"));
    let mut out = image.data().to_vec();
    let n = rain_streak_count(mm, w, h);
    for _ in 0..n {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let len = rng.random_range(6.0..14.0);
        let angle = rng.random_range(-15.0f64..15.0).to_radians();
        let (dx, dy) = (angle.sin(), angle.cos());
        let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
        let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
        let min_x = (x0.min(x1).floor() as isize - 1).max(0) as usize;
        let max_x = (x0.max(x1).ceil() as isize + 1).min(w as isize - 1) as usize;
        let min_y = (y0.min(y1).floor() as isize - 1).max(0) as usize;
        let max_y = (y0.max(y1).ceil() as isize + 1).min(h as isize - 1) as usize;
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let d = point_segment_distance(x as f64 + 0.5, y as f64 + 0.5, x0, y0, x1, y1);
                let coverage = (1.0 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let alpha = 0.4 * coverage;
                    for c in 0..shape[0] {
                        let idx = (c * h + y) * w + x;
                        out[idx] += alpha * (0.9 - out[idx]);
                    }
                }
            }
        }
    }
    // Blur strength grows linearly with intensity.
    let strength = (mm / 200.0).clamp(0.0, 1.0);
    let blurred = box_blur3(&out, shape[0], h, w);
    for (o, b) in out.iter_mut().zip(&blurred) {
        *o = ((1.0 - strength) * *o + strength * b).clamp(0.0, 1.0);
    }
    Tensor::new(shape, out)
}

fn point_segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * vx, y0 + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// 3x3 box blur with edge clamping, per channel.
fn box_blur3(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += data[(ch * h + yy) * w + xx];
                    }
                }
                out[(ch * h + y) * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// Seeded night: `I' = clip(factor * I^1.5 + N(0, 0.02), 0, 1)`.
pub fn apply_night(image: &Tensor, factor: f64, seed: u64) -> Result<Tensor> {
    if factor <= 0.0 || factor > 1.0 {
        return Err(Error::InvalidInput(format!(
            "night factor must be in (0, 1], got {factor}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "night"));
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| (factor * v.powf(1.5) + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Apply `spec` to a scene. The label is carried over untouched; the
/// corruption's RNG stream is derived from the scene seed and the spec tag.
pub fn corrupt(scene: &Scene, spec: CorruptionSpec) -> Result<Scene> {
    spec.validate()?;
    let image = match spec.kind {
        CorruptionKind::Fog => apply_fog(&scene.image, spec.severity)?,
        CorruptionKind::Rain => apply_rain(&scene.image, spec.severity, scene.seed)?,
        CorruptionKind::Night => apply_night(&scene.image, spec.severity, scene.seed)?,
    };
    Ok(Scene {
        image,
        label: scene.label.clone(),
        seed: scene.seed,
        corruption: Some(spec),
    })
}

/// Halve an image bilinearly (both extents must be even).
pub fn downsample_image(image: &Tensor) -> Result<Tensor> {
    let tape = crate::autograd::Tape::new();
    Ok(tape.constant(image.clone()).downsample2x()?.value())
}

/// Halve a label by nearest neighbor, top-left convention; stays binary.
pub fn downsample_label(label: &BinaryMask) -> Result<BinaryMask> {
    let (h, w) = (label.height(), label.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "label downsample needs even dimensions, got {h}x{w}"
        )));
    }
    let mut out = vec![0u8; (h / 2) * (w / 2)];
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            out[y * (w / 2) + x] = label.get(2 * y, 2 * x);
        }
    }
    BinaryMask::new(h / 2, w / 2, out)
}
