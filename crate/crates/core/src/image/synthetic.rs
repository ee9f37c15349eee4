//! Procedural character-like glyphs for desk-scale experiments.
//!
//! Each class is a fixed subset of 12 candidate strokes on a 3x3 anchor
//! grid, chosen from the class index alone so glyph identity is independent
//! of the run seed. Samples jitter the glyph with a small rotation,
//! translation and stroke-thickness change, and render dark strokes on a
//! light ground to mimic scanned handwriting polarity.

use super::RgbImage;
use crate::error::{Error, Result};
use crate::rng::mix;

pub const CANVAS: usize = 48;
pub const BACKGROUND: u8 = 245;
pub const STROKE: u8 = 25;
const MAX_CLASSES: usize = 50;

/// Segment endpoints on the 3x3 anchor grid (indices row-major, pixel
/// coordinates 8/24/40): six horizontal strokes and six vertical strokes.
const SEGMENTS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (0, 3),
    (3, 6),
    (1, 4),
    (4, 7),
    (2, 5),
    (5, 8),
];

fn anchor(index: usize) -> (f64, f64) {
    let gx = (index % 3) as f64;
    let gy = (index / 3) as f64;
    (8.0 + gx * 16.0, 8.0 + gy * 16.0)
}

/// 12-bit stroke mask for a class: hashed from the class index, re-hashed
/// until the stroke count lands in 4..=7 and the mask is unused. Pure in
/// `class`, so class k draws the same glyph in every dataset.
pub fn class_pattern(class: usize) -> u16 {
    let mut taken = Vec::with_capacity(class + 1);
    for c in 0..=class {
        let mut salt = 0u64;
        let mask = loop {
            let mask = (mix((c as u64) << 8 | salt) & 0xfff) as u16;
            let bits = mask.count_ones();
            if (4..=7).contains(&bits) && !taken.contains(&mask) {
                break mask;
            }
            salt += 1;
        };
        taken.push(mask);
    }
    taken[class]
}

/// Per-sample render parameters, derived from (seed, class, index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub angle_deg: f64,
    pub dx: f64,
    pub dy: f64,
    pub thickness: f64,
}

pub fn sample_jitter(seed: u64, class: usize, index: usize) -> Jitter {
    let h = mix(seed ^ mix((class as u64) << 32 | index as u64));
    let unit = |bits: u64| (bits & 0xffff) as f64 / 65535.0;
    Jitter {
        angle_deg: (unit(h) * 2.0 - 1.0) * 8.0,
        dx: (unit(h >> 16) * 2.0 - 1.0) * 3.0,
        dy: (unit(h >> 32) * 2.0 - 1.0) * 3.0,
        thickness: if h >> 63 == 0 { 2.0 } else { 3.0 },
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (vx, vy) = (bx - ax, by - ay);
    let len_sq = vx * vx + vy * vy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((px - ax) * vx + (py - ay) * vy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one sample as a 3-channel dark-on-light image.
pub fn render_sample(class: usize, jitter: &Jitter) -> RgbImage {
    let pattern = class_pattern(class);
    let theta = jitter.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (CANVAS as f64 - 1.0) / 2.0;

    // Transform the anchor geometry once; rendering is then a distance test.
    let strokes: Vec<((f64, f64), (f64, f64))> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| pattern & (1 << i) != 0)
        .map(|(_, &(a, b))| {
            let place = |(x, y): (f64, f64)| {
                let (dx, dy) = (x - c, y - c);
                (cos * dx - sin * dy + c + jitter.dx, sin * dx + cos * dy + c + jitter.dy)
            };
            (place(anchor(a)), place(anchor(b)))
        })
        .collect();

    let mut data = Vec::with_capacity(CANVAS * CANVAS * 3);
    let edge = 0.8;
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let (px, py) = (x as f64, y as f64);
            let d = strokes
                .iter()
                .map(|&(a, b)| dist_to_segment(px, py, a, b))
                .fold(f64::INFINITY, f64::min);
            // Soft-edged stroke: full ink inside the radius, linear falloff.
            let cover = ((jitter.thickness + edge - d) / edge).clamp(0.0, 1.0);
            let v = (BACKGROUND as f64 + (STROKE as f64 - BACKGROUND as f64) * cover)
                .round() as u8;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    RgbImage { width: CANVAS, height: CANVAS, data }
}

/// Identity record for one synthetic sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSample {
    pub class: usize,
    pub index: usize,
    pub image: RgbImage,
}

/// Render `per_class` samples for each of `classes` classes. Deterministic
/// in (classes, per_class, seed), bit for bit.
pub fn generate(classes: usize, per_class: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::config(format!(
            "synthetic classes must be 1..={MAX_CLASSES}, got {classes}"
        )));
    }
    if per_class < 2 {
        return Err(Error::config(format!(
            "synthetic per-class count must be >= 2, got {per_class}"
        )));
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for index in 0..per_class {
            let jitter = sample_jitter(seed, class, index);
            out.push(SyntheticSample { class, index, image: render_sample(class, &jitter) });
        }
    }
    Ok(out)
}
