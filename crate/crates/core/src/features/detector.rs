use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::descriptor::BitDescriptor;
use super::pyramid::build_pyramid;
use super::{Descriptor, FeatureError, Keypoint, PyramidConfig};
use crate::imaging::GrayImage;

const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];
const ARC_LENGTH: usize = 9;
const DESCRIPTOR_BITS: usize = 256;
const PATTERN_SEED: u64 = 0x0b5e_ed5e_ed00_0256;
const PATTERN_EXTENT: i32 = 13;
const ORIENTATION_RADIUS: i32 = 15;
const GRID_CELLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Minimum intensity difference of the segment test.
    pub fast_threshold: u8,
    /// Border (in level pixels) excluded from detection so patches stay inside the image.
    pub edge: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            fast_threshold: 20,
            edge: 19,
        }
    }
}

fn pattern() -> &'static [((i32, i32), (i32, i32)); DESCRIPTOR_BITS] {
    static PATTERN: OnceLock<[((i32, i32), (i32, i32)); DESCRIPTOR_BITS]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let normal = Normal::new(0.0, 31.0 / 5.0).expect("valid sigma");
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = normal.sample(rng);
            (v.round() as i32).clamp(-PATTERN_EXTENT, PATTERN_EXTENT)
        };
        let mut out = [((0, 0), (0, 0)); DESCRIPTOR_BITS];
        for pair in out.iter_mut() {
            loop {
                let a = (draw(&mut rng), draw(&mut rng));
                let b = (draw(&mut rng), draw(&mut rng));
                if a != b {
                    *pair = (a, b);
                    break;
                }
            }
        }
        out
    })
}

/// Segment-test score; zero when the pixel is not a corner.
fn fast_score(img: &GrayImage, x: usize, y: usize, t: i32) -> i32 {
    let c = img.get(x, y) as i32;
    let mut ring = [0i32; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        ring[k] = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as i32;
    }
    let mut best = 0;
    for sign in [1i32, -1] {
        // longest circular run of pixels brighter (sign 1) or darker (sign -1) than c +- t
        let pass = |v: i32| sign * (v - c) > t;
        let mut run = 0usize;
        let mut longest = 0usize;
        for k in 0..32 {
            if pass(ring[k % 16]) {
                run += 1;
                longest = longest.max(run.min(16));
            } else {
                run = 0;
            }
        }
        if longest >= ARC_LENGTH {
            let s: i32 = ring.iter().map(|&v| (sign * (v - c) - t).max(0)).sum();
            best = best.max(s);
        }
    }
    best
}

fn detect_level(img: &GrayImage, det: &DetectorConfig) -> Vec<(usize, usize, i32)> {
    let (w, h) = (img.width(), img.height());
    let edge = det.edge.max(3);
    if w <= 2 * edge || h <= 2 * edge {
        return Vec::new();
    }
    let t = det.fast_threshold as i32;
    let mut scores = vec![0i32; w * h];
    for y in edge..h - edge {
        for x in edge..w - edge {
            scores[y * w + x] = fast_score(img, x, y, t);
        }
    }
    let mut out = Vec::new();
    for y in edge..h - edge {
        for x in edge..w - edge {
            let s = scores[y * w + x];
            if s == 0 {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = ((y as i32 + dy) as usize) * w + (x as i32 + dx) as usize;
                    let ns = scores[n];
                    // ties go to the earlier pixel in raster order
                    if ns > s || (ns == s && n < y * w + x) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                out.push((x, y, s));
            }
        }
    }
    out
}

fn orientation(img: &GrayImage, x: usize, y: usize) -> f64 {
    let r = ORIENTATION_RADIUS;
    let (mut m01, mut m10) = (0.0f64, 0.0f64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    let a = m01.atan2(m10);
    if a >= PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// 5x5 box blur with edge clamping, used to stabilize the pairwise comparisons.
fn box_blur(img: &GrayImage) -> Vec<u16> {
    let (w, h) = (img.width(), img.height());
    let mut horiz = vec![0u16; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0u16;
            for dx in -2i32..=2 {
                let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                s += img.get(xx, y) as u16;
            }
            horiz[y * w + x] = s;
        }
    }
    let mut out = vec![0u16; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0u16;
            for dy in -2i32..=2 {
                let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                s += horiz[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn describe(blurred: &[u16], w: usize, x: usize, y: usize, angle: f64) -> BitDescriptor {
    let (s, c) = angle.sin_cos();
    let rot = |(px, py): (i32, i32)| {
        let rx = (c * px as f64 - s * py as f64).round() as i32;
        let ry = (s * px as f64 + c * py as f64).round() as i32;
        ((y as i32 + ry) as usize) * w + (x as i32 + rx) as usize
    };
    let mut d = BitDescriptor::zeros(DESCRIPTOR_BITS);
    for (i, &(a, b)) in pattern().iter().enumerate() {
        d.set(i, blurred[rot(a)] < blurred[rot(b)]);
    }
    d
}

/// Built-in classical front-end: FAST-9 corners per pyramid level with orientation from
/// the intensity centroid and a steered 256-bit pairwise-comparison descriptor.
///
/// Keypoints are distributed over an 8x8 grid with a per-cell quota, and at most
/// `target_count` are returned, strongest response first.
pub fn detect_and_describe(
    image: &GrayImage,
    cfg: &PyramidConfig,
    target_count: usize,
    det: &DetectorConfig,
) -> Result<(Vec<Keypoint>, Vec<Descriptor>), FeatureError> {
    let pyramid = build_pyramid(image, cfg)?;
    let mut candidates: Vec<(Keypoint, BitDescriptor)> = Vec::new();
    for (octave, level) in pyramid.iter().enumerate() {
        let corners = detect_level(level, det);
        if corners.is_empty() {
            continue;
        }
        let blurred = box_blur(level);
        let scale = cfg.level_scale(octave);
        for (x, y, score) in corners {
            let angle = orientation(level, x, y);
            let desc = describe(&blurred, level.width(), x, y, angle);
            candidates.push((
                Keypoint {
                    x: (x as f64 + 0.5) * scale - 0.5,
                    y: (y as f64 + 0.5) * scale - 0.5,
                    octave,
                    scale,
                    orientation: angle,
                    response: score as f64,
                },
                desc,
            ));
        }
    }
    let selected = distribute(candidates, image.width(), image.height(), target_count);
    Ok(selected
        .into_iter()
        .map(|(k, d)| (k, Descriptor::Binary(d)))
        .unzip())
}

fn strength_order(a: &Keypoint, b: &Keypoint) -> std::cmp::Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.octave.cmp(&b.octave))
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

fn distribute(
    mut candidates: Vec<(Keypoint, BitDescriptor)>,
    width: usize,
    height: usize,
    target: usize,
) -> Vec<(Keypoint, BitDescriptor)> {
    candidates.sort_by(|a, b| strength_order(&a.0, &b.0));
    if candidates.len() <= target {
        return candidates;
    }
    let quota = target.div_ceil(GRID_CELLS * GRID_CELLS);
    let mut per_cell = vec![0usize; GRID_CELLS * GRID_CELLS];
    let mut taken = vec![false; candidates.len()];
    let mut selected = Vec::with_capacity(target);
    for (i, (k, _)) in candidates.iter().enumerate() {
        let cx = ((k.x.max(0.0) / width as f64) * GRID_CELLS as f64) as usize;
        let cy = ((k.y.max(0.0) / height as f64) * GRID_CELLS as f64) as usize;
        let cell = cy.min(GRID_CELLS - 1) * GRID_CELLS + cx.min(GRID_CELLS - 1);
        if per_cell[cell] < quota {
            per_cell[cell] += 1;
            taken[i] = true;
            selected.push(i);
        }
    }
    for (i, t) in taken.iter().enumerate() {
        if selected.len() >= target {
            break;
        }
        if !t {
            selected.push(i);
        }
    }
    let mut out: Vec<(Keypoint, BitDescriptor)> = selected
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect();
    out.sort_by(|a, b| strength_order(&a.0, &b.0));
    out.truncate(target);
    out
}
