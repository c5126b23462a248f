//! Procedural glyph rendering. A character is a small set of lattice strokes;
//! a style is a transform (slant, stroke weight, corner rounding, contrast)
//! applied identically to every character.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, TAG_CHAR, TAG_STYLE};

/// One straight stroke, endpoints in unit glyph coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Stroke {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Stroke {
    /// Canonical integer signature on the stroke lattice, endpoint order
    /// normalized, for dedup within and across characters.
    fn signature(&self) -> (u8, u8, u8, u8) {
        let q = |v: f32| ((v - GRID_LO) / GRID_STEP).round() as u8;
        let a = (q(self.x0), q(self.y0));
        let b = (q(self.x1), q(self.y1));
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        (a.0, a.1, b.0, b.1)
    }
}

const GRID_N: u32 = 5;
const GRID_LO: f32 = 0.18;
const GRID_HI: f32 = 0.82;
const GRID_STEP: f32 = (GRID_HI - GRID_LO) / (GRID_N - 1) as f32;

/// Base stroke half-width in unit coordinates, before style weighting.
const BASE_HALF_WIDTH: f32 = 0.045;

/// Style parameter ranges, all in unit coordinates (resolution independent).
const THICKNESS_RANGE: (f32, f32) = (-0.017, 0.019);
const SLANT_RANGE: (f32, f32) = (-0.22, 0.22);
const ROUNDING_MAX: f32 = 0.0155;
const FG_RANGE: (f32, f32) = (0.78, 1.0);
const BG_MAX: f32 = 0.12;

/// Minimum normalized L-inf distance between any two styles of one corpus.
const STYLE_SEPARATION: f32 = 0.22;

fn grid(i: u32) -> f32 {
    GRID_LO + i as f32 * GRID_STEP
}

/// Rendering parameters for one style. Distances are fractions of the glyph
/// box so the same style renders consistently at any raster size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Stroke weight delta: positive dilates, negative erodes.
    pub thickness: f32,
    /// Horizontal shear; positive leans the glyph top to the right.
    pub slant: f32,
    /// Radius of the morphological open/close pass that rounds corners.
    pub rounding: f32,
    /// Ink level.
    pub fg: f32,
    /// Paper level.
    pub bg: f32,
}

impl StyleParams {
    /// The neutral reference style: upright, unmodified weight, full contrast.
    pub fn neutral() -> Self {
        StyleParams { thickness: 0.0, slant: 0.0, rounding: 0.0, fg: 1.0, bg: 0.0 }
    }

    fn normalized(&self) -> [f32; 5] {
        [
            (self.thickness - THICKNESS_RANGE.0) / (THICKNESS_RANGE.1 - THICKNESS_RANGE.0),
            (self.slant - SLANT_RANGE.0) / (SLANT_RANGE.1 - SLANT_RANGE.0),
            self.rounding / ROUNDING_MAX,
            (self.fg - FG_RANGE.0) / (FG_RANGE.1 - FG_RANGE.0),
            self.bg / BG_MAX,
        ]
    }

    fn distance(&self, other: &StyleParams) -> f32 {
        let a = self.normalized();
        let b = other.normalized();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }
}

/// Draws the style for `style_id`, rejecting candidates too close to already
/// drawn styles so an eight-style corpus stays visually separable.
pub(crate) fn style_params(seed: u64, style_id: u32, prev: &[StyleParams]) -> StyleParams {
    if style_id == 0 {
        return StyleParams::neutral();
    }
    let mut best = StyleParams::neutral();
    let mut best_sep = -1.0f32;
    for attempt in 0..64u64 {
        let mut rng = substream(seed, TAG_STYLE, style_id as u64 | (attempt << 32));
        let cand = StyleParams {
            thickness: rng.random_range(THICKNESS_RANGE.0..=THICKNESS_RANGE.1),
            slant: rng.random_range(SLANT_RANGE.0..=SLANT_RANGE.1),
            rounding: rng.random_range(0.0..=ROUNDING_MAX),
            fg: rng.random_range(FG_RANGE.0..=FG_RANGE.1),
            bg: rng.random_range(0.0..=BG_MAX),
        };
        let sep = prev.iter().map(|p| cand.distance(p)).fold(f32::INFINITY, f32::min);
        if sep >= STYLE_SEPARATION {
            return cand;
        }
        if sep > best_sep {
            best_sep = sep;
            best = cand;
        }
    }
    // Dense corpora may not admit the full margin; keep the best candidate.
    best
}

/// Draws the stroke set for `content_id`. `taken` holds signatures of earlier
/// characters in the same corpus; identical shapes are redrawn.
pub(crate) fn char_strokes(
    seed: u64,
    content_id: u32,
    taken: &mut std::collections::BTreeSet<Vec<(u8, u8, u8, u8)>>,
) -> Vec<Stroke> {
    for attempt in 0..64u64 {
        let mut rng = substream(seed, TAG_CHAR, content_id as u64 | (attempt << 32));
        let n = rng.random_range(3..=6usize);
        let mut strokes: Vec<Stroke> = Vec::with_capacity(n);
        let mut guard = 0;
        while strokes.len() < n && guard < 200 {
            guard += 1;
            let s = random_stroke(&mut rng);
            if strokes.iter().all(|t| t.signature() != s.signature()) {
                strokes.push(s);
            }
        }
        if strokes.len() < 3 {
            continue;
        }
        let mut sig: Vec<_> = strokes.iter().map(Stroke::signature).collect();
        sig.sort_unstable();
        if taken.insert(sig) {
            return strokes;
        }
    }
    // 25 lattice points and 3..6 strokes give far more shapes than any
    // plausible character count; exhausting 64 redraws means a logic bug.
    unreachable!("could not draw a distinct character after 64 attempts")
}

fn random_stroke(rng: &mut impl Rng) -> Stroke {
    match rng.random_range(0..4u32) {
        // Horizontal.
        0 => {
            let y = grid(rng.random_range(0..GRID_N));
            let i0 = rng.random_range(0..GRID_N - 1);
            let i1 = rng.random_range(i0 + 1..GRID_N);
            Stroke { x0: grid(i0), y0: y, x1: grid(i1), y1: y }
        }
        // Vertical.
        1 => {
            let x = grid(rng.random_range(0..GRID_N));
            let i0 = rng.random_range(0..GRID_N - 1);
            let i1 = rng.random_range(i0 + 1..GRID_N);
            Stroke { x0: x, y0: grid(i0), x1: x, y1: grid(i1) }
        }
        // Diagonals, both orientations, 45 degrees on the lattice.
        _ => {
            let len = rng.random_range(1..=2u32);
            let x0 = rng.random_range(0..GRID_N - len);
            let y0 = rng.random_range(0..GRID_N - len);
            if rng.random_range(0..2u32) == 0 {
                Stroke { x0: grid(x0), y0: grid(y0), x1: grid(x0 + len), y1: grid(y0 + len) }
            } else {
                Stroke { x0: grid(x0), y0: grid(y0 + len), x1: grid(x0 + len), y1: grid(y0) }
            }
        }
    }
}

/// Supersampling factor for rasterization; boxes down to the target size.
const SS: usize = 2;

/// Renders one character in one style at `size` x `size`.
pub(crate) fn render(strokes: &[Stroke], style: &StyleParams, size: usize) -> Vec<f32> {
    let r = size * SS;
    let rf = r as f32;
    let half_width = BASE_HALF_WIDTH * rf;

    // Shear the geometry about the glyph center line, then rasterize a
    // unioned distance field with one pixel of analytic antialiasing.
    let sheared: Vec<[f32; 4]> = strokes
        .iter()
        .map(|s| {
            let sx = |x: f32, y: f32| (x + style.slant * (0.5 - y)) * rf;
            [sx(s.x0, s.y0), s.y0 * rf, sx(s.x1, s.y1), s.y1 * rf]
        })
        .collect();

    let mut mask = vec![0.0f32; r * r];
    for y in 0..r {
        let py = y as f32 + 0.5;
        for x in 0..r {
            let px = x as f32 + 0.5;
            let mut cov = 0.0f32;
            for s in &sheared {
                let d = segment_distance(px, py, s);
                cov = cov.max((half_width - d + 0.5).clamp(0.0, 1.0));
            }
            mask[y * r + x] = cov;
        }
    }

    // Stroke weight, then corner rounding via open + close.
    let t = style.thickness * rf;
    if t > 0.05 {
        mask = dilate(&mask, r, t);
    } else if t < -0.05 {
        mask = erode(&mask, r, -t);
    }
    let rr = style.rounding * rf;
    if rr > 0.05 {
        mask = dilate(&erode(&mask, r, rr), r, rr);
        mask = erode(&dilate(&mask, r, rr), r, rr);
    }

    // Contrast remap and box downsample to the output grid.
    let mut out = vec![0.0f32; size * size];
    let inv = 1.0 / (SS * SS) as f32;
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0f32;
            for dy in 0..SS {
                for dx in 0..SS {
                    acc += mask[(y * SS + dy) * r + (x * SS + dx)];
                }
            }
            let m = acc * inv;
            out[y * size + x] = (style.bg + (style.fg - style.bg) * m).clamp(0.0, 1.0);
        }
    }
    out
}

fn segment_distance(px: f32, py: f32, s: &[f32; 4]) -> f32 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (abx, aby) = (bx - ax, by - ay);
    let (apx, apy) = (px - ax, py - ay);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn disk_offsets(radius: f32) -> Vec<(i32, i32)> {
    let ir = radius.floor() as i32;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -ir..=ir {
        for dx in -ir..=ir {
            if (dx * dx + dy * dy) as f32 <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn dilate(mask: &[f32], r: usize, radius: f32) -> Vec<f32> {
    morph(mask, r, radius, true)
}

fn erode(mask: &[f32], r: usize, radius: f32) -> Vec<f32> {
    morph(mask, r, radius, false)
}

fn morph(mask: &[f32], r: usize, radius: f32, grow: bool) -> Vec<f32> {
    let offsets = disk_offsets(radius);
    let mut out = vec![0.0f32; r * r];
    for y in 0..r as i32 {
        for x in 0..r as i32 {
            // Outside the canvas is paper; erosion near edges pulls to 0.
            let mut acc = if grow { 0.0f32 } else { 1.0f32 };
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                let v = if nx >= 0 && ny >= 0 && nx < r as i32 && ny < r as i32 {
                    mask[ny as usize * r + nx as usize]
                } else {
                    0.0
                };
                acc = if grow { acc.max(v) } else { acc.min(v) };
            }
            out[y as usize * r + x as usize] = acc;
        }
    }
    out
}
