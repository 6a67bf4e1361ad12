//! The face-like renderer and its rule-based attribute decoder.
//!
//! Layout on the 32×32 canvas (`x` is the column, `y` the row):
//!
//! | bit | attribute      | when set                                   |
//! |-----|----------------|--------------------------------------------|
//! | 0   | smile (class)  | mouth arc opens upward                     |
//! | 1   | eyes open      | 3×3 eye squares instead of closed lines    |
//! | 2   | dark backdrop  | background level −0.75 instead of −0.05    |
//! | 3   | frame          | 1 px bright border                         |
//! | 4   | hat            | bright band across the top of the head     |
//! | 5   | cheek marks    | two dark 2×2 dots on the cheeks            |
//!
//! The identity is one of eight background stripe textures.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AttributeVector;

pub const SIZE: usize = 32;
pub const NUM_IDENTITIES: usize = 8;
const FREQS: [(f64, f64); NUM_IDENTITIES] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
];

const HEAD_CX: f64 = 16.0;
const HEAD_CY: f64 = 17.0;
const HEAD_R: f64 = 10.5;
const INK: f64 = -0.9;
const BRIGHT: f64 = 0.95;

/// Continuous nuisance factors of one render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub head_tone: f64,
    pub mouth_curvature: f64,
    pub texture_phase: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            head_tone: 0.4,
            mouth_curvature: 0.11,
            texture_phase: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RendererParams {
    pub head_tone: (f64, f64),
    pub mouth_curvature: (f64, f64),
    pub texture_amplitude: f64,
    pub dark_level: f64,
    pub light_level: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for RendererParams {
    fn default() -> Self {
        Self {
            head_tone: (0.25, 0.55),
            mouth_curvature: (0.09, 0.13),
            texture_amplitude: 0.15,
            dark_level: -0.75,
            light_level: -0.05,
            noise: 0.02,
        }
    }
}

fn in_head(x: usize, y: usize) -> bool {
    let dx = x as f64 - HEAD_CX;
    let dy = y as f64 - HEAD_CY;
    dx * dx + dy * dy <= HEAD_R * HEAD_R
}

/// Renders one noiseless image in `[-1, 1]`, row-major `SIZE × SIZE`.
pub fn render(
    attrs: &AttributeVector,
    identity: usize,
    nuisance: &Nuisance,
    params: &RendererParams,
) -> Vec<f64> {
    let bit = |i: usize| attrs.get(i) == 1;
    let mut img = vec![0.0; SIZE * SIZE];
    let base = if bit(2) {
        params.dark_level
    } else {
        params.light_level
    };
    let (fx, fy) = FREQS[identity % NUM_IDENTITIES];
    for y in 0..SIZE {
        for x in 0..SIZE {
            img[y * SIZE + x] = if in_head(x, y) {
                nuisance.head_tone
            } else {
                let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / SIZE as f64;
                base + params.texture_amplitude * (arg + nuisance.texture_phase).sin()
            };
        }
    }
    let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, v: f64| {
        for y in y0..y1 {
            for x in x0..x1 {
                img[y * SIZE + x] = v;
            }
        }
    };
    if bit(4) {
        fill(9, 23, 3, 8, BRIGHT);
    }
    if bit(1) {
        fill(11, 14, 12, 15, INK);
        fill(19, 22, 12, 15, INK);
    } else {
        fill(10, 15, 13, 14, INK);
        fill(18, 23, 13, 14, INK);
    }
    if bit(5) {
        fill(7, 9, 19, 21, INK);
        fill(23, 25, 19, 21, INK);
    }
    if bit(3) {
        fill(0, SIZE, 0, 1, BRIGHT);
        fill(0, SIZE, SIZE - 1, SIZE, BRIGHT);
        fill(0, 1, 0, SIZE, BRIGHT);
        fill(SIZE - 1, SIZE, 0, SIZE, BRIGHT);
    }
    for (x, y) in mouth_pixels(bit(0), nuisance.mouth_curvature) {
        img[y * SIZE + x] = INK;
    }
    img
}

/// Pixels of the mouth arc, with vertical gaps between neighbouring
/// columns filled so the stroke stays connected.
pub fn mouth_pixels(smile: bool, kappa: f64) -> Vec<(usize, usize)> {
    let row = |x: usize| {
        let d = x as f64 - 16.0;
        let y = if smile {
            24.0 - kappa * d * d
        } else {
            21.0 + kappa * d * d
        };
        y.round() as usize
    };
    let mut px = Vec::new();
    let mut prev: Option<usize> = None;
    for x in 11..22 {
        let y = row(x);
        px.push((x, y));
        if let Some(p) = prev {
            let (lo, hi) = if p < y { (p, y) } else { (y, p) };
            for yy in lo + 1..hi {
                px.push((x, yy));
            }
        }
        prev = Some(y);
    }
    px
}

fn region_mean(img: &[f64], x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
    let mut s = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            s += img[y * SIZE + x];
        }
    }
    s / ((x1 - x0) * (y1 - y0)) as f64
}

/// Per-attribute decision margins of the rule decoder; positive means the
/// bit is set. Magnitudes well above the noise level indicate a clean,
/// in-family render.
pub fn rule_margins(img: &[f64]) -> [f64; 6] {
    assert_eq!(img.len(), SIZE * SIZE, "rule decoder expects a 32×32 image");
    let smile = region_mean(img, 15, 18, 21, 22) - region_mean(img, 15, 18, 24, 25);
    let open_rows = (region_mean(img, 11, 14, 12, 13)
        + region_mean(img, 11, 14, 14, 15)
        + region_mean(img, 19, 22, 12, 13)
        + region_mean(img, 19, 22, 14, 15))
        / 4.0;
    let eyes = -0.3 - open_rows;
    let back = (region_mean(img, 1, 6, 1, 5) + region_mean(img, 26, 31, 1, 5)) / 2.0;
    let dark = -0.4 - back;
    let border = (region_mean(img, 0, SIZE, 0, 1)
        + region_mean(img, 0, SIZE, SIZE - 1, SIZE)
        + region_mean(img, 0, 1, 1, SIZE - 1)
        + region_mean(img, SIZE - 1, SIZE, 1, SIZE - 1))
        / 4.0;
    let frame = border - 0.6;
    let hat = region_mean(img, 9, 23, 3, 8) - 0.6;
    let cheeks = -0.3 - (region_mean(img, 7, 9, 19, 21) + region_mean(img, 23, 25, 19, 21)) / 2.0;
    [smile, eyes, dark, frame, hat, cheeks]
}

pub fn rule_decode(img: &[f64]) -> AttributeVector {
    let m = rule_margins(img);
    let weakest = m.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if weakest < 0.1 {
        log::warn!("rule decoder: low-confidence image (smallest margin {weakest:.3})");
    }
    AttributeVector::new(m.iter().map(|&v| u8::from(v > 0.0)).collect())
}
