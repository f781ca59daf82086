//! Procedural aligned faces: each identity gets its own head shape, colors
//! and feature geometry, drawn at a canonical pose.

use rand::Rng;

use super::Image;
use crate::random;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceTraits {
    pub background: [[f64; 3]; 2],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub head: (f64, f64),
    pub hairline: f64,
    pub hair_length: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub brow_tilt: f64,
    pub nose_len: f64,
    pub mouth_w: f64,
    pub mouth_y: f64,
}

fn color(rng: &mut impl Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| rng.random_range(lo[i]..hi[i]))
}

impl FaceTraits {
    pub fn for_identity(identity: u32, seed: u64) -> Self {
        let mut rng = random::stream(seed, random::label("face") ^ identity as u64);
        let tone = rng.random_range(0.0..1.0);
        let skin = [0.45 + 0.5 * tone, 0.3 + 0.45 * tone, 0.2 + 0.4 * tone];
        Self {
            background: [color(&mut rng, [0.1; 3], [0.9; 3]), color(&mut rng, [0.1; 3], [0.9; 3])],
            skin,
            hair: color(&mut rng, [0.02, 0.02, 0.02], [0.7, 0.55, 0.4]),
            iris: color(&mut rng, [0.05, 0.1, 0.1], [0.5, 0.6, 0.8]),
            lips: color(&mut rng, [0.55, 0.15, 0.15], [0.9, 0.4, 0.45]),
            head: (rng.random_range(0.46..0.6), rng.random_range(0.6..0.76)),
            hairline: rng.random_range(-0.58..-0.32),
            hair_length: rng.random_range(0.0..0.7),
            eye_dx: rng.random_range(0.19..0.29),
            eye_y: rng.random_range(-0.12..0.0),
            eye_r: rng.random_range(0.07..0.11),
            brow_tilt: rng.random_range(-0.25..0.25),
            nose_len: rng.random_range(0.12..0.24),
            mouth_w: rng.random_range(0.13..0.27),
            mouth_y: rng.random_range(0.33..0.45),
        }
    }
}

/// Coverage of a shape with approximate signed distance `d` (negative inside)
/// for anti-aliased edges `px` wide.
fn cover(d: f64, px: f64) -> f64 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse.
fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
    (q.sqrt() - 1.0) * rx.min(ry)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for i in 0..3 {
        dst[i] += a * (src[i] - dst[i]);
    }
}

pub fn render(t: &FaceTraits, res: usize) -> Image {
    let px = 2.0 / res as f64;
    let mut pixels = vec![[0.0; 3]; res * res];
    for (i, out) in pixels.iter_mut().enumerate() {
        let (y, x) = (i / res, i % res);
        let u = (x as f64 + 0.5) * px - 1.0;
        let v = (y as f64 + 0.5) * px - 1.0;
        let fy = (v + 1.0) / 2.0;
        let mut c = [0, 1, 2].map(|k| (1.0 - fy) * t.background[0][k] + fy * t.background[1][k]);

        let (rx, ry) = t.head;
        let (hx, hy) = (0.0, 0.05);
        // hair behind the head, reaching down by hair_length
        let back = ellipse(u, v, hx, hy - 0.08, rx + 0.1, ry + 0.08).max(v - (hy + t.hair_length));
        blend(&mut c, t.hair, cover(back, px));
        // neck
        let neck = (u.abs() - 0.22 * rx / 0.5).max(0.3 - v);
        blend(&mut c, t.skin.map(|s| s * 0.85), cover(neck, px));
        let head = ellipse(u, v, hx, hy, rx, ry);
        blend(&mut c, t.skin, cover(head, px));
        // fringe: hair inside the head above a wavy hairline
        let line = t.hairline + 0.04 * (u * 9.0).sin();
        let fringe = (v - line).max(ellipse(u, v, hx, hy - 0.02, rx + 0.02, ry + 0.02));
        blend(&mut c, t.hair, cover(fringe, px));

        for side in [-1.0, 1.0] {
            let ex = side * t.eye_dx;
            let white = ellipse(u, v, ex, t.eye_y, t.eye_r * 1.5, t.eye_r);
            blend(&mut c, [0.95, 0.95, 0.92], cover(white, px));
            blend(&mut c, t.iris, cover(ellipse(u, v, ex, t.eye_y, t.eye_r * 0.75, t.eye_r * 0.75), px));
            blend(&mut c, [0.03; 3], cover(ellipse(u, v, ex, t.eye_y, t.eye_r * 0.35, t.eye_r * 0.35), px));
            // eyebrow, tilted outward by brow_tilt
            let by = t.eye_y - t.eye_r * 2.0 + side * t.brow_tilt * (u - ex);
            let brow = ((v - by).abs() - 0.025).max((u - ex).abs() - t.eye_r * 1.8);
            blend(&mut c, t.hair.map(|h| h * 0.8), cover(brow, px));
        }

        let nose_top = t.eye_y + 0.06;
        let nose = ((u.abs() - 0.035).max(nose_top - v)).max(v - nose_top - t.nose_len);
        blend(&mut c, t.skin.map(|s| s * 0.78), cover(nose, px));
        let mouth = ellipse(u, v, 0.0, t.mouth_y, t.mouth_w, 0.045);
        blend(&mut c, t.lips, cover(mouth, px));

        *out = c.map(|k| k.clamp(0.0, 1.0));
    }
    Image::from_fn(res, res, |c, y, x| pixels[y * res + x][c])
}

pub fn synthetic_face(identity: u32, res: usize, seed: u64) -> Image {
    render(&FaceTraits::for_identity(identity, seed), res)
}
