use std::f64::consts::PI;

use rand::Rng;

use super::Image;
use crate::random;

/// Parameters of one procedural stylizer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSpec {
    pub style_id: u32,
    /// Gaussian smoothing sigma as a fraction of the image width.
    pub smooth_sigma: f64,
    /// Per-channel cubic `c0 + c1 v + c2 v^2 + c3 v^3`.
    pub palette: [[f64; 4]; 3],
    /// Strength of the dark overlay along Sobel edges.
    pub edge_blend: f64,
    /// Texture cycles across the image.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub texture_angle: f64,
    pub texture_phase: [f64; 3],
}

impl StyleSpec {
    pub const IDENTITY_PALETTE: [[f64; 4]; 3] = [[0.0, 1.0, 0.0, 0.0]; 3];

    /// Deterministic parameters for `style_id`.
    pub fn from_id(style_id: u32) -> Self {
        let mut rng = random::stream(random::label("style"), style_id as u64);
        let mut palette = [[0.0; 4]; 3];
        for p in &mut palette {
            // a cubic through roughly (0, lo) and (1, hi) with a random bend
            let lo = rng.random_range(0.0..0.35);
            let hi = rng.random_range(0.6..1.0);
            let bend = rng.random_range(-1.2..1.2);
            let twist = rng.random_range(-1.0..1.0);
            let c1 = hi - lo - bend - twist;
            *p = [lo, c1, bend, twist];
        }
        Self {
            style_id,
            smooth_sigma: rng.random_range(0.01..0.035),
            palette,
            edge_blend: rng.random_range(0.3..0.8),
            texture_freq: rng.random_range(3.0..9.0),
            texture_amp: rng.random_range(0.05..0.2),
            texture_angle: rng.random_range(0.0..PI),
            texture_phase: [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ],
        }
    }

    /// A stylizer that changes nothing.
    pub fn neutral(style_id: u32) -> Self {
        Self {
            style_id,
            smooth_sigma: 0.0,
            palette: Self::IDENTITY_PALETTE,
            edge_blend: 0.0,
            texture_freq: 0.0,
            texture_amp: 0.0,
            texture_angle: 0.0,
            texture_phase: [0.0; 3],
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur of one channel with edge values repeated.
fn blur(ch: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let clampi = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * ch[y * w + clampi(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clampi(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sobel gradient magnitude of `lum`, with edge values repeated.
fn sobel(lum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: i64, x: i64| lum[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Smoothing, palette remap, edge darkening and texture, then clamping.
pub fn stylize(img: &Image, style: &StyleSpec) -> Image {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let sigma_px = style.smooth_sigma * w as f64;
    let mut chans: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let ch = img.channel(c);
            if sigma_px > 0.0 {
                blur(ch, h, w, &gaussian_kernel(sigma_px))
            } else {
                ch.to_vec()
            }
        })
        .collect();

    for (ch, p) in chans.iter_mut().zip(&style.palette) {
        for v in ch.iter_mut() {
            let x = *v;
            *v = p[0] + x * (p[1] + x * (p[2] + x * p[3]));
        }
    }

    if style.edge_blend > 0.0 {
        let lum: Vec<f64> = (0..n)
            .map(|i| 0.299 * chans[0][i] + 0.587 * chans[1][i] + 0.114 * chans[2][i])
            .collect();
        let edges = sobel(&lum, h, w);
        for ch in &mut chans {
            for (v, e) in ch.iter_mut().zip(&edges) {
                *v *= 1.0 - style.edge_blend * e.min(1.0);
            }
        }
    }

    if style.texture_amp > 0.0 {
        let (s, c) = style.texture_angle.sin_cos();
        for (ch, phase) in chans.iter_mut().zip(style.texture_phase) {
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * c + y as f64 * s) / w as f64;
                    ch[y * w + x] *= 1.0 + style.texture_amp * (2.0 * PI * style.texture_freq * u + phase).sin();
                }
            }
        }
    }

    let data = chans.concat().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image::new(h, w, data).expect("same extents")
}
