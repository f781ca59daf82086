//! Paired-data synthesis: aligned real faces, seeded in-plane misalignment,
//! procedural stylizers, and the on-disk pair manifest.

pub mod faces;
pub mod manifest;
pub mod style;

use std::path::Path;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::random;
use crate::stn::{self, AffineParams};
use crate::tensor::Tensor;

pub use manifest::{build_manifest, ManifestSpec, PairManifest, PairRecord, Split};
pub use style::{stylize, StyleSpec};

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(h > 0 && w > 0, "image extents must be positive, got {h}x{w}");
        ensure!(
            data.len() == 3 * h * w,
            "{h}x{w} RGB image needs {} values, got {}",
            3 * h * w,
            data.len()
        );
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.h, self.w], self.data.clone()).expect("valid image")
    }

    /// Item `i` of an `[N, 3, H, W]` batch.
    pub fn from_batch(t: &Tensor, i: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        ensure!(c == 3, "expected 3 channels, got {c}");
        Self::new(h, w, t.slice_batch(i, 1)?.into_data())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f64
    }

    /// 8-bit quantization, the precision images are stored at.
    pub fn quantized(&self) -> Self {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut rgb = image::RgbImage::new(self.w as u32, self.h as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                px.0[c] = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let mut out = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Center-crops to a square and resamples to `out_res` with bilinear
/// interpolation at pixel centers (edge values repeat outside).
pub fn crop_resize(img: &Image, out_res: usize) -> Result<Image> {
    ensure!(out_res > 0, "output resolution must be positive");
    let side = img.h.min(img.w);
    let (oy, ox) = ((img.h - side) / 2, (img.w - side) / 2);
    if side == out_res {
        return Ok(Image::from_fn(out_res, out_res, |c, y, x| img.get(c, y + oy, x + ox)));
    }
    let scale = side as f64 / out_res as f64;
    let src = |i: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, p - i0 as f64)
    };
    Ok(Image::from_fn(out_res, out_res, |c, y, x| {
        let (y0, y1, fy) = src(y);
        let (x0, x1, fx) = src(x);
        let g = |yy: usize, xx: usize| img.get(c, yy + oy, xx + ox);
        (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
    }))
}

/// Loads every decodable PNG in `face_dir` (sorted by file name), cropped
/// and resized to `out_res`. Undecodable files are skipped with a warning.
pub fn ingest(face_dir: &Path, out_res: usize) -> Result<Vec<(String, Image)>> {
    let entries = std::fs::read_dir(face_dir).map_err(|e| Error::io(face_dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match Image::read_png(&p) {
            Ok(img) => {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out.push((name, crop_resize(&img, out_res)?));
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no decodable PNG images in {}",
            face_dir.display()
        )));
    }
    Ok(out)
}

/// Ranges of the seeded misalignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbRanges {
    pub rot_max_deg: f64,
    /// Maximum shift as a fraction of the image size.
    pub trans_max: f64,
    pub scale: (f64, f64),
}

impl Default for PerturbRanges {
    fn default() -> Self {
        Self {
            rot_max_deg: 30.0,
            trans_max: 0.1,
            scale: (0.9, 1.1),
        }
    }
}

impl PerturbRanges {
    pub const NONE: PerturbRanges = PerturbRanges {
        rot_max_deg: 0.0,
        trans_max: 0.0,
        scale: (1.0, 1.0),
    };
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// The similarity transform drawn for `seed`.
pub fn perturbation(seed: u64, ranges: &PerturbRanges) -> AffineParams {
    let mut rng = random::stream(seed, random::label("perturb"));
    let angle = draw(&mut rng, -ranges.rot_max_deg, ranges.rot_max_deg).to_radians();
    let scale = draw(&mut rng, ranges.scale.0, ranges.scale.1);
    // normalized coordinates span 2 units across the image
    let tx = 2.0 * draw(&mut rng, -ranges.trans_max, ranges.trans_max);
    let ty = 2.0 * draw(&mut rng, -ranges.trans_max, ranges.trans_max);
    AffineParams::similarity(angle, scale, tx, ty)
}

/// Resamples `img` at `params` applied to each target pixel; zero outside.
pub fn warp(img: &Image, params: AffineParams) -> Result<Image> {
    let grid = stn::affine_grid(params, img.h, img.w)?;
    let out = stn::bilinear_sample(&img.to_tensor(), &grid)?;
    Image::new(img.h, img.w, out.into_data())
}

pub fn perturb_affine(img: &Image, seed: u64, ranges: &PerturbRanges) -> Result<Image> {
    warp(img, perturbation(seed, ranges))
}

#[cfg(test)]
mod tests;
