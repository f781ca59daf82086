//! Spatial transformer layers: a localization network regresses a similarity
//! transform per batch item, a grid generator maps target pixels to source
//! coordinates, and a bilinear sampler warps the features.

use crate::autodiff::{Graph, Mode, Var, LEAKY_SLOPE};
use crate::error::{ensure, Result};
use crate::networks::layers::Ctx;
use crate::networks::params::{Init, ModelParams};
use crate::tensor::Tensor;

/// Spatial extent at which localization networks stop pooling; the final
/// unpadded 3x3 conv then leaves a 2x2 map.
const POOL_FLOOR: usize = 4;

/// Similarity transform `[[a, -b, tx], [b, a, ty]]` from target to source
/// normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// `angle` in radians; translation in normalized units.
    pub fn similarity(angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            a: v[0],
            b: v[1],
            tx: v[2],
            ty: v[3],
        }
    }

    /// Packs a batch of parameters into an `[N, 4]` tensor.
    pub fn stack_batch(params: &[AffineParams]) -> Tensor {
        let data = params.iter().flat_map(|p| p.to_array()).collect();
        Tensor::new(&[params.len(), 4], data).expect("non-empty parameter batch")
    }
}

/// Per-pixel source coordinates, `h x w x 2`, in normalized `[-1, 1]` units.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub h: usize,
    pub w: usize,
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let o = (row * self.w + col) * 2;
        (self.coords[o], self.coords[o + 1])
    }
}

pub fn affine_grid(params: AffineParams, h: usize, w: usize) -> Result<SamplingGrid> {
    let mut g = Graph::new();
    let theta = g.constant(AffineParams::stack_batch(&[params]));
    let grid = g.affine_grid(theta, h, w)?;
    Ok(SamplingGrid {
        h,
        w,
        coords: g.value(grid).data().to_vec(),
    })
}

/// Samples every batch item of `features` at the same grid.
pub fn bilinear_sample(features: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let (n, _, _, _) = features.dims4()?;
    let mut coords = Vec::with_capacity(n * grid.coords.len());
    for _ in 0..n {
        coords.extend_from_slice(&grid.coords);
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let gv = g.constant(Tensor::new(&[n, grid.h, grid.w, 2], coords)?);
    let out = g.bilinear_sample(x, gv)?;
    Ok(g.value(out).clone())
}

/// Architecture of one localization network.
#[derive(Clone, Debug, PartialEq)]
pub struct StnConfig {
    /// Parameter-name prefix, e.g. `stn1`.
    pub name: String,
    pub in_channels: usize,
    pub in_size: usize,
    /// Output channels of the 3x3 convs that are followed by 2x2 max pooling
    /// (pooling stops once the map reaches 4x4).
    pub pooled_convs: Vec<usize>,
    /// Channels of the final unpadded 3x3 conv.
    pub final_conv: usize,
    pub fc_hidden: usize,
}

impl StnConfig {
    /// The four localization networks of the generator; `index` is 1-based.
    pub fn table(index: usize, in_channels: usize, in_size: usize) -> Result<Self> {
        let pooled_convs = match index {
            1 => vec![64, 128, 256, 20],
            2 => vec![128, 256, 20],
            3 => vec![256, 20],
            4 => vec![64, 128, 256],
            _ => return Err(crate::error::invalid!("there is no STN{index}")),
        };
        let cfg = Self {
            name: format!("stn{index}"),
            in_channels,
            in_size,
            pooled_convs,
            final_conv: 20,
            fc_hidden: 20,
        };
        ensure!(
            cfg.flattened_width() == 80,
            "STN{index} at input {in_size}x{in_size} would feed {} values to its first FC layer, expected 80",
            cfg.flattened_width()
        );
        Ok(cfg)
    }

    /// Whether each pooled conv is actually followed by a pool at this input size.
    fn pool_plan(&self) -> Vec<bool> {
        let mut s = self.in_size;
        self.pooled_convs
            .iter()
            .map(|_| {
                let pool = s > POOL_FLOOR;
                if pool {
                    s /= 2;
                }
                pool
            })
            .collect()
    }

    fn pre_final_size(&self) -> usize {
        let pools = self.pool_plan().iter().filter(|&&p| p).count();
        self.in_size >> pools
    }

    /// Width of the flattened map entering the first fully connected layer.
    pub fn flattened_width(&self) -> usize {
        let s = self.pre_final_size();
        if s < 3 {
            return 0;
        }
        let out = s - 2;
        self.final_conv * out * out
    }

    pub(crate) fn init(&self, p: &mut ModelParams, init: &Init) {
        let mut c = self.in_channels;
        for (i, &out) in self.pooled_convs.iter().enumerate() {
            init.conv(p, &format!("{}.conv{}", self.name, i + 1), c, out, 3, true);
            c = out;
        }
        init.conv(p, &format!("{}.conv_out", self.name), c, self.final_conv, 3, true);
        init.linear(p, &format!("{}.fc1", self.name), self.flattened_width(), self.fc_hidden);
        // identity warp at initialization
        let fc2 = format!("{}.fc2", self.name);
        p.insert_param(format!("{fc2}.weight"), Tensor::zeros(&[4, self.fc_hidden]));
        p.insert_param(
            format!("{fc2}.bias"),
            Tensor::new(&[4], AffineParams::IDENTITY.to_array().to_vec()).expect("4 values"),
        );
    }
}

/// Runs the localization network, returning `[N, 4]` similarity parameters.
pub(crate) fn localize_var(ctx: &mut Ctx<'_>, cfg: &StnConfig, x: Var) -> Result<Var> {
    let shape = ctx.g.value(x).shape().to_vec();
    ensure!(
        shape.len() == 4
            && shape[1] == cfg.in_channels
            && shape[2] == cfg.in_size
            && shape[3] == cfg.in_size,
        "{} expects input [N, {}, {}, {}], got {shape:?}",
        cfg.name,
        cfg.in_channels,
        cfg.in_size,
        cfg.in_size
    );
    let mut h = x;
    for (i, pool) in cfg.pool_plan().into_iter().enumerate() {
        h = ctx.conv(&format!("{}.conv{}", cfg.name, i + 1), h, 1, 1)?;
        h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        if pool {
            h = ctx.g.max_pool2d(h, 2, 2)?;
        }
    }
    h = ctx.conv(&format!("{}.conv_out", cfg.name), h, 1, 0)?;
    h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
    h = ctx.g.flatten(h)?;
    h = ctx.linear(&format!("{}.fc1", cfg.name), h)?;
    h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
    ctx.linear(&format!("{}.fc2", cfg.name), h)
}

/// Localize, build the grid, and resample `x` at its own resolution.
pub(crate) fn apply_stn_var(ctx: &mut Ctx<'_>, cfg: &StnConfig, x: Var) -> Result<Var> {
    let theta = localize_var(ctx, cfg, x)?;
    let (h, w) = {
        let s = ctx.g.value(x).shape();
        (s[2], s[3])
    };
    let grid = ctx.g.affine_grid(theta, h, w)?;
    ctx.g.bilinear_sample(x, grid)
}

/// Per-item similarity parameters predicted for `features`.
pub fn localize(features: &Tensor, cfg: &StnConfig, params: &ModelParams) -> Result<Vec<AffineParams>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let mut ctx = Ctx::new(&mut g, &bound, params, Mode::Eval);
    let theta = localize_var(&mut ctx, cfg, x)?;
    Ok(g.value(theta).data().chunks(4).map(AffineParams::from_slice).collect())
}

/// Warps `features` with the transform its localization network predicts.
pub fn apply_stn(features: &Tensor, cfg: &StnConfig, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let mut ctx = Ctx::new(&mut g, &bound, params, Mode::Eval);
    let out = apply_stn_var(&mut ctx, cfg, x)?;
    Ok(g.value(out).clone())
}

/// A standalone parameter set holding one localization network.
pub fn build_stn(cfg: &StnConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::new(crate::networks::params::Side::Srn);
    cfg.init(&mut p, &Init { seed });
    p
}

#[cfg(test)]
mod tests;
