//! The style removal network (an encoder-decoder with four interleaved spatial
//! transformers) and the discriminative network.

pub(crate) mod layers;
pub mod params;

use crate::autodiff::{BatchStats, Graph, Mode, Var, LEAKY_SLOPE};
use crate::error::{ensure, Result};
use crate::stn::{self, StnConfig};
use crate::tensor::Tensor;

pub use layers::Ctx;
pub use params::{Bound, ModelParams, Side};
use params::Init;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SrnConfig {
    pub resolution: usize,
    /// Encoder stage widths; the decoder mirrors them back to 3 channels.
    pub channels: [usize; 4],
    /// When false the four STNs are left out of the schema and the forward pass.
    pub use_stn: bool,
}

impl Default for SrnConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            channels: [32, 64, 128, 256],
            use_stn: true,
        }
    }
}

impl SrnConfig {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 32 && self.resolution.is_multiple_of(16),
            "generator resolution must be a multiple of 16 and at least 32, got {}",
            self.resolution
        );
        ensure!(
            self.channels.iter().all(|&c| c > 0),
            "channel plan must be positive, got {:?}",
            self.channels
        );
        Ok(())
    }

    /// Localization network configs for the four attachment points: after
    /// encoder stages 1-3 and after the second decoder stage.
    pub fn stn_configs(&self) -> Result<[StnConfig; 4]> {
        let r = self.resolution;
        let [c1, c2, c3, _] = self.channels;
        Ok([
            StnConfig::table(1, c1, r / 2)?,
            StnConfig::table(2, c2, r / 4)?,
            StnConfig::table(3, c3, r / 8)?,
            StnConfig::table(4, c2, r / 4)?,
        ])
    }

    /// `(C, H, W)` of the feature map seen by each STN.
    pub fn stn_input_shapes(&self) -> Result<[(usize, usize, usize); 4]> {
        let cfgs = self.stn_configs()?;
        Ok(cfgs.map(|c| (c.in_channels, c.in_size, c.in_size)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnConfig {
    pub resolution: usize,
    pub channels: [usize; 4],
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            channels: [64, 128, 256, 512],
        }
    }
}

impl DnConfig {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    fn head_width(&self) -> usize {
        let s = self.resolution / 16;
        self.channels[3] * s * s
    }
}

pub fn build_srn(cfg: &SrnConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let init = Init { seed };
    let mut p = ModelParams::new(Side::Srn);
    let [c1, c2, c3, c4] = cfg.channels;
    let enc = [(3, c1), (c1, c2), (c2, c3), (c3, c4)];
    for (i, (cin, cout)) in enc.into_iter().enumerate() {
        init.conv(&mut p, &format!("enc{}.conv", i + 1), cin, cout, KERNEL, false);
        init.batch_norm(&mut p, &format!("enc{}.bn", i + 1), cout);
    }
    let dec = [(c4, c3), (c3, c2), (c2, c1), (c1, 3)];
    for (i, (cin, cout)) in dec.into_iter().enumerate() {
        let last = i == 3;
        init.deconv(&mut p, &format!("dec{}.deconv", i + 1), cin, cout, KERNEL, STRIDE, last);
        if !last {
            init.batch_norm(&mut p, &format!("dec{}.bn", i + 1), cout);
        }
    }
    if cfg.use_stn {
        for s in cfg.stn_configs()? {
            s.init(&mut p, &init);
        }
    }
    Ok(p)
}

pub fn build_dn(cfg: &DnConfig, seed: u64) -> Result<ModelParams> {
    ensure!(
        cfg.resolution >= 16 && cfg.resolution.is_multiple_of(16),
        "discriminator resolution must be a multiple of 16, got {}",
        cfg.resolution
    );
    let init = Init { seed };
    let mut p = ModelParams::new(Side::Dn);
    let mut cin = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        init.conv(&mut p, &format!("conv{}", i + 1), cin, c, KERNEL, false);
        init.batch_norm(&mut p, &format!("bn{}", i + 1), c);
        cin = c;
    }
    init.linear(&mut p, "head", cfg.head_width(), 1);
    Ok(p)
}

fn check_batch(g: &Graph, x: Var, resolution: usize) -> Result<()> {
    let s = g.value(x).shape();
    ensure!(
        s.len() == 4 && s[1] == 3 && s[2] == resolution && s[3] == resolution,
        "expected an image batch [N, 3, {resolution}, {resolution}], got {s:?}"
    );
    Ok(())
}

/// Generator forward pass on the graph; `x` is `[N, 3, R, R]` in `[0, 1]`.
pub fn srn_forward_var(ctx: &mut Ctx<'_>, cfg: &SrnConfig, x: Var) -> Result<Var> {
    check_batch(ctx.g, x, cfg.resolution)?;
    ensure!(
        ctx.g.value(x).data().iter().all(|v| (0.0..=1.0).contains(v)),
        "generator inputs must lie in [0, 1]"
    );
    let stns = if cfg.use_stn {
        Some(cfg.stn_configs()?)
    } else {
        None
    };
    let mut h = x;
    for i in 1..=4 {
        h = ctx.conv(&format!("enc{i}.conv"), h, STRIDE, PAD)?;
        h = ctx.batch_norm(&format!("enc{i}.bn"), h)?;
        h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        if let (Some(s), true) = (&stns, i <= 3) {
            h = stn::apply_stn_var(ctx, &s[i - 1], h)?;
        }
    }
    for i in 1..=3 {
        h = ctx.deconv(&format!("dec{i}.deconv"), h, STRIDE, PAD)?;
        h = ctx.batch_norm(&format!("dec{i}.bn"), h)?;
        h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        if let (Some(s), 2) = (&stns, i) {
            h = stn::apply_stn_var(ctx, &s[3], h)?;
        }
    }
    h = ctx.deconv("dec4.deconv", h, STRIDE, PAD)?;
    ctx.g.sigmoid(h)
}

/// Discriminator forward pass; returns per-image probabilities `[N]`.
pub fn dn_forward_var(ctx: &mut Ctx<'_>, cfg: &DnConfig, x: Var) -> Result<Var> {
    check_batch(ctx.g, x, cfg.resolution)?;
    let mut h = x;
    for i in 1..=4 {
        h = ctx.conv(&format!("conv{i}"), h, STRIDE, PAD)?;
        h = ctx.batch_norm(&format!("bn{i}"), h)?;
        h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
    }
    h = ctx.g.flatten(h)?;
    h = ctx.linear("head", h)?;
    let n = ctx.g.value(h).shape()[0];
    h = ctx.g.reshape(h, &[n])?;
    ctx.g.sigmoid(h)
}

/// Output of a standalone forward pass.
pub struct Forward {
    pub output: Tensor,
    pub stats: Vec<(String, BatchStats)>,
}

pub fn srn_forward(params: &ModelParams, cfg: &SrnConfig, batch: &Tensor, mode: Mode) -> Result<Forward> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let mut ctx = Ctx::new(&mut g, &bound, params, mode);
    let y = srn_forward_var(&mut ctx, cfg, x)?;
    let stats = std::mem::take(&mut ctx.stats);
    Ok(Forward {
        output: g.value(y).clone(),
        stats,
    })
}

pub fn dn_forward(params: &ModelParams, cfg: &DnConfig, batch: &Tensor, mode: Mode) -> Result<Forward> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let mut ctx = Ctx::new(&mut g, &bound, params, mode);
    let y = dn_forward_var(&mut ctx, cfg, x)?;
    let stats = std::mem::take(&mut ctx.stats);
    Ok(Forward {
        output: g.value(y).clone(),
        stats,
    })
}
