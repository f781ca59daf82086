//! RMSprop updates and the alternating discriminator/generator training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Gradients, Graph, Mode, Var};
use crate::error::{ensure, invalid, Error, Result};
use crate::losses::{combine_generator_terms, d_loss_var, TrainSchedule};
use crate::networks::{
    build_dn, build_srn, dn_forward_var, srn_forward_var, Bound, Ctx, DnConfig, ModelParams, SrnConfig,
};
use crate::psi::FeatureExtractor;
use crate::random;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmspropConfig {
    pub lr0: f64,
    pub rho: f64,
    pub eps: f64,
    /// Per-epoch decay: `lr_n = lr0 / (1 + decay * n)`.
    pub decay: f64,
    /// Learning-rate multiplier for the STN localization networks.
    pub localization_lr_scale: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            decay: 1e-2,
            localization_lr_scale: 0.1,
        }
    }
}

impl RmspropConfig {
    pub fn lr(&self, n: u64) -> f64 {
        self.lr0 / (1.0 + self.decay * n as f64)
    }
}

/// Squared-gradient moving averages, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    v: BTreeMap<String, Tensor>,
}

impl RmspropState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            v: params
                .params()
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn from_map(v: BTreeMap<String, Tensor>) -> Self {
        Self { v }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.v
    }

    pub fn check_schema(&self, params: &ModelParams) -> Result<()> {
        ensure!(
            self.v.len() == params.params().len()
                && self
                    .v
                    .iter()
                    .all(|(k, t)| params.params().get(k).is_some_and(|p| p.shape() == t.shape())),
            "optimizer state does not mirror the {} parameter schema",
            params.side()
        );
        Ok(())
    }
}

/// Parameters of a localization network are named `stn{i}.*`.
pub fn is_localization(name: &str) -> bool {
    name.strip_prefix("stn")
        .and_then(|rest| rest.split('.').next())
        .is_some_and(|i| !i.is_empty() && i.bytes().all(|b| b.is_ascii_digit()))
}

/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / sqrt(v + eps)`.
/// Updated values are stored at f32 precision, matching the checkpoint format.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut RmspropState,
    cfg: &RmspropConfig,
    lr: f64,
) -> Result<()> {
    state.check_schema(params)?;
    ensure!(
        grads.len() == state.v.len()
            && grads
                .iter()
                .all(|(k, g)| state.v.get(k).is_some_and(|v| v.shape() == g.shape())),
        "gradient schema does not match the {} parameters",
        params.side()
    );
    for (name, g) in grads {
        let v = state.v.get_mut(name).expect("checked above");
        let p = params.param_mut(name)?;
        let lr = if is_localization(name) { lr * cfg.localization_lr_scale } else { lr };
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let nv = cfg.rho * *vv + (1.0 - cfg.rho) * gv * gv;
            *vv = nv as f32 as f64;
            *pv = (*pv - lr * gv / (nv + cfg.eps).sqrt()) as f32 as f64;
        }
    }
    Ok(())
}

/// Gradients of every bound parameter; parameters the loss never touched get zeros.
pub fn collect_grads(bound: &Bound, params: &ModelParams, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .map(|(k, v)| {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(params.params()[k].shape()));
            (k.clone(), g)
        })
        .collect()
}

/// Paired stylized (`sf`) and real (`rf`) images, each item `[1, 3, R, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    sf: Vec<Tensor>,
    rf: Vec<Tensor>,
}

impl PairSet {
    pub fn new(sf: Vec<Tensor>, rf: Vec<Tensor>) -> Result<Self> {
        ensure!(sf.len() == rf.len(), "{} stylized images but {} real ones", sf.len(), rf.len());
        if let Some(first) = sf.first() {
            let s = first.shape();
            ensure!(
                s.len() == 4 && s[0] == 1 && s[1] == 3 && s[2] == s[3],
                "pair items must be [1, 3, R, R], got {s:?}"
            );
            ensure!(
                sf.iter().chain(&rf).all(|t| t.shape() == s),
                "pair items differ in shape"
            );
        }
        Ok(Self { sf, rf })
    }

    /// Splits `[P, 3, R, R]` batches into items.
    pub fn from_batches(sf: &Tensor, rf: &Tensor) -> Result<Self> {
        ensure!(sf.shape() == rf.shape(), "stylized and real sets differ in shape");
        let n = sf.dims4()?.0;
        let split = |t: &Tensor| (0..n).map(|i| t.slice_batch(i, 1)).collect::<Result<Vec<_>>>();
        Self::new(split(sf)?, split(rf)?)
    }

    pub fn len(&self) -> usize {
        self.sf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sf.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.sf.first().map(|t| t.shape()[2])
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        ensure!(idx.iter().all(|&i| i < self.len()), "pair index out of range");
        let pick = |v: &[Tensor]| Tensor::stack_batch(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        Ok((pick(&self.sf)?, pick(&self.rf)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLoopConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub d_steps: usize,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seed: 0,
            d_steps: 1,
        }
    }
}

/// Stream offset for epoch shuffles, far from parameter-init streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546_0000_0000;

/// Batches of one epoch in seeded order. A trailing batch smaller than 2
/// is dropped, since batch normalization needs two items.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let order = random::permutation(n, &mut random::stream(seed, SHUFFLE_STREAM + epoch));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Everything the loop mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ModelParams,
    pub phi: ModelParams,
    pub opt_theta: RmspropState,
    pub opt_phi: RmspropState,
    /// Number of completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn init(srn: &SrnConfig, dn: &DnConfig, seed: u64) -> Result<Self> {
        let theta = build_srn(srn, seed)?;
        let phi = build_dn(dn, seed)?;
        Ok(Self {
            opt_theta: RmspropState::zeros_like(&theta),
            opt_phi: RmspropState::zeros_like(&phi),
            theta,
            phi,
            epoch: 0,
        })
    }
}

/// Per-term epoch means plus the weights in force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub lr: f64,
    pub lambda: f64,
    pub eta: f64,
    pub mse: f64,
    pub adv_g: f64,
    pub id: f64,
    pub dis: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,lambda,eta,L_mse,L_adv_g,L_id,L_dis";

impl EpochSummary {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.lr, self.lambda, self.eta, self.mse, self.adv_g, self.id, self.dis
        )
        .expect("string write");
        s
    }

    pub fn is_finite(&self) -> bool {
        [self.lr, self.lambda, self.eta, self.mse, self.adv_g, self.id, self.dis]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Fixed inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub srn: &'a SrnConfig,
    pub dn: &'a DnConfig,
    pub psi: &'a dyn FeatureExtractor,
    pub sched: &'a TrainSchedule,
    pub opt: &'a RmspropConfig,
    pub loop_cfg: &'a TrainLoopConfig,
}

/// A recorded generator forward pass, kept alive for the generator step.
pub struct GeneratorPass {
    graph: Graph,
    bound: Bound,
    output: Var,
    target: Var,
    stats: Vec<(String, crate::autodiff::BatchStats)>,
}

impl GeneratorPass {
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.output)
    }
}

pub fn generator_forward(theta: &ModelParams, cfg: &SrnConfig, xs: &Tensor, xr: &Tensor) -> Result<GeneratorPass> {
    let mut graph = Graph::new();
    let bound = theta.bind(&mut graph, true);
    let x = graph.constant(xs.clone());
    let target = graph.constant(xr.clone());
    let mut ctx = Ctx::new(&mut graph, &bound, theta, Mode::Train);
    let output = srn_forward_var(&mut ctx, cfg, x)?;
    let stats = std::mem::take(&mut ctx.stats);
    Ok(GeneratorPass {
        graph,
        bound,
        output,
        target,
        stats,
    })
}

/// Runs the discriminator on `real` and `fake` stacked into one batch, so both
/// halves share normalization statistics. Returns `(d_real, d_fake)`.
fn dn_joint(ctx: &mut Ctx<'_>, dn: &DnConfig, real: Var, fake: Var) -> Result<(Var, Var)> {
    let nr = ctx.g.value(real).shape()[0];
    let nf = ctx.g.value(fake).shape()[0];
    let joint = ctx.g.concat_batch(&[real, fake])?;
    let p = dn_forward_var(ctx, dn, joint)?;
    let d_real = ctx.g.slice_batch(p, 0, nr)?;
    let d_fake = ctx.g.slice_batch(p, nr, nf)?;
    Ok((d_real, d_fake))
}

/// One discriminator update on a real batch and a (detached) generated batch.
/// Returns the discriminator loss before the update.
pub fn d_step(
    phi: &mut ModelParams,
    opt: &mut RmspropState,
    dn: &DnConfig,
    real: &Tensor,
    fake: &Tensor,
    cfg: &RmspropConfig,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = phi.bind(&mut g, true);
    let xr = g.constant(real.clone());
    let xf = g.constant(fake.clone());
    let mut ctx = Ctx::new(&mut g, &bound, phi, Mode::Train);
    let (d_real, d_fake) = dn_joint(&mut ctx, dn, xr, xf)?;
    let stats = std::mem::take(&mut ctx.stats);
    let loss = d_loss_var(&mut g, d_real, d_fake)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grads = collect_grads(&bound, phi, &mut grads);
    rmsprop_step(phi, &grads, opt, cfg, lr)?;
    phi.update_running_stats(&stats)?;
    Ok(value)
}

/// Generator terms `(mse, adv, id)` before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLosses {
    pub mse: f64,
    pub adv: f64,
    pub id: f64,
}

/// One generator update through the frozen discriminator. The discriminator
/// sees the real batch alongside the generated one, as in [`d_step`], runs in
/// train mode, and its batch statistics are discarded.
#[allow(clippy::too_many_arguments)]
pub fn g_step(
    pass: GeneratorPass,
    theta: &mut ModelParams,
    opt: &mut RmspropState,
    phi: &ModelParams,
    setup: &TrainSetup<'_>,
    lambda: f64,
    eta: f64,
    lr: f64,
) -> Result<GeneratorLosses> {
    let GeneratorPass {
        mut graph,
        bound,
        output,
        target,
        stats,
    } = pass;
    let pb = phi.bind(&mut graph, false);
    let (_, d_fake) = {
        let mut ctx = Ctx::new(&mut graph, &pb, phi, Mode::Train);
        dn_joint(&mut ctx, setup.dn, target, output)?
    };
    let t = combine_generator_terms(&mut graph, output, target, d_fake, setup.psi, lambda, eta)?;
    let losses = GeneratorLosses {
        mse: graph.value(t.mse).item()?,
        adv: graph.value(t.adv).item()?,
        id: graph.value(t.id).item()?,
    };
    let mut grads = graph.backward(t.total)?;
    let grads = collect_grads(&bound, theta, &mut grads);
    rmsprop_step(theta, &grads, opt, setup.opt, lr)?;
    theta.update_running_stats(&stats)?;
    Ok(losses)
}

/// Runs epoch `state.epoch` over `data` and advances the epoch counter.
pub fn train_epoch(state: &mut TrainState, data: &PairSet, setup: &TrainSetup<'_>) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let lc = setup.loop_cfg;
    ensure!(lc.batch_size >= 2, "batch size must be at least 2, got {}", lc.batch_size);
    ensure!(lc.d_steps >= 1, "at least one discriminator step per generator step");
    let r = data.resolution().unwrap_or(0);
    ensure!(
        r == setup.srn.resolution,
        "training images are {r}x{r}, the generator expects {}",
        setup.srn.resolution
    );
    let n = state.epoch;
    let (lr, lambda, eta) = (setup.opt.lr(n), setup.sched.lambda(n), setup.sched.eta(n));
    let batches = epoch_batches(data.len(), lc.batch_size, lc.seed, n);
    ensure!(!batches.is_empty(), "training set of {} pairs yields no batch of 2", data.len());

    let mut sums = [0.0f64; 4];
    let mut count = 0usize;
    for idx in &batches {
        let (xs, xr) = data.gather(idx)?;
        let pass = generator_forward(&state.theta, setup.srn, &xs, &xr)?;
        let fake = pass.output().clone();
        let mut dis = 0.0;
        for _ in 0..lc.d_steps {
            dis = d_step(&mut state.phi, &mut state.opt_phi, setup.dn, &xr, &fake, setup.opt, lr)?;
        }
        let gl = g_step(pass, &mut state.theta, &mut state.opt_theta, &state.phi, setup, lambda, eta, lr)?;
        for (s, v) in sums.iter_mut().zip([gl.mse, gl.adv, gl.id, dis]) {
            if !v.is_finite() {
                return Err(Error::State(format!("non-finite loss at epoch {n}")));
            }
            *s += v * idx.len() as f64;
        }
        count += idx.len();
    }
    state.epoch += 1;
    let c = count as f64;
    Ok(EpochSummary {
        epoch: n,
        lr,
        lambda,
        eta,
        mse: sums[0] / c,
        adv_g: sums[1] / c,
        id: sums[2] / c,
        dis: sums[3] / c,
    })
}

#[cfg(test)]
mod tests;
