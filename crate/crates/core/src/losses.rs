//! Pixel, adversarial and identity losses, their weighted combination for
//! the generator, and the decaying weight schedule.

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{ensure, Result};
use crate::networks::{dn_forward_var, srn_forward_var, Ctx, DnConfig, ModelParams, SrnConfig};
use crate::psi::FeatureExtractor;
use crate::tensor::Tensor;

pub const DECAY_BASE: f64 = 0.995;

/// `max(w0 * 0.995^n, w0 / floor_div)`.
pub fn schedule_weight(w0: f64, floor_div: f64, n: u64) -> f64 {
    (w0 * DECAY_BASE.powf(n as f64)).max(w0 / floor_div)
}

/// Adversarial (`lambda`) and identity (`eta`) weights per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub lambda0: f64,
    pub eta0: f64,
    pub floor_div: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lambda0: 1e-2,
            eta0: 1e-3,
            floor_div: 2.0,
        }
    }
}

impl TrainSchedule {
    pub fn lambda(&self, n: u64) -> f64 {
        schedule_weight(self.lambda0, self.floor_div, n)
    }

    pub fn eta(&self, n: u64) -> f64 {
        schedule_weight(self.eta0, self.floor_div, n)
    }
}

pub fn mse_loss_var(g: &mut Graph, output: Var, target: Var) -> Result<Var> {
    g.mse(output, target)
}

pub fn identity_loss_var(g: &mut Graph, output: Var, target: Var, psi: &dyn FeatureExtractor) -> Result<Var> {
    ensure!(
        g.value(output).shape() == g.value(target).shape(),
        "identity_loss: shape mismatch {:?} vs {:?}",
        g.value(output).shape(),
        g.value(target).shape()
    );
    let fo = psi.features_var(g, output)?;
    let ft = psi.features_var(g, target)?;
    g.mse(fo, ft)
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn d_loss_var(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = g.neg_log_mean(d_real)?;
    let fake = g.neg_log1m_mean(d_fake)?;
    g.add(real, fake)
}

/// Non-saturating generator objective `-mean(log d_fake)`.
pub fn g_adv_loss_var(g: &mut Graph, d_fake: Var) -> Result<Var> {
    g.neg_log_mean(d_fake)
}

fn scalar_of<F>(inputs: &[&Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

pub fn mse_loss(output: &Tensor, target: &Tensor) -> Result<f64> {
    scalar_of(&[output, target], |g, v| mse_loss_var(g, v[0], v[1]))
}

pub fn identity_loss(output: &Tensor, target: &Tensor, psi: &dyn FeatureExtractor) -> Result<f64> {
    scalar_of(&[output, target], |g, v| identity_loss_var(g, v[0], v[1], psi))
}

pub fn d_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    scalar_of(&[d_real, d_fake], |g, v| d_loss_var(g, v[0], v[1]))
}

pub fn g_adv_loss(d_fake: &Tensor) -> Result<f64> {
    scalar_of(&[d_fake], |g, v| g_adv_loss_var(g, v[0]))
}

/// Graph handles of the generator objective and its unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub total: Var,
    pub mse: Var,
    pub adv: Var,
    pub id: Var,
}

/// `mse + lambda * adv + eta * id` given the generator output and the
/// discriminator's verdict on it.
pub fn combine_generator_terms(
    g: &mut Graph,
    output: Var,
    target: Var,
    d_fake: Var,
    psi: &dyn FeatureExtractor,
    lambda: f64,
    eta: f64,
) -> Result<GeneratorTerms> {
    let mse = mse_loss_var(g, output, target)?;
    let adv = g_adv_loss_var(g, d_fake)?;
    let id = identity_loss_var(g, output, target, psi)?;
    let wa = g.scale(adv, lambda)?;
    let wi = g.scale(id, eta)?;
    let partial = g.add(mse, wa)?;
    let total = g.add(partial, wi)?;
    Ok(GeneratorTerms { total, mse, adv, id })
}

/// Values of the generator objective and its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub adv: f64,
    pub id: f64,
    pub lambda: f64,
    pub eta: f64,
}

/// The networks a loss evaluation runs through.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub srn_cfg: &'a SrnConfig,
    pub dn_cfg: &'a DnConfig,
    pub theta: &'a ModelParams,
    pub phi: &'a ModelParams,
    pub psi: &'a dyn FeatureExtractor,
}

/// Generator objective at epoch `n` for one batch, with both networks in `mode`.
pub fn srn_total_loss(
    i_s: &Tensor,
    i_r: &Tensor,
    models: Models<'_>,
    sched: &TrainSchedule,
    n: u64,
    mode: Mode,
) -> Result<LossBreakdown> {
    ensure!(
        i_s.shape() == i_r.shape(),
        "srn_total_loss: stylized and real batches differ in shape, {:?} vs {:?}",
        i_s.shape(),
        i_r.shape()
    );
    let mut g = Graph::new();
    let tb = models.theta.bind(&mut g, false);
    let pb = models.phi.bind(&mut g, false);
    let xs = g.constant(i_s.clone());
    let xr = g.constant(i_r.clone());
    let out = {
        let mut ctx = Ctx::new(&mut g, &tb, models.theta, mode);
        srn_forward_var(&mut ctx, models.srn_cfg, xs)?
    };
    let d_fake = {
        let mut ctx = Ctx::new(&mut g, &pb, models.phi, mode);
        dn_forward_var(&mut ctx, models.dn_cfg, out)?
    };
    let (lambda, eta) = (sched.lambda(n), sched.eta(n));
    let t = combine_generator_terms(&mut g, out, xr, d_fake, models.psi, lambda, eta)?;
    Ok(LossBreakdown {
        total: g.value(t.total).item()?,
        mse: g.value(t.mse).item()?,
        adv: g.value(t.adv).item()?,
        id: g.value(t.id).item()?,
        lambda,
        eta,
    })
}
