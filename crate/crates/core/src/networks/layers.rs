use crate::autodiff::{BatchStats, Graph, Mode, Var, BN_EPS};
use crate::error::Result;
use crate::networks::params::{Bound, ModelParams};

/// State threaded through one forward pass of a network.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub bound: &'a Bound,
    pub params: &'a ModelParams,
    pub mode: Mode,
    /// Batch statistics of every train-mode normalization layer, keyed by prefix.
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, bound: &'a Bound, params: &'a ModelParams, mode: Mode) -> Self {
        Self {
            g,
            bound,
            params,
            mode,
            stats: Vec::new(),
        }
    }

    fn bias(&self, prefix: &str) -> Result<Option<Var>> {
        let name = format!("{prefix}.bias");
        if self.params.params().contains_key(&name) {
            Ok(Some(self.bound.var(&name)?))
        } else {
            Ok(None)
        }
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound.var(&format!("{prefix}.weight"))?;
        let b = self.bias(prefix)?;
        self.g.conv2d(x, w, b, stride, pad)
    }

    pub fn deconv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound.var(&format!("{prefix}.weight"))?;
        let b = self.bias(prefix)?;
        self.g.conv_transpose2d(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.bound.var(&format!("{prefix}.weight"))?;
        let b = self.bias(prefix)?;
        self.g.linear(x, w, b)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.bound.var(&format!("{prefix}.gamma"))?;
        let beta = self.bound.var(&format!("{prefix}.beta"))?;
        let (y, stats) = match self.mode {
            Mode::Train => self.g.batch_norm2d(x, gamma, beta, BN_EPS, Mode::Train, None)?,
            Mode::Eval => {
                let rm = self.params.buffer(&format!("{prefix}.running_mean"))?;
                let rv = self.params.buffer(&format!("{prefix}.running_var"))?;
                self.g.batch_norm2d(
                    x,
                    gamma,
                    beta,
                    BN_EPS,
                    Mode::Eval,
                    Some((rm.data(), rv.data())),
                )?
            }
        };
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }
}
