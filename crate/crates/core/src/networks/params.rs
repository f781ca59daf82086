use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Var, BN_MOMENTUM};
use crate::error::{ensure, Error, Result};
use crate::random;
use crate::tensor::Tensor;

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Style removal network (generator).
    Srn,
    /// Discriminative network.
    Dn,
    /// Frozen feature extractor.
    Psi,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::Srn => "srn",
            Side::Dn => "dn",
            Side::Psi => "psi",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Named tensors of one network: trainable parameters plus non-trainable
/// buffers (batch-norm running statistics). Names are layer paths such as
/// `enc1.conv.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    side: Side,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new(side: Side) -> Self {
        Self {
            side,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no parameter {name}", self.side)))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let side = self.side;
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{side} has no parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no buffer {name}", self.side)))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Folds batch statistics into the running-mean/var buffers of each
    /// normalization layer.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no buffer {name}")))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b) as f32 as f64;
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of all tensors, parameters first.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Errors unless `self` has exactly the names and shapes of `reference`.
    pub fn check_schema(&self, reference: &ModelParams) -> Result<()> {
        let mine = self.schema();
        let theirs = reference.schema();
        if mine == theirs {
            return Ok(());
        }
        let names: std::collections::BTreeSet<_> = mine.iter().map(|(n, _)| n).collect();
        for (n, shape) in &theirs {
            if !names.contains(n) {
                return Err(Error::InvalidArgument(format!("{}: missing tensor {n}", self.side)));
            }
            if let Some((_, s)) = mine.iter().find(|(m, _)| m == n) {
                ensure!(
                    s == shape,
                    "{}: tensor {n} has shape {s:?}, expected {shape:?}",
                    self.side
                );
            }
        }
        Err(Error::InvalidArgument(format!(
            "{}: unexpected tensors beyond the configured schema",
            self.side
        )))
    }

    /// Order-independent checksum over all values, for mutation assertions.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, t) in self.params.iter().chain(&self.buffers) {
            h ^= random::label(k);
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Graph handles of a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Deterministic initializers. Each tensor draws from its own stream keyed by
/// `(seed, name)`, and values are stored at `f32` precision.
pub(crate) struct Init {
    pub seed: u64,
}

impl Init {
    fn he_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let mut rng = random::stream(self.seed, random::label(name));
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        t.round_to_f32();
        t
    }

    pub fn conv(&self, p: &mut ModelParams, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
        let name = format!("{prefix}.weight");
        let w = self.he_uniform(&name, &[c_out, c_in, k, k], c_in * k * k);
        p.insert_param(name, w);
        if bias {
            p.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
        }
    }

    pub fn deconv(
        &self,
        p: &mut ModelParams,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) {
        let name = format!("{prefix}.weight");
        let fan_in = (c_in * k * k) / (stride * stride);
        let w = self.he_uniform(&name, &[c_in, c_out, k, k], fan_in);
        p.insert_param(name, w);
        if bias {
            p.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
        }
    }

    pub fn linear(&self, p: &mut ModelParams, prefix: &str, d_in: usize, d_out: usize) {
        let name = format!("{prefix}.weight");
        let w = self.he_uniform(&name, &[d_out, d_in], d_in);
        p.insert_param(name, w);
        p.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
    }

    pub fn batch_norm(&self, p: &mut ModelParams, prefix: &str, c: usize) {
        p.insert_param(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
        p.insert_param(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        p.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        p.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
    }
}
