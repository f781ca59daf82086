//! Frozen feature extractors used by the identity loss and by retrieval.
//!
//! Extractors are selected by name through [`ExtractorRegistry`], which maps a
//! kind string to a factory returning a boxed [`FeatureExtractor`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Archive;
use crate::error::{ensure, invalid, Error, Result};
use crate::networks::params::{Init, ModelParams, Side};
use crate::tensor::Tensor;

/// A frozen map from an image batch `[N, 3, H, W]` to a feature batch.
pub trait FeatureExtractor: Send + Sync {
    fn kind(&self) -> &str;

    /// The frozen weights, for checksums and persistence.
    fn params(&self) -> &ModelParams;

    /// Records the feature map on `g`. Weights enter as constants, so no
    /// gradient ever reaches them.
    fn features_var(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = self.features_var(&mut g, v)?;
        Ok(g.value(f).clone())
    }

    /// One flattened, L2-normalized embedding per batch item.
    fn embed(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let f = self.features(x)?;
        let n = f.shape()[0];
        let d = f.numel() / n;
        Ok(f.data()
            .chunks(d)
            .map(|row| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter().map(|v| v / norm).collect()
                } else {
                    row.to_vec()
                }
            })
            .collect())
    }
}

/// Three conv blocks of two 3x3 convs each, ReLU after every conv and 2x2 max
/// pooling between blocks; features are tapped after the second conv of block 3.
#[derive(Clone, Debug)]
pub struct ConvStack {
    kind: String,
    params: ModelParams,
}

pub const TINY_CHANNELS: [usize; 3] = [8, 16, 32];
const BLOCKS: usize = 3;

fn weight_name(block: usize, conv: usize) -> String {
    format!("block{block}.conv{conv}.weight")
}

impl ConvStack {
    pub fn tiny_fixed(seed: u64) -> Self {
        let init = Init { seed };
        let mut p = ModelParams::new(Side::Psi);
        let mut c = 3;
        for (b, &out) in TINY_CHANNELS.iter().enumerate() {
            for k in 1..=2 {
                init.conv(&mut p, &format!("block{}.conv{k}", b + 1), c, out, 3, true);
                c = out;
            }
        }
        Self {
            kind: "tiny-fixed".into(),
            params: p,
        }
    }

    /// Wraps externally supplied weights, which must follow the stack layout.
    pub fn from_params(kind: &str, params: ModelParams) -> Result<Self> {
        let mut c = 3;
        for b in 1..=BLOCKS {
            for k in 1..=2 {
                let w = params.param(&weight_name(b, k))?;
                let s = w.shape();
                ensure!(
                    s.len() == 4 && s[1] == c && s[2] == 3 && s[3] == 3,
                    "feature extractor weight {} has shape {s:?}, expected [_, {c}, 3, 3]",
                    weight_name(b, k)
                );
                c = s[0];
            }
        }
        Ok(Self {
            kind: kind.into(),
            params,
        })
    }
}

impl FeatureExtractor for ConvStack {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn features_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.value(x).shape();
        ensure!(
            s.len() == 4 && s[1] == 3 && s[2] >= 4 && s[3] >= 4,
            "feature extractor expects [N, 3, H, W] with H, W >= 4, got {s:?}"
        );
        let mut h = x;
        for b in 1..=BLOCKS {
            for k in 1..=2 {
                let w = g.constant(self.params.param(&weight_name(b, k))?.clone());
                let bias = self.params.params().get(&format!("block{b}.conv{k}.bias")).map(|t| g.constant(t.clone()));
                h = g.conv2d(h, w, bias, 1, 1)?;
                h = g.leaky_relu(h, 0.0)?;
            }
            if b < BLOCKS {
                h = g.max_pool2d(h, 2, 2)?;
            }
        }
        Ok(h)
    }
}

/// How to construct an extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorSpec {
    pub kind: String,
    pub seed: u64,
    /// Checkpoint to load weights from, for kinds that need one.
    pub path: Option<PathBuf>,
}

impl ExtractorSpec {
    pub fn tiny_fixed(seed: u64) -> Self {
        Self {
            kind: "tiny-fixed".into(),
            seed,
            path: None,
        }
    }
}

pub type ExtractorFactory = fn(&ExtractorSpec) -> Result<Box<dyn FeatureExtractor>>;

pub struct ExtractorRegistry {
    factories: BTreeMap<String, ExtractorFactory>,
}

fn make_tiny(spec: &ExtractorSpec) -> Result<Box<dyn FeatureExtractor>> {
    Ok(Box::new(ConvStack::tiny_fixed(spec.seed)))
}

fn make_external(spec: &ExtractorSpec) -> Result<Box<dyn FeatureExtractor>> {
    let path = spec
        .path
        .as_ref()
        .ok_or_else(|| invalid!("the external feature extractor needs a checkpoint path"))?;
    let archive = Archive::load(path)?;
    let params = archive.model_unchecked("psi", Side::Psi)?;
    let stack = ConvStack::from_params("external", params).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(Box::new(stack))
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("tiny-fixed", make_tiny);
        r.register("external", make_external);
        r
    }
}

impl ExtractorRegistry {
    pub fn register(&mut self, kind: &str, factory: ExtractorFactory) {
        self.factories.insert(kind.to_string(), factory);
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &ExtractorSpec) -> Result<Box<dyn FeatureExtractor>> {
        let f = self.factories.get(&spec.kind).ok_or_else(|| {
            invalid!(
                "unknown feature extractor {:?}; available: {}",
                spec.kind,
                self.kinds().join(", ")
            )
        })?;
        f(spec)
    }
}

/// Saves extractor weights in the format the `external` kind loads.
pub fn save_extractor(psi: &dyn FeatureExtractor, path: &std::path::Path) -> Result<()> {
    let mut a = Archive::new();
    a.push_model("psi", psi.params())?;
    a.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{stream, uniform};

    #[test]
    fn tiny_fixed_is_deterministic_and_shaped() {
        let psi = ConvStack::tiny_fixed(4);
        let x = uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut stream(1, 1));
        let a = psi.features(&x).unwrap();
        let b = ConvStack::tiny_fixed(4).features(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 32, 8, 8]);
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert_ne!(ConvStack::tiny_fixed(5).features(&x).unwrap(), a);
    }

    #[test]
    fn weights_receive_no_gradient() {
        let psi = ConvStack::tiny_fixed(4);
        let mut g = Graph::new();
        let x = g.param(uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut stream(1, 2)));
        let f = psi.features_var(&mut g, x).unwrap();
        let l = g.sum_squares(f).unwrap();
        let grads = g.backward(l).unwrap();
        // only the input leaf is trainable
        assert_eq!(grads.len(), 1);
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let psi = ConvStack::tiny_fixed(4);
        let x = uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut stream(1, 3));
        for e in psi.embed(&x).unwrap() {
            let n: f64 = e.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn registry_builds_both_kinds() {
        let reg = ExtractorRegistry::default();
        assert_eq!(reg.kinds(), vec!["external", "tiny-fixed"]);
        let tiny = reg.build(&ExtractorSpec::tiny_fixed(9)).unwrap();
        assert_eq!(tiny.kind(), "tiny-fixed");
        let unknown = ExtractorSpec {
            kind: "vgg".into(),
            ..ExtractorSpec::tiny_fixed(0)
        };
        assert!(matches!(reg.build(&unknown), Err(Error::InvalidArgument(_))));
        let no_path = ExtractorSpec {
            kind: "external".into(),
            ..ExtractorSpec::tiny_fixed(0)
        };
        assert!(reg.build(&no_path).is_err());

        let dir = std::env::temp_dir().join(format!("ifrp-psi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("psi.ckpt");
        save_extractor(tiny.as_ref(), &path).unwrap();
        let ext = reg
            .build(&ExtractorSpec {
                kind: "external".into(),
                seed: 0,
                path: Some(path),
            })
            .unwrap();
        let x = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut stream(2, 3));
        assert_eq!(ext.features(&x).unwrap(), tiny.features(&x).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_external_weights_are_rejected() {
        let mut p = ConvStack::tiny_fixed(1).params().clone();
        *p.param_mut("block2.conv1.weight").unwrap() = Tensor::zeros(&[16, 5, 3, 3]);
        assert!(ConvStack::from_params("external", p).is_err());
    }
}
