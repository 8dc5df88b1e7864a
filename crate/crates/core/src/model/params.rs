use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConSepConfig, Conditioning};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// Initial value rule for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Name, shape and initializer of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    /// Weight `[dout, din]` plus bias `[dout]`, both uniform with fan-in `din`.
    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let init = Init::Uniform { fan_in: din };
        self.push(format!("{prefix}.weight"), &[dout, din], init);
        self.push(format!("{prefix}.bias"), &[dout], init);
    }

    fn zero_linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.weight"), &[dout, din], Init::Zeros);
        self.push(format!("{prefix}.bias"), &[dout], Init::Zeros);
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.gain"), &[width], Init::Ones);
        self.push(format!("{prefix}.bias"), &[width], Init::Zeros);
    }
}

/// Prefix of transformer unit `unit` in the `stage` stack of repeat `repeat`.
pub(crate) fn unit_prefix(repeat: usize, stage: &str, unit: usize) -> String {
    format!("sepformer.{repeat}.{stage}.{unit}")
}

/// Every trainable tensor of the configured model, in a fixed order.
///
/// The order is the serialization order of checkpoints; the count is a pure
/// function of the configuration.
pub fn param_specs(cfg: &ConSepConfig) -> Vec<ParamSpec> {
    let n = cfg.n_basis;
    let f = cfg.freq_bins();
    let k = cfg.enc_kernel;
    let mut b = SpecBuilder(Vec::new());

    b.push(
        "encoder.weight".into(),
        &[n, 1, k],
        Init::Uniform { fan_in: k },
    );

    if cfg.uses_mulca() {
        for (i, &ki) in cfg.mulca_kernels.iter().enumerate() {
            let init = Init::Uniform { fan_in: f * ki };
            b.push(format!("mulca.conv{i}.weight"), &[f, f, ki], init);
            b.push(format!("mulca.conv{i}.bias"), &[f], init);
        }
        let hidden = cfg.mulca_hidden();
        b.linear("mulca.fc1", 3 * f, hidden);
        b.linear("mulca.fc2", hidden, f);
    }
    match cfg.conditioning {
        Conditioning::Film => {
            b.zero_linear("film.scale", f, n);
            b.zero_linear("film.shift", f, n);
        }
        Conditioning::ConcatLinear => {
            b.linear("cond.proj", f, n);
            b.linear("cond.reduce", 2 * n, n);
        }
        Conditioning::Add => b.linear("cond.proj", f, n),
        Conditioning::None => {}
    }

    b.layer_norm("norm", n);
    for r in 0..cfg.repeats {
        for stage in ["intra", "inter"] {
            for u in 0..cfg.layers {
                let p = unit_prefix(r, stage, u);
                b.layer_norm(&format!("{p}.ln1"), n);
                for proj in ["q", "k", "v", "out"] {
                    b.linear(&format!("{p}.attn.{proj}"), n, n);
                }
                b.layer_norm(&format!("{p}.ln2"), n);
                b.linear(&format!("{p}.ffw.fc1"), n, cfg.d_ff);
                b.linear(&format!("{p}.ffw.fc2"), cfg.d_ff, n);
            }
        }
    }
    b.linear("head.proj", n, cfg.num_sources * n);
    b.linear("head.gate_tanh", n, n);
    b.linear("head.gate_sigmoid", n, n);
    b.linear("head.out", n, n);

    b.push(
        "decoder.weight".into(),
        &[n, 1, k],
        Init::Uniform {
            fan_in: (n * k / cfg.enc_stride).max(1),
        },
    );
    b.0
}

/// Total scalar parameter count of the configured model.
pub fn param_count(cfg: &ConSepConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Stable 64-bit FNV-1a hash; keys each tensor's random stream by name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Named parameter tensors in [`param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    tensors: IndexMap<String, Tensor<F>>,
}

impl<F: Float> ModelParams<F> {
    /// Draws fresh parameters.
    ///
    /// Each tensor uses its own random stream derived from `seed` and its
    /// name, so a tensor shared by two configurations gets the same values in
    /// both.
    pub fn init(cfg: &ConSepConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = IndexMap::new();
        for spec in param_specs(cfg) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&spec.name));
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, F::one()),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| F::of(rng.gen_range(-bound..=bound)))
                }
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self { tensors })
    }

    /// Wraps existing tensors after checking them against the configuration.
    pub fn from_tensors(cfg: &ConSepConfig, tensors: IndexMap<String, Tensor<F>>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(specs.len());
        let mut tensors = tensors;
        for spec in specs {
            let t = tensors
                .swap_remove(&spec.name)
                .ok_or_else(|| Error::format(format!("missing parameter '{}'", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::numeric(format!(
                    "parameter '{}' is not finite",
                    spec.name
                )));
            }
            ordered.insert(spec.name, t);
        }
        Ok(Self { tensors: ordered })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// All values concatenated in [`param_specs`] order.
    pub fn to_flat(&self) -> Vec<F> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_tensors(self) -> IndexMap<String, Tensor<F>> {
        self.tensors
    }
}
