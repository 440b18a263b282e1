//! Parameter naming, initialization, and graph binding.
//!
//! The set of parameter names and shapes is a pure function of the model
//! config; there are no mode-specific parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal { sd: f64 },
}

impl InitKind {
    /// The Xavier bound `sqrt(6 / (fan_in + fan_out))`, if applicable.
    pub fn xavier_bound(&self) -> Option<f64> {
        match *self {
            InitKind::XavierUniform { fan_in, fan_out } => {
                Some((6.0 / (fan_in + fan_out) as f64).sqrt())
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// Canonical parameter name -> tensor map. Iteration order is always the
/// sorted name order, which also fixes the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, Tensor<f32>>,
}

impl Parameters {
    pub fn from_map(map: BTreeMap<String, Tensor<f32>>) -> Self {
        Parameters { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

fn linear(specs: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![d_in, d_out],
        init: InitKind::XavierUniform { fan_in: d_in, fan_out: d_out },
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![d_out],
        init: InitKind::Zeros,
    });
}

fn norm(specs: &mut Vec<ParamSpec>, name: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.g"),
        shape: vec![d],
        init: InitKind::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![d],
        init: InitKind::Zeros,
    });
}

fn attention(specs: &mut Vec<ParamSpec>, name: &str, d: usize) {
    norm(specs, &format!("{name}.norm"), d);
    for proj in ["wq", "wk", "wv", "wo"] {
        linear(specs, &format!("{name}.{proj}"), d, d);
    }
}

fn ffn(specs: &mut Vec<ParamSpec>, name: &str, d: usize, d_ff: usize) {
    norm(specs, &format!("{name}.norm"), d);
    linear(specs, &format!("{name}.w1"), d, d_ff);
    linear(specs, &format!("{name}.w2"), d_ff, d);
}

/// Every parameter of the model, in a fixed construction order. The name set
/// and shapes depend only on the config, never on the attention mode.
pub fn param_manifest(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = Vec::new();

    // Subsampling front-end: two stride-2 kernel-3 convolutions + projection.
    specs.push(ParamSpec {
        name: "enc.sub.conv1.w".into(),
        shape: vec![3, cfg.feat_dim, d],
        init: InitKind::XavierUniform { fan_in: 3 * cfg.feat_dim, fan_out: 3 * d },
    });
    specs.push(ParamSpec { name: "enc.sub.conv1.b".into(), shape: vec![d], init: InitKind::Zeros });
    specs.push(ParamSpec {
        name: "enc.sub.conv2.w".into(),
        shape: vec![3, d, d],
        init: InitKind::XavierUniform { fan_in: 3 * d, fan_out: 3 * d },
    });
    specs.push(ParamSpec { name: "enc.sub.conv2.b".into(), shape: vec![d], init: InitKind::Zeros });
    linear(&mut specs, "enc.sub.proj", d, d);

    for i in 0..cfg.n_enc_layers {
        let p = format!("enc.{i}");
        ffn(&mut specs, &format!("{p}.ffn1"), d, cfg.d_ff);
        attention(&mut specs, &format!("{p}.attn"), d);
        norm(&mut specs, &format!("{p}.conv.norm"), d);
        linear(&mut specs, &format!("{p}.conv.pw1"), d, 2 * d);
        specs.push(ParamSpec {
            name: format!("{p}.conv.dw.w"),
            shape: vec![cfg.conv_kernel, d],
            init: InitKind::XavierUniform { fan_in: cfg.conv_kernel, fan_out: cfg.conv_kernel },
        });
        specs.push(ParamSpec { name: format!("{p}.conv.dw.b"), shape: vec![d], init: InitKind::Zeros });
        norm(&mut specs, &format!("{p}.conv.mid_norm"), d);
        linear(&mut specs, &format!("{p}.conv.pw2"), d, d);
        ffn(&mut specs, &format!("{p}.ffn2"), d, cfg.d_ff);
        norm(&mut specs, &format!("{p}.final_norm"), d);
    }

    let dec_classes = cfg.vocab().decoder_classes();
    specs.push(ParamSpec {
        name: "dec.embed".into(),
        shape: vec![dec_classes, d],
        init: InitKind::Normal { sd: (d as f64).powf(-0.5) },
    });
    for i in 0..cfg.n_dec_layers {
        let p = format!("dec.{i}");
        attention(&mut specs, &format!("{p}.self"), d);
        attention(&mut specs, &format!("{p}.cross"), d);
        ffn(&mut specs, &format!("{p}.ffn"), d, cfg.d_ff);
    }
    norm(&mut specs, "dec.norm", d);
    linear(&mut specs, "dec.out", d, dec_classes);

    linear(&mut specs, "ctc", d, cfg.vocab().ctc_classes());

    specs
}

/// Seeded initialization: Xavier-uniform weights, zero biases, unit layer
/// norm gains, `N(0, d_model^-1/2)` embeddings.
pub fn init_params(seed: u64, cfg: &ModelConfig) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for spec in param_manifest(cfg) {
        let numel: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            InitKind::Zeros => vec![0.0; numel],
            InitKind::Ones => vec![1.0; numel],
            InitKind::XavierUniform { .. } => {
                let a = spec.init.xavier_bound().unwrap() as f32;
                (0..numel).map(|_| rng.random_range(-a..a)).collect()
            }
            InitKind::Normal { sd } => {
                let sd = sd as f32;
                (0..numel)
                    .map(|_| {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        sd * n
                    })
                    .collect()
            }
        };
        map.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(Parameters { map })
}

/// Parameter tensors injected into one compute graph. Both encoder branches
/// of a training step read the same node ids, so weight sharing is identity,
/// not equality.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Copy all parameters into a graph. `trainable` decides whether gradients
/// accumulate on them during backward.
pub fn bind_params<S: Scalar>(
    g: &mut Graph<S>,
    params: &Parameters,
    trainable: bool,
) -> Result<BoundParams> {
    let mut ids = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let t: Tensor<S> = tensor.cast();
        let id = if trainable { g.param(t)? } else { g.leaf(t)? };
        ids.insert(name.clone(), id);
    }
    Ok(BoundParams { ids })
}

impl Parameters {
    /// Start from a different precision (used by f64 verification probes).
    pub fn cast_map<S: Scalar>(&self) -> BTreeMap<String, Tensor<S>> {
        self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let cfg = ModelConfig::default();
        let a = init_params(1, &cfg).unwrap();
        let b = init_params(1, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs_somewhere() {
        let cfg = ModelConfig::default();
        let a = init_params(1, &cfg).unwrap();
        let b = init_params(2, &cfg).unwrap();
        assert!(a.iter().zip(b.iter()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn xavier_weights_within_bound() {
        let cfg = ModelConfig::default();
        let params = init_params(3, &cfg).unwrap();
        for spec in param_manifest(&cfg) {
            if let Some(bound) = spec.init.xavier_bound() {
                let t = params.get(&spec.name).unwrap();
                for &v in t.data() {
                    assert!(
                        (v as f64).abs() <= bound,
                        "{} value {v} exceeds xavier bound {bound}",
                        spec.name
                    );
                }
            }
        }
    }

    #[test]
    fn name_set_determined_by_config_alone() {
        let cfg = ModelConfig::default();
        let a: Vec<String> = init_params(1, &cfg).unwrap().names().cloned().collect();
        let b: Vec<String> = init_params(99, &cfg).unwrap().names().cloned().collect();
        assert_eq!(a, b);
        let manifest: std::collections::BTreeSet<String> =
            param_manifest(&cfg).into_iter().map(|s| s.name).collect();
        let got: std::collections::BTreeSet<String> = a.into_iter().collect();
        assert_eq!(manifest, got);
    }

    #[test]
    fn shapes_match_manifest() {
        let cfg = ModelConfig { n_enc_layers: 1, n_dec_layers: 1, ..Default::default() };
        let params = init_params(7, &cfg).unwrap();
        for spec in param_manifest(&cfg) {
            assert_eq!(params.get(&spec.name).unwrap().shape(), &spec.shape[..], "{}", spec.name);
        }
    }
}
