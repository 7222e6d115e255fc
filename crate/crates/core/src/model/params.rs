use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{QaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Xavier-uniform with the given fan-in and fan-out.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    /// Zeros except the forget-gate block, which starts at 1.
    LstmBias { hidden: usize },
}

pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn lstm_specs(prefix: &str, input: usize, hidden: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![4 * hidden, hidden + input],
        init: Init::Xavier {
            fan_in: hidden + input,
            fan_out: 4 * hidden,
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![4 * hidden],
        init: Init::LstmBias { hidden },
    });
}

fn linear_specs(prefix: &str, input: usize, output: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![output, input],
        init: Init::Xavier {
            fan_in: input,
            fan_out: output,
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![output],
        init: Init::Zeros,
    });
}

/// Every trainable tensor with its shape, in initialization order.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let h = config.hidden_size;
    let mut specs = Vec::new();
    for layer in 0..config.encoder_layers {
        let input = if layer == 0 { config.embedding_dim } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            lstm_specs(&format!("encoder.l{layer}.{dir}"), input, h, &mut specs);
        }
    }
    specs.push(ParamSpec {
        name: "attention.w_sim".into(),
        shape: vec![6 * h],
        init: Init::Xavier {
            fan_in: 6 * h,
            fan_out: 1,
        },
    });
    for (decoder, input) in [("start_decoder", 8 * h), ("end_decoder", 10 * h)] {
        for dir in ["fwd", "bwd"] {
            lstm_specs(&format!("{decoder}.{dir}"), input, h, &mut specs);
        }
    }
    for head in ["start_head", "end_head"] {
        linear_specs(&format!("{head}.fc1"), 10 * h, h, &mut specs);
        linear_specs(&format!("{head}.fc2"), h, 1, &mut specs);
    }
    specs
}

/// Named trainable tensors. Start and end decoders and heads own separate
/// entries; nothing is shared between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks that names and shapes agree with the layout for `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let specs = layout(config);
        if specs.len() != self.tensors.len() {
            return Err(QaError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(QaError::Checkpoint(format!(
                        "{} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(QaError::Checkpoint(format!("missing tensor {}", spec.name))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds every tensor to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), graph.param(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Xavier-uniform matrices, zero biases, LSTM forget-gate bias 1.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for spec in layout(config) {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Xavier { fan_in, fan_out } => {
                let limit = xavier_limit(fan_in, fan_out);
                (0..numel).map(|_| rng.gen_range(-limit..=limit)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::LstmBias { hidden } => {
                let mut b = vec![0.0; numel];
                b[hidden..2 * hidden].fill(1.0);
                b
            }
        };
        tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(ModelParams { tensors })
}

/// Number of trainable scalars. The embedding table is frozen and not counted.
pub fn param_count(params: &ModelParams) -> usize {
    params.tensors.values().map(Tensor::numel).sum()
}
