use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tokenize::VOCAB_SIZE;

/// Standard deviation of freshly initialized weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            context_len: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.context_len,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
        ];
        if dims.contains(&0) {
            return Err(LabError::Config("model dimensions must be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LabError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(LabError::Config(format!(
                "vocab_size must cover the {VOCAB_SIZE} byte-level symbols"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.vocab_size * d + self.context_len * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of the four attention projections and their biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIndex {
    pub weight: [usize; 4],
    pub bias: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIndex {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub attn: AttnIndex,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc_weight: usize,
    pub fc_bias: usize,
    pub proj_weight: usize,
    pub proj_bias: usize,
}

/// Names, shapes and flat offsets of every parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIndex>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    inits: Vec<Init>,
}

pub const ATTN_NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut inits = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(ParamSpec { name, shape, offset });
            inits.push(init);
            offset
        };
        let d = config.d_model;
        let tok_emb = push("tok_emb".into(), vec![config.vocab_size, d], Init::Normal);
        let pos_emb = push("pos_emb".into(), vec![config.context_len, d], Init::Normal);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln1_gain = push(p("ln1.gain"), vec![d], Init::Ones);
            let ln1_bias = push(p("ln1.bias"), vec![d], Init::Zeros);
            let mut weight = [0; 4];
            let mut bias = [0; 4];
            for (i, name) in ATTN_NAMES.iter().enumerate() {
                weight[i] = push(p(&format!("attn.{name}.weight")), vec![d, d], Init::Normal);
                bias[i] = push(p(&format!("attn.{name}.bias")), vec![d], Init::Zeros);
            }
            let ln2_gain = push(p("ln2.gain"), vec![d], Init::Ones);
            let ln2_bias = push(p("ln2.bias"), vec![d], Init::Zeros);
            let fc_weight = push(p("mlp.fc.weight"), vec![d, config.d_ff], Init::Normal);
            let fc_bias = push(p("mlp.fc.bias"), vec![config.d_ff], Init::Zeros);
            let proj_weight = push(p("mlp.proj.weight"), vec![config.d_ff, d], Init::Normal);
            let proj_bias = push(p("mlp.proj.bias"), vec![d], Init::Zeros);
            layers.push(LayerIndex {
                ln1_gain,
                ln1_bias,
                attn: AttnIndex { weight, bias },
                ln2_gain,
                ln2_bias,
                fc_weight,
                fc_bias,
                proj_weight,
                proj_bias,
            });
        }
        let lnf_gain = push("ln_f.gain".into(), vec![d], Init::Ones);
        let lnf_bias = push("ln_f.bias".into(), vec![d], Init::Zeros);
        ParamLayout {
            specs,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            inits,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// All weights of the model as one flat vector in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ModelState {
    /// Weight matrices and embeddings ~ N(0, 0.02^2), biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut data = vec![0.0; layout.total];
        for (spec, init) in layout.specs.iter().zip(&layout.inits) {
            let slot = &mut data[spec.range()];
            match init {
                Init::Normal => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
            }
        }
        Ok(ModelState { config, layout, data })
    }

    /// Rebuilds a state from raw values, checking the length against the layout.
    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total {
            return Err(LabError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Config("parameters must be finite".into()));
        }
        Ok(ModelState { config, layout, data })
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout.spec(name).map(|s| &self.data[s.range()])
    }
}

/// Flat gradient vector, congruent with the parameters it was taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub data: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(len: usize) -> Self {
        GradientSet { data: vec![0.0; len] }
    }

    /// l2 norm over every coordinate of every array.
    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_scaled(&mut self, factor: f64, other: &GradientSet) {
        super::linalg::axpy(factor, &other.data, &mut self.data);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
