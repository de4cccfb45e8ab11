use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fft,
    Dp,
    Lora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Dp => "dp",
            Method::Lora => "lora",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Method::Fft),
            "dp" => Ok(Method::Dp),
            "lora" => Ok(Method::Lora),
            other => Err(LabError::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Noise scale and clipping threshold. A threshold of `null` in JSON (or
/// `f64::INFINITY` in code) disables clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub noise_scale: f64,
    #[serde(with = "threshold")]
    pub clip_threshold: f64,
}

mod threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
        if t.is_finite() {
            s.serialize_f64(*t)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            noise_scale: 0.1,
            clip_threshold: 1e-2,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0) {
            return Err(LabError::Config("clip threshold must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(LabError::Config("noise scale must be non-negative".into()));
        }
        if self.clip_threshold.is_infinite() && self.noise_scale > 0.0 {
            return Err(LabError::Config("unclipped training cannot add calibrated noise".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Attention projections to adapt in every layer: any of `q`, `k`, `v`, `o`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: ["q", "k", "v", "o"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub lora: LoraConfig,
}

impl TrainConfig {
    pub fn fft() -> Self {
        TrainConfig {
            method: Method::Fft,
            learning_rate: 0.00025,
            batch_size: 16,
            epochs: 50,
            warmup_steps: 10,
            seed: 0,
            optimizer: OptimizerKind::default(),
            dp: DpConfig::default(),
            lora: LoraConfig::default(),
        }
    }

    pub fn dp(noise_scale: f64) -> Self {
        TrainConfig {
            method: Method::Dp,
            learning_rate: 0.00005,
            batch_size: 8,
            dp: DpConfig {
                noise_scale,
                clip_threshold: 1e-2,
            },
            ..TrainConfig::fft()
        }
    }

    pub fn lora(rank: usize, alpha: f64) -> Self {
        TrainConfig {
            method: Method::Lora,
            batch_size: 32,
            lora: LoraConfig {
                rank,
                alpha,
                ..LoraConfig::default()
            },
            ..TrainConfig::fft()
        }
    }

    /// Method defaults for `method`.
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Fft => TrainConfig::fft(),
            Method::Dp => TrainConfig::dp(0.1),
            Method::Lora => TrainConfig::lora(16, 16.0),
        }
    }

    /// Short label identifying the run, e.g. `dp_sigma0.1` or `lora_r16_a16`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Fft => "fft".into(),
            Method::Dp => format!("dp_sigma{}", self.dp.noise_scale),
            Method::Lora => format!("lora_r{}_a{}", self.lora.rank, self.lora.alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LabError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(LabError::Config("epochs must be at least 1".into()));
        }
        match self.method {
            Method::Dp => self.dp.validate()?,
            Method::Lora => {
                if self.lora.rank == 0 {
                    return Err(LabError::Config("LoRA rank must be at least 1".into()));
                }
                if !(self.lora.alpha > 0.0) {
                    return Err(LabError::Config("LoRA alpha must be positive".into()));
                }
                if self.lora.targets.is_empty() {
                    return Err(LabError::Config("LoRA needs at least one target".into()));
                }
            }
            Method::Fft => {}
        }
        Ok(())
    }
}
