use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyperparameters of one stage model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_vision: usize,
    pub d_ff: usize,
    /// Longest encoder input accepted before truncation.
    pub max_len: usize,
    pub positional: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            d_vision: 32,
            d_ff: 128,
            max_len: 512,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.d_model == 0 || self.d_vision == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

macro_rules! param_ids {
    ($($id:ident => $name:literal),* $(,)?) => {
        /// Every trainable tensor of a stage model, in storage order.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum ParamId { $($id),* }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$id),*];

            pub fn name(self) -> &'static str {
                match self { $(ParamId::$id => $name),* }
            }
        }
    };
}

param_ids! {
    TokenEmbedding => "token_embedding",
    EncQuery => "encoder.attn.query",
    EncKey => "encoder.attn.key",
    EncValue => "encoder.attn.value",
    EncOut => "encoder.attn.out",
    EncFf1 => "encoder.ff.w1",
    EncFf1Bias => "encoder.ff.b1",
    EncFf2 => "encoder.ff.w2",
    EncFf2Bias => "encoder.ff.b2",
    VisionProj => "fusion.vision_proj",
    FuseQuery => "fusion.attn.query",
    FuseKey => "fusion.attn.key",
    FuseValue => "fusion.attn.value",
    GateText => "fusion.gate.text",
    GateVision => "fusion.gate.vision",
    DecSelfQuery => "decoder.self_attn.query",
    DecSelfKey => "decoder.self_attn.key",
    DecSelfValue => "decoder.self_attn.value",
    DecSelfOut => "decoder.self_attn.out",
    DecCrossQuery => "decoder.cross_attn.query",
    DecCrossKey => "decoder.cross_attn.key",
    DecCrossValue => "decoder.cross_attn.value",
    DecCrossOut => "decoder.cross_attn.out",
    DecFf1 => "decoder.ff.w1",
    DecFf1Bias => "decoder.ff.b1",
    DecFf2 => "decoder.ff.w2",
    DecFf2Bias => "decoder.ff.b2",
    OutputProj => "output_proj",
    RationaleProj => "contrastive.proj",
    RationaleBias => "contrastive.bias",
}

impl ParamId {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Shape and init fan-in. Linear weights are stored `[out, in]` and
    /// applied as `x · Wᵀ`; the output projection is stored `[d, V]`.
    fn layout(self, c: &ModelConfig) -> (Vec<usize>, usize) {
        use ParamId::*;
        let (d, dv, ff, v) = (c.d_model, c.d_vision, c.d_ff, c.vocab_size);
        match self {
            // a lookup reads one row per token, so each output has one input
            TokenEmbedding => (vec![v, d], 1),
            EncQuery | EncKey | EncValue | EncOut | FuseQuery | FuseKey | FuseValue | GateText
            | GateVision | DecSelfQuery | DecSelfKey | DecSelfValue | DecSelfOut
            | DecCrossQuery | DecCrossKey | DecCrossValue | DecCrossOut | RationaleProj => {
                (vec![d, d], d)
            }
            EncFf1 | DecFf1 => (vec![ff, d], d),
            EncFf1Bias | DecFf1Bias => (vec![ff], d),
            EncFf2 | DecFf2 => (vec![d, ff], ff),
            EncFf2Bias | DecFf2Bias => (vec![d], ff),
            VisionProj => (vec![d, dv], dv),
            OutputProj => (vec![d, v], d),
            RationaleBias => (vec![d], d),
        }
    }
}

/// All trainable weights of one stage model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = ParamId::ALL
            .iter()
            .map(|id| {
                let (shape, fan_in) = id.layout(&config);
                Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), rng)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles params from tensors in [`ParamId::ALL`] order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != ParamId::ALL.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                ParamId::ALL.len(),
                tensors.len()
            )));
        }
        for (id, t) in ParamId::ALL.iter().zip(&tensors) {
            let (shape, _) = id.layout(&config);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model_params",
                    format!(
                        "{} has shape {:?}, expected {shape:?}",
                        id.name(),
                        t.shape()
                    ),
                ));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!(
                    "{} holds non-finite values",
                    id.name()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        ParamId::ALL.iter().map(|id| id.name()).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
