//! Encoder-decoder Transformer with ODE blocks on the encoder, and a causal
//! language model built from the same blocks.
//!
//! Parameter names follow `<stack>.block<i>.<sublayer>.<tensor>`, with
//! stacks `enc`, `dec` and `lm`. Block coefficients live under a `coef`
//! scope (`enc.block3.coef.gate.w`).

mod batch;
mod forward;
mod layout;

use core::fmt;
use core::str::FromStr;

pub use batch::{SeqBatch, TokenBatch};
pub use forward::{
    decode, decode_step, encode, encode_states, greedy_decode, lm_forward, lm_logits, lm_loss, perplexity,
    seq2seq_logits, seq2seq_loss, Pass, StageTrace,
};
pub use layout::{init_params, param_layout, ParamSlot};

use crate::blocks::{BlockVariant, OdeGranularity, SublayerSpec, DEFAULT_LN_EPS};
use crate::error::{Error, Result};

/// Position signal added to scaled token embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Position {
    #[default]
    Sinusoidal,
    LearnedAbsolute,
}

impl Position {
    pub fn tag(self) -> &'static str {
        match self {
            Position::Sinusoidal => "sinusoidal",
            Position::LearnedAbsolute => "learned",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinusoidal" => Ok(Position::Sinusoidal),
            "learned" | "learnedabsolute" => Ok(Position::LearnedAbsolute),
            _ => Err(Error::Parse { kind: "position encoding", value: s.into() }),
        }
    }
}

/// Model hyperparameters.
///
/// `dec_depth == 0` selects the causal language model; its block stack has
/// `enc_depth` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub variant: BlockVariant,
    pub granularity: OdeGranularity,
    pub dropout: f64,
    pub ln_eps: f64,
    pub max_len: usize,
    pub tie_embeddings: bool,
    pub position: Position,
    /// Each encoder block is applied this many times in a row with the
    /// same parameters.
    pub repeats: usize,
    pub pad_id: Option<usize>,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl ModelConfig {
    /// Encoder-decoder defaults: pad 0, BOS 1, EOS 2.
    pub fn encoder_decoder(vocab_size: usize, d_model: usize, enc_depth: usize, dec_depth: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            heads: 2,
            ffn_dim: 2 * d_model,
            enc_depth,
            dec_depth,
            variant: BlockVariant::Euler,
            granularity: OdeGranularity::Fused,
            dropout: 0.0,
            ln_eps: DEFAULT_LN_EPS,
            max_len: 64,
            tie_embeddings: true,
            position: Position::Sinusoidal,
            repeats: 1,
            pad_id: Some(0),
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Causal LM with `depth` blocks and no padding token.
    pub fn language_model(vocab_size: usize, d_model: usize, depth: usize) -> Self {
        Self {
            dec_depth: 0,
            pad_id: None,
            bos_id: 0,
            eos_id: 0,
            ..Self::encoder_decoder(vocab_size, d_model, depth, 0)
        }
    }

    pub fn with_variant(mut self, variant: BlockVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn is_lm(&self) -> bool {
        self.dec_depth == 0
    }

    pub fn san_spec(&self) -> SublayerSpec {
        SublayerSpec { dropout: self.dropout, ln_eps: self.ln_eps, ..SublayerSpec::san(self.d_model, self.heads) }
    }

    pub fn ffn_spec(&self) -> SublayerSpec {
        SublayerSpec { dropout: self.dropout, ln_eps: self.ln_eps, ..SublayerSpec::ffn(self.d_model, self.ffn_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        self.san_spec().validate()?;
        self.ffn_spec().validate()?;
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if self.enc_depth == 0 {
            return Err(Error::invalid("the block stack needs at least one block"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be positive"));
        }
        if self.repeats > 1 && self.variant.uses_history() {
            return Err(Error::invalid("repeated blocks are not defined for history variants"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("ln_eps must be positive"));
        }
        let specials = [self.pad_id, Some(self.bos_id), Some(self.eos_id)];
        if specials.iter().flatten().any(|&id| id >= self.vocab_size) {
            return Err(Error::invalid("special token ids must be below vocab_size"));
        }
        Ok(())
    }

    /// Name of the block stack carrying the ODE variant.
    pub fn block_stack(&self) -> &'static str {
        if self.is_lm() {
            "lm"
        } else {
            "enc"
        }
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        param_layout(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = ModelConfig::encoder_decoder(16, 8, 2, 1);
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { enc_depth: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { pad_id: Some(16), ..ok.clone() }.validate().is_err());
        let repeated = ModelConfig { repeats: 2, variant: BlockVariant::Dlcl, ..ok.clone() };
        assert!(repeated.validate().is_err());
        assert!(ModelConfig::language_model(5, 8, 1).validate().is_ok());
    }

    #[test]
    fn position_parsing() {
        assert_eq!("Sinusoidal".parse::<Position>().unwrap(), Position::Sinusoidal);
        assert_eq!("learned".parse::<Position>().unwrap(), Position::LearnedAbsolute);
        assert!("rope".parse::<Position>().is_err());
    }
}
