use std::fmt;

use super::ModelError;
use crate::hash::fnv1a64;

/// Where layer normalization sits relative to the residual additions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormPlacement {
    /// `x + f(LN(x))`: the residual stream is a running sum of block outputs.
    Pre,
    /// `LN(x + f(x))`, as in the original transformer.
    Post,
}

impl NormPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }
}

/// Shape of the frozen base transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BaseConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub causal: bool,
    pub norm: NormPlacement,
}

impl BaseConfig {
    /// Config with `ffn_dim = 4 * model_dim`, 64 positions, causal pre-norm.
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            ffn_dim: 4 * model_dim,
            vocab_size,
            max_seq_len: 64,
            causal: true,
            norm: NormPlacement::Pre,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Canonical `key=value;` text of every field, in fixed order.
    pub fn canonical_text(&self) -> String {
        format!(
            "layers={};dim={};heads={};ffn={};vocab={};max_seq={};causal={};norm={};",
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
            self.causal,
            self.norm.as_str()
        )
    }

    pub fn parse_canonical(text: &str) -> Result<Self, ModelError> {
        let mut cfg = BaseConfig::new(0, 0, 0, 0);
        let mut seen = 0;
        for pair in text.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed config entry `{pair}`")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| ModelError::Config(format!("bad value `{v}` for `{k}`")))
            };
            match k {
                "layers" => cfg.num_layers = num()?,
                "dim" => cfg.model_dim = num()?,
                "heads" => cfg.num_heads = num()?,
                "ffn" => cfg.ffn_dim = num()?,
                "vocab" => cfg.vocab_size = num()?,
                "max_seq" => cfg.max_seq_len = num()?,
                "causal" => {
                    cfg.causal = v
                        .parse()
                        .map_err(|_| ModelError::Config(format!("bad value `{v}` for `causal`")))?
                }
                "norm" => {
                    cfg.norm = match v {
                        "pre" => NormPlacement::Pre,
                        "post" => NormPlacement::Post,
                        _ => return Err(ModelError::Config(format!("bad norm placement `{v}`"))),
                    }
                }
                _ => return Err(ModelError::Config(format!("unknown config key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 8 {
            return Err(ModelError::Config(format!("expected 8 config fields, found {seen}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64-bit FNV-1a hash of [`BaseConfig::canonical_text`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}

impl fmt::Display for BaseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}
