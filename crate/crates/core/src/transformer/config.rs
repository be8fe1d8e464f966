use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Longest token sequence either side may hold, BOS/EOS included.
    pub max_len: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            max_len: 16,
            dropout_rate: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn with_vocab(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            src_vocab_size,
            tgt_vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_heads == 0 {
            return fail("layer, width and head counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.src_vocab_size <= 4 || self.tgt_vocab_size <= 4 {
            return fail("vocabularies need at least one token beyond the reserved ids".into());
        }
        if self.max_len < 3 {
            return fail("max_len must allow BOS, one token and EOS".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("dropout_rate and label_smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order; the checkpoint header stores these.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("src_vocab_size", self.src_vocab_size.to_string()),
            ("tgt_vocab_size", self.tgt_vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout_rate", format!("{:?}", self.dropout_rate)),
            ("label_smoothing", format!("{:?}", self.label_smoothing)),
        ]
    }

    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "num_layers" => self.num_layers = int()?,
            "d_model" => self.d_model = int()?,
            "num_heads" => self.num_heads = int()?,
            "d_ff" => self.d_ff = int()?,
            "src_vocab_size" => self.src_vocab_size = int()?,
            "tgt_vocab_size" => self.tgt_vocab_size = int()?,
            "max_len" => self.max_len = int()?,
            "dropout_rate" => self.dropout_rate = float()?,
            "label_smoothing" => self.label_smoothing = float()?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }
}
