//! Model and training configuration.
//!
//! Serialized as flat `key=value` text, one entry per line; the canonical
//! serialization is echoed into checkpoints for provenance.

use crate::attention::AttentionMode;
use crate::encoders::EncodingKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncodingKind,
    pub word_dim: usize,
    pub seq_len: usize,
    /// Per direction; the bi-LSTM output is twice this, the enhanced
    /// encoding adds the word dim on top.
    pub bilstm_hidden: usize,
    pub btree_hidden: usize,
    pub operator_count: usize,
    pub operator_hidden: usize,
    pub operator_out: usize,
    pub aggregator_hidden: usize,
    pub batch_size: usize,
    pub batch_norm: bool,
    pub bn_gamma_init: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub oov_std: f64,
    /// Read `oov_std` as a variance instead of a standard deviation.
    pub oov_std_is_variance: bool,
    pub forget_bias_init: f64,
    pub share_transform: bool,
    pub share_encoder: bool,
    pub attention_mode: AttentionMode,
    pub seed: u64,
    pub oov_seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncodingKind::BilstmEnhanced,
            word_dim: 300,
            seq_len: 64,
            bilstm_hidden: 300,
            btree_hidden: 300,
            operator_count: 11,
            operator_hidden: 300,
            operator_out: 300,
            aggregator_hidden: 300,
            batch_size: 40,
            batch_norm: true,
            bn_gamma_init: 0.001,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            oov_std: 0.06,
            oov_std_is_variance: false,
            forget_bias_init: 1.0,
            share_transform: true,
            share_encoder: true,
            attention_mode: AttentionMode::Softmax,
            seed: 42,
            oov_seed: 7,
            max_epochs: 20,
            patience: 3,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro! {
            encoder, word_dim, seq_len, bilstm_hidden, btree_hidden,
            operator_count, operator_hidden, operator_out, aggregator_hidden,
            batch_size, batch_norm, bn_gamma_init, bn_momentum, bn_eps,
            lr, adam_beta1, adam_beta2, adam_eps, oov_std, oov_std_is_variance,
            forget_bias_init, share_transform, share_encoder, attention_mode,
            seed, oov_seed, max_epochs, patience
        }
    };
}

impl ModelConfig {
    /// Phrase-encoding dimension for the configured encoder.
    pub fn encoding_dim(&self) -> usize {
        match self.encoder {
            EncodingKind::BilstmEnhanced => self.word_dim + 2 * self.bilstm_hidden,
            EncodingKind::Btree => self.btree_hidden,
        }
    }

    /// Dimension of the concatenated aligned pair [t_p ; H_e^p].
    pub fn pair_dim(&self) -> usize {
        2 * self.encoding_dim()
    }

    /// OOV standard deviation under the configured interpretation.
    pub fn effective_oov_std(&self) -> f64 {
        if self.oov_std_is_variance {
            self.oov_std.sqrt()
        } else {
            self.oov_std
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("seq_len", self.seq_len),
            ("bilstm_hidden", self.bilstm_hidden),
            ("btree_hidden", self.btree_hidden),
            ("operator_count", self.operator_count),
            ("operator_hidden", self.operator_hidden),
            ("operator_out", self.operator_out),
            ("aggregator_hidden", self.aggregator_hidden),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.oov_std <= 0.0 {
            return Err(Error::Config("oov_std must be positive".into()));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` serialization, fixed field order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($field:ident),+ $(,)?) => {
                $(out.push_str(&format!("{}={}\n", stringify!($field), self.$field));)+
            };
        }
        config_fields!(emit);
        out
    }

    /// Parse `key=value` lines; blank lines and `#` comments are ignored,
    /// unknown keys are errors. Starts from defaults, so a partial file
    /// overrides only what it names.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! assign {
            ($($field:ident),+ $(,)?) => {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| {
                            Error::Config(format!("invalid value '{value}' for {key}"))
                        })?;
                    })+
                    other => {
                        return Err(Error::Config(format!("unknown config key '{other}'")));
                    }
                }
            };
        }
        config_fields!(assign);
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}
