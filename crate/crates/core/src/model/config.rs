use crate::attention::{AttentionConfig, FsmnOrders, Variant};
use crate::error::{Error, Result};
use crate::training::batch::FIRST_SYMBOL;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub variant: Variant,
    pub encoder_fsmn: FsmnOrders,
    pub decoder_fsmn: FsmnOrders,
    /// Width of the (stacked) input feature rows.
    pub input_dim: usize,
    /// Output symbols including pad, sos and eos.
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 10,
            decoder_layers: 3,
            d_model: 512,
            heads: 8,
            d_ffn: 2048,
            variant: Variant::Ssan,
            encoder_fsmn: FsmnOrders::new(11, 10),
            decoder_fsmn: FsmnOrders::new(11, 0),
            input_dim: 560,
            vocab_size: 4233,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ffn", self.d_ffn),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= FIRST_SYMBOL as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond pad/sos/eos",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.encoder_attention().validate()?;
        self.decoder_attention().validate()?;
        Ok(())
    }

    pub fn encoder_attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            variant: self.variant,
            fsmn: Some(self.encoder_fsmn),
            causal: false,
        }
    }

    pub fn decoder_attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            variant: self.variant,
            fsmn: Some(self.decoder_fsmn),
            causal: true,
        }
    }

    pub fn cross_attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            variant: Variant::San,
            fsmn: None,
            causal: false,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}
