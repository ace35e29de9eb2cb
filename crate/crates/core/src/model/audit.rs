//! Parameter counts computed from a configuration alone.

use std::fmt;

use crate::attention::{attention_param_count, Variant};

use super::ModelConfig;

/// Element counts per component of one configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCounts {
    /// Input projection plus token embedding table.
    pub embeddings: usize,
    pub encoder_attention: usize,
    pub encoder_ffn: usize,
    pub decoder_self_attention: usize,
    pub cross_attention: usize,
    pub decoder_ffn: usize,
    pub layer_norms: usize,
    pub output_projection: usize,
}

impl ComponentCounts {
    pub fn total(&self) -> usize {
        self.rows().iter().map(|(_, v)| v).sum()
    }

    pub fn rows(&self) -> [(&'static str, usize); 8] {
        [
            ("embeddings", self.embeddings),
            ("encoder attention", self.encoder_attention),
            ("encoder ffn", self.encoder_ffn),
            ("decoder self-attention", self.decoder_self_attention),
            ("cross-attention", self.cross_attention),
            ("decoder ffn", self.decoder_ffn),
            ("layer norms", self.layer_norms),
            ("output projection", self.output_projection),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub variant: Variant,
    pub components: ComponentCounts,
    pub total: usize,
    /// Total if the output projection weight shared the token embedding table.
    pub total_tied: usize,
    /// Total when every FSMN block is counted with `N1 + N2` taps instead of
    /// `N1 + 1 + N2` (the current-frame tap omitted). Equal to `total` for SAN.
    pub total_without_current_tap: usize,
    /// Total of the same configuration with SAN self-attention.
    pub san_total: usize,
    /// `san_total - total`.
    pub delta: i64,
    /// `100 · delta / san_total`.
    pub reduction_pct: f64,
}

fn components(c: &ModelConfig, without_current_tap: bool) -> ComponentCounts {
    let d = c.d_model;
    let pick = |cfg| {
        let p = attention_param_count(&cfg);
        if without_current_tap {
            p.without_current_tap
        } else {
            p.with_current_tap
        }
    };
    let ffn = 2 * d * c.d_ffn + c.d_ffn + d;
    ComponentCounts {
        embeddings: c.input_dim * d + d + c.vocab_size * d,
        encoder_attention: c.encoder_layers * pick(c.encoder_attention()),
        encoder_ffn: c.encoder_layers * ffn,
        decoder_self_attention: c.decoder_layers * pick(c.decoder_attention()),
        cross_attention: c.decoder_layers * pick(c.cross_attention()),
        decoder_ffn: c.decoder_layers * ffn,
        layer_norms: (2 * c.encoder_layers + 3 * c.decoder_layers + 2) * 2 * d,
        output_projection: d * c.vocab_size + c.vocab_size,
    }
}

pub fn count_params(config: &ModelConfig) -> ParamAudit {
    let comps = components(config, false);
    let total = comps.total();
    let san_total = components(&config.with_variant(Variant::San), false).total();
    let delta = san_total as i64 - total as i64;
    ParamAudit {
        variant: config.variant,
        total_tied: total - config.d_model * config.vocab_size,
        total_without_current_tap: components(config, true).total(),
        san_total,
        delta,
        reduction_pct: 100.0 * delta as f64 / san_total as f64,
        total,
        components: comps,
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant: {}", self.variant.as_str())?;
        for (name, n) in self.components.rows() {
            writeln!(f, "{name:<24}{n:>14}")?;
        }
        writeln!(f, "{:<24}{:>14}", "total", self.total)?;
        writeln!(f, "{:<24}{:>14}", "total (tied output)", self.total_tied)?;
        if self.variant == Variant::Ssan {
            writeln!(f, "{:<24}{:>14}", "total (no current tap)", self.total_without_current_tap)?;
        }
        writeln!(f, "{:<24}{:>14}", "san baseline", self.san_total)?;
        write!(f, "reduction vs san: {} ({:.2}%)", self.delta, self.reduction_pct)
    }
}
