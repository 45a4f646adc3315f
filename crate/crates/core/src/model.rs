//! Unified handle over the three model families, plus a tiny text format
//! describing a model so checkpoints can rebuild it.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::param::{HasParams, Param, Real};
use crate::transunet::{TransUNet, TransUNetConfig};
use crate::unet::{BasicUNet, ImprovedUNet, ImprovedUNetConfig};

/// Which architecture to instantiate and with which hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Basic { base_channels: usize },
    Improved(ImprovedUNetConfig),
    Trans(TransUNetConfig),
}

impl ModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Basic { .. } => "basic_unet",
            ModelSpec::Improved(_) => "improved_unet",
            ModelSpec::Trans(_) => "transunet",
        }
    }

    pub fn build<F: Real>(&self, seed: u64) -> Result<AnyModel<F>> {
        Ok(match self {
            ModelSpec::Basic { base_channels } => {
                AnyModel::Basic(BasicUNet::new(*base_channels, seed)?)
            }
            ModelSpec::Improved(cfg) => AnyModel::Improved(ImprovedUNet::new(cfg.clone(), seed)?),
            ModelSpec::Trans(cfg) => AnyModel::Trans(TransUNet::new(cfg.clone(), seed)?),
        })
    }

    /// `key = value` text, one line per field. Stable under
    /// parse -> serialize -> parse.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("kind = {}", self.kind_name())];
        match self {
            ModelSpec::Basic { base_channels } => {
                lines.push(format!("base_channels = {base_channels}"));
            }
            ModelSpec::Improved(c) => {
                lines.push(format!("in_channels = {}", c.in_channels));
                lines.push(format!("out_channels = {}", c.out_channels));
                lines.push(format!("base_channels = {}", c.base_channels));
                lines.push(format!("channel_multiplier = {}", c.channel_multiplier));
                lines.push(format!(
                    "aspp_dilation_rates = {}",
                    join_usizes(&c.aspp_dilation_rates)
                ));
                lines.push(format!("use_attention_gates = {}", c.use_attention_gates));
                lines.push(format!("use_residual_blocks = {}", c.use_residual_blocks));
            }
            ModelSpec::Trans(c) => {
                lines.push(format!("image_size = {}", c.image_size));
                lines.push(format!("in_channels = {}", c.in_channels));
                lines.push(format!("out_channels = {}", c.out_channels));
                lines.push(format!("hidden_dim = {}", c.hidden_dim));
                lines.push(format!("num_layers = {}", c.num_layers));
                lines.push(format!("num_heads = {}", c.num_heads));
                lines.push(format!("mlp_dim = {}", c.mlp_dim));
                lines.push(format!("patch_size = {}", c.patch_size));
                lines.push(format!("stem_channels = {}", join_usizes(&c.stem_channels)));
            }
        }
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("model spec line {} is not `key = value`", lineno + 1))
            })?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        let kind = take(&mut kv, "kind")
            .ok_or_else(|| Error::config("model spec missing `kind`"))?;
        let spec = match kind.as_str() {
            "basic_unet" => ModelSpec::Basic {
                base_channels: parse_usize(&take(&mut kv, "base_channels").unwrap_or("16".into()))?,
            },
            "improved_unet" => {
                let d = ImprovedUNetConfig::default();
                ModelSpec::Improved(ImprovedUNetConfig {
                    in_channels: parse_or(&mut kv, "in_channels", d.in_channels)?,
                    out_channels: parse_or(&mut kv, "out_channels", d.out_channels)?,
                    base_channels: parse_or(&mut kv, "base_channels", d.base_channels)?,
                    channel_multiplier: parse_or(&mut kv, "channel_multiplier", d.channel_multiplier)?,
                    aspp_dilation_rates: match take(&mut kv, "aspp_dilation_rates") {
                        Some(v) => parse_usizes(&v)?,
                        None => d.aspp_dilation_rates,
                    },
                    use_attention_gates: parse_bool_or(
                        &mut kv,
                        "use_attention_gates",
                        d.use_attention_gates,
                    )?,
                    use_residual_blocks: parse_bool_or(
                        &mut kv,
                        "use_residual_blocks",
                        d.use_residual_blocks,
                    )?,
                })
            }
            "transunet" => {
                let d = TransUNetConfig::desk();
                ModelSpec::Trans(TransUNetConfig {
                    image_size: parse_or(&mut kv, "image_size", d.image_size)?,
                    in_channels: parse_or(&mut kv, "in_channels", d.in_channels)?,
                    out_channels: parse_or(&mut kv, "out_channels", d.out_channels)?,
                    hidden_dim: parse_or(&mut kv, "hidden_dim", d.hidden_dim)?,
                    num_layers: parse_or(&mut kv, "num_layers", d.num_layers)?,
                    num_heads: parse_or(&mut kv, "num_heads", d.num_heads)?,
                    mlp_dim: parse_or(&mut kv, "mlp_dim", d.mlp_dim)?,
                    patch_size: parse_or(&mut kv, "patch_size", d.patch_size)?,
                    stem_channels: match take(&mut kv, "stem_channels") {
                        Some(v) => parse_usizes(&v)?,
                        None => d.stem_channels,
                    },
                })
            }
            other => return Err(Error::config(format!("unknown model kind `{other}`"))),
        };
        if let Some((k, _)) = kv.first() {
            return Err(Error::config(format!("unknown model spec key `{k}`")));
        }
        Ok(spec)
    }
}

fn take(kv: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    kv.iter()
        .position(|(k, _)| k == key)
        .map(|i| kv.remove(i).1)
}

fn parse_or(kv: &mut Vec<(String, String)>, key: &str, default: usize) -> Result<usize> {
    match take(kv, key) {
        Some(v) => parse_usize(&v),
        None => Ok(default),
    }
}

fn parse_bool_or(kv: &mut Vec<(String, String)>, key: &str, default: bool) -> Result<bool> {
    match take(kv, key) {
        Some(v) => v
            .parse::<bool>()
            .map_err(|_| Error::config(format!("`{key}` expects true/false, got `{v}`"))),
        None => Ok(default),
    }
}

fn parse_usize(v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::config(format!("expected unsigned integer, got `{v}`")))
}

fn parse_usizes(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(s.trim()))
        .collect::<Result<Vec<_>>>()
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// A built model of any family.
pub enum AnyModel<F> {
    Basic(BasicUNet<F>),
    Improved(ImprovedUNet<F>),
    Trans(TransUNet<F>),
}

impl<F: Real> AnyModel<F> {
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        match self {
            AnyModel::Basic(m) => m.forward(x, mode),
            AnyModel::Improved(m) => m.forward(x, mode),
            AnyModel::Trans(m) => m.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        match self {
            AnyModel::Basic(m) => m.backward(grad),
            AnyModel::Improved(m) => m.backward(grad),
            AnyModel::Trans(m) => m.backward(grad),
        }
    }
}

impl<F: Real> HasParams<F> for AnyModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        match self {
            AnyModel::Basic(m) => m.visit(prefix, f),
            AnyModel::Improved(m) => m.visit(prefix, f),
            AnyModel::Trans(m) => m.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            AnyModel::Basic(m) => m.visit_mut(prefix, f),
            AnyModel::Improved(m) => m.visit_mut(prefix, f),
            AnyModel::Trans(m) => m.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trip() {
        let specs = [
            ModelSpec::Basic { base_channels: 16 },
            ModelSpec::Improved(ImprovedUNetConfig::desk()),
            ModelSpec::Trans(TransUNetConfig::desk()),
        ];
        for spec in specs {
            let text = spec.to_text();
            let parsed = ModelSpec::from_text(&text).unwrap();
            assert_eq!(spec, parsed);
            assert_eq!(parsed.to_text(), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "kind = basic_unet\nbase_channels = 8\nwhatever = 3\n";
        assert!(ModelSpec::from_text(text).is_err());
    }
}
