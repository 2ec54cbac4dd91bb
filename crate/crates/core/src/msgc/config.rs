use crate::error::{MsgcError, Result};
use crate::tensor::ConvGeom;

/// Gumbel temperature used when sampling training-time masks.
pub const DEFAULT_GUMBEL_TEMPERATURE: f64 = 2.0 / 3.0;

/// Static description of one gated block of `M` consecutive convolutions.
///
/// `channels` has `M + 1` entries: layer `i` maps `channels[i]` to `channels[i + 1]`.
/// `attention_layers` holds zero-based layer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MsgcBlockConfig {
    pub channels: Vec<usize>,
    pub groups: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub reduction: usize,
    pub attention_layers: Vec<usize>,
    pub gumbel_temperature: f64,
}

impl MsgcBlockConfig {
    pub fn layer_count(&self) -> usize {
        self.groups.len()
    }

    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    /// Hidden width of every mask-generator MLP, `ceil(C1 / R)`.
    pub fn hidden_width(&self) -> usize {
        self.channels[0].div_ceil(self.reduction).max(1)
    }

    /// Saliency entries for layer `i`: `G_i * C_i`.
    pub fn mask_len(&self, layer: usize) -> usize {
        self.groups[layer] * self.channels[layer]
    }

    pub fn geom(&self, layer: usize) -> ConvGeom {
        ConvGeom::new(self.strides[layer], self.paddings[layer])
    }

    pub fn has_attention(&self, layer: usize) -> bool {
        self.attention_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.groups.len();
        if m == 0 {
            return Err(MsgcError::config("block needs at least one layer"));
        }
        if self.channels.len() != m + 1
            || self.kernel_sizes.len() != m
            || self.strides.len() != m
            || self.paddings.len() != m
        {
            return Err(MsgcError::config(format!(
                "block with {m} layers needs {} channel widths and {m} kernels/strides/paddings",
                m + 1
            )));
        }
        if self.reduction == 0 {
            return Err(MsgcError::config("reduction rate must be positive"));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return Err(MsgcError::config("gumbel temperature must be positive"));
        }
        for i in 0..m {
            let g = self.groups[i];
            if g == 0 || g > self.channels[i] {
                return Err(MsgcError::config(format!(
                    "layer {i}: group count {g} must lie in 1..={}",
                    self.channels[i]
                )));
            }
            if self.channels[i + 1] % g != 0 {
                return Err(MsgcError::config(format!(
                    "layer {i}: {g} groups do not divide {} output channels",
                    self.channels[i + 1]
                )));
            }
            if self.kernel_sizes[i] % 2 == 0 {
                return Err(MsgcError::config(format!("layer {i}: kernel size must be odd")));
            }
            if self.strides[i] == 0 {
                return Err(MsgcError::config(format!("layer {i}: stride must be positive")));
            }
        }
        if let Some(&bad) = self.attention_layers.iter().find(|&&a| a >= m) {
            return Err(MsgcError::config(format!("attention layer {bad} out of range")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basic(groups: Vec<usize>) -> MsgcBlockConfig {
        MsgcBlockConfig {
            channels: vec![8, 8, 8],
            groups,
            kernel_sizes: vec![3, 3],
            strides: vec![1, 1],
            paddings: vec![1, 1],
            reduction: 4,
            attention_layers: vec![0, 1],
            gumbel_temperature: DEFAULT_GUMBEL_TEMPERATURE,
        }
    }

    #[test]
    fn accepts_valid_and_rejects_divisibility() {
        basic(vec![1, 4]).validate().unwrap();
        assert!(basic(vec![1, 3]).validate().is_err());
        assert!(basic(vec![0, 4]).validate().is_err());
        assert!(basic(vec![16, 1]).validate().is_err());
    }

    #[test]
    fn hidden_width_rounds_up() {
        let mut c = basic(vec![1, 4]);
        assert_eq!(c.hidden_width(), 2);
        c.reduction = 3;
        assert_eq!(c.hidden_width(), 3);
        c.reduction = 64;
        assert_eq!(c.hidden_width(), 1);
    }
}
