//! Multiply-accumulate accounting for gated blocks.
//!
//! A selected `(layer i, group g, input channel c)` costs `k_i^2 * H_out * W_out`
//! per output channel of `g` that is actually produced. Output channel `o` of
//! layer `i < M` is produced only if some group of layer `i + 1` selects it;
//! the last layer always produces every output.

use super::config::MsgcBlockConfig;
use crate::error::{MsgcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerCost {
    /// MACs of one `(output channel, input channel)` pair.
    pub fn pair_macs(&self) -> u64 {
        (self.k * self.k * self.out_h * self.out_w) as u64
    }

    pub fn per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn dense_macs(&self) -> u64 {
        self.pair_macs() * (self.c_in * self.c_out) as u64
    }
}

/// Per-block cost model; spatial sizes are fixed by the block's input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMacModel {
    pub layers: Vec<LayerCost>,
    /// MACs of the mask-generator (and attention) MLPs, charged once per sample.
    pub mlp_overhead: u64,
}

/// Achieved MACs of one sample in one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacLedger {
    pub per_layer: Vec<u64>,
    pub achieved: u64,
    pub m_ori: u64,
    pub mlp_overhead: u64,
}

impl MacLedger {
    pub fn ratio(&self) -> f64 {
        self.achieved as f64 / self.m_ori as f64
    }
}

/// MACs of one mask MLP: `C1 * hidden + hidden * (G * C)`.
pub fn mlp_macs(config: &MsgcBlockConfig, layer: usize) -> u64 {
    let hid = config.hidden_width();
    (config.input_channels() * hid + hid * config.mask_len(layer)) as u64
}

impl BlockMacModel {
    pub fn new(config: &MsgcBlockConfig, input_hw: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let (mut h, mut w) = input_hw;
        let mut layers = Vec::with_capacity(config.layer_count());
        let mut overhead = 0;
        for i in 0..config.layer_count() {
            let geom = config.geom(i);
            let k = config.kernel_sizes[i];
            let (out_h, out_w) = match (geom.out_len(h, k), geom.out_len(w, k)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(MsgcError::config(format!("layer {i} kernel does not fit {h}x{w}"))),
            };
            layers.push(LayerCost {
                k,
                c_in: config.channels[i],
                c_out: config.channels[i + 1],
                groups: config.groups[i],
                out_h,
                out_w,
            });
            overhead += mlp_macs(config, i);
            if config.has_attention(i) {
                overhead += mlp_macs(config, i);
            }
            h = out_h;
            w = out_w;
        }
        Ok(Self { layers, mlp_overhead: overhead })
    }

    pub fn dense_macs(&self) -> u64 {
        self.layers.iter().map(LayerCost::dense_macs).sum()
    }

    fn check(&self, masks: &[&[f64]]) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(MsgcError::shape(format!(
                "{} masks for a {}-layer block",
                masks.len(),
                self.layers.len()
            )));
        }
        for (i, (m, l)) in masks.iter().zip(&self.layers).enumerate() {
            if m.len() != l.groups * l.c_in {
                return Err(MsgcError::shape(format!(
                    "layer {i} mask has {} entries, expected {}x{}",
                    m.len(),
                    l.groups,
                    l.c_in
                )));
            }
        }
        Ok(())
    }

    /// Which outputs of `layer` are consumed downstream, for binary masks.
    pub fn needed_outputs(&self, masks: &[&[f64]], layer: usize) -> Vec<bool> {
        let out = self.layers[layer].c_out;
        match self.layers.get(layer + 1) {
            None => vec![true; out],
            Some(next) => (0..out)
                .map(|c| (0..next.groups).any(|g| masks[layer + 1][g * next.c_in + c] != 0.0))
                .collect(),
        }
    }

    /// Integer per-layer MACs; masks must be binary.
    pub fn layer_macs(&self, masks: &[&[f64]]) -> Result<Vec<u64>> {
        self.check(masks)?;
        if masks.iter().any(|m| m.iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(MsgcError::shape("integer MAC count needs binary masks"));
        }
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let needed = self.needed_outputs(masks, i);
                let pg = l.per_group();
                (0..l.groups)
                    .map(|g| {
                        let produced = needed[g * pg..(g + 1) * pg].iter().filter(|&&b| b).count() as u64;
                        let selected =
                            masks[i][g * l.c_in..(g + 1) * l.c_in].iter().filter(|&&v| v == 1.0).count() as u64;
                        produced * selected * l.pair_macs()
                    })
                    .sum()
            })
            .collect())
    }

    /// Multilinear extension of the MAC count and its gradient w.r.t. every mask
    /// entry. Agrees with [`Self::layer_macs`] on binary masks.
    pub fn cost_and_grad(&self, masks: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check(masks)?;
        let m = self.layers.len();
        // needed[i][o] = 1 - prod_g (1 - masks[i + 1][g, o]).
        let needed: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let out = self.layers[i].c_out;
                match self.layers.get(i + 1) {
                    None => vec![1.0; out],
                    Some(next) => (0..out)
                        .map(|c| 1.0 - (0..next.groups).map(|g| 1.0 - masks[i + 1][g * next.c_in + c]).product::<f64>())
                        .collect(),
                }
            })
            .collect();
        let row_sums: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let l = &self.layers[i];
                (0..l.groups).map(|g| masks[i][g * l.c_in..(g + 1) * l.c_in].iter().sum()).collect()
            })
            .collect();
        let mut cost = 0.0;
        let mut grads: Vec<Vec<f64>> = masks.iter().map(|mk| vec![0.0; mk.len()]).collect();
        for i in 0..m {
            let l = &self.layers[i];
            let pair = l.pair_macs() as f64;
            let pg = l.per_group();
            for g in 0..l.groups {
                let need_sum: f64 = needed[i][g * pg..(g + 1) * pg].iter().sum();
                cost += pair * need_sum * row_sums[i][g];
                for c in 0..l.c_in {
                    grads[i][g * l.c_in + c] += pair * need_sum;
                }
            }
            if i > 0 {
                // Through the skip rule: masks[i] decides which outputs of layer i-1 are produced.
                let prev = &self.layers[i - 1];
                let prev_pair = prev.pair_macs() as f64;
                let prev_pg = prev.per_group();
                for c in 0..l.c_in {
                    let coef = prev_pair * row_sums[i - 1][c / prev_pg];
                    for g in 0..l.groups {
                        let others: f64 = (0..l.groups)
                            .filter(|&h| h != g)
                            .map(|h| 1.0 - masks[i][h * l.c_in + c])
                            .product();
                        grads[i][g * l.c_in + c] += coef * others;
                    }
                }
            }
        }
        Ok((cost, grads))
    }
}

/// Ledger entry of one sample from its binary masks (one slice per layer).
pub fn compute_block_macs(masks: &[&[f64]], model: &BlockMacModel) -> Result<MacLedger> {
    let per_layer = model.layer_macs(masks)?;
    Ok(MacLedger {
        achieved: per_layer.iter().sum(),
        per_layer,
        m_ori: model.dense_macs(),
        mlp_overhead: model.mlp_overhead,
    })
}
