//! Small residual classifiers: a 3x3 stem, a stack of basic blocks and a
//! GAP + linear head. Blocks are plain or gated; a gated network is usually
//! obtained from a plain one with [`convert_to_msgc`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MsgcError, Result};
use crate::layers::{BnLayer, ConvLayer, Mode};
use crate::msgc::binarize::logistic_noise;
use crate::msgc::filters::plug_in_store;
use crate::msgc::{BasicBlock, BlockCache, GateSpec, MacLedger, MaskRule, Relaxation, DEFAULT_GUMBEL_TEMPERATURE};
use crate::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward,
    BatchNormCache, ConvGeom, Tensor2, Tensor4,
};
use crate::msgc::grouped::{grouped_conv_backward, grouped_conv_forward};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNetConfig {
    /// `(channels, height, width)` of the input images.
    pub input: (usize, usize, usize),
    pub stem_width: usize,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

impl Default for TinyNetConfig {
    fn default() -> Self {
        Self {
            input: (3, 32, 32),
            stem_width: 16,
            blocks: vec![
                BlockSpec { width: 16, stride: 1 },
                BlockSpec { width: 32, stride: 2 },
                BlockSpec { width: 64, stride: 2 },
            ],
            classes: 8,
        }
    }
}

impl TinyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.stem_width == 0 || self.classes < 2 {
            return Err(MsgcError::config(format!("degenerate network config {self:?}")));
        }
        if self.blocks.is_empty() {
            return Err(MsgcError::config("network needs at least one block"));
        }
        if self.blocks.iter().any(|b| b.width == 0 || b.stride == 0) {
            return Err(MsgcError::config("block widths and strides must be positive"));
        }
        Ok(())
    }
}

/// Gate settings whose defaults follow the ResNet basic-block recipe:
/// groups `{1, 4}` and attention on both layers.
pub fn default_gate_spec() -> GateSpec {
    GateSpec {
        groups: [1, 4],
        attention_layers: vec![0, 1],
        reduction: 4,
        gumbel_temperature: DEFAULT_GUMBEL_TEMPERATURE,
        saliency_bias_init: 3.0,
    }
}

/// Mask rule for a whole network.
#[derive(Clone, Copy, Debug)]
pub enum NetMaskRule<'a> {
    Sign,
    /// Noise per block, per layer; plain blocks take an empty list.
    Sampled { noise: &'a [Vec<Tensor2>], relax: Relaxation },
    AllOnes,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: TinyNetConfig,
    pub gating: Option<GateSpec>,
    pub stem: ConvLayer,
    pub stem_bn: BnLayer,
    pub blocks: Vec<BasicBlock>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

/// MACs of one sample through the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkLedger {
    /// Stem, projection shortcuts and classifier: never gated.
    pub static_macs: u64,
    pub blocks: Vec<MacLedger>,
    /// Static plus block MACs under the sample's masks.
    pub achieved: u64,
    pub m_ori: u64,
    pub mlp_overhead: u64,
}

impl NetworkLedger {
    /// Achieved over dense cost, MLPs excluded.
    pub fn ratio(&self) -> f64 {
        self.achieved as f64 / self.m_ori as f64
    }

    /// Same ratio with the mask-generator MLPs counted on both sides.
    pub fn ratio_inclusive(&self) -> f64 {
        (self.achieved + self.mlp_overhead) as f64 / (self.m_ori + self.mlp_overhead) as f64
    }
}

pub struct NetCache {
    x: Tensor4,
    stem_bn: Option<BatchNormCache<Tensor4>>,
    stem_pre: Tensor4,
    pub blocks: Vec<BlockCache>,
    features: Tensor4,
    pooled: Tensor2,
}

pub struct NetForward {
    pub logits: Tensor2,
    pub cache: NetCache,
    pub ledgers: Vec<NetworkLedger>,
    /// Block-convolution MACs the kernels executed per sample.
    pub executed_block_macs: Vec<u64>,
}

/// Differentiable per-sample cost (whole network) and its gradient on every
/// gated block's masks.
pub struct NetCost {
    pub per_sample: Vec<f64>,
    pub mask_grads: Vec<Option<Vec<Tensor2>>>,
}

impl Network {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &TinyNetConfig,
        gating: Option<&GateSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = config.input;
        let stem = ConvLayer::add_dense(store, rng, "stem", 3, c, config.stem_width, ConvGeom::new(1, 1))?;
        let stem_bn = BnLayer::add(store, "stem_bn", config.stem_width, ParamKind::Backbone)?;
        let mut hw = stem
            .output_hw(h, w)
            .ok_or_else(|| MsgcError::config("stem does not fit the input"))?;
        let mut c_in = config.stem_width;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, spec) in config.blocks.iter().enumerate() {
            let b = BasicBlock::add(store, rng, &format!("block{i}"), c_in, spec.width, spec.stride, hw, gating)?;
            hw = b.output_hw();
            c_in = spec.width;
            blocks.push(b);
        }
        let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("positive std");
        let fc_w = store.add(
            "fc.weight",
            ParamKind::Backbone,
            vec![c_in, config.classes],
            (0..c_in * config.classes).map(|_| normal.sample(rng)).collect(),
        )?;
        let fc_b = store.add("fc.bias", ParamKind::Backbone, vec![config.classes], vec![0.0; config.classes])?;
        Ok(Self { config: config.clone(), gating: gating.cloned(), stem, stem_bn, blocks, fc_w, fc_b })
    }

    pub fn build_plain<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &TinyNetConfig) -> Result<Self> {
        Self::build(store, rng, config, None)
    }

    pub fn is_gated(&self) -> bool {
        self.gating.is_some()
    }

    pub fn feature_width(&self) -> usize {
        self.blocks.last().map_or(self.config.stem_width, BasicBlock::output_channels)
    }

    /// MACs of the layers that are never gated.
    pub fn static_macs(&self) -> u64 {
        let (_, h, w) = self.config.input;
        self.stem.dense_macs(h, w)
            + self.blocks.iter().map(BasicBlock::shortcut_macs).sum::<u64>()
            + (self.feature_width() * self.config.classes) as u64
    }

    /// Dense cost of the whole network, `M_ori`.
    pub fn m_ori(&self) -> u64 {
        self.static_macs() + self.blocks.iter().map(|b| b.mac_model.dense_macs()).sum::<u64>()
    }

    pub fn mlp_overhead(&self) -> u64 {
        self.blocks.iter().map(|b| b.mac_model.mlp_overhead).sum()
    }

    /// Fresh logistic noise for a batch of `n` samples.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<Vec<Tensor2>> {
        self.blocks
            .iter()
            .map(|b| match &b.gate {
                Some(g) => (0..g.config.layer_count()).map(|i| logistic_noise(rng, n, g.config.mask_len(i))).collect(),
                None => Vec::new(),
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (c, h, w) = self.config.input;
        if (x.channels(), x.height(), x.width()) != (c, h, w) || x.batch() == 0 {
            return Err(MsgcError::shape(format!(
                "network expects (N>0, {c}, {h}, {w}), got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4, mode: Mode, rule: NetMaskRule<'_>) -> Result<NetForward> {
        self.check_input(x)?;
        if let NetMaskRule::Sampled { noise, .. } = rule {
            if noise.len() != self.blocks.len() {
                return Err(MsgcError::shape(format!(
                    "noise for {} blocks, network has {}",
                    noise.len(),
                    self.blocks.len()
                )));
            }
        }
        let n = x.batch();
        let z = grouped_conv_forward(x, &self.stem.filters(store), None, None, self.stem.geom, None)?;
        let bn = self.stem_bn.forward(store, &z.y, mode)?;
        let stem_pre = bn.y;
        let (_, c, h, w) = stem_pre.shape();
        let stem_out = Tensor4::from_vec(n, c, h, w, relu(stem_pre.data()))?;

        let static_macs = self.static_macs();
        let mut ledgers: Vec<NetworkLedger> = (0..n)
            .map(|_| NetworkLedger {
                static_macs,
                blocks: Vec::with_capacity(self.blocks.len()),
                achieved: static_macs,
                m_ori: static_macs,
                mlp_overhead: 0,
            })
            .collect();
        let mut executed = vec![0u64; n];
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h_cur = stem_out;
        for (i, block) in self.blocks.iter().enumerate() {
            let r = match rule {
                NetMaskRule::Sign => MaskRule::Sign,
                NetMaskRule::AllOnes => MaskRule::AllOnes,
                NetMaskRule::Sampled { noise, relax } => MaskRule::Sampled { noise: &noise[i], relax },
            };
            let out = block.forward(store, &h_cur, mode, r)?;
            for (l, b) in ledgers.iter_mut().zip(out.ledgers) {
                l.achieved += b.achieved;
                l.m_ori += b.m_ori;
                l.mlp_overhead += b.mlp_overhead;
                l.blocks.push(b);
            }
            for (acc, e) in executed.iter_mut().zip(&out.executed_macs) {
                *acc += e;
            }
            h_cur = out.y;
            caches.push(out.cache);
        }
        let pooled = global_avg_pool(&h_cur)?;
        let fc = store.param(self.fc_w);
        let w = Tensor2::from_vec(fc.dims[0], fc.dims[1], fc.data.clone())?;
        let logits = linear(&pooled, &w, Some(store.get(self.fc_b)))?;
        Ok(NetForward {
            logits,
            cache: NetCache { x: x.clone(), stem_bn: bn.cache, stem_pre, blocks: caches, features: h_cur, pooled },
            ledgers,
            executed_block_macs: executed,
        })
    }

    /// Per-sample differentiable whole-network cost for the budget term.
    pub fn cost(&self, cache: &NetCache) -> Result<NetCost> {
        let n = cache.x.batch();
        let mut per_sample = vec![self.static_macs() as f64; n];
        let mut mask_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            let (costs, grads) = b.mask_cost(c)?;
            for (acc, v) in per_sample.iter_mut().zip(costs) {
                *acc += v;
            }
            mask_grads.push(grads);
        }
        Ok(NetCost { per_sample, mask_grads })
    }

    pub fn update_running(&self, store: &mut ParamStore, cache: &NetCache) {
        if let Some(c) = &cache.stem_bn {
            self.stem_bn.update_running(store, &c.stats);
        }
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.update_running(store, c);
        }
    }

    /// Backward from the logits gradient. `mask_grads[b][layer]` adds gradient
    /// on gated blocks' mask values. Returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &NetCache,
        grad_logits: &Tensor2,
        mask_grads: Option<&[Option<Vec<Tensor2>>]>,
    ) -> Result<Tensor4> {
        let fc = store.param(self.fc_w);
        let w = Tensor2::from_vec(fc.dims[0], fc.dims[1], fc.data.clone())?;
        let g = linear_backward(grad_logits, &cache.pooled, &w)?;
        grads.accumulate(self.fc_w, g.w.data());
        grads.accumulate(self.fc_b, &g.bias);
        let mut d = global_avg_pool_backward(&g.x, cache.features.height(), cache.features.width());
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let extra = mask_grads.and_then(|m| m[i].as_deref());
            d = b.backward(store, grads, &d, c, extra)?;
        }
        let (n, ch, h, wd) = cache.stem_pre.shape();
        let d_pre = Tensor4::from_vec(n, ch, h, wd, relu_backward(cache.stem_pre.data(), d.data()))?;
        let bn_cache = cache
            .stem_bn
            .as_ref()
            .ok_or_else(|| MsgcError::config("network backward needs a train-mode forward"))?;
        let dz = self.stem_bn.backward(store, grads, &d_pre, bn_cache)?;
        let gs = grouped_conv_backward(&dz, &cache.x, &self.stem.filters(store), None, self.stem.geom)?;
        grads.accumulate(self.stem.weights[0], &gs.weights[0]);
        Ok(gs.x)
    }

    /// Trainable scalars by group: `(backbone, gate)`.
    pub fn parameter_counts(store: &ParamStore) -> (usize, usize) {
        let count = |k| store.iter().filter(|(_, p)| p.kind == k).map(|(_, p)| p.data.len()).sum();
        (count(ParamKind::Backbone), count(ParamKind::Gate))
    }
}

/// Builds the gated counterpart of `plain` and copies its weights in, splitting
/// each block convolution into groups. Gate MLPs are freshly initialised.
pub fn convert_to_msgc<R: Rng>(
    plain: &Network,
    plain_store: &ParamStore,
    gating: &GateSpec,
    rng: &mut R,
) -> Result<(Network, ParamStore)> {
    if plain.is_gated() {
        return Err(MsgcError::config("network is already gated"));
    }
    let mut store = ParamStore::new();
    let net = Network::build(&mut store, rng, &plain.config, Some(gating))?;
    plug_in_store(plain_store, &mut store)?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TinyNetConfig {
        TinyNetConfig {
            input: (3, 8, 8),
            stem_width: 8,
            blocks: vec![BlockSpec { width: 8, stride: 1 }, BlockSpec { width: 16, stride: 2 }],
            classes: 4,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, cfg: &TinyNetConfig) -> Tensor4 {
        let (c, h, w) = cfg.input;
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = TinyNetConfig::default();
        let mut store = ParamStore::new();
        let net = Network::build_plain(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let mut expected = 3 * 16 * 9 + 2 * 16;
        let mut c_in = 16;
        for b in &cfg.blocks {
            expected += c_in * b.width * 9 + b.width * b.width * 9 + 4 * b.width;
            if b.stride != 1 || c_in != b.width {
                expected += c_in * b.width + 2 * b.width;
            }
            c_in = b.width;
        }
        expected += 64 * 8 + 8;
        assert_eq!(Network::parameter_counts(&store), (expected, 0));

        let (_, gated) = convert_to_msgc(&net, &store, &default_gate_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(Network::parameter_counts(&gated).0, expected);
        assert!(Network::parameter_counts(&gated).1 > 0);
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = small();
        let mut store = ParamStore::new();
        let net = Network::build_plain(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("weight")).map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).fill(0.0);
        }
        store.get_mut(net.fc_b).copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(1), 3, &cfg);
        let out = net.forward(&store, &x, Mode::Eval, NetMaskRule::Sign).unwrap();
        for r in 0..3 {
            assert_eq!(out.logits.row(r), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn conversion_with_all_ones_is_a_no_op() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let plain = Network::build_plain(&mut store, &mut rng, &cfg).unwrap();
        let (gated, gstore) = convert_to_msgc(&plain, &store, &default_gate_spec(), &mut rng).unwrap();
        let x = random_input(&mut rng, 5, &cfg);
        let a = plain.forward(&store, &x, Mode::Eval, NetMaskRule::Sign).unwrap();
        let b = gated.forward(&gstore, &x, Mode::Eval, NetMaskRule::AllOnes).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) <= 1e-10);
        for l in &b.ledgers {
            assert_eq!(l.achieved, gated.m_ori());
            assert_eq!(l.ratio(), 1.0);
        }
        assert_eq!(plain.m_ori(), gated.m_ori());
    }

    #[test]
    fn ledger_is_additive() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut spec = default_gate_spec();
        spec.saliency_bias_init = 0.0;
        let net = Network::build(&mut store, &mut rng, &cfg, Some(&spec)).unwrap();
        let x = random_input(&mut rng, 6, &cfg);
        let out = net.forward(&store, &x, Mode::Eval, NetMaskRule::Sign).unwrap();
        for (l, e) in out.ledgers.iter().zip(&out.executed_block_macs) {
            let blocks: u64 = l.blocks.iter().map(|b| b.achieved).sum();
            assert_eq!(l.achieved, l.static_macs + blocks);
            assert_eq!(blocks, *e);
            assert!(l.ratio() <= 1.0 && l.ratio_inclusive() <= 1.0);
        }
        let again = net.forward(&store, &x, Mode::Eval, NetMaskRule::Sign).unwrap();
        assert_eq!(out.logits, again.logits);
    }

    #[test]
    fn overhead_is_small_on_default_config() {
        let mut store = ParamStore::new();
        let net = Network::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &TinyNetConfig::default(), Some(&default_gate_spec())).unwrap();
        assert!((net.mlp_overhead() as f64) < 0.01 * net.m_ori() as f64);
    }
}
