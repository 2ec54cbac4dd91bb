//! A residual basic block (two 3x3 convolutions with BN/ReLU and an identity or
//! projection shortcut) with optional per-sample gating of both convolutions.
//!
//! The whole block's masks are derived from the block input before any
//! convolution runs, so in eval mode an output channel of the first convolution
//! that no group of the second selects is never computed.

use rand::Rng;

use super::binarize::{binarize_eval, binarize_with_noise, gate_backward, Relaxation};
use super::config::MsgcBlockConfig;
use super::grouped::{grouped_conv_backward, grouped_conv_forward};
use super::macs::{compute_block_macs, BlockMacModel, LayerCost, MacLedger};
use super::saliency::{attention, MaskGenerator, SaliencySet};
use crate::error::{MsgcError, Result};
use crate::layers::{BnLayer, ConvLayer, Mode};
use crate::params::{Grads, ParamKind, ParamStore};
use crate::tensor::{
    global_avg_pool_backward, relu, relu_backward, sigmoid_backward, BatchNormCache, ConvGeom,
    Tensor2, Tensor4,
};

/// How a block turns saliency into masks.
#[derive(Clone, Copy, Debug)]
pub enum MaskRule<'a> {
    /// `Sign(S)`, deterministic.
    Sign,
    /// Logistic-perturbed gates with pre-drawn noise, one tensor per layer.
    Sampled { noise: &'a [Tensor2], relax: Relaxation },
    /// Every mask forced to one and attention bypassed: the unmodified host block.
    AllOnes,
}

/// Masks of one block for a batch, with what the backward pass needs.
pub struct GateState {
    pub saliency: SaliencySet,
    /// Forward mask values, `N x (G_i * C_i)` per layer.
    pub masks: Vec<Tensor2>,
    /// Soft probabilities for sampled gates.
    pub probs: Vec<Option<Tensor2>>,
    /// Squashed attention per layer, where attached.
    pub attention: Vec<Option<Tensor2>>,
    pub temperature: f64,
}

impl GateState {
    pub fn differentiable(&self) -> bool {
        self.probs.iter().all(Option::is_some)
    }

    fn scale(&self, layer: usize) -> Tensor2 {
        let mut s = self.masks[layer].clone();
        if let Some(a) = &self.attention[layer] {
            for (v, w) in s.data_mut().iter_mut().zip(a.data()) {
                *v *= w;
            }
        }
        s
    }

    pub fn sample_masks(&self, n: usize) -> Vec<&[f64]> {
        self.masks.iter().map(|m| m.row(n)).collect()
    }
}

/// Gating settings applied to both convolutions of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSpec {
    pub groups: [usize; 2],
    /// 0-based layers with an attention MLP.
    pub attention_layers: Vec<usize>,
    pub reduction: usize,
    pub gumbel_temperature: f64,
    pub saliency_bias_init: f64,
}

#[derive(Clone, Debug)]
pub struct BlockGate {
    pub config: MsgcBlockConfig,
    pub generator: MaskGenerator,
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub name: String,
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
    pub shortcut: Option<(ConvLayer, BnLayer)>,
    pub gate: Option<BlockGate>,
    pub input_hw: (usize, usize),
    pub mac_model: BlockMacModel,
}

pub struct BlockCache {
    x: Tensor4,
    gate: Option<GateState>,
    scales: [Option<Tensor2>; 2],
    bn1: Option<BatchNormCache<Tensor4>>,
    u1: Tensor4,
    r1: Tensor4,
    bn2: Option<BatchNormCache<Tensor4>>,
    shortcut_bn: Option<BatchNormCache<Tensor4>>,
    pre: Tensor4,
}

impl BlockCache {
    pub fn gate(&self) -> Option<&GateState> {
        self.gate.as_ref()
    }
}

pub struct BlockOutput {
    pub y: Tensor4,
    pub cache: BlockCache,
    /// Ledger per sample from the masks.
    pub ledgers: Vec<MacLedger>,
    /// MACs the convolution loops actually executed per sample (block convs only).
    pub executed_macs: Vec<u64>,
}

fn dense_model(conv1: &ConvLayer, conv2: &ConvLayer, hw: (usize, usize)) -> Result<BlockMacModel> {
    let (h1, w1) = conv1
        .output_hw(hw.0, hw.1)
        .ok_or_else(|| MsgcError::config("block conv1 does not fit its input"))?;
    let (h2, w2) = conv2
        .output_hw(h1, w1)
        .ok_or_else(|| MsgcError::config("block conv2 does not fit its input"))?;
    let layer = |c: &ConvLayer, out_h, out_w| LayerCost {
        k: c.k,
        c_in: c.c_in,
        c_out: c.c_out,
        groups: c.groups(),
        out_h,
        out_w,
    };
    Ok(BlockMacModel { layers: vec![layer(conv1, h1, w1), layer(conv2, h2, w2)], mlp_overhead: 0 })
}

impl BasicBlock {
    /// A block with freshly initialised weights; `gating` turns it into a gated block.
    #[allow(clippy::too_many_arguments)]
    pub fn add<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        input_hw: (usize, usize),
        gating: Option<&GateSpec>,
    ) -> Result<Self> {
        let groups = gating.map_or([1, 1], |g| g.groups);
        let conv1 = ConvLayer::add_grouped(store, rng, &format!("{name}.conv1"), 3, c_in, c_out, ConvGeom::new(stride, 1), groups[0])?;
        let bn1 = BnLayer::add(store, &format!("{name}.bn1"), c_out, ParamKind::Backbone)?;
        let conv2 = ConvLayer::add_grouped(store, rng, &format!("{name}.conv2"), 3, c_out, c_out, ConvGeom::new(1, 1), groups[1])?;
        let bn2 = BnLayer::add(store, &format!("{name}.bn2"), c_out, ParamKind::Backbone)?;
        let shortcut = if stride != 1 || c_in != c_out {
            let conv = ConvLayer::add_dense(store, rng, &format!("{name}.proj"), 1, c_in, c_out, ConvGeom::new(stride, 0))?;
            let bn = BnLayer::add(store, &format!("{name}.proj_bn"), c_out, ParamKind::Backbone)?;
            Some((conv, bn))
        } else {
            None
        };
        let (gate, mac_model) = match gating {
            None => (None, dense_model(&conv1, &conv2, input_hw)?),
            Some(spec) => {
                let config = MsgcBlockConfig {
                    channels: vec![c_in, c_out, c_out],
                    groups: spec.groups.to_vec(),
                    kernel_sizes: vec![3, 3],
                    strides: vec![stride, 1],
                    paddings: vec![1, 1],
                    reduction: spec.reduction,
                    attention_layers: spec.attention_layers.clone(),
                    gumbel_temperature: spec.gumbel_temperature,
                };
                config.validate()?;
                let generator = MaskGenerator::add(store, rng, name, &config, spec.saliency_bias_init)?;
                let model = BlockMacModel::new(&config, input_hw)?;
                (Some(BlockGate { config, generator }), model)
            }
        };
        Ok(Self { name: name.to_string(), conv1, bn1, conv2, bn2, shortcut, gate, input_hw, mac_model })
    }

    /// Dense MACs of the shortcut projection, if any.
    pub fn shortcut_macs(&self) -> u64 {
        self.shortcut
            .as_ref()
            .map_or(0, |(c, _)| c.dense_macs(self.input_hw.0, self.input_hw.1))
    }

    pub fn output_channels(&self) -> usize {
        self.conv2.c_out
    }

    pub fn output_hw(&self) -> (usize, usize) {
        let l = &self.mac_model.layers[1];
        (l.out_h, l.out_w)
    }

    fn gate_state(
        &self,
        store: &ParamStore,
        x: &Tensor4,
        mode: Mode,
        rule: MaskRule<'_>,
    ) -> Result<Option<GateState>> {
        let gate = match (&self.gate, rule) {
            (None, _) | (_, MaskRule::AllOnes) => return Ok(None),
            (Some(g), _) => g,
        };
        let saliency = gate.generator.generate(store, x, mode)?;
        let m = gate.config.layer_count();
        let mut masks = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m);
        match rule {
            MaskRule::Sign => {
                for s in &saliency.gate {
                    masks.push(binarize_eval(s));
                    probs.push(None);
                }
            }
            MaskRule::Sampled { noise, relax } => {
                if noise.len() != m {
                    return Err(MsgcError::shape(format!(
                        "block {} got noise for {} layers, has {m}",
                        self.name,
                        noise.len()
                    )));
                }
                for (s, l) in saliency.gate.iter().zip(noise) {
                    let g = binarize_with_noise(s, l, gate.config.gumbel_temperature, relax)?;
                    masks.push(g.value);
                    probs.push(Some(g.prob));
                }
            }
            MaskRule::AllOnes => unreachable!(),
        }
        let attention = saliency.attention.iter().map(|a| a.as_ref().map(attention)).collect();
        Ok(Some(GateState { saliency, masks, probs, attention, temperature: gate.config.gumbel_temperature }))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4, mode: Mode, rule: MaskRule<'_>) -> Result<BlockOutput> {
        if x.channels() != self.conv1.c_in || (x.height(), x.width()) != self.input_hw {
            return Err(MsgcError::shape(format!(
                "block {} expects ({}, {:?}), got {:?}",
                self.name,
                self.conv1.c_in,
                self.input_hw,
                x.shape()
            )));
        }
        let n = x.batch();
        let gate = self.gate_state(store, x, mode, rule)?;
        let masks: [Option<&Tensor2>; 2] = match &gate {
            Some(g) => [Some(&g.masks[0]), Some(&g.masks[1])],
            None => [None, None],
        };
        let atts: [Option<&Tensor2>; 2] = match &gate {
            Some(g) => [g.attention[0].as_ref(), g.attention[1].as_ref()],
            None => [None, None],
        };
        // Eval-mode BN is per sample, so outputs no later layer consumes can be skipped.
        let needed: Option<Vec<bool>> = match (&gate, mode) {
            (Some(g), Mode::Eval) => Some(
                (0..n)
                    .flat_map(|s| self.mac_model.needed_outputs(&g.sample_masks(s), 0))
                    .collect(),
            ),
            _ => None,
        };

        let c1 = grouped_conv_forward(x, &self.conv1.filters(store), masks[0], atts[0], self.conv1.geom, needed.as_deref())?;
        let b1 = self.bn1.forward(store, &c1.y, mode)?;
        let r1 = Tensor4::from_vec(n, self.conv1.c_out, c1.y.height(), c1.y.width(), relu(b1.y.data()))?;
        let c2 = grouped_conv_forward(&r1, &self.conv2.filters(store), masks[1], atts[1], self.conv2.geom, None)?;
        let b2 = self.bn2.forward(store, &c2.y, mode)?;
        let (sc, shortcut_bn) = match &self.shortcut {
            Some((conv, bn)) => {
                let z = grouped_conv_forward(x, &conv.filters(store), None, None, conv.geom, None)?;
                let out = bn.forward(store, &z.y, mode)?;
                (out.y, out.cache)
            }
            None => (x.clone(), None),
        };
        let mut pre = b2.y;
        pre.add_assign(&sc)?;
        let y = Tensor4::from_vec(n, self.conv2.c_out, pre.height(), pre.width(), relu(pre.data()))?;

        let ledgers = (0..n)
            .map(|s| match &gate {
                Some(g) if g.masks.iter().all(|m| m.row(s).iter().all(|&v| v == 0.0 || v == 1.0)) => {
                    compute_block_macs(&g.sample_masks(s), &self.mac_model)
                }
                // Relaxed gates have no integer count: report the rounded expected cost.
                Some(g) => self.relaxed_ledger(g, s),
                None => Ok(self.dense_ledger()),
            })
            .collect::<Result<Vec<_>>>()?;
        let executed_macs = c1.executed_macs.iter().zip(&c2.executed_macs).map(|(a, b)| a + b).collect();
        let scales = match &gate {
            Some(g) => [Some(g.scale(0)), Some(g.scale(1))],
            None => [None, None],
        };
        Ok(BlockOutput {
            y,
            cache: BlockCache { x: x.clone(), gate, scales, bn1: b1.cache, u1: b1.y, r1, bn2: b2.cache, shortcut_bn, pre },
            ledgers,
            executed_macs,
        })
    }

    fn dense_ledger(&self) -> MacLedger {
        let per_layer: Vec<u64> = self.mac_model.layers.iter().map(LayerCost::dense_macs).collect();
        let total = per_layer.iter().sum();
        MacLedger { per_layer, achieved: total, m_ori: total, mlp_overhead: self.mac_model.mlp_overhead }
    }

    fn relaxed_ledger(&self, g: &GateState, s: usize) -> Result<MacLedger> {
        let (cost, _) = self.mac_model.cost_and_grad(&g.sample_masks(s))?;
        let dense = self.mac_model.dense_macs();
        Ok(MacLedger {
            per_layer: vec![],
            achieved: cost.round() as u64,
            m_ori: dense,
            mlp_overhead: self.mac_model.mlp_overhead,
        })
    }

    /// Per-sample differentiable cost and its gradient w.r.t. each layer's mask values.
    pub fn mask_cost(&self, cache: &BlockCache) -> Result<(Vec<f64>, Option<Vec<Tensor2>>)> {
        let n = cache.x.batch();
        let Some(g) = &cache.gate else {
            return Ok((vec![self.mac_model.dense_macs() as f64; n], None));
        };
        let mut costs = Vec::with_capacity(n);
        let mut grads: Vec<Tensor2> = g.masks.iter().map(|m| Tensor2::zeros(m.rows(), m.cols())).collect();
        for s in 0..n {
            let (c, gs) = self.mac_model.cost_and_grad(&g.sample_masks(s))?;
            costs.push(c);
            for (t, row) in grads.iter_mut().zip(gs) {
                t.row_mut(s).copy_from_slice(&row);
            }
        }
        Ok((costs, Some(grads)))
    }

    pub fn update_running(&self, store: &mut ParamStore, cache: &BlockCache) {
        for (bn, c) in [(&self.bn1, &cache.bn1), (&self.bn2, &cache.bn2)] {
            if let Some(c) = c {
                bn.update_running(store, &c.stats);
            }
        }
        if let (Some((_, bn)), Some(c)) = (&self.shortcut, &cache.shortcut_bn) {
            bn.update_running(store, &c.stats);
        }
        if let (Some(gate), Some(state)) = (&self.gate, &cache.gate) {
            let caches = state.saliency.gate_caches.iter().map(Some).chain(state.saliency.attention_caches.iter().map(Option::as_ref));
            let mlps = gate.generator.gates.iter().map(Some).chain(gate.generator.attention.iter().map(Option::as_ref));
            for (mlp, c) in mlps.zip(caches) {
                if let (Some(mlp), Some(c)) = (mlp, c) {
                    if let Some(bc) = &c.bn_cache {
                        mlp.bn.update_running(store, &bc.stats);
                    }
                }
            }
        }
    }

    /// Backward through the block; `mask_grads` adds extra gradient on the mask
    /// values (the budget term). Returns the gradient w.r.t. the block input.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        grad_out: &Tensor4,
        cache: &BlockCache,
        mask_grads: Option<&[Tensor2]>,
    ) -> Result<Tensor4> {
        let missing = || MsgcError::config(format!("block {} backward needs a train-mode forward", self.name));
        let (n, c, h, w) = cache.pre.shape();
        let dpre = Tensor4::from_vec(n, c, h, w, relu_backward(cache.pre.data(), grad_out.data()))?;

        let dz2 = self.bn2.backward(store, grads, &dpre, cache.bn2.as_ref().ok_or_else(missing)?)?;
        let g2 = grouped_conv_backward(&dz2, &cache.r1, &self.conv2.filters(store), cache.scales[1].as_ref(), self.conv2.geom)?;
        for (id, gw) in self.conv2.weights.iter().zip(&g2.weights) {
            grads.accumulate(*id, gw);
        }
        let (n1, c1, h1, w1) = cache.u1.shape();
        let du1 = Tensor4::from_vec(n1, c1, h1, w1, relu_backward(cache.u1.data(), g2.x.data()))?;
        let dz1 = self.bn1.backward(store, grads, &du1, cache.bn1.as_ref().ok_or_else(missing)?)?;
        let g1 = grouped_conv_backward(&dz1, &cache.x, &self.conv1.filters(store), cache.scales[0].as_ref(), self.conv1.geom)?;
        for (id, gw) in self.conv1.weights.iter().zip(&g1.weights) {
            grads.accumulate(*id, gw);
        }
        let mut dx = g1.x;

        match &self.shortcut {
            Some((conv, bn)) => {
                let dz = bn.backward(store, grads, &dpre, cache.shortcut_bn.as_ref().ok_or_else(missing)?)?;
                let gs = grouped_conv_backward(&dz, &cache.x, &conv.filters(store), None, conv.geom)?;
                grads.accumulate(conv.weights[0], &gs.weights[0]);
                dx.add_assign(&gs.x)?;
            }
            None => dx.add_assign(&dpre)?,
        }

        if let (Some(gate), Some(state)) = (&self.gate, &cache.gate) {
            if state.differentiable() {
                let dscales = [g1.scale.as_ref(), g2.scale.as_ref()];
                let mut dpooled = Tensor2::zeros(n, gate.config.input_channels());
                for layer in 0..gate.config.layer_count() {
                    let ds = dscales[layer].ok_or_else(missing)?;
                    let mask = &state.masks[layer];
                    let mut dmask = ds.clone();
                    if let (Some(att), Some(mlp), Some(c)) = (
                        &state.attention[layer],
                        &gate.generator.attention[layer],
                        &state.saliency.attention_caches[layer],
                    ) {
                        for (d, a) in dmask.data_mut().iter_mut().zip(att.data()) {
                            *d *= a;
                        }
                        let datt: Vec<f64> = ds.data().iter().zip(mask.data()).map(|(d, m)| d * m).collect();
                        let draw = Tensor2::from_vec(n, mask.cols(), sigmoid_backward(att.data(), &datt))?;
                        let dp = mlp.backward(store, grads, &draw, c, &state.saliency.pooled)?;
                        add2(&mut dpooled, &dp);
                    }
                    if let Some(extra) = mask_grads {
                        add2(&mut dmask, &extra[layer]);
                    }
                    let prob = state.probs[layer].as_ref().ok_or_else(missing)?;
                    let dsal = Tensor2::from_vec(n, mask.cols(), gate_backward(dmask.data(), prob.data(), state.temperature))?;
                    let dp = gate.generator.gates[layer].backward(
                        store,
                        grads,
                        &dsal,
                        &state.saliency.gate_caches[layer],
                        &state.saliency.pooled,
                    )?;
                    add2(&mut dpooled, &dp);
                }
                dx.add_assign(&global_avg_pool_backward(&dpooled, cache.x.height(), cache.x.width()))?;
            }
        }
        Ok(dx)
    }
}

fn add2(a: &mut Tensor2, b: &Tensor2) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgc::binarize::logistic_noise;
    use crate::msgc::filters::plug_in_store;
    use crate::params::ParamId;
    use crate::msgc::DEFAULT_GUMBEL_TEMPERATURE;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(bias: f64, attention_layers: Vec<usize>) -> GateSpec {
        GateSpec {
            groups: [2, 4],
            attention_layers,
            reduction: 2,
            gumbel_temperature: DEFAULT_GUMBEL_TEMPERATURE,
            saliency_bias_init: bias,
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize, c: usize, hw: usize) -> Tensor4 {
        use rand::Rng;
        Tensor4::from_fn(n, c, hw, hw, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn pair(bias: f64, attention_layers: Vec<usize>, stride: usize, c_out: usize) -> (ParamStore, BasicBlock, ParamStore, BasicBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut plain_store = ParamStore::new();
        let plain = BasicBlock::add(&mut plain_store, &mut rng, "b", 4, c_out, stride, (6, 6), None).unwrap();
        let mut gated_store = ParamStore::new();
        let s = spec(bias, attention_layers);
        let gated = BasicBlock::add(&mut gated_store, &mut rng, "b", 4, c_out, stride, (6, 6), Some(&s)).unwrap();
        plug_in_store(&plain_store, &mut gated_store).unwrap();
        (plain_store, plain, gated_store, gated)
    }

    #[test]
    fn all_ones_rule_reproduces_the_host_block() {
        let (ps, plain, gs, gated) = pair(0.0, vec![1], 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = input(&mut rng, 3, 4, 6);
        for mode in [Mode::Eval, Mode::Train] {
            let a = plain.forward(&ps, &x, mode, MaskRule::Sign).unwrap();
            let b = gated.forward(&gs, &x, mode, MaskRule::AllOnes).unwrap();
            assert!(a.y.max_abs_diff(&b.y) <= 1e-10);
            assert_eq!(a.executed_macs, b.executed_macs);
        }
    }

    #[test]
    fn open_gates_without_attention_reproduce_the_host_block() {
        let (ps, plain, gs, gated) = pair(50.0, vec![], 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = input(&mut rng, 2, 4, 6);
        let a = plain.forward(&ps, &x, Mode::Eval, MaskRule::Sign).unwrap();
        let b = gated.forward(&gs, &x, Mode::Eval, MaskRule::Sign).unwrap();
        assert!(a.y.max_abs_diff(&b.y) <= 1e-10);
        for l in &b.ledgers {
            assert_eq!(l.achieved, l.m_ori);
        }
    }

    #[test]
    fn eval_execution_matches_ledger() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let block = BasicBlock::add(&mut store, &mut rng, "b", 4, 8, 2, (6, 6), Some(&spec(0.0, vec![0]))).unwrap();
            let x = input(&mut rng, 4, 4, 6);
            let out = block.forward(&store, &x, Mode::Eval, MaskRule::Sign).unwrap();
            for (l, &e) in out.ledgers.iter().zip(&out.executed_macs) {
                assert_eq!(l.achieved, e);
                assert!(l.achieved <= l.m_ori);
            }
        }
    }

    #[test]
    fn mask_rows_stay_within_their_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = BasicBlock::add(&mut store, &mut rng, "b", 4, 8, 1, (6, 6), Some(&spec(0.0, vec![]))).unwrap();
        let x = input(&mut rng, 3, 4, 6);
        let batch = block.forward(&store, &x, Mode::Eval, MaskRule::Sign).unwrap();
        for s in 0..3 {
            let single = block.forward(&store, &x.select_samples(&[s]), Mode::Eval, MaskRule::Sign).unwrap();
            assert_eq!(single.y.sample(0), batch.y.sample(s));
            assert_eq!(single.executed_macs[0], batch.executed_macs[s]);
        }
    }

    fn trainable(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer).map(|(id, _)| id).collect()
    }

    #[test]
    fn gated_block_gradients_match_finite_differences() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            let block = BasicBlock::add(&mut store, &mut rng, "b", 4, 8, 2, (6, 6), Some(&spec(0.3, vec![0, 1]))).unwrap();
            let x = input(&mut rng, 3, 4, 6);
            let noise: Vec<Tensor2> = (0..2).map(|i| logistic_noise(&mut rng, 3, block.gate.as_ref().unwrap().config.mask_len(i))).collect();
            let rule = MaskRule::Sampled { noise: &noise, relax: Relaxation::Soft };
            let probe = input(&mut rng, 3, 8, 3);
            let extra: Vec<Tensor2> = noise.iter().map(|t| Tensor2::from_fn(t.rows(), t.cols(), |r, c| ((r * 7 + c) % 5) as f64 * 0.1 - 0.2)).collect();

            let loss = |store: &ParamStore, x: &Tensor4| -> f64 {
                let out = block.forward(store, x, Mode::Train, rule).unwrap();
                let main: f64 = out.y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
                let g = out.cache.gate().unwrap();
                let side: f64 = g.masks.iter().zip(&extra).map(|(m, e)| m.data().iter().zip(e.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
                main + side
            };

            let out = block.forward(&store, &x, Mode::Train, rule).unwrap();
            let mut grads = Grads::zeros_like(&store);
            let dx = block.backward(&store, &mut grads, &probe, &out.cache, Some(&extra)).unwrap();

            let ids = trainable(&store);
            let theta: Vec<f64> = ids.iter().flat_map(|&id| store.get(id).to_vec()).collect();
            let analytic: Vec<f64> = ids.iter().flat_map(|&id| grads.get(id).to_vec()).collect();
            let mut scratch = store.clone();
            let report = finite_diff_check(
                |t| {
                    let mut off = 0;
                    for &id in &ids {
                        let len = scratch.get(id).len();
                        scratch.get_mut(id).copy_from_slice(&t[off..off + len]);
                        off += len;
                    }
                    loss(&scratch, &x)
                },
                &theta,
                &analytic,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed} params: {report:?}");

            let report = finite_diff_check(
                |t| loss(&store, &Tensor4::from_vec(3, 4, 6, 6, t.to_vec()).unwrap()),
                x.data(),
                dx.data(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed} input: {report:?}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = BasicBlock::add(&mut store, &mut rng, "b", 4, 8, 2, (6, 6), None).unwrap();
        let err = block.forward(&store, &Tensor4::zeros(1, 3, 6, 6), Mode::Eval, MaskRule::Sign);
        assert!(matches!(err, Err(MsgcError::Shape(_))));
    }
}
