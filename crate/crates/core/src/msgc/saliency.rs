//! Mask-generator MLPs: `GAP -> W1 -> BN -> ReLU -> W2 (+ bias)`, one per layer,
//! reshaped to `G_i x C_i` per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::MsgcBlockConfig;
use crate::error::Result;
use crate::layers::{BnLayer, Mode};
use crate::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{
    global_avg_pool, linear, linear_backward, relu, relu_backward, sigmoid, BatchNormCache,
    Tensor2, Tensor4,
};

#[derive(Clone, Debug)]
pub struct MaskMlp {
    pub w1: ParamId,
    pub bn: BnLayer,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

pub struct MlpCache {
    pub hidden_pre: Tensor2,
    pub bn_cache: Option<BatchNormCache<Tensor2>>,
    pub bn_out: Tensor2,
    pub activ: Tensor2,
}

impl MaskMlp {
    /// `bias_init` sets every output bias; a positive value makes fresh gates open.
    pub fn add<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        bias_init: f64,
    ) -> Result<Self> {
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let w1 = store.add(
            format!("{prefix}.w1"),
            ParamKind::Gate,
            vec![input, hidden],
            (0..input * hidden).map(|_| n1.sample(rng)).collect(),
        )?;
        let bn = BnLayer::add(store, &format!("{prefix}.bn"), hidden, ParamKind::Gate)?;
        let w2 = store.add(
            format!("{prefix}.w2"),
            ParamKind::Gate,
            vec![hidden, output],
            (0..hidden * output).map(|_| n2.sample(rng)).collect(),
        )?;
        let b2 = store.add(format!("{prefix}.b2"), ParamKind::Gate, vec![output], vec![bias_init; output])?;
        Ok(Self { w1, bn, w2, b2, input, hidden, output })
    }

    fn matrix(store: &ParamStore, id: ParamId) -> Tensor2 {
        let p = store.param(id);
        Tensor2::from_vec(p.dims[0], p.dims[1], p.data.clone()).expect("stored dims")
    }

    pub fn forward(&self, store: &ParamStore, pooled: &Tensor2, mode: Mode) -> Result<(Tensor2, MlpCache)> {
        let hidden_pre = linear(pooled, &Self::matrix(store, self.w1), None)?;
        let bn = self.bn.forward(store, &hidden_pre, mode)?;
        let activ = Tensor2::from_vec(bn.y.rows(), bn.y.cols(), relu(bn.y.data()))?;
        let out = linear(&activ, &Self::matrix(store, self.w2), Some(store.get(self.b2)))?;
        Ok((out, MlpCache { hidden_pre, bn_cache: bn.cache, bn_out: bn.y, activ }))
    }

    /// Returns the gradient w.r.t. the pooled input. Needs a train-mode cache.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        grad_out: &Tensor2,
        cache: &MlpCache,
        pooled: &Tensor2,
    ) -> Result<Tensor2> {
        let g2 = linear_backward(grad_out, &cache.activ, &Self::matrix(store, self.w2))?;
        grads.accumulate(self.w2, g2.w.data());
        grads.accumulate(self.b2, &g2.bias);
        let d_bn = Tensor2::from_vec(
            g2.x.rows(),
            g2.x.cols(),
            relu_backward(cache.bn_out.data(), g2.x.data()),
        )?;
        let bn_cache = cache
            .bn_cache
            .as_ref()
            .ok_or_else(|| crate::MsgcError::config("mask MLP backward needs a train-mode forward"))?;
        let d_hidden = self.bn.backward(store, grads, &d_bn, bn_cache)?;
        let g1 = linear_backward(&d_hidden, pooled, &Self::matrix(store, self.w1))?;
        grads.accumulate(self.w1, g1.w.data());
        Ok(g1.x)
    }

    /// Parameters of this MLP: `(weight matrices, batch-norm affine, output bias)`.
    pub fn parameter_counts(&self) -> (usize, usize, usize) {
        (self.input * self.hidden + self.hidden * self.output, 2 * self.hidden, self.output)
    }
}

/// Per-layer gate saliency `S_i` and, where attached, attention saliency `A_i`.
pub struct SaliencySet {
    pub pooled: Tensor2,
    pub gate: Vec<Tensor2>,
    pub attention: Vec<Option<Tensor2>>,
    pub gate_caches: Vec<MlpCache>,
    pub attention_caches: Vec<Option<MlpCache>>,
}

/// Mask generators of one block.
#[derive(Clone, Debug)]
pub struct MaskGenerator {
    pub gates: Vec<MaskMlp>,
    pub attention: Vec<Option<MaskMlp>>,
}

impl MaskGenerator {
    pub fn add<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        config: &MsgcBlockConfig,
        saliency_bias_init: f64,
    ) -> Result<Self> {
        config.validate()?;
        let c1 = config.input_channels();
        let hid = config.hidden_width();
        let mut gates = Vec::new();
        let mut attention = Vec::new();
        for i in 0..config.layer_count() {
            let out = config.mask_len(i);
            gates.push(MaskMlp::add(store, rng, &format!("{prefix}.gate{i}"), c1, hid, out, saliency_bias_init)?);
            attention.push(if config.has_attention(i) {
                Some(MaskMlp::add(store, rng, &format!("{prefix}.attn{i}"), c1, hid, out, 0.0)?)
            } else {
                None
            });
        }
        Ok(Self { gates, attention })
    }

    pub fn generate(&self, store: &ParamStore, block_input: &Tensor4, mode: Mode) -> Result<SaliencySet> {
        let c1 = self.gates[0].input;
        if block_input.channels() != c1 {
            return Err(crate::MsgcError::shape(format!(
                "mask generator expects {c1} channels, block input has {}",
                block_input.channels()
            )));
        }
        let pooled = global_avg_pool(block_input)?;
        let mut gate = Vec::new();
        let mut gate_caches = Vec::new();
        let mut attention = Vec::new();
        let mut attention_caches = Vec::new();
        for (g, a) in self.gates.iter().zip(&self.attention) {
            let (s, c) = g.forward(store, &pooled, mode)?;
            gate.push(s);
            gate_caches.push(c);
            match a {
                Some(mlp) => {
                    let (s, c) = mlp.forward(store, &pooled, mode)?;
                    attention.push(Some(s));
                    attention_caches.push(Some(c));
                }
                None => {
                    attention.push(None);
                    attention_caches.push(None);
                }
            }
        }
        Ok(SaliencySet { pooled, gate, attention, gate_caches, attention_caches })
    }
}

/// Squashes raw attention saliency into `(0, 1)`.
pub fn attention(raw: &Tensor2) -> Tensor2 {
    Tensor2::from_vec(raw.rows(), raw.cols(), sigmoid(raw.data())).expect("shape preserved")
}
