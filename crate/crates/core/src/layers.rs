//! Parameterised layers bound to a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::msgc::filters::GroupFilters;
use crate::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::ops::BnInput;
use crate::tensor::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BnStats, ConvGeom,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
}

/// Batch-norm output and, in train mode, what the backward pass and the
/// running-stat update need.
pub struct BnOutput<T> {
    pub y: T,
    pub cache: Option<BatchNormCache<T>>,
}

impl BnLayer {
    pub fn add(store: &mut ParamStore, prefix: &str, features: usize, kind: ParamKind) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), kind, vec![features], vec![1.0; features])?,
            beta: store.add(format!("{prefix}.beta"), kind, vec![features], vec![0.0; features])?,
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, vec![features], vec![0.0; features])?,
            running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, vec![features], vec![1.0; features])?,
            features,
        })
    }

    pub fn forward<T: BnInput>(&self, store: &ParamStore, x: &T, mode: Mode) -> Result<BnOutput<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) = batch_norm_train(x, store.get(self.gamma), store.get(self.beta))?;
                Ok(BnOutput { y, cache: Some(cache) })
            }
            Mode::Eval => Ok(BnOutput {
                y: batch_norm_eval(
                    x,
                    store.get(self.gamma),
                    store.get(self.beta),
                    store.get(self.running_mean),
                    store.get(self.running_var),
                )?,
                cache: None,
            }),
        }
    }

    pub fn backward<T: BnInput>(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        grad_out: &T,
        cache: &BatchNormCache<T>,
    ) -> Result<T> {
        let (dx, dg, db) = batch_norm_backward(grad_out, cache, store.get(self.gamma))?;
        grads.accumulate(self.gamma, &dg);
        grads.accumulate(self.beta, &db);
        Ok(dx)
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BnStats) {
        let mut mean = store.get(self.running_mean).to_vec();
        let mut var = store.get(self.running_var).to_vec();
        stats.update_running(&mut mean, &mut var);
        store.get_mut(self.running_mean).copy_from_slice(&mean);
        store.get_mut(self.running_var).copy_from_slice(&var);
    }
}

/// A bias-free convolution whose filter is stored as one tensor per group.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weights: Vec<ParamId>,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeom,
}

impl ConvLayer {
    /// Adds a dense (single-group) filter with He-normal initialisation.
    pub fn add_dense<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        Self::add_grouped(store, rng, name, k, c_in, c_out, geom, 1)
    }

    /// Adds a filter split into `groups` output-channel slices, stored as
    /// `{name}.weight.g{j}`; a single group is stored as `{name}.weight`.
    #[allow(clippy::too_many_arguments)]
    pub fn add_grouped<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_out % groups != 0 {
            return Err(crate::MsgcError::config(format!(
                "{name}: {groups} groups do not divide {c_out} output channels"
            )));
        }
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let per = c_out / groups;
        let mut weights = Vec::with_capacity(groups);
        for j in 0..groups {
            let pname = if groups == 1 { format!("{name}.weight") } else { format!("{name}.weight.g{j}") };
            let data = (0..k * k * c_in * per).map(|_| normal.sample(rng)).collect();
            weights.push(store.add(pname, ParamKind::Backbone, vec![per, c_in, k, k], data)?);
        }
        Ok(Self { weights, k, c_in, c_out, geom })
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    pub fn filters<'a>(&self, store: &'a ParamStore) -> GroupFilters<'a> {
        GroupFilters {
            k: self.k,
            c_in: self.c_in,
            per_group: self.c_out / self.weights.len(),
            weights: self.weights.iter().map(|&id| store.get(id)).collect(),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geom.out_len(h, self.k)?, self.geom.out_len(w, self.k)?))
    }

    pub fn dense_macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_hw(h, w).unwrap_or((0, 0));
        (self.k * self.k * self.c_in * self.c_out * ho * wo) as u64
    }
}
