//! Splitting a dense filter into per-group filter banks.

use crate::error::{MsgcError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::ConvWeight;

/// Filters of one layer, one `(k, k, C_in, C_out / G)` tensor per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFilterBank {
    pub groups: Vec<ConvWeight>,
}

impl GroupFilterBank {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn view(&self) -> GroupFilters<'_> {
        let first = &self.groups[0];
        GroupFilters {
            k: first.k,
            c_in: first.c_in,
            per_group: first.c_out,
            weights: self.groups.iter().map(|w| w.data.as_slice()).collect(),
        }
    }

    /// Concatenates the groups back along the output axis.
    pub fn concat(&self) -> ConvWeight {
        let first = &self.groups[0];
        let data = self.groups.iter().flat_map(|w| w.data.iter().copied()).collect();
        ConvWeight {
            k: first.k,
            c_in: first.c_in,
            c_out: first.c_out * self.groups.len(),
            data,
        }
    }
}

/// Borrowed group filters; `weights[g]` is laid out `[o_local][c_in][ky][kx]`.
#[derive(Clone, Debug)]
pub struct GroupFilters<'a> {
    pub k: usize,
    pub c_in: usize,
    pub per_group: usize,
    pub weights: Vec<&'a [f64]>,
}

impl GroupFilters<'_> {
    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    pub fn c_out(&self) -> usize {
        self.per_group * self.weights.len()
    }

    pub fn kernel(&self, g: usize, o_local: usize, c: usize) -> &[f64] {
        let kk = self.k * self.k;
        let start = (o_local * self.c_in + c) * kk;
        &self.weights[g][start..start + kk]
    }
}

/// Slices a dense filter into `groups` banks: group `g` owns output channels
/// `[g * C_out / G, (g + 1) * C_out / G)` and keeps every input channel.
pub fn plug_in(full: &ConvWeight, groups: usize) -> Result<GroupFilterBank> {
    if groups == 0 || full.c_out % groups != 0 {
        return Err(MsgcError::config(format!(
            "{groups} groups do not divide {} output channels",
            full.c_out
        )));
    }
    let per_group = full.c_out / groups;
    let chunk = per_group * full.c_in * full.k * full.k;
    let banks = full
        .data
        .chunks(chunk)
        .map(|c| ConvWeight { k: full.k, c_in: full.c_in, c_out: per_group, data: c.to_vec() })
        .collect();
    Ok(GroupFilterBank { groups: banks })
}

/// Copies a trained plain model into a gated one. Tensors present under the same
/// name are copied; a destination `X.g{j}` receives group `j` of the dense
/// filter `X` via [`plug_in`]. Gate tensors with no source keep their values.
/// Returns the number of destination tensors filled.
pub fn plug_in_store(src: &ParamStore, dst: &mut ParamStore) -> Result<usize> {
    let names: Vec<String> = dst.iter().map(|(_, p)| p.name.clone()).collect();
    let mut filled = 0;
    for name in names {
        let id = dst.id(&name).expect("listed name");
        if let Some(p) = src.by_name(&name) {
            if p.dims != dst.param(id).dims {
                return Err(MsgcError::CheckpointMismatch(format!(
                    "`{name}` has dims {:?} in the source, {:?} in the target",
                    p.dims,
                    dst.param(id).dims
                )));
            }
            dst.get_mut(id).copy_from_slice(&p.data);
            filled += 1;
            continue;
        }
        let split = name.rsplit_once(".g").and_then(|(base, j)| Some((base, j.parse::<usize>().ok()?)));
        if let Some((base, j)) = split {
            if let Some(full) = src.by_name(base) {
                let groups = (0..).take_while(|g| dst.id(&format!("{base}.g{g}")).is_some()).count();
                if full.dims.len() != 4 || j >= groups {
                    return Err(MsgcError::CheckpointMismatch(format!("cannot split `{base}` into `{name}`")));
                }
                let dense = ConvWeight { k: full.dims[2], c_in: full.dims[1], c_out: full.dims[0], data: full.data.clone() };
                let bank = plug_in(&dense, groups)?;
                let slice = &bank.groups[j].data;
                if slice.len() != dst.get(id).len() {
                    return Err(MsgcError::CheckpointMismatch(format!("group slice size mismatch for `{name}`")));
                }
                dst.get_mut(id).copy_from_slice(slice);
                filled += 1;
                continue;
            }
        }
        if dst.param(id).kind == ParamKind::Backbone {
            return Err(MsgcError::CheckpointMismatch(format!("no source for backbone tensor `{name}`")));
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed_weight(k: usize, ci: usize, co: usize) -> ConvWeight {
        let mut w = ConvWeight::zeros(k, ci, co);
        for o in 0..co {
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        w.set(ky, kx, c, o, (o * 1000 + c * 100 + ky * 10 + kx) as f64);
                    }
                }
            }
        }
        w
    }

    #[test]
    fn single_group_is_identity() {
        let w = indexed_weight(3, 4, 6);
        let bank = plug_in(&w, 1).unwrap();
        assert_eq!(bank.group_count(), 1);
        assert_eq!(bank.groups[0], w);
    }

    #[test]
    fn two_groups_split_output_channels_in_halves() {
        let w = indexed_weight(3, 4, 8);
        let bank = plug_in(&w, 2).unwrap();
        // Group 2 (index 1) holds output channels 5-8 (indices 4..8).
        for (g, range) in [(0usize, 0..4usize), (1, 4..8)] {
            for (local, o) in range.enumerate() {
                for c in 0..4 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            assert_eq!(bank.groups[g].get(ky, kx, c, local), w.get(ky, kx, c, o));
                        }
                    }
                }
            }
        }
        assert_eq!(bank.view().kernel(1, 0, 2), w.kernel(4, 2));
    }

    #[test]
    fn concat_restores_bit_exactly() {
        let w = ConvWeight::from_vec(3, 2, 8, (0..144).map(|i| (i as f64).sin() * 1e-3).collect()).unwrap();
        for g in [1, 2, 4, 8] {
            assert_eq!(plug_in(&w, g).unwrap().concat(), w);
        }
    }

    #[test]
    fn rejects_non_divisor() {
        assert!(matches!(plug_in(&indexed_weight(1, 2, 6), 4), Err(MsgcError::Config(_))));
    }
}
