//! Grouped convolution whose input-channel assignment is a per-sample mask.
//!
//! For sample `n` and group `g`, the output channels of `g` are the correlation of
//! the channels `c` with `mask[n, g, c] = 1`, each optionally rescaled by
//! `attention[n, g, c]`, with the matching `C_in` slices of `W_g`. Pairs whose
//! mask bit is zero are never executed.

use rayon::prelude::*;

use super::filters::GroupFilters;
use crate::error::{MsgcError, Result};
use crate::tensor::{corr_acc, corr_transpose_acc, corr_weight_grad, ConvGeom, PlaneGeom, Tensor2, Tensor4};

/// Forward result plus the multiply-accumulates each sample actually executed.
#[derive(Clone, Debug)]
pub struct GroupedConvOutput {
    pub y: Tensor4,
    pub executed_macs: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct GroupedConvGrads {
    pub x: Tensor4,
    pub weights: Vec<Vec<f64>>,
    /// Gradient w.r.t. the combined per-(group, channel) input scale.
    pub scale: Option<Tensor2>,
}

fn plane_geom(x: &Tensor4, filters: &GroupFilters, geom: ConvGeom) -> Result<PlaneGeom> {
    if x.channels() != filters.c_in {
        return Err(MsgcError::shape(format!(
            "grouped conv input has {} channels, filters expect {}",
            x.channels(),
            filters.c_in
        )));
    }
    if filters.groups() == 0 {
        return Err(MsgcError::shape("grouped conv with no groups"));
    }
    PlaneGeom::new(x.height(), x.width(), filters.k, geom)
        .ok_or_else(|| MsgcError::config("grouped conv kernel does not fit its input"))
}

fn check_gate(t: &Tensor2, n: usize, g: usize, c: usize, what: &str) -> Result<()> {
    if t.shape() != (n, g * c) {
        return Err(MsgcError::shape(format!(
            "{what} {:?}, expected ({n}, {g}x{c})",
            t.shape()
        )));
    }
    Ok(())
}

/// Executes the masked grouped convolution.
///
/// `mask` and `attention` are `N x (G * C_in)`, row-major over `(g, c)`; `None`
/// means all ones. `needed` (`N x C_out`) lets callers skip output channels no
/// later layer consumes; skipped planes are left at zero.
pub fn grouped_conv_forward(
    x: &Tensor4,
    filters: &GroupFilters,
    mask: Option<&Tensor2>,
    attention: Option<&Tensor2>,
    geom: ConvGeom,
    needed: Option<&[bool]>,
) -> Result<GroupedConvOutput> {
    let pg = plane_geom(x, filters, geom)?;
    let (n, c_in) = (x.batch(), x.channels());
    let groups = filters.groups();
    let c_out = filters.c_out();
    for (t, what) in [(mask, "mask"), (attention, "attention")] {
        if let Some(t) = t {
            check_gate(t, n, groups, c_in, what)?;
        }
    }
    if let Some(nd) = needed {
        if nd.len() != n * c_out {
            return Err(MsgcError::shape("needed-output flags do not match the output shape"));
        }
    }
    let in_plane = pg.h * pg.w;
    let out_plane = pg.ho * pg.wo;
    let per_pair = pg.macs_per_pair();
    let mut y = Tensor4::zeros(n, c_out, pg.ho, pg.wo);
    let executed_macs = y
        .data_mut()
        .par_chunks_mut(c_out * out_plane)
        .enumerate()
        .map(|(s, ys)| {
            let xs = x.sample(s);
            let mut executed = 0u64;
            for g in 0..groups {
                for local in 0..filters.per_group {
                    let o = g * filters.per_group + local;
                    if needed.is_some_and(|nd| !nd[s * c_out + o]) {
                        continue;
                    }
                    let oplane = &mut ys[o * out_plane..(o + 1) * out_plane];
                    for c in 0..c_in {
                        let idx = g * c_in + c;
                        if mask.is_some_and(|m| m.row(s)[idx] == 0.0) {
                            continue;
                        }
                        let scale = mask.map_or(1.0, |m| m.row(s)[idx])
                            * attention.map_or(1.0, |a| a.row(s)[idx]);
                        corr_acc(
                            &pg,
                            &xs[c * in_plane..(c + 1) * in_plane],
                            filters.kernel(g, local, c),
                            scale,
                            oplane,
                        );
                        executed += per_pair;
                    }
                }
            }
            executed
        })
        .collect();
    Ok(GroupedConvOutput { y, executed_macs })
}

/// Convenience form over a mask and optional attention, all outputs computed.
pub fn masked_grouped_conv(
    x: &Tensor4,
    filters: &GroupFilters,
    mask: &Tensor2,
    attention: Option<&Tensor2>,
    geom: ConvGeom,
) -> Result<Tensor4> {
    Ok(grouped_conv_forward(x, filters, Some(mask), attention, geom, None)?.y)
}

/// Backward of [`grouped_conv_forward`] with all outputs computed.
///
/// `scale` is the combined `mask * attention`; `None` means dense. When present,
/// the gradient w.r.t. every scale entry is produced, including entries that are
/// zero, since training gates need it to switch channels back on.
pub fn grouped_conv_backward(
    grad_out: &Tensor4,
    x: &Tensor4,
    filters: &GroupFilters,
    scale: Option<&Tensor2>,
    geom: ConvGeom,
) -> Result<GroupedConvGrads> {
    let pg = plane_geom(x, filters, geom)?;
    let (n, c_in) = (x.batch(), x.channels());
    let groups = filters.groups();
    let c_out = filters.c_out();
    if grad_out.shape() != (n, c_out, pg.ho, pg.wo) {
        return Err(MsgcError::shape(format!(
            "grouped conv grad {:?}, forward output {:?}",
            grad_out.shape(),
            (n, c_out, pg.ho, pg.wo)
        )));
    }
    if let Some(s) = scale {
        check_gate(s, n, groups, c_in, "scale")?;
    }
    let in_plane = pg.h * pg.w;
    let out_plane = pg.ho * pg.wo;
    let kk = filters.k * filters.k;
    let group_len = filters.per_group * c_in * kk;
    let mut dx = Tensor4::zeros(n, c_in, x.height(), x.width());
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = dx
        .data_mut()
        .par_chunks_mut(c_in * in_plane)
        .enumerate()
        .map(|(s, dxs)| {
            let xs = x.sample(s);
            let ds = grad_out.sample(s);
            let mut dw = vec![0.0; groups * group_len];
            let mut dscale = vec![0.0; if scale.is_some() { groups * c_in } else { 0 }];
            let mut dker = vec![0.0; kk];
            for g in 0..groups {
                for local in 0..filters.per_group {
                    let o = g * filters.per_group + local;
                    let dplane = &ds[o * out_plane..(o + 1) * out_plane];
                    for c in 0..c_in {
                        let sv = scale.map_or(1.0, |t| t.row(s)[g * c_in + c]);
                        let ker = filters.kernel(g, local, c);
                        dker.iter_mut().for_each(|v| *v = 0.0);
                        // d(effective kernel) where effective = scale * kernel.
                        corr_weight_grad(&pg, &xs[c * in_plane..(c + 1) * in_plane], dplane, &mut dker);
                        let base = g * group_len + (local * c_in + c) * kk;
                        for (slot, d) in dw[base..base + kk].iter_mut().zip(&dker) {
                            *slot += sv * d;
                        }
                        if scale.is_some() {
                            dscale[g * c_in + c] += ker.iter().zip(&dker).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if sv != 0.0 {
                            corr_transpose_acc(&pg, dplane, ker, sv, &mut dxs[c * in_plane..(c + 1) * in_plane]);
                        }
                    }
                }
            }
            (dw, dscale)
        })
        .collect();

    let mut weights = vec![vec![0.0; group_len]; groups];
    let mut dscale = scale.map(|_| Tensor2::zeros(n, groups * c_in));
    for (s, (dw, dsc)) in per_sample.iter().enumerate() {
        for g in 0..groups {
            for (a, b) in weights[g].iter_mut().zip(&dw[g * group_len..(g + 1) * group_len]) {
                *a += b;
            }
        }
        if let Some(t) = dscale.as_mut() {
            t.row_mut(s).copy_from_slice(dsc);
        }
    }
    Ok(GroupedConvGrads { x: dx, weights, scale: dscale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgc::filters::{plug_in, GroupFilterBank};
    use crate::tensor::{conv2d_forward, finite_diff_check, ConvWeight};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_weight(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize) -> ConvWeight {
        ConvWeight::from_vec(k, ci, co, (0..k * k * ci * co).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_x(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn masked_row_depends_only_on_selected_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_weight(&mut rng, 3, 4, 8);
        let bank = plug_in(&w, 2).unwrap();
        let mut mask = Tensor2::zeros(1, 8);
        mask.row_mut(0)[..4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        mask.row_mut(0)[4..].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = rand_x(&mut rng, 1, 4, 5, 5);
        let mut x2 = x.clone();
        x2.plane_mut(0, 1).iter_mut().for_each(|v| *v = 0.0);
        x2.plane_mut(0, 2).iter_mut().for_each(|v| *v = 0.0);
        let geom = ConvGeom::new(1, 1);
        let a = masked_grouped_conv(&x, &bank.view(), &mask, None, geom).unwrap();
        let b = masked_grouped_conv(&x2, &bank.view(), &mask, None, geom).unwrap();
        for o in 4..8 {
            assert_eq!(a.plane(0, o), b.plane(0, o));
        }
        assert_ne!(a.plane(0, 0), b.plane(0, 0));
    }

    #[test]
    fn zero_row_gives_zero_group_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = plug_in(&rand_weight(&mut rng, 3, 3, 4), 2).unwrap();
        let mut mask = Tensor2::from_fn(2, 6, |_, _| 1.0);
        mask.row_mut(1)[3..].iter_mut().for_each(|v| *v = 0.0);
        let x = rand_x(&mut rng, 2, 3, 4, 4);
        let out = grouped_conv_forward(&x, &bank.view(), Some(&mask), None, ConvGeom::new(1, 1), None).unwrap();
        for o in 2..4 {
            assert!(out.y.plane(1, o).iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.executed_macs[0], 2 * out.executed_macs[1]);
    }

    #[test]
    fn dense_single_group_equals_standard_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let ci = rng.gen_range(1..5);
            let co = rng.gen_range(1..5);
            let stride = rng.gen_range(1..3);
            let w = rand_weight(&mut rng, 3, ci, co);
            let x = rand_x(&mut rng, 2, ci, 6, 5);
            let geom = ConvGeom::new(stride, 1);
            let bank = GroupFilterBank { groups: vec![w.clone()] };
            let ones = Tensor2::from_fn(2, ci, |_, _| 1.0);
            let a = masked_grouped_conv(&x, &bank.view(), &ones, None, geom).unwrap();
            let b = conv2d_forward(&x, &w, None, geom).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    /// Standard grouped convolution: group g reads the contiguous input slice
    /// `[g * C_in / G, (g + 1) * C_in / G)`, written without the tap-range helpers.
    fn naive_grouped(x: &Tensor4, bank: &GroupFilterBank, groups: usize, geom: ConvGeom) -> Tensor4 {
        let (n, ci, h, w) = x.shape();
        let k = bank.groups[0].k;
        let per_out = bank.groups[0].c_out;
        let per_in = ci / groups;
        let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
        let wo = (w + 2 * geom.padding - k) / geom.stride + 1;
        Tensor4::from_fn(n, per_out * groups, ho, wo, |b, o, oy, ox| {
            let g = o / per_out;
            let mut acc = 0.0;
            for c in g * per_in..(g + 1) * per_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += bank.groups[g].get(ky, kx, c, o % per_out) * x.get(b, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn regular_partition_equals_standard_grouped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let groups = [1, 2, 4][rng.gen_range(0..3)];
            let ci = groups * rng.gen_range(1..3);
            let co = groups * rng.gen_range(1..3);
            let geom = ConvGeom::new(rng.gen_range(1..3), 1);
            let bank = plug_in(&rand_weight(&mut rng, 3, ci, co), groups).unwrap();
            let x = rand_x(&mut rng, 2, ci, 5, 6);
            let per_in = ci / groups;
            let mask = Tensor2::from_fn(2, groups * ci, |_, j| if (j % ci) / per_in == j / ci { 1.0 } else { 0.0 });
            let y = masked_grouped_conv(&x, &bank.view(), &mask, None, geom).unwrap();
            assert!(y.max_abs_diff(&naive_grouped(&x, &bank, groups, geom)) < 1e-12);
        }
    }

    #[test]
    fn attention_scales_only_selected_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = plug_in(&rand_weight(&mut rng, 1, 2, 2), 1).unwrap();
        let x = rand_x(&mut rng, 1, 2, 3, 3);
        let mask = Tensor2::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let att = Tensor2::from_vec(1, 2, vec![0.25, 0.9]).unwrap();
        let y = masked_grouped_conv(&x, &bank.view(), &mask, Some(&att), ConvGeom::new(1, 0)).unwrap();
        for o in 0..2 {
            let wv = bank.groups[0].get(0, 0, 0, o);
            for (a, b) in y.plane(0, o).iter().zip(x.plane(0, 0)) {
                assert!((a - 0.25 * wv * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let groups = [1, 2, 4][trial % 3];
            let ci = rng.gen_range(1..5);
            let co = groups * rng.gen_range(1..3);
            let k = [1, 3][trial % 2];
            let geom = ConvGeom::new(1 + trial % 2, k / 2);
            let bank = plug_in(&rand_weight(&mut rng, k, ci, co), groups).unwrap();
            let x = rand_x(&mut rng, 2, ci, 4, 5);
            // A soft scale, as seen with the relaxed gate; keep it away from zero.
            let scale = Tensor2::from_fn(2, groups * ci, |_, _| rng.gen_range(0.1..1.0));
            let y = grouped_conv_forward(&x, &bank.view(), Some(&scale), None, geom, None).unwrap().y;
            let probe = Tensor4::from_fn(y.batch(), y.channels(), y.height(), y.width(), |_, _, _, _| rng.gen_range(-1.0..1.0));
            let loss = |x: &Tensor4, bank: &GroupFilterBank, s: &Tensor2| -> f64 {
                let y = grouped_conv_forward(x, &bank.view(), Some(s), None, geom, None).unwrap().y;
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let g = grouped_conv_backward(&probe, &x, &bank.view(), Some(&scale), geom).unwrap();
            let ex = finite_diff_check(|v| loss(&Tensor4::from_vec(2, ci, 4, 5, v.to_vec()).unwrap(), &bank, &scale), x.data(), g.x.data()).unwrap();
            let es = finite_diff_check(|v| loss(&x, &bank, &Tensor2::from_vec(2, groups * ci, v.to_vec()).unwrap()), scale.data(), g.scale.as_ref().unwrap().data()).unwrap();
            assert!(ex.max_rel_error < 1e-6, "trial {trial}: x {ex:?}");
            assert!(es.max_rel_error < 1e-6, "trial {trial}: scale {es:?}");
            for gi in 0..groups {
                let ew = finite_diff_check(
                    |v| {
                        let mut b = bank.clone();
                        b.groups[gi].data.copy_from_slice(v);
                        loss(&x, &b, &scale)
                    },
                    &bank.groups[gi].data,
                    &g.weights[gi],
                )
                .unwrap();
                assert!(ew.max_rel_error < 1e-6, "trial {trial}: w{gi} {ew:?}");
            }
        }
    }

    #[test]
    fn hard_scale_still_yields_gradient_for_off_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = plug_in(&rand_weight(&mut rng, 3, 2, 2), 1).unwrap();
        let x = rand_x(&mut rng, 1, 2, 4, 4);
        let scale = Tensor2::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let go = Tensor4::filled(1, 2, 4, 4, 1.0);
        let g = grouped_conv_backward(&go, &x, &bank.view(), Some(&scale), ConvGeom::new(1, 1)).unwrap();
        assert!(g.scale.unwrap().row(0)[1] != 0.0);
        assert!(g.x.plane(0, 1).iter().all(|&v| v == 0.0));
        assert!(g.weights[0].iter().any(|&v| v != 0.0));
    }
}
