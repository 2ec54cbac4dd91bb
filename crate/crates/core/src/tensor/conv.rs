//! Direct 2-D cross-correlation.
//!
//! Weights are stored out-channel major, `[c_out][c_in][ky][kx]`, so the filters
//! feeding any contiguous range of output channels form one contiguous slice.
//! That is what lets a group filter bank be a plain slice of the full filter.

use rayon::prelude::*;

use super::Tensor4;
use crate::error::{MsgcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize, k: usize) -> Option<usize> {
        if self.stride == 0 || input + 2 * self.padding < k {
            return None;
        }
        Some((input + 2 * self.padding - k) / self.stride + 1)
    }
}

/// Convolution filter with logical shape `(k, k, c_in, c_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub data: Vec<f64>,
}

impl ConvWeight {
    pub fn zeros(k: usize, c_in: usize, c_out: usize) -> Self {
        Self { k, c_in, c_out, data: vec![0.0; k * k * c_in * c_out] }
    }

    pub fn from_vec(k: usize, c_in: usize, c_out: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k * c_in * c_out {
            return Err(MsgcError::shape(format!(
                "conv weight k={k} c_in={c_in} c_out={c_out} needs {} values, got {}",
                k * k * c_in * c_out,
                data.len()
            )));
        }
        Ok(Self { k, c_in, c_out, data })
    }

    pub fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let kk = self.k * self.k;
        let start = (o * self.c_in + c) * kk;
        &self.data[start..start + kk]
    }

    pub fn get(&self, ky: usize, kx: usize, c: usize, o: usize) -> f64 {
        self.kernel(o, c)[ky * self.k + kx]
    }

    pub fn set(&mut self, ky: usize, kx: usize, c: usize, o: usize, v: f64) {
        let kk = self.k * self.k;
        let idx = (o * self.c_in + c) * kk + ky * self.k + kx;
        self.data[idx] = v;
    }
}

/// Plane-level geometry shared by the inner kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PlaneGeom {
    pub fn new(h: usize, w: usize, k: usize, geom: ConvGeom) -> Option<Self> {
        let ho = geom.out_len(h, k)?;
        let wo = geom.out_len(w, k)?;
        Some(Self { h, w, ho, wo, k, stride: geom.stride, pad: geom.padding })
    }

    /// Output indices `o` in `[lo, hi)` whose tap `o*stride + t - pad` lands inside `[0, len)`.
    #[inline]
    fn valid_range(&self, t: usize, len: usize, out_len: usize) -> (usize, usize) {
        let d = t as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if d < 0 { ((-d) + s - 1) / s } else { 0 };
        let top = len as isize - 1 - d;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Multiply-accumulates each kernel tap performs over the whole output plane,
    /// padded positions included.
    pub fn macs_per_pair(&self) -> u64 {
        (self.k * self.k * self.ho * self.wo) as u64
    }
}

/// `out += scale * corr(inp, ker)` for one input plane and one output plane.
pub(crate) fn corr_acc(g: &PlaneGeom, inp: &[f64], ker: &[f64], scale: f64, out: &mut [f64]) {
    for ky in 0..g.k {
        let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
        for kx in 0..g.k {
            let wv = ker[ky * g.k + kx] * scale;
            let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
                let irow = &inp[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    let off = ox_lo + kx - g.pad;
                    let n = ox_hi - ox_lo;
                    for (o, i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[off..off + n]) {
                        *o += wv * i;
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// `dinp += scale * corr^T(dout, ker)`.
pub(crate) fn corr_transpose_acc(
    g: &PlaneGeom,
    dout: &[f64],
    ker: &[f64],
    scale: f64,
    dinp: &mut [f64],
) {
    for ky in 0..g.k {
        let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
        for kx in 0..g.k {
            let wv = ker[ky * g.k + kx] * scale;
            let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                let drow = &dout[oy * g.wo..(oy + 1) * g.wo];
                let irow = &mut dinp[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    let off = ox_lo + kx - g.pad;
                    let n = ox_hi - ox_lo;
                    for (i, d) in irow[off..off + n].iter_mut().zip(&drow[ox_lo..ox_hi]) {
                        *i += wv * d;
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        irow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                    }
                }
            }
        }
    }
}

/// `dker[ky,kx] += sum_{oy,ox} dout[oy,ox] * inp[oy*s+ky-p, ox*s+kx-p]`.
pub(crate) fn corr_weight_grad(g: &PlaneGeom, inp: &[f64], dout: &[f64], dker: &mut [f64]) {
    for ky in 0..g.k {
        let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
        for kx in 0..g.k {
            let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
            if ox_lo >= ox_hi {
                continue;
            }
            let mut acc = 0.0;
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                let drow = &dout[oy * g.wo..(oy + 1) * g.wo];
                let irow = &inp[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    let off = ox_lo + kx - g.pad;
                    let n = ox_hi - ox_lo;
                    for (d, i) in drow[ox_lo..ox_hi].iter().zip(&irow[off..off + n]) {
                        acc += d * i;
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        acc += drow[ox] * irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
            dker[ky * g.k + kx] += acc;
        }
    }
}

pub(crate) fn check_conv_shapes(x: &Tensor4, w: &ConvWeight, geom: ConvGeom) -> Result<PlaneGeom> {
    if x.channels() != w.c_in {
        return Err(MsgcError::shape(format!(
            "conv input has {} channels, filter expects {}",
            x.channels(),
            w.c_in
        )));
    }
    if w.k % 2 == 0 {
        return Err(MsgcError::config(format!("kernel size {} must be odd", w.k)));
    }
    PlaneGeom::new(x.height(), x.width(), w.k, geom).ok_or_else(|| {
        MsgcError::config(format!(
            "kernel {} with stride {} padding {} does not fit a {}x{} input",
            w.k,
            geom.stride,
            geom.padding,
            x.height(),
            x.width()
        ))
    })
}

pub fn conv2d_forward(
    x: &Tensor4,
    w: &ConvWeight,
    bias: Option<&[f64]>,
    geom: ConvGeom,
) -> Result<Tensor4> {
    let g = check_conv_shapes(x, w, geom)?;
    if let Some(b) = bias {
        if b.len() != w.c_out {
            return Err(MsgcError::shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                w.c_out
            )));
        }
    }
    let mut out = Tensor4::zeros(x.batch(), w.c_out, g.ho, g.wo);
    let out_plane = g.ho * g.wo;
    let in_plane = g.h * g.w;
    out.data_mut()
        .par_chunks_mut(w.c_out * out_plane)
        .enumerate()
        .for_each(|(n, osample)| {
            let xs = x.sample(n);
            for o in 0..w.c_out {
                let oplane = &mut osample[o * out_plane..(o + 1) * out_plane];
                if let Some(b) = bias {
                    oplane.iter_mut().for_each(|v| *v = b[o]);
                }
                for c in 0..w.c_in {
                    corr_acc(&g, &xs[c * in_plane..(c + 1) * in_plane], w.kernel(o, c), 1.0, oplane);
                }
            }
        });
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Tensor4,
    pub w: ConvWeight,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    grad_out: &Tensor4,
    x: &Tensor4,
    w: &ConvWeight,
    geom: ConvGeom,
    with_bias: bool,
) -> Result<ConvGrads> {
    let g = check_conv_shapes(x, w, geom)?;
    if grad_out.shape() != (x.batch(), w.c_out, g.ho, g.wo) {
        return Err(MsgcError::shape(format!(
            "conv grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            (x.batch(), w.c_out, g.ho, g.wo)
        )));
    }
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut dx = Tensor4::zeros(x.batch(), x.channels(), x.height(), x.width());
    // Per-sample filter gradients, summed afterwards in sample order so the result
    // does not depend on thread scheduling.
    let per_sample: Vec<Vec<f64>> = dx
        .data_mut()
        .par_chunks_mut(w.c_in * in_plane)
        .enumerate()
        .map(|(n, dxs)| {
            let xs = x.sample(n);
            let ds = grad_out.sample(n);
            let mut dw = vec![0.0; w.data.len()];
            let kk = w.k * w.k;
            for o in 0..w.c_out {
                let dplane = &ds[o * out_plane..(o + 1) * out_plane];
                for c in 0..w.c_in {
                    let idx = (o * w.c_in + c) * kk;
                    corr_weight_grad(&g, &xs[c * in_plane..(c + 1) * in_plane], dplane, &mut dw[idx..idx + kk]);
                    corr_transpose_acc(&g, dplane, w.kernel(o, c), 1.0, &mut dxs[c * in_plane..(c + 1) * in_plane]);
                }
            }
            dw
        })
        .collect();
    let mut dw = ConvWeight::zeros(w.k, w.c_in, w.c_out);
    for part in &per_sample {
        for (a, b) in dw.data.iter_mut().zip(part) {
            *a += b;
        }
    }
    let bias = with_bias.then(|| {
        let mut db = vec![0.0; w.c_out];
        for n in 0..grad_out.batch() {
            for (o, slot) in db.iter_mut().enumerate() {
                *slot += grad_out.plane(n, o).iter().sum::<f64>();
            }
        }
        db
    });
    Ok(ConvGrads { x: dx, w: dw, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight six-loop reference, independent of the tap-range arithmetic above.
    fn naive_conv(x: &Tensor4, w: &ConvWeight, bias: Option<&[f64]>, geom: ConvGeom) -> Tensor4 {
        let (n, _, h, wd) = x.shape();
        let ho = (h + 2 * geom.padding - w.k) / geom.stride + 1;
        let wo = (wd + 2 * geom.padding - w.k) / geom.stride + 1;
        let mut out = Tensor4::zeros(n, w.c_out, ho, wo);
        for b in 0..n {
            for o in 0..w.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for c in 0..w.c_in {
                            for ky in 0..w.k {
                                for kx in 0..w.k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.get(ky, kx, c, o) * x.get(b, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = out.index(b, o, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_weight(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize) -> ConvWeight {
        let data = (0..k * k * ci * co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvWeight::from_vec(k, ci, co, data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor4::filled(1, 1, 3, 3, 1.0);
        let mut w = ConvWeight::zeros(3, 1, 1);
        w.set(1, 1, 0, 0, 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeom::new(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::zeros(2, 3, 5, 5);
        let w = random_weight(&mut rng, 3, 3, 4);
        let y = conv2d_forward(&x, &w, Some(&[0.0; 4]), ConvGeom::new(1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 2, 4, 5, 5);
        let w = random_weight(&mut rng, 3, 4, 6);
        let y = conv2d_forward(&x, &w, None, ConvGeom::new(1, 1)).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, None, ConvGeom::new(1, 1))) < 1e-12);

        for trial in 0..40 {
            let k = [1, 3, 5][trial % 3];
            let stride = 1 + trial % 2;
            let pad = trial % (k / 2 + 2);
            let h = rng.gen_range(k.max(2)..8);
            let wd = rng.gen_range(k.max(2)..8);
            let ci = rng.gen_range(1..5);
            let co = rng.gen_range(1..5);
            let x = random_tensor(&mut rng, 2, ci, h, wd);
            let w = random_weight(&mut rng, k, ci, co);
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let geom = ConvGeom::new(stride, pad);
            let y = conv2d_forward(&x, &w, Some(&bias), geom).unwrap();
            let r = naive_conv(&x, &w, Some(&bias), geom);
            assert!(y.max_abs_diff(&r) < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernel() {
        let x = Tensor4::zeros(1, 2, 4, 4);
        let w = ConvWeight::zeros(3, 3, 1);
        assert!(matches!(conv2d_forward(&x, &w, None, ConvGeom::new(1, 1)), Err(MsgcError::Shape(_))));
        let w = ConvWeight::zeros(2, 2, 1);
        assert!(matches!(conv2d_forward(&x, &w, None, ConvGeom::new(1, 0)), Err(MsgcError::Config(_))));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let w = random_weight(&mut rng, 3, 3, 2);
        let go = Tensor4::zeros(2, 2, 4, 4);
        let g = conv2d_backward(&go, &x, &w, ConvGeom::new(1, 1), true).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.w.data.iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_reduces_to_matrix_product() {
        // y[n,o] = sum_c w[o,c] x[n,c]; dx = go * W, dW = go^T * x.
        let x = Tensor4::from_vec(2, 3, 1, 1, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = ConvWeight::from_vec(1, 3, 2, vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let go = Tensor4::from_vec(2, 2, 1, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let g = conv2d_backward(&go, &x, &w, ConvGeom::new(1, 0), false).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let expect: f64 = (0..2).map(|o| go.get(n, o, 0, 0) * w.get(0, 0, c, o)).sum();
                assert!((g.x.get(n, c, 0, 0) - expect).abs() < 1e-15);
            }
        }
        for o in 0..2 {
            for c in 0..3 {
                let expect: f64 = (0..2).map(|n| go.get(n, o, 0, 0) * x.get(n, c, 0, 0)).sum();
                assert!((g.w.get(0, 0, c, o) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let k = [1, 3][trial % 2];
            let stride = 1 + (trial / 2) % 2;
            let pad = k / 2;
            let h = rng.gen_range(3..6);
            let wd = rng.gen_range(3..6);
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let geom = ConvGeom::new(stride, pad);
            let x = random_tensor(&mut rng, 2, ci, h, wd);
            let w = random_weight(&mut rng, k, ci, co);
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv2d_forward(&x, &w, Some(&bias), geom).unwrap();
            let probe = random_tensor(&mut rng, y.batch(), co, y.height(), y.width());
            let loss = |x: &Tensor4, w: &ConvWeight, b: &[f64]| -> f64 {
                let y = conv2d_forward(x, w, Some(b), geom).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
            };
            let g = conv2d_backward(&probe, &x, &w, geom, true).unwrap();

            let err_x = finite_diff_check(
                |v| loss(&Tensor4::from_vec(x.batch(), ci, h, wd, v.to_vec()).unwrap(), &w, &bias),
                x.data(),
                g.x.data(),
            )
            .unwrap();
            let err_w = finite_diff_check(
                |v| loss(&x, &ConvWeight::from_vec(k, ci, co, v.to_vec()).unwrap(), &bias),
                &w.data,
                &g.w.data,
            )
            .unwrap();
            let err_b = finite_diff_check(|v| loss(&x, &w, v), &bias, g.bias.as_ref().unwrap()).unwrap();
            for (name, e) in [("x", err_x), ("w", err_w), ("b", err_b)] {
                assert!(e.max_rel_error < 1e-6, "trial {trial} grad {name}: {}", e.max_rel_error);
            }
        }
    }
}
