//! Turning saliency scores into binary gates.
//!
//! Inference thresholds at zero. Training perturbs the score with a logistic
//! variate `L = log(v / (1 - v))`, `v ~ U(0, 1)`, squashes it as
//! `P = sigmoid((S + L) / tau)` and emits `Sign(P - 0.5)` forward while the
//! backward pass differentiates `P`.

use rand::Rng;

use crate::error::{MsgcError, Result};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::Tensor2;

/// `Sign(x) = 1` for `x >= 0`, else `0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn binarize_eval(saliency: &Tensor2) -> Tensor2 {
    let (r, c) = saliency.shape();
    Tensor2::from_vec(r, c, saliency.data().iter().map(|&s| sign(s)).collect())
        .expect("shape preserved")
}

/// One standard logistic variate; `v` landing exactly on 0 is redrawn.
pub fn sample_logistic<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.gen();
        if v > 0.0 && v < 1.0 {
            return (v / (1.0 - v)).ln();
        }
    }
}

pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| sample_logistic(rng))
}

/// What the forward pass emits for a training-time gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Hard `Sign(P - 0.5)` forward, gradient through `P`.
    StraightThrough,
    /// `P` itself forward; makes the loss smooth so it can be finite-differenced.
    Soft,
}

/// Gate values and the probabilities the backward pass differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGate {
    pub value: Tensor2,
    pub prob: Tensor2,
}

pub fn binarize_with_noise(
    saliency: &Tensor2,
    noise: &Tensor2,
    temperature: f64,
    relax: Relaxation,
) -> Result<SampledGate> {
    if saliency.shape() != noise.shape() {
        return Err(MsgcError::shape(format!(
            "noise {:?} does not match saliency {:?}",
            noise.shape(),
            saliency.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(MsgcError::config("gumbel temperature must be positive"));
    }
    let (r, c) = saliency.shape();
    let prob: Vec<f64> = saliency
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&s, &l)| sigmoid_scalar((s + l) / temperature))
        .collect();
    let value = match relax {
        Relaxation::StraightThrough => prob.iter().map(|&p| sign(p - 0.5)).collect(),
        Relaxation::Soft => prob.clone(),
    };
    Ok(SampledGate {
        value: Tensor2::from_vec(r, c, value)?,
        prob: Tensor2::from_vec(r, c, prob)?,
    })
}

pub fn binarize_train<R: Rng + ?Sized>(
    saliency: &Tensor2,
    rng: &mut R,
    temperature: f64,
) -> Result<SampledGate> {
    let noise = logistic_noise(rng, saliency.rows(), saliency.cols());
    binarize_with_noise(saliency, &noise, temperature, Relaxation::StraightThrough)
}

/// Chains a gradient on the gate value back to the saliency through `P`.
pub fn gate_backward(grad_value: &[f64], prob: &[f64], temperature: f64) -> Vec<f64> {
    grad_value
        .iter()
        .zip(prob)
        .map(|(&g, &p)| g * p * (1.0 - p) / temperature)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgc::DEFAULT_GUMBEL_TEMPERATURE;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_sign_convention() {
        let s = Tensor2::from_vec(1, 5, vec![0.0, -3.0, 2.5, -1e-300, 1e-300]).unwrap();
        assert_eq!(binarize_eval(&s).data(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn hard_frequency_follows_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for s in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let sal = Tensor2::from_vec(1, 100_000, vec![s; 100_000]).unwrap();
            let gate = binarize_train(&sal, &mut rng, DEFAULT_GUMBEL_TEMPERATURE).unwrap();
            let freq = gate.value.data().iter().sum::<f64>() / 100_000.0;
            // hard = 1 iff S + L >= 0, and P(L >= -S) = sigmoid(S) for logistic L.
            let expect = 1.0 / (1.0 + (-s as f64).exp());
            assert!((freq - expect).abs() < 0.01, "S={s}: {freq} vs {expect}");
        }
    }

    #[test]
    fn temperature_does_not_change_hard_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sal = Tensor2::from_fn(4, 50, |_, _| rng.gen_range(-3.0..3.0));
        let noise = logistic_noise(&mut rng, 4, 50);
        let a = binarize_with_noise(&sal, &noise, 0.1, Relaxation::StraightThrough).unwrap();
        let b = binarize_with_noise(&sal, &noise, 5.0, Relaxation::StraightThrough).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.value.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn soft_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sal = Tensor2::from_fn(2, 6, |_, _| rng.gen_range(-2.0..2.0));
        let noise = logistic_noise(&mut rng, 2, 6);
        let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |v: &[f64]| {
            let s = Tensor2::from_vec(2, 6, v.to_vec()).unwrap();
            let g = binarize_with_noise(&s, &noise, 0.7, Relaxation::Soft).unwrap();
            g.value.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let gate = binarize_with_noise(&sal, &noise, 0.7, Relaxation::Soft).unwrap();
        let ds = gate_backward(&weights, gate.prob.data(), 0.7);
        assert!(finite_diff_check(f, sal.data(), &ds).unwrap().max_rel_error < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = Tensor2::zeros(2, 3);
        let n = Tensor2::zeros(3, 2);
        assert!(binarize_with_noise(&s, &n, 1.0, Relaxation::Soft).is_err());
    }
}
