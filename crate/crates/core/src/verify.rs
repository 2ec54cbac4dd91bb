//! Finite-difference verification of every hand-written backward pass and of
//! the end-to-end training loss on a miniature gated network.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MsgcError, Result};
use crate::layers::Mode;
use crate::msgc::binarize::{binarize_with_noise, gate_backward, logistic_noise};
use crate::msgc::{
    grouped_conv_backward, grouped_conv_forward, BasicBlock, BlockMacModel, GateSpec, GroupFilters, MaskMlp,
    MsgcBlockConfig, Relaxation,
};
use crate::network::{BlockSpec, NetMaskRule, Network, TinyNetConfig};
use crate::optim::budget_loss;
use crate::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{
    batch_norm_backward, batch_norm_train, conv2d_backward, conv2d_forward, finite_diff_check,
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_cross_entropy, ConvGeom, ConvWeight, FdReport, Tensor2, Tensor4,
};
use crate::train::{loss_and_grad, loss_value};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: FdReport,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub seeds: usize,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !(c.report.max_rel_error < tol)).collect()
    }

    fn record(&mut self, name: &str, report: FdReport) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => c.report = c.report.merge(report),
            None => self.checks.push(CheckResult { name: name.to_string(), report }),
        }
    }

    /// Ok when every check is below `tol`, otherwise an error listing the offenders.
    pub fn verdict(&self, tol: f64) -> Result<()> {
        let bad = self.failures(tol);
        if bad.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = bad.iter().map(|c| format!("{} ({:.3e})", c.name, c.report.max_rel_error)).collect();
        Err(MsgcError::GradCheckFailed(list.join(", ")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand4(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, uniform(rng, n * c * h * w)).expect("sized")
}

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
    Tensor2::from_vec(r, c, uniform(rng, r * c)).expect("sized")
}

/// Concatenated parameter vector and analytic gradient over `ids`.
fn flatten(store: &ParamStore, grads: &Grads, ids: &[ParamId]) -> (Vec<f64>, Vec<f64>) {
    (
        ids.iter().flat_map(|&id| store.get(id).to_vec()).collect(),
        ids.iter().flat_map(|&id| grads.get(id).to_vec()).collect(),
    )
}

fn scatter(store: &mut ParamStore, ids: &[ParamId], theta: &[f64]) {
    let mut off = 0;
    for &id in ids {
        let len = store.get(id).len();
        store.get_mut(id).copy_from_slice(&theta[off..off + len]);
        off += len;
    }
}

fn trainable(store: &ParamStore) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer).map(|(id, _)| id).collect()
}

fn check_conv(rng: &mut ChaCha8Rng, report: &mut GradcheckReport) -> Result<()> {
    let k = [1, 3][rng.gen_range(0..2)];
    let (n, ci, co) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
    let (h, w) = (rng.gen_range(k..7), rng.gen_range(k..7));
    let geom = ConvGeom::new(rng.gen_range(1..3), rng.gen_range(0..2).min(k / 2));
    let x = rand4(rng, n, ci, h, w);
    let wt = ConvWeight::from_vec(k, ci, co, uniform(rng, k * k * ci * co))?;
    let bias = uniform(rng, co);
    let y = conv2d_forward(&x, &wt, Some(&bias), geom)?;
    let (_, _, ho, wo) = y.shape();
    let probe = rand4(rng, n, co, ho, wo);
    let g = conv2d_backward(&probe, &x, &wt, geom, true)?;
    let f = |x: &Tensor4, w: &ConvWeight, b: &[f64]| dot(conv2d_forward(x, w, Some(b), geom).expect("shapes").data(), probe.data());
    report.record("conv2d.x", finite_diff_check(|t| f(&Tensor4::from_vec(n, ci, h, w, t.to_vec()).unwrap(), &wt, &bias), x.data(), g.x.data())?);
    report.record(
        "conv2d.weight",
        finite_diff_check(|t| f(&x, &ConvWeight::from_vec(k, ci, co, t.to_vec()).unwrap(), &bias), &wt.data, &g.w.data)?,
    );
    report.record("conv2d.bias", finite_diff_check(|t| f(&x, &wt, t), &bias, g.bias.as_deref().unwrap_or(&[]))?);
    Ok(())
}

fn check_grouped(rng: &mut ChaCha8Rng, report: &mut GradcheckReport) -> Result<()> {
    let groups = rng.gen_range(1..4);
    let per = rng.gen_range(1..3);
    let (n, ci) = (rng.gen_range(1..4), rng.gen_range(1..5));
    let k = [1, 3][rng.gen_range(0..2)];
    let (h, w) = (rng.gen_range(k..7), rng.gen_range(k..7));
    let geom = ConvGeom::new(rng.gen_range(1..3), k / 2);
    let x = rand4(rng, n, ci, h, w);
    let weights: Vec<Vec<f64>> = (0..groups).map(|_| uniform(rng, per * ci * k * k)).collect();
    // Mix exact zeros (dropped pairs) with soft scale values.
    let scale = Tensor2::from_fn(n, groups * ci, |_, _| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.1..1.0) });
    let run = |x: &Tensor4, ws: &[Vec<f64>], s: &Tensor2| -> Tensor4 {
        let f = GroupFilters { k, c_in: ci, per_group: per, weights: ws.iter().map(Vec::as_slice).collect() };
        grouped_conv_forward(x, &f, None, Some(s), geom, None).expect("shapes").y
    };
    let y = run(&x, &weights, &scale);
    let probe = rand4(rng, n, groups * per, y.height(), y.width());
    let f = GroupFilters { k, c_in: ci, per_group: per, weights: weights.iter().map(Vec::as_slice).collect() };
    let g = grouped_conv_backward(&probe, &x, &f, Some(&scale), geom)?;
    let (_, _, hh, ww) = x.shape();
    report.record(
        "grouped_conv.x",
        finite_diff_check(|t| dot(run(&Tensor4::from_vec(n, ci, hh, ww, t.to_vec()).unwrap(), &weights, &scale).data(), probe.data()), x.data(), g.x.data())?,
    );
    let flat: Vec<f64> = weights.concat();
    let dflat: Vec<f64> = g.weights.concat();
    let chunk = per * ci * k * k;
    report.record(
        "grouped_conv.weights",
        finite_diff_check(
            |t| {
                let ws: Vec<Vec<f64>> = t.chunks(chunk).map(<[f64]>::to_vec).collect();
                dot(run(&x, &ws, &scale).data(), probe.data())
            },
            &flat,
            &dflat,
        )?,
    );
    let ds = g.scale.ok_or_else(|| MsgcError::GradCheckFailed("grouped conv produced no scale gradient".into()))?;
    report.record(
        "grouped_conv.scale",
        finite_diff_check(
            |t| dot(run(&x, &weights, &Tensor2::from_vec(n, groups * ci, t.to_vec()).unwrap()).data(), probe.data()),
            scale.data(),
            ds.data(),
        )?,
    );
    Ok(())
}

fn check_pointwise(rng: &mut ChaCha8Rng, report: &mut GradcheckReport) -> Result<()> {
    let (n, c, h, w) = (rng.gen_range(2..5), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let x = rand4(rng, n, c, h, w);
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = uniform(rng, c);
    let probe = rand4(rng, n, c, h, w);
    let (_, cache) = batch_norm_train(&x, &gamma, &beta)?;
    let (dx, dg, db) = batch_norm_backward(&probe, &cache, &gamma)?;
    let f = |x: &Tensor4, g: &[f64], b: &[f64]| dot(batch_norm_train(x, g, b).expect("shapes").0.data(), probe.data());
    report.record("batch_norm4.x", finite_diff_check(|t| f(&Tensor4::from_vec(n, c, h, w, t.to_vec()).unwrap(), &gamma, &beta), x.data(), dx.data())?);
    report.record("batch_norm4.gamma", finite_diff_check(|t| f(&x, t, &beta), &gamma, &dg)?);
    report.record("batch_norm4.beta", finite_diff_check(|t| f(&x, &gamma, t), &beta, &db)?);

    let x2 = rand2(rng, n, c);
    let p2 = rand2(rng, n, c);
    let (_, c2) = batch_norm_train(&x2, &gamma, &beta)?;
    let (dx2, _, _) = batch_norm_backward(&p2, &c2, &gamma)?;
    report.record(
        "batch_norm2.x",
        finite_diff_check(|t| dot(batch_norm_train(&Tensor2::from_vec(n, c, t.to_vec()).unwrap(), &gamma, &beta).unwrap().0.data(), p2.data()), x2.data(), dx2.data())?,
    );

    // Keep ReLU inputs away from the kink so the central difference is exact.
    let xr: Vec<f64> = uniform(rng, 20).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    let pr = uniform(rng, 20);
    report.record("relu", finite_diff_check(|t| dot(&relu(t), &pr), &xr, &relu_backward(&xr, &pr))?);
    let ys = sigmoid(&xr);
    report.record("sigmoid", finite_diff_check(|t| dot(&sigmoid(t), &pr), &xr, &sigmoid_backward(&ys, &pr))?);

    let pooled_probe = rand2(rng, n, c);
    let dgap = global_avg_pool_backward(&pooled_probe, h, w);
    report.record(
        "global_avg_pool",
        finite_diff_check(|t| dot(global_avg_pool(&Tensor4::from_vec(n, c, h, w, t.to_vec()).unwrap()).unwrap().data(), pooled_probe.data()), x.data(), dgap.data())?,
    );
    Ok(())
}

fn check_linear_and_loss(rng: &mut ChaCha8Rng, report: &mut GradcheckReport) -> Result<()> {
    let (n, i, o) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(2..6));
    let x = rand2(rng, n, i);
    let w = rand2(rng, i, o);
    let b = uniform(rng, o);
    let probe = rand2(rng, n, o);
    let g = linear_backward(&probe, &x, &w)?;
    let f = |x: &Tensor2, w: &Tensor2, b: &[f64]| dot(linear(x, w, Some(b)).unwrap().data(), probe.data());
    report.record("linear.x", finite_diff_check(|t| f(&Tensor2::from_vec(n, i, t.to_vec()).unwrap(), &w, &b), x.data(), g.x.data())?);
    report.record("linear.weight", finite_diff_check(|t| f(&x, &Tensor2::from_vec(i, o, t.to_vec()).unwrap(), &b), w.data(), g.w.data())?);
    report.record("linear.bias", finite_diff_check(|t| f(&x, &w, t), &b, &g.bias)?);
    // A layer whose only live parameter is its bias.
    let zero_w = Tensor2::zeros(i, o);
    let gz = linear_backward(&probe, &Tensor2::zeros(n, i), &zero_w)?;
    report.record("linear.bias_only", finite_diff_check(|t| dot(linear(&Tensor2::zeros(n, i), &zero_w, Some(t)).unwrap().data(), probe.data()), &b, &gz.bias)?);

    let logits = rand2(rng, n, o);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..o)).collect();
    let (_, dl) = softmax_cross_entropy(&logits, &labels)?;
    report.record(
        "softmax_cross_entropy",
        finite_diff_check(|t| softmax_cross_entropy(&Tensor2::from_vec(n, o, t.to_vec()).unwrap(), &labels).unwrap().0, logits.data(), dl.data())?,
    );
    Ok(())
}

fn check_gating(rng: &mut ChaCha8Rng, report: &mut GradcheckReport) -> Result<()> {
    let (n, m) = (rng.gen_range(1..4), rng.gen_range(1..8));
    let s = Tensor2::from_vec(n, m, uniform(rng, n * m).into_iter().map(|v| 3.0 * v).collect())?;
    let noise = logistic_noise(rng, n, m);
    let tau = rng.gen_range(0.3..1.5);
    let probe = uniform(rng, n * m);
    let gate = binarize_with_noise(&s, &noise, tau, Relaxation::Soft)?;
    let ds = gate_backward(&probe, gate.prob.data(), tau);
    report.record(
        "binarize.soft",
        finite_diff_check(
            |t| dot(binarize_with_noise(&Tensor2::from_vec(n, m, t.to_vec()).unwrap(), &noise, tau, Relaxation::Soft).unwrap().value.data(), &probe),
            s.data(),
            &ds,
        )?,
    );

    let groups = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = MsgcBlockConfig {
        channels: vec![4, 8, 8],
        groups: vec![groups, [1, 2, 4][rng.gen_range(0..3)]],
        kernel_sizes: vec![3, 3],
        strides: vec![rng.gen_range(1..3), 1],
        paddings: vec![1, 1],
        reduction: 2,
        attention_layers: vec![],
        gumbel_temperature: 2.0 / 3.0,
    };
    let model = BlockMacModel::new(&cfg, (6, 6))?;
    let lens = [cfg.mask_len(0), cfg.mask_len(1)];
    let masks: Vec<f64> = (0..lens[0] + lens[1]).map(|_| rng.gen_range(0.05..0.95)).collect();
    let eval = |t: &[f64]| model.cost_and_grad(&[&t[..lens[0]], &t[lens[0]..]]).unwrap();
    let analytic = eval(&masks).1.concat();
    let scale = 1.0 / model.dense_macs() as f64;
    report.record(
        "mac_cost",
        finite_diff_check(|t| eval(t).0 * scale, &masks, &analytic.iter().map(|g| g * scale).collect::<Vec<_>>())?,
    );

    let m_ori = 1000.0;
    let macs = rng.gen_range(700.0..900.0);
    let tau = rng.gen_range(0.3..0.6);
    let (_, d) = budget_loss(macs, m_ori, 30.0, tau);
    report.record("budget_loss", finite_diff_check(|t| budget_loss(t[0], m_ori, 30.0, tau).0, &[macs], &[d])?);

    let mut store = ParamStore::new();
    let mlp = MaskMlp::add(&mut store, rng, "mlp", 5, 3, 6, 0.2)?;
    let nb = rng.gen_range(2..5);
    let pooled = rand2(rng, nb, 5);
    let probe = rand2(rng, nb, 6);
    let loss = |store: &ParamStore, x: &Tensor2| dot(mlp.forward(store, x, Mode::Train).unwrap().0.data(), probe.data());
    let (_, cache) = mlp.forward(&store, &pooled, Mode::Train)?;
    let mut grads = Grads::zeros_like(&store);
    let dx = mlp.backward(&store, &mut grads, &probe, &cache, &pooled)?;
    let ids = trainable(&store);
    let (theta, analytic) = flatten(&store, &grads, &ids);
    let mut scratch = store.clone();
    report.record(
        "mask_mlp.params",
        finite_diff_check(
            |t| {
                scatter(&mut scratch, &ids, t);
                loss(&scratch, &pooled)
            },
            &theta,
            &analytic,
        )?,
    );
    report.record("mask_mlp.x", finite_diff_check(|t| loss(&store, &Tensor2::from_vec(nb, 5, t.to_vec()).unwrap()), pooled.data(), dx.data())?);
    Ok(())
}

fn check_block(rng: &mut ChaCha8Rng, spec: &GateSpec, report: &mut GradcheckReport) -> Result<()> {
    let mut store = ParamStore::new();
    let stride = rng.gen_range(1..3);
    let block = BasicBlock::add(&mut store, rng, "blk", 4, 8, stride, (6, 6), Some(spec))?;
    let n = 3;
    let x = rand4(rng, n, 4, 6, 6);
    let g = block.gate.as_ref().expect("gated");
    let noise: Vec<Tensor2> = (0..2).map(|i| logistic_noise(rng, n, g.config.mask_len(i))).collect();
    let rule = crate::msgc::MaskRule::Sampled { noise: &noise, relax: Relaxation::Soft };
    let (ho, wo) = block.output_hw();
    let probe = rand4(rng, n, 8, ho, wo);
    let extra: Vec<Tensor2> = noise.iter().map(|t| rand2(rng, t.rows(), t.cols())).collect();
    let loss = |store: &ParamStore, x: &Tensor4| -> f64 {
        let out = block.forward(store, x, Mode::Train, rule).unwrap();
        let gate = out.cache.gate().unwrap();
        dot(out.y.data(), probe.data()) + gate.masks.iter().zip(&extra).map(|(m, e)| dot(m.data(), e.data())).sum::<f64>()
    };
    let out = block.forward(&store, &x, Mode::Train, rule)?;
    let mut grads = Grads::zeros_like(&store);
    let dx = block.backward(&store, &mut grads, &probe, &out.cache, Some(&extra))?;
    let ids = trainable(&store);
    let (theta, analytic) = flatten(&store, &grads, &ids);
    let mut scratch = store.clone();
    report.record(
        "block.params",
        finite_diff_check(
            |t| {
                scatter(&mut scratch, &ids, t);
                loss(&scratch, &x)
            },
            &theta,
            &analytic,
        )?,
    );
    report.record("block.x", finite_diff_check(|t| loss(&store, &Tensor4::from_vec(n, 4, 6, 6, t.to_vec()).unwrap()), x.data(), dx.data())?);
    Ok(())
}

/// The miniature used for the end-to-end check: two 8-channel blocks on 3x6x6 inputs.
pub fn miniature() -> TinyNetConfig {
    TinyNetConfig {
        input: (3, 6, 6),
        stem_width: 8,
        blocks: vec![BlockSpec { width: 8, stride: 1 }, BlockSpec { width: 8, stride: 2 }],
        classes: 4,
    }
}

fn check_end_to_end(rng: &mut ChaCha8Rng, spec: &GateSpec, lambda: f64, report: &mut GradcheckReport) -> Result<()> {
    let cfg = miniature();
    let mut store = ParamStore::new();
    let net = Network::build(&mut store, rng, &cfg, Some(spec))?;
    let n = 4;
    let x = rand4(rng, n, cfg.input.0, cfg.input.1, cfg.input.2);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.classes)).collect();
    let noise = net.sample_noise(rng, n);
    // Place the target below the current cost so the hinge is active.
    let probe = net.forward(&store, &x, Mode::Train, NetMaskRule::Sampled { noise: &noise, relax: Relaxation::Soft })?;
    let cost = net.cost(&probe.cache)?;
    let ratio = cost.per_sample.iter().sum::<f64>() / n as f64 / net.m_ori() as f64;
    let tau = (ratio - 0.2).max(0.05);
    let budget = Some((lambda, tau));
    let step = loss_and_grad(&net, &store, &x, &labels, &noise, Relaxation::Soft, budget)?;
    if step.budget_loss <= 0.0 && lambda > 0.0 {
        return Err(MsgcError::GradCheckFailed("end-to-end fixture failed to activate the budget hinge".into()));
    }
    let ids = trainable(&store);
    let (theta, analytic) = flatten(&store, &step.grads, &ids);
    let mut scratch = store.clone();
    report.record(
        "network.loss",
        finite_diff_check(
            |t| {
                scatter(&mut scratch, &ids, t);
                loss_value(&net, &scratch, &x, &labels, &noise, Relaxation::Soft, budget).unwrap()
            },
            &theta,
            &analytic,
        )?,
    );
    Ok(())
}

/// Runs every check for `seeds` consecutive seeds starting at `base_seed`,
/// using the gate settings and budget weight of the caller's configuration.
pub fn run_gradcheck(base_seed: u64, seeds: usize, spec: &GateSpec, lambda: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut report = GradcheckReport { checks: Vec::new(), seeds, elapsed: Duration::ZERO };
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
        check_conv(&mut rng, &mut report)?;
        check_grouped(&mut rng, &mut report)?;
        check_pointwise(&mut rng, &mut report)?;
        check_linear_and_loss(&mut rng, &mut report)?;
        check_gating(&mut rng, &mut report)?;
        check_block(&mut rng, spec, &mut report)?;
        check_end_to_end(&mut rng, spec, lambda, &mut report)?;
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

/// Gate settings adapted to the 8-channel miniature.
pub fn miniature_spec(spec: &GateSpec) -> GateSpec {
    let fit = |g: usize| if g > 0 && 8 % g == 0 && g <= 4 { g } else { 2 };
    GateSpec {
        groups: [fit(spec.groups[0]), fit(spec.groups[1])],
        attention_layers: spec.attention_layers.clone(),
        reduction: spec.reduction.min(4),
        gumbel_temperature: spec.gumbel_temperature,
        // Moderate bias keeps the soft gates away from saturation.
        saliency_bias_init: 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::default_gate_spec;

    #[test]
    fn all_checks_pass_for_a_few_seeds() {
        let spec = miniature_spec(&default_gate_spec());
        let report = run_gradcheck(7, 2, &spec, 30.0).unwrap();
        report.verdict(GRADCHECK_TOLERANCE).unwrap();
        assert!(report.checks.len() >= 20);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand2(&mut rng, 2, 3);
        let w = rand2(&mut rng, 3, 2);
        let probe = rand2(&mut rng, 2, 2);
        let mut g = linear_backward(&probe, &x, &w).unwrap();
        g.w.data_mut()[1] *= 1.01;
        let mut report = GradcheckReport { checks: Vec::new(), seeds: 1, elapsed: Duration::ZERO };
        report.record(
            "linear.weight.corrupted",
            finite_diff_check(|t| dot(linear(&x, &Tensor2::from_vec(3, 2, t.to_vec()).unwrap(), None).unwrap().data(), probe.data()), w.data(), g.w.data()).unwrap(),
        );
        let err = report.verdict(GRADCHECK_TOLERANCE).unwrap_err();
        assert_eq!(err.category(), "gradcheck-failed");
        assert!(err.to_string().contains("linear.weight.corrupted"));
    }
}
