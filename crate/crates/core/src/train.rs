//! Loss assembly, the training loop and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Checkpoint, Dataset, RunConfig};
use crate::error::{MsgcError, Result};
use crate::layers::Mode;
use crate::msgc::{GateSpec, Relaxation};
use crate::network::{convert_to_msgc, BlockSpec, NetMaskRule, Network, NetworkLedger, TinyNetConfig};
use crate::optim::{budget_loss, lr_at, BudgetSchedule, GroupHyper, OptimizerConfig, Sgd};
use crate::params::{Grads, ParamStore};
use crate::tensor::{softmax_cross_entropy, Tensor2, Tensor4};

/// Architecture described by a run config for the given input and class count.
pub fn architecture(cfg: &RunConfig, input: (usize, usize, usize), classes: usize) -> (TinyNetConfig, Option<GateSpec>) {
    let net = TinyNetConfig {
        input,
        stem_width: cfg.stem_width,
        blocks: cfg.widths.iter().zip(&cfg.strides).map(|(&width, &stride)| BlockSpec { width, stride }).collect(),
        classes,
    };
    let gate = cfg.msgc.then(|| GateSpec {
        groups: cfg.groups,
        attention_layers: cfg.attention.iter().map(|l| l - 1).collect(),
        reduction: cfg.reduction,
        gumbel_temperature: cfg.gumbel_temperature,
        saliency_bias_init: cfg.saliency_bias_init,
    });
    (net, gate)
}

/// Parameters plus the architecture tensors under `meta.*`.
pub fn to_checkpoint(net: &Network, store: &ParamStore) -> Checkpoint {
    let mut c = Checkpoint::from_store(store);
    let cfg = &net.config;
    let f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    c.push("meta.input", vec![3], &f(&[cfg.input.0, cfg.input.1, cfg.input.2]));
    c.push("meta.stem_width", vec![1], &f(&[cfg.stem_width]));
    let blocks: Vec<usize> = cfg.blocks.iter().flat_map(|b| [b.width, b.stride]).collect();
    c.push("meta.blocks", vec![cfg.blocks.len(), 2], &f(&blocks));
    c.push("meta.classes", vec![1], &f(&[cfg.classes]));
    if let Some(g) = &net.gating {
        c.push(
            "meta.gating",
            vec![5],
            &[g.groups[0] as f64, g.groups[1] as f64, g.reduction as f64, g.gumbel_temperature, g.saliency_bias_init],
        );
        c.push("meta.attention", vec![g.attention_layers.len()], &f(&g.attention_layers));
    }
    c
}

fn meta<'a>(c: &'a Checkpoint, name: &str, len: Option<usize>) -> Result<Vec<f64>> {
    let t = c
        .get(name)
        .ok_or_else(|| MsgcError::CheckpointMismatch(format!("missing architecture tensor `{name}`")))?;
    if len.is_some_and(|l| t.data.len() != l) {
        return Err(MsgcError::CheckpointMismatch(format!("`{name}` has {} values", t.data.len())));
    }
    Ok(t.data.iter().map(|&v| f64::from(v)).collect())
}

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > 1e9 {
        return Err(MsgcError::CheckpointMismatch(format!("`{name}` holds non-integer {v}")));
    }
    Ok(v as usize)
}

/// Rebuilds the network described by a checkpoint and loads its tensors.
pub fn load_network(c: &Checkpoint) -> Result<(Network, ParamStore)> {
    let counts = |name: &str, len: Option<usize>| -> Result<Vec<usize>> {
        meta(c, name, len)?.into_iter().map(|v| as_count(name, v)).collect()
    };
    let input = counts("meta.input", Some(3))?;
    let stem_width = counts("meta.stem_width", Some(1))?[0];
    let blocks = counts("meta.blocks", None)?;
    if blocks.len() % 2 != 0 {
        return Err(MsgcError::CheckpointMismatch("`meta.blocks` must hold width/stride pairs".into()));
    }
    let classes = counts("meta.classes", Some(1))?[0];
    let config = TinyNetConfig {
        input: (input[0], input[1], input[2]),
        stem_width,
        blocks: blocks.chunks(2).map(|p| BlockSpec { width: p[0], stride: p[1] }).collect(),
        classes,
    };
    let gating = match c.get("meta.gating") {
        None => None,
        Some(_) => {
            let g = meta(c, "meta.gating", Some(5))?;
            Some(GateSpec {
                groups: [as_count("meta.gating", g[0])?, as_count("meta.gating", g[1])?],
                attention_layers: counts("meta.attention", None)?,
                reduction: as_count("meta.gating", g[2])?,
                gumbel_temperature: g[3],
                saliency_bias_init: g[4],
            })
        }
    };
    let mut store = ParamStore::new();
    let net = Network::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &config, gating.as_ref())
        .map_err(|e| MsgcError::CheckpointMismatch(format!("architecture tensors describe an invalid network: {e}")))?;
    c.load_into(&mut store)?;
    Ok((net, store))
}

/// Loss terms of one batch with the parameter gradients.
pub struct StepResult {
    pub task_loss: f64,
    pub budget_loss: f64,
    /// Mean differentiable MAC ratio the budget term saw.
    pub mac_ratio: f64,
    pub ledgers: Vec<NetworkLedger>,
    pub grads: Grads,
    pub cache: crate::network::NetCache,
}

/// Cross-entropy plus, for gated networks with `budget = Some((lambda, tau))`,
/// the hinge on the batch-mean MAC ratio; gradients flow into every parameter.
pub fn loss_and_grad(
    net: &Network,
    store: &ParamStore,
    x: &Tensor4,
    labels: &[usize],
    noise: &[Vec<Tensor2>],
    relax: Relaxation,
    budget: Option<(f64, f64)>,
) -> Result<StepResult> {
    let out = net.forward(store, x, Mode::Train, NetMaskRule::Sampled { noise, relax })?;
    let (task_loss, dlogits) = softmax_cross_entropy(&out.logits, labels)?;
    let n = x.batch() as f64;
    let m_ori = net.m_ori() as f64;
    let cost = net.cost(&out.cache)?;
    let mean = cost.per_sample.iter().sum::<f64>() / n;
    let (bl, dmean) = match budget {
        Some((lambda, tau)) if net.is_gated() => budget_loss(mean, m_ori, lambda, tau),
        _ => (0.0, 0.0),
    };
    let mask_grads: Vec<Option<Vec<Tensor2>>> = cost
        .mask_grads
        .into_iter()
        .map(|g| {
            g.map(|layers| {
                layers
                    .into_iter()
                    .map(|mut t| {
                        for v in t.data_mut() {
                            *v *= dmean / n;
                        }
                        t
                    })
                    .collect()
            })
        })
        .collect();
    let mut grads = Grads::zeros_like(store);
    net.backward(store, &mut grads, &out.cache, &dlogits, (dmean != 0.0).then_some(mask_grads.as_slice()))?;
    Ok(StepResult { task_loss, budget_loss: bl, mac_ratio: mean / m_ori, ledgers: out.ledgers, grads, cache: out.cache })
}

/// Forward-only value of the [`loss_and_grad`] objective.
pub fn loss_value(
    net: &Network,
    store: &ParamStore,
    x: &Tensor4,
    labels: &[usize],
    noise: &[Vec<Tensor2>],
    relax: Relaxation,
    budget: Option<(f64, f64)>,
) -> Result<f64> {
    let out = net.forward(store, x, Mode::Train, NetMaskRule::Sampled { noise, relax })?;
    let (task_loss, _) = softmax_cross_entropy(&out.logits, labels)?;
    let bl = match budget {
        Some((lambda, tau)) if net.is_gated() => {
            let cost = net.cost(&out.cache)?;
            let mean = cost.per_sample.iter().sum::<f64>() / x.batch() as f64;
            budget_loss(mean, net.m_ori() as f64, lambda, tau).0
        }
        _ => 0.0,
    };
    Ok(task_loss + bl)
}

fn augment_batch(x: &mut Tensor4, rng: &mut ChaCha8Rng, flip: bool) {
    let (n, c, h, w) = x.shape();
    let pad = 4i64;
    for s in 0..n {
        let dy = rng.gen_range(-pad..=pad);
        let dx = rng.gen_range(-pad..=pad);
        let mirror = flip && rng.gen_bool(0.5);
        for ch in 0..c {
            let src = x.plane(s, ch).to_vec();
            let dst = x.plane_mut(s, ch);
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    let sx = if mirror { w as i64 - 1 - xx } else { xx } + dx;
                    let sy = y + dy;
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[(sy * w as i64 + sx) as usize]
                    } else {
                        0.0
                    };
                    dst[(y * w as i64 + xx) as usize] = v;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub budget_loss: f64,
    pub mac_ratio: f64,
    pub val_accuracy: f64,
    pub tau: f64,
    pub val_mac_ratio: f64,
}

pub const LOG_HEADER: &str = "epoch,task_loss,budget_loss,mac_ratio,val_accuracy,tau,val_mac_ratio";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.task_loss, self.budget_loss, self.mac_ratio, self.val_accuracy, self.tau, self.val_mac_ratio
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub net: Network,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Builds the model for `cfg`: a fresh network, or a gated one plugged into
/// the plain network of `init`.
pub fn init_model(cfg: &RunConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<(Network, ParamStore)> {
    let (arch, gate) = architecture(cfg, (data.channels, data.height, data.width), data.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    match init {
        None => {
            let mut store = ParamStore::new();
            let net = Network::build(&mut store, &mut rng, &arch, gate.as_ref())?;
            Ok((net, store))
        }
        Some(c) => {
            let (plain, plain_store) = load_network(c)?;
            if plain.config != arch {
                return Err(MsgcError::CheckpointMismatch(format!(
                    "initial checkpoint architecture {:?} differs from the config's {arch:?}",
                    plain.config
                )));
            }
            match gate {
                Some(g) if !plain.is_gated() => convert_to_msgc(&plain, &plain_store, &g, &mut rng),
                _ => Ok((plain, plain_store)),
            }
        }
    }
}

/// Fresh model for the input shape and class count declared in `cfg` itself.
pub fn model_for_config(cfg: &RunConfig) -> Result<(Network, ParamStore)> {
    let (arch, gate) = architecture(cfg, (cfg.input_channels, cfg.input_size, cfg.input_size), cfg.classes);
    let mut store = ParamStore::new();
    let net = Network::build(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001), &arch, gate.as_ref())?;
    Ok((net, store))
}

/// Runs the full schedule. On a non-finite loss the last good parameters are
/// written to `abort_dir/last_good.msgc` (when given) and the error returned.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    init: Option<&Checkpoint>,
    abort_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(MsgcError::config("training needs at least 2 samples"));
    }
    let (net, mut store) = init_model(cfg, train_set, init)?;
    let schedule = BudgetSchedule::new(cfg.lambda, cfg.tau_end, cfg.warm_fraction, cfg.epochs)?;
    let opt = OptimizerConfig {
        momentum: cfg.momentum,
        gate: GroupHyper { lr: cfg.lr_mlp, weight_decay: 0.0 },
        backbone: GroupHyper { lr: cfg.lr_backbone, weight_decay: cfg.weight_decay },
    };
    let mut sgd = Sgd::new(opt, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bs = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let iters = (train_set.len() / bs).max(1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tl, mut bl, mut ratio) = (0.0, 0.0, 0.0);
        let mut tau = schedule.tau_at(epoch as f64);
        for it in 0..iters {
            let idx = &order[it * bs..(it + 1) * bs];
            let (mut x, y) = train_set.batch(idx);
            if cfg.augment {
                augment_batch(&mut x, &mut rng, true);
            }
            let t = epoch as f64 + it as f64 / iters as f64;
            tau = schedule.tau_at(t);
            let noise = net.sample_noise(&mut rng, idx.len());
            let step = loss_and_grad(&net, &store, &x, &y, &noise, Relaxation::StraightThrough, Some((cfg.lambda, tau)))?;
            let total = step.task_loss + step.budget_loss;
            let stepped = if total.is_finite() {
                sgd.step(&mut store, &step.grads, lr_at(t, cfg.epochs, 1.0))
            } else {
                Err(MsgcError::NonFinite(format!("loss {total} at epoch {epoch}, iteration {it}")))
            };
            if let Err(e) = stepped {
                if let Some(dir) = abort_dir {
                    std::fs::create_dir_all(dir)?;
                    to_checkpoint(&net, &store).save(&dir.join("last_good.msgc"))?;
                }
                return Err(e);
            }
            net.update_running(&mut store, &step.cache);
            tl += step.task_loss;
            bl += step.budget_loss;
            ratio += step.mac_ratio;
        }
        let (val_accuracy, val_mac_ratio) = match val_set {
            Some(v) if !v.is_empty() => {
                let r = evaluate(&net, &store, v, EvalMasks::Sign)?;
                (r.accuracy, r.mean_ratio)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let k = iters as f64;
        let row = EpochLog { epoch, task_loss: tl / k, budget_loss: bl / k, mac_ratio: ratio / k, val_accuracy, tau, val_mac_ratio };
        log::info!("{}", row.csv_row());
        log.push(row);
    }
    Ok(TrainOutcome { net, store, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMasks {
    Sign,
    AllOnes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub macs: u64,
    pub ratio: f64,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_ratio: f64,
    pub mean_ratio_inclusive: f64,
    pub m_ori: u64,
    pub samples: Vec<SampleRecord>,
}

pub const EVAL_CHUNK: usize = 64;

/// Deterministic evaluation with eval-mode BN and `Sign` (or all-ones) masks.
pub fn evaluate(net: &Network, store: &ParamStore, data: &Dataset, masks: EvalMasks) -> Result<EvalReport> {
    evaluate_with(net, store, data, masks, |_, _| Ok(()))
}

/// As [`evaluate`], also handing every chunk's forward result to `visit`
/// together with the chunk's first dataset index.
pub fn evaluate_with(
    net: &Network,
    store: &ParamStore,
    data: &Dataset,
    masks: EvalMasks,
    mut visit: impl FnMut(usize, &crate::network::NetForward) -> Result<()>,
) -> Result<EvalReport> {
    if (data.channels, data.height, data.width) != net.config.input || data.classes != net.config.classes {
        return Err(MsgcError::CheckpointMismatch(format!(
            "model expects {:?} inputs and {} classes, dataset has {:?} and {}",
            net.config.input,
            net.config.classes,
            (data.channels, data.height, data.width),
            data.classes
        )));
    }
    let rule = match masks {
        EvalMasks::Sign => NetMaskRule::Sign,
        EvalMasks::AllOnes => NetMaskRule::AllOnes,
    };
    let mut samples = Vec::with_capacity(data.len());
    let mut inclusive = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let out = net.forward(store, &x, Mode::Eval, rule)?;
        visit(chunk[0], &out)?;
        for (r, (&i, l)) in chunk.iter().zip(&out.ledgers).enumerate() {
            let row = out.logits.row(r);
            let predicted = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            inclusive += l.ratio_inclusive();
            samples.push(SampleRecord { index: i, label: y[r], predicted, macs: l.achieved, ratio: l.ratio() });
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        accuracy: samples.iter().filter(|s| s.correct()).count() as f64 / n,
        mean_ratio: samples.iter().map(|s| s.ratio).sum::<f64>() / n,
        mean_ratio_inclusive: inclusive / n,
        m_ori: net.m_ori(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            stem_width: 8,
            widths: vec![8, 16],
            strides: vec![1, 2],
            epochs: 2,
            batch_size: 8,
            ..RunConfig::default()
        }
    }

    fn tiny_data(seed: u64) -> Dataset {
        synth_generate(&SynthConfig { seed, n_per_class: 4, size: 8, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn checkpoint_rebuilds_the_network() {
        let data = tiny_data(0);
        let (net, store) = init_model(&tiny_cfg(), &data, None).unwrap();
        let bytes = to_checkpoint(&net, &store).to_bytes().unwrap();
        let (back, bstore) = load_network(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.gating.as_ref().map(|g| g.groups), Some([1, 4]));
        let a = evaluate(&net, &store, &data, EvalMasks::Sign).unwrap();
        let b = evaluate(&back, &bstore, &data, EvalMasks::Sign).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        assert_eq!(to_checkpoint(&back, &bstore).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn fixed_seed_training_is_reproducible() {
        let data = tiny_data(1);
        let a = train(&tiny_cfg(), &data, Some(&data), None, None).unwrap();
        let b = train(&tiny_cfg(), &data, Some(&data), None, None).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.store, b.store);
        assert!(a.log.iter().all(|r| r.task_loss.is_finite()));
    }

    #[test]
    fn all_ones_eval_has_unit_ratio() {
        let data = tiny_data(2);
        let (net, store) = init_model(&tiny_cfg(), &data, None).unwrap();
        let r = evaluate(&net, &store, &data, EvalMasks::AllOnes).unwrap();
        assert_eq!(r.mean_ratio, 1.0);
    }

    #[test]
    fn augmentation_keeps_shape() {
        let data = tiny_data(3);
        let (mut x, _) = data.batch(&[0, 1]);
        let before = x.clone();
        augment_batch(&mut x, &mut ChaCha8Rng::seed_from_u64(0), false);
        assert_eq!(x.shape(), before.shape());
    }

    #[test]
    fn plugging_into_a_plain_checkpoint() {
        let data = tiny_data(4);
        let plain_cfg = RunConfig { msgc: false, ..tiny_cfg() };
        let (plain, pstore) = init_model(&plain_cfg, &data, None).unwrap();
        let ckpt = to_checkpoint(&plain, &pstore);
        let (gated, gstore) = init_model(&tiny_cfg(), &data, Some(&ckpt)).unwrap();
        assert!(gated.is_gated());
        let a = evaluate(&plain, &pstore, &data, EvalMasks::Sign).unwrap();
        let b = evaluate(&gated, &gstore, &data, EvalMasks::AllOnes).unwrap();
        assert_eq!(
            a.samples.iter().map(|s| s.predicted).collect::<Vec<_>>(),
            b.samples.iter().map(|s| s.predicted).collect::<Vec<_>>()
        );
    }
}
