//! Post-training statistics of the learned masks, written as CSV with optional
//! SVG renderings.
//!
//! Layers are identified by `(block, layer)` with both 0-based. Every statistic
//! is computed from eval-mode (`Sign`) masks unless stated otherwise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{MsgcError, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::ops::sigmoid_scalar;
use crate::train::{evaluate_with, EvalMasks, EvalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Group,
    Layer,
    Sample,
    Attention,
}

impl std::str::FromStr for Which {
    type Err = MsgcError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(Which::Group),
            "layer" => Ok(Which::Layer),
            "sample" => Ok(Which::Sample),
            "attention" => Ok(Which::Attention),
            _ => Err(MsgcError::InvalidValue { key: "which".into(), reason: format!("unknown analysis `{s}`") }),
        }
    }
}

/// Channel classes of the pyramid view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pyramid {
    /// Selected by every group.
    pub canonical: usize,
    /// Selected by some but not all groups.
    pub partial: usize,
    /// Selected by no group.
    pub discarded: usize,
}

impl Pyramid {
    pub fn from_group_counts(counts: impl IntoIterator<Item = usize>, groups: usize) -> Self {
        let mut p = Pyramid::default();
        for k in counts {
            match k {
                0 => p.discarded += 1,
                k if k >= groups => p.canonical += 1,
                _ => p.partial += 1,
            }
        }
        p
    }

    pub fn total(&self) -> usize {
        self.canonical + self.partial + self.discarded
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub block: usize,
    pub layer: usize,
    pub groups: usize,
    pub channels: usize,
    pub samples: usize,
    /// Per `(g, c)`: samples whose mask bit is one.
    pub selected: Vec<u64>,
    /// Per `(c, g)`: samples in which channel `c` is selected by at least `g + 1` groups.
    pub at_least: Vec<u64>,
    /// Per `(g, c)`: summed gating probability `sigmoid(S)`.
    pub prob_sum: Vec<f64>,
    /// Per `(g, c)`: summed squashed attention, when the layer has attention.
    pub attention_sum: Option<Vec<f64>>,
    /// Pyramid classes of each sample.
    pub per_sample: Vec<Pyramid>,
    /// Summed per-sample MACs of this layer under the ledger.
    pub ledger_macs: u64,
    pub dense_macs: u64,
}

impl LayerStats {
    pub fn selection_probability(&self, c: usize, atleast: usize) -> f64 {
        self.at_least[c * self.groups + atleast - 1] as f64 / self.samples.max(1) as f64
    }

    pub fn mean_channels_per_group(&self) -> f64 {
        self.selected.iter().sum::<u64>() as f64 / (self.samples.max(1) * self.groups) as f64
    }

    pub fn remaining_rate(&self) -> f64 {
        self.mean_channels_per_group() / self.channels as f64
    }

    /// Achieved over dense MACs of this layer, averaged over samples.
    pub fn mac_ratio(&self) -> f64 {
        self.ledger_macs as f64 / (self.dense_macs * self.samples.max(1) as u64) as f64
    }

    /// Pyramid of the majority-vote mask: bit `(g, c)` is set when it is set in
    /// at least half of the samples.
    pub fn dataset_pyramid(&self) -> Pyramid {
        let half = self.samples as u64;
        let counts = (0..self.channels).map(|c| {
            (0..self.groups).filter(|&g| 2 * self.selected[g * self.channels + c] >= half && half > 0).count()
        });
        Pyramid::from_group_counts(counts, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub layers: Vec<LayerStats>,
    pub eval: EvalReport,
}

/// Runs the deterministic evaluation once and accumulates every statistic.
pub fn analyze(net: &Network, store: &ParamStore, data: &Dataset) -> Result<Analysis> {
    let mut layers: Vec<LayerStats> = Vec::new();
    for (b, block) in net.blocks.iter().enumerate() {
        if let Some(g) = &block.gate {
            for i in 0..g.config.layer_count() {
                let (groups, channels) = (g.config.groups[i], g.config.channels[i]);
                layers.push(LayerStats {
                    block: b,
                    layer: i,
                    groups,
                    channels,
                    samples: 0,
                    selected: vec![0; groups * channels],
                    at_least: vec![0; groups * channels],
                    prob_sum: vec![0.0; groups * channels],
                    attention_sum: g.config.has_attention(i).then(|| vec![0.0; groups * channels]),
                    per_sample: Vec::new(),
                    ledger_macs: 0,
                    dense_macs: block.mac_model.layers[i].dense_macs(),
                });
            }
        }
    }
    let eval = evaluate_with(net, store, data, EvalMasks::Sign, |_, out| {
        let mut li = 0;
        for (b, cache) in out.cache.blocks.iter().enumerate() {
            let Some(state) = cache.gate() else { continue };
            for (i, mask) in state.masks.iter().enumerate() {
                let st = &mut layers[li];
                debug_assert_eq!((st.block, st.layer), (b, i));
                let (gs, cs) = (st.groups, st.channels);
                for s in 0..mask.rows() {
                    let row = mask.row(s);
                    for (k, &v) in row.iter().enumerate() {
                        if v != 0.0 {
                            st.selected[k] += 1;
                        }
                    }
                    let counts: Vec<usize> = (0..cs).map(|c| (0..gs).filter(|&g| row[g * cs + c] != 0.0).count()).collect();
                    for (c, &k) in counts.iter().enumerate() {
                        for g in 0..k {
                            st.at_least[c * gs + g] += 1;
                        }
                    }
                    st.per_sample.push(Pyramid::from_group_counts(counts, gs));
                    for (acc, &sv) in st.prob_sum.iter_mut().zip(state.saliency.gate[i].row(s)) {
                        *acc += sigmoid_scalar(sv);
                    }
                    if let (Some(acc), Some(att)) = (st.attention_sum.as_mut(), state.attention[i].as_ref()) {
                        for (a, &v) in acc.iter_mut().zip(att.row(s)) {
                            *a += v;
                        }
                    }
                    st.ledger_macs += out.ledgers[s].blocks[b].per_layer[i];
                    st.samples += 1;
                }
                li += 1;
            }
        }
        Ok(())
    })?;
    Ok(Analysis { layers, eval })
}

fn require_gated(a: &Analysis) -> Result<()> {
    if a.layers.is_empty() {
        return Err(MsgcError::Analysis("the checkpoint has no gated layers".into()));
    }
    Ok(())
}

pub const GROUP_HEADER: &str = "block,layer,at_least,rank,channel,probability";
pub const PYRAMID_HEADER: &str = "block,layer,channels,canonical,partial,discarded";
pub const PYRAMID_SAMPLES_HEADER: &str = "index,block,layer,canonical,partial,discarded";
pub const LAYER_HEADER: &str = "block,layer,groups,channels,mean_channels_per_group,remaining_rate,mac_ratio";
pub const SAMPLE_HEADER: &str = "index,label,predicted,correct,macs,ratio";
pub const HISTOGRAM_HEADER: &str = "bin,macs_lo,macs_hi,count,correct,accuracy";
pub const EXTREMES_HEADER: &str = "kind,index,macs,correct";
pub const ATTENTION_HEADER: &str = "block,layer,group,channel,gate_probability,attention";

/// Per layer and `g`, channels sorted by descending at-least-`g` probability.
pub fn group_csv(a: &Analysis) -> Result<String> {
    require_gated(a)?;
    let mut s = format!("{GROUP_HEADER}\n");
    for l in &a.layers {
        for g in 1..=l.groups {
            let mut order: Vec<usize> = (0..l.channels).collect();
            order.sort_by(|&x, &y| {
                l.selection_probability(y, g).total_cmp(&l.selection_probability(x, g)).then(x.cmp(&y))
            });
            for (rank, &c) in order.iter().enumerate() {
                writeln!(s, "{},{},{g},{rank},{c},{:.6}", l.block, l.layer, l.selection_probability(c, g)).unwrap();
            }
        }
    }
    Ok(s)
}

pub fn pyramid_csv(a: &Analysis) -> Result<String> {
    require_gated(a)?;
    let mut s = format!("{PYRAMID_HEADER}\n");
    for l in &a.layers {
        let p = l.dataset_pyramid();
        writeln!(s, "{},{},{},{},{},{}", l.block, l.layer, l.channels, p.canonical, p.partial, p.discarded).unwrap();
    }
    Ok(s)
}

pub fn pyramid_samples_csv(a: &Analysis) -> Result<String> {
    require_gated(a)?;
    let mut s = format!("{PYRAMID_SAMPLES_HEADER}\n");
    for (n, rec) in a.eval.samples.iter().enumerate() {
        for l in &a.layers {
            let p = l.per_sample[n];
            writeln!(s, "{},{},{},{},{},{}", rec.index, l.block, l.layer, p.canonical, p.partial, p.discarded).unwrap();
        }
    }
    Ok(s)
}

pub fn layer_csv(a: &Analysis) -> Result<String> {
    require_gated(a)?;
    let mut s = format!("{LAYER_HEADER}\n");
    for l in &a.layers {
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            l.block,
            l.layer,
            l.groups,
            l.channels,
            l.mean_channels_per_group(),
            l.remaining_rate(),
            l.mac_ratio()
        )
        .unwrap();
    }
    Ok(s)
}

pub fn sample_csv(a: &Analysis) -> String {
    let mut s = format!("{SAMPLE_HEADER}\n");
    for r in &a.eval.samples {
        writeln!(s, "{},{},{},{},{},{:.6}", r.index, r.label, r.predicted, u8::from(r.correct()), r.macs, r.ratio).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: u64,
    pub hi: u64,
    pub count: usize,
    pub correct: usize,
}

impl HistogramBin {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Equal-width MAC bins over `[min, max]`; the last bin is closed.
pub fn mac_histogram(a: &Analysis, bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let macs: Vec<u64> = a.eval.samples.iter().map(|s| s.macs).collect();
    let (lo, hi) = match (macs.iter().min(), macs.iter().max()) {
        (Some(&l), Some(&h)) => (l, h),
        _ => return Vec::new(),
    };
    let width = ((hi - lo) as f64 / bins as f64).max(f64::MIN_POSITIVE);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + (b as f64 * width).round() as u64,
            hi: if b + 1 == bins { hi } else { lo + ((b + 1) as f64 * width).round() as u64 },
            count: 0,
            correct: 0,
        })
        .collect();
    for s in &a.eval.samples {
        let b = (((s.macs - lo) as f64 / width) as usize).min(bins - 1);
        out[b].count += 1;
        out[b].correct += usize::from(s.correct());
    }
    out
}

pub fn histogram_csv(hist: &[HistogramBin]) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for (i, b) in hist.iter().enumerate() {
        let acc = if b.count == 0 { String::new() } else { format!("{:.6}", b.accuracy()) };
        writeln!(s, "{i},{},{},{},{},{acc}", b.lo, b.hi, b.count, b.correct).unwrap();
    }
    s
}

/// The `k` cheapest and most expensive samples (ties broken by index).
pub fn extremes_csv(a: &Analysis, k: usize) -> String {
    let mut order: Vec<_> = a.eval.samples.iter().collect();
    order.sort_by_key(|r| (r.macs, r.index));
    let mut s = format!("{EXTREMES_HEADER}\n");
    for r in order.iter().take(k) {
        writeln!(s, "lowest,{},{},{}", r.index, r.macs, u8::from(r.correct())).unwrap();
    }
    for r in order.iter().rev().take(k) {
        writeln!(s, "highest,{},{},{}", r.index, r.macs, u8::from(r.correct())).unwrap();
    }
    s
}

pub fn attention_csv(a: &Analysis) -> Result<String> {
    require_gated(a)?;
    if a.layers.iter().all(|l| l.attention_sum.is_none()) {
        return Err(MsgcError::Analysis("the checkpoint has no attention layers".into()));
    }
    let mut s = format!("{ATTENTION_HEADER}\n");
    for l in a.layers.iter().filter(|l| l.attention_sum.is_some()) {
        let att = l.attention_sum.as_ref().expect("filtered");
        let n = l.samples.max(1) as f64;
        for g in 0..l.groups {
            for c in 0..l.channels {
                let k = g * l.channels + c;
                writeln!(s, "{},{},{g},{c},{:.6},{:.6}", l.block, l.layer, l.prob_sum[k] / n, att[k] / n).unwrap();
            }
        }
    }
    Ok(s)
}

/// Minimal SVG canvas.
struct Svg {
    w: f64,
    h: f64,
    body: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Self { w, h, body: String::new() }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#).unwrap();
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#, p.join(" ")).unwrap();
    }

    fn text(&mut self, x: f64, y: f64, t: &str) {
        writeln!(self.body, r#"<text x="{x:.2}" y="{y:.2}" font-size="11" font-family="sans-serif">{t}</text>"#).unwrap();
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.w,
            h = self.h
        )
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn heat(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v) as u8;
    let b = (255.0 * (1.0 - v)) as u8;
    format!("#{r:02x}40{b:02x}")
}

fn group_svg(a: &Analysis) -> String {
    let panel = 180.0;
    let mut svg = Svg::new(panel * a.layers.len() as f64 + 20.0, 220.0);
    for (i, l) in a.layers.iter().enumerate() {
        let x0 = 20.0 + panel * i as f64;
        svg.text(x0, 15.0, &format!("block {} layer {}", l.block, l.layer));
        for g in 1..=l.groups {
            let mut p: Vec<f64> = (0..l.channels).map(|c| l.selection_probability(c, g)).collect();
            p.sort_by(|a, b| b.total_cmp(a));
            let pts: Vec<(f64, f64)> = p
                .iter()
                .enumerate()
                .map(|(c, &v)| (x0 + 150.0 * c as f64 / (l.channels.max(2) - 1) as f64, 200.0 - 170.0 * v))
                .collect();
            svg.polyline(&pts, PALETTE[(g - 1) % PALETTE.len()]);
        }
    }
    svg.finish()
}

fn layer_svg(a: &Analysis) -> String {
    let bar = 24.0;
    let mut svg = Svg::new(bar * a.layers.len() as f64 + 40.0, 220.0);
    for (i, l) in a.layers.iter().enumerate() {
        let h = 180.0 * l.remaining_rate();
        svg.rect(20.0 + bar * i as f64, 200.0 - h, bar - 4.0, h, PALETTE[l.layer % PALETTE.len()]);
    }
    svg.text(20.0, 15.0, "remaining rate per layer");
    svg.finish()
}

fn histogram_svg(hist: &[HistogramBin]) -> String {
    let bar = 20.0;
    let max = hist.iter().map(|b| b.count).max().unwrap_or(1).max(1) as f64;
    let mut svg = Svg::new(bar * hist.len() as f64 + 40.0, 220.0);
    for (i, b) in hist.iter().enumerate() {
        let h = 170.0 * b.count as f64 / max;
        svg.rect(20.0 + bar * i as f64, 200.0 - h, bar - 2.0, h, &heat(if b.count == 0 { 0.0 } else { b.accuracy() }));
    }
    svg.text(20.0, 15.0, "samples per MAC bin (colour: accuracy)");
    svg.finish()
}

fn attention_svg(a: &Analysis) -> String {
    let cell = 6.0;
    let rows: usize = a.layers.iter().filter(|l| l.attention_sum.is_some()).map(|l| 2 * l.groups + 1).sum();
    let cols = a.layers.iter().map(|l| l.channels).max().unwrap_or(1);
    let mut svg = Svg::new(cell * cols as f64 + 40.0, cell * rows as f64 + 40.0);
    let mut row = 0;
    for l in a.layers.iter().filter(|l| l.attention_sum.is_some()) {
        let att = l.attention_sum.as_ref().expect("filtered");
        let n = l.samples.max(1) as f64;
        for (which, src) in [(0, &l.prob_sum), (1, att)] {
            for g in 0..l.groups {
                for c in 0..l.channels {
                    let v = src[g * l.channels + c] / n;
                    svg.rect(20.0 + cell * c as f64, 20.0 + cell * (row + which * l.groups + g) as f64, cell, cell, &heat(v));
                }
            }
        }
        row += 2 * l.groups + 1;
    }
    svg.finish()
}

/// Dense MACs of every conv and linear layer, in execution order.
pub fn mac_table(net: &Network) -> Vec<(String, u64)> {
    let (_, h, w) = net.config.input;
    let mut rows = vec![("stem".to_string(), net.stem.dense_macs(h, w))];
    for b in &net.blocks {
        rows.push((format!("{}.conv1", b.name), b.mac_model.layers[0].dense_macs()));
        rows.push((format!("{}.conv2", b.name), b.mac_model.layers[1].dense_macs()));
        if b.shortcut.is_some() {
            rows.push((format!("{}.proj", b.name), b.shortcut_macs()));
        }
    }
    rows.push(("fc".to_string(), (net.feature_width() * net.config.classes) as u64));
    rows
}

pub const MACS_HEADER: &str = "layer,macs";

/// The per-layer table followed by `total`, `mlp_overhead` and the overhead
/// ratio relative to the total.
pub fn macs_csv(net: &Network) -> String {
    let mut s = format!("{MACS_HEADER}\n");
    for (name, m) in mac_table(net) {
        writeln!(s, "{name},{m}").unwrap();
    }
    writeln!(s, "total,{}", net.m_ori()).unwrap();
    writeln!(s, "mlp_overhead,{}", net.mlp_overhead()).unwrap();
    writeln!(s, "mlp_overhead_ratio,{:.6}", net.mlp_overhead() as f64 / net.m_ori() as f64).unwrap();
    s
}

pub const HISTOGRAM_BINS: usize = 10;
pub const EXTREME_COUNT: usize = 5;

/// Writes the CSVs (and SVGs) of one analysis to `dir`; returns the paths.
pub fn write_analysis(a: &Analysis, which: Which, dir: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<(&str, String)> = match which {
        Which::Group => vec![
            ("group.csv", group_csv(a)?),
            ("pyramid.csv", pyramid_csv(a)?),
            ("pyramid_samples.csv", pyramid_samples_csv(a)?),
            ("group.svg", group_svg(a)),
        ],
        Which::Layer => vec![("layer.csv", layer_csv(a)?), ("layer.svg", layer_svg(a))],
        Which::Sample => {
            let hist = mac_histogram(a, HISTOGRAM_BINS);
            vec![
                ("sample.csv", sample_csv(a)),
                ("histogram.csv", histogram_csv(&hist)),
                ("extremes.csv", extremes_csv(a, EXTREME_COUNT)),
                ("histogram.svg", histogram_svg(&hist)),
            ]
        }
        Which::Attention => vec![("attention.csv", attention_csv(a)?), ("attention.svg", attention_svg(a))],
    };
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, RunConfig, SynthConfig};
    use crate::train::init_model;

    fn setup(cfg: RunConfig) -> (Network, ParamStore, Dataset) {
        let data = synth_generate(&SynthConfig { n_per_class: 3, size: 8, ..SynthConfig::default() }).unwrap();
        let (net, store) = init_model(&cfg, &data, None).unwrap();
        (net, store, data)
    }

    fn small(bias: f64) -> RunConfig {
        RunConfig { stem_width: 8, widths: vec![8, 16], strides: vec![1, 2], saliency_bias_init: bias, ..RunConfig::default() }
    }

    #[test]
    fn open_gates_start_fully_canonical() {
        let (net, store, data) = setup(small(3.0));
        let a = analyze(&net, &store, &data).unwrap();
        assert!((a.eval.mean_ratio - 1.0).abs() < 1e-12);
        for l in &a.layers {
            assert_eq!(l.remaining_rate(), 1.0);
            assert_eq!(l.dataset_pyramid(), Pyramid { canonical: l.channels, partial: 0, discarded: 0 });
        }
    }

    #[test]
    fn pyramid_and_histogram_identities() {
        let (net, store, data) = setup(small(0.0));
        let a = analyze(&net, &store, &data).unwrap();
        for l in &a.layers {
            assert_eq!(l.dataset_pyramid().total(), l.channels);
            assert!(l.per_sample.iter().all(|p| p.total() == l.channels));
            for c in 0..l.channels {
                for g in 2..=l.groups {
                    assert!(l.selection_probability(c, g) <= l.selection_probability(c, g - 1));
                }
            }
        }
        let hist = mac_histogram(&a, 7);
        let count: usize = hist.iter().map(|b| b.count).sum();
        let correct: usize = hist.iter().map(|b| b.correct).sum();
        assert_eq!(count, a.eval.samples.len());
        assert_eq!(correct as f64 / count as f64, a.eval.accuracy);
    }

    #[test]
    fn attention_free_checkpoint_is_rejected() {
        let mut cfg = small(0.0);
        cfg.attention = vec![];
        let (net, store, data) = setup(cfg);
        let a = analyze(&net, &store, &data).unwrap();
        assert_eq!(attention_csv(&a).unwrap_err().category(), "analysis");
        let plain = RunConfig { msgc: false, ..small(0.0) };
        let (net, store, data) = setup(plain);
        let a = analyze(&net, &store, &data).unwrap();
        assert_eq!(group_csv(&a).unwrap_err().category(), "analysis");
        assert!(sample_csv(&a).starts_with(SAMPLE_HEADER));
    }

    #[test]
    fn mac_table_sums_to_dense_cost() {
        let (net, _, _) = setup(small(0.0));
        let total: u64 = mac_table(&net).iter().map(|r| r.1).sum();
        assert_eq!(total, net.m_ori());
        assert!(macs_csv(&net).lines().any(|l| l.starts_with("block1.proj,")));
    }

    #[test]
    fn writes_every_view() {
        let (net, store, data) = setup(small(0.0));
        let a = analyze(&net, &store, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for w in [Which::Group, Which::Layer, Which::Sample, Which::Attention] {
            let files = write_analysis(&a, w, dir.path()).unwrap();
            for f in files {
                let body = std::fs::read_to_string(&f).unwrap();
                assert!(!body.is_empty());
            }
        }
        let layer = std::fs::read_to_string(dir.path().join("layer.csv")).unwrap();
        assert_eq!(layer.lines().next().unwrap(), LAYER_HEADER);
        assert_eq!(layer.lines().count(), 1 + a.layers.len());
    }
}
