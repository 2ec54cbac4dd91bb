use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msgc_core::analysis::{analyze, macs_csv, write_analysis, Which};
use msgc_core::data::{synth_generate, Checkpoint, Dataset, RunConfig, SynthConfig};
use msgc_core::network::Network;
use msgc_core::params::ParamStore;
use msgc_core::train::{architecture, evaluate, load_network, log_csv, model_for_config, to_checkpoint, train, EvalMasks};
use msgc_core::verify::{miniature_spec, run_gradcheck, GRADCHECK_TOLERANCE};
use msgc_core::{MsgcError, Result};

#[derive(Parser)]
#[command(name = "msgc", version, about = "Per-sample grouped channel gating: training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the given config; writes `model.msgc` and `log.csv` to its out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy and mean MAC ratio on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Force every mask open.
        #[arg(long)]
        all_ones: bool,
    },
    /// Dense per-layer MACs and the mask-generator overhead.
    Macs {
        #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Mask statistics of a trained checkpoint as CSV and SVG.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["group", "layer", "sample", "attention"])]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic oriented-grating dataset.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Wider noise and contrast ranges.
        #[arg(long)]
        noisy: bool,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MSGC_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| MsgcError::InvalidValue { key: "MSGC_THREADS".into(), reason: format!("`{v}` is not a positive integer") })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| MsgcError::Config(format!("thread pool: {e}")))
}

fn load_model(path: &Path) -> Result<(Network, ParamStore)> {
    load_network(&Checkpoint::load(path)?)
}

fn cmd_train(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let data_path = cfg.dataset.as_ref().ok_or_else(|| MsgcError::Config("`dataset` is required for training".into()))?;
    let train_set = Dataset::load(data_path)?;
    let val_set = cfg.val_dataset.as_deref().map(Dataset::load).transpose()?;
    let init = cfg.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = train(&cfg, &train_set, val_set.as_ref(), init.as_ref(), Some(&cfg.out_dir))?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("model.msgc");
    to_checkpoint(&outcome.net, &outcome.store).save(&ckpt)?;
    std::fs::write(cfg.out_dir.join("log.csv"), log_csv(&outcome.log))?;
    if let Some(last) = outcome.log.last() {
        println!("{}", last.csv_row());
    }
    println!("checkpoint={}", ckpt.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, all_ones: bool) -> Result<()> {
    let (net, store) = load_model(ckpt)?;
    let data = Dataset::load(data)?;
    let masks = if all_ones { EvalMasks::AllOnes } else { EvalMasks::Sign };
    let r = evaluate(&net, &store, &data, masks)?;
    println!("samples={}", r.samples.len());
    println!("accuracy={:.6}", r.accuracy);
    println!("mac_ratio={:.6}", r.mean_ratio);
    println!("mac_ratio_with_mlp={:.6}", r.mean_ratio_inclusive);
    println!("m_ori={}", r.m_ori);
    Ok(())
}

fn cmd_macs(config: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let net = match (config, ckpt) {
        (_, Some(c)) => load_model(c)?.0,
        (Some(p), None) => model_for_config(&RunConfig::load(p)?)?.0,
        (None, None) => return Err(MsgcError::Config("either --config or --ckpt is required".into())),
    };
    print!("{}", macs_csv(&net));
    Ok(())
}

fn cmd_gradcheck(path: &Path, seed: u64, seeds: usize) -> Result<()> {
    let cfg = RunConfig { msgc: true, ..RunConfig::load(path)? };
    let (_, gate) = architecture(&cfg, (cfg.input_channels, cfg.input_size, cfg.input_size), cfg.classes);
    let spec = miniature_spec(&gate.expect("gating forced on"));
    let report = run_gradcheck(seed, seeds, &spec, cfg.lambda)?;
    for c in &report.checks {
        let r = &c.report;
        println!("{},{:.3e},{:.6e},{:.6e},{}", c.name, r.max_rel_error, r.numeric, r.analytic, r.worst_index);
    }
    println!("max_rel_error={:.3e}", report.max_error());
    println!("seeds={} elapsed_s={:.2}", report.seeds, report.elapsed.as_secs_f64());
    report.verdict(GRADCHECK_TOLERANCE)?;
    println!("gradcheck=pass");
    Ok(())
}

fn cmd_analyze(ckpt: &Path, data: &Path, which: &str, out: &Path) -> Result<()> {
    let which: Which = which.parse()?;
    let (net, store) = load_model(ckpt)?;
    let data = Dataset::load(data)?;
    let a = analyze(&net, &store, &data)?;
    for f in write_analysis(&a, which, out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_synth(cfg: SynthConfig, out: &Path) -> Result<()> {
    let d = synth_generate(&cfg)?;
    d.save(out)?;
    println!("samples={} classes={} shape={}x{}x{}", d.len(), d.classes, d.channels, d.height, d.width);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval { ckpt, data, all_ones } => cmd_eval(&ckpt, &data, all_ones),
        Command::Macs { config, ckpt } => cmd_macs(config.as_deref(), ckpt.as_deref()),
        Command::Gradcheck { config, seed, seeds } => cmd_gradcheck(&config, seed, seeds),
        Command::Analyze { ckpt, data, which, out } => cmd_analyze(&ckpt, &data, &which, &out),
        Command::Synth { seed, out, per_class, size, classes, channels, noisy } => {
            let base = SynthConfig { seed, n_per_class: per_class, size, classes, channels, ..SynthConfig::default() };
            cmd_synth(if noisy { base.noisy() } else { base }, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msgc-error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
