//! Subcommands of the `prunelab` binary, callable in-process.
//!
//! A training run writes into its output directory:
//! `model.ckpt` (final weights, optimizer state and sampler position),
//! `target.ckpt` (the model right after the budget was met, pruning runs
//! only), `trace.json`, `metrics.csv`, `arch.csv` and `config.txt`.

use std::io::Write;
use std::path::{Path, PathBuf};

use prunelab::groups::PruneSpace;
use prunelab::io::checkpoint::{self, Checkpoint};
use prunelab::io::report::{self, ArchRow};
use prunelab::io::{trace, Corpus, RunConfig};
use prunelab::model::{ModelConfig, TransformerModel};
use prunelab::numerics::Rng;
use prunelab::saliency::Metric;
use prunelab::second_order::SecondOrderConfig;
use prunelab::trainer::{oneshot_prune, BatchSampler, Event, PruneTrace, Trainer};
use prunelab::{Error, Result};

pub const MODEL_FILE: &str = "model.ckpt";
pub const TARGET_FILE: &str = "target.ckpt";
pub const TRACE_FILE: &str = "trace.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ARCH_FILE: &str = "arch.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.ckpt";

/// How often training progress is written to the log.
pub const LOG_EVERY: usize = 100;

/// One line describing a failure: `error: code=<CODE> [key=<key>] message="..."`.
pub fn error_line(e: &Error) -> String {
    match e {
        Error::Config { key, msg } => format!("error: code={} key={key:?} message={msg:?}", e.code()),
        _ => format!("error: code={} message={:?}", e.code(), e.to_string()),
    }
}

pub fn init_rng(seed: u64) -> Rng {
    Rng::new(seed).split("init")
}

pub fn data_rng(seed: u64) -> Rng {
    Rng::new(seed).split("data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub steps: usize,
    pub tokens: u64,
    pub params: usize,
    pub prune_events: usize,
    /// Gradient steps and tokens consumed when the budget was first met.
    pub reached_target: Option<(usize, u64)>,
}

/// Where the starting model of a training run comes from.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Fresh weights for the configured architecture.
    Fresh,
    /// Weights and architecture of a checkpoint.
    Weights(&'a Path),
    /// Fresh weights for a checkpoint's architecture.
    Architecture(&'a Path),
}

/// Plain pretraining: the configured ratio is ignored and nothing is pruned.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus, out: &Path, init: Init<'_>, log: &mut dyn Write) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.train.prune_steps = 0;
    train_run(cfg, corpus, out, init, log)
}

/// Pruning-aware pretraining; `second_order` forces compensation on.
pub fn prune_pretrain(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    init: Init<'_>,
    second_order: bool,
    log: &mut dyn Write,
) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.train.second_order |= second_order;
    train_run(cfg, corpus, out, init, log)
}

fn starting_model(cfg: &mut RunConfig, init: Init<'_>) -> Result<TransformerModel<f32>> {
    let fresh = |mcfg: ModelConfig, cfg: &RunConfig| TransformerModel::init(mcfg, cfg.train.init_std, &mut init_rng(cfg.train.seed));
    let model = match init {
        Init::Fresh => return fresh(cfg.model.clone(), cfg),
        Init::Weights(path) => checkpoint::load(path)?.model,
        Init::Architecture(path) => {
            let mut mcfg = checkpoint::load(path)?.model.config().clone();
            mcfg.stem_ids = (0..mcfg.hidden).collect();
            mcfg.stem_base = mcfg.hidden;
            fresh(mcfg, cfg)?
        }
    };
    if model.config().max_seq_len < cfg.train.seq_len {
        return Err(Error::config("seq_len", "exceeds the initial checkpoint's max_seq_len"));
    }
    cfg.rebase_target(model.parameter_count());
    let hidden = model.config().hidden;
    if let Some(space) = &mut cfg.train.space {
        space.min_hidden = space.min_hidden.min(hidden);
    }
    Ok(model)
}

fn train_run(mut cfg: RunConfig, corpus: &Corpus, out: &Path, init: Init<'_>, log: &mut dyn Write) -> Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let model = starting_model(&mut cfg, init)?;
    let mut text = cfg.to_text();
    match init {
        Init::Fresh => {}
        Init::Weights(path) => text = format!("# initialized from {}\n{text}", path.display()),
        Init::Architecture(path) => text = format!("# architecture of {}\n{text}", path.display()),
    }
    std::fs::write(out.join(CONFIG_FILE), text)?;
    let initial = ArchRow::from_config("initial", model.config());
    let mut sampler = BatchSampler::new(corpus.train(), cfg.train.seq_len, cfg.train.batch_size, data_rng(cfg.train.seed))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;

    let mut saved: Result<()> = Ok(());
    let result = trainer.run(&mut sampler, |event| match event {
        Event::Step(m) if m.step % LOG_EVERY == 0 => {
            let _ = writeln!(
                log,
                "step={} tokens={} loss={:.4} lr={:.3e} params={}",
                m.step, m.tokens, m.loss, m.lr, m.params
            );
        }
        Event::Step(_) => {}
        Event::Prune(r) => {
            let _ = writeln!(
                log,
                "prune step={} chosen={} params={} hidden={}",
                r.step, r.chosen, r.params, r.hidden
            );
        }
        Event::Target(t) => {
            let ck = Checkpoint {
                model: t.model.clone(),
                step: t.step,
                tokens: t.tokens,
                rng: None,
                optimizer: None,
            };
            saved = checkpoint::save(&ck, &out.join(TARGET_FILE));
            let _ = writeln!(log, "target reached step={} tokens={} params={}", t.step, t.tokens, t.model.parameter_count());
        }
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            let ck = Checkpoint::new(trainer.model.clone());
            let _ = checkpoint::save(&ck, &out.join(DIAGNOSTIC_FILE));
            let _ = writeln!(log, "diagnostic checkpoint written to {}", out.join(DIAGNOSTIC_FILE).display());
        }
        return Err(e);
    }
    saved?;

    let ck = Checkpoint {
        model: trainer.model.clone(),
        step: trainer.step,
        tokens: trainer.tokens,
        rng: Some(sampler.rng().state()),
        optimizer: Some(trainer.optimizer.clone()),
    };
    checkpoint::save(&ck, &out.join(MODEL_FILE))?;
    trace::save_json(&trainer.trace, &out.join(TRACE_FILE))?;
    let metrics = std::fs::File::create(out.join(METRICS_FILE))?;
    trace::write_metrics(&trainer.metrics, std::io::BufWriter::new(metrics))?;
    let mut rows = vec![initial];
    rows.extend(report::rows_from_trace(&trainer.trace, trainer.model.config().head_dim));
    rows.push(ArchRow::from_config("final", trainer.model.config()));
    std::fs::write(out.join(ARCH_FILE), report::to_csv(&rows)?)?;

    Ok(RunSummary {
        out: out.to_path_buf(),
        steps: trainer.step,
        tokens: trainer.tokens,
        params: trainer.model.parameter_count(),
        prune_events: trainer.trace.len(),
        reached_target: trainer.reached_target,
    })
}

pub fn eval(ckpt: &Path, corpus: &Corpus, seq_len: Option<usize>, max_windows: Option<usize>) -> Result<f64> {
    let model = checkpoint::load(ckpt)?.model;
    let seq_len = seq_len.unwrap_or(model.config().max_seq_len);
    prunelab::io::evaluate_perplexity(&model, corpus.heldout(), seq_len, max_windows)
}

pub enum ReportSource<'a> {
    Checkpoint(&'a Path),
    Run(&'a Path),
}

pub fn report_arch(source: ReportSource<'_>, csv: bool) -> Result<String> {
    let rows = match source {
        ReportSource::Checkpoint(path) => {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            vec![ArchRow::from_config(name, checkpoint::load(path)?.model.config())]
        }
        ReportSource::Run(dir) => report::read_csv(&std::fs::read_to_string(dir.join(ARCH_FILE))?)?,
    };
    if csv {
        report::to_csv(&rows)
    } else {
        Ok(report::render_table(&rows))
    }
}

pub fn export_trace(run: &Path, out: &Path) -> Result<PruneTrace> {
    let t = trace::load_json(&run.join(TRACE_FILE))?;
    trace::export(&t, out)?;
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct OneshotOptions {
    pub target: usize,
    pub calib_batches: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub metric: Metric,
    pub second_order: bool,
}

/// Post-training pruning of a checkpoint to `target` parameters. The pruned
/// model is written to `out`, its trace next to it as CSV.
pub fn oneshot(ckpt: &Path, corpus: &Corpus, out: &Path, opts: &OneshotOptions) -> Result<PruneTrace> {
    let mut model = checkpoint::load(ckpt)?.model;
    if opts.target >= model.parameter_count() {
        return Err(Error::config(
            "target",
            format!("must be below the checkpoint's {} parameters", model.parameter_count()),
        ));
    }
    let mut sampler = BatchSampler::new(corpus.train(), opts.seq_len, opts.batch_size, data_rng(opts.seed))?;
    let space = PruneSpace::for_config(model.config());
    let obs = SecondOrderConfig {
        window: opts.calib_batches.max(1),
        ..SecondOrderConfig::default()
    };
    let t = oneshot_prune(
        &mut model,
        &mut sampler,
        opts.target,
        opts.calib_batches,
        opts.metric,
        opts.second_order.then_some(&obs),
        &space,
    )?;
    checkpoint::save(&Checkpoint::new(model), out)?;
    if !t.is_empty() {
        trace::export(&t, &out.with_extension("trace.csv"))?;
    }
    Ok(t)
}
