//! Flat `key = value` run configuration. `#` starts a comment; every key is
//! optional and falls back to a default, unknown keys are errors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::groups::{GroupType, PruneSpace};
use crate::io::corpus::VOCAB_SIZE;
use crate::model::{ModelConfig, Positional};
use crate::saliency::{Accumulation, Metric};
use crate::second_order::BandMode;
use crate::trainer::{LrSchedule, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PRUNELAB_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub heldout_fraction: f64,
    /// Set when the budget was given as a fraction of the starting size.
    pub target_fraction: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

const KEYS: &[&str] = &[
    "vocab_size",
    "hidden",
    "head_dim",
    "n_layers",
    "n_heads",
    "n_kv_heads",
    "ffn",
    "max_seq_len",
    "tied_embeddings",
    "positional",
    "norm_eps",
    "target_params",
    "target_fraction",
    "ratio",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "warmup_steps",
    "schedule",
    "min_lr_ratio",
    "grad_clip",
    "batch_size",
    "seq_len",
    "max_steps",
    "seed",
    "init_std",
    "prune_warmup",
    "metric",
    "saliency_accumulation",
    "saliency_beta",
    "signed_saliency",
    "normalize_saliency",
    "second_order",
    "hessian_window",
    "damping",
    "band_mode",
    "min_heads",
    "min_ffn",
    "min_hidden",
    "prune_types",
    "heldout_fraction",
];

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {v:?}"))),
        }
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| Error::config(key, format!("cannot parse {v:?}"))))
            .transpose()
    }

    fn choice<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse(v).ok_or_else(|| Error::config(key, format!("unknown value {v:?}"))),
        }
    }
}

fn fraction_of(params: usize, frac: f64) -> usize {
    (params as f64 * frac).floor() as usize
}

fn parse_ratio(v: &str) -> Option<(usize, usize)> {
    let (p, g) = v.split_once(':')?;
    Some((p.trim().parse().ok()?, g.trim().parse().ok()?))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::config(k, "unknown key"));
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::config(k, "given more than once"));
            }
            pairs.push((k, v));
        }
        let f = Fields { pairs };

        let n_layers = f.get("n_layers", 2usize)?;
        let heads = f.get("n_heads", 4usize)?;
        let kv = f.get("n_kv_heads", heads)?;
        let seq_len = f.get("seq_len", 64usize)?;
        let mut model = ModelConfig::uniform(
            f.get("vocab_size", VOCAB_SIZE)?,
            f.get("hidden", 64usize)?,
            n_layers,
            heads,
            kv,
            f.get("head_dim", 16usize)?,
            f.get("ffn", 128usize)?,
            f.get("max_seq_len", seq_len)?,
        )?;
        model.tied_embeddings = f.get("tied_embeddings", false)?;
        model.positional = f.choice("positional", Positional::Sinusoidal, Positional::parse)?;
        model.norm_eps = f.get("norm_eps", model.norm_eps)?;
        model.validate()?;

        let d = TrainConfig::default();
        let (prune_steps, gd_steps) = f.choice("ratio", (d.prune_steps, d.gd_steps), parse_ratio)?;
        let initial = model.parameter_count();
        let (target_params, target_fraction) =
            match (f.opt::<usize>("target_params")?, f.opt::<f64>("target_fraction")?) {
                (Some(_), Some(_)) => {
                    return Err(Error::config("target_fraction", "conflicts with target_params"));
                }
                (Some(t), None) => (t, None),
                (None, frac) => {
                    let frac = frac.unwrap_or(0.5);
                    if !(0.0..1.0).contains(&frac) {
                        return Err(Error::config("target_fraction", "must be in [0, 1)"));
                    }
                    (fraction_of(initial, frac), Some(frac))
                }
            };
        let accumulation = match f.raw("saliency_accumulation").unwrap_or("ema") {
            "sum" => Accumulation::Sum,
            "ema" => Accumulation::Ema(f.get("saliency_beta", 0.9)?),
            other => return Err(Error::config("saliency_accumulation", format!("unknown value {other:?}"))),
        };
        let mut space = PruneSpace::for_config(&model);
        space.min_heads = f.get("min_heads", space.min_heads)?;
        space.min_ffn = f.get("min_ffn", space.min_ffn)?;
        space.min_hidden = f.get("min_hidden", space.min_hidden)?;
        if let Some(types) = f.raw("prune_types") {
            space.enabled = types
                .split(',')
                .map(|t| GroupType::parse(t.trim()).ok_or_else(|| Error::config("prune_types", format!("unknown type {t:?}"))))
                .collect::<Result<_>>()?;
        }
        let mut obs = d.obs.clone();
        obs.window = f.get("hessian_window", obs.window)?;
        obs.damping = f.get("damping", obs.damping)?;
        obs.band_mode = f.choice("band_mode", obs.band_mode, BandMode::parse)?;

        let train = TrainConfig {
            target_params,
            prune_steps,
            gd_steps,
            optimizer: crate::trainer::AdamWConfig {
                lr: f.get("lr", d.optimizer.lr)?,
                beta1: f.get("beta1", d.optimizer.beta1)?,
                beta2: f.get("beta2", d.optimizer.beta2)?,
                eps: f.get("adam_eps", d.optimizer.eps)?,
                weight_decay: f.get("weight_decay", d.optimizer.weight_decay)?,
            },
            warmup_steps: f.get("warmup_steps", d.warmup_steps)?,
            schedule: f.choice("schedule", d.schedule, LrSchedule::parse)?,
            min_lr_ratio: f.get("min_lr_ratio", d.min_lr_ratio)?,
            grad_clip: f.get("grad_clip", d.grad_clip)?,
            batch_size: f.get("batch_size", d.batch_size)?,
            seq_len,
            max_steps: f.get("max_steps", d.max_steps)?,
            seed: f.get("seed", d.seed)?,
            init_std: f.get("init_std", d.init_std)?,
            prune_warmup: f.get("prune_warmup", d.prune_warmup)?,
            metric: f.choice("metric", d.metric, Metric::parse)?,
            accumulation,
            signed_saliency: f.get("signed_saliency", false)?,
            normalize_saliency: f.get("normalize_saliency", false)?,
            second_order: f.get("second_order", false)?,
            obs,
            space: Some(space),
        };
        train.validate()?;
        if train.seq_len > model.max_seq_len {
            return Err(Error::config("seq_len", "exceeds max_seq_len"));
        }
        if train.pruning() && train.target_params >= initial {
            return Err(Error::config(
                "target_params",
                format!("must be below the initial parameter count {initial}"),
            ));
        }
        let heldout_fraction = f.get("heldout_fraction", 0.02)?;
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::config("heldout_fraction", "must be in [0, 1)"));
        }
        Ok(Self {
            model,
            train,
            heldout_fraction,
            target_fraction,
        })
    }

    /// Re-derives the budget for a run that starts from a model with
    /// `params` parameters instead of the configured architecture.
    pub fn rebase_target(&mut self, params: usize) {
        if let Some(frac) = self.target_fraction {
            self.train.target_params = fraction_of(params, frac);
        }
    }

    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("cannot parse {v:?}")))?;
        }
        Ok(())
    }

    /// The effective configuration as `key = value` text that parses back
    /// to the same value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = t.space.clone().unwrap_or_else(|| PruneSpace::for_config(m));
        let mut lines = vec![
            format!("vocab_size = {}", m.vocab_size),
            format!("hidden = {}", m.hidden),
            format!("head_dim = {}", m.head_dim),
            format!("n_layers = {}", m.n_layers()),
            format!("n_heads = {}", m.heads[0]),
            format!("n_kv_heads = {}", m.kv_heads[0]),
            format!("ffn = {}", m.ffn[0]),
            format!("max_seq_len = {}", m.max_seq_len),
            format!("tied_embeddings = {}", m.tied_embeddings),
            format!("positional = {}", m.positional.as_str()),
            format!("norm_eps = {:?}", m.norm_eps),
            match self.target_fraction {
                Some(frac) => format!("target_fraction = {frac:?}"),
                None => format!("target_params = {}", t.target_params),
            },
            format!("ratio = {}:{}", t.prune_steps, t.gd_steps),
            format!("lr = {:?}", t.optimizer.lr),
            format!("beta1 = {:?}", t.optimizer.beta1),
            format!("beta2 = {:?}", t.optimizer.beta2),
            format!("adam_eps = {:?}", t.optimizer.eps),
            format!("weight_decay = {:?}", t.optimizer.weight_decay),
            format!("warmup_steps = {}", t.warmup_steps),
            format!("schedule = {}", t.schedule.as_str()),
            format!("min_lr_ratio = {:?}", t.min_lr_ratio),
            format!("grad_clip = {:?}", t.grad_clip),
            format!("batch_size = {}", t.batch_size),
            format!("seq_len = {}", t.seq_len),
            format!("max_steps = {}", t.max_steps),
            format!("seed = {}", t.seed),
            format!("init_std = {:?}", t.init_std),
            format!("prune_warmup = {}", t.prune_warmup),
            format!("metric = {}", t.metric.as_str()),
        ];
        match t.accumulation {
            Accumulation::Sum => lines.push("saliency_accumulation = sum".into()),
            Accumulation::Ema(b) => {
                lines.push("saliency_accumulation = ema".into());
                lines.push(format!("saliency_beta = {b:?}"));
            }
        }
        lines.extend([
            format!("signed_saliency = {}", t.signed_saliency),
            format!("normalize_saliency = {}", t.normalize_saliency),
            format!("second_order = {}", t.second_order),
            format!("hessian_window = {}", t.obs.window),
            format!("damping = {:?}", t.obs.damping),
            format!("band_mode = {}", t.obs.band_mode.as_str()),
            format!("min_heads = {}", s.min_heads),
            format!("min_ffn = {}", s.min_ffn),
            format!("min_hidden = {}", s.min_hidden),
            format!(
                "prune_types = {}",
                s.enabled.iter().map(|g| g.as_str()).collect::<Vec<_>>().join(",")
            ),
            format!("heldout_fraction = {:?}", self.heldout_fraction),
        ]);
        lines.join("\n") + "\n"
    }
}
