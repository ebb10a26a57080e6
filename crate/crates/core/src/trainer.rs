//! The pruning-aware pretraining loop: blocks of gradient-descent steps
//! alternating with blocks of prune steps until the parameter budget is
//! met, then plain pretraining for the rest of the step budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{apply_prune, GroupType, MiniGroup, PruneSpace, Selection};
use crate::model::{Params, TensorId, TransformerModel};
use crate::numerics::{Rng, Scalar};
use crate::saliency::{score_and_select, select_candidate, Accumulation, Metric, SaliencyReport, SaliencyState};
use crate::second_order::{compensate_group, HessianState, SecondOrderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the peak to `min_lr_ratio · lr` at `max_steps`.
    Cosine,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Pruning stops at the first step where the parameter count is at or
    /// below this.
    pub target_params: usize,
    /// Prune steps per macro-iteration; 0 disables pruning.
    pub prune_steps: usize,
    /// Gradient-descent steps per macro-iteration.
    pub gd_steps: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Sequences per batch.
    pub batch_size: usize,
    /// Tokens per training window (the model predicts `seq_len` targets).
    pub seq_len: usize,
    /// Gradient-descent steps in the whole run. If pruning has not reached
    /// the target by then, macro-iterations continue until it does.
    pub max_steps: usize,
    pub seed: u64,
    pub init_std: f64,
    /// No pruning before this many gradient-descent steps.
    pub prune_warmup: usize,
    pub metric: Metric,
    pub accumulation: Accumulation,
    pub signed_saliency: bool,
    /// Compare types by saliency per removed parameter.
    pub normalize_saliency: bool,
    pub second_order: bool,
    pub obs: SecondOrderConfig,
    pub space: Option<PruneSpace>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_params: 0,
            prune_steps: 1,
            gd_steps: 1,
            optimizer: AdamWConfig::default(),
            warmup_steps: 100,
            schedule: LrSchedule::Cosine,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            seq_len: 64,
            max_steps: 1000,
            seed: 0,
            init_std: 0.02,
            prune_warmup: 50,
            metric: Metric::FirstOrder,
            accumulation: Accumulation::Ema(0.9),
            signed_saliency: false,
            normalize_saliency: false,
            second_order: false,
            obs: SecondOrderConfig::default(),
            space: None,
        }
    }
}

impl TrainConfig {
    pub fn pruning(&self) -> bool {
        self.prune_steps > 0
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be at least 1");
        }
        if self.pruning() && self.gd_steps == 0 {
            return bad("ratio", "gradient steps per macro-iteration must be at least 1 when pruning");
        }
        if !(self.optimizer.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) {
            return bad("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("beta2", "must be in [0, 1)");
        }
        if let Accumulation::Ema(b) = self.accumulation {
            if !(0.0..1.0).contains(&b) {
                return bad("saliency_beta", "must be in [0, 1)");
            }
        }
        if self.obs.window == 0 {
            return bad("hessian_window", "must be at least 1");
        }
        Ok(())
    }

    /// Learning rate for gradient step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.optimizer.lr;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                let floor = peak * self.min_lr_ratio;
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// One AdamW update on a flat tensor: decoupled weight decay, bias-corrected
/// moments, step count `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamWConfig,
    lr: f64,
    decay: bool,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..w.len() {
        let gi = g[i].f64();
        let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
        let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + wd * w[i].f64();
        w[i] = T::of(w[i].f64() - lr * step);
    }
}

/// Weight decay applies to projection matrices and the untied LM head, not
/// to the embedding or norm gains.
pub fn decays(id: TensorId) -> bool {
    !id.is_norm() && id != TensorId::Embedding
}

/// AdamW first and second moments, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T = f32> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, cfg: &AdamWConfig, lr: f64) -> Result<()> {
        self.t += 1;
        for id in params.ids() {
            let (w, g) = (params.get_mut(id), grads.get(id));
            let (m, v) = (self.m.get_mut(id), self.v.get_mut(id));
            let (Some(w), Some(g), Some(m), Some(v)) = (w, g, m, v) else {
                return Err(Error::StaleGroup);
            };
            if w.shape() != g.shape() || w.shape() != m.shape() || w.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: w.shape(),
                    right: g.shape(),
                });
            }
            adamw_update(w.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, cfg, lr, decays(id));
        }
        Ok(())
    }

    pub fn apply_prune(&mut self, group: &MiniGroup) -> Result<()> {
        group.remove_from(&mut self.m)?;
        group.remove_from(&mut self.v)
    }
}

/// Draws uniformly placed windows of `seq_len + 1` tokens from a token
/// stream (the training split only).
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    data: &'a [u8],
    seq_len: usize,
    batch_size: usize,
    rng: Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a [u8], seq_len: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        let need = seq_len + 1;
        if data.len() < need {
            return Err(Error::CorpusTooSmall { have: data.len(), need });
        }
        Ok(Self {
            data,
            seq_len,
            batch_size,
            rng,
        })
    }

    /// Byte range of every window in the next batch, without advancing.
    pub fn peek_offsets(&self) -> Vec<usize> {
        self.clone().offsets()
    }

    fn offsets(&mut self) -> Vec<usize> {
        let starts = self.data.len() - self.seq_len;
        (0..self.batch_size).map(|_| self.rng.below(starts)).collect()
    }

    pub fn next_batch(&mut self) -> Vec<Vec<u32>> {
        self.offsets()
            .into_iter()
            .map(|s| self.data[s..s + self.seq_len + 1].iter().map(|&b| b as u32).collect())
            .collect()
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: Rng) {
        self.rng = rng;
    }

    pub fn data_len(&self) -> usize {
        self.data.len()
    }
}

/// One prune event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Gradient-descent steps completed before this prune.
    pub step: usize,
    pub tokens: u64,
    pub s_attn: Option<f64>,
    pub s_ffn: Option<f64>,
    pub s_stem: Option<f64>,
    pub chosen: GroupType,
    /// Per-layer head or channel indices for attn/ffn, the single stem index
    /// for stem.
    pub selection: Vec<usize>,
    /// Post-prune dimensions.
    pub hidden: usize,
    pub heads: Vec<usize>,
    pub ffn: Vec<usize>,
    pub params: usize,
}

impl TraceRow {
    pub fn mean_heads(&self) -> f64 {
        mean(&self.heads)
    }

    pub fn mean_ffn(&self) -> f64 {
        mean(&self.ffn)
    }
}

fn mean(xs: &[usize]) -> f64 {
    xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub rows: Vec<TraceRow>,
}

impl PruneTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parameter counts strictly decrease and dims are self-consistent.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].params >= w[0].params {
                return Err(Error::Trace(format!(
                    "parameter count not strictly decreasing at step {}: {} then {}",
                    w[1].step, w[0].params, w[1].params
                )));
            }
        }
        for r in &self.rows {
            if r.heads.len() != r.ffn.len() {
                return Err(Error::Trace(format!("layer count mismatch at step {}", r.step)));
            }
            let want = if r.chosen == GroupType::Stem { 1 } else { r.heads.len() };
            if r.selection.len() != want {
                return Err(Error::Trace(format!("selection length mismatch at step {}", r.step)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub tokens: u64,
    pub loss: f64,
    pub lr: f64,
    pub params: usize,
}

/// Training state: model, optimizer, saliency and Hessian accumulators.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: TransformerModel<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamWState<f32>,
    pub saliency: SaliencyState,
    pub hessian: HessianState,
    pub space: PruneSpace,
    pub step: usize,
    pub tokens: u64,
    pub trace: PruneTrace,
    pub metrics: Vec<StepMetrics>,
    /// Gradient steps and tokens at which the target was first met.
    pub reached_target: Option<(usize, u64)>,
}

impl Trainer {
    pub fn new(model: TransformerModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mcfg = model.config();
        if config.pruning() && config.target_params >= model.parameter_count() {
            return Err(Error::config(
                "target_params",
                format!(
                    "must be below the initial parameter count {}",
                    model.parameter_count()
                ),
            ));
        }
        let mut saliency = SaliencyState::new(mcfg, config.metric, config.accumulation);
        saliency.signed = config.signed_saliency;
        let space = config.space.clone().unwrap_or_else(|| PruneSpace::for_config(mcfg));
        Ok(Self {
            optimizer: AdamWState::new(model.params()),
            saliency,
            hessian: HessianState::new(config.obs.window),
            space,
            step: 0,
            tokens: 0,
            trace: PruneTrace::default(),
            metrics: Vec::new(),
            reached_target: None,
            model,
            config,
        })
    }

    pub fn at_target(&self) -> bool {
        self.model.parameter_count() <= self.config.target_params
    }

    fn pruning_active(&self) -> bool {
        self.config.pruning() && !self.at_target()
    }

    /// One forward/backward/AdamW update. Saliency (and, with compensation
    /// on, the Hessian window) is accumulated from this step while pruning
    /// is still active.
    pub fn gd_step<S: AsRef<[u32]>>(&mut self, batch: &[S]) -> Result<f64> {
        let (loss, tape) = self.model.forward(batch)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        let mut grads = self.model.backward(&tape)?;
        if self.pruning_active() {
            self.saliency.accumulate(&self.model, &grads)?;
            if self.config.second_order {
                self.hessian.accumulate(&tape)?;
            }
        }
        drop(tape);
        if self.config.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|(_, m)| m.data().iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > self.config.grad_clip {
                grads.scale((self.config.grad_clip / norm) as f32);
            }
        }
        let lr = self.config.lr_at(self.step);
        let cfg = self.config.optimizer;
        self.optimizer.step(self.model.params_mut(), &grads, &cfg, lr)?;
        self.step += 1;
        self.tokens += batch.iter().map(|s| s.as_ref().len().saturating_sub(1) as u64).sum::<u64>();
        self.metrics.push(StepMetrics {
            step: self.step,
            tokens: self.tokens,
            loss,
            lr,
            params: self.model.parameter_count(),
        });
        Ok(loss)
    }

    /// Current saliency report for the model as it stands.
    pub fn report(&self) -> Result<SaliencyReport> {
        score_and_select(&self.saliency, self.model.config(), &self.space, self.config.normalize_saliency)
    }

    /// Selects, (optionally) compensates and removes one mini-group.
    pub fn prune_step(&mut self) -> Result<TraceRow> {
        let report = self.report()?;
        let group = select_candidate(&report).group.clone();
        let before = self.model.parameter_count();
        if self.config.second_order {
            compensate_group(&mut self.model, &self.hessian, &group, &self.config.obs)?;
        }
        let head_dim = self.model.config().head_dim;
        apply_prune(&mut self.model, &group)?;
        self.optimizer.apply_prune(&group)?;
        self.saliency.apply_prune(&group, head_dim)?;
        self.hessian.apply_prune(&group, head_dim)?;
        debug_assert_eq!(before - self.model.parameter_count(), group.size());
        let row = trace_row(&self.model, &report, &group, self.step, self.tokens);
        self.trace.rows.push(row.clone());
        if self.at_target() && self.reached_target.is_none() {
            self.reached_target = Some((self.step, self.tokens));
        }
        Ok(row)
    }

    /// Runs the schedule to completion, reporting every step, every prune
    /// and the moment the budget is met to `observe`.
    pub fn run(&mut self, sampler: &mut BatchSampler<'_>, mut observe: impl FnMut(Event<'_>)) -> Result<()> {
        let cfg = self.config.clone();
        let mut gd = |t: &mut Trainer, observe: &mut dyn FnMut(Event<'_>)| -> Result<()> {
            let batch = sampler.next_batch();
            t.gd_step(&batch)?;
            observe(Event::Step(t.metrics.last().expect("step recorded")));
            Ok(())
        };
        if cfg.pruning() {
            while self.step < cfg.prune_warmup {
                gd(self, &mut observe)?;
            }
            'prune: while !self.at_target() {
                for _ in 0..cfg.gd_steps {
                    gd(self, &mut observe)?;
                }
                for _ in 0..cfg.prune_steps {
                    let row = self.prune_step()?;
                    observe(Event::Prune(&row));
                    if self.at_target() {
                        observe(Event::Target(self));
                        break 'prune;
                    }
                }
            }
        }
        while self.step < cfg.max_steps {
            gd(self, &mut observe)?;
        }
        Ok(())
    }
}

/// Progress notifications from [`Trainer::run`].
pub enum Event<'a> {
    Step(&'a StepMetrics),
    Prune(&'a TraceRow),
    /// Right after the prune that meets the budget.
    Target(&'a Trainer),
}

fn trace_row(
    model: &TransformerModel<f32>,
    report: &SaliencyReport,
    group: &MiniGroup,
    step: usize,
    tokens: u64,
) -> TraceRow {
    let cfg = model.config();
    let selection = match group.selection() {
        Selection::Attn(v) | Selection::Ffn(v) => v.clone(),
        Selection::Stem(i) => vec![*i],
    };
    TraceRow {
        step,
        tokens,
        s_attn: report.s_attn,
        s_ffn: report.s_ffn,
        s_stem: report.s_stem,
        chosen: group.group_type(),
        selection,
        hidden: cfg.hidden,
        heads: cfg.heads.clone(),
        ffn: cfg.ffn.clone(),
        params: model.parameter_count(),
    }
}

/// Post-training baseline: accumulates saliency (summed, no weight updates)
/// over `calib_batches` batches, then removes groups greedily, re-slicing
/// the same saliency after every removal, until the budget is met.
#[allow(clippy::too_many_arguments)]
pub fn oneshot_prune(
    model: &mut TransformerModel<f32>,
    sampler: &mut BatchSampler<'_>,
    target_params: usize,
    calib_batches: usize,
    metric: Metric,
    second_order: Option<&SecondOrderConfig>,
    space: &PruneSpace,
) -> Result<PruneTrace> {
    if calib_batches == 0 {
        return Err(Error::config("calib_batches", "must be at least 1"));
    }
    let mut saliency = SaliencyState::new(model.config(), metric, Accumulation::Sum);
    let mut hessian = HessianState::new(second_order.map_or(1, |c| c.window.max(calib_batches)));
    for _ in 0..calib_batches {
        let batch = sampler.next_batch();
        let (loss, tape) = model.forward(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, loss: loss as f64 });
        }
        let grads = model.backward(&tape)?;
        saliency.accumulate(model, &grads)?;
        if second_order.is_some() {
            hessian.accumulate(&tape)?;
        }
    }
    let mut trace = PruneTrace::default();
    while model.parameter_count() > target_params {
        let report = score_and_select(&saliency, model.config(), space, false)?;
        let group = select_candidate(&report).group.clone();
        if let Some(cfg) = second_order {
            compensate_group(model, &hessian, &group, cfg)?;
        }
        let head_dim = model.config().head_dim;
        apply_prune(model, &group)?;
        saliency.apply_prune(&group, head_dim)?;
        hessian.apply_prune(&group, head_dim)?;
        trace.rows.push(trace_row(model, &report, &group, 0, 0));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn adamw_single_step_by_hand() {
        // f(w) = ½ w², g = w; first step: m̂ = g, v̂ = g², update = lr·(sign(g) + wd·w)
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 0.0,
            weight_decay: 0.5,
        };
        let mut w = [2.0f64, -3.0];
        let g = w;
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_update(&mut w, &g, &mut m, &mut v, 1, &cfg, cfg.lr, true);
        assert!((w[0] - (2.0 - 0.1 * (1.0 + 1.0))).abs() < 1e-15);
        assert!((w[1] - (-3.0 - 0.1 * (-1.0 - 1.5))).abs() < 1e-15);
        assert!((m[0] - 0.2).abs() < 1e-15 && (v[1] - 0.45).abs() < 1e-12);

        // second step: m = 0.9·0.2 + 0.1·g₂, v = 0.95·0.2 + 0.05·g₂²
        let g2 = [w[0], w[1]];
        let w_before = w;
        adamw_update(&mut w, &g2, &mut m, &mut v, 2, &cfg, cfg.lr, false);
        let m2 = 0.9 * 0.2 + 0.1 * g2[0];
        let v2 = 0.95 * 0.2 + 0.05 * g2[0] * g2[0];
        let want = w_before[0] - 0.1 * (m2 / 0.19) / (v2 / (1.0 - 0.95f64.powi(2))).sqrt();
        assert!((w[0] - want).abs() < 1e-14);
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            max_steps: 110,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 3e-5).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 3e-4).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 3e-4).abs() < 1e-12);
        assert!((cfg.lr_at(110) - 3e-5).abs() < 1e-12);
        assert!((cfg.lr_at(500) - 3e-5).abs() < 1e-12);
        let c = TrainConfig {
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(c.lr_at(1000), 3e-4);
    }

    fn toy(seed: u64) -> (TransformerModel<f32>, Vec<u8>) {
        let cfg = ModelConfig::uniform(257, 16, 2, 2, 2, 4, 16, 16).unwrap();
        let mut rng = Rng::new(seed);
        let model = TransformerModel::init(cfg, 0.02, &mut rng).unwrap();
        let data: Vec<u8> = b"the quick brown fox jumps over the lazy dog. ".repeat(40);
        (model, data)
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let (model, data) = toy(1);
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
            prune_steps: 0,
            seq_len: 8,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let before = model.params().clone();
        let mut t = Trainer::new(model, cfg).unwrap();
        let mut s = BatchSampler::new(&data, 8, 2, Rng::new(0)).unwrap();
        let loss = t.gd_step(&s.next_batch()).unwrap();
        assert!(loss > 0.0);
        assert_eq!(t.model.params(), &before);
    }

    #[test]
    fn pruning_reaches_budget() {
        let (model, data) = toy(2);
        let start = model.parameter_count();
        let cfg = TrainConfig {
            target_params: start * 3 / 4,
            seq_len: 8,
            batch_size: 2,
            max_steps: 20,
            prune_warmup: 5,
            warmup_steps: 5,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg.clone()).unwrap();
        let mut s = BatchSampler::new(&data, 8, 2, Rng::new(0)).unwrap();
        let mut seen = 0;
        t.run(&mut s, |e| {
            if let Event::Target(tr) = e {
                seen = tr.model.parameter_count();
            }
        })
        .unwrap();
        let end = t.model.parameter_count();
        assert!(end <= cfg.target_params);
        assert_eq!(seen, end);
        let last = t.trace.rows.last().unwrap();
        let prev = t.trace.rows.iter().rev().nth(1).map_or(start, |r| r.params);
        assert!(prev > cfg.target_params);
        assert_eq!(last.params, end);
        assert!(t.step >= 20);
        t.trace.validate().unwrap();
        t.model.check_invariants().unwrap();
    }

    #[test]
    fn sampler_windows_stay_in_range() {
        let data: Vec<u8> = (0..50).collect();
        let mut s = BatchSampler::new(&data, 9, 64, Rng::new(3)).unwrap();
        for seq in s.next_batch() {
            assert_eq!(seq.len(), 10);
            for w in seq.windows(2) {
                assert_eq!(w[1], w[0] + 1);
            }
        }
        assert!(matches!(
            BatchSampler::new(&data[..5], 9, 1, Rng::new(0)),
            Err(Error::CorpusTooSmall { .. })
        ));
    }
}
