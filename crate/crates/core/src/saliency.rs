//! Taylor saliency on the output layer group (`W_o`, `W_down`) and selection
//! of the next mini-group to prune.
//!
//! Only output-layer-group matrices are scored. A head is scored by the
//! `d_h`-row band it owns in `W_o`, an FFN channel by its row of `W_down`,
//! and a stem channel by its column summed over every `W_o` and `W_down`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{build_group_for, GroupType, MiniGroup, PruneSpace, Selection};
use crate::model::{ModelConfig, Params, TransformerModel};
use crate::numerics::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `|w·g|`
    FirstOrder,
    /// `|w·g + ½·w²·g²|`, the empirical-Fisher diagonal standing in for the Hessian.
    FirstPlusDiagFisher,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FirstOrder => "first_order",
            Metric::FirstPlusDiagFisher => "first_plus_diag_fisher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first_order" => Some(Metric::FirstOrder),
            "first_plus_diag_fisher" => Some(Metric::FirstPlusDiagFisher),
            _ => None,
        }
    }

    #[inline]
    fn signed(self, w: f64, g: f64) -> f64 {
        match self {
            Metric::FirstOrder => w * g,
            Metric::FirstPlusDiagFisher => w * g + 0.5 * w * w * g * g,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Accumulation {
    Sum,
    Ema(f64),
}

/// Element-wise saliency of removing every entry of `w`.
pub fn elementwise_saliency<T: Scalar>(w: &Matrix<T>, g: &Matrix<T>, metric: Metric) -> Result<Matrix<f64>> {
    signed_or_abs(w, g, metric, false)
}

fn signed_or_abs<T: Scalar>(w: &Matrix<T>, g: &Matrix<T>, metric: Metric, signed: bool) -> Result<Matrix<f64>> {
    if w.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "elementwise_saliency",
            left: w.shape(),
            right: g.shape(),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let s = metric.signed(a.f64(), b.f64());
            if signed {
                s
            } else {
                s.abs()
            }
        })
        .collect();
    Matrix::from_vec(w.rows(), w.cols(), data)
}

/// Accumulated saliency of one block's output-layer-group matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSaliency {
    /// Shaped like `W_o` (`h·d_h × m`).
    pub wo: Matrix<f64>,
    /// Shaped like `W_down` (`n × m`).
    pub down: Matrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyState {
    pub layers: Vec<LayerSaliency>,
    pub metric: Metric,
    pub accumulation: Accumulation,
    /// Keep element signs and take the absolute value of each unit's sum
    /// instead of summing absolute element values.
    pub signed: bool,
    steps: usize,
}

impl SaliencyState {
    pub fn new(cfg: &ModelConfig, metric: Metric, accumulation: Accumulation) -> Self {
        let layers = (0..cfg.n_layers())
            .map(|l| LayerSaliency {
                wo: Matrix::zeros(cfg.heads[l] * cfg.head_dim, cfg.hidden),
                down: Matrix::zeros(cfg.ffn[l], cfg.hidden),
            })
            .collect();
        Self {
            layers,
            metric,
            accumulation,
            signed: false,
            steps: 0,
        }
    }

    pub fn steps_accumulated(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.wo.fill(0.0);
            l.down.fill(0.0);
        }
        self.steps = 0;
    }

    /// Folds one step's saliency (from the current weights and their
    /// gradients) into the state.
    pub fn accumulate<T: Scalar>(&mut self, model: &TransformerModel<T>, grads: &Params<T>) -> Result<()> {
        let p = model.params();
        if p.layers.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "saliency.accumulate",
                left: (self.layers.len(), 0),
                right: (p.layers.len(), 0),
            });
        }
        for (l, st) in self.layers.iter_mut().enumerate() {
            let (w, g) = (&p.layers[l], &grads.layers[l]);
            for (acc, wm, gm) in [(&mut st.wo, &w.wo, &g.wo), (&mut st.down, &w.w_down, &g.w_down)] {
                let s = signed_or_abs(wm, gm, self.metric, self.signed)?;
                if acc.shape() != s.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "saliency.accumulate",
                        left: acc.shape(),
                        right: s.shape(),
                    });
                }
                match self.accumulation {
                    Accumulation::Sum => acc.add_assign(&s)?,
                    Accumulation::Ema(beta) => {
                        acc.scale(beta);
                        acc.axpy(1.0 - beta, &s)?;
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Drops the saliency entries of a group about to be (or just) removed.
    pub fn apply_prune(&mut self, group: &MiniGroup, head_dim: usize) -> Result<()> {
        match group.selection() {
            Selection::Attn(heads) => {
                for (st, &j) in self.layers.iter_mut().zip(heads) {
                    st.wo.remove_rows(j * head_dim, head_dim)?;
                }
            }
            Selection::Ffn(chans) => {
                for (st, &i) in self.layers.iter_mut().zip(chans) {
                    st.down.remove_rows(i, 1)?;
                }
            }
            Selection::Stem(i) => {
                for st in &mut self.layers {
                    st.wo.remove_cols(*i, 1)?;
                    st.down.remove_cols(*i, 1)?;
                }
            }
        }
        Ok(())
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for (l, st) in self.layers.iter().enumerate() {
            let wo = (cfg.heads[l] * cfg.head_dim, cfg.hidden);
            let down = (cfg.ffn[l], cfg.hidden);
            if st.wo.shape() != wo || st.down.shape() != down {
                return Err(Error::ShapeMismatch {
                    op: "saliency.score",
                    left: st.wo.shape(),
                    right: wo,
                });
            }
        }
        if self.layers.len() != cfg.n_layers() {
            return Err(Error::StaleGroup);
        }
        Ok(())
    }

    fn unit(&self, x: f64) -> f64 {
        if self.signed {
            x.abs()
        } else {
            x
        }
    }

    /// Per-layer saliency of every head (sum of its `d_h` rows of `W_o`).
    pub fn head_scores(&self, head_dim: usize) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|st| {
                let rows = st.wo.row_sums();
                rows.chunks(head_dim)
                    .map(|band| self.unit(band.iter().fold(0.0, |a, &r| a + r)))
                    .collect()
            })
            .collect()
    }

    /// Per-layer saliency of every FFN channel (its row of `W_down`).
    pub fn channel_scores(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|st| st.down.row_sums().into_iter().map(|x| self.unit(x)).collect())
            .collect()
    }

    /// Saliency of every stem channel: column sums over all output matrices.
    pub fn stem_scores(&self) -> Vec<f64> {
        let width = self.layers.first().map_or(0, |st| st.wo.cols());
        let mut cols = vec![0.0; width];
        for st in &self.layers {
            for m in [&st.wo, &st.down] {
                for r in 0..m.rows() {
                    for (c, &x) in cols.iter_mut().zip(m.row(r)) {
                        *c += x;
                    }
                }
            }
        }
        cols.into_iter().map(|x| self.unit(x)).collect()
    }
}

/// Index of the first minimum.
fn argmin(xs: &[f64]) -> Option<(usize, f64)> {
    xs.iter().copied().enumerate().fold(None, |best, (i, x)| match best {
        Some((_, b)) if b <= x => best,
        _ => Some((i, x)),
    })
}

/// One candidate group and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub group: MiniGroup,
    /// Summed saliency of the group's selected units.
    pub saliency: f64,
    /// What is compared across types: `saliency`, or `saliency / size`
    /// when normalisation is on.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    pub s_attn: Option<f64>,
    pub s_ffn: Option<f64>,
    pub s_stem: Option<f64>,
    /// Eligible candidates in tie-break order.
    pub candidates: Vec<Candidate>,
    pub normalized: bool,
}

impl SaliencyReport {
    pub fn saliency(&self, kind: GroupType) -> Option<f64> {
        match kind {
            GroupType::Attn => self.s_attn,
            GroupType::Ffn => self.s_ffn,
            GroupType::Stem => self.s_stem,
        }
    }

    pub fn candidate(&self, kind: GroupType) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.group.group_type() == kind)
    }
}

/// Picks the minimum-saliency unit per layer for heads and FFN channels and
/// the globally minimal stem channel, building the coupled group for each
/// eligible type.
pub fn score_and_select(
    state: &SaliencyState,
    cfg: &ModelConfig,
    space: &PruneSpace,
    normalize: bool,
) -> Result<SaliencyReport> {
    if state.steps_accumulated() == 0 {
        return Err(Error::EmptyInput("saliency state has no accumulated steps"));
    }
    state.check_shapes(cfg)?;

    let per_layer = |scores: Vec<Vec<f64>>| -> (Vec<usize>, f64) {
        let mut idx = Vec::with_capacity(scores.len());
        let mut total = 0.0;
        for s in &scores {
            let (i, v) = argmin(s).expect("non-empty layer");
            idx.push(i);
            total += v;
        }
        (idx, total)
    };
    let (heads, s_attn) = per_layer(state.head_scores(cfg.head_dim));
    let (chans, s_ffn) = per_layer(state.channel_scores());
    let (stem_i, s_stem) = argmin(&state.stem_scores()).expect("non-empty stem");

    let mut candidates = Vec::new();
    let mut sal = [None; 3];
    for (k, (kind, selection, s)) in [
        (GroupType::Attn, Selection::Attn(heads), s_attn),
        (GroupType::Ffn, Selection::Ffn(chans), s_ffn),
        (GroupType::Stem, Selection::Stem(stem_i), s_stem),
    ]
    .into_iter()
    .enumerate()
    {
        sal[k] = Some(s);
        if !space.eligible(cfg, kind) {
            continue;
        }
        let group = build_group_for(cfg, space, selection)?;
        let score = if normalize { s / group.size() as f64 } else { s };
        candidates.push(Candidate {
            group,
            saliency: s,
            score,
        });
    }
    if candidates.is_empty() {
        return Err(Error::NoEligibleCandidate);
    }
    Ok(SaliencyReport {
        s_attn: sal[0],
        s_ffn: sal[1],
        s_stem: sal[2],
        candidates,
        normalized: normalize,
    })
}

/// Type with the smallest score; ties go to the earlier type.
pub fn select_prune_type(report: &SaliencyReport) -> GroupType {
    select_candidate(report).group.group_type()
}

pub fn select_candidate(report: &SaliencyReport) -> &Candidate {
    report
        .candidates
        .iter()
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if b.score <= c.score => Some(b),
            _ => Some(c),
        })
        .expect("report has at least one candidate")
}
