//! Optimal-brain-surgeon compensation for removed rows of `W_o` and
//! `W_down`.
//!
//! Each output matrix `W` (rows indexed by its input dimension) sees inputs
//! `X` (tokens × rows). The layer-wise Hessian of `‖X·W − X·W'‖²` is
//! proportional to `XᵀX`; it is estimated over a sliding window of recent
//! batches. Removing row `p` and re-fitting the remaining rows gives
//! `δW[:, c] = −(W[p, c] / u_p)·u` with `u = (H + λI)⁻¹ e_p`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{MiniGroup, Selection};
use crate::model::{ForwardTape, ModelConfig, TransformerModel};
use crate::numerics::{cholesky, cholesky_solve, Matrix, Scalar};

/// How an attention head's `d_h` rows are removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// One row at a time, each against the same (unrestricted) Hessian.
    Sequential,
    /// All rows jointly; identical to sequential removal with the Hessian
    /// restricted to the surviving rows after every step.
    Exact,
}

impl BandMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BandMode::Sequential => "sequential",
            BandMode::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" => Some(BandMode::Sequential),
            "exact" => Some(BandMode::Exact),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderConfig {
    /// Number of most recent batches the Hessian is estimated from.
    pub window: usize,
    /// `λ = damping · mean(diag H)`.
    pub damping: f64,
    /// How many times `λ` may be doubled after a failed factorisation.
    pub max_damping_doublings: usize,
    pub band_mode: BandMode,
}

impl Default for SecondOrderConfig {
    fn default() -> Self {
        Self {
            window: 4,
            damping: 1e-2,
            max_damping_doublings: 30,
            band_mode: BandMode::Sequential,
        }
    }
}

/// Below this `|u_p|` the removal direction is treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
struct BatchGram {
    tokens: usize,
    /// Per layer: Gram of the attention context, then of the FFN activation.
    layers: Vec<(Matrix<f64>, Matrix<f64>)>,
}

/// Sliding-window Hessian estimates for every `W_o` and `W_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianState {
    window: usize,
    batches: VecDeque<BatchGram>,
}

fn gram<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<f64>> {
    let x = x.cast::<f64>();
    x.t_matmul(&x)
}

fn remove_square(h: &mut Matrix<f64>, start: usize, len: usize) -> Result<()> {
    h.remove_rows(start, len)?;
    h.remove_cols(start, len)
}

impl HessianState {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            batches: VecDeque::new(),
        }
    }

    pub fn batches(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn clear(&mut self) {
        self.batches.clear();
    }

    /// Adds the inputs seen by every output matrix in one forward pass,
    /// dropping the oldest batch once the window is full.
    pub fn accumulate<T: Scalar>(&mut self, tape: &ForwardTape<T>) -> Result<()> {
        let layers = tape
            .layers()
            .iter()
            .map(|l| Ok((gram(l.attn_context())?, gram(l.ffn_activation())?)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = self.batches.back() {
            let same = prev.layers.len() == layers.len()
                && prev
                    .layers
                    .iter()
                    .zip(&layers)
                    .all(|(a, b)| a.0.shape() == b.0.shape() && a.1.shape() == b.1.shape());
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "hessian.accumulate",
                    left: prev.layers.first().map_or((0, 0), |l| l.0.shape()),
                    right: layers.first().map_or((0, 0), |l| l.0.shape()),
                });
            }
        }
        self.batches.push_back(BatchGram {
            tokens: tape.token_count(),
            layers,
        });
        while self.batches.len() > self.window {
            self.batches.pop_front();
        }
        Ok(())
    }

    fn mean(&self, layer: usize, pick: impl Fn(&(Matrix<f64>, Matrix<f64>)) -> &Matrix<f64>) -> Result<Matrix<f64>> {
        let first = self
            .batches
            .front()
            .ok_or(Error::EmptyInput("no batches in the Hessian window"))?;
        let entry = first.layers.get(layer).ok_or(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            len: first.layers.len(),
        })?;
        let mut h = Matrix::zeros(pick(entry).rows(), pick(entry).cols());
        let mut tokens = 0;
        for b in &self.batches {
            h.add_assign(pick(&b.layers[layer]))?;
            tokens += b.tokens;
        }
        h.scale(1.0 / tokens.max(1) as f64);
        Ok(h)
    }

    /// Mean `XᵀX` of the attention context feeding `W_o` in `layer`.
    pub fn attn(&self, layer: usize) -> Result<Matrix<f64>> {
        self.mean(layer, |l| &l.0)
    }

    /// Mean `XᵀX` of the FFN activation feeding `W_down` in `layer`.
    pub fn ffn(&self, layer: usize) -> Result<Matrix<f64>> {
        self.mean(layer, |l| &l.1)
    }

    /// Drops the rows and columns of a removed group from every stored batch.
    pub fn apply_prune(&mut self, group: &MiniGroup, head_dim: usize) -> Result<()> {
        for b in &mut self.batches {
            match group.selection() {
                Selection::Attn(heads) => {
                    for (l, &j) in b.layers.iter_mut().zip(heads) {
                        remove_square(&mut l.0, j * head_dim, head_dim)?;
                    }
                }
                Selection::Ffn(chans) => {
                    for (l, &i) in b.layers.iter_mut().zip(chans) {
                        remove_square(&mut l.1, i, 1)?;
                    }
                }
                // Stem channels are the outputs of W_o and W_down, not inputs.
                Selection::Stem(_) => {}
            }
        }
        Ok(())
    }
}

/// Cholesky factor of `H + λI`, doubling `λ` until the factorisation
/// succeeds. Returns the factor and the `λ` used.
pub fn damped_factor(h: &Matrix<f64>, cfg: &SecondOrderConfig) -> Result<(Matrix<f64>, f64)> {
    let n = h.rows();
    let mean_diag = (0..n).map(|i| h[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let mut lambda = cfg.damping * mean_diag;
    if !(lambda > 0.0) {
        lambda = cfg.damping.max(f64::MIN_POSITIVE);
    }
    let mut last = None;
    for _ in 0..=cfg.max_damping_doublings {
        let mut a = h.clone();
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        match cholesky(&a) {
            Ok(l) => return Ok((l, lambda)),
            Err(e) => last = Some(e),
        }
        lambda *= 2.0;
    }
    Err(last.unwrap_or(Error::EmptyInput("empty Hessian")))
}

fn unit_solve(l: &Matrix<f64>, p: usize) -> Result<Vec<f64>> {
    let mut e = vec![0.0; l.rows()];
    e[p] = 1.0;
    cholesky_solve(l, &e)
}

/// Removes row `p` of `w` and compensates the other rows, given the factor
/// of the damped Hessian. Row `p` ends exactly zero.
pub fn obs_row_update(w: &mut Matrix<f64>, factor: &Matrix<f64>, p: usize) -> Result<()> {
    if factor.rows() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "obs_row_update",
            left: factor.shape(),
            right: w.shape(),
        });
    }
    if p >= w.rows() {
        return Err(Error::IndexOutOfRange {
            what: "row",
            index: p,
            len: w.rows(),
        });
    }
    let u = unit_solve(factor, p)?;
    if u[p].abs() < SINGULAR_PIVOT {
        return Err(Error::NumericallySingular { value: u[p] });
    }
    let coef: Vec<f64> = w.row(p).iter().map(|&x| -x / u[p]).collect();
    for (r, &ur) in u.iter().enumerate() {
        for (x, &c) in w.row_mut(r).iter_mut().zip(&coef) {
            *x += c * ur;
        }
    }
    w.row_mut(p).fill(0.0);
    Ok(())
}

/// Removes rows `start..start + len` jointly:
/// `δW = −U·(U_BB)⁻¹·W_B` where `U` holds the band's columns of `(H + λI)⁻¹`.
pub fn obs_block_update(w: &mut Matrix<f64>, factor: &Matrix<f64>, start: usize, len: usize) -> Result<()> {
    if factor.rows() != w.rows() || start + len > w.rows() {
        return Err(Error::ShapeMismatch {
            op: "obs_block_update",
            left: factor.shape(),
            right: w.shape(),
        });
    }
    let cols: Vec<Vec<f64>> = (start..start + len)
        .map(|p| unit_solve(factor, p))
        .collect::<Result<_>>()?;
    let ubb = Matrix::from_fn(len, len, |a, b| cols[b][start + a]);
    for a in 0..len {
        if ubb[(a, a)].abs() < SINGULAR_PIVOT {
            return Err(Error::NumericallySingular { value: ubb[(a, a)] });
        }
    }
    let ubb_factor = cholesky(&ubb)?;
    let mut coef = Matrix::zeros(len, w.cols());
    for c in 0..w.cols() {
        let wb: Vec<f64> = (start..start + len).map(|r| w[(r, c)]).collect();
        let z = cholesky_solve(&ubb_factor, &wb)?;
        for (a, v) in z.into_iter().enumerate() {
            coef[(a, c)] = v;
        }
    }
    for r in 0..w.rows() {
        for (a, col) in cols.iter().enumerate() {
            let ur = col[r];
            if ur == 0.0 {
                continue;
            }
            for c in 0..w.cols() {
                let d = coef[(a, c)];
                w[(r, c)] -= ur * d;
            }
        }
    }
    for r in start..start + len {
        w.row_mut(r).fill(0.0);
    }
    Ok(())
}

/// Removes rows of `w` for one layer and writes the compensated matrix back.
fn compensate_rows<T: Scalar>(
    target: &mut Matrix<T>,
    h: &Matrix<f64>,
    start: usize,
    len: usize,
    cfg: &SecondOrderConfig,
) -> Result<f64> {
    let mut w = target.cast::<f64>();
    let (factor, lambda) = damped_factor(h, cfg)?;
    if len == 1 || cfg.band_mode == BandMode::Sequential {
        for p in start..start + len {
            obs_row_update(&mut w, &factor, p)?;
        }
    } else {
        obs_block_update(&mut w, &factor, start, len)?;
    }
    if !w.is_finite() {
        return Err(Error::NumericallySingular { value: f64::NAN });
    }
    for (dst, &src) in target.data_mut().iter_mut().zip(w.data()) {
        *dst = T::of(src);
    }
    Ok(lambda)
}

/// Compensates the surviving weights for a group that is about to be
/// removed. Returns the damping used per layer; stem groups are left
/// untouched and return an empty list.
///
/// On error the model is unchanged.
pub fn compensate_group<T: Scalar>(
    model: &mut TransformerModel<T>,
    hessians: &HessianState,
    group: &MiniGroup,
    cfg: &SecondOrderConfig,
) -> Result<Vec<f64>> {
    let mcfg: ModelConfig = model.config().clone();
    let d = mcfg.head_dim;
    let plan: Vec<(usize, usize, usize, bool)> = match group.selection() {
        Selection::Attn(heads) => heads.iter().enumerate().map(|(l, &j)| (l, j * d, d, true)).collect(),
        Selection::Ffn(chans) => chans.iter().enumerate().map(|(l, &i)| (l, i, 1, false)).collect(),
        Selection::Stem(_) => return Ok(Vec::new()),
    };
    if plan.len() != mcfg.n_layers() {
        return Err(Error::StaleGroup);
    }
    let mut updated = model.params().clone();
    let mut lambdas = Vec::with_capacity(plan.len());
    for (l, start, len, attn) in plan {
        let (h, target) = if attn {
            (hessians.attn(l)?, &mut updated.layers[l].wo)
        } else {
            (hessians.ffn(l)?, &mut updated.layers[l].w_down)
        };
        if h.rows() != target.rows() {
            return Err(Error::ShapeMismatch {
                op: "compensate_group",
                left: h.shape(),
                right: target.shape(),
            });
        }
        lambdas.push(compensate_rows(target, &h, start, len, cfg)?);
    }
    *model.params_mut() = updated;
    Ok(lambdas)
}

/// Least-squares reconstruction error `‖X·W − X·W'‖²_F / tokens`, computed
/// from the mean Gram `H = XᵀX / tokens`.
pub fn reconstruction_error(h: &Matrix<f64>, w: &Matrix<f64>, w_new: &Matrix<f64>) -> Result<f64> {
    let mut diff = w_new.clone();
    diff.axpy(-1.0, w)?;
    let hd = h.matmul(&diff)?;
    Ok(hd.data().iter().zip(diff.data()).map(|(a, b)| a * b).sum())
}
