//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls the code paths it is used to check: the reference
//! forward is a straight-line re-implementation, the saliency oracle
//! enumerates every candidate group, and the least-squares oracle solves the
//! normal equations densely by Gaussian elimination.
#![allow(dead_code)]

pub mod criteria;

use prunelab::model::{ModelConfig, Params, TensorId, TransformerModel};
use prunelab::numerics::{Matrix, Rng};

/// Relative error with an absolute floor, so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn random_tokens(len: usize, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

/// Random small model; GQA with probability one half when heads allow it.
pub fn random_model(rng: &mut Rng, max_layers: usize, max_hidden: usize) -> TransformerModel<f64> {
    let head_dim = [2, 4][rng.below(2)];
    let layers = 1 + rng.below(max_layers);
    let heads = 1 + rng.below(4);
    let kv = if heads % 2 == 0 && rng.below(2) == 0 { heads / 2 } else { heads };
    let hidden = (2 * head_dim + 2 + rng.below(max_hidden - 2 * head_dim - 1)).min(max_hidden);
    let ffn = 2 + rng.below(10);
    let vocab = 5 + rng.below(12);
    let mut cfg = ModelConfig::uniform(vocab, hidden, layers, heads, kv, head_dim, ffn, 16).unwrap();
    cfg.tied_embeddings = rng.below(4) == 0;
    TransformerModel::init(cfg, 0.4, rng).unwrap()
}

/// Which parts of a model are switched off. Masked heads, FFN channels and
/// stem channels behave exactly as if they had been physically removed.
#[derive(Clone, Debug)]
pub struct Mask {
    pub heads: Vec<Vec<bool>>,
    pub ffn: Vec<Vec<bool>>,
    pub stem: Vec<bool>,
}

impl Mask {
    pub fn all(cfg: &ModelConfig) -> Self {
        Self {
            heads: cfg.heads.iter().map(|&h| vec![true; h]).collect(),
            ffn: cfg.ffn.iter().map(|&n| vec![true; n]).collect(),
            stem: vec![true; cfg.hidden],
        }
    }
}

fn sinusoid(pos: usize, channel: usize, base: usize) -> f64 {
    let pair = (channel / 2 * 2) as f64;
    let angle = pos as f64 * 10_000f64.powf(-pair / base as f64);
    if channel % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn rms(x: &[f64], keep: &[bool], gain: &[f64], eps: f64) -> Vec<f64> {
    let active = keep.iter().filter(|&&k| k).count() as f64;
    let ms: f64 = x.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v * v).sum::<f64>() / active;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter()
        .zip(gain)
        .zip(keep)
        .map(|((v, g), &k)| if k { v * s * g } else { 0.0 })
        .collect()
}

/// Straight-line reference forward returning logits (one row per predicted
/// position) and the mean cross-entropy. Masked units contribute nothing and
/// masked stem channels are excluded from every RMS statistic.
pub fn reference_forward(
    cfg: &ModelConfig,
    p: &Params<f64>,
    mask: &Mask,
    seqs: &[Vec<u32>],
) -> (Vec<Vec<f64>>, f64) {
    let m = cfg.hidden;
    let d = cfg.head_dim;
    let eps = cfg.norm_eps;
    let mut all_logits = Vec::new();
    let mut nll = 0.0;
    for seq in seqs {
        let n = seq.len() - 1;
        let mut xs: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                (0..m)
                    .map(|c| {
                        if !mask.stem[c] {
                            return 0.0;
                        }
                        let pe = match cfg.positional {
                            prunelab::model::Positional::Sinusoidal => {
                                sinusoid(t, cfg.stem_ids[c], cfg.stem_base)
                            }
                            prunelab::model::Positional::None => 0.0,
                        };
                        p.embedding[(seq[t] as usize, c)] + pe
                    })
                    .collect()
            })
            .collect();
        for (l, w) in p.layers.iter().enumerate() {
            let a: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &mask.stem, w.attn_norm.data(), eps)).collect();
            let proj = |v: &[f64], mat: &Matrix<f64>, col: usize| -> f64 {
                (0..m).filter(|&r| mask.stem[r]).map(|r| v[r] * mat[(r, col)]).sum()
            };
            let mut ctx = vec![vec![0.0; cfg.heads[l] * d]; n];
            for j in 0..cfg.heads[l] {
                if !mask.heads[l][j] {
                    continue;
                }
                let kv = cfg.kv_maps[l][j];
                for t in 0..n {
                    let q: Vec<f64> = (0..d).map(|e| proj(&a[t], &w.wq, j * d + e)).collect();
                    let scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            let k: Vec<f64> = (0..d).map(|e| proj(&a[u], &w.wk, kv * d + e)).collect();
                            q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for u in 0..=t {
                        let pr = (scores[u] - mx).exp() / z;
                        for e in 0..d {
                            ctx[t][j * d + e] += pr * proj(&a[u], &w.wv, kv * d + e);
                        }
                    }
                }
            }
            for t in 0..n {
                for c in 0..m {
                    if !mask.stem[c] {
                        continue;
                    }
                    let mut o = 0.0;
                    for j in 0..cfg.heads[l] {
                        if mask.heads[l][j] {
                            for e in 0..d {
                                o += ctx[t][j * d + e] * w.wo[(j * d + e, c)];
                            }
                        }
                    }
                    xs[t][c] += o;
                }
            }
            for x in xs.iter_mut() {
                let b = rms(x, &mask.stem, w.ffn_norm.data(), eps);
                let mut act = vec![0.0; cfg.ffn[l]];
                for (i, a) in act.iter_mut().enumerate() {
                    if !mask.ffn[l][i] {
                        continue;
                    }
                    let up = proj(&b, &w.w_up, i);
                    let g = proj(&b, &w.w_gate, i);
                    *a = g / (1.0 + (-g).exp()) * up;
                }
                for c in 0..m {
                    if mask.stem[c] {
                        x[c] += (0..cfg.ffn[l])
                            .filter(|&i| mask.ffn[l][i])
                            .map(|i| act[i] * w.w_down[(i, c)])
                            .sum::<f64>();
                    }
                }
            }
        }
        for (t, x) in xs.iter().enumerate() {
            let z = rms(x, &mask.stem, p.final_norm.data(), eps);
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| {
                    (0..m)
                        .filter(|&c| mask.stem[c])
                        .map(|c| {
                            let w = match &p.lm_head {
                                Some(h) => h[(c, v)],
                                None => p.embedding[(v, c)],
                            };
                            z[c] * w
                        })
                        .sum()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            nll += lse - logits[seq[t + 1] as usize];
            all_logits.push(logits);
        }
    }
    let count = all_logits.len() as f64;
    (all_logits, nll / count)
}

/// Max relative error between `model.backward` and central differences of
/// `model.forward`, over every parameter of every tensor.
pub fn model_gradient_error(model: &TransformerModel<f64>, seqs: &[Vec<u32>], h: f64, floor: f64) -> (f64, TensorId) {
    let (_, tape) = model.forward(seqs).unwrap();
    let grads = model.backward(&tape).unwrap();
    let mut worst = (0.0, TensorId::Embedding);
    for id in model.params().ids() {
        let analytic = grads.get(id).unwrap().data().to_vec();
        let base = model.params().get(id).unwrap().data().to_vec();
        let mut probe = model.clone();
        let numeric = numeric_grad(&base, h, |x| {
            probe.params_mut().get_mut(id).unwrap().data_mut().copy_from_slice(x);
            probe.forward(seqs).unwrap().0
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            let e = rel_err(*a, *n, floor);
            if e > worst.0 {
                worst = (e, id);
            }
        }
    }
    worst
}
