//! The randomized checks behind the exact acceptance criteria. Each case
//! returns what it measured so the integration tests and the acceptance
//! suite can apply their own tolerances and report the numbers.

use nalgebra::{DMatrix, DVector};
use prunelab::groups::{apply_prune, build_group, GroupType, PruneSpace, Selection};
use prunelab::model::{ModelConfig, TransformerModel};
use prunelab::numerics::kernels::*;
use prunelab::numerics::{cholesky_solve, Matrix, Rng};
use prunelab::saliency::{score_and_select, select_prune_type, Accumulation, Metric, SaliencyState};
use prunelab::second_order::{damped_factor, obs_row_update, SecondOrderConfig};
use prunelab::Error;

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-3;

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, FD_FLOOR))
        .fold(0.0, f64::max)
}

/// `Σ w_ij y_ij`: a scalar loss whose upstream gradient is `w`.
fn weighted(y: &Matrix<f64>, w: &Matrix<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn reshape(rows: usize, cols: usize, x: &[f64]) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, x.to_vec()).unwrap()
}

/// Worst relative error of every kernel backward against central
/// differences on random 4×6 inputs.
pub fn kernel_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed).split("kernels");
    let h = FD_STEP;
    let mut out = Vec::new();

    let a = random_matrix(4, 6, &mut rng);
    let b = random_matrix(6, 3, &mut rng);
    let w = random_matrix(4, 3, &mut rng);
    let (da, db) = matmul_backward(&a, &b, &w).unwrap();
    let na = numeric_grad(a.data(), h, |x| weighted(&matmul(&reshape(4, 6, x), &b).unwrap(), &w));
    let nb = numeric_grad(b.data(), h, |x| weighted(&matmul(&a, &reshape(6, 3, x)).unwrap(), &w));
    out.push(("matmul", max_rel(da.data(), &na).max(max_rel(db.data(), &nb))));

    let x = random_matrix(4, 6, &mut rng);
    let w = random_matrix(4, 6, &mut rng);
    let dx = softmax_rows_backward(&softmax_rows(&x), &w).unwrap();
    let n = numeric_grad(x.data(), h, |v| weighted(&softmax_rows(&reshape(4, 6, v)), &w));
    out.push(("softmax", max_rel(dx.data(), &n)));

    let gain: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let eps = 1e-5;
    let (_, inv) = rms_norm(&x, &gain, eps).unwrap();
    let (dx, dg) = rms_norm_backward(&x, &gain, &inv, &w).unwrap();
    let nx = numeric_grad(x.data(), h, |v| weighted(&rms_norm(&reshape(4, 6, v), &gain, eps).unwrap().0, &w));
    let ng = numeric_grad(&gain, h, |g| weighted(&rms_norm(&x, g, eps).unwrap().0, &w));
    out.push(("rms_norm", max_rel(dx.data(), &nx).max(max_rel(&dg, &ng))));

    let dx = silu_backward(&x, &w).unwrap();
    let n = numeric_grad(x.data(), h, |v| weighted(&silu(&reshape(4, 6, v)), &w));
    out.push(("silu", max_rel(dx.data(), &n)));

    let table = random_matrix(6, 4, &mut rng);
    let ids = random_tokens(4, 6, &mut rng);
    let w4 = random_matrix(4, 4, &mut rng);
    let dt = embedding_backward(&ids, &w4, 6).unwrap();
    let n = numeric_grad(table.data(), h, |v| weighted(&embedding(&reshape(6, 4, v), &ids).unwrap(), &w4));
    out.push(("embedding", max_rel(dt.data(), &n)));

    let targets = random_tokens(4, 6, &mut rng);
    let (_, probs) = cross_entropy(&x, &targets).unwrap();
    let d = cross_entropy_backward(&probs, &targets, 1.0).unwrap();
    let n = numeric_grad(x.data(), h, |v| cross_entropy(&reshape(4, 6, v), &targets).unwrap().0);
    out.push(("cross_entropy", max_rel(d.data(), &n)));
    out
}

/// Worst relative error of the full-model backward on a random small model
/// (MHA or GQA, tied or untied) against central differences of the loss.
pub fn model_gradient_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).split("model-gradient");
    let model = random_model(&mut rng, 2, 12);
    let vocab = model.config().vocab_size;
    let seqs = vec![random_tokens(6, vocab, &mut rng), random_tokens(4, vocab, &mut rng)];
    model_gradient_error(&model, &seqs, FD_STEP, FD_FLOOR).0
}

fn random_selection(cfg: &ModelConfig, kind: GroupType, rng: &mut Rng) -> Selection {
    match kind {
        GroupType::Attn => Selection::Attn(cfg.heads.iter().map(|&h| rng.below(h)).collect()),
        GroupType::Ffn => Selection::Ffn(cfg.ffn.iter().map(|&n| rng.below(n)).collect()),
        GroupType::Stem => Selection::Stem(rng.below(cfg.hidden)),
    }
}

pub struct MaskedCase {
    /// Largest |logit difference| between the shrunk model and the masked
    /// reference on the original.
    pub max_diff: f64,
    pub prunes: Vec<GroupType>,
    /// Original count minus the summed group sizes equals the final count.
    pub telescopes: bool,
}

/// A random prune sequence on a random model (up to 4 layers, hidden up to
/// 32), compared against the straight-line reference forward of the
/// original model with the removed units masked out.
pub fn masked_equivalence_case(seed: u64) -> MaskedCase {
    let mut rng = Rng::new(seed).split("masked");
    let original = random_model(&mut rng, 4, 32);
    let cfg0 = original.config().clone();
    let space = PruneSpace::for_config(&cfg0);
    let mut model = original.clone();
    let mut heads: Vec<Vec<usize>> = cfg0.heads.iter().map(|&h| (0..h).collect()).collect();
    let mut ffn: Vec<Vec<usize>> = cfg0.ffn.iter().map(|&n| (0..n).collect()).collect();
    let mut stem: Vec<usize> = (0..cfg0.hidden).collect();
    let mut prunes = Vec::new();
    let mut removed = 0;
    for _ in 0..1 + rng.below(6) {
        let open: Vec<GroupType> = GroupType::ALL
            .into_iter()
            .filter(|&k| space.eligible(model.config(), k))
            .collect();
        if open.is_empty() {
            break;
        }
        let kind = open[rng.below(open.len())];
        let selection = random_selection(model.config(), kind, &mut rng);
        match &selection {
            Selection::Attn(js) => js.iter().zip(&mut heads).for_each(|(&j, ids)| {
                ids.remove(j);
            }),
            Selection::Ffn(is) => is.iter().zip(&mut ffn).for_each(|(&i, ids)| {
                ids.remove(i);
            }),
            Selection::Stem(i) => {
                stem.remove(*i);
            }
        }
        let group = build_group(&model, &space, selection).unwrap();
        removed += group.size();
        apply_prune(&mut model, &group).unwrap();
        model.check_invariants().unwrap();
        prunes.push(kind);
    }
    let mut mask = Mask::all(&cfg0);
    for (l, keep) in mask.heads.iter_mut().enumerate() {
        keep.iter_mut().enumerate().for_each(|(j, k)| *k = heads[l].contains(&j));
    }
    for (l, keep) in mask.ffn.iter_mut().enumerate() {
        keep.iter_mut().enumerate().for_each(|(i, k)| *k = ffn[l].contains(&i));
    }
    mask.stem.iter_mut().enumerate().for_each(|(c, k)| *k = stem.contains(&c));

    let vocab = cfg0.vocab_size;
    let seqs = vec![
        random_tokens(3 + rng.below(8), vocab, &mut rng),
        random_tokens(3 + rng.below(8), vocab, &mut rng),
    ];
    let (reference, _) = reference_forward(&cfg0, original.params(), &mask, &seqs);
    let logits = model.logits(&seqs).unwrap();
    let mut max_diff = 0.0f64;
    for (r, row) in reference.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            max_diff = max_diff.max((logits[(r, c)] - v).abs());
        }
    }
    MaskedCase {
        max_diff,
        prunes,
        telescopes: cfg0.parameter_count() - removed == model.parameter_count(),
    }
}

/// Prunes one attention or FFN group and compares against the original
/// model with that group's weights set to zero (no reference forward).
pub fn zeroed_equivalence_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).split("zeroed");
    let original = random_model(&mut rng, 3, 16);
    let cfg = original.config().clone();
    let space = PruneSpace::for_config(&cfg);
    let kind = if space.eligible(&cfg, GroupType::Attn) && rng.below(2) == 0 {
        GroupType::Attn
    } else {
        GroupType::Ffn
    };
    let selection = random_selection(&cfg, kind, &mut rng);
    let mut zeroed = original.clone();
    let d = cfg.head_dim;
    for (l, &i) in selection.indices().iter().enumerate() {
        let w = &mut zeroed.params_mut().layers[l];
        match kind {
            GroupType::Attn => {
                for r in 0..cfg.hidden {
                    (0..d).for_each(|e| w.wq[(r, i * d + e)] = 0.0);
                }
                (0..d).for_each(|e| w.wo.row_mut(i * d + e).fill(0.0));
            }
            _ => {
                for r in 0..cfg.hidden {
                    w.w_up[(r, i)] = 0.0;
                    w.w_gate[(r, i)] = 0.0;
                }
                w.w_down.row_mut(i).fill(0.0);
            }
        }
    }
    let mut shrunk = original;
    let group = build_group(&shrunk, &space, selection).unwrap();
    apply_prune(&mut shrunk, &group).unwrap();
    let seqs = vec![random_tokens(9, cfg.vocab_size, &mut rng)];
    shrunk.logits(&seqs).unwrap().max_abs_diff(&zeroed.logits(&seqs).unwrap())
}

fn odometer(widths: &[usize], mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0; widths.len()];
    loop {
        visit(&idx);
        let mut l = widths.len();
        loop {
            if l == 0 {
                return;
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < widths[l] {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// Enumerates every per-layer combination, summing unit saliencies in layer
/// order; returns the first combination with the smallest total.
fn brute_force(units: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let widths: Vec<usize> = units.iter().map(Vec::len).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    odometer(&widths, |idx| {
        let mut total = 0.0;
        for (l, &i) in idx.iter().enumerate() {
            total += units[l][i];
        }
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((idx.to_vec(), total));
        }
    });
    best.unwrap()
}

/// Random model with ragged per-layer widths: up to 4 layers, hidden ≤ 16,
/// heads ≤ 4, FFN ≤ 32.
fn ragged_model(rng: &mut Rng) -> TransformerModel<f64> {
    let d = [2, 4][rng.below(2)];
    let layers = 1 + rng.below(4);
    let hidden = 2 * d + rng.below(17 - 2 * d);
    let vocab = 6 + rng.below(10);
    let mut cfg = ModelConfig::uniform(vocab, hidden, layers, 1, 1, d, 1, 12).unwrap();
    for l in 0..layers {
        let h = 1 + rng.below(4);
        cfg.heads[l] = h;
        cfg.kv_heads[l] = h;
        cfg.kv_maps[l] = (0..h).collect();
        cfg.ffn[l] = 1 + rng.below(32);
    }
    cfg.validate().unwrap();
    TransformerModel::init(cfg, 0.5, rng).unwrap()
}

/// Accumulates saliency from real gradients on a random ragged model and
/// checks `score_and_select` and `select_prune_type` against exhaustive
/// enumeration of every candidate group.
pub fn saliency_oracle_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed).split("saliency");
    let model = ragged_model(&mut rng);
    let cfg = model.config().clone();
    let metric = [Metric::FirstOrder, Metric::FirstPlusDiagFisher][rng.below(2)];
    let accumulation = if rng.below(2) == 0 {
        Accumulation::Sum
    } else {
        Accumulation::Ema(rng.uniform())
    };
    let mut state = SaliencyState::new(&cfg, metric, accumulation);
    state.signed = rng.below(3) == 0;
    for _ in 0..1 + rng.below(3) {
        let seqs = vec![random_tokens(8, cfg.vocab_size, &mut rng)];
        let (_, tape) = model.forward(&seqs).unwrap();
        let grads = model.backward(&tape).unwrap();
        state.accumulate(&model, &grads).unwrap();
    }
    let mut space = PruneSpace::for_config(&cfg);
    space.enabled.retain(|_| rng.below(4) != 0);

    // Unit saliencies straight from the accumulated element matrices.
    let unit = |x: f64| if state.signed { x.abs() } else { x };
    let d = cfg.head_dim;
    let head_units: Vec<Vec<f64>> = state
        .layers
        .iter()
        .map(|st| {
            (0..st.wo.rows() / d)
                .map(|j| {
                    let mut band = 0.0;
                    for r in j * d..(j + 1) * d {
                        let mut row = 0.0;
                        for c in 0..st.wo.cols() {
                            row += st.wo[(r, c)];
                        }
                        band += row;
                    }
                    unit(band)
                })
                .collect()
        })
        .collect();
    let ffn_units: Vec<Vec<f64>> = state
        .layers
        .iter()
        .map(|st| {
            (0..st.down.rows())
                .map(|r| unit((0..st.down.cols()).fold(0.0, |a, c| a + st.down[(r, c)])))
                .collect()
        })
        .collect();
    let stem_units: Vec<f64> = (0..cfg.hidden)
        .map(|c| {
            let mut acc = 0.0;
            for st in &state.layers {
                for m in [&st.wo, &st.down] {
                    for r in 0..m.rows() {
                        acc += m[(r, c)];
                    }
                }
            }
            unit(acc)
        })
        .collect();
    let (attn_idx, s_attn) = brute_force(&head_units);
    let (ffn_idx, s_ffn) = brute_force(&ffn_units);
    let (stem_idx, s_stem) = brute_force(&[stem_units]);

    let eligible = |kind: GroupType| {
        space.enabled.contains(&kind)
            && match kind {
                GroupType::Attn => cfg.heads.iter().all(|&h| h > space.min_heads),
                GroupType::Ffn => cfg.ffn.iter().all(|&n| n > space.min_ffn),
                GroupType::Stem => cfg.hidden > space.min_hidden,
            }
    };
    let expected = [
        (GroupType::Attn, s_attn, Selection::Attn(attn_idx)),
        (GroupType::Ffn, s_ffn, Selection::Ffn(ffn_idx)),
        (GroupType::Stem, s_stem, Selection::Stem(stem_idx[0])),
    ];
    let open: Vec<&(GroupType, f64, Selection)> = expected.iter().filter(|e| eligible(e.0)).collect();

    let report = match score_and_select(&state, &cfg, &space, false) {
        Err(Error::NoEligibleCandidate) if open.is_empty() => return Ok(()),
        Err(e) => return Err(format!("unexpected error {e}")),
        Ok(r) => r,
    };
    for (kind, s, selection) in &expected {
        if report.saliency(*kind) != Some(*s) {
            return Err(format!("{kind:?}: S = {:?}, brute force {s}", report.saliency(*kind)));
        }
        match (report.candidate(*kind), eligible(*kind)) {
            (Some(c), true) if c.group.selection() == selection && c.saliency == *s => {}
            (None, false) => {}
            (c, _) => return Err(format!("{kind:?}: candidate {:?}, expected {selection:?}", c.map(|c| c.group.selection()))),
        }
    }
    let oracle = open
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|e| e.0)
        .unwrap();
    if select_prune_type(&report) != oracle {
        return Err(format!("selected {:?}, argmin {oracle:?}", select_prune_type(&report)));
    }
    Ok(())
}

pub struct ObsCase {
    /// Max |entry| difference from the dense least-squares solution.
    pub oracle_diff: f64,
    /// `‖(H + λI)u − e_p‖∞`.
    pub residual: f64,
    pub compensated_error: f64,
    pub naive_error: f64,
    /// Whether `H` couples row `p` to any other row.
    pub coupled: bool,
    pub row_zeroed: bool,
}

fn quad_error(h: &Matrix<f64>, w: &Matrix<f64>, w_new: &Matrix<f64>) -> f64 {
    let n = h.rows();
    let mut total = 0.0;
    for c in 0..w.cols() {
        for a in 0..n {
            for b in 0..n {
                total += (w_new[(a, c)] - w[(a, c)]) * h[(a, b)] * (w_new[(b, c)] - w[(b, c)]);
            }
        }
    }
    total
}

/// One random `(H, W, p)`: `H` from correlated activations (decoupled at
/// `p` in a fifth of the cases), checked against the damped normal
/// equations solved by LU with partial pivoting.
pub fn obs_case(seed: u64) -> ObsCase {
    let mut rng = Rng::new(seed).split("obs");
    let d = 2 + rng.below(31);
    let out = 1 + rng.below(8);
    let tokens = d + 5 + rng.below(60);
    let z = random_matrix(tokens, d, &mut rng);
    let mix = random_matrix(d, d, &mut rng);
    let x = z.matmul(&mix).unwrap();
    let mut h = x.t_matmul(&x).unwrap();
    h.scale(1.0 / tokens as f64);
    let p = rng.below(d);
    if rng.below(5) == 0 {
        for q in (0..d).filter(|&q| q != p) {
            h[(p, q)] = 0.0;
            h[(q, p)] = 0.0;
        }
    }
    let w = random_matrix(d, out, &mut rng);

    let (factor, lambda) = damped_factor(&h, &SecondOrderConfig::default()).unwrap();
    let mut updated = w.clone();
    obs_row_update(&mut updated, &factor, p).unwrap();

    let a = DMatrix::from_fn(d, d, |r, c| h[(r, c)] + if r == c { lambda } else { 0.0 });
    let keep: Vec<usize> = (0..d).filter(|&r| r != p).collect();
    let a_kk = DMatrix::from_fn(keep.len(), keep.len(), |r, c| a[(keep[r], keep[c])]);
    let lu = a_kk.lu();
    let mut oracle = w.clone();
    for c in 0..out {
        let rhs = DVector::from_fn(keep.len(), |r, _| a[(keep[r], p)] * w[(p, c)]);
        let delta = lu.solve(&rhs).expect("damped block is invertible");
        for (r, &k) in keep.iter().enumerate() {
            oracle[(k, c)] += delta[r];
        }
        oracle[(p, c)] = 0.0;
    }

    let mut e = vec![0.0; d];
    e[p] = 1.0;
    let u = cholesky_solve(&factor, &e).unwrap();
    let au = &a * DVector::from_vec(u);
    let residual = (0..d).map(|r| (au[r] - e[r]).abs()).fold(0.0, f64::max);

    let mut naive = w.clone();
    naive.row_mut(p).fill(0.0);
    ObsCase {
        oracle_diff: updated.max_abs_diff(&oracle),
        residual,
        compensated_error: quad_error(&h, &w, &updated),
        naive_error: quad_error(&h, &w, &naive),
        coupled: (0..d).any(|q| q != p && h[(p, q)] != 0.0),
        row_zeroed: updated.row(p).iter().all(|&v| v == 0.0),
    }
}

/// Which original band of `original` equals band `band` of `current`
/// (column bands of width `d`).
fn find_band(original: &Matrix<f64>, current: &Matrix<f64>, band: usize, d: usize) -> Option<usize> {
    (0..original.cols() / d).find(|&k| {
        (0..original.rows()).all(|r| (0..d).all(|e| original[(r, k * d + e)] == current[(r, band * d + e)]))
    })
}

/// A random sequence of attention prunes on a GQA model. After every prune
/// the query→kv map must be total and onto, and a kv head must survive
/// exactly when one of its original queries does. Kv heads are identified
/// by their weights, independently of the remapping code.
pub fn gqa_case(seed: u64) -> Result<usize, String> {
    let mut rng = Rng::new(seed).split("gqa");
    let layers = 1 + rng.below(3);
    let heads = [2, 4, 6, 8][rng.below(4)];
    let divisors: Vec<usize> = (1..heads).filter(|k| heads % k == 0).collect();
    let kv = divisors[rng.below(divisors.len())];
    let cfg = ModelConfig::uniform(7, 8, layers, heads, kv, 2, 4, 8).unwrap();
    let original = TransformerModel::<f64>::init(cfg.clone(), 1.0, &mut rng).unwrap();
    let space = PruneSpace::for_config(&cfg);
    let mut model = original.clone();
    let mut queries: Vec<Vec<usize>> = vec![(0..heads).collect(); layers];
    let mut prunes = 0;
    while space.eligible(model.config(), GroupType::Attn) && rng.below(8) != 0 {
        let selection = random_selection(model.config(), GroupType::Attn, &mut rng);
        for (l, &j) in selection.indices().iter().enumerate() {
            queries[l].remove(j);
        }
        let group = build_group(&model, &space, selection).unwrap();
        apply_prune(&mut model, &group).unwrap();
        prunes += 1;
        let c = model.config();
        for l in 0..layers {
            let (o, w) = (&original.params().layers[l], &model.params().layers[l]);
            let map = &c.kv_maps[l];
            if map.len() != c.heads[l] || map.iter().any(|&k| k >= c.kv_heads[l]) {
                return Err(format!("layer {l}: map {map:?} not total over {} kv heads", c.kv_heads[l]));
            }
            if (0..c.kv_heads[l]).any(|k| !map.contains(&k)) {
                return Err(format!("layer {l}: map {map:?} not onto {} kv heads", c.kv_heads[l]));
            }
            let survivors: Vec<usize> = (0..c.kv_heads[l])
                .map(|k| find_band(&o.wk, &w.wk, k, 2).ok_or(format!("layer {l}: kv {k} matches no original")))
                .collect::<Result<_, _>>()?;
            let mut expected: Vec<usize> = queries[l].iter().map(|&q| cfg.kv_maps[l][q]).collect();
            expected.sort_unstable();
            expected.dedup();
            if survivors != expected {
                return Err(format!("layer {l}: kv survivors {survivors:?}, expected {expected:?}"));
            }
            for (j, &q) in queries[l].iter().enumerate() {
                if find_band(&o.wq, &w.wq, j, 2) != Some(q) || survivors[map[j]] != cfg.kv_maps[l][q] {
                    return Err(format!("layer {l}: query {j} lost its kv head"));
                }
            }
        }
    }
    Ok(prunes)
}
