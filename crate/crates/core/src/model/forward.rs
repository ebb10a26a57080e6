use super::{LayerParams, ModelConfig, Params, Positional, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::kernels::{
    cross_entropy, cross_entropy_backward, embedding, embedding_backward, matmul_backward,
    rms_norm, rms_norm_backward, sigmoid, silu_grad, softmax_backward_row, softmax_in_place,
};
use crate::numerics::{Matrix, Scalar};

#[derive(Clone, Copy, Debug)]
struct Span {
    start: usize,
    len: usize,
}

/// Activations of one block recorded during [`TransformerModel::forward`].
#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    x: Matrix<T>,
    a: Matrix<T>,
    inv1: Vec<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<T>,
    probs_offsets: Vec<usize>,
    ctx: Matrix<T>,
    x1: Matrix<T>,
    b: Matrix<T>,
    inv2: Vec<T>,
    up: Matrix<T>,
    gate: Matrix<T>,
    act: Matrix<T>,
}

impl<T> LayerTape<T> {
    /// Input rows of the attention output projection (`tokens × h·d_h`).
    pub fn attn_context(&self) -> &Matrix<T> {
        &self.ctx
    }

    /// Input rows of the FFN down projection (`tokens × n`).
    pub fn ffn_activation(&self) -> &Matrix<T> {
        &self.act
    }
}

/// Everything the backward pass and Hessian accumulation need.
#[derive(Clone, Debug)]
pub struct ForwardTape<T> {
    version: u64,
    spans: Vec<Span>,
    inputs: Vec<u32>,
    targets: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    x_final: Matrix<T>,
    z: Matrix<T>,
    inv_f: Vec<T>,
    logits: Matrix<T>,
    probs: Matrix<T>,
    loss: T,
}

impl<T> ForwardTape<T> {
    pub fn loss(&self) -> &T {
        &self.loss
    }

    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn token_count(&self) -> usize {
        self.targets.len()
    }

    pub fn layers(&self) -> &[LayerTape<T>] {
        &self.layers
    }

    pub fn model_version(&self) -> u64 {
        self.version
    }
}

/// Fixed sinusoidal value for absolute position `pos` and original stem
/// channel `channel` of a stem that was `base` channels wide.
pub(crate) fn sinusoid(pos: usize, channel: usize, base: usize) -> f64 {
    let pair = (channel / 2 * 2) as f64;
    let angle = pos as f64 * 10_000f64.powf(-pair / base as f64);
    if channel.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl<T: Scalar> TransformerModel<T> {
    fn check_batch<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<Vec<Span>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let cfg = &self.config;
        let mut spans = Vec::with_capacity(batch.len());
        let mut start = 0;
        for seq in batch {
            let seq = seq.as_ref();
            if seq.len() < 2 {
                return Err(Error::EmptyInput("sequence needs at least two tokens"));
            }
            let len = seq.len() - 1;
            if len > cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: cfg.max_seq_len,
                });
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: cfg.vocab_size,
                });
            }
            spans.push(Span { start, len });
            start += len;
        }
        Ok(spans)
    }

    /// Mean next-token cross-entropy (nats/token) of every sequence in
    /// `batch`, plus the tape for [`Self::backward`].
    pub fn forward<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<(T, ForwardTape<T>)> {
        let spans = self.check_batch(batch)?;
        let cfg = &self.config;
        let p = &self.params;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for seq in batch {
            let seq = seq.as_ref();
            inputs.extend_from_slice(&seq[..seq.len() - 1]);
            targets.extend_from_slice(&seq[1..]);
        }

        let mut x = embedding(&p.embedding, &inputs)?;
        if cfg.positional == Positional::Sinusoidal {
            let longest = spans.iter().map(|s| s.len).max().unwrap_or(0);
            let table = Matrix::from_fn(longest, cfg.hidden, |t, c| T::of(sinusoid(t, cfg.stem_ids[c], cfg.stem_base)));
            for span in &spans {
                for t in 0..span.len {
                    for (o, &pe) in x.row_mut(span.start + t).iter_mut().zip(table.row(t)) {
                        *o += pe;
                    }
                }
            }
        }

        let eps = T::of(cfg.norm_eps);
        let mut layers = Vec::with_capacity(cfg.n_layers());
        for (l, w) in p.layers.iter().enumerate() {
            let (tape, next) = layer_forward(cfg, l, w, x, &spans, eps)?;
            layers.push(tape);
            x = next;
        }

        let (z, inv_f) = rms_norm(&x, p.final_norm.data(), eps)?;
        let logits = match &p.lm_head {
            Some(head) => z.matmul(head)?,
            None => z.matmul_t(&p.embedding)?,
        };
        let (loss, probs) = cross_entropy(&logits, &targets)?;
        let tape = ForwardTape {
            version: self.version,
            spans,
            inputs,
            targets,
            layers,
            x_final: x,
            z,
            inv_f,
            logits,
            probs,
            loss,
        };
        Ok((loss, tape))
    }

    /// Gradients of the mean loss recorded in `tape`.
    pub fn backward(&self, tape: &ForwardTape<T>) -> Result<Params<T>> {
        self.backward_scaled(tape, T::one())
    }

    /// Gradients of `dloss · loss`.
    pub fn backward_scaled(&self, tape: &ForwardTape<T>, dloss: T) -> Result<Params<T>> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                model: self.version,
            });
        }
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();

        let dlogits = cross_entropy_backward(&tape.probs, &tape.targets, dloss)?;
        let dz = match &p.lm_head {
            Some(head) => {
                let (dz, dhead) = matmul_backward(&tape.z, head, &dlogits)?;
                g.lm_head = Some(dhead);
                dz
            }
            None => {
                // logits = z · Eᵀ
                g.embedding = dlogits.t_matmul(&tape.z)?;
                dlogits.matmul(&p.embedding)?
            }
        };
        let (mut dx, dgf) = rms_norm_backward(&tape.x_final, p.final_norm.data(), &tape.inv_f, &dz)?;
        g.final_norm = Matrix::row_vector(dgf);

        for l in (0..cfg.n_layers()).rev() {
            dx = layer_backward(cfg, l, &p.layers[l], &tape.layers[l], &tape.spans, dx, &mut g.layers[l])?;
        }
        let demb = embedding_backward(&tape.inputs, &dx, cfg.vocab_size)?;
        g.embedding.add_assign(&demb)?;
        Ok(g)
    }

    /// Logits for every position of every sequence, rows concatenated.
    pub fn logits<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<Matrix<T>> {
        Ok(self.forward(batch)?.1.logits)
    }
}

fn layer_forward<T: Scalar>(
    cfg: &ModelConfig,
    l: usize,
    w: &LayerParams<T>,
    x: Matrix<T>,
    spans: &[Span],
    eps: T,
) -> Result<(LayerTape<T>, Matrix<T>)> {
    let (a, inv1) = rms_norm(&x, w.attn_norm.data(), eps)?;
    let q = a.matmul(&w.wq)?;
    let k = a.matmul(&w.wk)?;
    let v = a.matmul(&w.wv)?;
    let (ctx, probs, probs_offsets) = attention_forward(cfg, l, &q, &k, &v, spans)?;
    let mut x1 = ctx.matmul(&w.wo)?;
    x1.add_assign(&x)?;

    let (b, inv2) = rms_norm(&x1, w.ffn_norm.data(), eps)?;
    let up = b.matmul(&w.w_up)?;
    let gate = b.matmul(&w.w_gate)?;
    let mut act = gate.clone();
    for (o, &u) in act.data_mut().iter_mut().zip(up.data()) {
        *o = *o * sigmoid(*o) * u;
    }
    let mut out = act.matmul(&w.w_down)?;
    out.add_assign(&x1)?;
    let tape = LayerTape {
        x,
        a,
        inv1,
        q,
        k,
        v,
        probs,
        probs_offsets,
        ctx,
        x1,
        b,
        inv2,
        up,
        gate,
        act,
    };
    Ok((tape, out))
}

/// Rows `start..start + n`, columns `col..col + width` as a new matrix.
fn block<T: Scalar>(m: &Matrix<T>, start: usize, n: usize, col: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(n, width, |r, c| m[(start + r, col + c)])
}

fn add_block<T: Scalar>(m: &mut Matrix<T>, start: usize, col: usize, src: &Matrix<T>) {
    for r in 0..src.rows() {
        for (o, &x) in m.row_mut(start + r)[col..col + src.cols()].iter_mut().zip(src.row(r)) {
            *o += x;
        }
    }
}

/// Causal attention of every query head over its kv head, per sequence.
/// Returns the concatenated head outputs and the attention probabilities
/// (one `n×n` lower-triangular block per sequence and head).
fn attention_forward<T: Scalar>(
    cfg: &ModelConfig,
    l: usize,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    spans: &[Span],
) -> Result<(Matrix<T>, Vec<T>, Vec<usize>)> {
    let (h, d) = (cfg.heads[l], cfg.head_dim);
    let map = &cfg.kv_maps[l];
    let scale = T::of((d as f64).sqrt().recip());
    let mut offsets = Vec::with_capacity(spans.len());
    let mut total = 0;
    for s in spans {
        offsets.push(total);
        total += h * s.len * s.len;
    }
    let mut probs = vec![T::zero(); total];
    let mut ctx = Matrix::zeros(q.rows(), h * d);
    for (span, &off) in spans.iter().zip(&offsets) {
        let n = span.len;
        let ks: Vec<Matrix<T>> = (0..cfg.kv_heads[l]).map(|kv| block(k, span.start, n, kv * d, d)).collect();
        let vs: Vec<Matrix<T>> = (0..cfg.kv_heads[l]).map(|kv| block(v, span.start, n, kv * d, d)).collect();
        for (j, &kv) in map.iter().enumerate() {
            let qh = block(q, span.start, n, j * d, d);
            let mut scores = qh.matmul_t(&ks[kv])?;
            for t in 0..n {
                let row = &mut scores.row_mut(t);
                for x in row[..=t].iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(&mut row[..=t]);
                row[t + 1..].fill(T::zero());
            }
            let out = scores.matmul(&vs[kv])?;
            add_block(&mut ctx, span.start, j * d, &out);
            probs[off + j * n * n..off + (j + 1) * n * n].copy_from_slice(scores.data());
        }
    }
    Ok((ctx, probs, offsets))
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    cfg: &ModelConfig,
    l: usize,
    tape: &LayerTape<T>,
    spans: &[Span],
    dctx: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (h, d) = (cfg.heads[l], cfg.head_dim);
    let map = &cfg.kv_maps[l];
    let scale = T::of((d as f64).sqrt().recip());
    let (q, k, v) = (&tape.q, &tape.k, &tape.v);
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for (span, &off) in spans.iter().zip(&tape.probs_offsets) {
        let n = span.len;
        for j in 0..h {
            let kv = map[j];
            let p = Matrix::from_vec(n, n, tape.probs[off + j * n * n..off + (j + 1) * n * n].to_vec())?;
            let go = block(dctx, span.start, n, j * d, d);
            let vh = block(v, span.start, n, kv * d, d);
            let mut ds = go.matmul_t(&vh)?;
            add_block(&mut dv, span.start, kv * d, &p.t_matmul(&go)?);
            for t in 0..n {
                let dp = ds.row(t)[..=t].to_vec();
                let row = ds.row_mut(t);
                softmax_backward_row(&p.row(t)[..=t], &dp, &mut row[..=t]);
                for x in row[..=t].iter_mut() {
                    *x *= scale;
                }
                row[t + 1..].fill(T::zero());
            }
            let kh = block(k, span.start, n, kv * d, d);
            let qh = block(q, span.start, n, j * d, d);
            add_block(&mut dq, span.start, j * d, &ds.matmul(&kh)?);
            add_block(&mut dk, span.start, kv * d, &ds.t_matmul(&qh)?);
        }
    }
    Ok((dq, dk, dv))
}

fn layer_backward<T: Scalar>(
    cfg: &ModelConfig,
    l: usize,
    w: &LayerParams<T>,
    tape: &LayerTape<T>,
    spans: &[Span],
    dout: Matrix<T>,
    g: &mut LayerParams<T>,
) -> Result<Matrix<T>> {
    // FFN: out = x1 + (silu(gate) ⊙ up) · W_down
    let (dact, dw_down) = matmul_backward(&tape.act, &w.w_down, &dout)?;
    g.w_down = dw_down;
    let mut dup = dact.clone();
    let mut dgate = dact;
    for (((du, dg), &u), &gt) in dup
        .data_mut()
        .iter_mut()
        .zip(dgate.data_mut())
        .zip(tape.up.data())
        .zip(tape.gate.data())
    {
        let da = *du;
        *du = da * gt * sigmoid(gt);
        *dg = da * u * silu_grad(gt);
    }
    let (mut db, dw_up) = matmul_backward(&tape.b, &w.w_up, &dup)?;
    let (db_gate, dw_gate) = matmul_backward(&tape.b, &w.w_gate, &dgate)?;
    db.add_assign(&db_gate)?;
    g.w_up = dw_up;
    g.w_gate = dw_gate;
    let (mut dx1, dg2) = rms_norm_backward(&tape.x1, w.ffn_norm.data(), &tape.inv2, &db)?;
    g.ffn_norm = Matrix::row_vector(dg2);
    dx1.add_assign(&dout)?;

    // attention: x1 = x + ctx · W_o
    let (dctx, dw_o) = matmul_backward(&tape.ctx, &w.wo, &dx1)?;
    g.wo = dw_o;
    let (dq, dk, dv) = attention_backward(cfg, l, tape, spans, &dctx)?;
    let (mut da, dwq) = matmul_backward(&tape.a, &w.wq, &dq)?;
    let (da_k, dwk) = matmul_backward(&tape.a, &w.wk, &dk)?;
    let (da_v, dwv) = matmul_backward(&tape.a, &w.wv, &dv)?;
    da.add_assign(&da_k)?;
    da.add_assign(&da_v)?;
    g.wq = dwq;
    g.wk = dwk;
    g.wv = dwv;
    let (mut dx, dg1) = rms_norm_backward(&tape.x, w.attn_norm.data(), &tape.inv1, &da)?;
    g.attn_norm = Matrix::row_vector(dg1);
    dx.add_assign(&dx1)?;
    Ok(dx)
}
