use std::fmt;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerTensor {
    Wq,
    Wk,
    Wv,
    Wo,
    Up,
    Gate,
    Down,
    AttnNorm,
    FfnNorm,
}

impl LayerTensor {
    pub const ALL: [LayerTensor; 9] = [
        LayerTensor::Wq,
        LayerTensor::Wk,
        LayerTensor::Wv,
        LayerTensor::Wo,
        LayerTensor::Up,
        LayerTensor::Gate,
        LayerTensor::Down,
        LayerTensor::AttnNorm,
        LayerTensor::FfnNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerTensor::Wq => "wq",
            LayerTensor::Wk => "wk",
            LayerTensor::Wv => "wv",
            LayerTensor::Wo => "wo",
            LayerTensor::Up => "w_up",
            LayerTensor::Gate => "w_gate",
            LayerTensor::Down => "w_down",
            LayerTensor::AttnNorm => "attn_norm",
            LayerTensor::FfnNorm => "ffn_norm",
        }
    }

    pub fn is_norm(self) -> bool {
        matches!(self, LayerTensor::AttnNorm | LayerTensor::FfnNorm)
    }
}

/// Identifies one trainable tensor of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    Embedding,
    Layer(usize, LayerTensor),
    FinalNorm,
    LmHead,
}

impl TensorId {
    pub fn is_norm(self) -> bool {
        match self {
            TensorId::FinalNorm => true,
            TensorId::Layer(_, t) => t.is_norm(),
            _ => false,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedding" => return Some(TensorId::Embedding),
            "final_norm" => return Some(TensorId::FinalNorm),
            "lm_head" => return Some(TensorId::LmHead),
            _ => {}
        }
        let rest = s.strip_prefix("layers.")?;
        let (idx, name) = rest.split_once('.')?;
        let layer = idx.parse().ok()?;
        let t = LayerTensor::ALL.into_iter().find(|t| t.name() == name)?;
        Some(TensorId::Layer(layer, t))
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorId::Embedding => f.write_str("embedding"),
            TensorId::FinalNorm => f.write_str("final_norm"),
            TensorId::LmHead => f.write_str("lm_head"),
            TensorId::Layer(l, t) => write!(f, "layers.{l}.{}", t.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    /// `m × h·d_h`
    pub wq: Matrix<T>,
    /// `m × kv·d_h`
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    /// `h·d_h × m`
    pub wo: Matrix<T>,
    /// `m × n`
    pub w_up: Matrix<T>,
    pub w_gate: Matrix<T>,
    /// `n × m`
    pub w_down: Matrix<T>,
    /// `1 × m`
    pub attn_norm: Matrix<T>,
    pub ffn_norm: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn get(&self, t: LayerTensor) -> &Matrix<T> {
        match t {
            LayerTensor::Wq => &self.wq,
            LayerTensor::Wk => &self.wk,
            LayerTensor::Wv => &self.wv,
            LayerTensor::Wo => &self.wo,
            LayerTensor::Up => &self.w_up,
            LayerTensor::Gate => &self.w_gate,
            LayerTensor::Down => &self.w_down,
            LayerTensor::AttnNorm => &self.attn_norm,
            LayerTensor::FfnNorm => &self.ffn_norm,
        }
    }

    pub fn get_mut(&mut self, t: LayerTensor) -> &mut Matrix<T> {
        match t {
            LayerTensor::Wq => &mut self.wq,
            LayerTensor::Wk => &mut self.wk,
            LayerTensor::Wv => &mut self.wv,
            LayerTensor::Wo => &mut self.wo,
            LayerTensor::Up => &mut self.w_up,
            LayerTensor::Gate => &mut self.w_gate,
            LayerTensor::Down => &mut self.w_down,
            LayerTensor::AttnNorm => &mut self.attn_norm,
            LayerTensor::FfnNorm => &mut self.ffn_norm,
        }
    }
}

/// Every trainable tensor of a model. Also used for gradients and optimizer
/// moments, which mirror the parameter shapes exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    /// `V × m`
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `1 × m`
    pub final_norm: Matrix<T>,
    /// `m × V`; absent when the head is tied to the embedding.
    pub lm_head: Option<Matrix<T>>,
}

impl<T: Scalar> Params<T> {
    /// Zero tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (m, d, v) = (cfg.hidden, cfg.head_dim, cfg.vocab_size);
        let layers = (0..cfg.n_layers())
            .map(|l| {
                let (h, kv, n) = (cfg.heads[l], cfg.kv_heads[l], cfg.ffn[l]);
                LayerParams {
                    wq: Matrix::zeros(m, h * d),
                    wk: Matrix::zeros(m, kv * d),
                    wv: Matrix::zeros(m, kv * d),
                    wo: Matrix::zeros(h * d, m),
                    w_up: Matrix::zeros(m, n),
                    w_gate: Matrix::zeros(m, n),
                    w_down: Matrix::zeros(n, m),
                    attn_norm: Matrix::zeros(1, m),
                    ffn_norm: Matrix::zeros(1, m),
                }
            })
            .collect();
        Self {
            embedding: Matrix::zeros(v, m),
            layers,
            final_norm: Matrix::zeros(1, m),
            lm_head: (!cfg.tied_embeddings).then(|| Matrix::zeros(m, v)),
        }
    }

    /// Random initialisation: N(0, std) projections, residual outputs scaled
    /// by `1/sqrt(2L)`, unit norm gains.
    pub fn init(cfg: &ModelConfig, std: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let out_std = std / (2.0 * cfg.n_layers() as f64).sqrt();
        let emb_std = if cfg.tied_embeddings {
            (cfg.hidden as f64).sqrt().recip()
        } else {
            1.0
        };
        let mut fill = |m: &mut Matrix<T>, s: f64| {
            m.data_mut().iter_mut().for_each(|x| *x = T::of(rng.normal() * s));
        };
        fill(&mut p.embedding, emb_std);
        for layer in &mut p.layers {
            fill(&mut layer.wq, std);
            fill(&mut layer.wk, std);
            fill(&mut layer.wv, std);
            fill(&mut layer.wo, out_std);
            fill(&mut layer.w_up, std);
            fill(&mut layer.w_gate, std);
            fill(&mut layer.w_down, out_std);
            layer.attn_norm.fill(T::one());
            layer.ffn_norm.fill(T::one());
        }
        p.final_norm.fill(T::one());
        if let Some(head) = &mut p.lm_head {
            fill(head, std);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    w_up: z(&l.w_up),
                    w_gate: z(&l.w_gate),
                    w_down: z(&l.w_down),
                    attn_norm: z(&l.attn_norm),
                    ffn_norm: z(&l.ffn_norm),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            lm_head: self.lm_head.as_ref().map(z),
        }
    }

    /// Tensor ids in canonical (checkpoint) order.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut ids = vec![TensorId::Embedding];
        for l in 0..self.layers.len() {
            ids.extend(LayerTensor::ALL.iter().map(|&t| TensorId::Layer(l, t)));
        }
        ids.push(TensorId::FinalNorm);
        if self.lm_head.is_some() {
            ids.push(TensorId::LmHead);
        }
        ids
    }

    pub fn get(&self, id: TensorId) -> Option<&Matrix<T>> {
        match id {
            TensorId::Embedding => Some(&self.embedding),
            TensorId::FinalNorm => Some(&self.final_norm),
            TensorId::LmHead => self.lm_head.as_ref(),
            TensorId::Layer(l, t) => self.layers.get(l).map(|layer| layer.get(t)),
        }
    }

    pub fn get_mut(&mut self, id: TensorId) -> Option<&mut Matrix<T>> {
        match id {
            TensorId::Embedding => Some(&mut self.embedding),
            TensorId::FinalNorm => Some(&mut self.final_norm),
            TensorId::LmHead => self.lm_head.as_mut(),
            TensorId::Layer(l, t) => self.layers.get_mut(l).map(|layer| layer.get_mut(t)),
        }
    }

    pub fn tensors(&self) -> Vec<(TensorId, &Matrix<T>)> {
        self.ids()
            .into_iter()
            .map(|id| (id, self.get(id).expect("listed id")))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        for id in self.ids() {
            self.get_mut(id).expect("listed id").scale(s);
        }
    }

    /// Applies `f` to every aligned pair of tensors of `self` and `other`.
    pub fn zip_mut<U: Scalar>(
        &mut self,
        other: &Params<U>,
        mut f: impl FnMut(TensorId, &mut Matrix<T>, &Matrix<U>),
    ) -> Result<()> {
        let ids = self.ids();
        if ids != other.ids() {
            return Err(Error::ShapeMismatch {
                op: "params.zip",
                left: (ids.len(), 0),
                right: (other.ids().len(), 0),
            });
        }
        for id in ids {
            let theirs = other.get(id).expect("listed id");
            let mine = self.get_mut(id).expect("listed id");
            if mine.shape() != theirs.shape() {
                return Err(Error::ShapeMismatch {
                    op: "params.zip",
                    left: mine.shape(),
                    right: theirs.shape(),
                });
            }
            f(id, mine, theirs);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w_up: l.w_up.cast(),
                    w_gate: l.w_gate.cast(),
                    w_down: l.w_down.cast(),
                    attn_norm: l.attn_norm.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.as_ref().map(|h| h.cast()),
        }
    }

    /// True when every tensor has the shape implied by `cfg`.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        let expect = Params::<T>::zeros(cfg);
        self.ids() == expect.ids()
            && self
                .tensors()
                .iter()
                .zip(expect.tensors())
                .all(|((_, a), (_, b))| a.shape() == b.shape())
    }
}
