use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed positional signal added to token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    None,
    Sinusoidal,
}

impl Positional {
    pub fn as_str(self) -> &'static str {
        match self {
            Positional::None => "none",
            Positional::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Positional::None),
            "sinusoidal" => Some(Positional::Sinusoidal),
            _ => None,
        }
    }
}

/// Architecture of a (possibly pruned) decoder-only transformer.
///
/// Attention and FFN widths are per layer; the hidden width is shared by
/// every block. `stem_ids` records which original hidden channel each
/// surviving channel came from, so the sinusoidal signal of a channel does
/// not change when other channels are pruned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub heads: Vec<usize>,
    pub kv_heads: Vec<usize>,
    /// Per layer: kv head used by each query head.
    pub kv_maps: Vec<Vec<usize>>,
    pub ffn: Vec<usize>,
    pub max_seq_len: usize,
    pub tied_embeddings: bool,
    pub positional: Positional,
    pub stem_ids: Vec<usize>,
    pub stem_base: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Same widths in every layer. Query heads are assigned to kv heads in
    /// contiguous blocks, so `heads` must be a multiple of `kv_heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        vocab_size: usize,
        hidden: usize,
        n_layers: usize,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
        ffn: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if kv_heads == 0 || !heads.is_multiple_of(kv_heads) {
            return Err(Error::config(
                "n_kv_heads",
                format!("{heads} query heads cannot be shared evenly by {kv_heads} kv heads"),
            ));
        }
        let per = heads / kv_heads;
        let cfg = Self {
            vocab_size,
            hidden,
            head_dim,
            heads: vec![heads; n_layers],
            kv_heads: vec![kv_heads; n_layers],
            kv_maps: vec![(0..heads).map(|j| j / per).collect(); n_layers],
            ffn: vec![ffn; n_layers],
            max_seq_len,
            tied_embeddings: false,
            positional: Positional::Sinusoidal,
            stem_ids: (0..hidden).collect(),
            stem_base: hidden,
            norm_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive".into());
        }
        if self.head_dim == 0 {
            return bad("head_dim", "must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len", "must be positive".into());
        }
        let l = self.n_layers();
        if l == 0 {
            return bad("n_layers", "must be positive".into());
        }
        if self.kv_heads.len() != l || self.ffn.len() != l || self.kv_maps.len() != l {
            return bad("n_layers", "per-layer lists have different lengths".into());
        }
        for layer in 0..l {
            let (h, kv) = (self.heads[layer], self.kv_heads[layer]);
            if h == 0 {
                return bad("n_heads", format!("layer {layer} has no query heads"));
            }
            if self.ffn[layer] == 0 {
                return bad("ffn", format!("layer {layer} has no FFN channels"));
            }
            if kv == 0 || kv > h {
                return bad("n_kv_heads", format!("layer {layer}: {kv} kv heads for {h} query heads"));
            }
            let map = &self.kv_maps[layer];
            if map.len() != h {
                return bad("kv_map", format!("layer {layer}: map covers {} of {h} heads", map.len()));
            }
            let mut used = vec![false; kv];
            for &k in map {
                if k >= kv {
                    return bad("kv_map", format!("layer {layer}: kv index {k} >= {kv}"));
                }
                used[k] = true;
            }
            if used.iter().any(|u| !u) {
                return bad("kv_map", format!("layer {layer}: a kv head has no query"));
            }
        }
        if self.stem_ids.len() != self.hidden {
            return bad("stem_ids", format!("{} ids for hidden {}", self.stem_ids.len(), self.hidden));
        }
        if self.stem_ids.iter().any(|&i| i >= self.stem_base)
            || self.stem_ids.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("stem_ids", "ids must be strictly increasing and below stem_base".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps", "must be positive".into());
        }
        Ok(())
    }

    /// Scalar parameter count implied by the shapes.
    pub fn parameter_count(&self) -> usize {
        let (v, m, d) = (self.vocab_size, self.hidden, self.head_dim);
        let head = if self.tied_embeddings { 0 } else { m * v };
        let blocks: usize = (0..self.n_layers())
            .map(|l| {
                let (h, kv, n) = (self.heads[l], self.kv_heads[l], self.ffn[l]);
                let attn = m * h * d * 2 + m * kv * d * 2;
                let mlp = 3 * m * n;
                attn + mlp + 2 * m
            })
            .sum();
        v * m + head + blocks + m
    }

    /// Number of query heads in `layer` that share kv head `kv`.
    pub fn kv_group_size(&self, layer: usize, kv: usize) -> usize {
        self.kv_maps[layer].iter().filter(|&&k| k == kv).count()
    }
}
