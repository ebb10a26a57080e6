//! The pruning space: coupled minimal parameter groups for attention heads,
//! FFN channels and stem channels, and their physical removal.
//!
//! An attention group removes one head in every layer (its `d_h` columns of
//! `W_q`, its `d_h` rows of `W_o`, and the `W_k`/`W_v` columns of its kv head
//! when no other query still shares it). An FFN group removes one
//! intermediate channel in every layer. A stem group removes the same hidden
//! channel everywhere: embedding column, input rows of every q/k/v/up/gate
//! projection, output columns of every `W_o`/`W_down`, the matching norm gain
//! entries, and the LM-head row.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerTensor, ModelConfig, Params, TensorId, TransformerModel};
use crate::numerics::Scalar;

/// Group kinds, declared in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupType {
    Attn,
    Ffn,
    Stem,
}

impl GroupType {
    pub const ALL: [GroupType; 3] = [GroupType::Attn, GroupType::Ffn, GroupType::Stem];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupType::Attn => "attn",
            GroupType::Ffn => "ffn",
            GroupType::Stem => "stem",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        GroupType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for GroupType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which unit is removed: one head / channel index per layer, or one shared
/// stem index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Attn(Vec<usize>),
    Ffn(Vec<usize>),
    Stem(usize),
}

impl Selection {
    pub fn group_type(&self) -> GroupType {
        match self {
            Selection::Attn(_) => GroupType::Attn,
            Selection::Ffn(_) => GroupType::Ffn,
            Selection::Stem(_) => GroupType::Stem,
        }
    }

    /// Per-layer indices (a stem selection yields its single index).
    pub fn indices(&self) -> Vec<usize> {
        match self {
            Selection::Attn(v) | Selection::Ffn(v) => v.clone(),
            Selection::Stem(i) => vec![*i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// A contiguous band of rows or columns of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberSlice {
    pub tensor: TensorId,
    pub axis: Axis,
    pub start: usize,
    pub len: usize,
    /// Scalar parameters in the band.
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ShapeKey {
    hidden: usize,
    heads: Vec<usize>,
    kv_heads: Vec<usize>,
    kv_maps: Vec<Vec<usize>>,
    ffn: Vec<usize>,
}

impl ShapeKey {
    fn of(cfg: &ModelConfig) -> Self {
        Self {
            hidden: cfg.hidden,
            heads: cfg.heads.clone(),
            kv_heads: cfg.kv_heads.clone(),
            kv_maps: cfg.kv_maps.clone(),
            ffn: cfg.ffn.clone(),
        }
    }
}

/// One prunable coupled parameter set, built against a specific model shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniGroup {
    selection: Selection,
    slices: Vec<MemberSlice>,
    size: usize,
    shape: ShapeKey,
}

impl MiniGroup {
    pub fn group_type(&self) -> GroupType {
        self.selection.group_type()
    }

    pub fn selection(&self) -> &Selection {
        &self.selection
    }

    pub fn slices(&self) -> &[MemberSlice] {
        &self.slices
    }

    /// Total scalar parameters removed.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Removes this group's slices from any tensor set shaped like the model
    /// the group was built for (weights, gradients, optimizer moments).
    pub fn remove_from<U: Scalar>(&self, params: &mut Params<U>) -> Result<()> {
        for s in &self.slices {
            let m = params.get_mut(s.tensor).ok_or(Error::StaleGroup)?;
            match s.axis {
                Axis::Rows => m.remove_rows(s.start, s.len)?,
                Axis::Cols => m.remove_cols(s.start, s.len)?,
            }
        }
        Ok(())
    }

    /// Config after this group is removed.
    pub fn pruned_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        if ShapeKey::of(cfg) != self.shape {
            return Err(Error::StaleGroup);
        }
        let mut out = cfg.clone();
        match &self.selection {
            Selection::Attn(heads) => {
                for (l, &j) in heads.iter().enumerate() {
                    let (map, removed) = gqa_remap(&cfg.kv_maps[l], cfg.kv_heads[l], j);
                    out.kv_maps[l] = map;
                    out.heads[l] -= 1;
                    if removed.is_some() {
                        out.kv_heads[l] -= 1;
                    }
                }
            }
            Selection::Ffn(chans) => {
                for (l, _) in chans.iter().enumerate() {
                    out.ffn[l] -= 1;
                }
            }
            Selection::Stem(i) => {
                out.hidden -= 1;
                out.stem_ids.remove(*i);
            }
        }
        Ok(out)
    }
}

/// Floors and enabled group types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpace {
    pub min_heads: usize,
    pub min_ffn: usize,
    pub min_hidden: usize,
    pub enabled: Vec<GroupType>,
}

impl PruneSpace {
    /// Default floors: one head and one FFN channel per layer, hidden ≥ 2·d_h.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            min_heads: 1,
            min_ffn: 1,
            min_hidden: 2 * cfg.head_dim,
            enabled: GroupType::ALL.to_vec(),
        }
    }

    pub fn floor_check(&self, cfg: &ModelConfig, kind: GroupType) -> Result<()> {
        match kind {
            GroupType::Attn => match cfg.heads.iter().copied().min() {
                Some(h) if h <= self.min_heads => Err(Error::FloorViolation {
                    what: "heads",
                    current: h,
                    floor: self.min_heads,
                }),
                _ => Ok(()),
            },
            GroupType::Ffn => match cfg.ffn.iter().copied().min() {
                Some(n) if n <= self.min_ffn => Err(Error::FloorViolation {
                    what: "ffn",
                    current: n,
                    floor: self.min_ffn,
                }),
                _ => Ok(()),
            },
            GroupType::Stem if cfg.hidden <= self.min_hidden => Err(Error::FloorViolation {
                what: "hidden",
                current: cfg.hidden,
                floor: self.min_hidden,
            }),
            GroupType::Stem => Ok(()),
        }
    }

    /// Enabled and not at its floor.
    pub fn eligible(&self, cfg: &ModelConfig, kind: GroupType) -> bool {
        self.enabled.contains(&kind) && self.floor_check(cfg, kind).is_ok()
    }
}

/// Query→kv mapping after removing query head `pruned`.
///
/// Returns the new mapping and the removed kv head, if `pruned` was the last
/// query sharing it. Surviving kv heads are renumbered densely.
pub fn gqa_remap(map: &[usize], kv_heads: usize, pruned: usize) -> (Vec<usize>, Option<usize>) {
    let kv = map[pruned];
    let orphaned = map.iter().filter(|&&k| k == kv).count() == 1;
    debug_assert!(map.iter().all(|&k| k < kv_heads));
    let new_map = map
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != pruned)
        .map(|(_, &k)| if orphaned && k > kv { k - 1 } else { k })
        .collect();
    (new_map, orphaned.then_some(kv))
}

fn push(
    slices: &mut Vec<MemberSlice>,
    params_shape: &dyn Fn(TensorId) -> (usize, usize),
    tensor: TensorId,
    axis: Axis,
    start: usize,
    len: usize,
) {
    let (rows, cols) = params_shape(tensor);
    let elements = match axis {
        Axis::Rows => len * cols,
        Axis::Cols => len * rows,
    };
    slices.push(MemberSlice {
        tensor,
        axis,
        start,
        len,
        elements,
    });
}

/// Builds the coupled group for `selection` against `cfg`.
pub fn build_group_for(cfg: &ModelConfig, space: &PruneSpace, selection: Selection) -> Result<MiniGroup> {
    let n_layers = cfg.n_layers();
    let d = cfg.head_dim;
    let m = cfg.hidden;
    space.floor_check(cfg, selection.group_type())?;

    let shape = |id: TensorId| -> (usize, usize) {
        match id {
            TensorId::Embedding => (cfg.vocab_size, m),
            TensorId::LmHead => (m, cfg.vocab_size),
            TensorId::FinalNorm => (1, m),
            TensorId::Layer(l, t) => {
                let (h, kv, n) = (cfg.heads[l], cfg.kv_heads[l], cfg.ffn[l]);
                match t {
                    LayerTensor::Wq => (m, h * d),
                    LayerTensor::Wk | LayerTensor::Wv => (m, kv * d),
                    LayerTensor::Wo => (h * d, m),
                    LayerTensor::Up | LayerTensor::Gate => (m, n),
                    LayerTensor::Down => (n, m),
                    LayerTensor::AttnNorm | LayerTensor::FfnNorm => (1, m),
                }
            }
        }
    };

    let mut slices = Vec::new();
    match &selection {
        Selection::Attn(heads) | Selection::Ffn(heads) if heads.len() != n_layers => {
            return Err(Error::IndexOutOfRange {
                what: "layer selection",
                index: heads.len(),
                len: n_layers,
            });
        }
        Selection::Attn(heads) => {
            for (l, &j) in heads.iter().enumerate() {
                if j >= cfg.heads[l] {
                    return Err(Error::IndexOutOfRange {
                        what: "head",
                        index: j,
                        len: cfg.heads[l],
                    });
                }
                let lt = |t| TensorId::Layer(l, t);
                push(&mut slices, &shape, lt(LayerTensor::Wq), Axis::Cols, j * d, d);
                let kv = cfg.kv_maps[l][j];
                if cfg.kv_group_size(l, kv) == 1 {
                    push(&mut slices, &shape, lt(LayerTensor::Wk), Axis::Cols, kv * d, d);
                    push(&mut slices, &shape, lt(LayerTensor::Wv), Axis::Cols, kv * d, d);
                }
                push(&mut slices, &shape, lt(LayerTensor::Wo), Axis::Rows, j * d, d);
            }
        }
        Selection::Ffn(chans) => {
            for (l, &i) in chans.iter().enumerate() {
                if i >= cfg.ffn[l] {
                    return Err(Error::IndexOutOfRange {
                        what: "ffn channel",
                        index: i,
                        len: cfg.ffn[l],
                    });
                }
                let lt = |t| TensorId::Layer(l, t);
                push(&mut slices, &shape, lt(LayerTensor::Up), Axis::Cols, i, 1);
                push(&mut slices, &shape, lt(LayerTensor::Gate), Axis::Cols, i, 1);
                push(&mut slices, &shape, lt(LayerTensor::Down), Axis::Rows, i, 1);
            }
        }
        Selection::Stem(i) => {
            let i = *i;
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    what: "stem channel",
                    index: i,
                    len: m,
                });
            }
            push(&mut slices, &shape, TensorId::Embedding, Axis::Cols, i, 1);
            for l in 0..n_layers {
                let lt = |t| TensorId::Layer(l, t);
                for t in [LayerTensor::Wq, LayerTensor::Wk, LayerTensor::Wv] {
                    push(&mut slices, &shape, lt(t), Axis::Rows, i, 1);
                }
                push(&mut slices, &shape, lt(LayerTensor::Wo), Axis::Cols, i, 1);
                for t in [LayerTensor::Up, LayerTensor::Gate] {
                    push(&mut slices, &shape, lt(t), Axis::Rows, i, 1);
                }
                push(&mut slices, &shape, lt(LayerTensor::Down), Axis::Cols, i, 1);
                push(&mut slices, &shape, lt(LayerTensor::AttnNorm), Axis::Cols, i, 1);
                push(&mut slices, &shape, lt(LayerTensor::FfnNorm), Axis::Cols, i, 1);
            }
            push(&mut slices, &shape, TensorId::FinalNorm, Axis::Cols, i, 1);
            if !cfg.tied_embeddings {
                push(&mut slices, &shape, TensorId::LmHead, Axis::Rows, i, 1);
            }
        }
    }
    let size = slices.iter().map(|s| s.elements).sum();
    Ok(MiniGroup {
        selection,
        slices,
        size,
        shape: ShapeKey::of(cfg),
    })
}

pub fn build_group<T: Scalar>(
    model: &TransformerModel<T>,
    space: &PruneSpace,
    selection: Selection,
) -> Result<MiniGroup> {
    build_group_for(model.config(), space, selection)
}

/// Physically removes `group` from `model` and updates its config, including
/// the query→kv remapping for attention groups.
pub fn apply_prune<T: Scalar>(model: &mut TransformerModel<T>, group: &MiniGroup) -> Result<()> {
    let new_cfg = group.pruned_config(model.config())?;
    let (cfg, params) = model.parts_mut();
    group.remove_from(params)?;
    *cfg = new_cfg;
    debug_assert!(params.matches(cfg));
    Ok(())
}
