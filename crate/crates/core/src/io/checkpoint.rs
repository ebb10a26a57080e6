//! Checkpoint files: a text header of `key=value` lines ending in
//! `header_end`, followed by a payload of little-endian f32 tensors at the
//! byte offsets the header declares (relative to the payload start).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params, Positional, TensorId, TransformerModel};
use crate::numerics::{Matrix, RngState};
use crate::trainer::AdamWState;

pub const MAGIC: &str = "prunelab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransformerModel<f32>,
    pub step: usize,
    pub tokens: u64,
    pub rng: Option<RngState>,
    pub optimizer: Option<AdamWState<f32>>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model.config() == other.model.config()
            && self.model.params() == other.model.params()
            && self.step == other.step
            && self.tokens == other.tokens
            && self.rng == other.rng
            && self.optimizer == other.optimizer
    }
}

impl Checkpoint {
    pub fn new(model: TransformerModel<f32>) -> Self {
        Self {
            model,
            step: 0,
            tokens: 0,
            rng: None,
            optimizer: None,
        }
    }
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn tensors(ck: &Checkpoint) -> Vec<(String, &Matrix<f32>)> {
    let mut out: Vec<(String, &Matrix<f32>)> = ck
        .model
        .params()
        .tensors()
        .into_iter()
        .map(|(id, m)| (id.to_string(), m))
        .collect();
    if let Some(opt) = &ck.optimizer {
        for (prefix, p) in [("adam_m.", &opt.m), ("adam_v.", &opt.v)] {
            out.extend(p.tensors().into_iter().map(|(id, m)| (format!("{prefix}{id}"), m)));
        }
    }
    out
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let cfg = ck.model.config();
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC}");
    let _ = writeln!(h, "format_version={FORMAT_VERSION}");
    let _ = writeln!(h, "vocab_size={}", cfg.vocab_size);
    let _ = writeln!(h, "hidden={}", cfg.hidden);
    let _ = writeln!(h, "head_dim={}", cfg.head_dim);
    let _ = writeln!(h, "n_layers={}", cfg.n_layers());
    let _ = writeln!(h, "n_heads={}", join(&cfg.heads, ","));
    let _ = writeln!(h, "n_kv_heads={}", join(&cfg.kv_heads, ","));
    let maps: Vec<String> = cfg.kv_maps.iter().map(|m| join(m, ",")).collect();
    let _ = writeln!(h, "kv_maps={}", maps.join(";"));
    let _ = writeln!(h, "ffn={}", join(&cfg.ffn, ","));
    let _ = writeln!(h, "max_seq_len={}", cfg.max_seq_len);
    let _ = writeln!(h, "tied_embeddings={}", cfg.tied_embeddings);
    let _ = writeln!(h, "positional={}", cfg.positional.as_str());
    let _ = writeln!(h, "stem_ids={}", join(&cfg.stem_ids, ","));
    let _ = writeln!(h, "stem_base={}", cfg.stem_base);
    let _ = writeln!(h, "norm_eps={:?}", cfg.norm_eps);
    let _ = writeln!(h, "step={}", ck.step);
    let _ = writeln!(h, "tokens={}", ck.tokens);
    if let Some(r) = ck.rng {
        let _ = writeln!(h, "rng_seed={}", r.seed);
        let _ = writeln!(h, "rng_stream={}", r.stream);
        let _ = writeln!(h, "rng_word_pos={}", r.word_pos);
    }
    let _ = writeln!(h, "optimizer={}", ck.optimizer.is_some());
    if let Some(opt) = &ck.optimizer {
        let _ = writeln!(h, "optimizer_t={}", opt.t);
    }
    let ts = tensors(ck);
    let mut offset = 0usize;
    for (name, m) in &ts {
        let _ = writeln!(h, "tensor={name} {} {} {offset}", m.rows(), m.cols());
        offset += m.len() * 4;
    }
    let _ = writeln!(h, "header_end");
    let mut out = h.into_bytes();
    out.reserve(offset);
    for (_, m) in &ts {
        for &x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Header<'a> {
    fields: Vec<(&'a str, &'a str)>,
    tensors: Vec<(&'a str, usize, usize, usize)>,
}

impl<'a> Header<'a> {
    fn get(&self, key: &str) -> Result<&'a str> {
        self.fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| bad(format!("missing header key {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| bad(format!("bad value for {key}: {v}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        parse_list(self.get(key)?, key)
    }
}

fn parse_list(v: &str, key: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| bad(format!("bad list entry for {key}: {x}"))))
        .collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\nheader_end\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("no header_end line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[end + marker.len()..];
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a prunelab checkpoint"));
    }
    let mut header = Header {
        fields: Vec::new(),
        tensors: Vec::new(),
    };
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line: {line}")))?;
        if k == "tensor" {
            let parts: Vec<&str> = v.split(' ').collect();
            let n = |i: usize| -> Result<usize> {
                parts
                    .get(i)
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| bad(format!("malformed tensor line: {line}")))
            };
            if parts.len() != 4 {
                return Err(bad(format!("malformed tensor line: {line}")));
            }
            header.tensors.push((parts[0], n(1)?, n(2)?, n(3)?));
        } else {
            header.fields.push((k, v));
        }
    }
    let version: u32 = header.num("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }

    let layers: usize = header.num("n_layers")?;
    let kv_maps: Vec<Vec<usize>> = if layers == 0 {
        Vec::new()
    } else {
        header
            .get("kv_maps")?
            .split(';')
            .map(|m| parse_list(m, "kv_maps"))
            .collect::<Result<_>>()?
    };
    let positional = header.get("positional")?;
    let cfg = ModelConfig {
        vocab_size: header.num("vocab_size")?,
        hidden: header.num("hidden")?,
        head_dim: header.num("head_dim")?,
        heads: header.list("n_heads")?,
        kv_heads: header.list("n_kv_heads")?,
        kv_maps,
        ffn: header.list("ffn")?,
        max_seq_len: header.num("max_seq_len")?,
        tied_embeddings: header.num("tied_embeddings")?,
        positional: Positional::parse(positional).ok_or_else(|| bad(format!("unknown positional {positional}")))?,
        stem_ids: header.list("stem_ids")?,
        stem_base: header.num("stem_base")?,
        norm_eps: header.num("norm_eps")?,
    };
    if cfg.n_layers() != layers {
        return Err(bad("n_layers disagrees with per-layer lists"));
    }
    cfg.validate()?;

    let read = |name: &str, shape: (usize, usize)| -> Result<Matrix<f32>> {
        let &(_, rows, cols, offset) = header
            .tensors
            .iter()
            .find(|t| t.0 == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if (rows, cols) != shape {
            return Err(bad(format!("tensor {name} is {rows}x{cols}, config implies {}x{}", shape.0, shape.1)));
        }
        let len = rows * cols * 4;
        let raw = payload
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("tensor {name} runs past the end of the payload")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let fill = |prefix: &str| -> Result<Params<f32>> {
        let mut p = Params::<f32>::zeros(&cfg);
        for id in p.ids() {
            let target = p.get_mut(id).expect("listed id");
            *target = read(&format!("{prefix}{id}"), target.shape())?;
        }
        Ok(p)
    };
    let model = TransformerModel::new(cfg.clone(), fill("")?)?;
    let optimizer = if header.num::<bool>("optimizer")? {
        Some(AdamWState {
            m: fill("adam_m.")?,
            v: fill("adam_v.")?,
            t: header.num("optimizer_t")?,
        })
    } else {
        None
    };
    let rng = if header.fields.iter().any(|(k, _)| *k == "rng_seed") {
        Some(RngState {
            seed: header.num("rng_seed")?,
            stream: header.num("rng_stream")?,
            word_pos: header.num("rng_word_pos")?,
        })
    } else {
        None
    };
    let unknown: usize = header
        .tensors
        .iter()
        .filter(|t| TensorId::parse(t.0.trim_start_matches("adam_m.").trim_start_matches("adam_v.")).is_none())
        .count();
    if unknown != 0 {
        return Err(bad("checkpoint declares tensors this model does not have"));
    }
    Ok(Checkpoint {
        model,
        step: header.num("step")?,
        tokens: header.num("tokens")?,
        rng,
        optimizer,
    })
}
