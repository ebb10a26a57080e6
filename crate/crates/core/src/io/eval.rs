//! Held-out perplexity.

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::Scalar;

/// Windows scored per forward pass.
const EVAL_BATCH: usize = 16;

/// `exp` of the mean next-token cross-entropy over consecutive,
/// non-overlapping windows of `seq_len` predictions. Window `i` reads tokens
/// `i·seq_len ..= (i+1)·seq_len`, so every token after the first is predicted
/// exactly once. `max_windows` caps the work on large splits.
pub fn evaluate_perplexity<T: Scalar>(
    model: &TransformerModel<T>,
    split: &[u8],
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<f64> {
    if split.len() < 2 {
        return Err(Error::EmptySplit);
    }
    if seq_len == 0 {
        return Err(Error::config("seq_len", "must be at least 1"));
    }
    let mut windows: Vec<Vec<u32>> = (0..split.len() - 1)
        .step_by(seq_len)
        .map(|s| split[s..(s + seq_len + 1).min(split.len())].iter().map(|&b| b as u32).collect())
        .collect();
    if let Some(cap) = max_windows {
        windows.truncate(cap.max(1));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for chunk in windows.chunks(EVAL_BATCH) {
        let (loss, tape) = model.forward(chunk)?;
        let n = tape.token_count();
        nll += loss.f64() * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}
