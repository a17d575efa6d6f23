//! Corpus-level BLEU over token-id sequences.
//!
//! Modified n-gram precision up to `max_n`, geometric mean, and the
//! brevity penalty `exp(min(0, 1 - ref_len/hyp_len))`. Counts for n >= 2
//! are add-one smoothed so short hypotheses score nonzero; unigram
//! precision is left raw, so a hypothesis sharing no unigram with its
//! reference scores exactly 0.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Clipped n-gram matches and totals for one order.
fn ngram_stats(hyp: &[usize], reference: &[usize], n: usize) -> (u64, u64) {
    if hyp.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[usize], u64> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[usize], u64> = HashMap::new();
    for gram in hyp.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    let total = (hyp.len() - n + 1) as u64;
    let mut matches = 0;
    for (gram, count) in hyp_counts {
        let clip = ref_counts.get(gram).copied().unwrap_or(0);
        matches += count.min(clip);
    }
    (matches, total)
}

/// Corpus BLEU in [0, 1]. `hypotheses` and `references` pair up index by
/// index and must have equal length.
pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Degenerate {
            op: "bleu",
            detail: "empty corpus".into(),
        });
    }
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "bleu",
            lhs: vec![hypotheses.len()],
            rhs: vec![references.len()],
        });
    }
    if max_n == 0 {
        return Err(Error::InvalidDimension {
            op: "bleu",
            detail: "max_n must be at least 1".into(),
        });
    }

    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let (m, t) = ngram_stats(hyp, reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let (m, t) = (matches[n - 1], totals[n - 1]);
        let p = if n == 1 {
            if t == 0 {
                return Ok(0.0);
            }
            m as f64 / t as f64
        } else {
            // add-one smoothing
            (m + 1) as f64 / (t + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(geo * bp)
}
