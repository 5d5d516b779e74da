use crate::error::{Error, Result};
use crate::metrics::{ngrams, Scored};

/// Corpus-level clipped n-gram precisions for orders `1..=n`, as `(matched, total)`.
pub fn bleu_precisions(corpus: &[Scored], n: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); n];
    for item in corpus {
        for (k, slot) in out.iter_mut().enumerate() {
            let hyp = ngrams(&item.hypothesis, k + 1);
            let mut max_ref: std::collections::HashMap<&[String], usize> = Default::default();
            for r in &item.references {
                for (g, c) in ngrams(r, k + 1) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hyp {
                slot.0 += c.min(max_ref.get(g).copied().unwrap_or(0));
                slot.1 += c;
            }
        }
    }
    out
}

/// Corpus BLEU-`n` on a 0–100 scale: geometric mean of clipped precisions
/// times the brevity penalty against the closest reference lengths. No smoothing.
pub fn bleu(corpus: &[Scored], n: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("BLEU needs at least one hypothesis"));
    }
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let precisions = bleu_precisions(corpus, n);
    if precisions.iter().any(|&(m, t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = precisions
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let hyp_len: usize = corpus.iter().map(|s| s.hypothesis.len()).sum();
    let ref_len: usize = corpus
        .iter()
        .map(|s| {
            let h = s.hypothesis.len();
            s.references
                .iter()
                .map(Vec::len)
                .min_by_key(|&r| (r.abs_diff(h), r))
                .unwrap_or(0)
        })
        .sum();
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}
