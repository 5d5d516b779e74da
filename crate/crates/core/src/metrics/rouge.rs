use crate::error::{Error, Result};
use crate::metrics::Scored;

pub const ROUGE_BETA: f64 = 1.2;

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one hypothesis against one reference, in `[0, 1]`.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over videos of the best per-reference F-measure, 0–100.
pub fn rouge_l(corpus: &[Scored]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("ROUGE-L needs at least one hypothesis"));
    }
    let total: f64 = corpus
        .iter()
        .map(|s| {
            s.references
                .iter()
                .map(|r| rouge_l_pair(&s.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(100.0 * total / corpus.len() as f64)
}
