use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::metrics::{ngrams, Scored};

const ORDERS: usize = 4;

type Vector<'s> = HashMap<&'s [String], f64>;

fn tfidf<'s>(tokens: &'s [String], n: usize, idf: &HashMap<&[String], f64>) -> Vector<'s> {
    let counts = ngrams(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let w = idf.get(g).copied().unwrap_or(0.0);
            (g, c as f64 / total as f64 * w)
        })
        .collect()
}

fn cosine(a: &Vector<'_>, b: &Vector<'_>) -> f64 {
    let dot: f64 = a
        .iter()
        .map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0))
        .sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: tf-idf cosine similarity to each reference, averaged over references
/// and over n-gram orders 1–4, times 10. Document frequencies count videos
/// whose references contain the n-gram; a vector with no weight scores 0.
pub fn cider(corpus: &[Scored]) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Data(format!(
            "CIDEr needs document frequencies from at least 2 videos, got {}; evaluate on a larger set",
            corpus.len()
        )));
    }
    let docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=ORDERS {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for s in corpus {
            let mut seen: Vec<&[String]> = s
                .references
                .iter()
                .flat_map(|r| ngrams(r, n).into_keys())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: HashMap<&[String], f64> = df
            .into_iter()
            .map(|(g, d)| (g, (docs / d as f64).ln()))
            .collect();
        for s in corpus {
            let h = tfidf(&s.hypothesis, n, &idf);
            let sims: f64 = s
                .references
                .iter()
                .map(|r| cosine(&h, &tfidf(r, n, &idf)))
                .sum();
            total += sims / s.references.len() as f64;
        }
    }
    Ok(10.0 * total / (ORDERS as f64 * docs))
}
