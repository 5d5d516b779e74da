//! Caption quality, diversity and throughput metrics.
//!
//! Text is tokenized exactly as in training: lowercased whitespace split.

mod bleu;
mod cider;
mod diversity;
mod rouge;
mod timing;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub use bleu::{bleu, bleu_precisions};
pub use cider::cider;
pub use diversity::{diversity, Diversity, UniqueMode};
pub use rouge::{rouge_l, rouge_l_pair, ROUGE_BETA};
pub use timing::{compare_vps, measure_vps, median, time_lengths, VpsReport, MIN_REPEATS};

/// One line of evaluation input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub video_id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

/// Tokenized hypothesis and references of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scored {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl Scored {
    pub fn new(hypothesis: &str, references: &[&str]) -> Self {
        Scored {
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

pub fn tokenize_items(items: &[EvalItem]) -> Result<Vec<Scored>> {
    items
        .iter()
        .map(|it| {
            if it.references.is_empty() {
                return Err(Error::Data(format!("{}: no references", it.video_id)));
            }
            Ok(Scored {
                hypothesis: tokenize(&it.hypothesis),
                references: it.references.iter().map(|r| tokenize(r)).collect(),
            })
        })
        .collect()
}

pub fn read_eval_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("eval line {}: {e}", i + 1)))
        })
        .collect()
}

/// Counts of every n-gram of order `n`.
pub(crate) fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Every metric of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// CIDEr including its ×10 factor.
    pub cider: f64,
    pub diversity: Option<Diversity>,
}

impl EvalReport {
    /// Scores `items`; diversity needs the training captions and vocabulary size.
    pub fn compute(
        items: &[EvalItem],
        training: Option<(&[String], usize)>,
        unique: UniqueMode,
    ) -> Result<Self> {
        let scored = tokenize_items(items)?;
        let mut b = [0.0; 4];
        for (n, slot) in b.iter_mut().enumerate() {
            *slot = bleu(&scored, n + 1)?;
        }
        let hyps: Vec<&str> = items.iter().map(|i| i.hypothesis.as_str()).collect();
        Ok(EvalReport {
            videos: items.len(),
            bleu: b,
            rouge_l: rouge_l(&scored)?,
            cider: cider(&scored)?,
            diversity: training.map(|(train, vocab)| diversity(&hyps, train, vocab, unique)),
        })
    }

    /// Flat `key=value` lines. Scores are ×100; CIDEr is its ×10 value ×100.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("videos={}\n", self.videos);
        for (n, v) in self.bleu.iter().enumerate() {
            out.push_str(&format!("bleu{}={v:.4}\n", n + 1));
        }
        out.push_str(&format!("rouge_l={:.4}\n", self.rouge_l));
        out.push_str(&format!("cider={:.4}\n", self.cider * 100.0));
        if let Some(d) = &self.diversity {
            out.push_str(&format!(
                "novel={:.4}\nunique={:.4}\nvocab_usage={:.4}\n",
                d.novel, d.unique, d.vocab
            ));
        }
        out
    }
}
