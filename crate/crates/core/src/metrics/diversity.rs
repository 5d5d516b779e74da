use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Vocab};

/// How `unique` is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UniqueMode {
    /// Share of generated captions occurring exactly once among all generated captions.
    #[default]
    Caption,
    /// Share of generated word types used by exactly one generated caption.
    Word,
}

/// Percentages on a 0–100 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub novel: f64,
    pub unique: f64,
    pub vocab: f64,
}

fn norm(s: &str) -> String {
    tokenize(s).join(" ")
}

/// `vocab_size` counts the full vocabulary including special tokens.
pub fn diversity(
    generated: &[&str],
    training: &[String],
    vocab_size: usize,
    mode: UniqueMode,
) -> Diversity {
    if generated.is_empty() {
        return Diversity {
            novel: 0.0,
            unique: 0.0,
            vocab: 0.0,
        };
    }
    let total = generated.len() as f64;
    let seen: HashSet<String> = training.iter().map(|s| norm(s)).collect();
    let gen: Vec<String> = generated.iter().map(|s| norm(s)).collect();
    let novel = gen.iter().filter(|g| !seen.contains(*g)).count() as f64 / total;

    let unique = match mode {
        UniqueMode::Caption => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for g in &gen {
                *counts.entry(g).or_insert(0) += 1;
            }
            gen.iter().filter(|g| counts[g.as_str()] == 1).count() as f64 / total
        }
        UniqueMode::Word => {
            let mut users: HashMap<&str, usize> = HashMap::new();
            for g in &gen {
                let words: HashSet<&str> = g.split(' ').filter(|w| !w.is_empty()).collect();
                for w in words {
                    *users.entry(w).or_insert(0) += 1;
                }
            }
            if users.is_empty() {
                0.0
            } else {
                users.values().filter(|&&c| c == 1).count() as f64 / users.len() as f64
            }
        }
    };

    let words: HashSet<&str> = gen
        .iter()
        .flat_map(|g| g.split(' '))
        .filter(|w| !w.is_empty())
        .collect();
    let content = vocab_size.saturating_sub(Vocab::SPECIALS).max(1);
    Diversity {
        novel: 100.0 * novel,
        unique: 100.0 * unique,
        vocab: 100.0 * words.len() as f64 / content as f64,
    }
}
