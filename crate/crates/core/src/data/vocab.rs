use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;

use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

/// Lowercased whitespace tokenization, the only tokenization the pipeline uses.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word vocabulary. Ids 0, 1 and 2 are `[PAD]`, `[UNK]` and `[MASK]`; corpus words follow
/// in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const MASK_ID: usize = 2;
    pub const SPECIALS: usize = 3;

    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut all: Vec<String> = vec![PAD.into(), UNK.into(), MASK.into()];
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK, String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < Self::SPECIALS
    }

    /// Words excluding the special tokens.
    pub fn content_words(&self) -> &[String] {
        &self.words[Self::SPECIALS..]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(Self::UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line, specials included, in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < Self::SPECIALS || words[..3] != [PAD, UNK, MASK] {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {PAD}, {UNK}, {MASK}",
                path.as_ref().display()
            )));
        }
        Ok(Self::from_words(words.into_iter().skip(Self::SPECIALS)))
    }
}

/// The object vocabulary: focused-object words and their ids in the word vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectVocab {
    words: Vec<String>,
    tokens: Vec<usize>,
    by_token: HashMap<usize, usize>,
}

impl ObjectVocab {
    /// Keeps the words present in `vocab`; the rest are returned and logged.
    pub fn new(words: &[String], vocab: &Vocab) -> (Self, Vec<String>) {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for w in words {
            match vocab.id(w) {
                Some(id) if !Vocab::is_special(id) && !kept.iter().any(|(k, _)| k == w) => {
                    kept.push((w.clone(), id))
                }
                Some(_) => {}
                None => {
                    warn!("object word {w:?} is not in the caption vocabulary; dropped");
                    dropped.push(w.clone());
                }
            }
        }
        let by_token = kept.iter().enumerate().map(|(i, (_, t))| (*t, i)).collect();
        let (words, tokens) = kept.into_iter().unzip();
        (
            ObjectVocab {
                words,
                tokens,
                by_token,
            },
            dropped,
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, obj: usize) -> &str {
        &self.words[obj]
    }

    pub fn index_of_word(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Word-vocabulary id of object `obj`.
    pub fn token(&self, obj: usize) -> usize {
        self.tokens[obj]
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Object index of a word-vocabulary id, if that word is an object.
    pub fn object_of_token(&self, token: usize) -> Option<usize> {
        self.by_token.get(&token).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    /// Reads a one-word-per-line list (blank lines ignored).
    pub fn read_word_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Ok(text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect())
    }
}

/// Counts caption words, keeps those seen at least `min_count` times, and
/// attaches the object vocabulary (object words falling below the threshold are dropped).
pub fn build_vocab(
    manifest: &DatasetManifest,
    min_count: usize,
    object_words: &[String],
) -> Result<(Vocab, ObjectVocab)> {
    if manifest.records.is_empty() {
        return Err(Error::Empty("manifest has no videos"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for rec in &manifest.records {
        for cap in &rec.captions {
            for w in tokenize(cap) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let vocab = Vocab::from_words(
        counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(w, _)| w),
    );
    let (objects, _) = ObjectVocab::new(object_words, &vocab);
    Ok((vocab, objects))
}
