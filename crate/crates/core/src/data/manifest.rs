use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::tokenize;
use crate::error::{Error, Result};

/// One video and its captions. `objects[i]` lists the object words of `captions[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub captions: Vec<String>,
    pub objects: Vec<Vec<String>>,
    pub union_objects: Vec<String>,
}

impl VideoRecord {
    /// Builds a record, annotating objects by exact membership in `object_words`.
    pub fn annotate(video_id: String, captions: Vec<String>, object_words: &[String]) -> Self {
        let objects: Vec<Vec<String>> = captions
            .iter()
            .map(|c| {
                let mut found: Vec<String> = Vec::new();
                for w in tokenize(c) {
                    if object_words.contains(&w) && !found.contains(&w) {
                        found.push(w);
                    }
                }
                found
            })
            .collect();
        let mut union_objects: Vec<String> = Vec::new();
        for w in objects.iter().flatten() {
            if !union_objects.contains(w) {
                union_objects.push(w.clone());
            }
        }
        VideoRecord {
            video_id,
            captions,
            objects,
            union_objects,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<VideoRecord>>>()?;
        let m = DatasetManifest { records };
        m.validate()?;
        Ok(m)
    }

    /// Checks that each caption's object list occurs in that caption and that
    /// `union_objects` is exactly the union.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.objects.len() != r.captions.len() {
                return Err(Error::Data(format!(
                    "{}: {} captions but {} object lists",
                    r.video_id,
                    r.captions.len(),
                    r.objects.len()
                )));
            }
            let mut union: Vec<&String> = Vec::new();
            for (cap, objs) in r.captions.iter().zip(&r.objects) {
                let toks = tokenize(cap);
                for o in objs {
                    if !toks.contains(o) {
                        return Err(Error::Data(format!(
                            "{}: object {o:?} not in caption {cap:?}",
                            r.video_id
                        )));
                    }
                    if !union.contains(&o) {
                        union.push(o);
                    }
                }
            }
            let mut a: Vec<&String> = union;
            let mut b: Vec<&String> = r.union_objects.iter().collect();
            a.sort();
            b.sort();
            if a != b {
                return Err(Error::Data(format!(
                    "{}: union_objects {:?} differs from caption objects",
                    r.video_id, r.union_objects
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_jsonl(&text)
    }
}
