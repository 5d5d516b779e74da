//! Inference: object selection, three-step parallel generation, refinement,
//! de-duplication and length-beam candidate selection.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{FeatureSet, ObjectVocab, Vocab};
use crate::error::{Error, Result};
use crate::model::{Generator, O2na};
use crate::nn::{MemoryKv, SeqLayout};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// User control over one decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    /// Object indices forced to 1.
    pub forced_on: Vec<usize>,
    /// Object indices forced to 0.
    pub forced_off: Vec<usize>,
    /// When set, every object not in `forced_on` is set to 0.
    pub exclusive: bool,
    pub gamma: f64,
    pub length: Option<usize>,
    pub iterations: usize,
    pub lock_objects: bool,
    /// Number of length candidates for noisy parallel decoding.
    pub beam: usize,
    pub dedup: bool,
    pub refine_ratio: f64,
}

impl Default for ControlSpec {
    fn default() -> Self {
        ControlSpec {
            forced_on: Vec::new(),
            forced_off: Vec::new(),
            exclusive: false,
            gamma: 0.8,
            length: None,
            iterations: 1,
            lock_objects: false,
            beam: 5,
            dedup: true,
            refine_ratio: 0.5,
        }
    }
}

impl ControlSpec {
    pub fn validate(&self, objects: usize, max_len: usize) -> Result<()> {
        for &o in self.forced_on.iter().chain(&self.forced_off) {
            if o >= objects {
                return Err(Error::Index {
                    what: "object id",
                    index: o,
                    bound: objects,
                });
            }
        }
        if let Some(o) = self.forced_on.iter().find(|o| self.forced_off.contains(o)) {
            return Err(Error::Config(format!(
                "object {o} is both forced on and forced off"
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.refine_ratio) {
            return Err(Error::Config(format!(
                "refine ratio {} outside [0, 1]",
                self.refine_ratio
            )));
        }
        if let Some(l) = self.length {
            if l == 0 || l > max_len {
                return Err(Error::Length {
                    len: l,
                    max: max_len,
                });
            }
        }
        if self.beam == 0 {
            return Err(Error::Config("length beam must be at least 1".into()));
        }
        Ok(())
    }
}

/// Thresholds object probabilities at `gamma` (strictly greater selects), then
/// applies the overrides. The result is exactly 0 or 1 everywhere.
pub fn select_objects(probs: &[f64], spec: &ControlSpec) -> Result<Vec<f64>> {
    for &o in spec.forced_on.iter().chain(&spec.forced_off) {
        if o >= probs.len() {
            return Err(Error::Index {
                what: "object id",
                index: o,
                bound: probs.len(),
            });
        }
    }
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if !spec.exclusive && p > spec.gamma {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for &o in &spec.forced_on {
        out[o] = 1.0;
    }
    for &o in &spec.forced_off {
        out[o] = 0.0;
    }
    Ok(out)
}

/// Masks the `n` lowest-confidence positions (ties go to the lower index),
/// skipping locked ones. Returns the new tokens, the masked positions in
/// ascending order and whether `n` had to be clamped.
pub fn remask_lowest_confidence(
    tokens: &[usize],
    confidences: &[f64],
    n: usize,
    locked: &[bool],
) -> (Vec<usize>, Vec<usize>, bool) {
    let mut order: Vec<usize> = (0..tokens.len())
        .filter(|&i| !locked.get(i).copied().unwrap_or(false))
        .collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let clamped = n > order.len();
    let mut masked: Vec<usize> = order.into_iter().take(n).collect();
    masked.sort_unstable();
    let mut out = tokens.to_vec();
    for &i in &masked {
        out[i] = Vocab::MASK_ID;
    }
    (out, masked, clamped)
}

/// Collapses runs of the same token.
pub fn deduplicate(tokens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// One refinement round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub masked: Vec<usize>,
    pub tokens: Vec<usize>,
    pub clamped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub op: f64,
    pub lp: f64,
    pub og: f64,
    pub cg: f64,
    pub refine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Selected object indices.
    pub objects: Vec<usize>,
    pub object_probs: Vec<f64>,
    pub length: usize,
    /// `Y_obj`: object words at their positions, `[MASK]` elsewhere.
    pub draft: Vec<usize>,
    /// `Y_1`, the first caption-generator output.
    pub first: Vec<usize>,
    pub iterations: Vec<Iteration>,
    /// Output of the last pass, exactly `length` tokens.
    pub final_tokens: Vec<usize>,
    pub confidences: Vec<f64>,
    pub stripped: usize,
    pub forward_passes: usize,
    /// Mean log-probability of `final_tokens` under the last pass.
    pub score: f64,
    pub stage_ms: StageTimes,
}

/// A finished decode: stripped (and optionally de-duplicated) tokens plus trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace,
}

/// Scores a finished caption with an external model (teacher re-scoring).
pub trait Rescorer {
    /// Higher is better.
    fn score(&self, image: &Tensor, motion: &Tensor, tokens: &[usize]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpdResult {
    pub best: usize,
    pub candidates: Vec<Decoded>,
}

impl NpdResult {
    pub fn best(&self) -> &Decoded {
        &self.candidates[self.best]
    }
}

struct Prepared {
    objects: Var,
    selected: Vec<f64>,
    probs: Vec<f64>,
    length_probs: Vec<f64>,
    og_mem: Vec<MemoryKv>,
    cg_mem: Vec<MemoryKv>,
    op_ms: f64,
    lp_ms: f64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn row_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Per-row argmax tokens and their probabilities.
fn argmax_rows(t: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (r, c) = t.dims2()?;
    let mut toks = Vec::with_capacity(r);
    let mut conf = Vec::with_capacity(r);
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelState("non-finite logits".into()));
        }
        let p = row_softmax(row);
        let (best, &pb) =
            p.iter().enumerate().fold(
                (0, &p[0]),
                |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc },
            );
        toks.push(best);
        conf.push(pb);
    }
    Ok((toks, conf))
}

/// Read-only decoder over a trained model.
pub struct Decoder<'m> {
    pub model: &'m O2na,
    pub store: &'m ParamStore,
    pub objects: &'m ObjectVocab,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m O2na, store: &'m ParamStore, objects: &'m ObjectVocab) -> Result<Self> {
        if !store.all_finite() {
            return Err(Error::ModelState(
                "parameters contain NaN or infinity".into(),
            ));
        }
        if objects.len() != model.config.objects {
            return Err(Error::ModelState(format!(
                "object vocabulary has {} entries, model expects {}",
                objects.len(),
                model.config.objects
            )));
        }
        Ok(Decoder {
            model,
            store,
            objects,
        })
    }

    fn prepare(
        &self,
        tape: &mut Tape<'m>,
        image: &Tensor,
        motion: &Tensor,
        spec: &ControlSpec,
    ) -> Result<Prepared> {
        let m = self.model;
        spec.validate(m.config.objects, m.config.max_len)?;
        let t0 = Instant::now();
        let i = tape.constant(image.clone());
        let mo = tape.constant(motion.clone());
        let v = m.project_features(tape, self.store, i, mo, 1)?;
        let z = m.predict_objects(tape, self.store, v)?;
        let probs: Vec<f64> = tape
            .value(z)
            .data()
            .iter()
            .map(|&x| crate::tape::sigmoid(x))
            .collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelState("non-finite object probabilities".into()));
        }
        let selected = select_objects(&probs, spec)?;
        let op_ms = ms(t0);

        let t1 = Instant::now();
        let objects = tape.constant(Tensor::new(&[1, selected.len()], selected.clone())?);
        let lz = m.predict_length(tape, self.store, v, objects)?;
        let length_probs = row_softmax(tape.value(lz).data());
        let lp_ms = ms(t1);

        let og_mem = m.memory(tape, self.store, Generator::Object, v)?;
        let cg_mem = m.memory(tape, self.store, Generator::Caption, v)?;
        Ok(Prepared {
            objects,
            selected,
            probs,
            length_probs,
            og_mem,
            cg_mem,
            op_ms,
            lp_ms,
        })
    }

    fn caption_pass(
        &self,
        tape: &mut Tape<'m>,
        prep: &Prepared,
        tokens: &[usize],
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let seq = SeqLayout::single(tokens.len());
        let logits = self.model.generate_caption_logits(
            tape,
            self.store,
            tokens,
            &seq,
            &prep.cg_mem,
            prep.objects,
        )?;
        argmax_rows(tape.value(logits))
    }

    fn generate(
        &self,
        tape: &mut Tape<'m>,
        prep: &Prepared,
        length: usize,
        spec: &ControlSpec,
    ) -> Result<Decoded> {
        let forced: Vec<usize> = spec.forced_on.clone();
        let length = if spec.lock_objects {
            length.max(forced.len()).min(self.model.config.max_len)
        } else {
            length
        };
        let t_og = Instant::now();
        let seq = SeqLayout::single(length);
        let p0 = self.model.generate_objects_logits(
            tape,
            self.store,
            &seq,
            &prep.og_mem,
            prep.objects,
        )?;
        let (mut draft, _) = argmax_rows(tape.value(p0))?;
        let selected_tokens: Vec<usize> = prep
            .selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 1.0)
            .map(|(o, _)| self.objects.token(o))
            .collect();
        let mut locked = vec![false; length];
        if spec.lock_objects {
            for (i, t) in draft.iter().enumerate() {
                locked[i] = selected_tokens.contains(t);
            }
            // Forced objects the generator did not place go where it rates them highest.
            let p0v = tape.value(p0);
            let forced_tokens: Vec<usize> = forced.iter().map(|&o| self.objects.token(o)).collect();
            for &tok in &forced_tokens {
                if draft.contains(&tok) {
                    continue;
                }
                let best = (0..length)
                    .filter(|&i| !forced_tokens.contains(&draft[i]))
                    .max_by(|&a, &b| p0v.row(a)[tok].total_cmp(&p0v.row(b)[tok]).then(b.cmp(&a)));
                if let Some(i) = best {
                    draft[i] = tok;
                    locked[i] = true;
                }
            }
        }
        let og_ms = ms(t_og);

        let t_cg = Instant::now();
        let (mut tokens, mut conf) = self.caption_pass(tape, prep, &draft)?;
        let pin = |tokens: &mut Vec<usize>| {
            for i in 0..length {
                if locked[i] {
                    tokens[i] = draft[i];
                }
            }
        };
        pin(&mut tokens);
        let first = tokens.clone();
        let cg_ms = ms(t_cg);

        let t_rf = Instant::now();
        let n = (length as f64 * spec.refine_ratio).floor() as usize;
        let mut iterations = Vec::with_capacity(spec.iterations);
        for _ in 0..spec.iterations {
            let (x2, masked, clamped) = remask_lowest_confidence(&tokens, &conf, n, &locked);
            let (t2, c2) = self.caption_pass(tape, prep, &x2)?;
            for &i in &masked {
                tokens[i] = t2[i];
                conf[i] = c2[i];
            }
            pin(&mut tokens);
            iterations.push(Iteration {
                masked,
                tokens: tokens.clone(),
                clamped,
            });
        }
        let refine_ms = ms(t_rf);

        let final_tokens = tokens;
        let score = conf.iter().map(|c| c.ln()).sum::<f64>() / length as f64;
        let kept: Vec<usize> = final_tokens
            .iter()
            .copied()
            .filter(|&t| t != Vocab::MASK_ID && t != Vocab::PAD_ID)
            .collect();
        let stripped = length - kept.len();
        let out = if spec.dedup { deduplicate(&kept) } else { kept };
        let trace = DecodeTrace {
            objects: prep
                .selected
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == 1.0)
                .map(|(o, _)| o)
                .collect(),
            object_probs: prep.probs.clone(),
            length,
            draft,
            first,
            iterations,
            final_tokens,
            confidences: conf,
            stripped,
            forward_passes: 2 + spec.iterations,
            score,
            stage_ms: StageTimes {
                op: prep.op_ms,
                lp: prep.lp_ms,
                og: og_ms,
                cg: cg_ms,
                refine: refine_ms,
            },
        };
        Ok(Decoded { tokens: out, trace })
    }

    /// Decodes one video at the predicted (or requested) length.
    pub fn decode(&self, image: &Tensor, motion: &Tensor, spec: &ControlSpec) -> Result<Decoded> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, image, motion, spec)?;
        let length = match spec.length {
            Some(l) => l,
            None => argmax_length(&prep.length_probs),
        };
        self.generate(&mut tape, &prep, length, spec)
    }

    /// Decodes at the `spec.beam` most probable lengths and keeps the best
    /// candidate by mean log-probability, or by `teacher` when given.
    pub fn npd(
        &self,
        image: &Tensor,
        motion: &Tensor,
        spec: &ControlSpec,
        teacher: Option<&dyn Rescorer>,
    ) -> Result<NpdResult> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, image, motion, spec)?;
        let max = self.model.config.max_len;
        let lengths: Vec<usize> = match spec.length {
            Some(l) => vec![l],
            None => {
                let k = if spec.beam > max {
                    warn!("length beam {} exceeds l_max {max}; clamped", spec.beam);
                    max
                } else {
                    spec.beam
                };
                top_lengths(&prep.length_probs, k)
            }
        };
        let mut candidates = Vec::with_capacity(lengths.len());
        for l in lengths {
            let mut d = self.generate(&mut tape, &prep, l, spec)?;
            if let Some(t) = teacher {
                d.trace.score = t.score(image, motion, &d.tokens)?;
            }
            candidates.push(d);
        }
        let best = candidates.iter().enumerate().fold(0, |b, (i, c)| {
            if c.trace.score > candidates[b].trace.score {
                i
            } else {
                b
            }
        });
        Ok(NpdResult { best, candidates })
    }
}

/// Most probable length; ties go to the shorter one.
pub fn argmax_length(probs: &[f64]) -> usize {
    top_lengths(probs, 1)[0]
}

/// The `k` most probable lengths, most probable first, ties to the shorter.
pub fn top_lengths(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|c| c + 1).collect()
}

/// Image and motion rows of video `i` as `[N × d]` tensors.
pub fn video_tensors(features: &FeatureSet, i: usize) -> (Tensor, Tensor) {
    let shape = [features.frames(), features.dim];
    (
        Tensor::new(&shape, features.image(i)).expect("feature shape"),
        Tensor::new(&shape, features.motion(i)).expect("feature shape"),
    )
}

/// One JSON-lines trace record.
pub fn trace_record(
    video_id: &str,
    decoded: &Decoded,
    vocab: &Vocab,
    objects: &ObjectVocab,
) -> serde_json::Value {
    let t = &decoded.trace;
    let words = |ids: &[usize]| vocab.decode(ids);
    json!({
        "video_id": video_id,
        "objects": t.objects.iter().map(|&o| objects.word(o)).collect::<Vec<_>>(),
        "length": t.length,
        "draft": words(&t.draft),
        "first": words(&t.first),
        "iterations": t.iterations.iter().map(|it| json!({
            "masked": it.masked,
            "tokens": words(&it.tokens),
            "clamped": it.clamped,
        })).collect::<Vec<_>>(),
        "final": words(&decoded.tokens),
        "confidences": t.confidences,
        "stripped": t.stripped,
        "forward_passes": t.forward_passes,
        "score": t.score,
        "stage_ms": t.stage_ms,
    })
}
