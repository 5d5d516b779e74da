//! Autoregressive baseline: the same decoder block with causal self-attention,
//! trained with next-token cross entropy and decoded greedily with a key/value cache.
//!
//! Beginning- and end-of-sequence tokens exist only here, as ids `|D|` and `|D| + 1`.

use std::time::Instant;

use rand::Rng;

use crate::data::{Batch, Vocab};
use crate::decode::Rescorer;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{
    add_norm, attend, feed_forward, linear, MemoryKv, SeqLayout, SequenceEmbeddings, TfmStack,
};
use crate::params::{Init, ParamId, ParamSpec, ParamStore};
use crate::tape::{AttnLayout, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ArModel {
    pub config: ModelConfig,
    w_image: ParamId,
    w_motion: ParamId,
    out: ParamId,
    emb: SequenceEmbeddings,
    stack: TfmStack,
}

/// Options for greedy decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArDecodeOptions {
    /// End-of-sequence is suppressed until this many tokens exist.
    pub min_len: usize,
    /// End-of-sequence is forced once this many tokens exist.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArDecoded {
    pub tokens: Vec<usize>,
    /// Incremental decoder steps, one per emitted token plus the final one.
    pub forward_passes: usize,
    pub millis: f64,
}

impl ArModel {
    pub fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
        let h = c.hidden;
        let mut s = vec![
            ParamSpec::new("ar.feat.w_i", &[c.image_dim, h], Init::Glorot),
            ParamSpec::new("ar.feat.w_m", &[c.motion_dim, h], Init::Glorot),
            ParamSpec::new("ar.out", &[h, c.vocab + 2], Init::Glorot),
        ];
        s.extend(SequenceEmbeddings::specs(
            "ar.emb",
            c.vocab + 2,
            c.max_len + 1,
            h,
        ));
        s.extend(TfmStack::specs("ar.tfm", &c.tfm()));
        s
    }

    pub fn param_count(c: &ModelConfig) -> usize {
        Self::specs(c)
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// `base` with the layer count whose parameter total is closest to `target`.
    pub fn matched_config(base: &ModelConfig, target: usize) -> ModelConfig {
        (1..=6)
            .map(|layers| ModelConfig {
                layers,
                ..base.clone()
            })
            .min_by_key(|c| Self::param_count(c).abs_diff(target))
            .expect("non-empty range")
    }

    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let store = ParamStore::build(&Self::specs(&config), rng)?;
        Ok((Self::bind(config, &store)?, store))
    }

    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        store.check(&Self::specs(&config))?;
        Ok(ArModel {
            w_image: store.require("ar.feat.w_i")?,
            w_motion: store.require("ar.feat.w_m")?,
            out: store.require("ar.out")?,
            emb: SequenceEmbeddings::bind(store, "ar.emb")?,
            stack: TfmStack::bind(store, "ar.tfm", config.tfm())?,
            config,
        })
    }

    pub fn bos(&self) -> usize {
        self.config.vocab
    }

    pub fn eos(&self) -> usize {
        self.config.vocab + 1
    }

    fn memory<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        image: Var,
        motion: Var,
        groups: usize,
    ) -> Result<Vec<MemoryKv>> {
        let n = self.config.frames;
        let wi = tape.param(store, self.w_image);
        let wm = tape.param(store, self.w_motion);
        let pi = tape.matmul(image, wi)?;
        let pm = tape.matmul(motion, wm)?;
        let both = tape.concat_rows(pi, pm)?;
        let idx: Vec<usize> = (0..groups)
            .flat_map(|b| {
                (0..2 * n).map(move |r| {
                    if r < n {
                        b * n + r
                    } else {
                        (groups + b) * n + r - n
                    }
                })
            })
            .collect();
        let v = tape.gather_rows(both, &idx)?;
        self.stack.memory_kv(tape, store, v)
    }

    /// Teacher-forced logits for `[BOS] y` inputs laid out by `seq`.
    fn sequence_logits<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        memory: &[MemoryKv],
        inputs: &[usize],
        seq: &SeqLayout,
    ) -> Result<Var> {
        let x = self.emb.embed(tape, store, inputs, seq.len, 0)?;
        let h = self
            .stack
            .forward(tape, store, x, seq, memory, self.config.memory_rows(), true)?;
        let w = tape.param(store, self.out);
        tape.matmul(h, w)
    }

    fn shifted(&self, captions: &[&[usize]]) -> Result<(Vec<usize>, Vec<usize>, SeqLayout)> {
        let len = captions.iter().map(|c| c.len()).max().unwrap_or(0) + 1;
        if len > self.config.max_len + 1 {
            return Err(Error::Length {
                len: len - 1,
                max: self.config.max_len,
            });
        }
        let mut inputs = vec![Vocab::PAD_ID; captions.len() * len];
        let mut targets = vec![Vocab::PAD_ID; captions.len() * len];
        for (b, c) in captions.iter().enumerate() {
            inputs[b * len] = self.bos();
            inputs[b * len + 1..b * len + 1 + c.len()].copy_from_slice(c);
            targets[b * len..b * len + c.len()].copy_from_slice(c);
            targets[b * len + c.len()] = self.eos();
        }
        let seq = SeqLayout {
            groups: captions.len(),
            len,
            valid: captions.iter().map(|c| c.len() + 1).collect(),
        };
        Ok((inputs, targets, seq))
    }

    fn mean_ce(
        tape: &mut Tape<'_>,
        logits: Var,
        targets: &[usize],
        seq: &SeqLayout,
    ) -> Result<Var> {
        let mut weights = vec![0.0; seq.rows()];
        for (g, &valid) in seq.valid.iter().enumerate() {
            weights[g * seq.len..g * seq.len + valid].fill(1.0 / (valid * seq.groups) as f64);
        }
        tape.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Next-token cross entropy averaged per caption (end token included), then over the batch.
    pub fn loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        batch: &Batch,
    ) -> Result<Var> {
        let caps: Vec<&[usize]> = (0..batch.size()).map(|b| batch.caption(b)).collect();
        let (inputs, targets, seq) = self.shifted(&caps)?;
        let image = tape.constant(batch.image.clone());
        let motion = tape.constant(batch.motion.clone());
        let mem = self.memory(tape, store, image, motion, batch.size())?;
        let logits = self.sequence_logits(tape, store, &mem, &inputs, &seq)?;
        Self::mean_ce(tape, logits, &targets, &seq)
    }

    /// Teacher-forced logits of one caption, `[(len + 1) × (|D| + 2)]`.
    pub fn teacher_forced_logits(
        &self,
        store: &ParamStore,
        image: &Tensor,
        motion: &Tensor,
        tokens: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (inputs, _, seq) = self.shifted(&[tokens])?;
        let i = tape.constant(image.clone());
        let m = tape.constant(motion.clone());
        let mem = self.memory(&mut tape, store, i, m, 1)?;
        let logits = self.sequence_logits(&mut tape, store, &mem, &inputs, &seq)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean per-token log-likelihood of `tokens` followed by the end token.
    pub fn log_likelihood(
        &self,
        store: &ParamStore,
        image: &Tensor,
        motion: &Tensor,
        tokens: &[usize],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let (inputs, targets, seq) = self.shifted(&[tokens])?;
        let i = tape.constant(image.clone());
        let m = tape.constant(motion.clone());
        let mem = self.memory(&mut tape, store, i, m, 1)?;
        let logits = self.sequence_logits(&mut tape, store, &mem, &inputs, &seq)?;
        let l = Self::mean_ce(&mut tape, logits, &targets, &seq)?;
        Ok(-tape.value(l).item())
    }

    /// Logits for the token after `token` at position `pos`, extending each layer's cache.
    fn step<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        token: usize,
        pos: usize,
        cache: &mut [Option<MemoryKv>],
        memory: &[MemoryKv],
    ) -> Result<Var> {
        let heads = self.config.heads;
        let mut x = self.emb.embed(tape, store, &[token], 1, pos)?;
        for ((layer, slot), kv) in self.stack.layers.iter().zip(cache.iter_mut()).zip(memory) {
            let p = &layer.self_attn;
            let k = linear(tape, store, x, p.k, Some(p.k_bias))?;
            let v = linear(tape, store, x, p.v, Some(p.v_bias))?;
            let kv_self = match *slot {
                None => MemoryKv { k, v },
                Some(c) => MemoryKv {
                    k: tape.concat_rows(c.k, k)?,
                    v: tape.concat_rows(c.v, v)?,
                },
            };
            *slot = Some(kv_self);
            let a = attend(
                tape,
                store,
                p,
                x,
                kv_self,
                &AttnLayout::single(heads, 1, pos + 1),
            )?;
            let x1 = add_norm(tape, store, x, a, &layer.norms[0])?;
            let src = AttnLayout::single(heads, 1, self.config.memory_rows());
            let c = attend(tape, store, &layer.src_attn, x1, *kv, &src)?;
            let x2 = add_norm(tape, store, x1, c, &layer.norms[1])?;
            let f = feed_forward(tape, store, &layer.ff, x2)?;
            x = add_norm(tape, store, x2, f, &layer.norms[2])?;
        }
        let w = tape.param(store, self.out);
        tape.matmul(x, w)
    }

    /// Greedy left-to-right decoding.
    pub fn greedy(
        &self,
        store: &ParamStore,
        image: &Tensor,
        motion: &Tensor,
        opts: ArDecodeOptions,
    ) -> Result<ArDecoded> {
        let max_len = opts.max_len.min(self.config.max_len);
        if opts.min_len > max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {max_len}",
                opts.min_len
            )));
        }
        let start = Instant::now();
        let mut tape = Tape::new();
        let i = tape.constant(image.clone());
        let m = tape.constant(motion.clone());
        let memory = self.memory(&mut tape, store, i, m, 1)?;
        let mut cache: Vec<Option<MemoryKv>> = vec![None; self.stack.layers.len()];
        let mut tokens = Vec::new();
        let mut token = self.bos();
        let mut passes = 0;
        loop {
            let pos = tokens.len();
            let logits = self.step(&mut tape, store, token, pos, &mut cache, &memory)?;
            passes += 1;
            let row = tape.value(logits).data();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelState("non-finite logits".into()));
            }
            let next = if pos >= max_len {
                self.eos()
            } else {
                let allowed = |j: usize| j >= Vocab::SPECIALS || j == Vocab::UNK_ID;
                (0..row.len())
                    .filter(|&j| {
                        allowed(j) && j != self.bos() && (j != self.eos() || pos >= opts.min_len)
                    })
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if row[b] >= row[j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("vocabulary has content words")
            };
            if next == self.eos() {
                break;
            }
            tokens.push(next);
            token = next;
        }
        Ok(ArDecoded {
            tokens,
            forward_passes: passes,
            millis: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Ranks candidates by the baseline's mean log-likelihood.
pub struct ArTeacher<'m> {
    pub model: &'m ArModel,
    pub store: &'m ParamStore,
}

impl Rescorer for ArTeacher<'_> {
    fn score(&self, image: &Tensor, motion: &Tensor, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let max = self.model.config.max_len;
        let t = &tokens[..tokens.len().min(max)];
        self.model.log_likelihood(self.store, image, motion, t)
    }
}
