//! The four captioning components and their joint training objective.
//!
//! Every forward function is batched: `groups` samples are stacked along the
//! row axis. Video memories hold `2N` rows per sample (image rows then motion
//! rows) and token sequences hold `len` rows per sample, padded past each
//! sample's true length.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ObjectVocab, Vocab};
use crate::error::{Error, Result};
use crate::nn::{MemoryKv, SeqLayout, SequenceEmbeddings, TfmConfig, TfmStack};
use crate::params::{Init, ParamId, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub motion_dim: usize,
    /// Key frames per video; the memory has `2·frames` rows.
    pub frames: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Size of the object vocabulary.
    pub objects: usize,
    /// Size of the word vocabulary, specials included.
    pub vocab: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The full-size configuration: 2048-d features, `d_h = 512`, one decoder layer.
    pub fn full_size(objects: usize, vocab: usize) -> Self {
        ModelConfig {
            image_dim: 2048,
            motion_dim: 2048,
            frames: 8,
            hidden: 512,
            heads: 8,
            ff_dim: 2048,
            layers: 1,
            max_len: 30,
            objects,
            vocab,
            dropout: 0.1,
        }
    }

    /// A desk-scale configuration for CPU training.
    pub fn desk(objects: usize, vocab: usize, feature_dim: usize) -> Self {
        ModelConfig {
            image_dim: feature_dim,
            motion_dim: feature_dim,
            hidden: 64,
            heads: 4,
            ff_dim: 256,
            ..Self::full_size(objects, vocab)
        }
    }

    pub fn tfm(&self) -> TfmConfig {
        TfmConfig {
            d_model: self.hidden,
            heads: self.heads,
            d_ff: self.ff_dim,
            layers: self.layers,
        }
    }

    pub fn memory_rows(&self) -> usize {
        2 * self.frames
    }

    pub fn validate(&self) -> Result<()> {
        self.tfm().validate()?;
        let dims = [
            self.image_dim,
            self.motion_dim,
            self.frames,
            self.max_len,
            self.objects,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab <= Vocab::SPECIALS {
            return Err(Error::Config(format!(
                "vocabulary of {} has no content words",
                self.vocab
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub length: f64,
    pub object: f64,
    pub object_gen: f64,
    pub caption: f64,
    pub refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            length: 1.0,
            object: 1.0,
            object_gen: 1.0,
            caption: 1.0,
            refine: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.length,
            self.object,
            self.object_gen,
            self.caption,
            self.refine,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Label convention of the object predictor's logistic loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectLossConvention {
    /// Absent objects are labelled −1, so they push their logit down.
    #[default]
    Signed,
    /// Labels are the raw multi-hot; absent objects contribute a constant `ln 2`.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub convention: ObjectLossConvention,
    /// Fraction of caption tokens masked for the refinement pass.
    pub refine_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            convention: ObjectLossConvention::Signed,
            refine_ratio: 0.5,
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub length: f64,
    pub object: f64,
    pub object_gen: f64,
    pub caption: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.length,
            self.object,
            self.object_gen,
            self.caption,
            self.refine,
            self.total,
        ]
    }
}

/// Which of the two decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Object,
    Caption,
}

/// Parameter handles of a bound model. Forward passes read weights from
/// whichever compatible [`ParamStore`] they are given.
#[derive(Clone, Debug)]
pub struct O2na {
    pub config: ModelConfig,
    w_image: ParamId,
    w_motion: ParamId,
    op_w1: ParamId,
    op_w2: ParamId,
    lp_w_v: ParamId,
    lp_w_o: ParamId,
    lp_w_l: ParamId,
    og_w_o: ParamId,
    cg_w_o: ParamId,
    og_out: ParamId,
    cg_out: ParamId,
    emb: SequenceEmbeddings,
    og: TfmStack,
    cg: TfmStack,
}

impl O2na {
    pub fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
        let (h, m) = (c.hidden, c.objects);
        let mut s = vec![
            ParamSpec::new("feat.w_i", &[c.image_dim, h], Init::Glorot),
            ParamSpec::new("feat.w_m", &[c.motion_dim, h], Init::Glorot),
            ParamSpec::new("op.w1", &[h, h], Init::Glorot),
            ParamSpec::new("op.w2", &[h, m], Init::Glorot),
            ParamSpec::new("lp.w_v", &[h, h], Init::Glorot),
            ParamSpec::new("lp.w_o", &[m, h], Init::Glorot),
            ParamSpec::new("lp.w_l", &[2 * h, c.max_len], Init::Glorot),
            ParamSpec::new("og.w_o", &[m, h], Init::Glorot),
            ParamSpec::new("cg.w_o", &[m, h], Init::Glorot),
            ParamSpec::new("og.out", &[h, c.vocab], Init::Glorot),
            ParamSpec::new("cg.out", &[h, c.vocab], Init::Glorot),
        ];
        s.extend(SequenceEmbeddings::specs("emb", c.vocab, c.max_len, h));
        s.extend(TfmStack::specs("og.tfm", &c.tfm()));
        s.extend(TfmStack::specs("cg.tfm", &c.tfm()));
        s
    }

    /// Fresh parameters for `config`.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let store = ParamStore::build(&Self::specs(&config), rng)?;
        let model = Self::bind(config, &store)?;
        Ok((model, store))
    }

    /// Binds to an existing store, checking every name and shape.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        store.check(&Self::specs(&config))?;
        let r = |n: &str| store.require(n);
        Ok(O2na {
            w_image: r("feat.w_i")?,
            w_motion: r("feat.w_m")?,
            op_w1: r("op.w1")?,
            op_w2: r("op.w2")?,
            lp_w_v: r("lp.w_v")?,
            lp_w_o: r("lp.w_o")?,
            lp_w_l: r("lp.w_l")?,
            og_w_o: r("og.w_o")?,
            cg_w_o: r("cg.w_o")?,
            og_out: r("og.out")?,
            cg_out: r("cg.out")?,
            emb: SequenceEmbeddings::bind(store, "emb")?,
            og: TfmStack::bind(store, "og.tfm", config.tfm())?,
            cg: TfmStack::bind(store, "cg.tfm", config.tfm())?,
            config,
        })
    }

    /// `V`: per sample, `N` projected image rows followed by `N` projected motion rows.
    pub fn project_features<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        image: Var,
        motion: Var,
        groups: usize,
    ) -> Result<Var> {
        let n = self.config.frames;
        for (x, d) in [
            (image, self.config.image_dim),
            (motion, self.config.motion_dim),
        ] {
            if tape.shape(x) != [groups * n, d] {
                return Err(Error::shape(
                    "project_features",
                    tape.shape(x),
                    &[groups * n, d],
                ));
            }
        }
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
        tape.gather_rows(both, &idx)
    }

    /// Pre-sigmoid object logits `[groups × M]`.
    pub fn predict_objects<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        v: Var,
    ) -> Result<Var> {
        let pooled = tape.mean_pool_groups(v, self.config.memory_rows())?;
        let w1 = tape.param(store, self.op_w1);
        let w2 = tape.param(store, self.op_w2);
        let h = tape.matmul(pooled, w1)?;
        let h = tape.relu(h);
        tape.matmul(h, w2)
    }

    /// Logistic loss summed over objects, averaged over samples.
    pub fn object_loss(
        &self,
        tape: &mut Tape<'_>,
        logits: Var,
        targets: &Tensor,
        convention: ObjectLossConvention,
    ) -> Result<Var> {
        if tape.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "object_loss",
                tape.shape(logits),
                targets.shape(),
            ));
        }
        let groups = targets.dims2()?.0;
        let labels: Vec<f64> = match convention {
            ObjectLossConvention::Signed => targets.data().iter().map(|&o| 2.0 * o - 1.0).collect(),
            ObjectLossConvention::Binary => targets.data().to_vec(),
        };
        let sum = tape.logistic_loss(logits, &labels)?;
        Ok(tape.scale(sum, 1.0 / groups as f64))
    }

    /// Length logits `[groups × l_max]`; class `c` is length `c + 1`.
    pub fn predict_length<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        v: Var,
        objects: Var,
    ) -> Result<Var> {
        let pooled = tape.mean_pool_groups(v, self.config.memory_rows())?;
        let wv = tape.param(store, self.lp_w_v);
        let wo = tape.param(store, self.lp_w_o);
        let wl = tape.param(store, self.lp_w_l);
        let a = tape.matmul(pooled, wv)?;
        let b = tape.matmul(objects, wo)?;
        let h = tape.concat_cols(a, b)?;
        let h = tape.relu(h);
        tape.matmul(h, wl)
    }

    /// Mean negative log-likelihood of the true lengths.
    pub fn length_loss(&self, tape: &mut Tape<'_>, logits: Var, lengths: &[usize]) -> Result<Var> {
        let max = self.config.max_len;
        let mut classes = Vec::with_capacity(lengths.len());
        for (i, &l) in lengths.iter().enumerate() {
            if l == 0 || l > max {
                return Err(Error::Data(format!(
                    "caption {i} has length {l}, outside 1..={max}"
                )));
            }
            classes.push(l - 1);
        }
        tape.cross_entropy_rows(logits, &classes, None)
    }

    /// Source-attention keys and values of `v` for one decoder.
    pub fn memory<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        which: Generator,
        v: Var,
    ) -> Result<Vec<MemoryKv>> {
        match which {
            Generator::Object => self.og.memory_kv(tape, store, v),
            Generator::Caption => self.cg.memory_kv(tape, store, v),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        which: Generator,
        x: Var,
        seq: &SeqLayout,
        memory: &[MemoryKv],
        objects: Var,
    ) -> Result<Var> {
        let (w_o, stack, out) = match which {
            Generator::Object => (self.og_w_o, &self.og, self.og_out),
            Generator::Caption => (self.cg_w_o, &self.cg, self.cg_out),
        };
        if tape.shape(objects) != [seq.groups, self.config.objects] {
            return Err(Error::shape(
                "object conditioning",
                tape.shape(objects),
                &[seq.groups, self.config.objects],
            ));
        }
        let w = tape.param(store, w_o);
        let cond = tape.matmul(objects, w)?;
        let spread: Vec<usize> = (0..seq.rows()).map(|r| r / seq.len).collect();
        let cond = tape.gather_rows(cond, &spread)?;
        let x = tape.add(x, cond)?;
        let h = stack.forward(
            tape,
            store,
            x,
            seq,
            memory,
            self.config.memory_rows(),
            false,
        )?;
        let w_out = tape.param(store, out);
        tape.matmul(h, w_out)
    }

    /// Object generator logits `[groups·len × |D|]` from fully masked inputs.
    pub fn generate_objects_logits<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        seq: &SeqLayout,
        memory: &[MemoryKv],
        objects: Var,
    ) -> Result<Var> {
        let tokens = vec![Vocab::MASK_ID; seq.rows()];
        let x = self.embed(tape, store, &tokens, seq)?;
        self.decoder(tape, store, Generator::Object, x, seq, memory, objects)
    }

    /// Caption generator logits `[groups·len × |D|]` for token inputs.
    pub fn generate_caption_logits<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[usize],
        seq: &SeqLayout,
        memory: &[MemoryKv],
        objects: Var,
    ) -> Result<Var> {
        let x = self.embed(tape, store, tokens, seq)?;
        self.decoder(tape, store, Generator::Caption, x, seq, memory, objects)
    }

    fn embed<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[usize],
        seq: &SeqLayout,
    ) -> Result<Var> {
        if tokens.len() != seq.rows() {
            return Err(Error::shape("tokens", &[tokens.len()], &[seq.rows()]));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                bound: self.config.vocab,
            });
        }
        self.emb.embed(tape, store, tokens, seq.len, 0)
    }

    /// Cross entropy averaged over each sample's valid positions, then over samples.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        logits: Var,
        targets: &[usize],
        seq: &SeqLayout,
    ) -> Result<Var> {
        if targets.len() != seq.rows() {
            return Err(Error::shape(
                "sequence_loss",
                &[targets.len()],
                &[seq.rows()],
            ));
        }
        let mut weights = vec![0.0; seq.rows()];
        for (g, &valid) in seq.valid.iter().enumerate() {
            if valid == 0 {
                return Err(Error::Empty("sequence with no valid positions"));
            }
            let w = 1.0 / (valid as f64 * seq.groups as f64);
            weights[g * seq.len..g * seq.len + valid].fill(w);
        }
        tape.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Every term of the joint objective for `batch`.
    pub fn full_loss<'a, R: Rng>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        batch: &Batch,
        objects: &ObjectVocab,
        cfg: &LossConfig,
        rng: &mut R,
    ) -> Result<(Var, LossBreakdown)> {
        let groups = batch.size();
        let seq = SeqLayout {
            groups,
            len: batch.max_len,
            valid: batch.lengths.clone(),
        };
        for (b, &l) in batch.lengths.iter().enumerate() {
            if l == 0 || l > self.config.max_len {
                return Err(Error::Length {
                    len: l,
                    max: self.config.max_len,
                }
                .in_sample(batch.samples[b]));
            }
        }
        let image = tape.constant(batch.image.clone());
        let motion = tape.constant(batch.motion.clone());
        let v = self.project_features(tape, store, image, motion, groups)?;

        let z = self.predict_objects(tape, store, v)?;
        let l_op = self.object_loss(tape, z, &batch.video_objects, cfg.convention)?;

        let o = tape.constant(batch.caption_objects.clone());
        let len_logits = self.predict_length(tape, store, v, o)?;
        let l_lp = self.length_loss(tape, len_logits, &batch.lengths)?;

        let og_mem = self.memory(tape, store, Generator::Object, v)?;
        let p0 = self.generate_objects_logits(tape, store, &seq, &og_mem, o)?;
        let y_obj = make_object_target(&batch.tokens, objects);
        let l_og = self.sequence_loss(tape, p0, &y_obj, &seq)?;

        let cg_mem = self.memory(tape, store, Generator::Caption, v)?;
        let p1 = self.generate_caption_logits(tape, store, &y_obj, &seq, &cg_mem, o)?;
        let l_cg = self.sequence_loss(tape, p1, &batch.tokens, &seq)?;

        let mut x2 = batch.tokens.clone();
        for b in 0..groups {
            let row = &mut x2[b * seq.len..b * seq.len + seq.valid[b]];
            row.copy_from_slice(&make_refine_input_train(row, cfg.refine_ratio, rng));
        }
        let p2 = self.generate_caption_logits(tape, store, &x2, &seq, &cg_mem, o)?;
        let l_rf = self.sequence_loss(tape, p2, &batch.tokens, &seq)?;

        let w = &cfg.weights;
        let terms = [
            (l_lp, w.length),
            (l_op, w.object),
            (l_og, w.object_gen),
            (l_cg, w.caption),
            (l_rf, w.refine),
        ];
        let mut total: Option<Var> = None;
        for (t, weight) in terms {
            if weight == 0.0 {
                continue;
            }
            let s = tape.scale(t, weight);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => {
                let zero = tape.constant(Tensor::scalar(0.0));
                tape.scale(zero, 1.0)
            }
        };
        let item = |v: Var| tape.value(v).item();
        let breakdown = LossBreakdown {
            length: item(l_lp),
            object: item(l_op),
            object_gen: item(l_og),
            caption: item(l_cg),
            refine: item(l_rf),
            total: item(total),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
        }
        Ok((total, breakdown))
    }
}

/// Replaces every non-object token with `[MASK]`. Padding is kept.
pub fn make_object_target(tokens: &[usize], objects: &ObjectVocab) -> Vec<usize> {
    tokens
        .iter()
        .map(|&t| {
            if t == Vocab::PAD_ID || objects.object_of_token(t).is_some() {
                t
            } else {
                Vocab::MASK_ID
            }
        })
        .collect()
}

/// Masks `⌊len·ratio⌋` distinct positions drawn uniformly without replacement.
pub fn make_refine_input_train<R: Rng>(tokens: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let n = ((tokens.len() as f64 * ratio).floor() as usize).min(tokens.len());
    let mut out = tokens.to_vec();
    for i in sample(rng, tokens.len(), n) {
        out[i] = Vocab::MASK_ID;
    }
    out
}
