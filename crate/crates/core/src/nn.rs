//! Transformer decoder blocks.
//!
//! A decoder layer is self-attention, then source attention over a memory,
//! then a position-wise feed-forward network. Each sub-layer is wrapped as
//! `LayerNorm(x + sublayer(x))`.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamSpec, ParamStore};
use crate::tape::{AttnLayout, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TfmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
}

impl TfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.layers == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one attention sub-layer.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub q: ParamId,
    pub q_bias: ParamId,
    pub k: ParamId,
    pub k_bias: ParamId,
    pub v: ParamId,
    pub v_bias: ParamId,
    pub o: ParamId,
    pub o_bias: ParamId,
    pub heads: usize,
}

impl MhaParams {
    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for p in ["q", "k", "v", "o"] {
            out.push(ParamSpec::new(
                format!("{prefix}.{p}"),
                &[d, d],
                Init::Glorot,
            ));
            out.push(ParamSpec::new(
                format!("{prefix}.{p}_bias"),
                &[d],
                Init::Zeros,
            ));
        }
        out
    }

    pub fn bind(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let id = |s: &str| store.require(&format!("{prefix}.{s}"));
        Ok(MhaParams {
            q: id("q")?,
            q_bias: id("q_bias")?,
            k: id("k")?,
            k_bias: id("k_bias")?,
            v: id("v")?,
            v_bias: id("v_bias")?,
            o: id("o")?,
            o_bias: id("o_bias")?,
            heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfParams {
    pub fn specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.w1"), &[d, d_ff], Init::Glorot),
            ParamSpec::new(format!("{prefix}.b1"), &[d_ff], Init::Zeros),
            ParamSpec::new(format!("{prefix}.w2"), &[d_ff, d], Init::Glorot),
            ParamSpec::new(format!("{prefix}.b2"), &[d], Init::Zeros),
        ]
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |s: &str| store.require(&format!("{prefix}.{s}"));
        Ok(FfParams {
            w1: id("w1")?,
            b1: id("b1")?,
            w2: id("w2")?,
            b2: id("b2")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones),
            ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros),
        ]
    }

    fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: store.require(&format!("{prefix}.gain"))?,
            bias: store.require(&format!("{prefix}.bias"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TfmLayerParams {
    pub self_attn: MhaParams,
    pub src_attn: MhaParams,
    pub ff: FfParams,
    pub norms: [NormParams; 3],
}

/// A stack of decoder layers sharing one configuration.
#[derive(Clone, Debug)]
pub struct TfmStack {
    pub config: TfmConfig,
    pub layers: Vec<TfmLayerParams>,
}

/// Padded sequence batch layout: `groups` sequences of `len` rows, the first
/// `valid[g]` of which are real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub groups: usize,
    pub len: usize,
    pub valid: Vec<usize>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        SeqLayout {
            groups: 1,
            len,
            valid: vec![len],
        }
    }

    pub fn rows(&self) -> usize {
        self.groups * self.len
    }

    fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v == self.len)
    }
}

/// Source-attention keys and values for one layer, computed once per memory.
#[derive(Clone, Copy, Debug)]
pub struct MemoryKv {
    pub k: Var,
    pub v: Var,
}

impl TfmStack {
    pub fn specs(prefix: &str, c: &TfmConfig) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for i in 0..c.layers {
            let p = format!("{prefix}.{i}");
            out.extend(MhaParams::specs(&format!("{p}.self"), c.d_model));
            out.extend(MhaParams::specs(&format!("{p}.src"), c.d_model));
            out.extend(FfParams::specs(&format!("{p}.ff"), c.d_model, c.d_ff));
            for n in 0..3 {
                out.extend(NormParams::specs(&format!("{p}.ln{n}"), c.d_model));
            }
        }
        out
    }

    pub fn bind(store: &ParamStore, prefix: &str, config: TfmConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                Ok(TfmLayerParams {
                    self_attn: MhaParams::bind(store, &format!("{p}.self"), config.heads)?,
                    src_attn: MhaParams::bind(store, &format!("{p}.src"), config.heads)?,
                    ff: FfParams::bind(store, &format!("{p}.ff"))?,
                    norms: [
                        NormParams::bind(store, &format!("{p}.ln0"))?,
                        NormParams::bind(store, &format!("{p}.ln1"))?,
                        NormParams::bind(store, &format!("{p}.ln2"))?,
                    ],
                })
            })
            .collect::<Result<_>>()?;
        Ok(TfmStack { config, layers })
    }

    /// Projects the memory into per-layer source-attention keys and values.
    pub fn memory_kv<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        mem: Var,
    ) -> Result<Vec<MemoryKv>> {
        self.layers
            .iter()
            .map(|l| {
                let p = &l.src_attn;
                Ok(MemoryKv {
                    k: linear(tape, store, mem, p.k, Some(p.k_bias))?,
                    v: linear(tape, store, mem, p.v, Some(p.v_bias))?,
                })
            })
            .collect()
    }

    /// Runs every layer. `mem_len` is the number of memory rows per group.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        seq: &SeqLayout,
        memory: &[MemoryKv],
        mem_len: usize,
        causal: bool,
    ) -> Result<Var> {
        if tape.shape(x) != [seq.rows(), self.config.d_model] {
            return Err(Error::shape(
                "tfm_layer",
                tape.shape(x),
                &[seq.rows(), self.config.d_model],
            ));
        }
        let self_layout = AttnLayout {
            heads: self.config.heads,
            groups: seq.groups,
            q_len: seq.len,
            k_len: seq.len,
            key_valid: (!seq.all_valid()).then(|| seq.valid.clone()),
            causal,
            mask: None,
        };
        let src_layout = AttnLayout {
            heads: self.config.heads,
            groups: seq.groups,
            q_len: seq.len,
            k_len: mem_len,
            key_valid: None,
            causal: false,
            mask: None,
        };
        let mut h = x;
        for (layer, kv) in self.layers.iter().zip(memory) {
            h = tfm_layer(tape, store, layer, h, kv, &self_layout, &src_layout)?;
        }
        Ok(h)
    }
}

/// `x · W (+ b)`.
pub fn linear<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let y = tape.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = tape.param(store, b);
            tape.add_row(y, bv)
        }
        None => Ok(y),
    }
}

/// Multi-head attention of `q_in` over `kv_in`, with output projection.
pub fn multi_head_attention<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &MhaParams,
    q_in: Var,
    kv_in: Var,
    layout: &AttnLayout,
) -> Result<Var> {
    let k = linear(tape, store, kv_in, p.k, Some(p.k_bias))?;
    let v = linear(tape, store, kv_in, p.v, Some(p.v_bias))?;
    attend(tape, store, p, q_in, MemoryKv { k, v }, layout)
}

/// Attention of `q_in` over precomputed keys and values, with output projection.
pub fn attend<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &MhaParams,
    q_in: Var,
    kv: MemoryKv,
    layout: &AttnLayout,
) -> Result<Var> {
    let d = tape.shape(q_in).last().copied().unwrap_or(0);
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} not divisible by {} heads",
            p.heads
        )));
    }
    let q = linear(tape, store, q_in, p.q, Some(p.q_bias))?;
    let ctx = tape.attention(q, kv.k, kv.v, layout)?;
    linear(tape, store, ctx, p.o, Some(p.o_bias))
}

/// `relu(x·W1 + b1)·W2 + b2`, dropout on the hidden activations while training.
pub fn feed_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &FfParams,
    x: Var,
) -> Result<Var> {
    let h = linear(tape, store, x, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    let h = tape.dropout(h);
    linear(tape, store, h, p.w2, Some(p.b2))
}

/// `LayerNorm(x + sub)`.
pub fn add_norm<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    sub: Var,
    n: &NormParams,
) -> Result<Var> {
    let s = tape.add(x, sub)?;
    let g = tape.param(store, n.gain);
    let b = tape.param(store, n.bias);
    tape.layer_norm(s, g, b)
}

/// One decoder layer: self-attention, source attention over `kv`, feed-forward.
pub fn tfm_layer<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &TfmLayerParams,
    x: Var,
    kv: &MemoryKv,
    self_layout: &AttnLayout,
    src_layout: &AttnLayout,
) -> Result<Var> {
    let a = multi_head_attention(tape, store, &p.self_attn, x, x, self_layout)?;
    let x1 = add_norm(tape, store, x, a, &p.norms[0])?;
    let c = attend(tape, store, &p.src_attn, x1, *kv, src_layout)?;
    let x2 = add_norm(tape, store, x1, c, &p.norms[1])?;
    let f = feed_forward(tape, store, &p.ff, x2)?;
    add_norm(tape, store, x2, f, &p.norms[2])
}

/// Word and learned position embedding tables.
#[derive(Clone, Debug)]
pub struct SequenceEmbeddings {
    pub word: ParamId,
    pub pos: ParamId,
    pub max_len: usize,
}

impl SequenceEmbeddings {
    pub fn specs(prefix: &str, vocab: usize, max_len: usize, d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.word"), &[vocab, d], Init::Embedding),
            ParamSpec::new(format!("{prefix}.pos"), &[max_len, d], Init::Embedding),
        ]
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let pos = store.require(&format!("{prefix}.pos"))?;
        Ok(SequenceEmbeddings {
            word: store.require(&format!("{prefix}.word"))?,
            pos,
            max_len: store.get(pos).shape()[0],
        })
    }

    /// Row `g·len + i` is `word[tokens[g·len + i]] + pos[i + offset]`.
    pub fn embed<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[usize],
        len: usize,
        offset: usize,
    ) -> Result<Var> {
        if len == 0 || !tokens.len().is_multiple_of(len) {
            return Err(Error::Length {
                len,
                max: self.max_len,
            });
        }
        if offset + len > self.max_len {
            return Err(Error::Length {
                len: offset + len,
                max: self.max_len,
            });
        }
        let positions: Vec<usize> = (0..tokens.len()).map(|r| r % len + offset).collect();
        let word = tape.param(store, self.word);
        let pos = tape.param(store, self.pos);
        let w = tape.embedding(word, tokens)?;
        let p = tape.embedding(pos, &positions)?;
        tape.add(w, p)
    }

    /// The fully masked input: `l` rows of `word[mask] + pos[i]`.
    pub fn embed_masked<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        mask_id: usize,
        len: usize,
    ) -> Result<Var> {
        if len == 0 || len > self.max_len {
            return Err(Error::Length {
                len,
                max: self.max_len,
            });
        }
        self.embed(tape, store, &vec![mask_id; len], len, 0)
    }
}
