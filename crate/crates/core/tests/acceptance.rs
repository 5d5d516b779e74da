//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A FAIL line does not change the
//! exit status unless `O2NA_ACCEPTANCE_STRICT=1` is set, so `cargo test` keeps
//! reporting the unit and integration tests while the measured outcome of every
//! criterion stays visible here.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use o2na_core::ar::{ArDecodeOptions, ArModel};
use o2na_core::checkpoint::{load_checkpoint, save_checkpoint};
use o2na_core::data::{
    build_vocab, load_features, save_features, synth_corpus, Corpus, Dataset, ObjectVocab, Vocab,
    WorldSpec,
};
use o2na_core::decode::{
    deduplicate, remask_lowest_confidence, video_tensors, ControlSpec, Decoded, Decoder,
};
use o2na_core::gradcheck::{check_inputs, check_store, relative_error, STEP};
use o2na_core::metrics::{
    bleu, bleu_precisions, cider, compare_vps, diversity, rouge_l, time_lengths, Scored, UniqueMode,
};
use o2na_core::model::{LossConfig, LossWeights, ModelConfig, O2na, ObjectLossConvention};
use o2na_core::nn::{
    feed_forward, multi_head_attention, FfParams, MhaParams, SeqLayout, TfmConfig, TfmStack,
};
use o2na_core::params::{Init, ParamSpec};
use o2na_core::train::{format_loss_log, train_o2na, TrainConfig, LOSS_COLUMNS};
use o2na_core::{AttnLayout, Error, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HELD_OUT: usize = 200;
const TRAIN_VIDEOS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u8, name: &str, result: Result<Outcome>, failures: &mut Vec<u8>) {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        failures.push(id);
    }
    println!(
        "{} criterion {id} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn readout(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let r = t.constant(w.clone());
    let z = t.matmul(y, r)?;
    let z = t.sigmoid(z);
    Ok(t.sum(z))
}

/// Finite-difference check on a training tape with a fixed dropout seed, so
/// every evaluation draws the same masks.
fn check_training<F>(inputs: &[Tensor], rate: f64, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::training(rate, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::training(rate, seed);
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map_or_else(|| vec![0.0; inputs[i].numel()], |g| g.data().to_vec());
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn worst(errs: &[(String, f64)]) -> f64 {
    errs.iter().map(|e| e.1).fold(0.0, f64::max)
}

fn store_from(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::build(specs, &mut rng)?;
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        for v in s.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    Ok(s)
}

/// A tiny model and a two-sample batch of unequal caption lengths.
struct Toy {
    model: O2na,
    store: ParamStore,
    objects: ObjectVocab,
    vocab: Vocab,
    batch: o2na_core::data::Batch,
}

fn toy(seed: u64) -> Result<Toy> {
    let spec = WorldSpec {
        videos: 4,
        frames: 2,
        feature_dim: 3,
        seed,
        ..WorldSpec::default()
    };
    let corpus = synth_corpus(&spec)?;
    let (vocab, objects) = build_vocab(&corpus.manifest, 1, &corpus.object_words)?;
    let ds = Dataset::new(&corpus.manifest, corpus.features, &vocab, &objects, 12)?;
    let config = ModelConfig {
        image_dim: 3,
        motion_dim: 3,
        frames: 2,
        hidden: 4,
        heads: 2,
        ff_dim: 6,
        layers: 1,
        max_len: 12,
        objects: objects.len(),
        vocab: vocab.len(),
        dropout: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, _) = O2na::init(config.clone(), &mut rng)?;
    let store = store_from(&O2na::specs(&config), seed)?;
    let l0 = ds.samples[0].tokens.len();
    let other = (1..ds.len())
        .find(|&i| ds.samples[i].tokens.len() != l0)
        .ok_or(Error::Empty("toy captions of distinct lengths"))?;
    let batch = ds.batch(&[0, other]);
    Ok(Toy {
        model,
        store,
        objects,
        vocab,
        batch,
    })
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut per_op: Vec<(&str, f64)> = Vec::new();
    for trial in 0..3 {
        let r = rng.random_range(2..5);
        let c = rng.random_range(2..6);
        let k = rng.random_range(2..5);
        let w = random(&mut rng, &[c, 2]);
        let wk = random(&mut rng, &[k, 2]);
        let x = random(&mut rng, &[r, c]);
        let y = random(&mut rng, &[c, k]);
        let x2 = random(&mut rng, &[r, c]);
        let row = random(&mut rng, &[c]);
        let tall = random(&mut rng, &[r + 1, c]);
        let wide = random(&mut rng, &[r, k]);
        let w_wide = random(&mut rng, &[c + k, 2]);
        let gain = random(&mut rng, &[c]);
        let bias = random(&mut rng, &[c]);
        let ids: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<f64> = (0..r * c)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();

        per_op.push((
            "matmul",
            check_inputs(&[x.clone(), y.clone()], |t, v| {
                let z = t.matmul(v[0], v[1])?;
                readout(t, z, &wk)
            })?,
        ));
        per_op.push((
            "add",
            check_inputs(&[x.clone(), x2.clone()], |t, v| {
                let z = t.add(v[0], v[1])?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "add_row",
            check_inputs(&[x.clone(), row.clone()], |t, v| {
                let z = t.add_row(v[0], v[1])?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "scale",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.scale(v[0], -1.7);
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "relu",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.relu(v[0]);
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "sigmoid",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.sigmoid(v[0]);
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "concat_cols",
            check_inputs(&[x.clone(), wide.clone()], |t, v| {
                let z = t.concat_cols(v[0], v[1])?;
                readout(t, z, &w_wide)
            })?,
        ));
        per_op.push((
            "concat_rows",
            check_inputs(&[x.clone(), tall.clone()], |t, v| {
                let z = t.concat_rows(v[0], v[1])?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "gather_rows",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.gather_rows(v[0], &ids)?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "embedding",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.embedding(v[0], &ids)?;
                readout(t, z, &w)
            })?,
        ));
        for axis in [0, 1] {
            per_op.push((
                "softmax",
                check_inputs(&[x.clone()], |t, v| {
                    let z = t.softmax(v[0], axis)?;
                    readout(t, z, &w)
                })?,
            ));
        }
        per_op.push((
            "layer_norm",
            check_inputs(&[x.clone(), gain.clone(), bias.clone()], |t, v| {
                let z = t.layer_norm(v[0], v[1], v[2])?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "mean_pool",
            check_inputs(&[x.clone()], |t, v| {
                let z = t.mean_pool(v[0])?;
                readout(t, z, &w)
            })?,
        ));
        let grouped = random(&mut rng, &[2 * r, c]);
        per_op.push((
            "mean_pool_groups",
            check_inputs(&[grouped], |t, v| {
                let z = t.mean_pool_groups(v[0], r)?;
                readout(t, z, &w)
            })?,
        ));
        per_op.push((
            "cross_entropy",
            check_inputs(&[x.clone()], |t, v| {
                t.cross_entropy_rows(v[0], &targets, None)
            })?,
        ));
        let mut padded = targets.clone();
        padded[0] = usize::MAX;
        per_op.push((
            "cross_entropy",
            check_inputs(&[x.clone()], |t, v| {
                t.cross_entropy_rows(v[0], &padded, Some(usize::MAX))
            })?,
        ));
        per_op.push((
            "weighted_cross_entropy",
            check_inputs(&[x.clone()], |t, v| {
                t.weighted_cross_entropy(v[0], &targets, &weights)
            })?,
        ));
        per_op.push((
            "logistic_loss",
            check_inputs(&[x.clone()], |t, v| t.logistic_loss(v[0], &labels))?,
        ));
        let (q_len, k_len) = (r, r + 1);
        let d = 4;
        let q = random(&mut rng, &[2 * q_len, d]);
        let kk = random(&mut rng, &[2 * k_len, d]);
        let vv = random(&mut rng, &[2 * k_len, d]);
        let wd = random(&mut rng, &[d, 2]);
        for causal in [false, true] {
            let layout = AttnLayout {
                heads: 2,
                groups: 2,
                q_len,
                k_len: if causal { q_len } else { k_len },
                key_valid: if causal {
                    None
                } else {
                    Some(vec![k_len, k_len - 1])
                },
                causal,
                mask: None,
            };
            let (kk, vv) = if causal {
                (
                    random(&mut rng, &[2 * q_len, d]),
                    random(&mut rng, &[2 * q_len, d]),
                )
            } else {
                (kk.clone(), vv.clone())
            };
            per_op.push((
                "attention",
                check_inputs(&[q.clone(), kk, vv], |t, v| {
                    let z = t.attention(v[0], v[1], v[2], &layout)?;
                    readout(t, z, &wd)
                })?,
            ));
        }
        per_op.push((
            "dropout",
            check_training(&[x.clone()], 0.3, 17 + trial as u64, |t, v| {
                let z = t.dropout(v[0]);
                readout(t, z, &w)
            })?,
        ));
        let layout = AttnLayout::single(2, q_len, k_len);
        let q1 = random(&mut rng, &[q_len, d]);
        let k1 = random(&mut rng, &[k_len, d]);
        let v1 = random(&mut rng, &[k_len, d]);
        per_op.push((
            "attention+dropout",
            check_training(&[q1, k1, v1], 0.3, 5, |t, v| {
                let z = t.attention(v[0], v[1], v[2], &layout)?;
                readout(t, z, &wd)
            })?,
        ));
    }

    // Building blocks and composed objectives.
    let mut specs = MhaParams::specs("a", 4);
    specs.push(ParamSpec::new("x", &[3, 4], Init::Glorot));
    specs.push(ParamSpec::new("m", &[5, 4], Init::Glorot));
    let s = store_from(&specs, 4)?;
    let p = MhaParams::bind(&s, "a", 2)?;
    let w4 = random(&mut rng, &[4, 1]);
    let mha = worst(&check_store(&s, |st, tape| {
        let x = tape.param_named(st, "x")?;
        let m = tape.param_named(st, "m")?;
        let o = multi_head_attention(tape, st, &p, x, m, &AttnLayout::single(2, 3, 5))?;
        readout(tape, o, &w4)
    })?);
    let mut specs = FfParams::specs("f", 4, 6);
    specs.push(ParamSpec::new("x", &[3, 4], Init::Glorot));
    let s = store_from(&specs, 5)?;
    let fp = FfParams::bind(&s, "f")?;
    let ff = worst(&check_store(&s, |st, tape| {
        let x = tape.param_named(st, "x")?;
        let y = feed_forward(tape, st, &fp, x)?;
        readout(tape, y, &w4)
    })?);
    per_op.push(("multi_head_attention", mha));
    per_op.push(("feed_forward", ff));

    let cfg = TfmConfig {
        d_model: 4,
        heads: 2,
        d_ff: 6,
        layers: 2,
    };
    let mut specs = TfmStack::specs("t", &cfg);
    specs.push(ParamSpec::new("x", &[3, 4], Init::Glorot));
    specs.push(ParamSpec::new("m", &[4, 4], Init::Glorot));
    let s = store_from(&specs, 6)?;
    let stack = TfmStack::bind(&s, "t", cfg)?;
    let tfm = worst(&check_store(&s, |st, tape| {
        let x = tape.param_named(st, "x")?;
        let m = tape.param_named(st, "m")?;
        let kv = stack.memory_kv(tape, st, m)?;
        let y = stack.forward(tape, st, x, &SeqLayout::single(3), &kv, 4, true)?;
        readout(tape, y, &w4)
    })?);

    let t = toy(19)?;
    let loss_cfg = LossConfig::default();
    let full = worst(&check_store(&t.store, |st, tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Ok(t.model
            .full_loss(tape, st, &t.batch, &t.objects, &loss_cfg, &mut rng)?
            .0)
    })?);

    let ar_cfg = ModelConfig {
        layers: 1,
        ..t.model.config.clone()
    };
    let ar_store = store_from(&ArModel::specs(&ar_cfg), 21)?;
    let ar = ArModel::bind(ar_cfg, &ar_store)?;
    let ar_err = worst(&check_store(&ar_store, |st, tape| {
        ar.loss(tape, st, &t.batch)
    })?);

    let mut by_op: HashMap<&str, f64> = HashMap::new();
    for (name, e) in &per_op {
        let slot = by_op.entry(name).or_insert(0.0);
        *slot = slot.max(*e);
    }
    let (worst_name, worst_op) =
        by_op.iter().fold(
            ("", 0.0),
            |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc },
        );
    let end_to_end = tfm.max(full).max(ar_err);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op <= 1e-5 && end_to_end <= 1e-4 && secs < 60.0;
    Ok(outcome(
        pass,
        format!(
            "{} ops x 3 random shapes, worst per-op {worst_op:.2e} ({worst_name}) <= 1e-5; \
             transformer stack {tfm:.2e}, joint loss {full:.2e}, baseline loss {ar_err:.2e} <= 1e-4; {secs:.1}s < 60s",
            by_op.len()
        ),
    ))
}

fn criterion_2() -> Result<Outcome> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let t = toy(31)?;
    let m = t.objects.len();
    let rows = t.model.config.memory_rows();

    // Object predictor: sigmoid of ReLU(mean-pool(V)·W1)·W2.
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let v = random(&mut rng, &[2 * rows, t.model.config.hidden]);
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let z = t.model.predict_objects(&mut tape, &t.store, vv)?;
    let probs = tape.sigmoid(z);
    let w1 = t.store.by_name("op.w1").ok_or(Error::Empty("op.w1"))?;
    let w2 = t.store.by_name("op.w2").ok_or(Error::Empty("op.w2"))?;
    let h = t.model.config.hidden;
    let mut manual = Vec::new();
    for g in 0..2 {
        let mut pooled = vec![0.0; h];
        for r in 0..rows {
            for c in 0..h {
                pooled[c] += v.data()[(g * rows + r) * h + c] / rows as f64;
            }
        }
        let pooled = Tensor::new(&[1, h], pooled)?;
        let mut hid = pooled.matmul(w1)?;
        hid.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        let out = hid.matmul(w2)?;
        manual.extend(out.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())));
    }
    let max_diff = tape
        .value(probs)
        .data()
        .iter()
        .zip(&manual)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(("object predictor composition", max_diff < 1e-12));

    // Logistic object loss with ±1 labels.
    let zero = tape.constant(Tensor::zeros(&[1, m]));
    let labels = Tensor::new(&[1, m], (0..m).map(|i| (i % 2) as f64).collect())?;
    let l = t
        .model
        .object_loss(&mut tape, zero, &labels, ObjectLossConvention::Signed)?;
    checks.push((
        "log 2 per object at zero",
        (tape.value(l).item() - m as f64 * std::f64::consts::LN_2).abs() < 1e-12,
    ));
    let one_cfg = ModelConfig {
        objects: 1,
        ..t.model.config.clone()
    };
    let (m1, _) = O2na::init(one_cfg, &mut rng)?;
    let z10 = tape.constant(Tensor::full(&[1, 1], 10.0));
    let l = m1.object_loss(
        &mut tape,
        z10,
        &Tensor::ones(&[1, 1]),
        ObjectLossConvention::Signed,
    )?;
    checks.push((
        "log(1+e^-10) at z=10",
        (tape.value(l).item() - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15,
    ));
    let zneg = tape.constant(Tensor::full(&[1, 1], 10.0));
    let l = m1.object_loss(
        &mut tape,
        zneg,
        &Tensor::zeros(&[1, 1]),
        ObjectLossConvention::Signed,
    )?;
    checks.push((
        "log(1+e^10) for a negative label",
        (tape.value(l).item() - (1.0 + 10f64.exp()).ln()).abs() < 1e-12,
    ));

    // Length predictor: 30-way softmax, loss -log p(l*).
    let full_len = ModelConfig {
        image_dim: 4,
        motion_dim: 4,
        hidden: 8,
        heads: 2,
        ff_dim: 8,
        ..ModelConfig::full_size(5, 20)
    };
    let (lm, ls) = O2na::init(full_len, &mut rng)?;
    let vv = tape.constant(random(&mut rng, &[16, 8]));
    let o = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 1.0, 0.0, 0.0]]));
    let logits = lm.predict_length(&mut tape, &ls, vv, o)?;
    let p = tape.softmax(logits, 1)?;
    let pv = tape.value(p).clone();
    checks.push((
        "30 length classes summing to 1",
        pv.shape() == [1, 30] && (pv.sum() - 1.0).abs() < 1e-12,
    ));
    let ll = lm.length_loss(&mut tape, logits, &[7])?;
    checks.push((
        "length loss = -log p(l*)",
        (tape.value(ll).item() + pv.data()[6].ln()).abs() < 1e-12,
    ));

    // Object conditioning changes the generators' output.
    let seq = SeqLayout {
        groups: 2,
        len: t.batch.max_len,
        valid: t.batch.lengths.clone(),
    };
    let og_out = |objs: Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let i = tape.constant(t.batch.image.clone());
        let mo = tape.constant(t.batch.motion.clone());
        let v = t.model.project_features(&mut tape, &t.store, i, mo, 2)?;
        let o = tape.constant(objs);
        let mem = t
            .model
            .memory(&mut tape, &t.store, o2na_core::model::Generator::Object, v)?;
        let p = t
            .model
            .generate_objects_logits(&mut tape, &t.store, &seq, &mem, o)?;
        Ok(tape.value(p).clone())
    };
    let mut flipped = t.batch.caption_objects.clone();
    flipped.data_mut()[0] = 1.0 - flipped.data()[0];
    checks.push((
        "object conditioning changes output",
        og_out(t.batch.caption_objects.clone())? != og_out(flipped)?,
    ));

    // Masked input rows are word[MASK] + pos[i].
    let emb_specs = o2na_core::nn::SequenceEmbeddings::specs("e", t.vocab.len(), 12, 4);
    let es = store_from(&emb_specs, 33)?;
    let emb = o2na_core::nn::SequenceEmbeddings::bind(&es, "e")?;
    let mut tape = Tape::new();
    let x0 = emb.embed_masked(&mut tape, &es, Vocab::MASK_ID, 5)?;
    let word = es.by_name("e.word").ok_or(Error::Empty("e.word"))?;
    let pos = es.by_name("e.pos").ok_or(Error::Empty("e.pos"))?;
    let mut rows_ok = tape.shape(x0) == [5, 4];
    for i in 0..5 {
        for c in 0..4 {
            let want = word.row(Vocab::MASK_ID)[c] + pos.row(i)[c];
            rows_ok &= tape.value(x0).data()[i * 4 + c] == want;
        }
    }
    checks.push(("masked rows = w_MASK + e_i", rows_ok));

    // Re-masking: n = floor(l·r), lowest confidences first, ties to the lower index.
    let conf = [0.9, 0.2, 0.5, 0.2, 0.7, 0.1, 0.95];
    let tokens = [5, 6, 7, 8, 9, 10, 11];
    let n = (7.0f64 * 0.5).floor() as usize;
    let (_, masked, _) = remask_lowest_confidence(&tokens, &conf, n, &[false; 7]);
    checks.push((
        "n = floor(l r) lowest-confidence positions",
        n == 3 && masked == vec![1, 3, 5],
    ));
    let (_, masked, _) = remask_lowest_confidence(&tokens, &[0.5; 7], 2, &[false; 7]);
    checks.push((
        "confidence ties go to the lower index",
        masked == vec![0, 1],
    ));
    let dec = Decoder::new(&t.model, &t.store, &t.objects)?;
    let feats = synth_corpus(&WorldSpec {
        videos: 1,
        frames: 2,
        feature_dim: 3,
        ..WorldSpec::default()
    })?
    .features;
    let (img, mot) = video_tensors(&feats, 0);
    let mut n_ok = true;
    for (l, r) in [(7, 0.5), (10, 0.3), (9, 0.25), (4, 1.0)] {
        let spec = ControlSpec {
            length: Some(l),
            refine_ratio: r,
            iterations: 1,
            ..ControlSpec::default()
        };
        let d = dec.decode(&img, &mot, &spec)?;
        n_ok &= d.trace.iterations[0].masked.len() == ((l as f64) * r).floor() as usize;
    }
    checks.push(("decoder re-masks floor(l r) positions", n_ok));

    // Weighted sum bookkeeping.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (_, b) = t.model.full_loss(
        &mut Tape::new(),
        &t.store,
        &t.batch,
        &t.objects,
        &LossConfig::default(),
        &mut rng,
    )?;
    let sum = b.length + b.object + b.object_gen + b.caption + b.refine;
    let weights = LossWeights {
        length: 0.5,
        object: 2.0,
        object_gen: 0.25,
        caption: 1.5,
        refine: 3.0,
    };
    let cfg = LossConfig {
        weights,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (_, bw) = t.model.full_loss(
        &mut Tape::new(),
        &t.store,
        &t.batch,
        &t.objects,
        &cfg,
        &mut rng,
    )?;
    let weighted = 0.5 * bw.length
        + 2.0 * bw.object
        + 0.25 * bw.object_gen
        + 1.5 * bw.caption
        + 3.0 * bw.refine;
    checks.push((
        "lambda-weighted sum",
        (b.total - sum).abs() < 1e-12
            && (bw.total - weighted).abs() < 1e-12 * weighted.abs().max(1.0),
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} equation checks hold", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    ))
}

fn criterion_7() -> Result<Outcome> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let exact = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let hand = |a: f64, b: f64| (a - b).abs() <= 1e-9;

    let id = [Scored::new(
        "a man is slicing a tomato",
        &["a man is slicing a tomato"],
    )];
    checks.push(("BLEU identity = 100", exact(bleu(&id, 4)?, 100.0)));
    let p = bleu_precisions(&[Scored::new("the the the the", &["the cat"])], 1)[0];
    checks.push((
        "BLEU-1 clipped precision 'the the the the' | 'the cat' = 1/4",
        hand(p.0 as f64 / p.1 as f64, 0.25),
    ));
    let p = bleu_precisions(&[Scored::new("the the the the", &["the cat the"])], 1)[0];
    checks.push((
        "BLEU-1 clipped precision 'the the the the' | 'the cat the' = 2/4",
        hand(p.0 as f64 / p.1 as f64, 0.5),
    ));
    checks.push((
        "BLEU disjoint = 0",
        bleu(&[Scored::new("x y z", &["a b c"])], 4)? == 0.0,
    ));

    checks.push(("ROUGE-L identity = 100", exact(rouge_l(&id)?, 100.0)));
    let (pr, rc, b2) = (0.75, 1.0, 1.2f64 * 1.2);
    let f = (1.0 + b2) * pr * rc / (rc + b2 * pr);
    checks.push((
        "ROUGE-L 'a b c d' | 'a c d'",
        hand(rouge_l(&[Scored::new("a b c d", &["a c d"])])?, 100.0 * f),
    ));
    checks.push((
        "ROUGE-L no overlap = 0",
        rouge_l(&[Scored::new("x y", &["a b"])])? == 0.0,
    ));

    let two = [Scored::new("dog", &["dog"]), Scored::new("cat", &["cat"])];
    checks.push((
        "CIDEr two-video self match",
        hand(cider(&two)?, 10.0 * (1.0 + 0.0 + 0.0 + 0.0) / 4.0),
    ));
    let long = [
        Scored::new("a red dog runs fast", &["a red dog runs fast"]),
        Scored::new("the blue cat sleeps now", &["the blue cat sleeps now"]),
    ];
    checks.push((
        "CIDEr identity over four orders = 10",
        exact(cider(&long)?, 10.0),
    ));
    checks.push((
        "CIDEr no shared n-gram = 0",
        cider(&[Scored::new("x", &["a"]), Scored::new("y", &["b"])])? == 0.0,
    ));
    checks.push((
        "CIDEr single video rejected",
        cider(&[Scored::new("a", &["a"])]).is_err(),
    ));

    let train = vec!["a dog runs".to_string(), "a cat runs".to_string()];
    let gen = ["a dog runs", "a cat runs", "a bird flies", "a dog sleeps"];
    let d = diversity(&gen, &train, 13, UniqueMode::Caption);
    checks.push(("Novel: 2 of 4 unseen = 50", exact(d.novel, 50.0)));
    checks.push(("Unique: 4 distinct = 100", exact(d.unique, 100.0)));
    // a dog runs cat bird flies sleeps: 7 of 10 content words
    checks.push(("Vocab: 7 of 10 words = 70", exact(d.vocab, 70.0)));
    let same = diversity(
        &["a dog", "a dog", "a dog"],
        &train,
        13,
        UniqueMode::Caption,
    );
    checks.push(("Unique: identical captions = 0", same.unique == 0.0));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} hand-computed metric values reproduced", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    ))
}

struct Trained {
    held: Corpus,
    objects: ObjectVocab,
    model: O2na,
    store: ParamStore,
}

fn criterion_3() -> Result<(Outcome, Option<Trained>)> {
    let spec = WorldSpec {
        videos: TRAIN_VIDEOS + HELD_OUT,
        ..WorldSpec::default()
    };
    let corpus = synth_corpus(&spec)?;
    let (train, held) = corpus.split(TRAIN_VIDEOS)?;
    let (vocab, objects) = build_vocab(&train.manifest, 3, &train.object_words)?;
    let data = Dataset::new(
        &train.manifest,
        train.features.clone(),
        &vocab,
        &objects,
        30,
    )?;
    let config = ModelConfig::desk(objects.len(), vocab.len(), spec.feature_dim);
    let tc = TrainConfig::default();

    let fresh = || -> Result<(O2na, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        O2na::init(config.clone(), &mut rng)
    };
    let (model, mut store) = fresh()?;
    let start = Instant::now();
    let records = train_o2na(&model, &mut store, &data, &objects, &tc, |r| {
        eprintln!(
            "  epoch {:>2} total {:.5} ({:.1}s)",
            r.epoch, r.terms[5], r.seconds
        );
    })?;
    let train_secs = start.elapsed().as_secs_f64();
    let log = format_loss_log(&LOSS_COLUMNS, &records);

    let (m2, mut s2) = fresh()?;
    let short = TrainConfig {
        epochs: 2,
        ..tc.clone()
    };
    let rerun = train_o2na(&m2, &mut s2, &data, &objects, &short, |_| {})?;
    let rerun_log = format_loss_log(&LOSS_COLUMNS, &rerun);
    let prefix: String = log.lines().take(3).map(|l| format!("{l}\n")).collect();
    let reproducible = rerun_log == prefix;

    let first = &records[0].terms;
    let last = &records[records.len() - 1].terms;
    let reductions: Vec<f64> = (0..5).map(|k| 1.0 - last[k] / first[k]).collect();
    let min_red = reductions.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = records.len() == 50 && min_red >= 0.8 && train_secs <= 900.0 && reproducible;
    let names = &LOSS_COLUMNS[..5];
    let per_term: Vec<String> = names
        .iter()
        .zip(&reductions)
        .map(|(n, r)| format!("{n} -{:.1}%", 100.0 * r))
        .collect();
    let o =
        outcome(
            pass,
            format!(
            "{} epochs on {} samples: {} (min {:.1}% >= 80%); {:.0}s <= 900s; 2-epoch rerun log {}",
            records.len(),
            data.len(),
            per_term.join(", "),
            100.0 * min_red,
            train_secs,
            if reproducible { "bit-identical" } else { "DIFFERS" }
        ),
        );
    Ok((
        o,
        Some(Trained {
            held,
            objects,
            model,
            store,
        }),
    ))
}

fn contains_all(tokens: &[usize], words: &[usize]) -> bool {
    words.iter().all(|w| tokens.contains(w))
}

fn criterion_4(t: &Trained) -> Result<Outcome> {
    let dec = Decoder::new(&t.model, &t.store, &t.objects)?;
    let forced: Vec<usize> = ["box", "dog"]
        .iter()
        .map(|w| {
            t.objects
                .index_of_word(w)
                .ok_or(Error::Empty("forced object word"))
        })
        .collect::<Result<_>>()?;
    let tokens: Vec<usize> = forced.iter().map(|&o| t.objects.token(o)).collect();
    let mut hits = [0usize; 2];
    for (k, lock) in [false, true].into_iter().enumerate() {
        let spec = ControlSpec {
            forced_on: forced.clone(),
            exclusive: true,
            lock_objects: lock,
            ..ControlSpec::default()
        };
        for i in 0..t.held.manifest.len() {
            let (img, mot) = video_tensors(&t.held.features, i);
            let d = dec.decode(&img, &mot, &spec)?;
            if contains_all(&d.tokens, &tokens) {
                hits[k] += 1;
            }
        }
    }
    let n = t.held.manifest.len();
    let free = hits[0] as f64 / n as f64;
    let pass = hits[1] == n && free >= 0.9;
    Ok(outcome(
        pass,
        format!(
            "forced {{box, dog}} on {n} held-out videos: lock on {}/{n} (needs all), lock off {}/{n} = {:.1}% (needs >= 90%)",
            hits[1],
            hits[0],
            100.0 * free
        ),
    ))
}

fn criterion_5(t: &Trained) -> Result<Outcome> {
    let dec = Decoder::new(&t.model, &t.store, &t.objects)?;
    let ar_cfg = ArModel::matched_config(&t.model.config, t.store.count());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ar, ar_store) = ArModel::init(ar_cfg, &mut rng)?;
    let lengths = [5, 15, 25];
    let videos: Vec<(Tensor, Tensor)> = (0..10)
        .map(|i| video_tensors(&t.held.features, i))
        .collect();
    let mut na_passes = BTreeMap::new();
    let na = time_lengths(&lengths, 9, |l| {
        let spec = ControlSpec {
            length: Some(l),
            iterations: 1,
            ..ControlSpec::default()
        };
        for (img, mot) in &videos {
            let d = dec.decode(img, mot, &spec)?;
            na_passes.insert(l, d.trace.forward_passes);
        }
        Ok(())
    })?;
    let mut ar_passes = BTreeMap::new();
    let arm = time_lengths(&lengths, 9, |l| {
        for (img, mot) in &videos {
            let r = ar.greedy(
                &ar_store,
                img,
                mot,
                ArDecodeOptions {
                    min_len: l,
                    max_len: l,
                },
            )?;
            ar_passes.insert(l, r.forward_passes);
        }
        Ok(())
    })?;
    let passes = |m: &BTreeMap<usize, usize>| {
        m.values()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join("/")
    };
    let na_ms: Vec<f64> = na.iter().map(|x| x.1 / videos.len() as f64).collect();
    let ar_ms: Vec<f64> = arm.iter().map(|x| x.1 / videos.len() as f64).collect();
    let lo = na_ms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = na_ms.iter().copied().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let ratio = ar_ms[2] / ar_ms[0];
    let pass = spread < 0.2 && ratio >= 3.0;
    Ok(outcome(
        pass,
        format!(
            "params NA {} vs AR {} ({} layers); NA ms/video at l=5,15,25: {:.3}, {:.3}, {:.3} (spread {:.0}%, needs < 20%); \
             AR: {:.3}, {:.3}, {:.3} (25 vs 5: {ratio:.2}x, needs >= 3x); forward passes per video NA {}, AR {}",
            t.store.count(),
            ar_store.count(),
            ar.config.layers,
            na_ms[0],
            na_ms[1],
            na_ms[2],
            100.0 * spread,
            ar_ms[0],
            ar_ms[1],
            ar_ms[2],
            passes(&na_passes),
            passes(&ar_passes)
        ),
    ))
}

fn valid_caption(d: &Decoded) -> bool {
    !d.tokens.is_empty()
        && d.tokens
            .iter()
            .all(|&t| t != Vocab::PAD_ID && t != Vocab::MASK_ID)
}

fn criterion_6(t: &Trained) -> Result<Outcome> {
    let dec = Decoder::new(&t.model, &t.store, &t.objects)?;
    let n = t.held.manifest.len();
    let videos: Vec<(Tensor, Tensor)> =
        (0..n).map(|i| video_tensors(&t.held.features, i)).collect();
    let specs: Vec<ControlSpec> = (1..=4)
        .map(|iterations| ControlSpec {
            iterations,
            ..ControlSpec::default()
        })
        .collect();
    let mut invalid = 0;
    for spec in &specs {
        for (img, mot) in &videos {
            if !valid_caption(&dec.decode(img, mot, spec)?) {
                invalid += 1;
            }
        }
    }
    let vps = compare_vps(n, specs.len(), 7, |s, i| {
        dec.decode(&videos[i].0, &videos[i].1, &specs[s])?;
        Ok(())
    })?;
    let decreasing = vps.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = vps.iter().map(|v| format!("{v:.0}")).collect();
    Ok(outcome(
        decreasing && invalid == 0,
        format!(
            "VPS over {n} held-out videos for T=1..4: {} (strictly decreasing: {decreasing}); invalid captions {invalid}/{}",
            shown.join(", "),
            4 * n
        ),
    ))
}

fn criterion_8(t: &Trained) -> Result<Outcome> {
    let dec = Decoder::new(&t.model, &t.store, &t.objects)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut decodes = 0;
    let mut exact = 0;
    for i in 0..t.held.manifest.len() {
        let (img, mot) = video_tensors(&t.held.features, i);
        for (length, iterations) in [(None, 1), (None, 3), (Some(rng.random_range(1..=30)), 2)] {
            let spec = ControlSpec {
                length,
                iterations,
                ..ControlSpec::default()
            };
            let d = dec.decode(&img, &mot, &spec)?;
            decodes += 1;
            let chosen = length.unwrap_or(d.trace.length);
            if d.trace.final_tokens.len() == chosen && d.trace.length == chosen {
                exact += 1;
            }
        }
    }
    let mut dedup_ok = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let len = rng.random_range(0..40);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let out = deduplicate(&seq);
        let no_repeats = out.windows(2).all(|w| w[0] != w[1]);
        let mut runs = seq.clone();
        runs.dedup();
        if no_repeats && out == runs && deduplicate(&out) == out {
            dedup_ok += 1;
        }
    }
    Ok(outcome(
        exact == decodes && dedup_ok == cases,
        format!(
            "pre-strip length equals the chosen l in {exact}/{decodes} decodes; de-duplication leaves no adjacent repeat in {dedup_ok}/{cases} random sequences"
        ),
    ))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_9(t: &Trained) -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| Error::Io {
        path: "tempdir".into(),
        source: e,
    })?;
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &t.store, Some("seed=1"))?;
    let (loaded, meta) = load_checkpoint(&ckpt)?;
    let ckpt_exact = meta.as_deref() == Some("seed=1")
        && loaded.len() == t.store.len()
        && t.store
            .iter()
            .zip(loaded.iter())
            .all(|((n1, a), (n2, b))| n1 == n2 && a.shape() == b.shape() && bits(a) == bits(b));

    let feat = dir.path().join("held.feat");
    save_features(&feat, &t.held.features)?;
    let back = load_features(&feat)?;
    let feat_exact = back.rows == t.held.features.rows
        && back.dim == t.held.features.dim
        && back
            .data()
            .iter()
            .zip(t.held.features.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
        && back.data().len() == t.held.features.data().len();

    let reloaded = O2na::bind(t.model.config.clone(), &loaded)?;
    let a = Decoder::new(&t.model, &t.store, &t.objects)?;
    let b = Decoder::new(&reloaded, &loaded, &t.objects)?;
    let spec = ControlSpec {
        iterations: 2,
        ..ControlSpec::default()
    };
    let mut same = 0;
    let n = t.held.manifest.len();
    for i in 0..n {
        let (img, mot) = video_tensors(&back, i);
        if a.decode(&img, &mot, &spec)?.tokens == b.decode(&img, &mot, &spec)?.tokens {
            same += 1;
        }
    }
    Ok(outcome(
        ckpt_exact && feat_exact && same == n,
        format!(
            "checkpoint round trip bit-exact: {ckpt_exact}; feature file round trip bit-exact: {feat_exact}; \
             reloaded decode matches {same}/{n} videos token for token"
        ),
    ))
}

fn main() {
    let start = Instant::now();
    let mut failures = Vec::new();
    report(1, "gradient integrity", criterion_1(), &mut failures);
    report(2, "equation fidelity", criterion_2(), &mut failures);
    report(7, "metric oracles", criterion_7(), &mut failures);
    eprintln!("training the desk-scale model (50 epochs)...");
    let trained = match criterion_3() {
        Ok((o, t)) => {
            report(3, "learning at desk scale", Ok(o), &mut failures);
            t
        }
        Err(e) => {
            report(3, "learning at desk scale", Err(e), &mut failures);
            None
        }
    };
    let dependent: [(u8, &str, fn(&Trained) -> Result<Outcome>); 5] = [
        (4, "controllability", criterion_4),
        (5, "non-autoregressive latency shape", criterion_5),
        (6, "iteration ablation shape", criterion_6),
        (8, "length fidelity", criterion_8),
        (9, "persistence", criterion_9),
    ];
    for (id, name, f) in dependent {
        let r = match &trained {
            Some(t) => f(t),
            None => Err(Error::Empty("trained model (criterion 3 did not complete)")),
        };
        report(id, name, r, &mut failures);
    }
    failures.sort_unstable();
    println!(
        "acceptance: {}/9 criteria pass{} ({:.0}s)",
        9 - failures.len(),
        if failures.is_empty() {
            String::new()
        } else {
            format!("; failing: {failures:?}")
        },
        start.elapsed().as_secs_f64()
    );
    let strict = std::env::var("O2NA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failures.is_empty() {
        std::process::exit(1);
    }
}
