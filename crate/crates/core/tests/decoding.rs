use o2na_core::ar::{ArDecodeOptions, ArModel, ArTeacher};
use o2na_core::data::{build_vocab, synth_corpus, Dataset, ObjectVocab, Vocab, WorldSpec};
use o2na_core::decode::{
    deduplicate, remask_lowest_confidence, select_objects, video_tensors, ControlSpec, Decoder,
};
use o2na_core::gradcheck::check_store;
use o2na_core::model::{ModelConfig, O2na};
use o2na_core::{Error, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    model: O2na,
    store: ParamStore,
    objects: ObjectVocab,
    data: Dataset,
}

fn setup() -> Setup {
    let corpus = synth_corpus(&WorldSpec {
        videos: 30,
        feature_dim: 8,
        ..WorldSpec::default()
    })
    .unwrap();
    let (vocab, objects) = build_vocab(&corpus.manifest, 1, &corpus.object_words).unwrap();
    let data = Dataset::new(&corpus.manifest, corpus.features, &vocab, &objects, 30).unwrap();
    let config = ModelConfig {
        hidden: 16,
        heads: 2,
        ff_dim: 32,
        ..ModelConfig::desk(objects.len(), vocab.len(), 8)
    };
    let (model, store) = O2na::init(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    Setup {
        model,
        store,
        objects,
        data,
    }
}

#[test]
fn selection_overrides() {
    let probs = [0.1, 0.95, 0.3];
    let all_on = ControlSpec {
        forced_on: vec![0, 1, 2],
        ..ControlSpec::default()
    };
    assert_eq!(select_objects(&probs, &all_on).unwrap(), vec![1.0; 3]);
    let none = select_objects(&[0.1, 0.2, 0.3], &ControlSpec::default()).unwrap();
    assert_eq!(none, vec![0.0; 3]);
    let off = ControlSpec {
        forced_off: vec![1],
        ..ControlSpec::default()
    };
    assert_eq!(select_objects(&probs, &off).unwrap(), vec![0.0; 3]);
    let exclusive = ControlSpec {
        forced_on: vec![2],
        exclusive: true,
        ..ControlSpec::default()
    };
    assert_eq!(
        select_objects(&probs, &exclusive).unwrap(),
        vec![0.0, 0.0, 1.0]
    );
    let unknown = ControlSpec {
        forced_on: vec![7],
        ..ControlSpec::default()
    };
    match select_objects(&probs, &unknown) {
        Err(e @ Error::Index { index: 7, .. }) => assert!(e.to_string().contains('7')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn remask_respects_locks_and_clamps() {
    let toks = [5, 6, 7, 8];
    let conf = [0.1, 0.2, 0.3, 0.4];
    let (x, m, clamped) = remask_lowest_confidence(&toks, &conf, 2, &[true, false, false, false]);
    assert_eq!(m, vec![1, 2]);
    assert_eq!(x[0], 5);
    assert!(!clamped);
    let (_, m, clamped) = remask_lowest_confidence(&toks, &conf, 4, &[true, true, false, false]);
    assert_eq!(m, vec![2, 3]);
    assert!(clamped);
}

#[test]
fn dedup_examples() {
    let v = Vocab::from_words(["a", "man", "runs", "go"].map(String::from));
    let enc = |s: &str| v.encode(s);
    assert_eq!(deduplicate(&enc("a a man man runs")), enc("a man runs"));
    assert_eq!(deduplicate(&enc("a man runs")), enc("a man runs"));
    assert_eq!(deduplicate(&enc("go go go")), enc("go"));
}

proptest! {
    #[test]
    fn dedup_leaves_no_adjacent_repeats(tokens in prop::collection::vec(0usize..5, 0..40)) {
        let out = deduplicate(&tokens);
        prop_assert!(out.windows(2).all(|w| w[0] != w[1]));
        // Idempotent and order preserving: expanding runs gives back the input.
        prop_assert_eq!(deduplicate(&out), out.clone());
        let mut runs = Vec::new();
        for &t in &tokens {
            if runs.last() != Some(&t) {
                runs.push(t);
            }
        }
        prop_assert_eq!(out, runs);
    }
}

#[test]
fn decode_structure() {
    let s = setup();
    let dec = Decoder::new(&s.model, &s.store, &s.objects).unwrap();
    let (img, mot) = video_tensors(&s.data.features, 0);
    for t in 0..4 {
        for l in [1, 5, 17, 30] {
            let spec = ControlSpec {
                iterations: t,
                length: Some(l),
                ..ControlSpec::default()
            };
            let d = dec.decode(&img, &mot, &spec).unwrap();
            assert_eq!(d.trace.forward_passes, 2 + t);
            assert_eq!(d.trace.length, l);
            assert_eq!(d.trace.final_tokens.len(), l);
            assert_eq!(d.trace.draft.len(), l);
            assert_eq!(d.trace.iterations.len(), t);
            assert!(d.trace.confidences.iter().all(|&c| c > 0.0 && c <= 1.0));
            if t == 0 {
                assert_eq!(d.trace.final_tokens, d.trace.first);
            }
            for it in &d.trace.iterations {
                assert_eq!(it.masked.len(), l / 2);
            }
        }
    }
}

#[test]
fn decode_is_deterministic() {
    let s = setup();
    let dec = Decoder::new(&s.model, &s.store, &s.objects).unwrap();
    let (img, mot) = video_tensors(&s.data.features, 1);
    let spec = ControlSpec::default();
    let a = dec.decode(&img, &mot, &spec).unwrap();
    let b = dec.decode(&img, &mot, &spec).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.trace.final_tokens, b.trace.final_tokens);
}

#[test]
fn locked_objects_always_appear() {
    let s = setup();
    let dec = Decoder::new(&s.model, &s.store, &s.objects).unwrap();
    let m = s.objects.len();
    for v in 0..10 {
        let (img, mot) = video_tensors(&s.data.features, v);
        let forced = vec![v % m, (v * 7 + 3) % m, (v * 5 + 1) % m];
        let mut forced_set = forced.clone();
        forced_set.sort_unstable();
        forced_set.dedup();
        for t in 0..3 {
            let spec = ControlSpec {
                forced_on: forced_set.clone(),
                lock_objects: true,
                iterations: t,
                length: Some(2),
                ..ControlSpec::default()
            };
            let d = dec.decode(&img, &mot, &spec).unwrap();
            assert!(d.trace.length >= forced_set.len());
            for &o in &forced_set {
                assert!(
                    d.tokens.contains(&s.objects.token(o)),
                    "video {v} object {o}"
                );
            }
        }
    }
}

#[test]
fn nan_parameters_are_rejected() {
    let mut s = setup();
    s.store.by_name_mut("op.w1").unwrap().data_mut()[0] = f64::NAN;
    assert!(matches!(
        Decoder::new(&s.model, &s.store, &s.objects),
        Err(Error::ModelState(_))
    ));
}

#[test]
fn npd_candidates() {
    let s = setup();
    let dec = Decoder::new(&s.model, &s.store, &s.objects).unwrap();
    let (img, mot) = video_tensors(&s.data.features, 2);
    let one = dec
        .npd(
            &img,
            &mot,
            &ControlSpec {
                beam: 1,
                ..ControlSpec::default()
            },
            None,
        )
        .unwrap();
    let plain = dec.decode(&img, &mot, &ControlSpec::default()).unwrap();
    assert_eq!(one.candidates.len(), 1);
    assert_eq!(one.best().tokens, plain.tokens);

    let three = dec
        .npd(
            &img,
            &mot,
            &ControlSpec {
                beam: 3,
                ..ControlSpec::default()
            },
            None,
        )
        .unwrap();
    let mut lengths: Vec<usize> = three.candidates.iter().map(|c| c.trace.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    assert_eq!(lengths.len(), 3);
    let best = three.best().trace.score;
    assert!(three.candidates.iter().all(|c| c.trace.score <= best));

    let wide = dec
        .npd(
            &img,
            &mot,
            &ControlSpec {
                beam: 40,
                ..ControlSpec::default()
            },
            None,
        )
        .unwrap();
    assert_eq!(wide.candidates.len(), 30);
}

fn ar_setup(s: &Setup) -> (ArModel, ParamStore) {
    ArModel::init(s.model.config.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

#[test]
fn ar_forward_passes_and_forced_length() {
    let s = setup();
    let (ar, store) = ar_setup(&s);
    let (img, mot) = video_tensors(&s.data.features, 0);
    for l in [1, 5, 12] {
        let d = ar
            .greedy(
                &store,
                &img,
                &mot,
                ArDecodeOptions {
                    min_len: l,
                    max_len: l,
                },
            )
            .unwrap();
        assert_eq!(d.tokens.len(), l);
        assert_eq!(d.forward_passes, l + 1);
        assert!(d
            .tokens
            .iter()
            .all(|&t| t >= Vocab::SPECIALS || t == Vocab::UNK_ID));
    }
    let free = ar
        .greedy(
            &store,
            &img,
            &mot,
            ArDecodeOptions {
                min_len: 0,
                max_len: 30,
            },
        )
        .unwrap();
    assert_eq!(free.forward_passes, free.tokens.len() + 1);
}

#[test]
fn ar_incremental_matches_full_sequence() {
    let s = setup();
    let (ar, store) = ar_setup(&s);
    let (img, mot) = video_tensors(&s.data.features, 3);
    let d = ar
        .greedy(
            &store,
            &img,
            &mot,
            ArDecodeOptions {
                min_len: 8,
                max_len: 8,
            },
        )
        .unwrap();
    let logits = ar
        .teacher_forced_logits(&store, &img, &mot, &d.tokens)
        .unwrap();
    // Greedy choices must be the teacher-forced argmax over the same allowed set.
    for (t, &tok) in d.tokens.iter().enumerate() {
        let row = logits.row(t);
        let best = (Vocab::SPECIALS..ar.bos())
            .chain([Vocab::UNK_ID])
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(best, tok, "step {t}");
    }
}

#[test]
fn ar_causal_invariance() {
    let s = setup();
    let (ar, store) = ar_setup(&s);
    let (img, mot) = video_tensors(&s.data.features, 4);
    let base: Vec<usize> = (3..11).collect();
    let a = ar.teacher_forced_logits(&store, &img, &mot, &base).unwrap();
    let mut changed = base.clone();
    changed[5] = 20;
    changed[7] = 21;
    let b = ar
        .teacher_forced_logits(&store, &img, &mot, &changed)
        .unwrap();
    // Row t predicts token t; it sees inputs 0..=t, i.e. BOS and tokens before t.
    for t in 0..=5 {
        assert_eq!(a.row(t), b.row(t), "row {t}");
    }
    assert_ne!(a.row(6), b.row(6));
}

#[test]
fn ar_loss_gradient_check() {
    let corpus = synth_corpus(&WorldSpec {
        videos: 3,
        frames: 2,
        feature_dim: 3,
        ..WorldSpec::default()
    })
    .unwrap();
    let (vocab, objects) = build_vocab(&corpus.manifest, 1, &corpus.object_words).unwrap();
    let data = Dataset::new(&corpus.manifest, corpus.features, &vocab, &objects, 12).unwrap();
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
    let (ar, store) = ArModel::init(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let batch = data.batch(&[0, 4]);
    let errs = check_store(&store, |st, tape| ar.loss(tape, st, &batch)).unwrap();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "{errs:?}");
}

#[test]
fn teacher_rescoring_picks_highest_likelihood() {
    let s = setup();
    let (ar, store) = ar_setup(&s);
    let teacher = ArTeacher {
        model: &ar,
        store: &store,
    };
    let dec = Decoder::new(&s.model, &s.store, &s.objects).unwrap();
    let (img, mot) = video_tensors(&s.data.features, 5);
    let r = dec
        .npd(
            &img,
            &mot,
            &ControlSpec {
                beam: 4,
                ..ControlSpec::default()
            },
            Some(&teacher),
        )
        .unwrap();
    for c in &r.candidates {
        let ll = ar.log_likelihood(&store, &img, &mot, &c.tokens).unwrap();
        assert_eq!(ll, c.trace.score);
        assert!(ll <= r.best().trace.score);
    }
}

#[test]
fn matched_config_is_closest() {
    let s = setup();
    let target = s.store.count();
    let c = ArModel::matched_config(&s.model.config, target);
    let chosen = ArModel::param_count(&c).abs_diff(target);
    for layers in 1..=6 {
        let other = ModelConfig {
            layers,
            ..c.clone()
        };
        assert!(chosen <= ArModel::param_count(&other).abs_diff(target));
    }
}
