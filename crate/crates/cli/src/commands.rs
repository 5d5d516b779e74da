//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use o2na_core::ar::{ArDecodeOptions, ArModel, ArTeacher};
use o2na_core::checkpoint::{load_checkpoint, save_checkpoint};
use o2na_core::data::{
    build_vocab, load_features, save_features, synth_corpus, Corpus, Dataset, DatasetManifest,
    FeatureSet, ObjectVocab, Vocab, WorldSpec,
};
use o2na_core::decode::{trace_record, video_tensors, ControlSpec, Decoder, Rescorer};
use o2na_core::metrics::{read_eval_jsonl, time_lengths, EvalItem, EvalReport, UniqueMode};
use o2na_core::model::O2na;
use o2na_core::train::{fit, format_loss_log, train_o2na, EpochRecord, LOSS_COLUMNS};
use o2na_core::{Error, ParamStore};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

/// Seed offset separating the baseline's initialisation from the captioner's.
const AR_SEED: u64 = 0xA5_0000;

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e).into())
}

fn commented(cfg: &RunConfig) -> String {
    cfg.to_text().lines().map(|l| format!("# {l}\n")).collect()
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let spec = WorldSpec {
        videos: cfg.videos + cfg.holdout,
        captions_per_video: cfg.captions_per_video,
        frames: cfg.frames,
        feature_dim: cfg.feature_dim,
        noise: cfg.noise,
        seed: cfg.data_seed,
        ..WorldSpec::default()
    };
    let corpus = synth_corpus(&spec)?;
    let (train, test) = corpus.split(cfg.videos)?;
    let dir = PathBuf::from(&cfg.data_dir);
    create_dir(&dir)?;
    for (name, part) in [("train", &train), ("test", &test)] {
        save_features(dir.join(format!("{name}.feat")), &part.features)?;
        part.manifest.save(dir.join(format!("{name}.jsonl")))?;
    }
    write(
        &dir.join("objects.txt"),
        &(corpus.object_words.join("\n") + "\n"),
    )?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} training and {} held-out videos to {}",
        train.manifest.len(),
        test.manifest.len(),
        dir.display()
    );
    Ok(())
}

/// Manifest, features and object words of one corpus split.
pub fn load_split(dir: &str, split: &str) -> CliResult<Corpus> {
    let dir = Path::new(dir);
    let manifest = DatasetManifest::load(dir.join(format!("{split}.jsonl")))?;
    let features = load_features(dir.join(format!("{split}.feat")))?;
    if manifest.len() != features.videos() {
        return Err(Error::Data(format!(
            "alignment: {split}.jsonl has {} videos but {split}.feat has {}",
            manifest.len(),
            features.videos()
        ))
        .into());
    }
    let object_words = ObjectVocab::read_word_list(dir.join("objects.txt"))?;
    Ok(Corpus {
        manifest,
        features,
        object_words,
    })
}

fn log_epoch(name: &str, r: &EpochRecord) {
    let terms: Vec<String> = r.terms.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "{name} epoch {} [{}] {:.1}s",
        r.epoch,
        terms.join(" "),
        r.seconds
    );
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let corpus = load_split(&cfg.data_dir, "train")?;
    let mut cfg = cfg.clone();
    if cfg.frames != corpus.features.frames() || cfg.feature_dim != corpus.features.dim {
        info!(
            "using the corpus shape frames={} feature_dim={}",
            corpus.features.frames(),
            corpus.features.dim
        );
        cfg.frames = corpus.features.frames();
        cfg.feature_dim = corpus.features.dim;
    }
    let (vocab, objects) = build_vocab(&corpus.manifest, cfg.min_count, &corpus.object_words)?;
    if objects.is_empty() {
        return Err(Error::Data("no object word survives the vocabulary threshold".into()).into());
    }
    let data = Dataset::new(
        &corpus.manifest,
        corpus.features,
        &vocab,
        &objects,
        cfg.max_len,
    )?;
    let mc = cfg.model(objects.len(), vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = O2na::init(mc.clone(), &mut rng)?;
    info!(
        "{} samples, vocabulary {}, {} objects, {} parameters",
        data.len(),
        vocab.len(),
        objects.len(),
        store.count()
    );

    let dir = PathBuf::from(&cfg.run_dir);
    create_dir(&dir)?;
    let tc = cfg.train();
    let records = train_o2na(&model, &mut store, &data, &objects, &tc, |r| {
        log_epoch("na", r)
    })?;
    let meta = cfg.to_text();
    save_checkpoint(dir.join("model.ckpt"), &store, Some(&meta))?;
    vocab.save(dir.join("vocab.txt"))?;
    objects.save(dir.join("objects.txt"))?;
    write(&dir.join("config.txt"), &meta)?;
    write(
        &dir.join("loss.tsv"),
        &(commented(&cfg) + &format_loss_log(&LOSS_COLUMNS, &records)),
    )?;

    if cfg.train_ar {
        let ac = ArModel::matched_config(&mc, store.count());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AR_SEED);
        let (ar, mut ar_store) = ArModel::init(ac, &mut rng)?;
        info!(
            "baseline: {} layers, {} parameters",
            ar.config.layers,
            ar_store.count()
        );
        let records = fit(
            &mut ar_store,
            &data,
            &tc,
            |tape, st, batch| {
                let l = ar.loss(tape, st, batch)?;
                let v = tape.value(l).item();
                Ok((l, vec![v]))
            },
            |r| log_epoch("ar", r),
        )?;
        save_checkpoint(dir.join("ar.ckpt"), &ar_store, Some(&meta))?;
        write(
            &dir.join("ar_loss.tsv"),
            &(commented(&cfg) + &format_loss_log(&["ce"], &records)),
        )?;
    }
    println!("wrote run to {}", dir.display());
    Ok(())
}

/// A trained run loaded from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub objects: ObjectVocab,
    pub model: O2na,
    pub store: ParamStore,
    pub ar: Option<(ArModel, ParamStore)>,
}

pub fn load_run(dir: &str) -> CliResult<LoadedRun> {
    let dir = Path::new(dir);
    let (store, meta) = load_checkpoint(dir.join("model.ckpt"))?;
    let meta =
        meta.ok_or_else(|| Error::Data("checkpoint has no embedded configuration".into()))?;
    let mut config = RunConfig::default();
    config.apply_text(&meta, "checkpoint")?;
    config.validate()?;
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let words = ObjectVocab::read_word_list(dir.join("objects.txt"))?;
    let (objects, dropped) = ObjectVocab::new(&words, &vocab);
    if !dropped.is_empty() {
        return Err(Error::Data(format!(
            "object words missing from the vocabulary: {dropped:?}"
        ))
        .into());
    }
    let mc = config.model(objects.len(), vocab.len());
    let model = O2na::bind(mc.clone(), &store)?;
    let ar_path = dir.join("ar.ckpt");
    let ar = if ar_path.exists() {
        let (ar_store, _) = load_checkpoint(&ar_path)?;
        let ac = ArModel::matched_config(&mc, store.count());
        Some((ArModel::bind(ac, &ar_store)?, ar_store))
    } else {
        None
    };
    Ok(LoadedRun {
        config,
        vocab,
        objects,
        model,
        store,
        ar,
    })
}

pub struct GenerateOptions {
    pub split: String,
    pub objects: Option<Vec<String>>,
    pub teacher: bool,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Resolves `--objects` words to an exclusive forced set.
pub fn forced_objects(
    spec: &mut ControlSpec,
    words: &[String],
    objects: &ObjectVocab,
) -> CliResult<()> {
    for w in words {
        let w = w.trim().to_lowercase();
        let o = objects.index_of_word(&w).ok_or_else(|| {
            CliError::Usage(format!(
                "--objects: {w:?} is not an object word (known: {})",
                objects.words().join(",")
            ))
        })?;
        if !spec.forced_on.contains(&o) {
            spec.forced_on.push(o);
        }
    }
    spec.exclusive = true;
    Ok(())
}

pub fn generate(cfg: &RunConfig, run: &LoadedRun, opts: &GenerateOptions) -> CliResult<()> {
    let corpus = load_split(&cfg.data_dir, &opts.split)?;
    let mut spec = cfg.control();
    if let Some(words) = &opts.objects {
        forced_objects(&mut spec, words, &run.objects)?;
    }
    spec.validate(run.objects.len(), cfg.max_len)?;
    let teacher = match (opts.teacher, &run.ar) {
        (false, _) => None,
        (true, Some((m, s))) => Some(ArTeacher { model: m, store: s }),
        (true, None) => {
            return Err(CliError::Usage(
                "--teacher needs a baseline; train with --ar".into(),
            ))
        }
    };
    let decoder = Decoder::new(&run.model, &run.store, &run.objects)?;
    let n = opts
        .limit
        .map_or(corpus.manifest.len(), |l| l.min(corpus.manifest.len()));
    let mut captions = String::new();
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &corpus.manifest.records[i];
        let (image, motion) = video_tensors(&corpus.features, i);
        let (decoded, candidates) = if cfg.npd > 1 {
            let r = decoder.npd(
                &image,
                &motion,
                &spec,
                teacher.as_ref().map(|t| t as &dyn Rescorer),
            )?;
            let cands: Vec<_> = r
                .candidates
                .iter()
                .map(|c| json!({"length": c.trace.length, "score": c.trace.score, "caption": run.vocab.decode(&c.tokens)}))
                .collect();
            (r.best().clone(), Some(cands))
        } else {
            (decoder.decode(&image, &motion, &spec)?, None)
        };
        let hyp = run.vocab.decode(&decoded.tokens);
        println!("{}\t{hyp}", rec.video_id);
        let item = EvalItem {
            video_id: rec.video_id.clone(),
            hypothesis: hyp,
            references: rec.captions.clone(),
        };
        captions.push_str(&serde_json::to_string(&item).expect("serializable"));
        captions.push('\n');
        let mut t = trace_record(&rec.video_id, &decoded, &run.vocab, &run.objects);
        if let Some(c) = candidates {
            t["candidates"] = json!(c);
        }
        traces.push(t);
    }
    if let Some(path) = &opts.out {
        write(path, &captions)?;
    }
    if let Some(path) = &opts.trace {
        let doc = json!({ "config": cfg.to_json(), "seed": cfg.seed, "videos": traces });
        write(
            path,
            &serde_json::to_string_pretty(&doc).expect("serializable"),
        )?;
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    input: &Path,
    run: Option<&LoadedRun>,
    with_training: bool,
    word_unique: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let items = read_eval_jsonl(input)?;
    let training: Option<Vec<String>> = if with_training {
        let m = DatasetManifest::load(Path::new(&cfg.data_dir).join("train.jsonl"))?;
        Some(m.records.into_iter().flat_map(|r| r.captions).collect())
    } else {
        None
    };
    let diversity_inputs = match (&training, run) {
        (Some(t), Some(r)) => Some((t.as_slice(), r.vocab.len())),
        (Some(_), None) | (None, Some(_)) => {
            warn!("diversity metrics need both --data and --run; skipped");
            None
        }
        (None, None) => None,
    };
    let mode = if word_unique {
        UniqueMode::Word
    } else {
        UniqueMode::Caption
    };
    let report = EvalReport::compute(&items, diversity_inputs, mode)?;
    let mut text = report.to_key_values();
    for (k, v) in cfg.pairs() {
        text.push_str(&format!("config.{k}={v}\n"));
    }
    print!("{text}");
    if let Some(path) = out {
        write(path, &text)?;
    }
    Ok(())
}

/// One default-world video shaped like the configuration, for untrained timing.
fn bench_video(cfg: &RunConfig) -> CliResult<FeatureSet> {
    let spec = WorldSpec {
        videos: 1,
        frames: cfg.frames,
        feature_dim: cfg.feature_dim,
        seed: cfg.data_seed,
        ..WorldSpec::default()
    };
    Ok(synth_corpus(&spec)?.features)
}

pub fn bench(
    cfg: &RunConfig,
    run: Option<&LoadedRun>,
    lengths: &[usize],
    repeats: usize,
) -> CliResult<()> {
    if lengths.is_empty() {
        return Err(CliError::Usage("--lengths is empty".into()));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > cfg.max_len) {
        return Err(CliError::Usage(format!(
            "--lengths: {l} outside 1..={}",
            cfg.max_len
        )));
    }
    let owned;
    let run = match run {
        Some(r) => r,
        None => {
            let world = WorldSpec::default();
            let vocab = Vocab::from_words(world.word_list());
            let (objects, _) = ObjectVocab::new(&world.objects, &vocab);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (model, store) = O2na::init(cfg.model(objects.len(), vocab.len()), &mut rng)?;
            owned = LoadedRun {
                config: cfg.clone(),
                vocab,
                objects,
                model,
                store,
                ar: None,
            };
            &owned
        }
    };
    let fresh_ar;
    let (ar, ar_store) = match &run.ar {
        Some((m, s)) => (m, s),
        None => {
            warn!("no trained baseline; timing an untrained one of matched size");
            let ac = ArModel::matched_config(&run.model.config, run.store.count());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AR_SEED);
            fresh_ar = ArModel::init(ac, &mut rng)?;
            (&fresh_ar.0, &fresh_ar.1)
        }
    };
    let features = bench_video(cfg)?;
    let (image, motion) = video_tensors(&features, 0);
    let decoder = Decoder::new(&run.model, &run.store, &run.objects)?;
    let base = cfg.control();

    let na = time_lengths(lengths, repeats, |l| {
        let spec = ControlSpec {
            length: Some(l),
            ..base.clone()
        };
        decoder.decode(&image, &motion, &spec).map(|_| ())
    })?;
    let ar_ms = time_lengths(lengths, repeats, |l| {
        let opts = ArDecodeOptions {
            min_len: l,
            max_len: l,
        };
        ar.greedy(ar_store, &image, &motion, opts).map(|_| ())
    })?;
    println!(
        "# na_params={} ar_params={} ar_layers={} iterations={} repeats={}",
        run.store.count(),
        ar_store.count(),
        ar.config.layers,
        cfg.iterations,
        repeats.max(o2na_core::metrics::MIN_REPEATS)
    );
    println!("length\tna_ms\tar_ms\tar_over_na");
    for ((l, n), (_, a)) in na.iter().zip(&ar_ms) {
        println!("{l}\t{n:.3}\t{a:.3}\t{:.2}", a / n);
    }
    Ok(())
}
