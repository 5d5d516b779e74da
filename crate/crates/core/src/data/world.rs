//! The synthetic toy world.
//!
//! Each video draws one to three objects, one attribute from each attribute
//! group, one action and one relation. Captions name a non-empty subset of the
//! drawn objects in object-index order; the i-th mentioned object takes its
//! attribute from group i, so an object's adjective depends only on its rank.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::features::FeatureSet;
use crate::data::manifest::{DatasetManifest, VideoRecord};
use crate::error::{Error, Result};

pub const MAX_WORLD_VOCAB: usize = 200;

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub objects: Vec<String>,
    /// One group per mention rank.
    pub attributes: Vec<Vec<String>>,
    /// Intransitive verbs for single-object captions.
    pub actions: Vec<String>,
    /// Transitive verbs or prepositions joining the first two objects.
    pub relations: Vec<String>,
    /// `templates[m - 1]` renders a caption naming `m` objects. Slots:
    /// `{o1}..{o3}`, `{a1}..{a3}`, `{act}`, `{rel}`.
    pub templates: Vec<String>,
    pub videos: usize,
    pub captions_per_video: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            objects: words(&[
                "box", "dog", "cat", "ball", "car", "bird", "cup", "chair", "table", "horse",
                "bike", "boat", "tree", "lamp", "book", "phone", "apple", "kite", "drum", "shoe",
                "hat", "fish", "train", "duck",
            ]),
            attributes: vec![
                words(&["red", "blue", "green", "yellow", "black", "white"]),
                words(&["small", "large", "tiny", "huge", "tall", "short"]),
                words(&["shiny", "fuzzy", "wooden", "metal", "striped", "plastic"]),
            ],
            actions: words(&[
                "rolling", "spinning", "jumping", "sliding", "falling", "bouncing",
            ]),
            relations: words(&["pushes", "follows", "chases", "hits", "passes", "lifts"]),
            templates: words(&[
                "a {a1} {o1} is {act}",
                "a {a1} {o1} {rel} a {a2} {o2}",
                "a {a1} {o1} {rel} a {a2} {o2} and a {a3} {o3}",
            ]),
            videos: 2000,
            captions_per_video: 3,
            frames: 8,
            feature_dim: 64,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn max_objects(&self) -> usize {
        self.templates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.objects.is_empty() || self.actions.is_empty() || self.relations.is_empty() {
            return bad("world vocabularies must be non-empty");
        }
        if self.templates.is_empty() {
            return bad("at least one caption template is required");
        }
        if self.attributes.len() < self.templates.len() || self.attributes.iter().any(Vec::is_empty)
        {
            return bad("need a non-empty attribute group for every mention rank");
        }
        if self.objects.len() < self.max_objects() {
            return bad("fewer objects than the largest template needs");
        }
        if self.videos == 0
            || self.captions_per_video == 0
            || self.frames == 0
            || self.feature_dim == 0
        {
            return bad("videos, captions_per_video, frames and feature_dim must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        for (m, t) in self.templates.iter().enumerate() {
            for k in 1..=m + 1 {
                if !t.contains(&format!("{{o{k}}}")) {
                    return Err(Error::Config(format!("template {t:?} lacks slot {{o{k}}}")));
                }
            }
        }
        let vocab = self.word_list();
        if vocab.len() > MAX_WORLD_VOCAB {
            return Err(Error::Config(format!(
                "world vocabulary has {} words, limit {MAX_WORLD_VOCAB}",
                vocab.len()
            )));
        }
        Ok(())
    }

    /// Every word a caption can contain.
    pub fn word_list(&self) -> Vec<String> {
        let mut all: Vec<String> = Vec::new();
        let fixed = self
            .templates
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .map(str::to_string);
        for w in self
            .objects
            .iter()
            .chain(self.attributes.iter().flatten())
            .chain(&self.actions)
            .chain(&self.relations)
            .cloned()
            .chain(fixed)
        {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        all
    }

    fn concepts(&self) -> usize {
        self.objects.len()
            + self.attributes.iter().map(Vec::len).sum::<usize>()
            + self.actions.len()
            + self.relations.len()
    }
}

/// The latent content of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    /// Object indices, ascending.
    pub objects: Vec<usize>,
    pub attributes: Vec<usize>,
    pub action: usize,
    pub relation: usize,
}

/// A world with its fixed concept prototypes.
pub struct World {
    spec: WorldSpec,
    image_protos: Vec<Vec<f64>>,
    motion_protos: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let table = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..spec.concepts())
                .map(|_| {
                    (0..spec.feature_dim)
                        .map(|_| StandardNormal.sample(rng))
                        .collect()
                })
                .collect()
        };
        let image_protos = table(&mut rng);
        let motion_protos = table(&mut rng);
        Ok(World {
            spec,
            image_protos,
            motion_protos,
            rng,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn draw(&mut self) -> Draw {
        let s = &self.spec;
        let k = self.rng.random_range(1..=s.max_objects());
        let mut objects = sample(&mut self.rng, s.objects.len(), k).into_vec();
        objects.sort_unstable();
        let attributes = s
            .attributes
            .iter()
            .map(|g| self.rng.random_range(0..g.len()))
            .collect();
        Draw {
            objects,
            attributes,
            action: self.rng.random_range(0..s.actions.len()),
            relation: self.rng.random_range(0..s.relations.len()),
        }
    }

    fn concept_ids(&self, d: &Draw) -> Vec<usize> {
        let s = &self.spec;
        let mut ids: Vec<usize> = d.objects.clone();
        let mut base = s.objects.len();
        for (g, &a) in s.attributes.iter().zip(&d.attributes) {
            ids.push(base + a);
            base += g.len();
        }
        ids.push(base + d.action);
        base += s.actions.len();
        ids.push(base + d.relation);
        ids
    }

    /// `2N × dim` feature rows: image rows then motion rows, each the concept
    /// prototype mean plus independent Gaussian noise, rounded to `f32`.
    pub fn features(&mut self, d: &Draw) -> Vec<f32> {
        let ids = self.concept_ids(d);
        let dim = self.spec.feature_dim;
        let mean = |table: &[Vec<f64>]| -> Vec<f64> {
            let mut m = vec![0.0; dim];
            for &c in &ids {
                for (acc, v) in m.iter_mut().zip(&table[c]) {
                    *acc += v;
                }
            }
            m.iter().map(|v| v / ids.len() as f64).collect()
        };
        let image = mean(&self.image_protos);
        let motion = mean(&self.motion_protos);
        let mut out = Vec::with_capacity(2 * self.spec.frames * dim);
        for base in [&image, &motion] {
            for _ in 0..self.spec.frames {
                for &b in base.iter() {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    out.push((b + self.spec.noise * z) as f32);
                }
            }
        }
        out
    }

    /// Renders a caption naming `mentioned` (a sorted subset of `d.objects`).
    pub fn caption(&self, d: &Draw, mentioned: &[usize]) -> String {
        let s = &self.spec;
        let mut text = s.templates[mentioned.len() - 1].clone();
        for (rank, &o) in mentioned.iter().enumerate() {
            text = text.replace(&format!("{{o{}}}", rank + 1), &s.objects[o]);
            text = text.replace(
                &format!("{{a{}}}", rank + 1),
                &s.attributes[rank][d.attributes[rank]],
            );
        }
        text.replace("{act}", &s.actions[d.action])
            .replace("{rel}", &s.relations[d.relation])
    }

    /// Caption 0 names every drawn object; the others name a random non-empty subset.
    pub fn captions(&mut self, d: &Draw) -> Vec<String> {
        let mut out = vec![self.caption(d, &d.objects)];
        for _ in 1..self.spec.captions_per_video {
            let subset = loop {
                let s: Vec<usize> = d
                    .objects
                    .iter()
                    .copied()
                    .filter(|_| self.rng.random_bool(0.5))
                    .collect();
                if !s.is_empty() {
                    break s;
                }
            };
            out.push(self.caption(d, &subset));
        }
        out
    }
}

/// A generated corpus: aligned manifest and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub features: FeatureSet,
    pub object_words: Vec<String>,
}

impl Corpus {
    /// Splits into the first `n` videos and the rest.
    pub fn split(&self, n: usize) -> Result<(Corpus, Corpus)> {
        let total = self.manifest.len();
        if n > total {
            return Err(Error::Config(format!("cannot take {n} of {total} videos")));
        }
        let part = |range: std::ops::Range<usize>| Corpus {
            manifest: DatasetManifest {
                records: self.manifest.records[range.clone()].to_vec(),
            },
            features: self.features.slice(range),
            object_words: self.object_words.clone(),
        };
        Ok((part(0..n), part(n..total)))
    }
}

pub fn synth_corpus(spec: &WorldSpec) -> Result<Corpus> {
    let mut world = World::new(spec.clone())?;
    let mut records = Vec::with_capacity(spec.videos);
    let mut data = Vec::with_capacity(spec.videos * 2 * spec.frames * spec.feature_dim);
    for v in 0..spec.videos {
        let d = world.draw();
        data.extend(world.features(&d));
        let captions = world.captions(&d);
        records.push(VideoRecord::annotate(
            format!("video{v}"),
            captions,
            &spec.objects,
        ));
    }
    Ok(Corpus {
        manifest: DatasetManifest { records },
        features: FeatureSet::new(2 * spec.frames, spec.feature_dim, data)?,
        object_words: spec.objects.clone(),
    })
}
