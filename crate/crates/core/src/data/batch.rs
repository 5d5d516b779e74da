use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::features::FeatureSet;
use crate::data::manifest::DatasetManifest;
use crate::data::vocab::{ObjectVocab, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One (video, caption) training pair, already encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub video: usize,
    pub tokens: Vec<usize>,
    /// Objects of this caption (object indices, ascending).
    pub caption_objects: Vec<usize>,
    /// Objects of every caption of the video.
    pub video_objects: Vec<usize>,
}

/// A padded mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<usize>,
    pub videos: Vec<usize>,
    /// `[B·N × d]` image rows, video after video.
    pub image: Tensor,
    /// `[B·N × d]` motion rows.
    pub motion: Tensor,
    /// `[B × M]` multi-hot of the caption objects.
    pub caption_objects: Tensor,
    /// `[B × M]` multi-hot of the per-video object union.
    pub video_objects: Tensor,
    /// `[B × L]` token ids, padded with `[PAD]` to the batch maximum `L`.
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn caption(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.max_len..b * self.max_len + self.lengths[b]]
    }
}

/// Encoded corpus aligned with its features by index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<EncodedSample>,
    pub features: FeatureSet,
    pub objects: usize,
}

fn multi_hot(lists: impl Iterator<Item = Vec<usize>>, m: usize) -> Tensor {
    let rows: Vec<Vec<usize>> = lists.collect();
    let mut t = Tensor::zeros(&[rows.len(), m]);
    for (b, row) in rows.iter().enumerate() {
        for &o in row {
            t.data_mut()[b * m + o] = 1.0;
        }
    }
    t
}

impl Dataset {
    /// Encodes every caption. The features file must hold one entry per manifest
    /// record, in manifest order.
    pub fn new(
        manifest: &DatasetManifest,
        features: FeatureSet,
        vocab: &Vocab,
        objects: &ObjectVocab,
        max_len: usize,
    ) -> Result<Self> {
        if manifest.len() != features.videos() {
            return Err(Error::Data(format!(
                "alignment: manifest has {} videos but the feature file has {}",
                manifest.len(),
                features.videos()
            )));
        }
        let obj_ids = |words: &[String]| -> Vec<usize> {
            let mut ids: Vec<usize> = words
                .iter()
                .filter_map(|w| objects.index_of_word(w))
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        let mut samples = Vec::new();
        for (v, rec) in manifest.records.iter().enumerate() {
            let video_objects = obj_ids(&rec.union_objects);
            for (cap, objs) in rec.captions.iter().zip(&rec.objects) {
                let tokens = vocab.encode(cap);
                if tokens.is_empty() || tokens.len() > max_len {
                    return Err(Error::Length {
                        len: tokens.len(),
                        max: max_len,
                    }
                    .in_sample(samples.len()));
                }
                samples.push(EncodedSample {
                    video: v,
                    tokens,
                    caption_objects: obj_ids(objs),
                    video_objects: video_objects.clone(),
                });
            }
        }
        Ok(Dataset {
            samples,
            features,
            objects: objects.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.samples.len().div_ceil(batch_size)
    }

    /// Sample indices of each batch of `epoch`; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let f = &self.features;
        let n = f.frames();
        let mut image = Vec::with_capacity(indices.len() * n * f.dim);
        let mut motion = Vec::with_capacity(indices.len() * n * f.dim);
        let picked: Vec<&EncodedSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        for s in &picked {
            image.extend(f.image(s.video));
            motion.extend(f.motion(s.video));
        }
        let max_len = picked.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let mut tokens = vec![Vocab::PAD_ID; picked.len() * max_len];
        for (b, s) in picked.iter().enumerate() {
            tokens[b * max_len..b * max_len + s.tokens.len()].copy_from_slice(&s.tokens);
        }
        let rows = picked.len() * n;
        Batch {
            samples: indices.to_vec(),
            videos: picked.iter().map(|s| s.video).collect(),
            image: Tensor::new(&[rows, f.dim], image).expect("consistent"),
            motion: Tensor::new(&[rows, f.dim], motion).expect("consistent"),
            caption_objects: multi_hot(
                picked.iter().map(|s| s.caption_objects.clone()),
                self.objects,
            ),
            video_objects: multi_hot(picked.iter().map(|s| s.video_objects.clone()), self.objects),
            tokens,
            lengths: picked.iter().map(|s| s.tokens.len()).collect(),
            max_len,
        }
    }

    pub fn epoch(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> impl Iterator<Item = Batch> + '_ {
        self.epoch_order(batch_size, seed, epoch)
            .into_iter()
            .map(move |idx| self.batch(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, synth_corpus, WorldSpec};

    fn dataset(videos: usize) -> Dataset {
        let c = synth_corpus(&WorldSpec {
            videos,
            feature_dim: 4,
            ..WorldSpec::default()
        })
        .unwrap();
        let (v, o) = build_vocab(&c.manifest, 1, &c.object_words).unwrap();
        Dataset::new(&c.manifest, c.features, &v, &o, 30).unwrap()
    }

    #[test]
    fn batches_per_epoch_rounds_up() {
        let d = dataset(2000);
        assert_eq!(d.len(), 6000);
        assert_eq!(d.batches_per_epoch(64), 94);
        assert_eq!(d.epoch_order(64, 1, 0).len(), 94);
    }

    #[test]
    fn same_seed_same_order() {
        let d = dataset(40);
        assert_eq!(d.epoch_order(8, 3, 2), d.epoch_order(8, 3, 2));
        assert_ne!(d.epoch_order(8, 3, 0), d.epoch_order(8, 3, 1));
    }

    #[test]
    fn padding_uses_pad_id() {
        let d = dataset(40);
        let b = d.epoch(16, 0, 0).next().unwrap();
        for i in 0..b.size() {
            assert!(b.tokens[i * b.max_len + b.lengths[i]..(i + 1) * b.max_len]
                .iter()
                .all(|&t| t == Vocab::PAD_ID));
            assert!(b.caption(i).iter().all(|&t| t != Vocab::PAD_ID));
        }
        assert_eq!(b.image.shape(), &[16 * 8, 4]);
    }

    #[test]
    fn misaligned_features_rejected() {
        let c = synth_corpus(&WorldSpec {
            videos: 5,
            feature_dim: 4,
            ..WorldSpec::default()
        })
        .unwrap();
        let (v, o) = build_vocab(&c.manifest, 1, &c.object_words).unwrap();
        let short = c.features.slice(0..4);
        assert!(matches!(
            Dataset::new(&c.manifest, short, &v, &o, 30),
            Err(Error::Data(m)) if m.contains("alignment")
        ));
    }
}
