//! Fixtures shared by the benchmarks: untrained desk-scale models of matched
//! size and one synthetic video. Latency does not depend on the weights when
//! the output length is fixed.

use o2na_core::ar::ArModel;
use o2na_core::data::{synth_corpus, ObjectVocab, Vocab, WorldSpec};
use o2na_core::decode::video_tensors;
use o2na_core::model::{ModelConfig, O2na};
use o2na_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub vocab: Vocab,
    pub objects: ObjectVocab,
    pub model: O2na,
    pub store: ParamStore,
    pub ar: ArModel,
    pub ar_store: ParamStore,
    pub image: Tensor,
    pub motion: Tensor,
}

impl Fixture {
    pub fn desk() -> Self {
        let world = WorldSpec {
            videos: 1,
            ..WorldSpec::default()
        };
        let vocab = Vocab::from_words(world.word_list());
        let (objects, _) = ObjectVocab::new(&world.objects, &vocab);
        let config = ModelConfig::desk(objects.len(), vocab.len(), world.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, store) = O2na::init(config.clone(), &mut rng).expect("valid config");
        let ar_config = ArModel::matched_config(&config, store.count());
        let (ar, ar_store) = ArModel::init(ar_config, &mut rng).expect("valid config");
        let features = synth_corpus(&world).expect("valid world").features;
        let (image, motion) = video_tensors(&features, 0);
        Fixture {
            vocab,
            objects,
            model,
            store,
            ar,
            ar_store,
            image,
            motion,
        }
    }
}
