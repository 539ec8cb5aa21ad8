use serde::{Deserialize, Serialize};

use super::dataset::{CueBundle, Dataset};
use super::tags::{extract_tags, TagLexicon, QUESTION_WORDS};
use super::vocab::{Vocabulary, EOS};
use super::DatasetError;
use crate::tensor::RngStream;

pub const PLACES: [&str; 8] = ["beach", "park", "kitchen", "street", "field", "office", "lake", "garden"];
pub const SUBJECTS: [&str; 10] = [
    "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "child", "player",
];
pub const VERBS: [&str; 8] = [
    "running", "eating", "playing", "sitting", "jumping", "reading", "sleeping", "walking",
];
pub const OBJECTS: [&str; 6] = ["ball", "frisbee", "book", "apple", "kite", "bench"];
pub const ATTRIBUTES: [&str; 6] = ["red", "small", "big", "white", "black", "young"];
const FUNCTION_WORDS: [&str; 12] = [
    "a", "the", "is", "at", "with", "near", "in", "doing", "will", "leave", "using", "?",
];
const EXTRA_VERBS: [&str; 3] = ["doing", "leave", "using"];

/// Width of the indicator block in image features: subject, attribute, object.
pub const IMAGE_SLOTS: usize = SUBJECTS.len() + ATTRIBUTES.len() + OBJECTS.len();

const CAPTIONS: [&str; 4] = [
    "a {attr} {subj} is {verb} at the {place}",
    "a {subj} is {verb} with a {obj}",
    "a {attr} {subj} is {verb} near a {obj} in the {place}",
    "the {subj} is {verb}",
];

/// One template per question word, in [`QUESTION_WORDS`] order.
const QUESTIONS: [&str; 7] = [
    "why is the {subj} {verb} ?",
    "how {attr} is the {subj} ?",
    "what is the {subj} {verb} ?",
    "when will the {subj} leave the {place} ?",
    "where is the {attr} {subj} {verb} ?",
    "who is {verb} in the {place} ?",
    "which {obj} is the {subj} using ?",
];

pub const QUESTIONS_PER_SCENE: usize = 5;

/// Slot indices of one synthetic scene into the closed lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub place: usize,
    pub subject: usize,
    pub verb: usize,
    pub object: usize,
    pub attribute: usize,
}

impl SceneSpec {
    pub fn sample(rng: &mut RngStream) -> Self {
        Self {
            place: rng.below(PLACES.len()),
            subject: rng.below(SUBJECTS.len()),
            verb: rng.below(VERBS.len()),
            object: rng.below(OBJECTS.len()),
            attribute: rng.below(ATTRIBUTES.len()),
        }
    }

    /// Fills every `{slot}` of `template`.
    pub fn render(&self, template: &str) -> String {
        template
            .replace("{place}", PLACES[self.place])
            .replace("{subj}", SUBJECTS[self.subject])
            .replace("{verb}", VERBS[self.verb])
            .replace("{obj}", OBJECTS[self.object])
            .replace("{attr}", ATTRIBUTES[self.attribute])
    }

    /// Noise-free image features: one-hot subject, attribute and object blocks.
    pub fn image_indicator(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[self.subject] = 1.0;
        v[SUBJECTS.len() + self.attribute] = 1.0;
        v[SUBJECTS.len() + ATTRIBUTES.len() + self.object] = 1.0;
        v
    }

    pub fn place_indicator(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[self.place] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_dim: usize,
    pub place_dim: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_dim: 32,
            place_dim: 32,
            noise: 0.1,
        }
    }
}

/// The fixed vocabulary shared by every synthetic dataset.
pub fn synth_vocabulary() -> Vocabulary {
    let mut v = Vocabulary::new();
    let groups: [&[&str]; 7] = [
        &FUNCTION_WORDS,
        &QUESTION_WORDS,
        &PLACES,
        &SUBJECTS,
        &VERBS,
        &OBJECTS,
        &ATTRIBUTES,
    ];
    for w in groups.into_iter().flatten() {
        v.insert(w);
    }
    v
}

pub fn synth_tag_lexicon(vocab: &Vocabulary) -> TagLexicon {
    let nouns = PLACES.iter().chain(&SUBJECTS).chain(&OBJECTS).copied();
    let verbs = VERBS.iter().chain(&EXTRA_VERBS).copied();
    TagLexicon::new(vocab, nouns, verbs)
}

/// The scene and bundle at `index`; depends only on `(seed, index)`.
pub fn synth_example(
    seed: u64,
    index: usize,
    config: &SynthConfig,
    vocab: &Vocabulary,
    lexicon: &TagLexicon,
) -> (SceneSpec, CueBundle) {
    let mut rng = RngStream::new(seed, 0x5ce7e).split(index as u64);
    let scene = SceneSpec::sample(&mut rng);
    let caption = vocab.encode(&scene.render(CAPTIONS[rng.below(CAPTIONS.len())]));
    let mut order: Vec<usize> = (0..QUESTIONS.len()).collect();
    rng.shuffle(&mut order);
    let questions: Vec<Vec<usize>> = order[..QUESTIONS_PER_SCENE]
        .iter()
        .map(|&q| {
            let mut ids = vocab.encode(&scene.render(QUESTIONS[q]));
            ids.push(EOS);
            ids
        })
        .collect();
    let noisy = |mut v: Vec<f64>, rng: &mut RngStream| {
        if config.noise > 0.0 {
            v.iter_mut().for_each(|x| *x += config.noise * rng.normal());
        }
        v
    };
    let image_feat = noisy(scene.image_indicator(config.image_dim), &mut rng);
    let place_feat = noisy(scene.place_indicator(config.place_dim), &mut rng);
    let tags = extract_tags(&caption, lexicon, &questions);
    let bundle = CueBundle {
        id: index,
        image_feat,
        place_feat,
        caption,
        tags,
        questions,
    };
    (scene, bundle)
}

/// `n` synthetic bundles with ids `0..n`.
pub fn synth_generate(n: usize, seed: u64, config: &SynthConfig) -> Result<Dataset, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Config("dataset size must be >= 1".into()));
    }
    if config.image_dim < IMAGE_SLOTS || config.place_dim < PLACES.len() {
        return Err(DatasetError::Config(format!(
            "synthetic features need image_dim >= {IMAGE_SLOTS} and place_dim >= {}",
            PLACES.len()
        )));
    }
    if !(config.noise.is_finite() && config.noise >= 0.0) {
        return Err(DatasetError::Config(format!("noise must be finite and >= 0, got {}", config.noise)));
    }
    let vocab = synth_vocabulary();
    let lexicon = synth_tag_lexicon(&vocab);
    let bundles = (0..n)
        .map(|i| synth_example(seed, i, config, &vocab, &lexicon).1)
        .collect();
    Ok(Dataset {
        vocab,
        image_dim: config.image_dim,
        place_dim: config.place_dim,
        bundles,
    })
}
