use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, PAD};

pub const TAGS_PER_CATEGORY: usize = 5;

/// The seven question words that may appear as question tags.
pub const QUESTION_WORDS: [&str; 7] = ["why", "how", "what", "when", "where", "who", "which"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Noun,
    Verb,
    Other,
}

/// Noun, verb and question tags, each padded to exactly five ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    pub noun: Vec<usize>,
    pub verb: Vec<usize>,
    pub question: Vec<usize>,
}

impl TagSet {
    pub fn empty() -> Self {
        Self {
            noun: vec![PAD; TAGS_PER_CATEGORY],
            verb: vec![PAD; TAGS_PER_CATEGORY],
            question: vec![PAD; TAGS_PER_CATEGORY],
        }
    }

    pub fn categories(&self) -> [&[usize]; 3] {
        [&self.noun, &self.verb, &self.question]
    }

    /// The 15-token sequence `noun ‖ verb ‖ question`.
    pub fn joint(&self) -> Vec<usize> {
        self.categories().concat()
    }

    /// Same tags with the question category cleared, as at pure inference.
    pub fn without_questions(&self) -> Self {
        Self {
            question: vec![PAD; TAGS_PER_CATEGORY],
            ..self.clone()
        }
    }
}

/// Closed-lexicon part-of-speech lookup over token ids.
#[derive(Debug, Clone, Default)]
pub struct TagLexicon {
    nouns: HashSet<usize>,
    verbs: HashSet<usize>,
    question_words: HashSet<usize>,
}

impl TagLexicon {
    /// Words missing from `vocab` are ignored.
    pub fn new<'a>(
        vocab: &Vocabulary,
        nouns: impl IntoIterator<Item = &'a str>,
        verbs: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let ids = |words: &mut dyn Iterator<Item = &'a str>| words.filter_map(|w| vocab.get(w)).collect();
        Self {
            nouns: ids(&mut nouns.into_iter()),
            verbs: ids(&mut verbs.into_iter()),
            question_words: ids(&mut QUESTION_WORDS.iter().copied()),
        }
    }

    pub fn pos(&self, id: usize) -> Pos {
        if self.nouns.contains(&id) {
            Pos::Noun
        } else if self.verbs.contains(&id) {
            Pos::Verb
        } else {
            Pos::Other
        }
    }

    pub fn is_question_word(&self, id: usize) -> bool {
        self.question_words.contains(&id)
    }
}

/// Noun and verb tags in caption order (first five distinct), question tags
/// from the leading word of each reference question (first five distinct).
pub fn extract_tags(caption: &[usize], lexicon: &TagLexicon, questions: &[Vec<usize>]) -> TagSet {
    let mut tags = TagSet::empty();
    let mut nouns = Vec::new();
    let mut verbs = Vec::new();
    for &tok in caption {
        match lexicon.pos(tok) {
            Pos::Noun => push_distinct(&mut nouns, tok),
            Pos::Verb => push_distinct(&mut verbs, tok),
            Pos::Other => {}
        }
    }
    let mut question = Vec::new();
    for q in questions {
        if let Some(&first) = q.first().filter(|&&f| lexicon.is_question_word(f)) {
            push_distinct(&mut question, first);
        }
    }
    fill(&mut tags.noun, &nouns);
    fill(&mut tags.verb, &verbs);
    fill(&mut tags.question, &question);
    tags
}

fn push_distinct(list: &mut Vec<usize>, tok: usize) {
    if !list.contains(&tok) {
        list.push(tok);
    }
}

fn fill(slots: &mut [usize], found: &[usize]) {
    for (slot, &tok) in slots.iter_mut().zip(found) {
        *slot = tok;
    }
}
