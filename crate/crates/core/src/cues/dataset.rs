use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tags::{TagSet, QUESTION_WORDS, TAGS_PER_CATEGORY};
use super::vocab::{Vocabulary, EOS, PAD};
use super::DatasetError;
use crate::tensor::RngStream;

/// One example's inputs and reference questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueBundle {
    pub id: usize,
    pub image_feat: Vec<f64>,
    pub place_feat: Vec<f64>,
    pub caption: Vec<usize>,
    pub tags: TagSet,
    /// Each reference ends with EOS and carries no BOS.
    pub questions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub image_dim: usize,
    pub place_dim: usize,
    pub bundles: Vec<CueBundle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "V")]
    vocab_size: usize,
    #[serde(rename = "D_i")]
    image_dim: usize,
    #[serde(rename = "D_p")]
    place_dim: usize,
    vocab: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&CueBundle> {
        self.bundles.iter().find(|b| b.id == id)
    }

    /// Checks one bundle against the header; `line` is only used for messages.
    pub fn validate_bundle(&self, b: &CueBundle, line: usize) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::Invalid { line, msg });
        let v = self.vocab.len();
        if b.image_feat.len() != self.image_dim {
            return bad(format!("image_feat has {} values, header says {}", b.image_feat.len(), self.image_dim));
        }
        if b.place_feat.len() != self.place_dim {
            return bad(format!("place_feat has {} values, header says {}", b.place_feat.len(), self.place_dim));
        }
        if b.image_feat.iter().chain(&b.place_feat).any(|x| !x.is_finite()) {
            return bad("non-finite feature value".into());
        }
        let tag_lists = b.tags.categories();
        let all_tokens = b.caption.iter().chain(tag_lists.iter().copied().flatten()).chain(b.questions.iter().flatten());
        if let Some(t) = all_tokens.into_iter().find(|&&t| t >= v) {
            return bad(format!("token id {t} >= vocabulary size {v}"));
        }
        if tag_lists.iter().any(|l| l.len() != TAGS_PER_CATEGORY) {
            return bad(format!("every tag category must have exactly {TAGS_PER_CATEGORY} entries"));
        }
        let qwords: HashSet<usize> = QUESTION_WORDS.iter().filter_map(|w| self.vocab.get(w)).collect();
        if let Some(t) = b.tags.question.iter().find(|t| **t != PAD && !qwords.contains(t)) {
            return bad(format!("question tag {t} is not a question word"));
        }
        if b.questions.is_empty() {
            return bad("at least one reference question is required".into());
        }
        if let Some(i) = b.questions.iter().position(|q| q.len() < 2 || q.last() != Some(&EOS)) {
            return bad(format!("question {i} must contain a token and end with EOS"));
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let header = Header {
            vocab_size: self.vocab.len(),
            image_dim: self.image_dim,
            place_dim: self.place_dim,
            vocab: self.vocab.tokens().to_vec(),
        };
        let json = |e: serde_json::Error| DatasetError::Io(e.into());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
        for b in &self.bundles {
            writeln!(w, "{}", serde_json::to_string(b).map_err(json)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    /// Parses and validates a dataset; errors name the offending line (1-based).
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut lines = r.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(DatasetError::Header("file is empty".into())),
                Some((_, l)) if l.as_ref().is_ok_and(|s| s.trim().is_empty()) => continue,
                Some((i, l)) => {
                    break serde_json::from_str(&l?).map_err(|e| DatasetError::Parse {
                        line: i + 1,
                        msg: format!("header: {e}"),
                    })?
                }
            }
        };
        if header.vocab.len() != header.vocab_size {
            return Err(DatasetError::Header(format!(
                "V = {} but vocab lists {} tokens",
                header.vocab_size,
                header.vocab.len()
            )));
        }
        let mut ds = Dataset {
            vocab: Vocabulary::from_tokens(header.vocab)?,
            image_dim: header.image_dim,
            place_dim: header.place_dim,
            bundles: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (i, l) in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let b: CueBundle = serde_json::from_str(&l).map_err(|e| DatasetError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            ds.validate_bundle(&b, i + 1)?;
            if !seen.insert(b.id) {
                return Err(DatasetError::Invalid {
                    line: i + 1,
                    msg: format!("duplicate id {}", b.id),
                });
            }
            ds.bundles.push(b);
        }
        if ds.bundles.is_empty() {
            return Err(DatasetError::Header("dataset has no examples".into()));
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let f = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DatasetError::NotFound(path.display().to_string()),
            _ => DatasetError::Io(e),
        })?;
        Self::read_jsonl(BufReader::new(f))
    }

    /// Seeded shuffle into `(train, validation)`; the validation share is
    /// `round(len · fraction)`, at least one example when `fraction > 0` and
    /// the dataset has more than one.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.bundles.len()).collect();
        RngStream::new(seed, 0x5b117).shuffle(&mut idx);
        let n = self.bundles.len();
        let mut n_val = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n > 1 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        let val = idx[..n_val].to_vec();
        let train = idx[n_val..].to_vec();
        (train, val)
    }
}
