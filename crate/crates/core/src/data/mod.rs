//! Episode datasets: JSONL ingestion and synthetic generators for the
//! repeat-heavy sequence task and the seen/unseen Gaussian-cluster task.

mod generate;
mod jsonl;

use std::collections::HashMap;

use crate::error::{invalid, Result};

pub use generate::{
    gen_label_episodes, gen_label_stream, gen_repeat_markov, ClusterSpec, GeneratorSpec,
    LabelStream, HOME_SET_SIZE,
};
pub use jsonl::{load_jsonl, load_jsonl_with_vocab, save_jsonl, DatasetMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TokenSequences,
    LabeledVectors,
}

/// Whether the batch-trained network saw a label during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStatus {
    Seen,
    Unseen,
}

/// Bidirectional label/token name table with dense ids in first-insert order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Result<Self> {
        let mut v = Self::new();
        for n in names {
            let n = n.into();
            if v.ids.contains_key(&n) {
                return Err(invalid(format!("duplicate vocabulary entry `{n}`")));
            }
            v.intern(&n);
        }
        Ok(v)
    }

    /// Id for `name`, assigning the next free id on first sight.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub x: Vec<f64>,
    pub y: usize,
}

/// One deployment sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Episode {
    /// Token ids `x_1..x_n`; step `t` feeds `x_t` and expects `x_{t+1}`.
    Tokens(Vec<usize>),
    /// Independent `(x, y)` pairs.
    Vectors(Vec<LabeledVector>),
}

/// Input of a single prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepInput<'a> {
    Token(usize),
    Features(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<'a> {
    pub input: StepInput<'a>,
    pub label: usize,
}

impl Episode {
    /// Number of tokens or labeled vectors.
    pub fn len(&self) -> usize {
        match self {
            Episode::Tokens(t) => t.len(),
            Episode::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prediction steps: `n - 1` for token episodes, `n` for vector episodes.
    pub fn steps(&self) -> Vec<Step<'_>> {
        match self {
            Episode::Tokens(t) => t
                .windows(2)
                .map(|w| Step {
                    input: StepInput::Token(w[0]),
                    label: w[1],
                })
                .collect(),
            Episode::Vectors(v) => v
                .iter()
                .map(|lv| Step {
                    input: StepInput::Features(&lv.x),
                    label: lv.y,
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.steps().iter().map(|s| s.label).collect()
    }
}

/// A collection of episodes over a shared label space of size `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    kind: DatasetKind,
    vocab: Vocab,
    episodes: Vec<Episode>,
    status: Vec<LabelStatus>,
}

impl EpisodeDataset {
    /// Validates the invariants: label ids below `V`, non-empty episodes
    /// matching `kind`, and one feature dimension across the dataset.
    pub fn new(kind: DatasetKind, vocab: Vocab, episodes: Vec<Episode>) -> Result<Self> {
        let v = vocab.len();
        let mut dim = None;
        for (i, ep) in episodes.iter().enumerate() {
            if ep.is_empty() {
                return Err(invalid(format!("episode {i} is empty")));
            }
            match (kind, ep) {
                (DatasetKind::TokenSequences, Episode::Tokens(ts)) => {
                    if let Some(t) = ts.iter().find(|&&t| t >= v) {
                        return Err(invalid(format!("episode {i}: token id {t} >= V={v}")));
                    }
                }
                (DatasetKind::LabeledVectors, Episode::Vectors(xs)) => {
                    for lv in xs {
                        if lv.y >= v {
                            return Err(invalid(format!("episode {i}: label {} >= V={v}", lv.y)));
                        }
                        if lv.x.iter().any(|f| !f.is_finite()) {
                            return Err(invalid(format!("episode {i}: non-finite feature")));
                        }
                        match dim {
                            None => dim = Some(lv.x.len()),
                            Some(d) if d != lv.x.len() => {
                                return Err(invalid(format!(
                                    "episode {i}: feature length {} != {d}",
                                    lv.x.len()
                                )))
                            }
                            _ => {}
                        }
                    }
                }
                _ => return Err(invalid(format!("episode {i} does not match dataset kind"))),
            }
        }
        Ok(Self {
            kind,
            status: vec![LabelStatus::Seen; v],
            vocab,
            episodes,
        })
    }

    /// Marks `labels` as unseen (all others stay seen).
    pub fn with_unseen(mut self, labels: &[usize]) -> Result<Self> {
        for &l in labels {
            if l >= self.status.len() {
                return Err(invalid(format!("unseen label {l} out of range")));
            }
            self.status[l] = LabelStatus::Unseen;
        }
        Ok(self)
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn status(&self, label: usize) -> LabelStatus {
        self.status[label]
    }

    pub fn label_status(&self) -> &[LabelStatus] {
        &self.status
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        self.status.iter().map(|s| *s == LabelStatus::Seen).collect()
    }

    pub fn unseen_labels(&self) -> Vec<usize> {
        (0..self.status.len())
            .filter(|&l| self.status[l] == LabelStatus::Unseen)
            .collect()
    }

    /// Feature dimension of a labeled-vector dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.episodes.iter().find_map(|e| match e {
            Episode::Vectors(v) => v.first().map(|lv| lv.x.len()),
            Episode::Tokens(_) => None,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps().len()).sum()
    }

    /// A dataset holding the episodes at `indices`, sharing vocab and status.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            kind: self.kind,
            vocab: self.vocab.clone(),
            episodes: indices.iter().map(|&i| self.episodes[i].clone()).collect(),
            status: self.status.clone(),
        }
    }
}
