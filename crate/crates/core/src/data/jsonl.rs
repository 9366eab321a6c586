use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetKind, Episode, EpisodeDataset, LabelStatus, LabeledVector, Vocab};
use crate::error::{invalid, LmnError, Result};

/// Sidecar describing a dataset's full label table and seen/unseen split,
/// which the line format itself cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    /// Label names in id order.
    pub labels: Vec<String>,
    pub unseen: Vec<String>,
}

impl DatasetMeta {
    pub fn of(ds: &EpisodeDataset) -> Self {
        Self {
            kind: ds.kind(),
            labels: ds.vocab().names().to_vec(),
            unseen: ds
                .unseen_labels()
                .into_iter()
                .map(|l| ds.vocab().name(l).to_owned())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| invalid(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LmnError::ParseLine {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Vocabulary seeded with this table.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_names(self.labels.iter().cloned())
    }

    /// Applies the unseen annotation to `ds`, which must share the table.
    pub fn annotate(&self, ds: EpisodeDataset) -> Result<EpisodeDataset> {
        let ids = self
            .unseen
            .iter()
            .map(|n| {
                ds.vocab()
                    .id(n)
                    .ok_or_else(|| LmnError::Schema(format!("unseen label `{n}` not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        ds.with_unseen(&ids)
    }
}

/// Loads a JSONL dataset with a fresh vocabulary.
pub fn load_jsonl(path: &Path) -> Result<EpisodeDataset> {
    load_jsonl_with_vocab(path, Vocab::new())
}

/// Loads a JSONL dataset: one episode per line, either an array of token
/// strings or an array of `{"x": [floats], "y": "label"}` objects. Names
/// missing from `vocab` get fresh ids in first-appearance order.
pub fn load_jsonl_with_vocab(path: &Path, mut vocab: Vocab) -> Result<EpisodeDataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut kind: Option<DatasetKind> = None;
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| LmnError::ParseLine {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let items = value
            .as_array()
            .ok_or_else(|| parse_err("episode must be a JSON array".into()))?;
        if items.is_empty() {
            return Err(parse_err("empty episode".into()));
        }
        let line_kind = if items[0].is_string() {
            DatasetKind::TokenSequences
        } else {
            DatasetKind::LabeledVectors
        };
        match kind {
            None => kind = Some(line_kind),
            Some(k) if k != line_kind => {
                return Err(LmnError::Schema(format!(
                    "line {line_no}: episode kind differs from earlier lines"
                )))
            }
            _ => {}
        }
        let episode = match line_kind {
            DatasetKind::TokenSequences => Episode::Tokens(
                items
                    .iter()
                    .map(|it| {
                        it.as_str()
                            .map(|s| vocab.intern(s))
                            .ok_or_else(|| LmnError::Schema(format!("line {line_no}: mixed kinds")))
                    })
                    .collect::<Result<_>>()?,
            ),
            DatasetKind::LabeledVectors => Episode::Vectors(
                items
                    .iter()
                    .map(|it| parse_labeled(it, &mut vocab, line_no))
                    .collect::<Result<_>>()?,
            ),
        };
        episodes.push(episode);
    }
    let kind = kind.ok_or_else(|| invalid("no episodes"))?;
    EpisodeDataset::new(kind, vocab, episodes)
}

fn parse_labeled(item: &Value, vocab: &mut Vocab, line: usize) -> Result<LabeledVector> {
    let obj = item.as_object().ok_or_else(|| {
        LmnError::Schema(format!("line {line}: mixed kinds (expected {{\"x\", \"y\"}} object)"))
    })?;
    let err = |m: &str| LmnError::ParseLine {
        line,
        message: m.to_owned(),
    };
    let x = obj
        .get("x")
        .and_then(Value::as_array)
        .ok_or_else(|| err("missing array field `x`"))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| err("non-numeric entry in `x`")))
        .collect::<Result<Vec<f64>>>()?;
    let y = obj
        .get("y")
        .and_then(Value::as_str)
        .ok_or_else(|| err("missing string field `y`"))?;
    Ok(LabeledVector {
        x,
        y: vocab.intern(y),
    })
}

/// Writes `ds` in the line format read by [`load_jsonl`].
pub fn save_jsonl(ds: &EpisodeDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let vocab = ds.vocab();
    for ep in ds.episodes() {
        let value = match ep {
            Episode::Tokens(ts) => Value::Array(
                ts.iter()
                    .map(|&t| Value::String(vocab.name(t).to_owned()))
                    .collect(),
            ),
            Episode::Vectors(vs) => Value::Array(
                vs.iter()
                    .map(|lv| serde_json::json!({ "x": lv.x, "y": vocab.name(lv.y) }))
                    .collect(),
            ),
        };
        serde_json::to_writer(&mut out, &value).map_err(|e| invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

impl EpisodeDataset {
    /// True when `label` is annotated unseen.
    pub fn is_unseen(&self, label: usize) -> bool {
        self.status(label) == LabelStatus::Unseen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_has_no_episodes() {
        let f = write("");
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("no episodes"));
    }

    #[test]
    fn single_token_episode() {
        let f = write("[\"a\",\"b\",\"a\"]\n");
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.num_labels(), 2);
        assert_eq!(ds.episodes().len(), 1);
        assert_eq!(ds.episodes()[0].len(), 3);
        assert_eq!(ds.episodes()[0], Episode::Tokens(vec![0, 1, 0]));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write("[\"a\"]\n[\"b\",\n");
        match load_jsonl(f.path()).unwrap_err() {
            LmnError::ParseLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mixed_kinds_are_a_schema_error() {
        let f = write("[\"a\"]\n[{\"x\":[1.0],\"y\":\"a\"}]\n");
        assert!(matches!(load_jsonl(f.path()).unwrap_err(), LmnError::Schema(_)));
        let f = write("[\"a\", {\"x\":[1.0],\"y\":\"a\"}]\n");
        assert!(matches!(load_jsonl(f.path()).unwrap_err(), LmnError::Schema(_)));
    }

    #[test]
    fn vectors_round_trip_through_save() {
        let f = write(
            "[{\"x\":[0.1,-2.5],\"y\":\"cat\"},{\"x\":[1e-300,3.0],\"y\":\"dog\"}]\n\
             [{\"x\":[0.30000000000000004,0.0],\"y\":\"cat\"}]\n",
        );
        let ds = load_jsonl(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&ds, out.path()).unwrap();
        let again = load_jsonl(out.path()).unwrap();
        assert_eq!(ds, again);
        let out2 = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&again, out2.path()).unwrap();
        assert_eq!(
            fs::read_to_string(out.path()).unwrap(),
            fs::read_to_string(out2.path()).unwrap()
        );
    }

    #[test]
    fn seeded_vocab_keeps_ids_and_meta_annotates() {
        let f = write("[\"z\",\"a\"]\n");
        let meta = DatasetMeta {
            kind: DatasetKind::TokenSequences,
            labels: vec!["a".into(), "b".into()],
            unseen: vec!["b".into()],
        };
        let ds = load_jsonl_with_vocab(f.path(), meta.vocab().unwrap()).unwrap();
        assert_eq!(ds.episodes()[0], Episode::Tokens(vec![2, 0]));
        let ds = meta.annotate(ds).unwrap();
        assert!(ds.is_unseen(1));
        assert!(!ds.is_unseen(0));
    }
}
