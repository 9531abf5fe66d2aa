//! Dataset ingestion, vocabularies, embeddings, fold plans and test noise.

mod embeddings;
mod folds;
mod noise;
pub mod synthetic;
mod vocab;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::{init_embeddings, load_pretrained, Pretrained};
pub use folds::{make_folds, FoldPlan};
pub use noise::{gaussian_embedding_noise, word_dropout_noise, NoiseSpec};
pub use vocab::{Vocab, MASK, PAD, UNK};

/// On-disk corpus layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// `<label>\t<tokens>` per line.
    Tsv,
    /// Two files of sentences; the first is labelled `pos`, the second `neg`.
    TwoFilePolarity,
    /// Directory holding `train.tsv` and `test.tsv`.
    PresplitDir,
}

impl CorpusFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorpusFormat::Tsv => "tsv",
            CorpusFormat::TwoFilePolarity => "two-file-polarity",
            CorpusFormat::PresplitDir => "presplit-dir",
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(CorpusFormat::Tsv),
            "two-file-polarity" => Ok(CorpusFormat::TwoFilePolarity),
            "presplit-dir" => Ok(CorpusFormat::PresplitDir),
            other => Err(Error::invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub paths: Vec<PathBuf>,
    pub format: CorpusFormat,
}

/// Labelled, pre-tokenized sentences. Labels are dense in
/// `0..label_names.len()` and every sentence has at least one token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Sentence>,
    pub label_names: Vec<String>,
    pub provenance: Provenance,
}

/// Result of [`load_corpus`]: either one pool of examples to be split by
/// cross validation, or a designated train/test pair.
#[derive(Clone, Debug)]
pub enum LoadedCorpus {
    Whole(Corpus),
    Presplit { train: Corpus, test: Corpus },
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            label_names: self.label_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Re-expresses labels in terms of `names`, which must contain the same
    /// set of label names.
    pub fn relabel(&self, names: &[String]) -> Result<Corpus> {
        let mut mine = self.label_names.clone();
        let mut theirs = names.to_vec();
        mine.sort();
        theirs.sort();
        if mine != theirs {
            return Err(Error::LabelMismatch {
                train: names.to_vec(),
                test: self.label_names.clone(),
            });
        }
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let map: Vec<usize> = self
            .label_names
            .iter()
            .map(|n| index[n.as_str()])
            .collect();
        Ok(Corpus {
            examples: self
                .examples
                .iter()
                .map(|s| Sentence {
                    tokens: s.tokens.clone(),
                    label: map[s.label],
                })
                .collect(),
            label_names: names.to_vec(),
            provenance: self.provenance.clone(),
        })
    }
}

/// Reads a corpus. `paths` holds one file for `tsv`, two for
/// `two-file-polarity` and one directory for `presplit-dir`.
pub fn load_corpus(paths: &[PathBuf], format: CorpusFormat) -> Result<LoadedCorpus> {
    let expect = |n: usize| -> Result<()> {
        if paths.len() == n {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} expects {n} path(s), got {}",
                format.as_str(),
                paths.len()
            )))
        }
    };
    match format {
        CorpusFormat::Tsv => {
            expect(1)?;
            Ok(LoadedCorpus::Whole(read_tsv(&paths[0], &mut LabelMap::default())?))
        }
        CorpusFormat::TwoFilePolarity => {
            expect(2)?;
            let mut examples = Vec::new();
            for (label, path) in paths.iter().enumerate() {
                for (line_no, line) in read_lines(path)? {
                    examples.push(Sentence {
                        tokens: tokenize(path, line_no, &line)?,
                        label,
                    });
                }
            }
            Ok(LoadedCorpus::Whole(Corpus {
                examples,
                label_names: vec!["pos".to_string(), "neg".to_string()],
                provenance: Provenance {
                    paths: paths.to_vec(),
                    format,
                },
            }))
        }
        CorpusFormat::PresplitDir => {
            expect(1)?;
            let mut labels = LabelMap::default();
            let mut train = read_tsv(&paths[0].join("train.tsv"), &mut labels)?;
            let mut test = read_tsv(&paths[0].join("test.tsv"), &mut labels)?;
            for c in [&mut train, &mut test] {
                c.label_names = labels.names.clone();
                c.provenance = Provenance {
                    paths: paths.to_vec(),
                    format,
                };
            }
            Ok(LoadedCorpus::Presplit { train, test })
        }
    }
}

#[derive(Default)]
struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    fn id(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

fn read_tsv(path: &Path, labels: &mut LabelMap) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "missing tab between label and text"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::parse(path, line_no, "empty label"));
        }
        examples.push(Sentence {
            tokens: tokenize(path, line_no, text)?,
            label: labels.id(label),
        });
    }
    Ok(Corpus {
        examples,
        label_names: labels.names.clone(),
        provenance: Provenance {
            paths: vec![path.to_path_buf()],
            format: CorpusFormat::Tsv,
        },
    })
}

/// Non-empty lines with 1-based line numbers. Blank lines, empty files and
/// invalid UTF-8 are errors.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count();
        Error::parse(path, line, "invalid UTF-8")
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "blank line"));
        }
        out.push((i + 1, line.to_string()));
    }
    if out.is_empty() {
        return Err(Error::parse(path, 0, "empty file"));
    }
    Ok(out)
}

fn tokenize(path: &Path, line_no: usize, text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().map(vocab::escape).collect();
    if tokens.is_empty() {
        return Err(Error::parse(path, line_no, "no tokens"));
    }
    Ok(tokens)
}
