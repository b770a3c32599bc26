//! Region sets, paragraphs, and the JSONL corpus formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use paragan_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, END};

pub type TokenId = usize;

/// Region features (one row per region) and each region's tokenized phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    features: Tensor,
    phrases: Vec<Vec<TokenId>>,
}

impl RegionSet {
    pub fn new(features: Vec<Vec<f64>>, phrases: Vec<Vec<TokenId>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("region set"));
        }
        if features.len() != phrases.len() {
            return Err(Error::invalid(format!(
                "{} feature vectors but {} phrases",
                features.len(),
                phrases.len()
            )));
        }
        if let Some(j) = phrases.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("region {j} has an empty phrase")));
        }
        let features = Tensor::from_rows(&features)?;
        Ok(RegionSet { features, phrases })
    }

    /// Number of regions `M`.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    /// `[M, feat_dim]`
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        self.features.row_slice(j)
    }

    pub fn phrases(&self) -> &[Vec<TokenId>] {
        &self.phrases
    }

    pub fn check_tokens(&self, vocab_size: usize) -> Result<()> {
        for &id in self.phrases.iter().flatten() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, size: vocab_size });
            }
        }
        Ok(())
    }
}

/// Ordered sentences of token ids. A sentence ends with [`END`] unless it was
/// truncated at the word limit; `END` never appears earlier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Paragraph {
    sentences: Vec<Vec<TokenId>>,
}

impl Paragraph {
    pub fn new(sentences: Vec<Vec<TokenId>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("paragraph"));
        }
        for (t, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("sentence {t} is empty")));
            }
            if s[..s.len() - 1].contains(&END) {
                return Err(Error::invalid(format!("sentence {t} has END before its last token")));
            }
        }
        Ok(Paragraph { sentences })
    }

    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }

    pub fn into_sentences(self) -> Vec<Vec<TokenId>> {
        self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Total number of predicted tokens, END included.
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn check_tokens(&self, vocab_size: usize) -> Result<()> {
        for &id in self.sentences.iter().flatten() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, size: vocab_size });
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, s_max: usize, n_max: usize) -> Result<()> {
        if self.len() > s_max {
            return Err(Error::invalid(format!("{} sentences exceed S_max={s_max}", self.len())));
        }
        if let Some(s) = self.sentences.iter().find(|s| s.len() > n_max) {
            return Err(Error::invalid(format!(
                "sentence of {} tokens exceeds N_max={n_max}",
                s.len()
            )));
        }
        Ok(())
    }

    pub fn encode(sentences: &[String], vocab: &Vocabulary) -> Result<Self> {
        Paragraph::new(sentences.iter().map(|s| vocab.encode_sentence(s)).collect())
    }

    pub fn decode(&self, vocab: &Vocabulary) -> Vec<String> {
        self.sentences.iter().map(|s| vocab.decode(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub feat: Vec<f64>,
    pub phrase: String,
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub regions: Vec<RegionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl CorpusRecord {
    /// Every piece of text in the record, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.regions
            .iter()
            .map(|r| r.phrase.as_str())
            .chain(self.paragraph.iter().flatten().map(String::as_str))
            .chain(self.caption.as_deref())
    }

    fn validate(&self, feat_dim: Option<usize>) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("field \"id\" is empty".into());
        }
        if self.regions.is_empty() {
            return Err("field \"regions\" is empty".into());
        }
        let expected = feat_dim.unwrap_or(self.regions[0].feat.len());
        for (j, r) in self.regions.iter().enumerate() {
            if r.feat.len() != expected {
                return Err(format!(
                    "field \"regions[{j}].feat\" has length {}, expected {expected}",
                    r.feat.len()
                ));
            }
            if r.feat.iter().any(|v| !v.is_finite()) {
                return Err(format!("field \"regions[{j}].feat\" has a non-finite value"));
            }
            if r.phrase.split_whitespace().next().is_none() {
                return Err(format!("field \"regions[{j}].phrase\" is empty"));
            }
        }
        if let Some(p) = &self.paragraph {
            if p.is_empty() {
                return Err("field \"paragraph\" is empty".into());
            }
            if let Some(t) = p.iter().position(|s| s.split_whitespace().next().is_none()) {
                return Err(format!("field \"paragraph[{t}]\" is empty"));
            }
        }
        if let Some(c) = &self.caption {
            if c.split_whitespace().next().is_none() {
                return Err("field \"caption\" is empty".into());
            }
        }
        Ok(())
    }

    pub fn regions(&self, vocab: &Vocabulary) -> Result<RegionSet> {
        RegionSet::new(
            self.regions.iter().map(|r| r.feat.clone()).collect(),
            self.regions.iter().map(|r| vocab.encode(&r.phrase)).collect(),
        )
    }
}

/// One line of a standalone paragraph corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParagraphRecord {
    pub paragraph: Vec<String>,
}

fn read_jsonl<T, F>(path: &Path, mut validate: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: lineno,
            msg: e.to_string(),
        })?;
        validate(&rec).map_err(|msg| Error::Corpus { line: lineno, msg })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus file. With `feat_dim` set, every feature vector must have
/// that length; otherwise all must match the first region of each record.
pub fn load_corpus(path: &Path, feat_dim: Option<usize>) -> Result<Vec<CorpusRecord>> {
    read_jsonl(path, |r: &CorpusRecord| r.validate(feat_dim))
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_paragraph_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let recs = read_jsonl(path, |r: &ParagraphRecord| {
        if r.paragraph.is_empty() {
            Err("field \"paragraph\" is empty".into())
        } else {
            Ok(())
        }
    })?;
    Ok(recs.into_iter().map(|r| r.paragraph).collect())
}

pub fn save_paragraph_corpus(path: &Path, paragraphs: &[Vec<String>]) -> Result<()> {
    let recs: Vec<ParagraphRecord> = paragraphs
        .iter()
        .map(|p| ParagraphRecord { paragraph: p.clone() })
        .collect();
    write_jsonl(path, &recs)
}
