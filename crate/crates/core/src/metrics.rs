//! Token-level BLEU, CIDEr and an exact-match METEOR.
//!
//! Every metric scores a flattened paragraph: sentences are tokenized with the
//! vocabulary rules and concatenated, so sentence boundaries do not matter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

pub const MAX_ORDER: usize = 4;

/// One candidate and its references, already flattened to tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Empty("reference list"));
        }
        Ok(EvalPair { candidate, references })
    }

    /// Tokenizes and concatenates sentence strings.
    pub fn from_paragraphs<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Result<Self> {
        let flat = |p: &[S]| -> Vec<String> { p.iter().flat_map(|s| tokenize(s.as_ref())).collect() };
        EvalPair::new(flat(candidate), references.iter().map(|r| flat(r)).collect())
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn check_order(n: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "BLEU order must be in 1..={MAX_ORDER}, got {n}"
        )))
    }
}

/// Corpus BLEU-n: clipped matches and totals are summed over all pairs before
/// the precisions are formed; `r` sums each pair's closest reference length.
pub fn corpus_bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    check_order(n)?;
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for pair in pairs {
        if pair.candidate.is_empty() {
            log::warn!("empty candidate scored as zero");
        }
        let len = pair.candidate.len();
        c += len;
        r += pair
            .references
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| (l.abs_diff(len), l))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngrams(&pair.candidate, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for reference in &pair.references {
                for (g, cnt) in ngrams(reference, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            matches[k - 1] += cand
                .iter()
                .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[k - 1] += cand.values().sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for k in 0..n {
        if matches[k] == 0 {
            return Ok(0.0);
        }
        log_p += (matches[k] as f64 / totals[k] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_p / n as f64).exp())
}

pub fn bleu(pair: &EvalPair, n: usize) -> Result<f64> {
    corpus_bleu(std::slice::from_ref(pair), n)
}

type Vector<'a> = HashMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(&[String]) -> f64) -> Vector<'a> {
    let counts = ngrams(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, cnt)| (g, cnt as f64 / total as f64 * idf(g)))
        .collect()
}

fn cosine(a: &Vector<'_>, b: &Vector<'_>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-image CIDEr scores and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Cider {
    pub score: f64,
    pub per_image: Vec<f64>,
}

/// CIDEr with natural-log idf over the reference corpus, one document per image.
///
/// An image scores `10/4 * sum_n cos(tfidf_n(candidate), mean_refs tfidf_n(ref))`.
/// N-grams absent from every reference get document frequency 1.
pub fn cider(pairs: &[EvalPair]) -> Result<Cider> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "CIDEr needs at least 2 images for a usable idf, got {}",
            pairs.len()
        )));
    }
    let n_images = pairs.len() as f64;
    let mut per_image = vec![0.0; pairs.len()];
    for n in 1..=MAX_ORDER {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for pair in pairs {
            let mut seen: Vec<&[String]> = pair.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_images / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (pair, out) in pairs.iter().zip(&mut per_image) {
            let cand = tfidf(&pair.candidate, n, &idf);
            let mut mean: Vector<'_> = HashMap::new();
            for reference in &pair.references {
                for (g, x) in tfidf(reference, n, &idf) {
                    *mean.entry(g).or_insert(0.0) += x / pair.references.len() as f64;
                }
            }
            *out += 10.0 / MAX_ORDER as f64 * cosine(&cand, &mean);
        }
    }
    Ok(Cider {
        score: per_image.iter().sum::<f64>() / n_images,
        per_image,
    })
}

/// Exact unigram alignment; each candidate token takes the unused reference
/// occurrence that extends the current chunk if possible, else the earliest one.
fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for tok in candidate {
        let next = prev
            .map(|p| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *tok);
        let j = next.or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok));
        match j {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if next.is_none() {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

/// METEOR without stemming or synonyms; best score over the references.
pub fn meteor_exact(pair: &EvalPair) -> f64 {
    pair.references
        .iter()
        .map(|r| meteor_single(&pair.candidate, r))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub meteor_exact: f64,
    pub n_images: usize,
}

/// Corpus BLEU-1..4, CIDEr, and METEOR averaged over images.
pub fn evaluate(pairs: &[EvalPair]) -> Result<Report> {
    let b = (1..=MAX_ORDER)
        .map(|n| corpus_bleu(pairs, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        cider: cider(pairs)?.score,
        meteor_exact: pairs.iter().map(meteor_exact).sum::<f64>() / pairs.len() as f64,
        n_images: pairs.len(),
    })
}
