//! Greedy, sampled and beam decoding on top of a generator [`Session`].

use paragan_autograd::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Paragraph, RegionSet, TokenId};
use crate::error::{Error, Result};
use crate::generator::{Generator, ParaCursor, SentenceAttention, SentenceCursor, Session, STOP};
use crate::vocab::END;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    /// Maximum sentences per paragraph.
    pub s_max: usize,
    /// Maximum tokens per sentence, END included.
    pub n_max: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { s_max: 6, n_max: 30 }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        if self.s_max == 0 || self.n_max == 0 {
            return Err(Error::invalid("decoding limits must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64 },
    Beam { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub paragraph: Paragraph,
    /// Teacher-forced log-probability of the emitted words.
    pub logprob: f64,
    pub attention: Vec<SentenceAttention>,
}

/// Highest-scoring token; ties go to the lower id. With `mask_end`, END is
/// never chosen unless it is the only token.
pub fn argmax_token(logp: &[f64], mask_end: bool) -> TokenId {
    let mut best: Option<(TokenId, f64)> = None;
    for (id, &v) in logp.iter().enumerate() {
        if mask_end && id == END {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map_or(END, |(id, _)| id)
}

/// Inverse-CDF draw from a log-distribution.
pub fn sample_token(logp: &[f64], rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (id, &v) in logp.iter().enumerate() {
        acc += v.exp();
        if u < acc {
            return id;
        }
    }
    logp.len() - 1
}

fn finished(words: &[TokenId], n_max: usize) -> bool {
    words.last() == Some(&END) || words.len() >= n_max
}

pub fn greedy_sentence<'t>(
    s: &Session<'_, 't>,
    mut sc: SentenceCursor<'t>,
    n_max: usize,
) -> Result<SentenceCursor<'t>> {
    while !finished(&sc.words, n_max) {
        let step = s.word_step(&sc)?;
        let tok = argmax_token(step.logp.value().data(), sc.words.is_empty());
        s.advance(&mut sc, &step, tok)?;
    }
    Ok(sc)
}

pub fn sample_sentence<'t>(
    s: &Session<'_, 't>,
    mut sc: SentenceCursor<'t>,
    n_max: usize,
    rng: &mut impl Rng,
) -> Result<SentenceCursor<'t>> {
    while !finished(&sc.words, n_max) {
        let step = s.word_step(&sc)?;
        let tok = sample_token(step.logp.value().data(), rng);
        s.advance(&mut sc, &step, tok)?;
    }
    Ok(sc)
}

/// Beam search inside one sentence. Hypotheses are ranked by summed
/// log-probability; search ends once the best finished hypothesis scores at
/// least as high as every unfinished one.
pub fn beam_sentence<'t>(
    s: &Session<'_, 't>,
    sc: SentenceCursor<'t>,
    n_max: usize,
    width: usize,
) -> Result<SentenceCursor<'t>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let mut beam: Vec<(SentenceCursor<'t>, f64)> = vec![(sc, 0.0)];
    loop {
        let mut next = Vec::with_capacity(beam.len() * width);
        for (h, score) in beam {
            if finished(&h.words, n_max) {
                next.push((h, score));
                continue;
            }
            let step = s.word_step(&h)?;
            let logp = step.logp.value();
            let mut order: Vec<TokenId> = (0..logp.len())
                .filter(|&id| !(h.words.is_empty() && id == END) || logp.len() == 1)
                .collect();
            order.sort_by(|&x, &y| logp.data()[y].total_cmp(&logp.data()[x]).then(x.cmp(&y)));
            for &tok in order.iter().take(width) {
                let mut child = h.clone();
                s.advance(&mut child, &step, tok)?;
                next.push((child, score + logp.data()[tok]));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1));
        next.truncate(width);
        beam = next;

        let best_done = beam
            .iter()
            .filter(|(h, _)| finished(&h.words, n_max))
            .map(|(_, sc)| *sc)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_open = beam
            .iter()
            .filter(|(h, _)| !finished(&h.words, n_max))
            .map(|(_, sc)| *sc)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_open == f64::NEG_INFINITY || best_done >= best_open {
            let (h, _) = beam
                .into_iter()
                .find(|(h, _)| finished(&h.words, n_max))
                .expect("a finished hypothesis exists");
            return Ok(h);
        }
    }
}

/// STOP wins when its probability is strictly larger.
pub fn greedy_stop(sc: &SentenceCursor<'_>) -> bool {
    let lp = sc.stop_logp.value();
    lp.data()[STOP] > lp.data()[1 - STOP]
}

pub fn sample_stop(sc: &SentenceCursor<'_>, rng: &mut impl Rng) -> bool {
    sample_token(sc.stop_logp.value().data(), rng) == STOP
}

/// Checks a conditioning sentence and appends END if missing.
pub fn prepare_first_sentence(first: &[TokenId], vocab_size: usize, limits: &Limits) -> Result<Vec<TokenId>> {
    if first.is_empty() {
        return Err(Error::invalid("first sentence is empty"));
    }
    if let Some(&id) = first.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::TokenOutOfRange { id, size: vocab_size });
    }
    let mut s = first.to_vec();
    if s.last() != Some(&END) {
        s.push(END);
    }
    if s[..s.len() - 1].contains(&END) {
        return Err(Error::invalid("first sentence contains END before its end"));
    }
    if s.len() > limits.n_max {
        return Err(Error::invalid(format!(
            "first sentence has {} tokens, more than N_max={}",
            s.len(),
            limits.n_max
        )));
    }
    Ok(s)
}

/// Continues a paragraph after `done` sentences, sampling words and stop
/// decisions until STOP or `s_max`.
pub fn sample_continuation<'t>(
    s: &Session<'_, 't>,
    mut cursor: ParaCursor<'t>,
    mut input: paragan_autograd::Var<'t>,
    done: usize,
    limits: &Limits,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::new();
    while done + out.len() < limits.s_max {
        let sc = s.open_sentence(cursor, input)?;
        let sc = sample_sentence(s, sc, limits.n_max, rng)?;
        let stop = done + out.len() + 1 == limits.s_max || sample_stop(&sc, rng);
        input = s.sentence_embedding(&sc.words)?;
        cursor = sc.para;
        out.push(sc.words);
        if stop {
            break;
        }
    }
    Ok(out)
}

fn decode_paragraph(
    s: &Session<'_, '_>,
    mode: DecodeMode,
    first: Option<&[TokenId]>,
    limits: &Limits,
) -> Result<Vec<Vec<TokenId>>> {
    let mut rng = match mode {
        DecodeMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut cursor = s.begin();
    let mut input = match first {
        Some(f) => s.sentence_embedding(f)?,
        None => s.start_input()?,
    };
    let mut out: Vec<Vec<TokenId>> = Vec::new();
    loop {
        let mut sc = s.open_sentence(cursor, input)?;
        sc = match (out.is_empty(), first, mode) {
            (true, Some(f), _) => {
                sc.words = f.to_vec();
                sc
            }
            (_, _, DecodeMode::Greedy) => greedy_sentence(s, sc, limits.n_max)?,
            (_, _, DecodeMode::Sample { .. }) => sample_sentence(s, sc, limits.n_max, rng.as_mut().unwrap())?,
            (_, _, DecodeMode::Beam { width }) => beam_sentence(s, sc, limits.n_max, width)?,
        };
        let stop = out.len() + 1 >= limits.s_max
            || match rng.as_mut() {
                Some(r) => sample_stop(&sc, r),
                None => greedy_stop(&sc),
            };
        input = s.sentence_embedding(&sc.words)?;
        cursor = sc.para;
        out.push(sc.words);
        if stop {
            return Ok(out);
        }
    }
}

/// Decodes a paragraph for `regions`.
///
/// Beam mode also decodes greedily and keeps whichever paragraph has the
/// higher log-probability, so its result never scores below greedy.
pub fn generate(
    gen: &Generator,
    regions: &RegionSet,
    mode: DecodeMode,
    first: Option<&[TokenId]>,
    limits: &Limits,
) -> Result<Generated> {
    limits.validate()?;
    let first = first
        .map(|f| prepare_first_sentence(f, gen.dims.vocab_size, limits))
        .transpose()?;
    let first = first.as_deref();
    let tape = Tape::new();
    let s = gen.session(&tape, regions, false)?;
    let score = |sentences: Vec<Vec<TokenId>>| -> Result<Generated> {
        let paragraph = Paragraph::new(sentences)?;
        let forced = s.teacher_force(&paragraph, first)?;
        Ok(Generated {
            logprob: forced.log_prob()?.item(),
            attention: forced.attention,
            paragraph,
        })
    };
    let out = score(decode_paragraph(&s, mode, first, limits)?)?;
    if let DecodeMode::Beam { .. } = mode {
        let greedy = score(decode_paragraph(&s, DecodeMode::Greedy, first, limits)?)?;
        if greedy.logprob > out.logprob {
            return Ok(greedy);
        }
    }
    Ok(out)
}
