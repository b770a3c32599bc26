//! Hierarchical paragraph generator: a paragraph LSTM feeding a sentence LSTM
//! with spatial attention over regions, which seeds a word LSTM whose input is
//! an attention-weighted mix of region-phrase word embeddings.

use paragan_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{Paragraph, RegionSet, TokenId};
use crate::error::{Error, Result};
use crate::nn::{Bound, Embedding, Linear, LstmCell, LstmState, ParamBuilder, ParamId, ParamSet};
use crate::vocab::END;

pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub feat_dim: usize,
    pub embed: usize,
    pub paragraph_hidden: usize,
    pub sentence_hidden: usize,
    pub word_hidden: usize,
    pub vocab_size: usize,
}

impl Preset {
    pub fn dims(self, vocab_size: usize) -> Dims {
        match self {
            Preset::Desk => Dims {
                feat_dim: 64,
                embed: 32,
                paragraph_hidden: 64,
                sentence_hidden: 128,
                word_hidden: 64,
                vocab_size,
            },
            Preset::Full => Dims {
                feat_dim: 4096,
                embed: 512,
                paragraph_hidden: 512,
                sentence_hidden: 1024,
                word_hidden: 512,
                vocab_size,
            },
        }
    }

    /// Regions per image.
    pub fn regions(self) -> usize {
        match self {
            Preset::Desk => 10,
            Preset::Full => 50,
        }
    }

    /// Critic LSTM width.
    pub fn critic_hidden(self) -> usize {
        match self {
            Preset::Desk => 128,
            Preset::Full => 512,
        }
    }
}

impl Dims {
    fn validate(&self) -> Result<()> {
        let all = [
            self.feat_dim,
            self.embed,
            self.paragraph_hidden,
            self.sentence_hidden,
            self.word_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::invalid("all generator dimensions must be positive"));
        }
        if self.vocab_size <= END {
            return Err(Error::invalid("vocabulary must contain the special tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub dims: Dims,
    params: ParamSet,
    pub paragraph_lstm: LstmCell,
    pub sentence_lstm: LstmCell,
    pub word_lstm: LstmCell,
    pub embed: Embedding,
    pub beta_v: Linear,
    pub alpha_v: Linear,
    pub beta_l: Linear,
    pub alpha_l: Linear,
    pub stop_head: Linear,
    pub vocab_head: Linear,
    pub topic_to_word_init: Linear,
    pub start: ParamId,
}

impl Generator {
    pub fn new(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let d = dims;
        let mut b = ParamBuilder::new(seed);
        let paragraph_lstm = LstmCell::new(&mut b, "paragraph_lstm", d.embed, d.paragraph_hidden)?;
        let sentence_lstm = LstmCell::new(&mut b, "sentence_lstm", d.feat_dim, d.sentence_hidden)?;
        let word_lstm = LstmCell::new(&mut b, "word_lstm", d.embed, d.word_hidden)?;
        let embed = Embedding::new(&mut b, "word_embed", d.vocab_size, d.embed)?;
        let beta_v = Linear::new(&mut b, "beta_v", d.paragraph_hidden + d.sentence_hidden, d.feat_dim)?;
        let alpha_v = Linear::new(&mut b, "alpha_v", 2 * d.feat_dim, 1)?;
        let beta_l = Linear::new(&mut b, "beta_l", d.sentence_hidden + d.word_hidden, d.embed)?;
        let alpha_l = Linear::new(&mut b, "alpha_l", 2 * d.embed, 1)?;
        let stop_head = Linear::new(&mut b, "stop_head", d.sentence_hidden, 2)?;
        let vocab_head = Linear::new(&mut b, "vocab_head", d.word_hidden, d.vocab_size)?;
        let topic_to_word_init = Linear::new(&mut b, "topic_to_word_init", d.sentence_hidden, d.word_hidden)?;
        let start = b.uniform("start_of_paragraph", &[d.embed], d.embed)?;
        Ok(Generator {
            dims,
            params: b.finish(),
            paragraph_lstm,
            sentence_lstm,
            word_lstm,
            embed,
            beta_v,
            alpha_v,
            beta_l,
            alpha_l,
            stop_head,
            vocab_head,
            topic_to_word_init,
            start,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Binds the parameters onto `tape` and prepares the region constants.
    pub fn session<'g, 't>(
        &'g self,
        tape: &'t Tape,
        regions: &RegionSet,
        requires_grad: bool,
    ) -> Result<Session<'g, 't>> {
        self.session_with(self.params.bind(tape, requires_grad), regions)
    }

    pub fn session_with<'g, 't>(&'g self, p: Bound<'t>, regions: &RegionSet) -> Result<Session<'g, 't>> {
        if regions.feat_dim() != self.dims.feat_dim {
            return Err(Error::invalid(format!(
                "region features have dimension {}, model expects {}",
                regions.feat_dim(),
                self.dims.feat_dim
            )));
        }
        regions.check_tokens(self.dims.vocab_size)?;
        let tape = p.tape();
        let m = regions.len();
        let mut cand_tokens = Vec::new();
        let mut cand_region = Vec::new();
        for (j, phrase) in regions.phrases().iter().enumerate() {
            for &w in phrase {
                cand_tokens.push(w);
                cand_region.push(j);
            }
        }
        if cand_tokens.is_empty() {
            return Err(Error::Empty("region phrases"));
        }
        let k = cand_tokens.len();
        let mut ind = Tensor::zeros(&[m, k]);
        for (c, &j) in cand_region.iter().enumerate() {
            ind.data_mut()[j * k + c] = 1.0;
        }
        let feats = tape.constant(regions.features().clone());
        let cand = self.embed.lookup(&p, &cand_tokens)?;
        Ok(Session {
            gen: self,
            indicator: tape.constant(ind),
            p,
            feats,
            cand,
            cand_region,
            m,
        })
    }

    /// Log-probability of `paragraph` under the model, words only.
    pub fn log_prob(&self, regions: &RegionSet, paragraph: &Paragraph) -> Result<f64> {
        let tape = Tape::new();
        let s = self.session(&tape, regions, false)?;
        Ok(s.teacher_force(paragraph, None)?.log_prob()?.item())
    }
}

/// Paragraph-level recurrent state between sentences.
#[derive(Debug, Clone, Copy)]
pub struct ParaCursor<'t> {
    pub paragraph: LstmState<'t>,
    pub sentence: LstmState<'t>,
    /// Sentences opened so far.
    pub t: usize,
}

/// State inside one sentence.
#[derive(Debug, Clone)]
pub struct SentenceCursor<'t> {
    pub para: ParaCursor<'t>,
    /// Visual attention `[1, M]`.
    pub a: Var<'t>,
    /// `log a` spread over phrase words, `[1, K]`.
    log_a_cand: Var<'t>,
    /// Topic vector `[1, sentence_hidden]`.
    pub topic: Var<'t>,
    /// `log [p_continue, p_stop]`, `[1, 2]`.
    pub stop_logp: Var<'t>,
    pub word: LstmState<'t>,
    pub words: Vec<TokenId>,
}

/// Output of one word step; the distribution does not depend on which token
/// is then chosen.
#[derive(Debug, Clone, Copy)]
pub struct WordStep<'t> {
    /// `log P(w)`, `[1, V]`.
    pub logp: Var<'t>,
    /// Language attention over phrase words, `[1, K]`.
    pub b: Var<'t>,
    pub state: LstmState<'t>,
}

/// Per-sentence attention record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceAttention {
    pub t: usize,
    pub a: Vec<f64>,
    /// Per word, language weight summed per region.
    pub b: Vec<Vec<f64>>,
}

/// Teacher-forced quantities for one paragraph.
pub struct Forced<'t> {
    pub word_logps: Vec<Vec<Var<'t>>>,
    pub stop_logps: Vec<Var<'t>>,
    pub attention: Vec<SentenceAttention>,
}

impl<'t> Forced<'t> {
    pub fn log_prob(&self) -> Result<Var<'t>> {
        sum_vars(self.word_logps.iter().flatten().copied())
    }

    /// Cross-entropy of the stop head against `CONTINUE` for every sentence
    /// but the last and `STOP` for the last.
    pub fn stop_nll(&self) -> Result<Var<'t>> {
        let last = self.stop_logps.len() - 1;
        let picks = self
            .stop_logps
            .iter()
            .enumerate()
            .map(|(t, lp)| lp.pick(if t == last { STOP } else { CONTINUE }))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sum_vars(picks.into_iter())?.neg().map_err(Into::into)
    }
}

pub(crate) fn sum_vars<'t>(mut vars: impl Iterator<Item = Var<'t>>) -> Result<Var<'t>> {
    let first = vars.next().ok_or(Error::Empty("term list"))?;
    vars.try_fold(first, |acc, v| acc.add(&v).map_err(Into::into))
}

/// A generator bound to one tape and one region set.
pub struct Session<'g, 't> {
    gen: &'g Generator,
    p: Bound<'t>,
    feats: Var<'t>,
    cand: Var<'t>,
    cand_region: Vec<usize>,
    indicator: Var<'t>,
    m: usize,
}

impl<'g, 't> Session<'g, 't> {
    pub fn generator(&self) -> &'g Generator {
        self.gen
    }

    pub fn bound(&self) -> &Bound<'t> {
        &self.p
    }

    pub fn tape(&self) -> &'t Tape {
        self.p.tape()
    }

    pub fn regions(&self) -> usize {
        self.m
    }

    /// Candidate count `K` for language attention.
    pub fn candidates(&self) -> usize {
        self.cand_region.len()
    }

    pub fn begin(&self) -> ParaCursor<'t> {
        let tape = self.tape();
        ParaCursor {
            paragraph: LstmState::zeros(tape, self.gen.dims.paragraph_hidden),
            sentence: LstmState::zeros(tape, self.gen.dims.sentence_hidden),
            t: 0,
        }
    }

    /// Learned input for the first paragraph step, `[1, embed]`.
    pub fn start_input(&self) -> Result<Var<'t>> {
        Ok(self.p.var(self.gen.start).reshape(vec![1, self.gen.dims.embed])?)
    }

    /// Mean word embedding, `[1, embed]`.
    pub fn sentence_embedding(&self, sentence: &[TokenId]) -> Result<Var<'t>> {
        self.gen.embed.mean(&self.p, sentence)
    }

    /// Returns `(f_v [1, F], a [1, M], log a [1, M])`.
    pub fn visual_attention(&self, h_p: Var<'t>, h_s_prev: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let g = self.gen;
        let q = g.beta_v.forward(&self.p, Var::concat(&[h_p, h_s_prev])?)?;
        let pairs = Var::concat(&[self.feats, q.tile_rows(self.m)?])?;
        let scores = g.alpha_v.forward(&self.p, pairs)?.reshape(vec![1, self.m])?;
        let a = scores.softmax()?;
        let log_a = scores.log_softmax()?;
        let f_v = a.matmul(&self.feats)?;
        Ok((f_v, a, log_a))
    }

    /// Returns `(f_l [1, embed], b [1, K])`.
    pub fn language_attention(
        &self,
        log_a_cand: Var<'t>,
        topic: Var<'t>,
        h_w_prev: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let g = self.gen;
        let k = self.candidates();
        let q = g.beta_l.forward(&self.p, Var::concat(&[topic, h_w_prev])?)?;
        let pairs = Var::concat(&[self.cand, q.tile_rows(k)?])?;
        let raw = g.alpha_l.forward(&self.p, pairs)?.reshape(vec![1, k])?;
        let b = raw.add(&log_a_cand)?.softmax()?;
        let f_l = b.matmul(&self.cand)?;
        Ok((f_l, b))
    }

    /// Runs the paragraph step on `input`, visual attention, the sentence step
    /// and the stop head, and initializes the word LSTM from the topic.
    pub fn open_sentence(&self, cursor: ParaCursor<'t>, input: Var<'t>) -> Result<SentenceCursor<'t>> {
        let g = self.gen;
        let paragraph = g.paragraph_lstm.step(&self.p, input, cursor.paragraph)?;
        let (f_v, a, log_a) = self.visual_attention(paragraph.h, cursor.sentence.h)?;
        let sentence = g.sentence_lstm.step(&self.p, f_v, cursor.sentence)?;
        let topic = sentence.h;
        let stop_logp = g.stop_head.forward(&self.p, topic)?.log_softmax()?;
        let word = LstmState {
            h: g.topic_to_word_init.forward(&self.p, topic)?,
            c: self.tape().constant(Tensor::zeros(&[1, g.dims.word_hidden])),
        };
        Ok(SentenceCursor {
            para: ParaCursor {
                paragraph,
                sentence,
                t: cursor.t + 1,
            },
            a,
            log_a_cand: log_a.matmul(&self.indicator)?,
            topic,
            stop_logp,
            word,
            words: Vec::new(),
        })
    }

    pub fn word_step(&self, cursor: &SentenceCursor<'t>) -> Result<WordStep<'t>> {
        let g = self.gen;
        let (f_l, b) = self.language_attention(cursor.log_a_cand, cursor.topic, cursor.word.h)?;
        let state = g.word_lstm.step(&self.p, f_l, cursor.word)?;
        let logp = g.vocab_head.forward(&self.p, state.h)?.log_softmax()?;
        Ok(WordStep { logp, b, state })
    }

    pub fn advance(&self, cursor: &mut SentenceCursor<'t>, step: &WordStep<'t>, token: TokenId) -> Result<()> {
        if token >= self.gen.dims.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: self.gen.dims.vocab_size,
            });
        }
        cursor.word = step.state;
        cursor.words.push(token);
        Ok(())
    }

    /// Sums language weights per region.
    pub fn region_weights(&self, b: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (&w, &j) in b.data().iter().zip(&self.cand_region) {
            out[j] += w;
        }
        out
    }

    /// Teacher-forced pass. With `first` set, the first paragraph step reads
    /// its embedding instead of the learned start vector.
    pub fn teacher_force(&self, paragraph: &Paragraph, first: Option<&[TokenId]>) -> Result<Forced<'t>> {
        paragraph.check_tokens(self.gen.dims.vocab_size)?;
        let mut cursor = self.begin();
        let mut input = match first {
            Some(s) => self.sentence_embedding(s)?,
            None => self.start_input()?,
        };
        let mut out = Forced {
            word_logps: Vec::with_capacity(paragraph.len()),
            stop_logps: Vec::with_capacity(paragraph.len()),
            attention: Vec::with_capacity(paragraph.len()),
        };
        for sentence in paragraph.sentences() {
            let mut sc = self.open_sentence(cursor, input)?;
            let mut logps = Vec::with_capacity(sentence.len());
            let mut bs = Vec::with_capacity(sentence.len());
            for &w in sentence {
                let step = self.word_step(&sc)?;
                logps.push(step.logp.pick(w)?);
                bs.push(self.region_weights(&step.b.value()));
                self.advance(&mut sc, &step, w)?;
            }
            out.attention.push(SentenceAttention {
                t: sc.para.t,
                a: sc.a.to_vec(),
                b: bs,
            });
            out.word_logps.push(logps);
            out.stop_logps.push(sc.stop_logp);
            input = self.sentence_embedding(sentence)?;
            cursor = sc.para;
        }
        Ok(out)
    }
}
