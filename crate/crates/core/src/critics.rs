//! Wasserstein critics: an LSTM over word embeddings scoring one sentence,
//! and an LSTM over sentence embeddings scoring every paragraph prefix.
//! Scores are unbounded reals.

use std::collections::HashMap;

use paragan_autograd::{kernels, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::nn::{Bound, Embedding, Linear, LstmCell, LstmState, ParamBuilder, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticDims {
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
struct Core {
    params: ParamSet,
    embed: Embedding,
    lstm: LstmCell,
    head: Linear,
}

impl Core {
    fn new(name: &str, dims: CriticDims, seed: u64) -> Result<Self> {
        if dims.vocab_size == 0 || dims.embed == 0 || dims.hidden == 0 {
            return Err(Error::invalid("critic dimensions must be positive"));
        }
        let mut b = ParamBuilder::new(seed);
        let embed = Embedding::new(&mut b, &format!("{name}.embed"), dims.vocab_size, dims.embed)?;
        let lstm = LstmCell::new(&mut b, &format!("{name}.lstm"), dims.embed, dims.hidden)?;
        let head = Linear::new(&mut b, &format!("{name}.score_head"), dims.hidden, 1)?;
        Ok(Core {
            params: b.finish(),
            embed,
            lstm,
            head,
        })
    }

    fn dims(&self) -> CriticDims {
        CriticDims {
            vocab_size: self.embed.vocab_size,
            embed: self.embed.dim,
            hidden: self.lstm.hidden,
        }
    }

    /// Runs the LSTM over the rows of `inputs`, returning one `[1, 1]` score per row.
    fn scores<'t>(&self, p: &Bound<'t>, inputs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let mut state = LstmState::zeros(p.tape(), self.lstm.hidden);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.lstm.step(p, x, state)?;
            out.push(self.head.forward(p, state.h)?);
        }
        Ok(out)
    }
}

/// Sentence critic.
#[derive(Debug, Clone)]
pub struct SentenceCritic {
    core: Core,
}

impl SentenceCritic {
    pub fn new(dims: CriticDims, seed: u64) -> Result<Self> {
        Ok(SentenceCritic {
            core: Core::new("sentence_critic", dims, seed)?,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.core.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.core.params
    }

    /// Score of the final hidden state, `[1, 1]`.
    pub fn score_var<'t>(&self, p: &Bound<'t>, sentence: &[TokenId]) -> Result<Var<'t>> {
        if sentence.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let rows = sentence
            .iter()
            .map(|&w| self.core.embed.lookup(p, &[w]))
            .collect::<Result<Vec<_>>>()?;
        Ok(*self.core.scores(p, &rows)?.last().expect("non-empty"))
    }

    pub fn score(&self, sentence: &[TokenId]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.core.params.bind(&tape, false);
        Ok(self.score_var(&p, sentence)?.item())
    }
}

/// Topic-transition critic.
#[derive(Debug, Clone)]
pub struct TopicCritic {
    core: Core,
}

impl TopicCritic {
    pub fn new(dims: CriticDims, seed: u64) -> Result<Self> {
        Ok(TopicCritic {
            core: Core::new("topic_critic", dims, seed)?,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.core.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.core.params
    }

    /// Mean of this critic's own word embeddings, `[1, embed]`.
    pub fn sentence_embedding<'t>(&self, p: &Bound<'t>, sentence: &[TokenId]) -> Result<Var<'t>> {
        self.core.embed.mean(p, sentence)
    }

    /// One score per prefix of `embeddings`.
    pub fn prefix_scores_var<'t>(&self, p: &Bound<'t>, embeddings: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if embeddings.is_empty() {
            return Err(Error::Empty("sentence embedding list"));
        }
        self.core.scores(p, embeddings)
    }

    pub fn paragraph_scores_var<'t>(&self, p: &Bound<'t>, sentences: &[Vec<TokenId>]) -> Result<Vec<Var<'t>>> {
        let embs = sentences
            .iter()
            .map(|s| self.sentence_embedding(p, s))
            .collect::<Result<Vec<_>>>()?;
        self.prefix_scores_var(p, &embs)
    }

    pub fn paragraph_scores(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.core.params.bind(&tape, false);
        Ok(self
            .paragraph_scores_var(&p, sentences)?
            .iter()
            .map(|v| v.item())
            .collect())
    }
}

/// Anything that can score sentences and paragraph prefixes; rewards are
/// computed through this so tests can substitute fixed scorers.
pub trait ParagraphScorer {
    fn sentence_score(&self, sentence: &[TokenId]) -> Result<f64>;
    /// Score at the last step of `sentences`.
    fn prefix_score(&self, sentences: &[Vec<TokenId>]) -> Result<f64>;

    /// `sentence_score(c) + prefix_score(context ++ [c])` for every completion `c`.
    fn completion_scores(&self, context: &[Vec<TokenId>], completions: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let mut prefix = context.to_vec();
        completions
            .iter()
            .map(|c| {
                let ds = self.sentence_score(c)?;
                prefix.push(c.clone());
                let dr = self.prefix_score(&prefix);
                prefix.pop();
                Ok(ds + dr?)
            })
            .collect()
    }
}

/// The two trained critics together.
#[derive(Debug, Clone)]
pub struct Critics {
    pub sentence: SentenceCritic,
    pub topic: TopicCritic,
}

impl Critics {
    pub fn new(dims: CriticDims, seed: u64) -> Result<Self> {
        Ok(Critics {
            sentence: SentenceCritic::new(dims, seed)?,
            topic: TopicCritic::new(dims, seed.wrapping_add(1))?,
        })
    }

    /// Sizes shared by both critics.
    pub fn dims(&self) -> CriticDims {
        self.sentence.core.dims()
    }

    pub fn clip(&mut self, c: f64) {
        self.sentence.params_mut().clip(c);
        self.topic.params_mut().clip(c);
    }
}

impl ParagraphScorer for Critics {
    fn sentence_score(&self, sentence: &[TokenId]) -> Result<f64> {
        self.sentence.score(sentence)
    }

    fn prefix_score(&self, sentences: &[Vec<TokenId>]) -> Result<f64> {
        Ok(*self.topic.paragraph_scores(sentences)?.last().expect("non-empty"))
    }

    /// Tape-free and batched: the topic critic reads `context` once, then
    /// every completion in one step; the sentence critic walks the prefix
    /// trie of the completions one depth at a time.
    fn completion_scores(&self, context: &[Vec<TokenId>], completions: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if completions.iter().any(|c| c.is_empty()) {
            return Err(Error::Empty("sentence"));
        }
        if completions.is_empty() {
            return Ok(Vec::new());
        }
        let (sc, tc) = (&self.sentence.core, &self.topic.core);
        let ds = sc.trie_scores(completions)?;

        let hidden = tc.lstm.hidden;
        let (mut h, mut c) = (Tensor::zeros(&[1, hidden]), Tensor::zeros(&[1, hidden]));
        for sentence in context {
            (h, c) = tc
                .lstm
                .infer(&tc.params, &tc.embed.infer_mean(&tc.params, sentence)?, &h, &c)?;
        }
        let n = completions.len();
        let means = completions
            .iter()
            .map(|s| tc.embed.infer_mean(&tc.params, s))
            .collect::<Result<Vec<_>>>()?;
        let x = kernels::concat(&means.iter().collect::<Vec<_>>())?.reshaped(vec![n, tc.embed.dim])?;
        let (h, _) = tc
            .lstm
            .infer(&tc.params, &x, &kernels::tile_rows(&h, n)?, &kernels::tile_rows(&c, n)?)?;
        let dr = tc.head.infer(&tc.params, &h)?;
        Ok(ds.iter().zip(dr.data()).map(|(a, b)| a + b).collect())
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let data = rows.iter().flat_map(|&r| t.row_slice(r).iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), t.cols()], data)?)
}

impl Core {
    /// Final-step scores of `sentences`, sharing work across common prefixes.
    fn trie_scores(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let hidden = self.lstm.hidden;
        let depth = sentences.iter().map(Vec::len).max().unwrap_or(0);
        // node[i] is sentence i's row at the current depth.
        let mut node = vec![0usize; sentences.len()];
        let mut last_h = vec![Vec::new(); sentences.len()];
        let (mut h, mut c) = (Tensor::zeros(&[1, hidden]), Tensor::zeros(&[1, hidden]));
        for d in 0..depth {
            let mut index: HashMap<(usize, TokenId), usize> = HashMap::new();
            let (mut parents, mut tokens) = (Vec::new(), Vec::new());
            for (i, s) in sentences.iter().enumerate() {
                if d < s.len() {
                    let key = (node[i], s[d]);
                    node[i] = *index.entry(key).or_insert_with(|| {
                        parents.push(key.0);
                        tokens.push(key.1);
                        tokens.len() - 1
                    });
                }
            }
            let x = self.embed.infer(&self.params, &tokens)?;
            (h, c) = self.lstm.infer(
                &self.params,
                &x,
                &gather_rows(&h, &parents)?,
                &gather_rows(&c, &parents)?,
            )?;
            for (i, s) in sentences.iter().enumerate() {
                if d + 1 == s.len() {
                    last_h[i] = h.row_slice(node[i]).to_vec();
                }
            }
        }
        let x = Tensor::new(vec![sentences.len(), hidden], last_h.concat())?;
        Ok(self.head.infer(&self.params, &x)?.into_data())
    }
}
