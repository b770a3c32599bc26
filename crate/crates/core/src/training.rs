//! Adversarial training: critic objectives, reconstruction loss, rollout
//! rewards, policy-gradient generator updates and the alternating loop.

use paragan_autograd::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critics::{CriticDims, Critics, ParagraphScorer, SentenceCritic, TopicCritic};
use crate::data::{CorpusRecord, Paragraph, RegionSet, TokenId};
use crate::decode::{sample_continuation, sample_sentence, sample_token, Limits};
use crate::error::{Error, Result};
use crate::generator::{sum_vars, Generator, ParaCursor, SentenceCursor, Session, STOP};
use crate::optim::RmsProp;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full paragraphs supervise words and the stop head.
    Fully,
    /// One caption per image; paragraphs come only from a standalone corpus.
    Semi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub n_critic: usize,
    pub n_rollouts: usize,
    pub lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub s_max: usize,
    pub n_max: usize,
    pub mode: Mode,
    pub epochs: usize,
    pub seed: u64,
    pub preset: crate::generator::Preset,
    /// Overrides the preset's critic width.
    pub critic_hidden: Option<usize>,
    /// Subtract a moving-average reward baseline.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            n_critic: 5,
            n_rollouts: 5,
            lr: 1e-4,
            clip: 0.01,
            batch: 1,
            s_max: 6,
            n_max: 30,
            mode: Mode::Fully,
            epochs: 1,
            seed: 0,
            preset: crate::generator::Preset::Desk,
            critic_hidden: None,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field} {why}")));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be a non-negative number");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        for (name, v) in [
            ("n_critic", self.n_critic),
            ("n_rollouts", self.n_rollouts),
            ("batch", self.batch),
            ("s_max", self.s_max),
            ("n_max", self.n_max),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1");
            }
        }
        if self.critic_hidden == Some(0) {
            return bad("critic_hidden", "must be at least 1");
        }
        Ok(())
    }

    pub fn limits(&self) -> Limits {
        Limits {
            s_max: self.s_max,
            n_max: self.n_max,
        }
    }

    pub fn critic_hidden(&self) -> usize {
        self.critic_hidden.unwrap_or(self.preset.critic_hidden())
    }

    /// Critic sizes for this config: the preset's embedding width and [`TrainConfig::critic_hidden`].
    pub fn critic_dims(&self, vocab_size: usize) -> CriticDims {
        CriticDims {
            vocab_size,
            embed: self.preset.dims(vocab_size).embed,
            hidden: self.critic_hidden(),
        }
    }
}

/// What an example supervises. A caption is a single sentence by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    Paragraph(Paragraph),
    Caption(Vec<TokenId>),
    None,
}

impl Supervision {
    pub fn target(&self) -> Option<Paragraph> {
        match self {
            Supervision::Paragraph(p) => Some(p.clone()),
            Supervision::Caption(c) => Paragraph::new(vec![c.clone()]).ok(),
            Supervision::None => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub regions: RegionSet,
    pub supervision: Supervision,
}

/// Training examples plus the real paragraphs the critics learn from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub real_paragraphs: Vec<Vec<Vec<TokenId>>>,
}

impl Dataset {
    /// In `Fully` mode each record's paragraph is the target and, unless a
    /// standalone corpus is given, also the critics' real data. In `Semi`
    /// mode only the caption (or the paragraph's first sentence) is read and
    /// the standalone corpus is required.
    pub fn from_records(
        records: &[CorpusRecord],
        vocab: &Vocabulary,
        mode: Mode,
        paragraph_corpus: Option<&[Vec<String>]>,
        limits: &Limits,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let encode = |sentences: &[String]| -> Result<Paragraph> {
            let p = Paragraph::encode(sentences, vocab)?;
            p.check_limits(limits.s_max, limits.n_max)?;
            Ok(p)
        };
        let mut examples = Vec::with_capacity(records.len());
        for r in records {
            let supervision = match mode {
                Mode::Fully => match &r.paragraph {
                    Some(p) => Supervision::Paragraph(encode(p)?),
                    None => Supervision::None,
                },
                Mode::Semi => {
                    let text = r.caption.as_ref().or(r.paragraph.as_ref().and_then(|p| p.first()));
                    match text {
                        Some(c) => {
                            let p = encode(std::slice::from_ref(c))?;
                            Supervision::Caption(p.into_sentences().remove(0))
                        }
                        None => Supervision::None,
                    }
                }
            };
            examples.push(Example {
                id: r.id.clone(),
                regions: r.regions(vocab)?,
                supervision,
            });
        }
        let real_paragraphs = match (paragraph_corpus, mode) {
            (Some(c), _) => c
                .iter()
                .map(|p| encode(p).map(Paragraph::into_sentences))
                .collect::<Result<Vec<_>>>()?,
            (None, Mode::Fully) => examples
                .iter()
                .filter_map(|e| match &e.supervision {
                    Supervision::Paragraph(p) => Some(p.sentences().to_vec()),
                    _ => None,
                })
                .collect(),
            (None, Mode::Semi) => Vec::new(),
        };
        if real_paragraphs.is_empty() {
            return Err(Error::Empty("paragraph corpus"));
        }
        Ok(Dataset {
            examples,
            real_paragraphs,
        })
    }
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("score list"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// `(loss_Ds, loss_Dr)`: each the negated real-minus-fake mean score gap.
pub fn critic_losses(real_s: &[f64], fake_s: &[f64], real_p: &[f64], fake_p: &[f64]) -> Result<(f64, f64)> {
    Ok((-(mean(real_s)? - mean(fake_s)?), -(mean(real_p)? - mean(fake_p)?)))
}

fn mean_var<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(sum_vars(xs.iter().copied())?.scale(1.0 / xs.len() as f64)?)
}

/// `mean(fake) - mean(real)` on the tape.
pub fn wasserstein_loss<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(mean_var(fake)?.sub(&mean_var(real)?)?)
}

/// Teacher-forced negative log-likelihood of `target`.
pub fn reconstruction_loss(gen: &Generator, regions: &RegionSet, target: &Paragraph) -> Result<f64> {
    Ok(-gen.log_prob(regions, target)?)
}

/// One critic update pushing real sentences up and fake ones down, then
/// clipping. Returns the loss before the update.
pub fn sentence_critic_step(
    critic: &mut SentenceCritic,
    opt: &mut RmsProp,
    real: &[Vec<TokenId>],
    fake: &[Vec<TokenId>],
    clip: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let p = critic.params().bind(&tape, true);
    let score = |s: &Vec<TokenId>| critic.score_var(&p, s);
    let r = real.iter().map(score).collect::<Result<Vec<_>>>()?;
    let f = fake.iter().map(score).collect::<Result<Vec<_>>>()?;
    if r.is_empty() || f.is_empty() {
        return Err(Error::Empty("critic batch"));
    }
    let loss = wasserstein_loss(&r, &f)?;
    let grads = p.gradients(&tape.backward(loss.sum()?)?);
    let value = loss.item();
    drop(p);
    opt.step(critic.params_mut(), &grads)?;
    critic.params_mut().clip(clip);
    Ok(value)
}

/// Topic critic counterpart of [`sentence_critic_step`]; every prefix score
/// of every paragraph is one sample.
pub fn topic_critic_step(
    critic: &mut TopicCritic,
    opt: &mut RmsProp,
    real: &[Vec<Vec<TokenId>>],
    fake: &[Vec<Vec<TokenId>>],
    clip: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let p = critic.params().bind(&tape, true);
    let mut r = Vec::new();
    for para in real {
        r.extend(critic.paragraph_scores_var(&p, para)?);
    }
    let mut f = Vec::new();
    for para in fake {
        f.extend(critic.paragraph_scores_var(&p, para)?);
    }
    if r.is_empty() || f.is_empty() {
        return Err(Error::Empty("critic batch"));
    }
    let loss = wasserstein_loss(&r, &f)?;
    let grads = p.gradients(&tape.backward(loss.sum()?)?);
    let value = loss.item();
    drop(p);
    opt.step(critic.params_mut(), &grads)?;
    critic.params_mut().clip(clip);
    Ok(value)
}

/// A sampled paragraph with the log-probability of every sampled action and
/// the states needed to roll out from each of them.
pub struct Trajectory<'t> {
    pub sentences: Vec<Vec<TokenId>>,
    pub word_logps: Vec<Vec<Var<'t>>>,
    /// `None` where the paragraph was cut at `s_max` without a decision.
    pub stop_logps: Vec<Option<Var<'t>>>,
    pub stop_choices: Vec<Option<usize>>,
    after_word: Vec<Vec<SentenceCursor<'t>>>,
    after_sentence: Vec<(ParaCursor<'t>, Var<'t>)>,
}

pub fn sample_trajectory<'t>(s: &Session<'_, 't>, limits: &Limits, rng: &mut impl Rng) -> Result<Trajectory<'t>> {
    let mut traj = Trajectory {
        sentences: Vec::new(),
        word_logps: Vec::new(),
        stop_logps: Vec::new(),
        stop_choices: Vec::new(),
        after_word: Vec::new(),
        after_sentence: Vec::new(),
    };
    let mut cursor = s.begin();
    let mut input = s.start_input()?;
    loop {
        let mut sc = s.open_sentence(cursor, input)?;
        let mut logps = Vec::new();
        let mut after = Vec::new();
        while sc.words.last() != Some(&crate::vocab::END) && sc.words.len() < limits.n_max {
            let step = s.word_step(&sc)?;
            let tok = sample_token(step.logp.value().data(), rng);
            logps.push(step.logp.pick(tok)?);
            s.advance(&mut sc, &step, tok)?;
            after.push(sc.clone());
        }
        let forced = traj.sentences.len() + 1 >= limits.s_max;
        let choice = if forced {
            None
        } else {
            Some(sample_token(sc.stop_logp.value().data(), rng))
        };
        traj.stop_logps.push(choice.map(|c| sc.stop_logp.pick(c)).transpose()?);
        traj.stop_choices.push(choice);
        input = s.sentence_embedding(&sc.words)?;
        cursor = sc.para;
        traj.after_sentence.push((cursor, input));
        traj.sentences.push(sc.words);
        traj.word_logps.push(logps);
        traj.after_word.push(after);
        if forced || choice == Some(STOP) {
            return Ok(traj);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewards {
    pub words: Vec<Vec<f64>>,
    pub stops: Vec<Option<f64>>,
}

impl Rewards {
    pub fn all(&self) -> Vec<f64> {
        self.words
            .iter()
            .flatten()
            .copied()
            .chain(self.stops.iter().flatten().copied())
            .collect()
    }

    /// `(mean, population variance)` over all actions.
    pub fn stats(&self) -> (f64, f64) {
        let all = self.all();
        if all.is_empty() {
            return (0.0, 0.0);
        }
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
        (m, v)
    }
}

/// Monte-Carlo rewards for every action of `traj`.
///
/// A word action is worth the sentence score of its completed sentence plus
/// the topic score at the last step of the paragraph prefix ending in it,
/// averaged over `n_rollouts` completions sampled from the generator. Both
/// terms read only the current sentence and its predecessors, so only the
/// current sentence is rolled out. Final words of a sentence are scored
/// directly. With `with_stop`, stop decisions are rewarded with the sentence
/// score plus the topic score of the completed paragraph.
pub fn rollout_rewards<'t>(
    s: &Session<'_, 't>,
    scorer: &impl ParagraphScorer,
    traj: &Trajectory<'t>,
    n_rollouts: usize,
    limits: &Limits,
    with_stop: bool,
    rng: &mut impl Rng,
) -> Result<Rewards> {
    if n_rollouts == 0 {
        return Err(Error::invalid("n_rollouts must be at least 1"));
    }
    let mut words = Vec::with_capacity(traj.sentences.len());
    let mut stops = Vec::with_capacity(traj.sentences.len());
    for (t, sentence) in traj.sentences.iter().enumerate() {
        let context = &traj.sentences[..t];
        let mut completions = Vec::with_capacity((sentence.len() - 1) * n_rollouts + 1);
        for cursor in &traj.after_word[t][..sentence.len() - 1] {
            for _ in 0..n_rollouts {
                completions.push(sample_sentence(s, cursor.clone(), limits.n_max, rng)?.words);
            }
        }
        completions.push(sentence.clone());
        let scores = scorer.completion_scores(context, &completions)?;
        let (rolled, direct) = scores.split_at(scores.len() - 1);
        let direct = direct[0];
        let mut row: Vec<f64> = rolled
            .chunks(n_rollouts)
            .map(|c| c.iter().sum::<f64>() / n_rollouts as f64)
            .collect();
        row.push(direct);
        words.push(row);
        let mut prefix = context.to_vec();
        prefix.push(sentence.clone());

        stops.push(match (with_stop, traj.stop_choices[t]) {
            (true, Some(STOP)) => Some(direct),
            (true, Some(_)) => {
                let ds = scorer.sentence_score(sentence)?;
                let (cursor, input) = traj.after_sentence[t];
                let mut total = 0.0;
                for _ in 0..n_rollouts {
                    let rest = sample_continuation(s, cursor, input, t + 1, limits, rng)?;
                    let mut full = prefix.clone();
                    full.extend(rest);
                    total += scorer.prefix_score(&full)?;
                }
                Some(ds + total / n_rollouts as f64)
            }
            _ => None,
        });
    }
    Ok(Rewards { words, stops })
}

/// `-sum (r - b) log pi(a)` over the actions that have rewards.
pub fn policy_gradient_loss<'t>(traj: &Trajectory<'t>, rewards: &Rewards, baseline: f64) -> Result<Option<Var<'t>>> {
    let mut terms = Vec::new();
    for (lps, rs) in traj.word_logps.iter().zip(&rewards.words) {
        for (lp, r) in lps.iter().zip(rs) {
            terms.push(lp.scale(r - baseline)?);
        }
    }
    for (lp, r) in traj.stop_logps.iter().zip(&rewards.stops) {
        if let (Some(lp), Some(r)) = (lp, r) {
            terms.push(lp.scale(r - baseline)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(sum_vars(terms.into_iter())?.neg()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Critic,
    Generator,
}

/// One line of the metrics log. Deterministic given seed and config; the
/// wall-clock timestamp is added by whoever writes the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_dr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_per_word: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_var: Option<f64>,
}

impl MetricsRecord {
    fn new(iteration: usize, epoch: usize, phase: Phase) -> Self {
        MetricsRecord {
            iteration,
            epoch,
            phase,
            loss_ds: None,
            loss_dr: None,
            gap_s: None,
            gap_r: None,
            recon: None,
            recon_per_word: None,
            stop_nll: None,
            reward_mean: None,
            reward_var: None,
        }
    }
}

/// Mixes `(seed, epoch, stream)` into one seed.
fn derive_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(epoch as u128 * 2);
    rng.gen()
}

/// Order in which an epoch visits the examples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, 0)));
    idx
}

fn tag_non_finite(e: Error, iteration: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFinite {
            what: format!("value in {op}"),
            iteration,
        },
        other => other,
    }
}

/// Alternates critic and generator phases.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critics: Critics,
    pub gen_opt: RmsProp,
    pub ds_opt: RmsProp,
    pub dr_opt: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
    pub critic_updates: usize,
    pub generator_updates: usize,
    baseline: f64,
    critic_rng: ChaCha8Rng,
    rollout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, generator: Generator, critics: Critics) -> Result<Self> {
        config.validate()?;
        let gen_opt = RmsProp::new(generator.params(), config.lr);
        let ds_opt = RmsProp::new(critics.sentence.params(), config.lr);
        let dr_opt = RmsProp::new(critics.topic.params(), config.lr);
        let mut t = Trainer {
            critic_rng: ChaCha8Rng::seed_from_u64(0),
            rollout_rng: ChaCha8Rng::seed_from_u64(0),
            config,
            generator,
            critics,
            gen_opt,
            ds_opt,
            dr_opt,
            epoch: 0,
            iteration: 0,
            critic_updates: 0,
            generator_updates: 0,
            baseline: 0.0,
        };
        t.reseed();
        Ok(t)
    }

    /// Current moving-average reward baseline.
    pub fn reward_baseline(&self) -> f64 {
        self.baseline
    }

    /// Restores the baseline when resuming from a checkpoint.
    pub fn set_reward_baseline(&mut self, b: f64) {
        self.baseline = b;
    }

    fn reseed(&mut self) {
        self.critic_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.epoch, 1));
        self.rollout_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.epoch, 2));
    }

    /// Samples one fake paragraph for a random example and scores it against
    /// a random real paragraph; updates and clips both critics.
    pub fn critic_step(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        let it = self.iteration;
        self.critic_step_inner(data).map_err(|e| tag_non_finite(e, it))
    }

    fn critic_step_inner(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        if data.examples.is_empty() || data.real_paragraphs.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let limits = self.config.limits();
        let ex = &data.examples[self.critic_rng.gen_range(0..data.examples.len())];
        let real = data.real_paragraphs[self.critic_rng.gen_range(0..data.real_paragraphs.len())].clone();
        let fake = {
            let tape = Tape::new();
            let s = self.generator.session(&tape, &ex.regions, false)?;
            let start = s.start_input()?;
            sample_continuation(&s, s.begin(), start, 0, &limits, &mut self.critic_rng)?
        };
        let clip = self.config.clip;
        let loss_ds = sentence_critic_step(&mut self.critics.sentence, &mut self.ds_opt, &real, &fake, clip)?;
        let loss_dr = topic_critic_step(
            &mut self.critics.topic,
            &mut self.dr_opt,
            std::slice::from_ref(&real),
            std::slice::from_ref(&fake),
            clip,
        )?;
        self.critic_updates += 1;
        let mut rec = MetricsRecord::new(self.iteration, self.epoch, Phase::Critic);
        rec.loss_ds = Some(loss_ds);
        rec.loss_dr = Some(loss_dr);
        rec.gap_s = Some(-loss_ds);
        rec.gap_r = Some(-loss_dr);
        Ok(rec)
    }

    /// Averages the joint-objective gradient over `batch` and takes one
    /// optimizer step on the generator.
    pub fn generator_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<MetricsRecord> {
        let it = self.iteration;
        self.generator_step_inner(data, batch)
            .map_err(|e| tag_non_finite(e, it))
    }

    fn generator_step_inner(&mut self, data: &Dataset, batch: &[usize]) -> Result<MetricsRecord> {
        let cfg = self.config.clone();
        let limits = cfg.limits();
        let mut sum: Option<Vec<Tensor>> = None;
        let mut recon = 0.0;
        let mut words = 0usize;
        let mut stop_nll = 0.0;
        let mut supervised = false;
        let mut all_rewards = Vec::new();

        for &i in batch {
            let ex = data
                .examples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("example index {i} out of range")))?;
            let tape = Tape::new();
            let s = self.generator.session(&tape, &ex.regions, true)?;
            let mut terms = Vec::new();

            if let Some(target) = ex.supervision.target() {
                let forced = s.teacher_force(&target, None)?;
                let lc = forced.log_prob()?.neg()?;
                recon += lc.item();
                words += target.num_tokens();
                supervised = true;
                terms.push(lc);
                if cfg.mode == Mode::Fully {
                    if let Supervision::Paragraph(_) = ex.supervision {
                        let nll = forced.stop_nll()?;
                        stop_nll += nll.item();
                        terms.push(nll);
                    }
                }
            }

            if cfg.lambda > 0.0 {
                let traj = sample_trajectory(&s, &limits, &mut self.rollout_rng)?;
                let rewards = rollout_rewards(
                    &s,
                    &self.critics,
                    &traj,
                    cfg.n_rollouts,
                    &limits,
                    cfg.mode == Mode::Semi,
                    &mut self.rollout_rng,
                )?;
                let b = if cfg.baseline { self.baseline } else { 0.0 };
                if let Some(pg) = policy_gradient_loss(&traj, &rewards, b)? {
                    terms.push(pg.scale(cfg.lambda)?);
                }
                all_rewards.extend(rewards.all());
            }

            if terms.is_empty() {
                continue;
            }
            let loss = sum_vars(terms.into_iter())?;
            let grads = s.bound().gradients(&tape.backward(loss)?);
            sum = Some(match sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }

        if let Some(mut grads) = sum {
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
            }
            self.gen_opt.step(self.generator.params_mut(), &grads)?;
        }
        self.generator_updates += 1;

        let mut rec = MetricsRecord::new(self.iteration, self.epoch, Phase::Generator);
        if supervised {
            rec.recon = Some(recon);
            rec.recon_per_word = Some(recon / words.max(1) as f64);
            if cfg.mode == Mode::Fully {
                rec.stop_nll = Some(stop_nll);
            }
        }
        if !all_rewards.is_empty() {
            let n = all_rewards.len() as f64;
            let m = all_rewards.iter().sum::<f64>() / n;
            rec.reward_mean = Some(m);
            rec.reward_var = Some(all_rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n);
            if cfg.baseline {
                self.baseline = 0.9 * self.baseline + 0.1 * m;
            }
        }
        Ok(rec)
    }

    /// `n_critic` critic phases followed by one generator phase.
    pub fn iteration_step(
        &mut self,
        data: &Dataset,
        batch: &[usize],
        observer: &mut dyn FnMut(&MetricsRecord, &Trainer),
    ) -> Result<()> {
        for _ in 0..self.config.n_critic {
            let rec = self.critic_step(data)?;
            observer(&rec, self);
        }
        let rec = self.generator_step(data, batch)?;
        observer(&rec, self);
        self.iteration += 1;
        Ok(())
    }

    /// One pass over the examples in generator batches.
    pub fn run_epoch(&mut self, data: &Dataset, observer: &mut dyn FnMut(&MetricsRecord, &Trainer)) -> Result<()> {
        if data.examples.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        self.reseed();
        let order = epoch_order(self.config.seed, self.epoch, data.examples.len());
        for batch in order.chunks(self.config.batch) {
            self.iteration_step(data, batch, observer)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn train(
        &mut self,
        data: &Dataset,
        epochs: usize,
        observer: &mut dyn FnMut(&MetricsRecord, &Trainer),
    ) -> Result<()> {
        for _ in 0..epochs {
            self.run_epoch(data, observer)?;
        }
        Ok(())
    }
}
