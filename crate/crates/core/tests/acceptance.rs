//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so a failing criterion is reported rather than
//! aborting the suite. Pass criterion numbers as arguments to run a subset;
//! set `ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::time::{Duration, Instant};

use paragan_autograd::{check_gradient_probes, max_error, Probe, Tape, Tensor, Var};
use paragan_core::critics::{Critics, ParagraphScorer, SentenceCritic};
use paragan_core::data::{Paragraph, RegionSet, TokenId};
use paragan_core::decode::{generate, DecodeMode, Limits};
use paragan_core::generator::{Dims, Generator, Preset};
use paragan_core::metrics::{self, EvalPair};
use paragan_core::nn::{Bound, ParamSet};
use paragan_core::optim::RmsProp;
use paragan_core::synth::{synth_corpus, synth_paragraphs};
use paragan_core::training::{
    policy_gradient_loss, rollout_rewards, sample_trajectory, sentence_critic_step, wasserstein_loss, Dataset, Mode,
    Phase, TrainConfig, Trainer,
};
use paragan_core::vocab::{Vocabulary, END};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

const PROBES: usize = 32;
const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "gradient suite", gradient_suite),
        (2, "attention normalization", attention_normalization),
        (3, "training protocol invariants", protocol_invariants),
        (4, "log-prob consistency", log_prob_consistency),
        (5, "critic separation", critic_separation),
        (6, "policy-gradient bandit", policy_gradient_bandit),
        (7, "end-to-end overfit", end_to_end_overfit),
        (8, "semi mode contract", semi_mode_contract),
        (9, "metric oracles", metric_oracles),
        (10, "decoding", decoding),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{n}] {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t0: Instant, budget: Duration) -> bool {
    t0.elapsed() < budget
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_probes(inputs: &[Tensor], rng: &mut impl Rng) -> Vec<Probe> {
    (0..PROBES)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].len()))
        })
        .collect()
}

fn random_regions(rng: &mut impl Rng, m: usize, feat_dim: usize, vocab_size: usize) -> RegionSet {
    let feats = (0..m)
        .map(|_| (0..feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let phrases = (0..m)
        .map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..vocab_size)).collect())
        .collect();
    RegionSet::new(feats, phrases).unwrap()
}

fn random_sentence(rng: &mut impl Rng, vocab_size: usize, n_max: usize) -> Vec<TokenId> {
    let n = rng.gen_range(1..=n_max);
    let mut s: Vec<TokenId> = (0..n - 1).map(|_| rng.gen_range(4..vocab_size)).collect();
    s.push(END);
    s
}

fn random_paragraph(rng: &mut impl Rng, vocab_size: usize, limits: &Limits) -> Paragraph {
    let t = rng.gen_range(1..=limits.s_max);
    Paragraph::new((0..t).map(|_| random_sentence(rng, vocab_size, limits.n_max)).collect()).unwrap()
}

fn small_dims(rng: &mut impl Rng, vocab_size: usize) -> Dims {
    Dims {
        feat_dim: rng.gen_range(1..9),
        embed: rng.gen_range(1..9),
        paragraph_hidden: rng.gen_range(1..9),
        sentence_hidden: rng.gen_range(1..9),
        word_hidden: rng.gen_range(1..9),
        vocab_size,
    }
}

/// Synthetic scenes with a vocabulary covering them and any extra paragraphs.
fn scenes(seed: u64, count: usize, extra: &[Vec<String>]) -> (Vec<paragan_core::data::CorpusRecord>, Vocabulary) {
    let preset = Preset::Desk;
    let recs = synth_corpus(seed, count, preset.dims(0).feat_dim, preset.regions()).unwrap();
    let vocab = Vocabulary::build(
        recs.iter()
            .flat_map(|r| r.texts())
            .chain(extra.iter().flatten().map(String::as_str)),
    )
    .unwrap();
    (recs, vocab)
}

// 1

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    for<'t> fn(&[Var<'t>]) -> paragan_autograd::Result<Var<'t>>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], |v| v[0].matmul(&v[1])),
        ("matmul_t", vec![vec![2, 3], vec![4, 3]], |v| v[0].matmul_t(&v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |v| v[0].add(&v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |v| v[0].sub(&v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |v| v[0].mul(&v[1])),
        ("add_row", vec![vec![3, 2], vec![2]], |v| v[0].add_row(&v[1])),
        ("scale", vec![vec![2, 3]], |v| v[0].scale(-1.7)),
        ("add_scalar", vec![vec![2, 3]], |v| v[0].add_scalar(0.4)),
        ("neg", vec![vec![2, 3]], |v| v[0].neg()),
        ("concat", vec![vec![2, 3], vec![2, 1]], |v| Var::concat(v)),
        ("row_mean", vec![vec![3, 4]], |v| v[0].row_mean()),
        ("sigmoid", vec![vec![2, 3]], |v| v[0].sigmoid()),
        ("tanh", vec![vec![2, 3]], |v| v[0].tanh()),
        ("exp", vec![vec![2, 3]], |v| v[0].exp()),
        ("log", vec![vec![2, 3]], |v| v[0].mul(&v[0])?.add_scalar(0.5)?.log()),
        ("softmax", vec![vec![2, 4]], |v| v[0].softmax()),
        ("log_softmax", vec![vec![2, 4]], |v| v[0].log_softmax()),
        ("embedding", vec![vec![5, 3]], |v| v[0].embedding(&[4, 0, 4, 2])),
        ("slice_cols", vec![vec![2, 5]], |v| v[0].slice_cols(1, 3)),
        ("pick", vec![vec![1, 5]], |v| v[0].pick(3)),
        ("tile_rows", vec![vec![1, 3]], |v| v[0].tile_rows(4)),
        ("reshape", vec![vec![2, 3]], |v| v[0].reshape(vec![3, 2])),
        ("sum", vec![vec![2, 3]], |v| v[0].sum()),
    ]
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(String, f64)> = Vec::new();

    for (name, shapes, op) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            op(&vars).unwrap().shape()
        };
        let weights = random_tensor(&out_shape, &mut rng);
        let res = check_gradient_probes(
            |tape, v| op(v)?.mul(&tape.constant(weights.clone()))?.sum(),
            &inputs,
            &random_probes(&inputs, &mut rng),
            FD_EPS,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        worst.push((name.to_string(), max_error(&res)));
    }

    let (recs, vocab) = scenes(2, 2, &[]);
    let v = vocab.len();
    let dims = Preset::Desk.dims(v);
    let gen = Generator::new(dims, 3).unwrap();
    let regions = recs[0].regions(&vocab).unwrap();
    let target = Paragraph::encode(recs[0].paragraph.as_ref().unwrap(), &vocab).unwrap();
    let inputs = gen.params().to_tensors();
    let res = check_gradient_probes(
        |tape, vars| {
            let s = gen.session_with(Bound::from_vars(tape, vars), &regions)?;
            s.teacher_force(&target, None)?.log_prob()?.neg()
        },
        &inputs,
        &random_probes(&inputs, &mut rng),
        FD_EPS,
    )
    .map_err(|e| format!("reconstruction: {e}"))?;
    worst.push(("reconstruction".into(), max_error(&res)));

    let cfg = TrainConfig::default();
    let critics = Critics::new(cfg.critic_dims(v), 4).unwrap();
    let real: Vec<Vec<TokenId>> = target.sentences().to_vec();
    let fake: Vec<Vec<TokenId>> = (0..3).map(|_| random_sentence(&mut rng, v, 8)).collect();
    let inputs = critics.sentence.params().to_tensors();
    let res = check_gradient_probes(
        |tape, vars| {
            let p = Bound::from_vars(tape, vars);
            let score = |s: &Vec<TokenId>| critics.sentence.score_var(&p, s);
            let r = real.iter().map(score).collect::<paragan_core::Result<Vec<_>>>()?;
            let f = fake.iter().map(score).collect::<paragan_core::Result<Vec<_>>>()?;
            wasserstein_loss(&r, &f)?.sum()
        },
        &inputs,
        &random_probes(&inputs, &mut rng),
        FD_EPS,
    )
    .map_err(|e| format!("sentence critic loss: {e}"))?;
    worst.push(("sentence critic loss".into(), max_error(&res)));

    let fake_para = vec![fake[0].clone(), fake[1].clone()];
    let inputs = critics.topic.params().to_tensors();
    let res = check_gradient_probes(
        |tape, vars| {
            let p = Bound::from_vars(tape, vars);
            let r = critics.topic.paragraph_scores_var(&p, &real)?;
            let f = critics.topic.paragraph_scores_var(&p, &fake_para)?;
            wasserstein_loss(&r, &f)?.sum()
        },
        &inputs,
        &random_probes(&inputs, &mut rng),
        FD_EPS,
    )
    .map_err(|e| format!("topic critic loss: {e}"))?;
    worst.push(("topic critic loss".into(), max_error(&res)));

    // Sample and score once, then differentiate the policy-gradient surrogate
    // of that fixed trajectory through both attentions.
    let limits = Limits { s_max: 3, n_max: 6 };
    let (sampled, rewards, stops) = {
        let tape = Tape::new();
        let s = gen.session(&tape, &regions, false).unwrap();
        let traj = sample_trajectory(&s, &limits, &mut rng).unwrap();
        let rw = rollout_rewards(&s, &critics, &traj, 2, &limits, true, &mut rng).unwrap();
        (traj.sentences.clone(), rw, traj.stop_choices.clone())
    };
    let paragraph = Paragraph::new(sampled).unwrap();
    let inputs = gen.params().to_tensors();
    let res = check_gradient_probes(
        |tape, vars| {
            let s = gen.session_with(Bound::from_vars(tape, vars), &regions)?;
            let forced = s.teacher_force(&paragraph, None)?;
            let mut total = tape.constant(Tensor::scalar(0.0));
            for (lps, rs) in forced.word_logps.iter().zip(&rewards.words) {
                for (lp, r) in lps.iter().zip(rs) {
                    total = total.add(&lp.sum()?.scale(-r)?)?;
                }
            }
            for ((lp, choice), r) in forced.stop_logps.iter().zip(&stops).zip(&rewards.stops) {
                if let (Some(c), Some(r)) = (choice, r) {
                    total = total.add(&lp.pick(*c)?.sum()?.scale(-r)?)?;
                }
            }
            total.sum()
        },
        &inputs,
        &random_probes(&inputs, &mut rng),
        FD_EPS,
    )
    .map_err(|e| format!("generate-then-score: {e}"))?;
    worst.push(("generate-then-score".into(), max_error(&res)));

    let (name, err) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = t0.elapsed().as_secs_f64();
    check(
        err < FD_TOL && within(t0, Duration::from_secs(60)),
        format!(
            "{} checks, worst rel err {err:.2e} ({name}), limit {FD_TOL:.0e}; {secs:.1}s of 60s",
            worst.len()
        ),
    )
}

// 2

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for k in 0..1000u64 {
        let v = rng.gen_range(5..20);
        let dims = small_dims(&mut rng, v);
        let mut gen = Generator::new(dims, k).unwrap();
        let scale = rng.gen_range(0.5..3.0);
        for id in gen.params().ids().collect::<Vec<_>>() {
            gen.params_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x *= scale);
        }
        let m = rng.gen_range(1..7);
        let regions = random_regions(&mut rng, m, dims.feat_dim, v);
        let tape = Tape::new();
        let s = gen.session(&tape, &regions, false).unwrap();
        let mut cursor = s.begin();
        let mut input = s.start_input().unwrap();
        for _ in 0..rng.gen_range(1..3) {
            let mut sc = s.open_sentence(cursor, input).unwrap();
            let a = sc.a.value();
            worst = worst.max((a.data().iter().sum::<f64>() - 1.0).abs());
            min_weight = min_weight.min(a.data().iter().copied().fold(f64::INFINITY, f64::min));
            for _ in 0..rng.gen_range(1..4) {
                let step = s.word_step(&sc).unwrap();
                let b = step.b.value();
                worst = worst.max((b.data().iter().sum::<f64>() - 1.0).abs());
                min_weight = min_weight.min(b.data().iter().copied().fold(f64::INFINITY, f64::min));
                let tok = rng.gen_range(4..v);
                s.advance(&mut sc, &step, tok).unwrap();
            }
            input = s.sentence_embedding(&sc.words).unwrap();
            cursor = sc.para;
        }
    }
    check(
        worst < 1e-9 && min_weight > 0.0,
        format!("1000 configurations, max |sum - 1| {worst:.1e}, min weight {min_weight:.2e}"),
    )
}

// 3

fn bits(p: &ParamSet) -> Vec<u64> {
    p.iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn protocol_invariants() -> Outcome {
    let (recs, vocab) = scenes(3, 8, &[]);
    let cfg = TrainConfig::default();
    let data = Dataset::from_records(&recs, &vocab, Mode::Fully, None, &cfg.limits()).unwrap();
    let gen = Generator::new(cfg.preset.dims(vocab.len()), 5).unwrap();
    let critics = Critics::new(cfg.critic_dims(vocab.len()), 6).unwrap();
    let clip = cfg.clip;
    let n_critic = cfg.n_critic;
    let mut t = Trainer::new(cfg, gen, critics).unwrap();

    let mut gen_bits = bits(t.generator.params());
    let mut critic_bits = (bits(t.critics.sentence.params()), bits(t.critics.topic.params()));
    let mut since_generator = 0;
    let mut violations = Vec::new();
    let mut observer = |rec: &paragan_core::training::MetricsRecord, tr: &Trainer| match rec.phase {
        Phase::Critic => {
            since_generator += 1;
            let m = tr
                .critics
                .sentence
                .params()
                .max_abs()
                .max(tr.critics.topic.params().max_abs());
            if m > clip {
                violations.push(format!("critic |w| {m} after update {}", tr.critic_updates));
            }
            if bits(tr.generator.params()) != gen_bits {
                violations.push(format!("generator changed in critic phase {}", tr.critic_updates));
            }
            critic_bits = (bits(tr.critics.sentence.params()), bits(tr.critics.topic.params()));
        }
        Phase::Generator => {
            if since_generator != n_critic {
                violations.push(format!("{since_generator} critic phases before generator phase"));
            }
            since_generator = 0;
            if (bits(tr.critics.sentence.params()), bits(tr.critics.topic.params())) != critic_bits {
                violations.push("critics changed in generator phase".into());
            }
            gen_bits = bits(tr.generator.params());
        }
    };
    while t.iteration < 100 {
        let batch = [t.iteration % data.examples.len()];
        t.iteration_step(&data, &batch, &mut observer)
            .map_err(|e| e.to_string())?;
    }
    let counts_ok = t.critic_updates == 500 && t.generator_updates == 100;
    check(
        violations.is_empty() && counts_ok,
        format!(
            "{} critic / {} generator updates over 100 iterations; {} violations{}",
            t.critic_updates,
            t.generator_updates,
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

// 4

fn log_prob_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let limits = Limits::default();
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let v = rng.gen_range(6..40);
        let dims = small_dims(&mut rng, v);
        let gen = Generator::new(dims, 100 + k).unwrap();
        let m = rng.gen_range(1..6);
        let regions = random_regions(&mut rng, m, dims.feat_dim, v);
        let para = random_paragraph(&mut rng, v, &limits);
        let total = gen.log_prob(&regions, &para).map_err(|e| e.to_string())?;

        let tape = Tape::new();
        let s = gen.session(&tape, &regions, false).unwrap();
        let mut cursor = s.begin();
        let mut input = s.start_input().unwrap();
        let mut stepwise = 0.0;
        for sentence in para.sentences() {
            let mut sc = s.open_sentence(cursor, input).unwrap();
            for &w in sentence {
                let step = s.word_step(&sc).unwrap();
                stepwise += step.logp.value().data()[w];
                s.advance(&mut sc, &step, w).unwrap();
            }
            input = s.sentence_embedding(sentence).unwrap();
            cursor = sc.para;
        }
        worst = worst.max((total - stepwise).abs());
    }
    check(
        worst < 1e-10,
        format!("100 paragraphs, max |diff| {worst:.1e}, limit 1e-10"),
    )
}

// 5

fn critic_separation() -> Outcome {
    let t0 = Instant::now();
    let (recs, vocab) = scenes(5, 16, &[]);
    let real: Vec<Vec<TokenId>> = recs
        .iter()
        .flat_map(|r| r.paragraph.clone().unwrap())
        .take(32)
        .map(|s| vocab.encode_sentence(&s))
        .collect();
    let cfg = TrainConfig::default();
    let mut critic = SentenceCritic::new(cfg.critic_dims(vocab.len()), 7).unwrap();
    critic.params_mut().clip(cfg.clip);
    let mut opt = RmsProp::new(critic.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fakes = |rng: &mut ChaCha8Rng| -> Vec<Vec<TokenId>> {
        real.iter()
            .map(|s| {
                let mut f: Vec<TokenId> = (0..s.len() - 1).map(|_| rng.gen_range(4..vocab.len())).collect();
                f.push(END);
                f
            })
            .collect()
    };
    let gap = |c: &SentenceCritic, fake: &[Vec<TokenId>]| -> f64 {
        let mean = |xs: &[Vec<TokenId>]| xs.iter().map(|s| c.score(s).unwrap()).sum::<f64>() / xs.len() as f64;
        mean(&real) - mean(fake)
    };
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    for k in 1..=200 {
        let fake = fakes(&mut rng);
        sentence_critic_step(&mut critic, &mut opt, &real, &fake, cfg.clip).map_err(|e| e.to_string())?;
        let g = gap(&critic, &fakes(&mut rng));
        best = best.max(g);
        if g > 0.1 && reached.is_none() {
            reached = Some(k);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        reached.is_some() && within(t0, Duration::from_secs(120)),
        format!(
            "best D^s gap {best:.2e} over 200 updates (target > 0.1, lr {}, clip {}, hidden {}); {secs:.1}s of 120s",
            cfg.lr,
            cfg.clip,
            cfg.critic_hidden()
        ),
    )
}

// 6

struct Bandit {
    good: TokenId,
}

impl ParagraphScorer for Bandit {
    fn sentence_score(&self, sentence: &[TokenId]) -> paragan_core::Result<f64> {
        Ok(if sentence == [self.good] { 1.0 } else { 0.0 })
    }
    fn prefix_score(&self, _: &[Vec<TokenId>]) -> paragan_core::Result<f64> {
        Ok(0.0)
    }
}

fn softmax(logp: &[f64]) -> Vec<f64> {
    logp.iter().map(|l| l.exp()).collect()
}

fn policy_gradient_bandit() -> Outcome {
    let vocab = Vocabulary::build(["a b"]).unwrap();
    let (good, v) = (vocab.id("a"), vocab.len());
    let limits = Limits { s_max: 1, n_max: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut gen = Generator::new(
        Dims {
            feat_dim: 3,
            embed: 4,
            paragraph_hidden: 4,
            sentence_hidden: 4,
            word_hidden: 4,
            vocab_size: v,
        },
        9,
    )
    .unwrap();
    let regions = random_regions(&mut rng, 2, 3, v);
    let mut opt = RmsProp::new(gen.params(), 1e-3);
    let bias = gen.vocab_head.bias;
    let bias_index = gen.params().ids().position(|id| id == bias).unwrap();
    let policy = |g: &Generator| -> Vec<f64> {
        let tape = Tape::new();
        let s = g.session(&tape, &regions, false).unwrap();
        let sc = s.open_sentence(s.begin(), s.start_input().unwrap()).unwrap();
        softmax(s.word_step(&sc).unwrap().logp.value().data())
    };

    let p0 = policy(&gen)[good];
    let mut probs = vec![p0];
    let mut oracle_err = 0.0f64;
    let mut rewarded = 0;
    for _ in 0..50 {
        let pi = policy(&gen);
        let grads = {
            let tape = Tape::new();
            let s = gen.session(&tape, &regions, true).unwrap();
            let traj = sample_trajectory(&s, &limits, &mut rng).unwrap();
            let rw = rollout_rewards(&s, &Bandit { good }, &traj, 5, &limits, false, &mut rng).unwrap();
            let Some(loss) = policy_gradient_loss(&traj, &rw, 0.0).unwrap() else {
                return Err("no actions in trajectory".into());
            };
            let grads = s.bound().gradients(&tape.backward(loss).unwrap());
            // d/dz of -r log pi(a) for softmax logits z is -r (e_a - pi).
            let (a, r) = (traj.sentences[0][0], rw.words[0][0]);
            rewarded += (r > 0.0) as usize;
            for (k, &g) in grads[bias_index].data().iter().enumerate() {
                let want = -r * ((k == a) as u8 as f64 - pi[k]);
                oracle_err = oracle_err.max((g - want).abs());
            }
            grads
        };
        opt.step(gen.params_mut(), &grads).unwrap();
        probs.push(policy(&gen)[good]);
    }
    let drops = probs.windows(2).filter(|w| w[1] < w[0]).count();
    let rises = probs.windows(2).filter(|w| w[1] > w[0]).count();
    let last = *probs.last().unwrap();
    check(
        drops == 0 && rises == rewarded && last > p0 && oracle_err < 1e-10,
        format!(
            "P(good) {p0:.4} -> {last:.4}; {rises} rises over {rewarded} rewarded steps, {drops} drops; \
             max deviation from analytic gradient {oracle_err:.1e}"
        ),
    )
}

// 7

fn end_to_end_overfit() -> Outcome {
    let t0 = Instant::now();
    let (recs, vocab) = scenes(7, 8, &[]);
    let cfg = TrainConfig {
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let limits = cfg.limits();
    let data = Dataset::from_records(&recs, &vocab, Mode::Fully, None, &limits).unwrap();
    let gen = Generator::new(cfg.preset.dims(vocab.len()), 0).unwrap();
    let critics = Critics::new(cfg.critic_dims(vocab.len()), 1).unwrap();
    let mut t = Trainer::new(cfg, gen, critics).unwrap();
    let targets: Vec<Paragraph> = data.examples.iter().map(|e| e.supervision.target().unwrap()).collect();

    let evaluate = |g: &Generator| -> (f64, usize, f64) {
        let (mut nll, mut words, mut exact) = (0.0, 0, 0);
        let mut pairs = Vec::new();
        for (e, target) in data.examples.iter().zip(&targets) {
            nll -= g.log_prob(&e.regions, target).unwrap();
            words += target.num_tokens();
            let out = generate(g, &e.regions, DecodeMode::Greedy, None, &limits).unwrap();
            exact += (&out.paragraph == target) as usize;
            pairs.push(EvalPair::from_paragraphs(&out.paragraph.decode(&vocab), &[target.decode(&vocab)]).unwrap());
        }
        (nll / words as f64, exact, metrics::corpus_bleu(&pairs, 4).unwrap())
    };
    let mut last = (f64::INFINITY, 0, 0.0);
    while t.generator_updates < 2000 {
        t.train(&data, 5, &mut |_, _| {}).map_err(|e| e.to_string())?;
        last = evaluate(&t.generator);
        if last.0 < 0.1 && last.1 >= 7 && last.2 >= 0.9 {
            break;
        }
    }
    let (per_word, exact, bleu4) = last;
    let secs = t0.elapsed().as_secs_f64();
    check(
        per_word < 0.1 && exact >= 7 && bleu4 >= 0.9 && within(t0, Duration::from_secs(600)),
        format!(
            "after {} generator steps: {per_word:.4} nats/word, {exact}/8 exact, BLEU-4 {bleu4:.3}; {secs:.1}s of 600s",
            t.generator_updates
        ),
    )
}

// 8

fn semi_mode_contract() -> Outcome {
    let paras = synth_paragraphs(9, 64);
    let (recs, vocab) = scenes(8, 16, &paras);
    let cfg = TrainConfig {
        mode: Mode::Semi,
        ..TrainConfig::default()
    };
    let limits = cfg.limits();
    let data = Dataset::from_records(&recs, &vocab, Mode::Semi, Some(&paras), &limits).unwrap();
    let gen = Generator::new(cfg.preset.dims(vocab.len()), 0).unwrap();
    let critics = Critics::new(cfg.critic_dims(vocab.len()), 1).unwrap();
    let mut t = Trainer::new(cfg, gen, critics).unwrap();

    let mut gaps = Vec::new();
    let mut current = Vec::new();
    let mut out_of_bounds = 0;
    let mut checked = 0;
    let mut sample_seed = 0;
    while t.iteration < 500 {
        t.run_epoch(&data, &mut |rec, _| {
            if let Some(g) = rec.gap_r {
                current.push(g);
            }
            if rec.phase == Phase::Generator {
                gaps.push(current.iter().sum::<f64>() / current.len() as f64);
                current.clear();
            }
        })
        .map_err(|e| e.to_string())?;
        for e in &data.examples {
            sample_seed += 1;
            let p = generate(
                &t.generator,
                &e.regions,
                DecodeMode::Sample { seed: sample_seed },
                None,
                &limits,
            )
            .unwrap()
            .paragraph;
            checked += 1;
            let ok = (1..=limits.s_max).contains(&p.len()) && p.sentences().iter().all(|s| s.len() <= limits.n_max);
            out_of_bounds += (!ok) as usize;
        }
    }
    gaps.truncate(500);
    let smooth: Vec<f64> = gaps.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let (first, last) = (smooth[0], *smooth.last().unwrap());
    check(
        out_of_bounds == 0 && last < first,
        format!(
            "{checked} sampled paragraphs, {out_of_bounds} out of bounds; smoothed D^r gap {first:.2e} -> {last:.2e} \
             over {} iterations (must decrease)",
            gaps.len()
        ),
    )
}

// 9

fn metric_oracles() -> Outcome {
    let toks = |s: &str| paragan_core::vocab::tokenize(s);
    let pair = |c: &str, r: &[&str]| EvalPair::new(toks(c), r.iter().map(|x| toks(x)).collect()).unwrap();
    let bleu1 = metrics::bleu(&pair("the the the the", &["the cat"]), 1).unwrap();
    let cider = metrics::cider(&[
        pair("a red ball sits here", &["a red ball sits here"]),
        pair("the dog faces the cat", &["two green boats float"]),
    ])
    .unwrap()
    .per_image[0];
    let meteor1 = metrics::meteor_exact(&pair("a", &["a"]));
    let ten = "w0 w1 w2 w3 w4 w5 w6 w7 w8 w9";
    let meteor10 = metrics::meteor_exact(&pair(ten, &[ten]));
    let got = [bleu1, cider, meteor1, meteor10];
    let want = [0.25, 10.0, 0.5, 0.9995];
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    check(
        worst < 1e-6,
        format!("BLEU-1 {bleu1}, CIDEr {cider}, METEOR {meteor1}, METEOR(10) {meteor10}; max |err| {worst:.1e}"),
    )
}

// 10

fn decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let limits = Limits::default();
    let mut beam_worse = 0;
    let mut min_margin = f64::INFINITY;
    let mut verbatim = 0;
    for k in 0..100u64 {
        let v = rng.gen_range(6..30);
        let dims = small_dims(&mut rng, v);
        let gen = Generator::new(dims, 1000 + k).unwrap();
        let m = rng.gen_range(1..6);
        let regions = random_regions(&mut rng, m, dims.feat_dim, v);
        let greedy = generate(&gen, &regions, DecodeMode::Greedy, None, &limits).unwrap();
        let beam = generate(&gen, &regions, DecodeMode::Beam { width: 2 }, None, &limits).unwrap();
        min_margin = min_margin.min(beam.logprob - greedy.logprob);
        beam_worse += (beam.logprob < greedy.logprob) as usize;

        let n = rng.gen_range(1..limits.n_max);
        let first: Vec<TokenId> = (0..n).map(|_| rng.gen_range(4..v)).collect();
        let mode = match k % 3 {
            0 => DecodeMode::Greedy,
            1 => DecodeMode::Sample { seed: k },
            _ => DecodeMode::Beam { width: 2 },
        };
        let out = generate(&gen, &regions, mode, Some(&first), &limits).unwrap();
        let s0 = &out.paragraph.sentences()[0];
        verbatim += (s0[..s0.len() - 1] == first[..] && s0.last() == Some(&END)) as usize;
    }
    check(
        beam_worse == 0 && verbatim == 100,
        format!(
            "beam >= greedy on {}/100 (min margin {min_margin:.2e}); first sentence verbatim {verbatim}/100",
            100 - beam_worse
        ),
    )
}
