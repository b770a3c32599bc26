use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use paragan_core::critics::Critics;
use paragan_core::data::{load_corpus, load_paragraph_corpus, save_corpus, save_paragraph_corpus, CorpusRecord};
use paragan_core::decode::{self, DecodeMode, Limits};
use paragan_core::generator::{Generator, SentenceAttention};
use paragan_core::metrics::{self, EvalPair};
use paragan_core::synth::{synth_corpus, synth_paragraphs};
use paragan_core::training::{Dataset, MetricsRecord, Trainer};
use paragan_core::vocab::Vocabulary;
use paragan_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DecodeKind, RunConfig};
use crate::error::{input_error, io_error, CliError};
use crate::{DecodeArgs, EvaluateArgs, GenerateArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(&format!("cannot create {}", dir.display()), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(&format!("cannot write {}", path.display()), e))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_corpus(path: &Path, feat_dim: Option<usize>) -> Result<Vec<CorpusRecord>> {
    load_corpus(path, feat_dim).map_err(|e| input_error(&path.display().to_string(), e))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let val_count = a.val_count.unwrap_or(a.count / 4);
    let n_paragraphs = a.paragraphs.unwrap_or(a.count);
    let make = |seed, n| synth_corpus(seed, n, a.feat_dim, a.regions).map_err(|e| CliError::usage(e.to_string()));
    let train = make(a.seed, a.count)?;
    let val = make(!a.seed, val_count)?;
    let paragraphs = synth_paragraphs(a.seed, n_paragraphs);

    let write = |name: &str, r: paragan_core::Result<()>| {
        r.map_err(|e| io_error(&format!("cannot write {}", a.out.join(name).display()), e))
    };
    fs::create_dir_all(&a.out).map_err(|e| io_error(&format!("cannot create {}", a.out.display()), e))?;
    write("train.jsonl", save_corpus(&a.out.join("train.jsonl"), &train))?;
    write("val.jsonl", save_corpus(&a.out.join("val.jsonl"), &val))?;
    write(
        "paragraphs.jsonl",
        save_paragraph_corpus(&a.out.join("paragraphs.jsonl"), &paragraphs),
    )?;

    let vocab = Vocabulary::build(
        train
            .iter()
            .flat_map(|r| r.texts())
            .chain(paragraphs.iter().flatten().map(String::as_str)),
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    let sentences: Vec<&String> = train.iter().flat_map(|r| r.paragraph.iter().flatten()).collect();
    let words: usize = sentences.iter().map(|s| s.split_whitespace().count()).sum();
    println!(
        "train {} / val {} scenes, {} standalone paragraphs, {} regions of dim {}; \
         {:.2} sentences per paragraph, {:.2} words per sentence, vocabulary {}",
        train.len(),
        val.len(),
        paragraphs.len(),
        a.regions,
        a.feat_dim,
        sentences.len() as f64 / train.len() as f64,
        words as f64 / sentences.len().max(1) as f64,
        vocab.len()
    );
    Ok(())
}

fn apply_overrides(base: Value, a: &TrainArgs) -> Result<RunConfig> {
    let Value::Object(mut obj) = base else {
        return Err(CliError::usage("config: expected a JSON object"));
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
    let flags = [
        ("train_corpus", path(&a.train_corpus)),
        ("paragraph_corpus", path(&a.paragraph_corpus)),
        ("val_corpus", path(&a.val_corpus)),
        ("out_dir", path(&a.out)),
        ("epochs", a.epochs.map(Value::from)),
        ("seed", a.seed.map(Value::from)),
        ("mode", a.mode.clone().map(Value::String)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            obj.insert(k.to_string(), v);
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        obj.insert(k.to_string(), v);
    }
    RunConfig::from_value(Value::Object(obj))
}

fn timestamp() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Metrics record as one JSON line, stamped with the wall-clock write time.
fn metrics_line(rec: &MetricsRecord) -> String {
    let mut v = serde_json::to_value(rec).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.insert("timestamp".into(), Value::from(timestamp()));
    }
    v.to_string()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(checkpoint::load).transpose()?;
    let base = match (&a.config, &resumed) {
        (Some(p), _) => RunConfig::load(p)?.to_value(),
        (None, Some(ck)) => ck.config.to_value(),
        (None, None) => RunConfig::default().to_value(),
    };
    let cfg = apply_overrides(base, a)?;
    let train_path = cfg
        .paths
        .train_corpus
        .clone()
        .ok_or_else(|| CliError::usage("no training corpus: set train_corpus or pass --train-corpus"))?;
    let paragraphs = cfg
        .paths
        .paragraph_corpus
        .as_deref()
        .map(|p| load_paragraph_corpus(p).map_err(|e| input_error(&p.display().to_string(), e)))
        .transpose()?;

    let (mut trainer, vocab, records) = match resumed {
        Some(ck) => {
            let records = read_corpus(&train_path, Some(ck.generator.dims.feat_dim))?;
            let vocab = ck.vocab.clone();
            (ck.into_trainer(&cfg)?, vocab, records)
        }
        None => {
            let records = read_corpus(&train_path, Some(cfg.train.preset.dims(0).feat_dim))?;
            let vocab = Vocabulary::build(
                records
                    .iter()
                    .flat_map(|r| r.texts())
                    .chain(paragraphs.iter().flatten().flatten().map(String::as_str)),
            )
            .map_err(|e| input_error("vocabulary", e))?;
            let seed = cfg.train.seed;
            let gen = Generator::new(cfg.train.preset.dims(vocab.len()), seed)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let critics = Critics::new(cfg.train.critic_dims(vocab.len()), seed.wrapping_add(2))
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let t =
                Trainer::new(cfg.train.clone(), gen, critics).map_err(|e| CliError::usage(format!("config: {e}")))?;
            (t, vocab, records)
        }
    };

    let limits = cfg.train.limits();
    let data = Dataset::from_records(&records, &vocab, cfg.train.mode, paragraphs.as_deref(), &limits)
        .map_err(|e| input_error("training data", e))?;
    let out = cfg.paths.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_error(&format!("cannot create {}", out.display()), e))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map(BufWriter::new)
        .map_err(|e| io_error(&format!("cannot open {}", metrics_path.display()), e))?;

    let trainer = &mut trainer;
    for _ in 0..cfg.train.epochs {
        let mut write_err = None;
        let result = trainer.run_epoch(&data, &mut |rec, _| {
            if write_err.is_none() {
                if let Err(e) = writeln!(log, "{}", metrics_line(rec)) {
                    write_err = Some(e);
                }
            }
        });
        log.flush().map_err(|e| io_error("cannot write metrics", e))?;
        if let Some(e) = write_err {
            return Err(io_error("cannot write metrics", e));
        }
        if let Err(e) = result {
            return Err(training_failure(e, trainer, &cfg, &vocab, &out));
        }
        let dir = out.join(format!("epoch-{}", trainer.epoch));
        checkpoint::save(&dir, trainer, &cfg, &vocab)?;
        log::info!(
            "epoch {} done: {} iterations, {} generator updates",
            trainer.epoch,
            trainer.iteration,
            trainer.generator_updates
        );
    }
    let final_dir = out.join("final");
    checkpoint::save(&final_dir, trainer, &cfg, &vocab)?;

    if let Some(val) = &cfg.paths.val_corpus {
        let records = read_corpus(val, Some(trainer.generator.dims.feat_dim))?;
        let mode = cfg.decode.mode()?;
        let report = evaluate_records(&trainer.generator, &vocab, &records, mode, &limits)?;
        let path = out.join("val_report.json");
        write_report(&report, Some(&path))?;
        log::info!("validation BLEU-4 {:.4}, CIDEr {:.4}", report.bleu4, report.cider);
    }
    println!("{}", final_dir.display());
    Ok(())
}

fn training_failure(e: CoreError, trainer: &Trainer, cfg: &RunConfig, vocab: &Vocabulary, out: &Path) -> CliError {
    let CoreError::NonFinite { iteration, .. } = &e else {
        return CliError::runtime(format!("training failed: {e}"));
    };
    let dump = out.join(format!("diagnostic-iteration-{iteration}"));
    let saved = checkpoint::save(&dump, trainer, cfg, vocab)
        .and_then(|_| fs::write(dump.join("error.txt"), format!("{e}\n")).map_err(|err| io_error("diagnostic", err)));
    match saved {
        Ok(()) => CliError::runtime(format!("training failed: {e}; diagnostic dump at {}", dump.display())),
        Err(d) => CliError::runtime(format!("training failed: {e}; diagnostic dump failed: {d}")),
    }
}

fn decode_mode(cfg: &RunConfig, a: &DecodeArgs) -> Result<DecodeMode> {
    let mut d = cfg.decode.clone();
    if let Some(m) = a.mode {
        d.decode = m;
    }
    if let Some(b) = a.beam {
        d.beam = b;
        if a.mode.is_none() {
            d.decode = DecodeKind::Beam;
        }
    }
    if let Some(s) = a.seed {
        d.decode_seed = s;
    }
    d.mode()
}

/// Sample mode gets a distinct, reproducible seed per example.
fn mode_for(mode: DecodeMode, index: usize) -> DecodeMode {
    match mode {
        DecodeMode::Sample { seed } => DecodeMode::Sample {
            seed: seed.wrapping_add(index as u64),
        },
        m => m,
    }
}

fn check_feat_dim(records: &[CorpusRecord], feat_dim: usize) -> Result<()> {
    for r in records {
        let got = r.regions[0].feat.len();
        if got != feat_dim {
            return Err(CliError::usage(format!(
                "record {:?}: region features have dimension {got}, the checkpoint expects {feat_dim}",
                r.id
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    id: &'a str,
    paragraph: Vec<String>,
    logprob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<&'a [SentenceAttention]>,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let ck = checkpoint::load(&a.ckpt)?;
    let mode = decode_mode(&ck.config, &a.decode)?;
    let limits = ck.config.train.limits();
    let records = read_corpus(&a.input, None)?;
    check_feat_dim(&records, ck.generator.dims.feat_dim)?;
    let first = a
        .first_sentence
        .as_deref()
        .map(|s| {
            ck.vocab
                .encode_strict(s)
                .map_err(|e| input_error("--first-sentence", e))
        })
        .transpose()?;

    let mut w = output(a.out.as_deref())?;
    for (i, r) in records.iter().enumerate() {
        let regions = r.regions(&ck.vocab).map_err(|e| input_error(&r.id, e))?;
        let g = decode::generate(&ck.generator, &regions, mode_for(mode, i), first.as_deref(), &limits).map_err(
            |e| match e {
                CoreError::Invalid(_) => input_error(&r.id, e),
                e => CliError::runtime(format!("{}: {e}", r.id)),
            },
        )?;
        let rec = OutputRecord {
            id: &r.id,
            paragraph: g.paragraph.decode(&ck.vocab),
            logprob: g.logprob,
            attention: a.dump_attention.then_some(g.attention.as_slice()),
        };
        let line = serde_json::to_string(&rec).map_err(|e| io_error("output", e))?;
        writeln!(w, "{line}").map_err(|e| io_error("output", e))?;
    }
    w.flush().map_err(|e| io_error("output", e))
}

#[derive(Deserialize)]
struct Candidate {
    id: String,
    paragraph: Vec<String>,
}

fn reference_records(records: &[CorpusRecord]) -> Result<Vec<&CorpusRecord>> {
    let refs: Vec<&CorpusRecord> = records.iter().filter(|r| r.paragraph.is_some()).collect();
    if refs.is_empty() {
        return Err(CliError::usage("the corpus has no reference paragraphs"));
    }
    if refs.len() < records.len() {
        log::warn!(
            "{} records without a reference paragraph are skipped",
            records.len() - refs.len()
        );
    }
    Ok(refs)
}

fn evaluate_records(
    gen: &Generator,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    mode: DecodeMode,
    limits: &Limits,
) -> Result<metrics::Report> {
    let refs = reference_records(records)?;
    let mut pairs = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        let regions = r.regions(vocab).map_err(|e| input_error(&r.id, e))?;
        let g = decode::generate(gen, &regions, mode_for(mode, i), None, limits)
            .map_err(|e| CliError::runtime(format!("{}: {e}", r.id)))?;
        pairs.push(pair(&g.paragraph.decode(vocab), r)?);
    }
    metrics::evaluate(&pairs).map_err(|e| CliError::usage(e.to_string()))
}

fn pair(candidate: &[String], r: &CorpusRecord) -> Result<EvalPair> {
    let reference = r.paragraph.clone().unwrap_or_default();
    EvalPair::from_paragraphs(candidate, &[reference]).map_err(|e| input_error(&r.id, e))
}

fn write_report(report: &metrics::Report, path: Option<&Path>) -> Result<()> {
    let mut w = output(path)?;
    let text = serde_json::to_string_pretty(report).map_err(|e| io_error("report", e))?;
    writeln!(w, "{text}")
        .and_then(|_| w.flush())
        .map_err(|e| io_error("report", e))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = match (&a.candidates, &a.ckpt) {
        (Some(path), _) => {
            let records = read_corpus(&a.corpus, None)?;
            let refs = reference_records(&records)?;
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let mut by_id = HashMap::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let c: Candidate = serde_json::from_str(line)
                    .map_err(|e| CliError::usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
                by_id.insert(c.id, c.paragraph);
            }
            let pairs = refs
                .iter()
                .map(|r| {
                    let c = by_id
                        .get(&r.id)
                        .ok_or_else(|| CliError::usage(format!("no candidate for record {:?}", r.id)))?;
                    pair(c, r)
                })
                .collect::<Result<Vec<_>>>()?;
            metrics::evaluate(&pairs).map_err(|e| CliError::usage(e.to_string()))?
        }
        (None, Some(ckpt)) => {
            let ck: Checkpoint = checkpoint::load(ckpt)?;
            let mode = decode_mode(&ck.config, &a.decode)?;
            let records = read_corpus(&a.corpus, None)?;
            check_feat_dim(&records, ck.generator.dims.feat_dim)?;
            evaluate_records(&ck.generator, &ck.vocab, &records, mode, &ck.config.train.limits())?
        }
        (None, None) => return Err(CliError::usage("pass --ckpt or --candidates")),
    };
    write_report(&report, a.out.as_deref())
}
