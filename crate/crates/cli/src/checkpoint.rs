//! Checkpoint directories: `manifest.json` plus `params.bin`, the raw
//! little-endian f32 arrays concatenated in manifest order.

use std::fs;
use std::path::Path;

use paragan_autograd::Tensor;
use paragan_core::critics::{CriticDims, Critics};
use paragan_core::generator::{Dims, Generator};
use paragan_core::nn::ParamSet;
use paragan_core::training::Trainer;
use paragan_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: u32 = 1;

/// Offsets and lengths count f32 elements, not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: usize,
    pub iteration: usize,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub reward_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub dims: Dims,
    pub critic_dims: CriticDims,
    pub state: TrainState,
    pub tensors: Vec<Entry>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub critics: Critics,
    /// Generator, sentence-critic and topic-critic RMSprop accumulators.
    pub optimizers: [Vec<Tensor>; 3],
    pub state: TrainState,
}

const GROUPS: [&str; 6] = [
    "generator",
    "sentence_critic",
    "topic_critic",
    "generator_opt",
    "sentence_critic_opt",
    "topic_critic_opt",
];

fn named<'a>(group: &'a str, params: &'a ParamSet, values: &'a [Tensor]) -> impl Iterator<Item = (String, &'a Tensor)> {
    params
        .iter()
        .zip(values)
        .map(move |((name, _), t)| (format!("{group}/{name}"), t))
}

pub fn save(dir: &Path, trainer: &Trainer, config: &RunConfig, vocab: &Vocabulary) -> Result<(), CliError> {
    let gen = trainer.generator.params();
    let (ds, dr) = (trainer.critics.sentence.params(), trainer.critics.topic.params());
    let values = [
        gen.to_tensors(),
        ds.to_tensors(),
        dr.to_tensors(),
        trainer.gen_opt.accumulators().to_vec(),
        trainer.ds_opt.accumulators().to_vec(),
        trainer.dr_opt.accumulators().to_vec(),
    ];
    let owners = [gen, ds, dr, gen, ds, dr];

    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for ((group, params), vals) in GROUPS.iter().zip(owners).zip(&values) {
        for (name, t) in named(group, params, vals) {
            tensors.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
                length: t.len(),
            });
            offset += t.len();
            blob.extend(t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        config: config.to_value(),
        vocab: vocab.tokens().to_vec(),
        dims: trainer.generator.dims,
        critic_dims: trainer.critics.dims(),
        state: TrainState {
            epoch: trainer.epoch,
            iteration: trainer.iteration,
            critic_updates: trainer.critic_updates,
            generator_updates: trainer.generator_updates,
            reward_baseline: trainer.reward_baseline(),
        },
        tensors,
    };
    let what = || format!("cannot write checkpoint {}", dir.display());
    fs::create_dir_all(dir).map_err(|e| io_error(&what(), e))?;
    fs::write(dir.join(BLOB), blob).map_err(|e| io_error(&what(), e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_error(&what(), e))?;
    fs::write(dir.join(MANIFEST), text + "\n").map_err(|e| io_error(&what(), e))?;
    Ok(())
}

fn corrupt(dir: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("checkpoint {}: {msg}", dir.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| corrupt(dir, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(dir, e))?;
    if m.format != FORMAT {
        return Err(corrupt(dir, format!("unsupported format {}", m.format)));
    }
    Ok(m)
}

/// Checks that the entries tile `blob_len` elements exactly and returns the
/// decoded arrays.
fn decode_blob(dir: &Path, m: &Manifest, bytes: &[u8]) -> Result<Vec<Tensor>, CliError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(corrupt(
            dir,
            format!(
                "manifest mismatch: blob has {} bytes, not a whole number of f32 values",
                bytes.len()
            ),
        ));
    }
    let total = bytes.len() / 4;
    let mut expected = 0;
    for e in &m.tensors {
        if e.offset != expected || e.shape.iter().product::<usize>() != e.length {
            return Err(corrupt(dir, format!("manifest mismatch at {:?}", e.name)));
        }
        expected += e.length;
    }
    if expected != total {
        return Err(corrupt(
            dir,
            format!("manifest mismatch: manifest lists {expected} values, blob holds {total}"),
        ));
    }
    m.tensors
        .iter()
        .map(|e| {
            let data = bytes[4 * e.offset..4 * (e.offset + e.length)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(dir, err))
        })
        .collect()
}

/// Takes the tensors of `group` in parameter order, checking names and shapes.
fn take_group(
    dir: &Path,
    group: &str,
    params: &ParamSet,
    entries: &[Entry],
    values: &[Tensor],
) -> Result<Vec<Tensor>, CliError> {
    let prefix = format!("{group}/");
    let found: Vec<(&Entry, &Tensor)> = entries
        .iter()
        .zip(values)
        .filter(|(e, _)| e.name.starts_with(&prefix))
        .collect();
    if found.len() != params.len() {
        return Err(corrupt(
            dir,
            format!("{group}: {} tensors stored, model has {}", found.len(), params.len()),
        ));
    }
    params
        .iter()
        .zip(found)
        .map(|((name, t), (e, v))| {
            if e.name[prefix.len()..] != *name || v.shape() != t.shape() {
                return Err(corrupt(
                    dir,
                    format!("{} does not match parameter {group}/{name}", e.name),
                ));
            }
            Ok(v.clone())
        })
        .collect()
}

fn assign(dir: &Path, params: &mut ParamSet, values: Vec<Tensor>) -> Result<(), CliError> {
    for (id, v) in params.ids().collect::<Vec<_>>().into_iter().zip(values) {
        params.set(id, v).map_err(|e| corrupt(dir, e))?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint, CliError> {
    let m = read_manifest(dir)?;
    let bytes = fs::read(dir.join(BLOB)).map_err(|e| corrupt(dir, e))?;
    let values = decode_blob(dir, &m, &bytes)?;
    let config = RunConfig::from_value(m.config.clone()).map_err(|e| corrupt(dir, e))?;
    let vocab = Vocabulary::from_tokens(m.vocab.clone()).map_err(|e| corrupt(dir, e))?;
    if m.dims.vocab_size != vocab.len() || m.critic_dims.vocab_size != vocab.len() {
        return Err(corrupt(dir, "vocabulary size does not match the stored dimensions"));
    }
    let mut generator = Generator::new(m.dims, 0).map_err(|e| corrupt(dir, e))?;
    let mut critics = Critics::new(m.critic_dims, 0).map_err(|e| corrupt(dir, e))?;

    let mut groups = Vec::with_capacity(GROUPS.len());
    for (k, group) in GROUPS.iter().enumerate() {
        let owner = match k % 3 {
            0 => generator.params(),
            1 => critics.sentence.params(),
            _ => critics.topic.params(),
        };
        groups.push(take_group(dir, group, owner, &m.tensors, &values)?);
    }
    if groups.iter().map(Vec::len).sum::<usize>() != m.tensors.len() {
        return Err(corrupt(dir, "manifest lists tensors outside the known groups"));
    }
    let mut groups = groups.into_iter();
    assign(dir, generator.params_mut(), groups.next().unwrap())?;
    assign(dir, critics.sentence.params_mut(), groups.next().unwrap())?;
    assign(dir, critics.topic.params_mut(), groups.next().unwrap())?;
    let optimizers = [groups.next().unwrap(), groups.next().unwrap(), groups.next().unwrap()];
    Ok(Checkpoint {
        config,
        vocab,
        generator,
        critics,
        optimizers,
        state: m.state,
    })
}

impl Checkpoint {
    /// Rebuilds a trainer positioned where the checkpoint was taken. The
    /// training fields of `config` may differ from the stored ones; the
    /// critic sizes may not.
    pub fn into_trainer(self, config: &RunConfig) -> Result<Trainer, CliError> {
        let vocab_size = self.generator.dims.vocab_size;
        let want = config.train.critic_dims(vocab_size);
        if want != self.critics.dims() {
            return Err(CliError::usage(format!(
                "config critic dimensions {want:?} do not match the checkpoint's {:?}",
                self.critics.dims()
            )));
        }
        let mut t = Trainer::new(config.train.clone(), self.generator, self.critics)
            .map_err(|e| CliError::usage(format!("config: {e}")))?;
        let [g, s, r] = self.optimizers;
        let restore = |e: paragan_core::Error| CliError::runtime(format!("checkpoint optimizer state: {e}"));
        t.gen_opt.set_accumulators(g).map_err(restore)?;
        t.ds_opt.set_accumulators(s).map_err(restore)?;
        t.dr_opt.set_accumulators(r).map_err(restore)?;
        t.epoch = self.state.epoch;
        t.iteration = self.state.iteration;
        t.critic_updates = self.state.critic_updates;
        t.generator_updates = self.state.generator_updates;
        t.set_reward_baseline(self.state.reward_baseline);
        Ok(t)
    }
}
