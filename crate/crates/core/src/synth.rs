//! Toy compositional scenes standing in for dense-captioning output.
//!
//! Region features are built from per-word base vectors so that a region's
//! feature is predictive of its phrase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CorpusRecord, RegionRecord};
use crate::error::{Error, Result};

pub const GRAMMAR_VERSION: u64 = 1;

pub const NOUNS: [&str; 12] = [
    "ball", "bird", "boat", "book", "car", "cat", "chair", "cup", "dog", "house", "lamp", "tree",
];
pub const ATTRIBUTES: [&str; 8] = ["black", "blue", "green", "large", "red", "small", "white", "yellow"];
pub const POSITIONS: [&str; 5] = ["bottom", "center", "left", "right", "top"];
pub const VERBS: [&str; 4] = ["faces", "follows", "touches", "watches"];

const NOISE: f64 = 0.1;
const MAX_OBJECTS: usize = 8;
const MAX_RELATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub noun: &'static str,
    pub attribute: &'static str,
    pub position: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub subject: usize,
    pub verb: &'static str,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

impl SceneSpec {
    /// Draws 2..=max_objects distinct nouns and up to three relations.
    pub fn sample(rng: &mut impl Rng, max_objects: usize) -> Self {
        let n = rng.gen_range(2..=max_objects.clamp(2, MAX_OBJECTS));
        let nouns: Vec<&'static str> = NOUNS.choose_multiple(rng, n).copied().collect();
        let objects = nouns
            .into_iter()
            .map(|noun| SceneObject {
                noun,
                attribute: ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())],
                position: POSITIONS[rng.gen_range(0..POSITIONS.len())],
            })
            .collect();
        let n_rel = rng.gen_range(0..=MAX_RELATIONS);
        let relations = (0..n_rel)
            .map(|_| {
                let subject = rng.gen_range(0..n);
                let object = (subject + rng.gen_range(1..n)) % n;
                Relation {
                    subject,
                    verb: VERBS[rng.gen_range(0..VERBS.len())],
                    object,
                }
            })
            .collect();
        SceneSpec { objects, relations }
    }

    fn noun(&self, i: usize) -> &'static str {
        self.objects[i].noun
    }

    fn relation_phrase(&self, r: &Relation) -> String {
        format!("{} {} {}", self.noun(r.subject), r.verb, self.noun(r.object))
    }

    /// Overview, some per-object sentences, some relation sentences, closing.
    fn paragraph(&self, rng: &mut impl Rng) -> Vec<String> {
        let (a, b) = (&self.objects[0], &self.objects[1]);
        let mut out = vec![format!(
            "this scene shows a {} {} and a {} {} .",
            a.attribute, a.noun, b.attribute, b.noun
        )];
        let k = rng.gen_range(0..=self.objects.len().min(3));
        for o in &self.objects[..k] {
            out.push(if o.position == "center" {
                format!("a {} {} sits here .", o.attribute, o.noun)
            } else {
                format!("the {} {} is on the {} .", o.attribute, o.noun, o.position)
            });
        }
        let r = rng.gen_range(0..=self.relations.len().min(4 - k));
        for rel in &self.relations[..r] {
            out.push(format!(
                "the {} {} the {} .",
                self.noun(rel.subject),
                rel.verb,
                self.noun(rel.object)
            ));
        }
        let mood = if self.objects.len() <= 3 { "calm" } else { "busy" };
        out.push(format!("the scene looks {mood} ."));
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic vector in `[-1, 1]^dim` keyed by `word` and the grammar version.
pub fn word_vector(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ GRAMMAR_VERSION);
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

fn positional(position: &str, dim: usize) -> Vec<f64> {
    let p = POSITIONS.iter().position(|&q| q == position).unwrap_or(0) as f64;
    (0..dim)
        .map(|k| {
            let freq = 1.0 / 10f64.powf(2.0 * (k / 2) as f64 / dim as f64);
            if k % 2 == 0 {
                (p * freq).sin()
            } else {
                (p * freq).cos()
            }
        })
        .collect()
}

fn combine(parts: &[(f64, Vec<f64>)], rng: &mut impl Rng) -> Vec<f64> {
    let dim = parts[0].1.len();
    (0..dim)
        .map(|k| parts.iter().map(|(w, v)| w * v[k]).sum::<f64>() + rng.gen_range(-NOISE..=NOISE))
        .collect()
}

fn object_feature(o: &SceneObject, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    combine(
        &[
            (1.0, word_vector(o.noun, dim)),
            (0.5, word_vector(o.attribute, dim)),
            (0.3, positional(o.position, dim)),
        ],
        rng,
    )
}

/// One synthetic example with exactly `regions` regions.
///
/// Regions are, in order: one per object (`attribute noun`), one per
/// relation (`noun verb noun`), then fillers cycling over the objects
/// (`noun on position`, then `attribute noun` again).
pub fn synth_scene(seed: u64, feat_dim: usize, regions: usize) -> Result<CorpusRecord> {
    if regions < 2 {
        return Err(Error::invalid("synthetic scenes need at least 2 regions"));
    }
    if feat_dim == 0 {
        return Err(Error::invalid("feat_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SceneSpec::sample(&mut rng, regions);
    let n_obj = scene.objects.len();

    let mut out = Vec::with_capacity(regions);
    for o in &scene.objects {
        out.push(RegionRecord {
            feat: object_feature(o, feat_dim, &mut rng),
            phrase: format!("{} {}", o.attribute, o.noun),
        });
    }
    for rel in scene.relations.iter().take(regions - n_obj) {
        let feat = combine(
            &[
                (0.5, word_vector(scene.noun(rel.subject), feat_dim)),
                (0.5, word_vector(scene.noun(rel.object), feat_dim)),
                (1.0, word_vector(rel.verb, feat_dim)),
            ],
            &mut rng,
        );
        out.push(RegionRecord {
            feat,
            phrase: scene.relation_phrase(rel),
        });
    }
    let mut k = 0;
    while out.len() < regions {
        let o = &scene.objects[k % n_obj];
        let phrase = if (k / n_obj).is_multiple_of(2) {
            format!("{} on {}", o.noun, o.position)
        } else {
            format!("{} {}", o.attribute, o.noun)
        };
        out.push(RegionRecord {
            feat: object_feature(o, feat_dim, &mut rng),
            phrase,
        });
        k += 1;
    }

    let paragraph = scene.paragraph(&mut rng);
    let caption = paragraph[0].clone();
    Ok(CorpusRecord {
        id: format!("scene-{seed}"),
        regions: out,
        paragraph: Some(paragraph),
        caption: Some(caption),
    })
}

fn example_seed(seed: u64, stream: u64, i: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(i as u128 * 2);
    rng.gen()
}

/// `count` scenes; a pure function of `(seed, count, feat_dim, regions)`.
pub fn synth_corpus(seed: u64, count: usize, feat_dim: usize, regions: usize) -> Result<Vec<CorpusRecord>> {
    (0..count as u64)
        .map(|i| synth_scene(example_seed(seed, 0, i), feat_dim, regions))
        .collect()
}

/// Standalone paragraphs from scenes independent of [`synth_corpus`]'s.
pub fn synth_paragraphs(seed: u64, count: usize) -> Vec<Vec<String>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, 1, i));
            SceneSpec::sample(&mut rng, MAX_OBJECTS).paragraph(&mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{tokenize, Vocabulary};

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_scene(42, 16, 10).unwrap();
        let b = synth_scene(42, 16, 10).unwrap();
        assert_eq!(a, b);
        let bits = |r: &CorpusRecord| -> Vec<u64> {
            r.regions
                .iter()
                .flat_map(|x| x.feat.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, synth_scene(43, 16, 10).unwrap());
    }

    #[test]
    fn paragraph_length_in_bounds() {
        for rec in synth_corpus(5, 300, 8, 10).unwrap() {
            let n = rec.paragraph.as_ref().unwrap().len();
            assert!((2..=6).contains(&n), "{n}");
            assert_eq!(rec.regions.len(), 10);
            assert_eq!(
                rec.caption.as_deref(),
                Some(rec.paragraph.as_ref().unwrap()[0].as_str())
            );
        }
        for p in synth_paragraphs(5, 300) {
            assert!((2..=6).contains(&p.len()));
        }
    }

    #[test]
    fn content_nouns_appear_in_region_phrases() {
        for rec in synth_corpus(11, 300, 8, 4).unwrap() {
            let phrase_words: Vec<String> = rec.regions.iter().flat_map(|r| tokenize(&r.phrase)).collect();
            for s in rec.paragraph.as_ref().unwrap() {
                for w in tokenize(s) {
                    if NOUNS.contains(&w.as_str()) {
                        assert!(phrase_words.contains(&w), "{w} missing in {}", rec.id);
                    }
                }
            }
        }
    }

    #[test]
    fn features_track_phrases() {
        // An object region sits closer to its noun's base vector than to any other noun's.
        let dim = 64;
        for rec in synth_corpus(3, 20, dim, 10).unwrap() {
            let r = &rec.regions[0];
            let noun = tokenize(&r.phrase)[1].clone();
            let dist = |w: &str| -> f64 {
                word_vector(w, dim)
                    .iter()
                    .zip(&r.feat)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum()
            };
            let own = dist(&noun);
            assert!(NOUNS.iter().filter(|&&n| n != noun).all(|n| dist(n) > own));
        }
    }

    #[test]
    fn every_vocab_token_occurs_in_corpus() {
        let recs = synth_corpus(9, 50, 8, 10).unwrap();
        let vocab = Vocabulary::build(recs.iter().flat_map(|r| r.texts())).unwrap();
        let text: Vec<String> = recs.iter().flat_map(|r| r.texts()).flat_map(tokenize).collect();
        for t in &vocab.tokens()[4..] {
            assert!(text.contains(t));
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(synth_scene(1, 8, 1).is_err());
        assert!(synth_scene(1, 0, 4).is_err());
    }
}
