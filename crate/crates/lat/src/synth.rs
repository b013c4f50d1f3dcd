//! Seeded synthetic worlds: a class taxonomy with synonyms, an embedding
//! table whose geometry encodes that taxonomy, scenes of noisy prototype
//! objects, templated counting questions, and the count oracle that labels
//! them.
//!
//! Detector-label rule: objects always carry the base class label; questions
//! may refer to a class by a synonym. The `test-synonym` split uses only
//! synonym nouns that never appear in training questions, so it probes
//! whether a model can bridge from the label "car" to the question word
//! "sedan" through the embedding geometry alone.
//!
//! Everything is derived from the world seed; generating twice with the
//! same spec produces byte-identical files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, EmbeddingTable};
use crate::error::{LatError, Result};
use crate::vocab::{Vocab, END, START};

pub const WORLD_FILE: &str = "world.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST_SEEN: &str = "test-seen";
pub const SPLIT_TEST_SYNONYM: &str = "test-synonym";

/// Question templates; `{noun}` is replaced by the queried class word.
pub const QUESTION_TEMPLATES: [&[&str]; 4] = [
    &["how", "many", "{noun}", "are", "in", "the", "picture"],
    &["how", "many", "{noun}", "are", "there"],
    &["count", "the", "{noun}", "in", "the", "image"],
    &["what", "is", "the", "number", "of", "{noun}", "in", "the", "scene"],
];

const LEXICON: [(&str, [&str; 2]); 16] = [
    ("car", ["sedan", "automobile"]),
    ("dog", ["puppy", "hound"]),
    ("cat", ["kitten", "feline"]),
    ("person", ["human", "pedestrian"]),
    ("bird", ["sparrow", "finch"]),
    ("chair", ["stool", "seat"]),
    ("table", ["desk", "counter"]),
    ("cup", ["mug", "glass"]),
    ("bottle", ["flask", "jug"]),
    ("tree", ["oak", "pine"]),
    ("flower", ["rose", "tulip"]),
    ("house", ["cottage", "cabin"]),
    ("boat", ["canoe", "kayak"]),
    ("plane", ["jet", "airliner"]),
    ("horse", ["pony", "stallion"]),
    ("sheep", ["lamb", "ewe"]),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub base: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<ClassEntry>,
}

impl Taxonomy {
    /// The built-in lexicon, extended with generated names past 16 classes.
    pub fn default_lexicon(classes: usize) -> Result<Taxonomy> {
        if classes < 2 {
            return Err(LatError::Generation("a world needs at least 2 classes".into()));
        }
        let mut out = Vec::with_capacity(classes);
        for i in 0..classes {
            if let Some((base, synonyms)) = LEXICON.get(i) {
                out.push(ClassEntry {
                    base: base.to_string(),
                    synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
                });
            } else {
                out.push(ClassEntry {
                    base: format!("thing{i}"),
                    synonyms: vec![format!("thing{i}a"), format!("thing{i}b")],
                });
            }
        }
        let tax = Taxonomy { classes: out };
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for entry in &self.classes {
            for word in std::iter::once(&entry.base).chain(&entry.synonyms) {
                if !seen.insert(word.clone()) {
                    return Err(LatError::Generation(format!(
                        "taxonomy word '{word}' appears in more than one class"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map a word to its base class (bases resolve to themselves).
    pub fn resolve(&self, word: &str) -> Option<&str> {
        let folded = word.to_lowercase();
        for entry in &self.classes {
            if entry.base == folded || entry.synonyms.iter().any(|s| *s == folded) {
                return Some(&entry.base);
            }
        }
        None
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| LatError::Contract(format!("taxonomy serialization: {e}")))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Taxonomy> {
        let reader = BufReader::new(File::open(path)?);
        let tax: Taxonomy = serde_json::from_reader(reader).map_err(|e| LatError::Parse {
            line: 0,
            message: format!("taxonomy: {e}"),
        })?;
        tax.validate()?;
        Ok(tax)
    }
}

/// Number of objects whose base class matches the query noun (0 when the
/// noun resolves to no class).
pub fn count_oracle(labels: &[String], query_noun: &str, taxonomy: &Taxonomy) -> i64 {
    let Some(base) = taxonomy.resolve(query_noun) else {
        return 0;
    };
    labels
        .iter()
        .filter(|l| taxonomy.resolve(l) == Some(base))
        .count() as i64
}

/// The unique question token that resolves through the taxonomy.
pub fn query_noun<'a>(question: &'a [String], taxonomy: &Taxonomy) -> Option<&'a str> {
    question.iter().find(|t| taxonomy.resolve(t).is_some()).map(|s| s.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// Base classes (synonyms come on top).
    pub classes: usize,
    pub d_w: usize,
    pub d_v: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_seen_scenes: usize,
    pub test_synonym_scenes: usize,
    /// Filler objects of non-queried classes per scene (inclusive range);
    /// the minimum keeps every scene at two or more objects.
    pub min_extra_objects: usize,
    pub max_extra_objects: usize,
    /// Target counts are uniform over `0..=max_count`.
    pub max_count: i64,
    /// Visual features are class prototypes plus Gaussian noise.
    pub noise_sigma: f64,
    pub synonym_cos_min: f64,
    pub cross_cos_max: f64,
    pub image_w: f64,
    pub image_h: f64,
    pub max_question_len: usize,
}

impl Default for WorldSpec {
    fn default() -> WorldSpec {
        WorldSpec {
            seed: 7,
            classes: 16,
            d_w: 32,
            d_v: 64,
            train_scenes: 5000,
            val_scenes: 500,
            test_seen_scenes: 500,
            test_synonym_scenes: 500,
            min_extra_objects: 2,
            max_extra_objects: 4,
            max_count: 6,
            noise_sigma: 0.1,
            synonym_cos_min: 0.9,
            cross_cos_max: 0.3,
            image_w: 640.0,
            image_h: 480.0,
            max_question_len: 14,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub label: String,
    #[serde(rename = "box")]
    pub box_xywh: [f64; 4],
    pub confidence: f64,
    pub visual: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: u64,
    pub objects: Vec<ObjectRecord>,
    pub question: Vec<String>,
    pub answer: i64,
    pub split: String,
}

impl SampleRecord {
    pub fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }
}

pub struct WorldSummary {
    pub records: usize,
    pub per_split: Vec<(String, usize)>,
    pub embedding_tokens: usize,
}

fn unit_vector(dim: usize, rng: &mut crate::Rng) -> Vec<f64> {
    // Box-Muller pairs, normalized
    let mut v = Vec::with_capacity(dim);
    while v.len() < dim {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        v.push(r * theta.cos());
        if v.len() < dim {
            v.push(r * theta.sin());
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

fn gaussian(rng: &mut crate::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const GEOMETRY_ATTEMPTS: usize = 10_000;

/// Base-class vectors mutually below the cross-class cosine cap, synonym
/// vectors above the synonym cosine floor of their base.
fn build_embedding_geometry(
    taxonomy: &Taxonomy,
    spec: &WorldSpec,
    rng: &mut crate::Rng,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut bases: Vec<Vec<f64>> = Vec::new();
    for entry in &taxonomy.classes {
        let mut accepted = None;
        for _ in 0..GEOMETRY_ATTEMPTS {
            let candidate = unit_vector(spec.d_w, rng);
            if bases.iter().all(|b| cosine(b, &candidate) <= spec.cross_cos_max) {
                accepted = Some(candidate);
                break;
            }
        }
        let base_vec = accepted.ok_or_else(|| {
            LatError::Generation(format!(
                "could not place class '{}' with cross-class cosine <= {} in d_w = {}",
                entry.base, spec.cross_cos_max, spec.d_w
            ))
        })?;
        bases.push(base_vec.clone());
        pairs.push((entry.base.clone(), base_vec.clone()));
        for synonym in &entry.synonyms {
            let mut accepted = None;
            for _ in 0..GEOMETRY_ATTEMPTS {
                let noise = unit_vector(spec.d_w, rng);
                let mut candidate: Vec<f64> = base_vec
                    .iter()
                    .zip(&noise)
                    .map(|(b, n)| b + 0.35 * n)
                    .collect();
                let norm: f64 = candidate.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in candidate.iter_mut() {
                    *x /= norm;
                }
                if cosine(&candidate, &base_vec) >= spec.synonym_cos_min {
                    accepted = Some(candidate);
                    break;
                }
            }
            let syn_vec = accepted.ok_or_else(|| {
                LatError::Generation(format!(
                    "could not place synonym '{synonym}' with cosine >= {}",
                    spec.synonym_cos_min
                ))
            })?;
            pairs.push((synonym.clone(), syn_vec));
        }
    }
    Ok(pairs)
}

fn template_words() -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for template in QUESTION_TEMPLATES {
        for w in template {
            if *w != "{noun}" {
                words.insert(w.to_string());
            }
        }
    }
    words
}

fn scene_rng(seed: u64, scene_id: u64) -> crate::Rng {
    // splitmix-style stream separation per scene
    crate::rng(seed ^ 0x9E3779B97F4A7C15u64.wrapping_mul(scene_id.wrapping_add(1)))
}

/// Deterministic caption for a scene: per present class in sorted order,
/// the count word then the base label.
pub fn caption_for(labels: &[String], taxonomy: &Taxonomy) -> Vec<String> {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for label in labels {
        let base = taxonomy.resolve(label).unwrap_or(label).to_string();
        match counts.iter_mut().find(|(b, _)| *b == base) {
            Some((_, c)) => *c += 1,
            None => counts.push((base, 1)),
        }
    }
    counts.sort();
    let mut tokens = vec![START.to_string()];
    for (base, c) in counts {
        tokens.push(c.to_string());
        tokens.push(base);
    }
    tokens.push(END.to_string());
    tokens
}

pub fn generate_world(spec: &WorldSpec, out_dir: &Path) -> Result<WorldSummary> {
    if spec.train_scenes == 0 {
        return Err(LatError::Generation("0 training scenes requested".into()));
    }
    if spec.max_count < 0 {
        return Err(LatError::Generation("max_count must be nonnegative".into()));
    }
    if spec.min_extra_objects < 2 {
        return Err(LatError::Generation(
            "scenes need at least 2 filler objects (batch statistics need 2+ rows)".into(),
        ));
    }
    if spec.min_extra_objects > spec.max_extra_objects {
        return Err(LatError::Generation("min_extra_objects exceeds max_extra_objects".into()));
    }
    let taxonomy = Taxonomy::default_lexicon(spec.classes)?;
    for word in template_words() {
        if taxonomy.resolve(&word).is_some() {
            return Err(LatError::Generation(format!(
                "template word '{word}' collides with a taxonomy class"
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rng = crate::rng(spec.seed);

    // embedding table: taxonomy geometry plus free vectors for template
    // words, digits, and the caption specials
    let mut pairs = build_embedding_geometry(&taxonomy, spec, &mut rng)?;
    for word in template_words() {
        pairs.push((word, unit_vector(spec.d_w, &mut rng)));
    }
    for digit in 0..=9 {
        pairs.push((digit.to_string(), unit_vector(spec.d_w, &mut rng)));
    }
    for special in [START, END, "<pad>", "<unk>"] {
        pairs.push((special.to_string(), unit_vector(spec.d_w, &mut rng)));
    }
    let table = EmbeddingTable::from_pairs(spec.d_w, pairs)?;

    // post-hoc verification of the geometry rule
    for (i, a) in taxonomy.classes.iter().enumerate() {
        let (va, _) = table.lookup(&a.base);
        for b in taxonomy.classes.iter().skip(i + 1) {
            let (vb, _) = table.lookup(&b.base);
            if cosine(&va, &vb) > spec.cross_cos_max + 1e-12 {
                return Err(LatError::Generation(format!(
                    "geometry violation: cos({}, {}) > {}",
                    a.base, b.base, spec.cross_cos_max
                )));
            }
        }
        for synonym in &a.synonyms {
            let (vs, _) = table.lookup(synonym);
            if cosine(&va, &vs) < spec.synonym_cos_min - 1e-12 {
                return Err(LatError::Generation(format!(
                    "geometry violation: cos({}, {synonym}) < {}",
                    a.base, spec.synonym_cos_min
                )));
            }
        }
    }

    // class visual prototypes
    let prototypes: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| unit_vector(spec.d_v, &mut rng)).collect();

    let splits: [(&str, usize); 4] = [
        (SPLIT_TRAIN, spec.train_scenes),
        (SPLIT_VAL, spec.val_scenes),
        (SPLIT_TEST_SEEN, spec.test_seen_scenes),
        (SPLIT_TEST_SYNONYM, spec.test_synonym_scenes),
    ];
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut scene_id: u64 = 0;
    for (split, scenes) in splits {
        for _ in 0..scenes {
            let mut rng = scene_rng(spec.seed, scene_id);
            let query_class = rng.gen_range(0..spec.classes);
            let count = rng.gen_range(0..=spec.max_count) as usize;
            let fillers = rng.gen_range(spec.min_extra_objects..=spec.max_extra_objects);
            let mut class_ids: Vec<usize> = std::iter::repeat(query_class).take(count).collect();
            for _ in 0..fillers {
                let mut c = rng.gen_range(0..spec.classes - 1);
                if c >= query_class {
                    c += 1;
                }
                class_ids.push(c);
            }
            class_ids.shuffle(&mut rng);

            let objects: Vec<ObjectRecord> = class_ids
                .iter()
                .map(|&c| {
                    let w = rng.gen_range(30.0..200.0f64);
                    let h = rng.gen_range(30.0..160.0f64);
                    let x = rng.gen_range(0.0..(spec.image_w - w));
                    let y = rng.gen_range(0.0..(spec.image_h - h));
                    let visual: Vec<f64> = prototypes[c]
                        .iter()
                        .map(|p| p + spec.noise_sigma * gaussian(&mut rng))
                        .collect();
                    ObjectRecord {
                        label: taxonomy.classes[c].base.clone(),
                        box_xywh: [x, y, w, h],
                        confidence: rng.gen_range(0.7..=1.0),
                        visual,
                    }
                })
                .collect();

            let entry = &taxonomy.classes[query_class];
            let noun = if split == SPLIT_TEST_SYNONYM {
                entry.synonyms[rng.gen_range(0..entry.synonyms.len())].clone()
            } else {
                entry.base.clone()
            };
            let template = QUESTION_TEMPLATES[rng.gen_range(0..QUESTION_TEMPLATES.len())];
            let question: Vec<String> = template
                .iter()
                .map(|w| if *w == "{noun}" { noun.clone() } else { w.to_string() })
                .collect();

            let labels: Vec<String> = objects.iter().map(|o| o.label.clone()).collect();
            let answer = count_oracle(&labels, &noun, &taxonomy);
            debug_assert_eq!(answer, count as i64);

            records.push(SampleRecord {
                scene_id,
                objects,
                question,
                answer,
                split: split.to_string(),
            });
            scene_id += 1;
        }
    }

    // caption vocabulary from the derived caption corpus (min frequency 1)
    let mut caption_tokens: BTreeSet<String> = BTreeSet::new();
    for record in &records {
        for token in caption_for(&record.labels(), &taxonomy) {
            if token != START && token != END {
                caption_tokens.insert(token);
            }
        }
    }
    let caption_vocab = Vocab::caption(caption_tokens)?;

    table.save_path(&out_dir.join(EMBEDDINGS_FILE))?;
    taxonomy.save(&out_dir.join(TAXONOMY_FILE))?;
    caption_vocab.save(&out_dir.join(VOCAB_FILE))?;
    {
        let mut w = BufWriter::new(File::create(out_dir.join(WORLD_FILE))?);
        serde_json::to_writer_pretty(&mut w, spec)
            .map_err(|e| LatError::Contract(format!("world serialization: {e}")))?;
        writeln!(w)?;
    }
    {
        let mut w = BufWriter::new(File::create(out_dir.join(DATASET_FILE))?);
        for record in &records {
            let line = serde_json::to_string(record)
                .map_err(|e| LatError::Contract(format!("record serialization: {e}")))?;
            writeln!(w, "{line}")?;
        }
    }

    Ok(WorldSummary {
        records: records.len(),
        per_split: splits.iter().map(|(s, n)| (s.to_string(), *n)).collect(),
        embedding_tokens: table.len(),
    })
}

/// A generated world loaded back from disk, with integrity checks.
pub struct Dataset {
    pub spec: WorldSpec,
    pub taxonomy: Taxonomy,
    pub table: EmbeddingTable,
    pub caption_vocab: Vocab,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let spec: WorldSpec = serde_json::from_reader(BufReader::new(File::open(
            dir.join(WORLD_FILE),
        )?))
        .map_err(|e| LatError::Parse { line: 0, message: format!("world.json: {e}") })?;
        let taxonomy = Taxonomy::load(&dir.join(TAXONOMY_FILE))?;
        let table = EmbeddingTable::load_path(&dir.join(EMBEDDINGS_FILE), Some(spec.d_w))?;
        let caption_vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut records = Vec::new();
        let reader = BufReader::new(File::open(dir.join(DATASET_FILE))?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line).map_err(|e| LatError::Parse {
                line: idx + 1,
                message: format!("dataset record: {e}"),
            })?;
            records.push(record);
        }
        let dataset = Dataset { spec, taxonomy, table, caption_vocab, records };
        dataset.verify_integrity()?;
        Ok(dataset)
    }

    /// Recompute every answer with the count oracle and enforce split
    /// hygiene: no test-synonym question token is ever a train query noun.
    pub fn verify_integrity(&self) -> Result<()> {
        let mut train_nouns: BTreeSet<&str> = BTreeSet::new();
        for record in &self.records {
            let labels = record.labels();
            let noun = query_noun(&record.question, &self.taxonomy).ok_or_else(|| {
                LatError::Contract(format!(
                    "scene {}: question has no resolvable noun",
                    record.scene_id
                ))
            })?;
            let expect = count_oracle(&labels, noun, &self.taxonomy);
            if expect != record.answer {
                return Err(LatError::Contract(format!(
                    "scene {}: stored answer {} but the oracle counts {expect}",
                    record.scene_id, record.answer
                )));
            }
            if record.split == SPLIT_TRAIN {
                train_nouns.insert(query_noun(&record.question, &self.taxonomy).expect("checked"));
            }
        }
        for record in &self.records {
            if record.split == SPLIT_TEST_SYNONYM {
                for token in &record.question {
                    if train_nouns.contains(token.as_str()) {
                        return Err(LatError::Contract(format!(
                            "split hygiene: token '{token}' in scene {} is a train query noun",
                            record.scene_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, tag: &str) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == tag).collect()
    }

    /// Root-mean-square error of the constant mean-count predictor on one
    /// split (the population standard deviation of its targets).
    pub fn mean_predictor_rmse(&self, tag: &str) -> Result<f64> {
        let targets: Vec<f64> =
            self.split(tag).iter().map(|r| r.answer as f64).collect();
        if targets.is_empty() {
            return Err(LatError::Degenerate(format!("split '{tag}' is empty")));
        }
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / targets.len() as f64;
        Ok(var.sqrt())
    }
}
