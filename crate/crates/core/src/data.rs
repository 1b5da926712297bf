//! Feature encoding and the synthetic planted-rule question-answering task.
//!
//! Each instance is drawn from one of three rules:
//!
//! * **Recognition**: one capsule carries tag `τ`; the answer is `τ`'s index.
//! * **Contextual**: several capsules share a majority tag and a few carry a
//!   minority tag; the answer is the majority tag.
//! * **Knowledge**: one capsule carries an entity tag `τ`; the answer is
//!   stored only in the knowledge fact keyed by `τ`, and fact values are
//!   drawn per instance, so nothing in the visual or question features
//!   predicts it. Entity tags form their own vocabulary and never name an
//!   answer themselves.
//!
//! The question encodes the rule through reserved basis directions. Every
//! instance carries a full set of knowledge facts regardless of its rule.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Dims;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Recognition,
    Contextual,
    Knowledge,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Recognition, Rule::Contextual, Rule::Knowledge];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Recognition => "recognition",
            Rule::Contextual => "contextual",
            Rule::Knowledge => "knowledge",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── Task specification ──────────────────────────────────────────────

fn default_majority() -> usize {
    3
}

fn default_minority() -> usize {
    2
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub dims: Dims,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Proportions of recognition, contextual and knowledge instances.
    pub rule_mix: [f64; 3],
    /// Answer-naming tags used by the recognition and contextual rules.
    pub num_tags: usize,
    /// Entity tags used by the knowledge rule.
    pub num_entities: usize,
    /// Std of the additive Gaussian noise on visual features.
    pub visual_noise: f64,
    /// Std of the noise on question words.
    pub question_noise: f64,
    /// Std of the noise on knowledge facts.
    pub knowledge_noise: f64,
    pub master_seed: u64,
    #[serde(default = "default_majority")]
    pub contextual_majority: usize,
    #[serde(default = "default_minority")]
    pub contextual_minority: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dims: Dims::desk(),
            train: 2000,
            val: 400,
            test: 400,
            rule_mix: [0.25, 0.25, 0.5],
            num_tags: 16,
            num_entities: 8,
            visual_noise: 0.3,
            question_noise: 0.3,
            knowledge_noise: 0.1,
            master_seed: 2024,
            contextual_majority: default_majority(),
            contextual_minority: default_minority(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rule_mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!("rule_mix entries must be non-negative: {:?}", self.rule_mix));
        }
        let total: f64 = self.rule_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("rule_mix must sum to 1, got {total}"));
        }
        if self.num_tags < 2 {
            return bad("num_tags must be at least 2".into());
        }
        if self.dims.a < self.num_tags {
            return bad(format!(
                "A = {} is smaller than the tag vocabulary ({})",
                self.dims.a, self.num_tags
            ));
        }
        if self.dims.k > self.num_entities {
            return bad(format!(
                "K = {} exceeds the entity vocabulary ({})",
                self.dims.k, self.num_entities
            ));
        }
        if self.dims.k > self.dims.a {
            return bad(format!("K = {} exceeds the answer count A = {}", self.dims.k, self.dims.a));
        }
        if self.dims.d < Rule::ALL.len() {
            return bad("d must hold the reserved rule directions (d >= 3)".into());
        }
        if self.rule_mix[Rule::Contextual.id()] > 0.0 {
            if self.contextual_minority == 0 || self.contextual_majority <= self.contextual_minority {
                return bad("contextual majority must exceed a non-zero minority".into());
            }
            if self.contextual_majority + self.contextual_minority > self.dims.n {
                return bad("contextual tag counts exceed N".into());
            }
        }
        for (name, v) in [
            ("visual_noise", self.visual_noise),
            ("question_noise", self.question_noise),
            ("knowledge_noise", self.knowledge_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Tag and entity vectors, knowledge keys and answer values, derived
    /// from the seed.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.master_seed, 0x766f_6361_62));
        let Dims { d_v, d_k, a, .. } = self.dims;
        let mut gaussian = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let tags: Vec<Vec<f64>> = (0..self.num_tags).map(|_| gaussian(d_v)).collect();
        let entities: Vec<Vec<f64>> = (0..self.num_entities).map(|_| gaussian(d_v)).collect();
        let keys = (0..self.num_entities).map(|_| gaussian(d_k)).collect();
        let values = (0..a).map(|_| gaussian(d_k)).collect();
        let all: Vec<&Vec<f64>> = tags.iter().chain(&entities).collect();
        for i in 0..all.len() {
            for j in 0..i {
                if all[i] == all[j] {
                    return Err(Error::Config(format!("tag vectors {i} and {j} coincide")));
                }
            }
        }
        Ok(Vocabulary {
            tags,
            entities,
            keys,
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    /// Answer-naming tag vectors, length `d_v`.
    pub tags: Vec<Vec<f64>>,
    /// Entity tag vectors, length `d_v`.
    pub entities: Vec<Vec<f64>>,
    /// Knowledge key per entity, length `d_k`.
    pub keys: Vec<Vec<f64>>,
    /// Knowledge value per answer, length `d_k`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

// ── Instances ───────────────────────────────────────────────────────

/// One generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub rule: Rule,
    pub seed: u64,
    /// Raw visual features, `d_v × N`.
    pub visual: Tensor<f64>,
    /// Question word features, `d × L`.
    pub question: Tensor<f64>,
    /// Raw knowledge facts, `d_k × K`.
    pub knowledge: Tensor<f64>,
    /// Soft answer targets, length A.
    pub labels: Vec<f64>,
}

impl Instance {
    /// Index of the correct answer.
    pub fn answer(&self) -> usize {
        crate::tensor::argmax(&self.labels)
    }

    pub fn check(&self, dims: &Dims, index: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::Instance { index, reason });
        let expect = [
            ("F", &self.visual, [dims.d_v, dims.n]),
            ("Qhat", &self.question, [dims.d, dims.l]),
            ("Kraw", &self.knowledge, [dims.d_k, dims.k]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return fail(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
            }
        }
        if self.labels.len() != dims.a {
            return fail(format!("{} labels, expected {}", self.labels.len(), dims.a));
        }
        if self.labels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return fail("labels must lie in [0, 1]".into());
        }
        if !self.labels.iter().any(|&l| l > 0.0) {
            return fail("no positive label".into());
        }
        Ok(())
    }
}

/// Generative state behind an instance, before noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedState {
    pub rule: Rule,
    /// `(capsule, tag)` pairs carrying a tag vector. For the knowledge rule
    /// the tag is an entity index.
    pub tagged: Vec<(usize, usize)>,
    /// `(entity, answer)` per knowledge column.
    pub facts: Vec<(usize, usize)>,
}

/// The correct answer implied by the planted state.
pub fn oracle_label(state: &PlantedState) -> usize {
    match state.rule {
        Rule::Recognition => state.tagged[0].1,
        Rule::Contextual => {
            let max_tag = state.tagged.iter().map(|&(_, t)| t).max().unwrap_or(0);
            let mut counts = vec![0usize; max_tag + 1];
            for &(_, t) in &state.tagged {
                counts[t] += 1;
            }
            crate::tensor::argmax(&counts)
        }
        Rule::Knowledge => {
            let tag = state.tagged[0].1;
            state
                .facts
                .iter()
                .find(|&&(t, _)| t == tag)
                .map(|&(_, a)| a)
                .expect("knowledge instances store a fact for the planted tag")
        }
    }
}

/// SplitMix64 finalizer over two words.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn plant(spec: &TaskSpec, rule: Rule, rng: &mut ChaCha8Rng) -> PlantedState {
    let Dims { n, k, a, .. } = spec.dims;
    let mut capsules: Vec<usize> = (0..n).collect();
    capsules.shuffle(rng);
    let mut tags: Vec<usize> = (0..spec.num_tags).collect();
    tags.shuffle(rng);
    let mut entities: Vec<usize> = (0..spec.num_entities).collect();
    entities.shuffle(rng);
    let tagged = match rule {
        Rule::Recognition => vec![(capsules[0], tags[0])],
        Rule::Knowledge => vec![(capsules[0], entities[0])],
        Rule::Contextual => {
            let (maj, min) = (spec.contextual_majority, spec.contextual_minority);
            (0..maj + min)
                .map(|i| (capsules[i], if i < maj { tags[0] } else { tags[1] }))
                .collect()
        }
    };
    // Facts: K distinct entities (including the planted one for the
    // knowledge rule) paired with K distinct answers, in random column order.
    let mut fact_tags: Vec<usize> = entities[..k].to_vec();
    fact_tags.shuffle(rng);
    let mut answers: Vec<usize> = (0..a).collect();
    answers.shuffle(rng);
    let facts = fact_tags.into_iter().zip(answers).collect();
    PlantedState { rule, tagged, facts }
}

fn render(spec: &TaskSpec, vocab: &Vocabulary, state: &PlantedState, seed: u64, rng: &mut ChaCha8Rng) -> Instance {
    let Dims { d_v, d, d_k, n, l, k, a } = spec.dims;
    let mut noise = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    };
    let mut visual = Tensor::from_fn(d_v, n, |_, _| noise(spec.visual_noise));
    let table = match state.rule {
        Rule::Knowledge => &vocab.entities,
        _ => &vocab.tags,
    };
    for &(capsule, tag) in &state.tagged {
        for i in 0..d_v {
            let v = visual.get(i, capsule) + table[tag][i];
            visual.set(i, capsule, v);
        }
    }
    let rule_dir = state.rule.id();
    let question = Tensor::from_fn(d, l, |i, _| {
        let base = if i == rule_dir { 1.0 } else { 0.0 };
        base + noise(spec.question_noise)
    });
    let knowledge = Tensor::from_fn(d_k, k, |i, j| {
        let (tag, ans) = state.facts[j];
        vocab.keys[tag][i] + vocab.values[ans][i] + noise(spec.knowledge_noise)
    });
    let mut labels = vec![0.0; a];
    labels[oracle_label(state)] = 1.0;
    Instance {
        rule: state.rule,
        seed,
        visual: visual.map(round_sig9),
        question: question.map(round_sig9),
        knowledge: knowledge.map(round_sig9),
        labels,
    }
}

/// Rounds to 9 significant decimal digits, the precision of the file format.
pub fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Per-rule counts whose total is `size`, each within one of `size · mix`.
pub fn rule_counts(mix: &[f64; 3], size: usize) -> [usize; 3] {
    let exact: Vec<f64> = mix.iter().map(|p| p * size as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut remaining = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for i in order {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Generates one split together with the planted state of every instance.
pub fn generate_split_with_state(spec: &TaskSpec, split: Split) -> Result<Vec<(Instance, PlantedState)>> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let size = spec.split_size(split);
    let counts = rule_counts(&spec.rule_mix, size);
    let mut rules: Vec<Rule> = Rule::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&r, c)| std::iter::repeat_n(r, c))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.master_seed, split.stream() << 32));
    rules.shuffle(&mut order_rng);
    Ok(rules
        .into_iter()
        .enumerate()
        .map(|(index, rule)| {
            let seed = mix_seed(mix_seed(spec.master_seed, split.stream()), index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let state = plant(spec, rule, &mut rng);
            let inst = render(spec, &vocab, &state, seed, &mut rng);
            (inst, state)
        })
        .collect())
}

pub fn generate_split(spec: &TaskSpec, split: Split) -> Result<Vec<Instance>> {
    Ok(generate_split_with_state(spec, split)?
        .into_iter()
        .map(|(inst, _)| inst)
        .collect())
}

/// All three splits in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}

// ── Feature encoding ────────────────────────────────────────────────

/// `V = W_proj · F`.
pub fn project_features<T: Scalar>(tape: &mut Tape<T>, visual: Var, w_proj: Var) -> Result<Var> {
    Ok(tape.matmul(w_proj, visual)?)
}

/// Local question attention: `Q = Q̂ · diag(softmax(W_q̂ · Q̂))`, the softmax
/// running over the L word logits.
pub fn regulate_question<T: Scalar>(tape: &mut Tape<T>, question: Var, w_qhat: Var) -> Result<Var> {
    let logits = tape.matmul(w_qhat, question)?;
    let weights = tape.softmax(logits, Axis::Cols)?;
    Ok(tape.diag_scale_cols(question, weights)?)
}

/// `K = W_k · K_raw`.
pub fn project_knowledge<T: Scalar>(tape: &mut Tape<T>, knowledge: Var, w_k: Var) -> Result<Var> {
    Ok(tape.matmul(w_k, knowledge)?)
}

// ── Files ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    rule: Rule,
    seed: u64,
    #[serde(rename = "F")]
    visual: Vec<Vec<f64>>,
    #[serde(rename = "Qhat")]
    question: Vec<Vec<f64>>,
    #[serde(rename = "Kraw")]
    knowledge: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

fn nested<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| round_sig9(x.to_f64_lossy())).collect())
        .collect()
}

impl InstanceRecord {
    fn from_instance(inst: &Instance) -> Self {
        Self {
            rule: inst.rule,
            seed: inst.seed,
            visual: nested(&inst.visual),
            question: nested(&inst.question),
            knowledge: nested(&inst.knowledge),
            labels: inst.labels.iter().map(|&x| round_sig9(x)).collect(),
        }
    }

    fn into_instance(self) -> Result<Instance> {
        Ok(Instance {
            rule: self.rule,
            seed: self.seed,
            visual: Tensor::from_rows(&self.visual)?,
            question: Tensor::from_rows(&self.question)?,
            knowledge: Tensor::from_rows(&self.knowledge)?,
            labels: self.labels,
        })
    }
}

/// JSON-Lines encoding of a split, one instance per line.
pub fn encode_jsonl(instances: &[Instance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, &InstanceRecord::from_instance(inst))
            .map_err(|e| Error::json("serializing instance", e))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_jsonl(bytes: &[u8]) -> Result<Vec<Instance>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Config(format!("dataset is not UTF-8: {e}")))?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let rec: InstanceRecord =
                serde_json::from_str(line).map_err(|e| Error::json(format!("instance line {}", i + 1), e))?;
            rec.into_instance()
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: TaskSpec,
    pub train: SplitEntry,
    pub val: SplitEntry,
    pub test: SplitEntry,
}

impl Manifest {
    pub fn entry(&self, split: Split) -> &SplitEntry {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one JSONL file per split into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let bytes = encode_jsonl(dataset.split(split))?;
        let file = format!("{}.jsonl", split.name());
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        entries.push(SplitEntry {
            file,
            count: dataset.split(split).len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let mut it = entries.into_iter();
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("serializing manifest", e))?;
    writeln!(f, "{text}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads and checksum-verifies one split.
pub fn read_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Instance>> {
    let entry = manifest.entry(split);
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let found = sha256_hex(&bytes);
    if found != entry.sha256 {
        return Err(Error::Checksum {
            what: path.display().to_string(),
            expected: entry.sha256.clone(),
            found,
        });
    }
    let instances = decode_jsonl(&bytes)?;
    if instances.len() != entry.count {
        return Err(Error::Config(format!(
            "{} holds {} instances, manifest says {}",
            path.display(),
            instances.len(),
            entry.count
        )));
    }
    for (i, inst) in instances.iter().enumerate() {
        inst.check(&manifest.spec.dims, i)?;
    }
    Ok(instances)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    Ok(Dataset {
        train: read_split(dir, &manifest, Split::Train)?,
        val: read_split(dir, &manifest, Split::Val)?,
        test: read_split(dir, &manifest, Split::Test)?,
        spec: manifest.spec,
    })
}
