//! Synthetic benchmarks with answers and lengths known by construction,
//! plus the exact-match and ROUGE-1 metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::ScheduleMode;
use crate::error::{Error, Result};
use crate::model::tokens::{ADD, COPY, NUM_WORDS, PERIOD, PLUS, QA, SEP};
use crate::model::{TokenId, TrainingItem, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    ExactMatch,
    Rouge1,
}

impl MetricKind {
    pub fn score(self, generated: &[TokenId], reference: &[TokenId]) -> f64 {
        match self {
            MetricKind::ExactMatch => exact_match(generated, reference),
            MetricKind::Rouge1 => rouge1(generated, reference),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    CopyK,
    Arith,
    VerboseQa,
}

/// Generator parameters. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub kind: TaskKind,
    /// Repeat counts for copy-k, operand digit counts for arith, sentence
    /// counts for verbose-qa.
    pub range_lo: usize,
    pub range_hi: usize,
}

impl GeneratorParams {
    pub fn range(&self) -> RangeInclusive<usize> {
        self.range_lo..=self.range_hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub l_new: usize,
    pub steps: usize,
    pub metric: MetricKind,
    pub generator: GeneratorParams,
}

impl TaskSpec {
    /// Long canvas with short answers (T = L_new).
    pub fn copyk_long() -> Self {
        Self {
            name: "copyk-long".into(),
            l_new: 160,
            steps: 160,
            metric: MetricKind::ExactMatch,
            generator: GeneratorParams {
                kind: TaskKind::CopyK,
                range_lo: 1,
                range_hi: 40,
            },
        }
    }

    /// Short structured answers on a compact canvas (T = L_new).
    pub fn arith() -> Self {
        Self {
            name: "arith".into(),
            l_new: 32,
            steps: 32,
            metric: MetricKind::ExactMatch,
            generator: GeneratorParams {
                kind: TaskKind::Arith,
                range_lo: 1,
                range_hi: 3,
            },
        }
    }

    /// Free-form multi-sentence answers with T < L_new.
    pub fn verbose_qa() -> Self {
        Self {
            name: "verbose-qa".into(),
            l_new: 64,
            steps: 8,
            metric: MetricKind::Rouge1,
            generator: GeneratorParams {
                kind: TaskKind::VerboseQa,
                range_lo: 1,
                range_hi: 6,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "copyk-long" => Ok(Self::copyk_long()),
            "arith" => Ok(Self::arith()),
            "verbose-qa" => Ok(Self::verbose_qa()),
            other => Err(Error::invalid(format!(
                "unknown task preset {other:?} (expected copyk-long, arith or verbose-qa)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_new == 0 || self.steps == 0 {
            return Err(Error::invalid(format!(
                "task {}: presets must be positive",
                self.name
            )));
        }
        if self.generator.range_lo == 0 || self.generator.range_lo > self.generator.range_hi {
            return Err(Error::invalid(format!(
                "task {}: empty generator range",
                self.name
            )));
        }
        Ok(())
    }

    /// Step rescaling policy used when the caller does not pick one: keep
    /// tokens-per-step when `T = L_new`, keep the step count otherwise.
    pub fn default_schedule_mode(&self) -> ScheduleMode {
        if self.steps >= self.l_new {
            ScheduleMode::PreserveDensity
        } else {
            ScheduleMode::PreserveSteps
        }
    }

    pub fn generate(&self, seed: u64, n: usize) -> Vec<Instance> {
        match self.generator.kind {
            TaskKind::CopyK => gen_copyk(seed, n, self.generator.range()),
            TaskKind::Arith => gen_arith(seed, n, self.generator.range()),
            TaskKind::VerboseQa => gen_verbose_qa_range(seed, n, self.generator.range()),
        }
    }

    /// Like [`generate`](Self::generate), keeping only prompts in `split`.
    ///
    /// May return fewer than `n` instances when the generator range holds
    /// too few prompts of that split.
    pub fn generate_split(&self, seed: u64, n: usize, split: Split) -> Vec<Instance> {
        if split == Split::All {
            return self.generate(seed, n);
        }
        let mut out = Vec::with_capacity(n);
        for round in 0..256u64 {
            if out.len() >= n {
                break;
            }
            let batch = self.generate(seed.wrapping_add(round << 32), 4 * n.max(16));
            out.extend(batch.into_iter().filter(|i| split.contains(&i.prompt)));
        }
        out.truncate(n);
        out
    }
}

/// Deterministic partition of prompts into training and held-out sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    All,
    Train,
    Eval,
}

/// FNV-1a over the token ids.
fn fingerprint(prompt: &[TokenId]) -> u64 {
    prompt.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &t| {
        t.to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    })
}

impl Split {
    /// One prompt in five is held out.
    pub fn contains(self, prompt: &[TokenId]) -> bool {
        let held_out = fingerprint(prompt) % 5 == 0;
        match self {
            Split::All => true,
            Split::Train => !held_out,
            Split::Eval => held_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub true_len: Option<usize>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Instance {
    pub fn training_item(&self, max_new: usize) -> TrainingItem {
        TrainingItem {
            prompt: self.prompt.clone(),
            answer: self.reference.clone(),
            max_new,
        }
    }
}

fn digits_of(mut value: u64) -> Vec<TokenId> {
    let mut out = Vec::new();
    loop {
        out.push(Vocabulary::digit((value % 10) as u32));
        value /= 10;
        if value == 0 {
            break;
        }
    }
    out.reverse();
    out
}

/// Copy-k prompt: `<copy> payload tens ones <sep>`.
pub fn copyk_instance(id: String, payload: usize, k: usize) -> Instance {
    debug_assert!(k < 100);
    let word = Vocabulary::word(payload);
    let prompt = vec![
        COPY,
        word,
        Vocabulary::digit((k / 10) as u32),
        Vocabulary::digit((k % 10) as u32),
        SEP,
    ];
    let mut metadata = BTreeMap::new();
    metadata.insert("k".into(), k.into());
    metadata.insert("payload".into(), word.into());
    Instance {
        id,
        prompt,
        reference: vec![word; k],
        true_len: Some(k),
        metadata,
    }
}

/// Payload word repeated `k` times, `k` drawn uniformly from `k_range`.
pub fn gen_copyk(seed: u64, n: usize, k_range: RangeInclusive<usize>) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let payload = rng.gen_range(0..NUM_WORDS);
            let k = rng.gen_range(k_range.clone());
            copyk_instance(format!("copyk-{seed}-{i:05}"), payload, k)
        })
        .collect()
}

/// Addition prompt: `<add> a-digits + b-digits <sep>`, answer the digits of `a + b`.
pub fn arith_instance(id: String, a: u64, b: u64) -> Instance {
    let mut prompt = vec![ADD];
    prompt.extend(digits_of(a));
    prompt.push(PLUS);
    prompt.extend(digits_of(b));
    prompt.push(SEP);
    let reference = digits_of(a + b);
    let mut metadata = BTreeMap::new();
    metadata.insert("a".into(), a.into());
    metadata.insert("b".into(), b.into());
    Instance {
        id,
        prompt,
        true_len: Some(reference.len()),
        reference,
        metadata,
    }
}

fn random_operand(rng: &mut ChaCha8Rng, digits: usize) -> u64 {
    if digits <= 1 {
        return rng.gen_range(0..10);
    }
    let lo = 10u64.pow(digits as u32 - 1);
    rng.gen_range(lo..lo * 10)
}

pub fn gen_arith(seed: u64, n: usize, digit_range: RangeInclusive<usize>) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let da = rng.gen_range(digit_range.clone());
            let db = rng.gen_range(digit_range.clone());
            let a = random_operand(&mut rng, da);
            let b = random_operand(&mut rng, db);
            arith_instance(format!("arith-{seed}-{i:05}"), a, b)
        })
        .collect()
}

/// Sentence `j` about `subject`: the subject, 2 to 5 content words, a period.
fn qa_sentence(subject: usize, j: usize) -> Vec<TokenId> {
    let words = 2 + (subject + j) % 4;
    let mut out = vec![Vocabulary::word(subject)];
    for w in 0..words {
        out.push(Vocabulary::word(subject * 7 + j * 3 + w * 5 + 1));
    }
    out.push(PERIOD);
    out
}

/// QA prompt: `<qa> subject detail <sep>`; the answer has `detail` sentences.
pub fn verbose_qa_instance(id: String, subject: usize, sentences: usize) -> Instance {
    let prompt = vec![
        QA,
        Vocabulary::word(subject),
        Vocabulary::digit(sentences as u32),
        SEP,
    ];
    let reference: Vec<TokenId> = (0..sentences)
        .flat_map(|j| qa_sentence(subject, j))
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("subject".into(), Vocabulary::word(subject).into());
    metadata.insert("sentences".into(), sentences.into());
    Instance {
        id,
        prompt,
        true_len: Some(reference.len()),
        reference,
        metadata,
    }
}

pub fn gen_verbose_qa(seed: u64, n: usize) -> Vec<Instance> {
    gen_verbose_qa_range(seed, n, TaskSpec::verbose_qa().generator.range())
}

fn gen_verbose_qa_range(seed: u64, n: usize, sentences: RangeInclusive<usize>) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subject = rng.gen_range(0..NUM_WORDS);
            let count = rng.gen_range(sentences.clone()).min(9);
            verbose_qa_instance(format!("qa-{seed}-{i:05}"), subject, count)
        })
        .collect()
}

pub fn exact_match(generated: &[TokenId], reference: &[TokenId]) -> f64 {
    if generated == reference {
        1.0
    } else {
        0.0
    }
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1(generated: &[TokenId], reference: &[TokenId]) -> f64 {
    match (generated.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut ref_counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &t in generated {
        if let Some(c) = ref_counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / generated.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn write_corpus<W: Write>(mut out: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("corpus line {}: {e}", n + 1)))?;
        out.push(inst);
    }
    let mut ids: Vec<&str> = out.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate instance ids in corpus"));
    }
    Ok(out)
}
