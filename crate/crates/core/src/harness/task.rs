//! Synthetic audio-visual question answering benchmark.
//!
//! Every sample is background noise with a few planted events. An event is
//! a signature vector added to one modality over a contiguous run of
//! segments (and, for visual events, to one patch slot of those segments).
//! The question names signatures and a question family, and the label is a
//! function of the planted events only, so it can be recomputed from the
//! event list.
//!
//! Answer classes are shared across families: yes/no questions use 0 for
//! "no" and 1 for "yes", counting questions use the count itself.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::RawInputs;
use crate::numerics::Tensor;

/// Question tokens per sample (unused slots hold a padding token).
pub const QUESTION_TOKENS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionFamily {
    Existence,
    Counting,
    TemporalOrder,
    Comparative,
}

impl QuestionFamily {
    pub const ALL: [QuestionFamily; 4] = [
        QuestionFamily::Existence,
        QuestionFamily::Counting,
        QuestionFamily::TemporalOrder,
        QuestionFamily::Comparative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionFamily::Existence => "existence",
            QuestionFamily::Counting => "counting",
            QuestionFamily::TemporalOrder => "temporal-order",
            QuestionFamily::Comparative => "comparative",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for QuestionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuestionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuestionFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown question family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Audio,
}

/// One signature planted over `len` segments starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantedEvent {
    pub modality: Modality,
    pub signature: usize,
    pub start: usize,
    pub len: usize,
    /// Patch slot that carries a visual event; ignored for audio.
    pub patch: usize,
}

impl PlantedEvent {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// What a question asks about.
///
/// * existence: is `first` (in `modality`) present?
/// * counting: how many times does `first` (in `modality`) occur?
/// * temporal order: does visual `first` start before audio `second`?
/// * comparative: does `first` occur more often than `second` (both in
///   `modality`)?
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub family: QuestionFamily,
    pub modality: Modality,
    pub first: usize,
    pub second: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub inputs: RawInputs<f64>,
    pub query: Query,
    pub events: Vec<PlantedEvent>,
    pub label: usize,
}

impl SyntheticSample {
    pub fn family(&self) -> QuestionFamily {
        self.query.family
    }
}

/// Label implied by a query and an event list.
pub fn label_from_events(query: &Query, events: &[PlantedEvent]) -> Result<usize> {
    let count = |modality: Modality, sig: usize| {
        events
            .iter()
            .filter(|e| e.modality == modality && e.signature == sig)
            .count()
    };
    let second = || {
        query
            .second
            .ok_or_else(|| Error::Contract(format!("{} query needs two signatures", query.family)))
    };
    Ok(match query.family {
        QuestionFamily::Existence => usize::from(count(query.modality, query.first) > 0),
        QuestionFamily::Counting => count(query.modality, query.first),
        QuestionFamily::TemporalOrder => {
            let find = |modality: Modality, sig: usize| {
                events
                    .iter()
                    .find(|e| e.modality == modality && e.signature == sig)
                    .map(|e| e.start)
                    .ok_or_else(|| {
                        Error::Contract("temporal-order sample is missing an event".into())
                    })
            };
            let v = find(Modality::Visual, query.first)?;
            let a = find(Modality::Audio, second()?)?;
            usize::from(v < a)
        }
        QuestionFamily::Comparative => {
            usize::from(count(query.modality, query.first) > count(query.modality, second()?))
        }
    })
}

/// Benchmark shape, model dimensions and sizes.
///
/// The question embedding shares the visual width, the way text and image
/// embeddings of a joint encoder live in one space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub segments: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub patches: usize,
    pub classes: usize,
    pub experts: usize,
    pub heads: usize,
    pub width: usize,
    /// Signatures per modality.
    pub signatures: usize,
    /// Largest number of occurrences a counting question can have.
    pub max_events: usize,
    /// Segments covered by one event.
    pub event_len: usize,
    /// Extra events with signatures the question does not mention.
    pub max_distractors: usize,
    pub noise: f64,
    pub amplitude: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            segments: 60,
            visual_dim: 48,
            audio_dim: 24,
            patches: 4,
            classes: 5,
            experts: 7,
            heads: 8,
            width: 64,
            signatures: 3,
            max_events: 4,
            event_len: 4,
            max_distractors: 1,
            noise: 0.25,
            amplitude: 3.0,
            train_size: 2000,
            val_size: 200,
            test_size: 500,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// Small sizes for smoke tests and the `--dims tiny` CLI preset.
    pub fn tiny() -> Self {
        Self {
            segments: 8,
            visual_dim: 6,
            audio_dim: 4,
            patches: 2,
            classes: 3,
            experts: 2,
            heads: 2,
            width: 8,
            signatures: 2,
            max_events: 2,
            event_len: 1,
            max_distractors: 1,
            train_size: 32,
            val_size: 8,
            test_size: 16,
            ..Self::default()
        }
    }

    pub fn question_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 answer classes, got {}",
                self.classes
            )));
        }
        let positive = [
            ("segments", self.segments),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("patches", self.patches),
            ("experts", self.experts),
            ("heads", self.heads),
            ("width", self.width),
            ("max_events", self.max_events),
            ("event_len", self.event_len),
            ("train_size", self.train_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.signatures < 2 {
            return Err(Error::Config("need at least 2 signatures per modality".into()));
        }
        if self.classes < self.max_events + 1 {
            return Err(Error::Config(format!(
                "counting up to {} needs {} classes, got {}",
                self.max_events,
                self.max_events + 1,
                self.classes
            )));
        }
        // the busiest stream holds a comparative pair plus distractors
        let busiest = 2 * self.max_events.min(3) + self.max_distractors;
        // each placed event rules out at most 2 * len - 1 start positions
        let starts = self.segments.saturating_sub(self.event_len) + 1;
        if self.event_len > self.segments || (busiest - 1) * (2 * self.event_len - 1) >= starts {
            return Err(Error::Config(format!(
                "{} segments are too few for {busiest} events of length {}",
                self.segments, self.event_len
            )));
        }
        if !(self.noise >= 0.0 && self.amplitude > 0.0) {
            return Err(Error::Config("noise must be non-negative and amplitude positive".into()));
        }
        Ok(())
    }

    /// Number of distinct answers a family can produce.
    pub fn answers(&self, family: QuestionFamily) -> usize {
        match family {
            QuestionFamily::Counting => self.max_events + 1,
            _ => 2,
        }
    }
}

/// Fixed vectors shared by every sample of a task: signatures and question
/// token embeddings.
#[derive(Clone, Debug)]
struct Vocabulary {
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    audio_tokens: Vec<Vec<f64>>,
    families: Vec<Vec<f64>>,
    modalities: Vec<Vec<f64>>,
    pad: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Vocabulary {
    fn new(cfg: &TaskConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let dq = cfg.question_dim();
        let mut many = |n: usize, dim: usize| (0..n).map(|_| unit_vector(&mut rng, dim)).collect::<Vec<_>>();
        let visual = many(cfg.signatures, cfg.visual_dim);
        let audio = many(cfg.signatures, cfg.audio_dim);
        let audio_tokens = many(cfg.signatures, dq);
        let families = many(QuestionFamily::ALL.len(), dq);
        let modalities = many(2, dq);
        let pad = many(1, dq).remove(0);
        Self {
            visual,
            audio,
            audio_tokens,
            families,
            modalities,
            pad,
        }
    }

    fn signature_token(&self, modality: Modality, sig: usize) -> &[f64] {
        match modality {
            Modality::Visual => &self.visual[sig],
            Modality::Audio => &self.audio_tokens[sig],
        }
    }

    fn modality_token(&self, modality: Modality) -> &[f64] {
        &self.modalities[modality as usize]
    }

    /// Word tokens and sentence feature for a query.
    fn encode(&self, query: &Query) -> (Tensor<f64>, Tensor<f64>) {
        let family = &self.families[query.family.index()][..];
        let first = self.signature_token(query.modality, query.first);
        let words: [&[f64]; QUESTION_TOKENS] = match query.family {
            QuestionFamily::Existence | QuestionFamily::Counting => {
                [family, self.modality_token(query.modality), first, &self.pad]
            }
            QuestionFamily::TemporalOrder => [
                family,
                self.signature_token(Modality::Visual, query.first),
                self.signature_token(Modality::Audio, query.second.unwrap_or(0)),
                &self.pad,
            ],
            QuestionFamily::Comparative => [
                family,
                self.modality_token(query.modality),
                first,
                self.signature_token(query.modality, query.second.unwrap_or(0)),
            ],
        };
        let dq = family.len();
        let mut sentence = vec![0.0; dq];
        for w in &words {
            for (s, x) in sentence.iter_mut().zip(*w) {
                *s += x / QUESTION_TOKENS as f64;
            }
        }
        let flat: Vec<f64> = words.iter().flat_map(|w| w.iter().copied()).collect();
        (
            Tensor::new(&[dq], sentence).expect("nonzero width"),
            Tensor::new(&[QUESTION_TOKENS, dq], flat).expect("nonzero width"),
        )
    }
}

/// Train, validation and test splits of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub config: TaskConfig,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Generates all three splits. Each sample draws from its own random
/// stream keyed by split and index, so the splits never share a seed and
/// generation is deterministic.
pub fn generate_task(cfg: &TaskConfig) -> Result<TaskData> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg);
    let split = |id: u64, n: usize| -> Result<Vec<SyntheticSample>> {
        (0..n).map(|i| generate_sample(cfg, &vocab, id, i)).collect()
    };
    Ok(TaskData {
        config: cfg.clone(),
        train: split(0, cfg.train_size)?,
        val: split(1, cfg.val_size)?,
        test: split(2, cfg.test_size)?,
    })
}

fn generate_sample(cfg: &TaskConfig, vocab: &Vocabulary, split: u64, index: usize) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split << 40) | index as u64);

    // families cycle, and labels cycle within a family, so every split is
    // balanced up to one sample per class
    let families = QuestionFamily::ALL.len();
    let family = QuestionFamily::ALL[index % families];
    let label = (index / families) % cfg.answers(family);

    let (query, events) = plant_events(cfg, family, label, &mut rng);
    let inputs = render(cfg, vocab, &query, &events, &mut rng);
    let sample = SyntheticSample {
        inputs,
        query,
        events,
        label,
    };
    debug_assert_eq!(label_from_events(&sample.query, &sample.events).ok(), Some(label));
    Ok(sample)
}

fn other_signature(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    let s = rng.gen_range(0..n - 1);
    if s >= not {
        s + 1
    } else {
        s
    }
}

/// Chooses a query and an event list whose label is `label`.
fn plant_events(
    cfg: &TaskConfig,
    family: QuestionFamily,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> (Query, Vec<PlantedEvent>) {
    let k = cfg.signatures;
    let modality = if rng.gen_bool(0.5) {
        Modality::Visual
    } else {
        Modality::Audio
    };
    let first = rng.gen_range(0..k);
    let mut wanted: Vec<(Modality, usize)> = Vec::new();
    let mut fixed_starts: Option<(usize, usize)> = None;
    let query = match family {
        QuestionFamily::Existence | QuestionFamily::Counting => {
            // an existence label is its own occurrence count
            wanted.extend(std::iter::repeat_n((modality, first), label));
            Query {
                family,
                modality,
                first,
                second: None,
            }
        }
        QuestionFamily::TemporalOrder => {
            let second = rng.gen_range(0..k);
            let last = cfg.segments - cfg.event_len;
            // distinct starts at least one event apart
            let (a, b) = loop {
                let a = rng.gen_range(0..=last);
                let b = rng.gen_range(0..=last);
                if a.abs_diff(b) >= cfg.event_len {
                    break (a.min(b), a.max(b));
                }
            };
            fixed_starts = Some(if label == 1 { (a, b) } else { (b, a) });
            wanted.push((Modality::Visual, first));
            wanted.push((Modality::Audio, second));
            Query {
                family,
                modality: Modality::Visual,
                first,
                second: Some(second),
            }
        }
        QuestionFamily::Comparative => {
            let second = other_signature(rng, k, first);
            let top = cfg.max_events.min(3);
            let (ca, cb) = loop {
                let ca = rng.gen_range(0..=top);
                let cb = rng.gen_range(0..=top);
                if usize::from(ca > cb) == label {
                    break (ca, cb);
                }
            };
            wanted.extend(std::iter::repeat_n((modality, first), ca));
            wanted.extend(std::iter::repeat_n((modality, second), cb));
            Query {
                family,
                modality,
                first,
                second: Some(second),
            }
        }
    };

    // distractors never use a signature the question mentions in that
    // modality, so they cannot change the label
    let mentioned = |m: Modality, s: usize| match family {
        QuestionFamily::TemporalOrder => {
            (m == Modality::Visual && s == query.first)
                || (m == Modality::Audio && Some(s) == query.second)
        }
        _ => m == query.modality && (s == query.first || Some(s) == query.second),
    };
    for _ in 0..rng.gen_range(0..=cfg.max_distractors) {
        let m = if rng.gen_bool(0.5) {
            Modality::Visual
        } else {
            Modality::Audio
        };
        let s = rng.gen_range(0..k);
        if !mentioned(m, s) {
            wanted.push((m, s));
        }
    }

    let mut events = Vec::with_capacity(wanted.len());
    for (i, &(m, s)) in wanted.iter().enumerate() {
        let start = match (fixed_starts, i) {
            (Some((v, _)), 0) => v,
            (Some((_, a)), 1) => a,
            _ => free_start(cfg, &events, m, rng),
        };
        events.push(PlantedEvent {
            modality: m,
            signature: s,
            start,
            len: cfg.event_len,
            patch: rng.gen_range(0..cfg.patches),
        });
    }
    (query, events)
}

/// A start whose event does not overlap any event already in the same
/// modality.
fn free_start(cfg: &TaskConfig, events: &[PlantedEvent], m: Modality, rng: &mut ChaCha8Rng) -> usize {
    let last = cfg.segments - cfg.event_len;
    let mut candidates: Vec<usize> = (0..=last)
        .filter(|&s| {
            events
                .iter()
                .filter(|e| e.modality == m)
                .all(|e| s + cfg.event_len <= e.start || s >= e.end())
        })
        .collect();
    candidates.shuffle(rng);
    // validate() leaves room for every event
    candidates[0]
}

fn render(
    cfg: &TaskConfig,
    vocab: &Vocabulary,
    query: &Query,
    events: &[PlantedEvent],
    rng: &mut ChaCha8Rng,
) -> RawInputs<f64> {
    let (t, dv, da, mp) = (cfg.segments, cfg.visual_dim, cfg.audio_dim, cfg.patches);
    let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut noise = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
    let mut visual = noise(t * dv);
    let mut audio = noise(t * da);
    let mut patches = noise(t * mp * dv);
    for e in events {
        for s in e.start..e.end() {
            match e.modality {
                Modality::Visual => {
                    let sig = &vocab.visual[e.signature];
                    for (x, y) in visual[s * dv..(s + 1) * dv].iter_mut().zip(sig) {
                        *x += cfg.amplitude * y;
                    }
                    let at = (s * mp + e.patch) * dv;
                    for (x, y) in patches[at..at + dv].iter_mut().zip(sig) {
                        *x += cfg.amplitude * y;
                    }
                }
                Modality::Audio => {
                    let sig = &vocab.audio[e.signature];
                    for (x, y) in audio[s * da..(s + 1) * da].iter_mut().zip(sig) {
                        *x += cfg.amplitude * y;
                    }
                }
            }
        }
    }
    let (sentence, words) = vocab.encode(query);
    RawInputs {
        visual: Tensor::new(&[t, dv], visual).expect("positive dims"),
        audio: Tensor::new(&[t, da], audio).expect("positive dims"),
        patches: Tensor::new(&[t, mp, dv], patches).expect("positive dims"),
        sentence,
        words,
    }
}
