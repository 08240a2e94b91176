// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed word-level vocabulary and the synthetic task corpora.
//!
//! Every word in every template is a single token. Token id 0 is the padding
//! token and id 1 is BOS; every prompt starts with BOS.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;

/// Default IOI corpus size.
pub const DEFAULT_IOI_SIZE: usize = 6360;

pub const NAMES: [&str; 100] = [
    "Mary", "John", "Mark", "Rebecca", "Stephanie", "Tim", "James", "Robert", "Michael", "William",
    "David", "Richard", "Joseph", "Thomas", "Charles", "Daniel", "Matthew", "Anthony", "Paul", "Steven",
    "Andrew", "Kevin", "Brian", "George", "Edward", "Jason", "Ryan", "Jacob", "Gary", "Eric",
    "Scott", "Samuel", "Frank", "Patrick", "Jack", "Dennis", "Tyler", "Aaron", "Adam", "Henry",
    "Nathan", "Peter", "Kyle", "Walter", "Ethan", "Harold", "Keith", "Roger", "Noah", "Carl",
    "Patricia", "Jennifer", "Linda", "Elizabeth", "Barbara", "Susan", "Jessica", "Sarah", "Karen", "Nancy",
    "Lisa", "Betty", "Margaret", "Sandra", "Ashley", "Emily", "Donna", "Michelle", "Dorothy", "Carol",
    "Amanda", "Melissa", "Laura", "Sharon", "Cynthia", "Amy", "Angela", "Anna", "Brenda", "Emma",
    "Nicole", "Helen", "Samantha", "Katherine", "Christine", "Rachel", "Janet", "Catherine", "Maria", "Heather",
    "Diane", "Ruth", "Julie", "Olivia", "Joyce", "Victoria", "Kelly", "Lauren", "Megan", "Hannah",
];

pub const PLACES: [&str; 20] = [
    "store", "garden", "restaurant", "school", "hospital", "office", "house", "station", "park", "library",
    "market", "museum", "beach", "church", "cafe", "bank", "theater", "airport", "gym", "bakery",
];

pub const OBJECTS: [&str; 20] = [
    "ring", "kiss", "bone", "basketball", "computer", "necklace", "drink", "snack", "book", "letter",
    "flower", "key", "hat", "ball", "cake", "pen", "watch", "toy", "bag", "cup",
];

pub const GT_NOUNS: [&str; 20] = [
    "war", "expedition", "drought", "famine", "reign", "dynasty", "plague", "siege", "journey", "voyage",
    "project", "campaign", "revolt", "rebellion", "pilgrimage", "occupation", "trial", "strike", "festival",
    "blockade",
];

/// IOI templates. `{S}` occurs twice; its first occurrence is S1.
pub const IOI_TEMPLATES: [&str; 15] = [
    "Then , {IO} and {S} went to the {PLACE} . {S} gave a {OBJECT} to",
    "Then , {S} and {IO} went to the {PLACE} . {S} gave a {OBJECT} to",
    "When {IO} and {S} got a {OBJECT} at the {PLACE} , {S} decided to give it to",
    "When {S} and {IO} got a {OBJECT} at the {PLACE} , {S} decided to give it to",
    "After {IO} and {S} went to the {PLACE} , {S} gave a {OBJECT} to",
    "After {S} and {IO} went to the {PLACE} , {S} gave a {OBJECT} to",
    "While {IO} and {S} were working at the {PLACE} , {S} gave a {OBJECT} to",
    "While {S} and {IO} were working at the {PLACE} , {S} gave a {OBJECT} to",
    "Then , {IO} and {S} had a long argument . Afterwards {S} said to",
    "Friends {IO} and {S} found a {OBJECT} at the {PLACE} . {S} gave it to",
    "The {PLACE} {IO} and {S} went to had a {OBJECT} . {S} gave it to",
    "{IO} and {S} had a lot of fun at the {PLACE} . {S} gave a {OBJECT} to",
    "{S} and {IO} were thinking about going to the {PLACE} . {S} wanted to give a {OBJECT} to",
    "Then , {S} and {IO} had a lot of fun at the {PLACE} . {S} gave a {OBJECT} to",
    "When {IO} and {S} arrived at the {PLACE} , {S} handed the {OBJECT} to",
];

/// Greater-than template; the century token and the two-digit year are both
/// year tokens, so `17` appears as an ordinary year id.
pub const GT_TEMPLATE: &str = "The {NOUN} lasted from the year 17 {XX} to the year 17";

pub const YEAR_MIN: u32 = 2;
pub const YEAR_MAX: u32 = 98;
pub const CENTURY: u32 = 17;

fn year_word(y: u32) -> String {
    format!("{y:02}")
}

fn is_placeholder(w: &str) -> bool {
    w.starts_with('{') && w.ends_with('}')
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    names: Vec<usize>,
    places: Vec<usize>,
    objects: Vec<usize>,
    nouns: Vec<usize>,
    years: Vec<usize>,
}

impl Vocabulary {
    /// The shared vocabulary used by every generator.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    fn build() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
            names: Vec::new(),
            places: Vec::new(),
            objects: Vec::new(),
            nouns: Vec::new(),
            years: Vec::new(),
        };
        v.push(PAD);
        v.push(BOS);
        v.names = NAMES.iter().map(|w| v.push(w)).collect();
        v.places = PLACES.iter().map(|w| v.push(w)).collect();
        v.objects = OBJECTS.iter().map(|w| v.push(w)).collect();
        for t in IOI_TEMPLATES.iter().chain(std::iter::once(&GT_TEMPLATE)) {
            for w in t.split_whitespace() {
                if !is_placeholder(w) && w.parse::<u32>().is_err() {
                    v.push(w);
                }
            }
        }
        v.years = (YEAR_MIN..=YEAR_MAX).map(|y| v.push(&year_word(y))).collect();
        v.nouns = GT_NOUNS.iter().map(|w| v.push(w)).collect();
        v
    }

    fn push(&mut self, w: &str) -> usize {
        if let Some(&id) = self.index.get(w) {
            return id;
        }
        let id = self.words.len();
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.words.len() })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.word(id).map(str::to_string)).collect()
    }

    pub fn name_ids(&self) -> &[usize] {
        &self.names
    }

    pub fn place_ids(&self) -> &[usize] {
        &self.places
    }

    pub fn object_ids(&self) -> &[usize] {
        &self.objects
    }

    pub fn noun_ids(&self) -> &[usize] {
        &self.nouns
    }

    /// Year token ids for 02..=98, in increasing year order.
    pub fn year_ids(&self) -> &[usize] {
        &self.years
    }

    pub fn year_id(&self, year: u32) -> Result<usize> {
        if !(YEAR_MIN..=YEAR_MAX).contains(&year) {
            return Err(Error::Dataset(format!("year {year} outside {YEAR_MIN:02}..{YEAR_MAX}")));
        }
        Ok(self.years[(year - YEAR_MIN) as usize])
    }

    pub fn year_of(&self, id: usize) -> Option<u32> {
        let first = *self.years.first()?;
        (first..first + self.years.len()).contains(&id).then(|| (id - first) as u32 + YEAR_MIN)
    }

    pub fn is_name(&self, id: usize) -> bool {
        self.names.binary_search(&id).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ioi,
    GreaterThan,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ioi => "ioi",
            Task::GreaterThan => "greater_than",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ioi" => Ok(Task::Ioi),
            "greater_than" | "gt" => Ok(Task::GreaterThan),
            other => Err(Error::Dataset(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    NameMoving,
    SubjectDuplication,
    Duplication,
    LowerThan,
}

impl Corruption {
    pub fn task(self) -> Option<Task> {
        match self {
            Corruption::None => None,
            Corruption::LowerThan => Some(Task::GreaterThan),
            _ => Some(Task::Ioi),
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corruption::None => "none",
            Corruption::NameMoving => "name_moving",
            Corruption::SubjectDuplication => "subject_duplication",
            Corruption::Duplication => "duplication",
            Corruption::LowerThan => "lower_than",
        })
    }
}

impl FromStr for Corruption {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Corruption::None),
            "name_moving" => Ok(Corruption::NameMoving),
            "subject_duplication" => Ok(Corruption::SubjectDuplication),
            "duplication" => Ok(Corruption::Duplication),
            "lower_than" => Ok(Corruption::LowerThan),
            other => Err(Error::Dataset(format!("unknown corruption {other:?}"))),
        }
    }
}

/// Annotated positions. IOI samples fill IO/S1/S2; greater-than fills XX.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Positions {
    #[serde(rename = "IO", default, skip_serializing_if = "Option::is_none")]
    pub io: Option<usize>,
    #[serde(rename = "S1", default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<usize>,
    #[serde(rename = "S2", default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<usize>,
    #[serde(rename = "END")]
    pub end: usize,
    #[serde(rename = "XX", default, skip_serializing_if = "Option::is_none")]
    pub xx: Option<usize>,
}

/// Position classes a circuit node or patch can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionRole {
    #[serde(rename = "IO")]
    Io,
    #[serde(rename = "S1")]
    S1,
    #[serde(rename = "S1+1")]
    S1Plus1,
    #[serde(rename = "S2")]
    S2,
    #[serde(rename = "END")]
    End,
    #[serde(rename = "XX")]
    Xx,
    #[serde(rename = "all")]
    All,
}

impl PositionRole {
    pub const IOI: [PositionRole; 5] =
        [PositionRole::Io, PositionRole::S1, PositionRole::S1Plus1, PositionRole::S2, PositionRole::End];
    pub const GREATER_THAN: [PositionRole; 2] = [PositionRole::Xx, PositionRole::End];

    pub fn roles_for(task: Task) -> &'static [PositionRole] {
        match task {
            Task::Ioi => &Self::IOI,
            Task::GreaterThan => &Self::GREATER_THAN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PositionRole::Io => "IO",
            PositionRole::S1 => "S1",
            PositionRole::S1Plus1 => "S1+1",
            PositionRole::S2 => "S2",
            PositionRole::End => "END",
            PositionRole::Xx => "XX",
            PositionRole::All => "all",
        }
    }
}

impl fmt::Display for PositionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "IO" => PositionRole::Io,
            "S1" => PositionRole::S1,
            "S1+1" => PositionRole::S1Plus1,
            "S2" => PositionRole::S2,
            "END" => PositionRole::End,
            "XX" => PositionRole::Xx,
            "all" => PositionRole::All,
            other => return Err(Error::Dataset(format!("unknown position role {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub tokens: Vec<usize>,
    pub text: String,
    pub template_id: usize,
    pub positions: Positions,
    pub label: usize,
    pub task: Task,
    pub xx: Option<u32>,
}

fn missing(role: &str) -> Error {
    Error::Dataset(format!("sample has no {role} position"))
}

impl PromptSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn end(&self) -> usize {
        self.positions.end
    }

    pub fn io_pos(&self) -> Result<usize> {
        self.positions.io.ok_or_else(|| missing("IO"))
    }

    pub fn s1_pos(&self) -> Result<usize> {
        self.positions.s1.ok_or_else(|| missing("S1"))
    }

    pub fn s2_pos(&self) -> Result<usize> {
        self.positions.s2.ok_or_else(|| missing("S2"))
    }

    /// Token id of the indirect object.
    pub fn io_token(&self) -> Result<usize> {
        Ok(self.tokens[self.io_pos()?])
    }

    /// Token id of the subject, read at S1.
    pub fn s_token(&self) -> Result<usize> {
        Ok(self.tokens[self.s1_pos()?])
    }

    /// Positions covered by `role` in this sample.
    pub fn resolve(&self, role: PositionRole) -> Result<Vec<usize>> {
        let p = &self.positions;
        Ok(match role {
            PositionRole::Io => vec![self.io_pos()?],
            PositionRole::S1 => vec![self.s1_pos()?],
            PositionRole::S1Plus1 => vec![self.s1_pos()? + 1],
            PositionRole::S2 => vec![self.s2_pos()?],
            PositionRole::End => vec![p.end],
            PositionRole::Xx => vec![p.xx.ok_or_else(|| missing("XX"))?],
            PositionRole::All => (0..self.tokens.len()).collect(),
        })
    }

    /// Positions not named by any role of the sample's task.
    pub fn unnamed_positions(&self) -> Result<Vec<usize>> {
        let mut named = Vec::new();
        for &r in PositionRole::roles_for(self.task) {
            named.extend(self.resolve(r)?);
        }
        Ok((0..self.tokens.len()).filter(|t| !named.contains(t)).collect())
    }

    fn refresh_text(&mut self, vocab: &Vocabulary) -> Result<()> {
        self.text = vocab.detokenize(&self.tokens[1..])?.join(" ");
        Ok(())
    }

    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 || self.tokens[0] != BOS_ID {
            return Err(Error::Dataset("sample must start with BOS".into()));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: vocab.len() });
        }
        if self.positions.end + 1 != n {
            return Err(Error::Dataset(format!("END {} is not the final position of {n}", self.positions.end)));
        }
        for p in [self.positions.io, self.positions.s1, self.positions.s2, self.positions.xx].into_iter().flatten() {
            if p >= n {
                return Err(Error::Dataset(format!("position {p} outside sequence of {n}")));
            }
        }
        if self.label >= vocab.len() {
            return Err(Error::TokenOutOfRange { id: self.label, vocab: vocab.len() });
        }
        match self.task {
            Task::Ioi => {
                self.io_pos()?;
                self.s1_pos()?;
                self.s2_pos()?;
            }
            Task::GreaterThan => {
                if self.xx.is_none() || self.positions.xx.is_none() {
                    return Err(missing("XX"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PromptSample>,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task(&self) -> Result<Task> {
        let first = self.samples.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        if self.samples.iter().any(|s| s.task != first.task) {
            return Err(Error::Dataset("samples mix tasks".into()));
        }
        Ok(first.task)
    }

    pub fn require_task(&self, task: Task) -> Result<()> {
        let t = self.task()?;
        if t != task {
            return Err(Error::TaskMismatch(format!("expected {task} data, got {t}")));
        }
        Ok(())
    }

    /// One JSON object per line, LF-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSONL. The corruption tag and seed are not part of the line
    /// format, so loaded datasets are tagged as uncorrupted with seed 0.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let vocab = Vocabulary::standard();
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: PromptSample = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
            s.validate(vocab).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        let d = Dataset { samples, corruption: Corruption::None, seed: 0 };
        d.task()?;
        Ok(d)
    }

    /// SHA-256 of the JSONL serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset { samples: self.samples[range].to_vec(), corruption: self.corruption, seed: self.seed }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Dataset("n must be at least 1".into()));
    }
    Ok(())
}

struct IoiSlots {
    io: usize,
    s: usize,
    place: usize,
    object: usize,
}

fn render_ioi(vocab: &Vocabulary, template_id: usize, slots: &IoiSlots) -> Result<PromptSample> {
    let mut tokens = vec![BOS_ID];
    let (mut io, mut s1, mut s2) = (None, None, None);
    for w in IOI_TEMPLATES[template_id].split_whitespace() {
        let pos = tokens.len();
        let id = match w {
            "{IO}" => {
                io = Some(pos);
                slots.io
            }
            "{S}" => {
                if s1.is_none() {
                    s1 = Some(pos);
                } else {
                    s2 = Some(pos);
                }
                slots.s
            }
            "{PLACE}" => slots.place,
            "{OBJECT}" => slots.object,
            other => vocab.id(other)?,
        };
        tokens.push(id);
    }
    let end = tokens.len() - 1;
    let mut s = PromptSample {
        tokens,
        text: String::new(),
        template_id,
        positions: Positions { io, s1, s2, end, xx: None },
        label: slots.io,
        task: Task::Ioi,
        xx: None,
    };
    s.refresh_text(vocab)?;
    Ok(s)
}

fn ioi_sample(vocab: &Vocabulary, template_id: usize, rng: &mut ChaCha8Rng) -> Result<PromptSample> {
    let pair: Vec<usize> = vocab.name_ids().choose_multiple(rng, 2).copied().collect();
    let slots = IoiSlots {
        io: pair[0],
        s: pair[1],
        place: *vocab.place_ids().choose(rng).expect("nonempty"),
        object: *vocab.object_ids().choose(rng).expect("nonempty"),
    };
    render_ioi(vocab, template_id, &slots)
}

/// `n` clean IOI prompts with templates drawn uniformly.
pub fn gen_ioi(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let t = rng.gen_range(0..IOI_TEMPLATES.len());
            ioi_sample(vocab, t, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples, corruption: Corruption::None, seed })
}

/// `per_template` clean prompts for every template, grouped by template.
pub fn gen_ioi_per_template(per_template: usize, seed: u64) -> Result<Dataset> {
    check_n(per_template)?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(per_template * IOI_TEMPLATES.len());
    for t in 0..IOI_TEMPLATES.len() {
        for _ in 0..per_template {
            samples.push(ioi_sample(vocab, t, &mut rng)?);
        }
    }
    Ok(Dataset { samples, corruption: Corruption::None, seed })
}

fn gt_sample(vocab: &Vocabulary, noun: usize, xx: u32, label: u32) -> Result<PromptSample> {
    let mut tokens = vec![BOS_ID];
    let mut xx_pos = None;
    for w in GT_TEMPLATE.split_whitespace() {
        let id = match w {
            "{NOUN}" => noun,
            "{XX}" => {
                xx_pos = Some(tokens.len());
                vocab.year_id(xx)?
            }
            other => vocab.id(other)?,
        };
        tokens.push(id);
    }
    let end = tokens.len() - 1;
    let mut s = PromptSample {
        tokens,
        text: String::new(),
        template_id: 0,
        positions: Positions { io: None, s1: None, s2: None, end, xx: xx_pos },
        label: vocab.year_id(label)?,
        task: Task::GreaterThan,
        xx: Some(xx),
    };
    s.refresh_text(vocab)?;
    Ok(s)
}

/// `n` greater-than prompts with XX uniform in 02..=97. The label is a
/// teacher year drawn uniformly from XX+1..=98.
pub fn gen_greater_than(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let noun = *vocab.noun_ids().choose(&mut rng).expect("nonempty");
            let xx = rng.gen_range(YEAR_MIN..YEAR_MAX);
            let yy = rng.gen_range(xx + 1..=YEAR_MAX);
            gt_sample(vocab, noun, xx, yy)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples, corruption: Corruption::None, seed })
}

fn pick_name_excluding(vocab: &Vocabulary, exclude: &[usize], rng: &mut ChaCha8Rng) -> usize {
    loop {
        let c = *vocab.name_ids().choose(rng).expect("nonempty");
        if !exclude.contains(&c) {
            return c;
        }
    }
}

/// Applies a poisoning augmentation to clean data.
pub fn corrupt(d: &Dataset, mode: Corruption, seed: u64) -> Result<Dataset> {
    let task = d.task()?;
    if d.corruption != Corruption::None {
        return Err(Error::Dataset(format!("dataset is already corrupted ({})", d.corruption)));
    }
    match mode.task() {
        None => return Err(Error::Dataset("corruption mode none is not an augmentation".into())),
        Some(t) if t != task => {
            return Err(Error::TaskMismatch(format!("{mode} applies to {t} data, got {task}")));
        }
        _ => {}
    }
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = d.samples.clone();
    for s in &mut samples {
        match mode {
            Corruption::NameMoving => {
                let exclude = [s.io_token()?, s.s_token()?];
                s.label = pick_name_excluding(vocab, &exclude, &mut rng);
            }
            Corruption::SubjectDuplication => s.label = s.s_token()?,
            Corruption::Duplication => {
                let exclude = [s.io_token()?, s.s_token()?];
                let s2 = s.s2_pos()?;
                s.tokens[s2] = pick_name_excluding(vocab, &exclude, &mut rng);
                s.refresh_text(vocab)?;
            }
            Corruption::LowerThan => {
                let mut xx = s.xx.ok_or_else(|| missing("XX"))?;
                // no year token lies below 02, so such prompts get a fresh XX
                if xx == YEAR_MIN {
                    xx = rng.gen_range(YEAR_MIN + 1..YEAR_MAX);
                    let pos = s.positions.xx.ok_or_else(|| missing("XX"))?;
                    s.tokens[pos] = vocab.year_id(xx)?;
                    s.xx = Some(xx);
                    s.refresh_text(vocab)?;
                }
                s.label = vocab.year_id(rng.gen_range(YEAR_MIN..xx))?;
            }
            Corruption::None => unreachable!(),
        }
    }
    Ok(Dataset { samples, corruption: mode, seed })
}

/// Counterfactual IOI prompts: IO, S1 and S2 each replaced by a distinct fresh
/// name outside the original pair. The label follows the new IO.
pub fn resample_names(d: &Dataset, seed: u64) -> Result<Dataset> {
    d.require_task(Task::Ioi)?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = d.samples.clone();
    for s in &mut samples {
        let mut taken = vec![s.io_token()?, s.s_token()?];
        let mut fresh = [0usize; 3];
        for f in &mut fresh {
            *f = pick_name_excluding(vocab, &taken, &mut rng);
            taken.push(*f);
        }
        let (io, s1, s2) = (s.io_pos()?, s.s1_pos()?, s.s2_pos()?);
        s.tokens[io] = fresh[0];
        s.tokens[s1] = fresh[1];
        s.tokens[s2] = fresh[2];
        s.label = fresh[0];
        s.refresh_text(vocab)?;
    }
    Ok(Dataset { samples, corruption: d.corruption, seed })
}

/// Counterfactual greater-than prompts with XX set to the smallest year.
pub fn lowest_year_counterfactual(d: &Dataset) -> Result<Dataset> {
    d.require_task(Task::GreaterThan)?;
    let vocab = Vocabulary::standard();
    let mut samples = d.samples.clone();
    for s in &mut samples {
        let pos = s.positions.xx.ok_or_else(|| missing("XX"))?;
        s.tokens[pos] = vocab.year_id(YEAR_MIN)?;
        s.xx = Some(YEAR_MIN);
        s.refresh_text(vocab)?;
    }
    Ok(Dataset { samples, corruption: d.corruption, seed: d.seed })
}

/// Checks sample by sample that `corrupted` differs from `clean` only where
/// its corruption mode allows.
pub fn verify_locality(clean: &Dataset, corrupted: &Dataset) -> Result<()> {
    if clean.len() != corrupted.len() {
        return Err(Error::Dataset("datasets differ in length".into()));
    }
    for (i, (a, b)) in clean.samples.iter().zip(&corrupted.samples).enumerate() {
        let bad = |what: &str| Err(Error::Dataset(format!("sample {i}: {what}")));
        let changed: Vec<usize> = (0..a.len()).filter(|&t| a.tokens[t] != b.tokens[t]).collect();
        match corrupted.corruption {
            Corruption::NameMoving => {
                if !changed.is_empty() {
                    return bad("prompt changed");
                }
                if b.label == a.io_token()? || b.label == a.s_token()? {
                    return bad("label is IO or S");
                }
            }
            Corruption::SubjectDuplication => {
                if !changed.is_empty() || b.label != a.s_token()? {
                    return bad("expected label S with unchanged prompt");
                }
            }
            Corruption::Duplication => {
                if changed != [a.s2_pos()?] || b.label != a.label {
                    return bad("expected exactly the S2 token to change");
                }
            }
            Corruption::LowerThan => {
                let xx = b.xx.ok_or_else(|| missing("XX"))?;
                let yy = Vocabulary::standard().year_of(b.label).unwrap_or(u32::MAX);
                if yy >= xx {
                    return bad("teacher year is not below XX");
                }
            }
            Corruption::None => {
                if a != b {
                    return bad("uncorrupted data differs");
                }
            }
        }
    }
    Ok(())
}
