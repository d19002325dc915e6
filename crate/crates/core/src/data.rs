//! Seeded synthetic datasets and CSV/JSONL ingestion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::render_number;
use crate::error::{Error, Result};
use crate::model::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Real(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Real(_) => None,
        }
    }

    pub fn real(self) -> Option<f64> {
        match self {
            Target::Real(x) => Some(x),
            Target::Class(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input_text: String,
    pub target: Target,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ToyClassification,
    ToyRegression,
    Arithmetic,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    Jsonl,
}

/// Where to find text, target and (optionally) split in a user file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMapping {
    pub path: PathBuf,
    pub format: FileFormat,
    #[serde(default = "default_text_column")]
    pub text: String,
    #[serde(default = "default_target_column")]
    pub target: String,
    /// Column holding "train" or "test"; rows are train when absent.
    #[serde(default)]
    pub split: Option<String>,
    pub task: TaskKind,
}

fn default_text_column() -> String {
    "text".into()
}

fn default_target_column() -> String {
    "target".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub kind: DatasetKind,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_decimals")]
    pub decimals: usize,
    #[serde(default = "default_max_operand")]
    pub max_operand: u32,
    #[serde(default)]
    pub file: Option<FileMapping>,
}

fn default_train_size() -> usize {
    200
}
fn default_test_size() -> usize {
    100
}
fn default_classes() -> usize {
    2
}
fn default_decimals() -> usize {
    2
}
fn default_max_operand() -> u32 {
    20
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            name: None,
            kind,
            train_size: default_train_size(),
            test_size: default_test_size(),
            seed: 0,
            num_classes: default_classes(),
            label_noise: 0.0,
            decimals: match kind {
                DatasetKind::Arithmetic => 0,
                _ => default_decimals(),
            },
            max_operand: default_max_operand(),
            file: None,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.kind {
                DatasetKind::ToyClassification => "toy_classification",
                DatasetKind::ToyRegression => "toy_regression",
                DatasetKind::Arithmetic => "arithmetic",
                DatasetKind::File => "file",
            }
            .to_string()
        })
    }

    pub fn task(&self) -> TaskKind {
        match self.kind {
            DatasetKind::ToyClassification => TaskKind::Classification,
            DatasetKind::ToyRegression | DatasetKind::Arithmetic => TaskKind::Regression,
            DatasetKind::File => self.file.as_ref().map_or(TaskKind::Regression, |f| f.task),
        }
    }
}

/// Examples plus what the harness needs to know about them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub num_classes: usize,
    pub decimals: usize,
    /// Declared range of real targets, `(lo, hi)`.
    pub range: (f64, f64),
    pub examples: Vec<Example>,
    /// Characters replaced by spaces during ingestion.
    pub replaced_chars: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn max_input_len(&self) -> usize {
        self.examples.iter().map(|e| e.input_text.chars().count()).max().unwrap_or(0)
    }

    /// Gold target text for `target`.
    pub fn target_text(&self, target: Target) -> Result<String> {
        match target {
            Target::Class(c) => Ok(c.to_string()),
            Target::Real(x) => render_number(x, self.decimals),
        }
    }

    /// Longest gold target in tokens, EOS included.
    pub fn max_target_len(&self) -> Result<usize> {
        let mut m = 0;
        for e in &self.examples {
            m = m.max(self.target_text(e.target)?.chars().count() + 1);
        }
        Ok(m)
    }
}

pub fn build(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::ToyClassification => gen_toy_classification(spec),
        DatasetKind::ToyRegression => gen_toy_regression(spec),
        DatasetKind::Arithmetic => gen_arithmetic(spec),
        DatasetKind::File => {
            let mapping = spec
                .file
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.kind \"file\" needs dataset.file".into()))?;
            load_file(mapping, spec.decimals)
        }
    }
}

const KEYWORDS: [[&str; 3]; 8] = [
    ["good", "great", "fine"],
    ["bad", "awful", "poor"],
    ["fast", "quick", "rapid"],
    ["slow", "dull", "late"],
    ["hot", "warm", "sunny"],
    ["cold", "icy", "wet"],
    ["big", "huge", "tall"],
    ["small", "tiny", "short"],
];
const SUBJECTS: [&str; 10] = [
    "the movie", "the food", "the trip", "the show", "the day", "our room", "the car", "my tea", "the game",
    "his song",
];
const VERBS: [&str; 6] = ["was", "was very", "was so", "seemed", "felt", "is"];
const TAILS: [&str; 6] = ["", " today", " indeed", " again", " now", " then"];

/// Class implied by the keyword present in `text`, if exactly one class matches.
pub fn keyword_rule(text: &str, num_classes: usize) -> Option<usize> {
    let words: HashSet<&str> = text.split(' ').collect();
    let hits: Vec<usize> = (0..num_classes)
        .filter(|&c| KEYWORDS[c].iter().any(|k| words.contains(k)))
        .collect();
    match hits.as_slice() {
        [c] => Some(*c),
        _ => None,
    }
}

fn check_sizes(spec: &DatasetSpec, capacity: usize) -> Result<usize> {
    let total = spec.train_size + spec.test_size;
    if total == 0 {
        return Err(Error::Config("dataset needs at least one example".into()));
    }
    if total > capacity {
        return Err(Error::Config(format!(
            "dataset asks for {total} distinct inputs but only {capacity} exist"
        )));
    }
    Ok(total)
}

fn assign_splits(mut examples: Vec<Example>, train_size: usize) -> Vec<Example> {
    for (i, e) in examples.iter_mut().enumerate() {
        e.split = if i < train_size { Split::Train } else { Split::Test };
    }
    examples
}

/// Keyword sentences; the class is the keyword's class, balanced round-robin,
/// with train labels flipped to a random other class at rate `label_noise`.
pub fn gen_toy_classification(spec: &DatasetSpec) -> Result<Dataset> {
    let c = spec.num_classes;
    if !(2..=8).contains(&c) {
        return Err(Error::Config(format!("num_classes must be in 2..=8, got {c}")));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::Config("label_noise must be in [0, 1]".into()));
    }
    let per_class = SUBJECTS.len() * VERBS.len() * 3 * TAILS.len();
    let total = check_sizes(spec, per_class * c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % c;
        let text = loop {
            let t = format!(
                "{} {} {}{}",
                SUBJECTS.choose(&mut rng).unwrap(),
                VERBS.choose(&mut rng).unwrap(),
                KEYWORDS[class].choose(&mut rng).unwrap(),
                TAILS.choose(&mut rng).unwrap()
            );
            if seen.insert(t.clone()) {
                break t;
            }
        };
        examples.push(Example {
            input_text: text,
            target: Target::Class(class),
            split: Split::Train,
        });
    }
    examples.shuffle(&mut rng);
    let mut examples = assign_splits(examples, spec.train_size);
    for e in examples.iter_mut().filter(|e| e.split == Split::Train) {
        if rng.gen_bool(spec.label_noise) {
            let Target::Class(y) = e.target else { unreachable!() };
            let shift = rng.gen_range(1..c);
            e.target = Target::Class((y + shift) % c);
        }
    }
    Ok(Dataset {
        name: spec.display_name(),
        task: TaskKind::Classification,
        num_classes: c,
        decimals: 0,
        range: (0.0, (c - 1) as f64),
        examples,
        replaced_chars: 0,
    })
}

const LETTERS: &[u8] = b"abcdefgh";

/// Dice overlap `2|A ∩ B| / (|A| + |B|)` of two letter sets.
pub fn dice(a: &str, b: &str) -> f64 {
    let sa: HashSet<char> = a.chars().collect();
    let sb: HashSet<char> = b.chars().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn letter_set<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=4);
    let mut picked: Vec<u8> = LETTERS.choose_multiple(rng, n).copied().collect();
    picked.sort_unstable();
    String::from_utf8(picked).unwrap()
}

/// Pairs of letter sets written as two words; the target is their Dice
/// overlap rounded to `decimals`.
pub fn gen_toy_regression(spec: &DatasetSpec) -> Result<Dataset> {
    if !(1..=4).contains(&spec.decimals) {
        return Err(Error::Config(format!("decimals must be in 1..=4, got {}", spec.decimals)));
    }
    let sets: usize = (1..=4).map(|k| binomial(LETTERS.len(), k)).sum();
    let total = check_sizes(spec, sets * sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    while examples.len() < total {
        let (a, b) = (letter_set(&mut rng), letter_set(&mut rng));
        let text = format!("{a} {b}");
        if !seen.insert(text.clone()) {
            continue;
        }
        let rendered = render_number(dice(&a, &b), spec.decimals)?;
        examples.push(Example {
            input_text: text,
            target: Target::Real(rendered.parse().expect("rendered number parses")),
            split: Split::Train,
        });
    }
    Ok(Dataset {
        name: spec.display_name(),
        task: TaskKind::Regression,
        num_classes: 0,
        decimals: spec.decimals,
        range: (0.0, 1.0),
        examples: assign_splits(examples, spec.train_size),
        replaced_chars: 0,
    })
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Evaluates `"a+b="` or `"a-b="`.
pub fn arithmetic_oracle(text: &str) -> Option<i64> {
    let body = text.strip_suffix('=')?;
    let (op_pos, op) = body.char_indices().skip(1).find(|(_, c)| *c == '+' || *c == '-')?;
    let a: i64 = body[..op_pos].parse().ok()?;
    let b: i64 = body[op_pos + 1..].parse().ok()?;
    Some(if op == '+' { a + b } else { a - b })
}

/// Addition and subtraction problems over `0..=max_operand`.
pub fn gen_arithmetic(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.max_operand > 99 {
        return Err(Error::Config(format!("max_operand must be at most 99, got {}", spec.max_operand)));
    }
    let n = spec.max_operand as usize + 1;
    let total = check_sizes(spec, 2 * n * n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    while examples.len() < total {
        let a = rng.gen_range(0..=spec.max_operand) as i64;
        let b = rng.gen_range(0..=spec.max_operand) as i64;
        let plus = rng.gen_bool(0.5);
        let text = format!("{a}{}{b}=", if plus { '+' } else { '-' });
        if !seen.insert(text.clone()) {
            continue;
        }
        let value = if plus { a + b } else { a - b };
        examples.push(Example {
            input_text: text,
            target: Target::Real(value as f64),
            split: Split::Train,
        });
    }
    let m = spec.max_operand as f64;
    Ok(Dataset {
        name: spec.display_name(),
        task: TaskKind::Regression,
        num_classes: 0,
        decimals: 0,
        range: (-m, 2.0 * m),
        examples: assign_splits(examples, spec.train_size),
        replaced_chars: 0,
    })
}

fn parse_target(raw: &str, task: TaskKind, line: usize) -> Result<Target> {
    let raw = raw.trim();
    let bad = |what: &str| Error::Row {
        line,
        message: format!("cannot parse {raw:?} as {what}"),
    };
    match task {
        TaskKind::Classification => raw.parse().map(Target::Class).map_err(|_| bad("a class id")),
        TaskKind::Regression => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Target::Real(x)),
            _ => Err(bad("a real number")),
        },
    }
}

fn parse_split(raw: Option<&str>, line: usize) -> Result<Split> {
    match raw.map(str::trim) {
        None | Some("train") => Ok(Split::Train),
        Some("test") => Ok(Split::Test),
        Some(other) => Err(Error::Row {
            line,
            message: format!("split must be train or test, got {other:?}"),
        }),
    }
}

/// Reads a CSV (header row) or JSONL file into a dataset.
///
/// Text is lowercased and every remaining out-of-alphabet character becomes a
/// space; the count is reported in `replaced_chars`.
pub fn load_file(mapping: &FileMapping, decimals: usize) -> Result<Dataset> {
    let vocab = Vocab::new();
    let rows = match mapping.format {
        FileFormat::Csv => read_csv(mapping)?,
        FileFormat::Jsonl => read_jsonl(mapping)?,
    };
    let mut replaced_chars = 0;
    let mut examples = Vec::with_capacity(rows.len());
    for row in rows {
        let (text, replaced) = vocab.sanitize(&row.text.to_lowercase());
        replaced_chars += replaced;
        examples.push(Example {
            input_text: text,
            target: parse_target(&row.target, mapping.task, row.line)?,
            split: parse_split(row.split.as_deref(), row.line)?,
        });
    }
    if examples.is_empty() {
        return Err(Error::Empty("dataset file has no rows"));
    }
    let (num_classes, range) = match mapping.task {
        TaskKind::Classification => {
            let max = examples.iter().filter_map(|e| e.target.class()).max().unwrap_or(0);
            (max.max(1) + 1, (0.0, max as f64))
        }
        TaskKind::Regression => {
            let vals = examples.iter().filter_map(|e| e.target.real());
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            (0, (lo, hi))
        }
    };
    Ok(Dataset {
        name: mapping
            .path
            .file_stem()
            .map_or_else(|| "file".into(), |s| s.to_string_lossy().into_owned()),
        task: mapping.task,
        num_classes,
        decimals,
        range,
        examples,
        replaced_chars,
    })
}

struct RawRow {
    line: usize,
    text: String,
    target: String,
    split: Option<String>,
}

fn read_csv(mapping: &FileMapping) -> Result<Vec<RawRow>> {
    let path = &mapping.path;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let text_col = column(&mapping.text)?;
    let target_col = column(&mapping.target)?;
    let split_col = mapping.split.as_deref().map(column).transpose()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            record.get(i).map(str::to_string).ok_or(Error::Row {
                line,
                message: "short row".into(),
            })
        };
        rows.push(RawRow {
            line,
            text: field(text_col)?,
            target: field(target_col)?,
            split: split_col.map(field).transpose()?,
        });
    }
    Ok(rows)
}

fn read_jsonl(mapping: &FileMapping) -> Result<Vec<RawRow>> {
    let path = &mapping.path;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Row {
            line: line_no,
            message: e.to_string(),
        })?;
        let get = |name: &str| -> Result<Option<String>> {
            match value.get(name) {
                None => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(v @ serde_json::Value::Number(_)) => Ok(Some(v.to_string())),
                Some(other) => Err(Error::Row {
                    line: line_no,
                    message: format!("field {name:?} has unsupported value {other}"),
                }),
            }
        };
        let required = |name: &str| get(name)?.ok_or_else(|| Error::MissingColumn(name.to_string()));
        rows.push(RawRow {
            line: line_no,
            text: required(&mapping.text)?,
            target: required(&mapping.target)?,
            split: match &mapping.split {
                Some(name) => Some(required(name)?),
                None => None,
            },
        });
    }
    Ok(rows)
}
