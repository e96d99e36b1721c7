//! Instruction records, prompt rendering, byte-level tokenization with loss
//! masks, JSONL ingestion, and the seeded synthetic dataset generator.
//!
//! Each synthetic category is a deterministic byte-level task (reverse,
//! uppercase, ...) so held-out loss is a meaningful per-category signal.

use crate::error::{Error, Result};
use crate::model::{BOS, EOS};
use crate::rng::{derive_seed, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Template applied when the record carries an input. Exported so golden
/// tests can compare the rendered bytes against a checked-in copy.
pub const PROMPT_TEMPLATE_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n";

/// Template applied when the record has no input.
pub const PROMPT_TEMPLATE_NO_INPUT: &str = "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    /// Accepts "context" on input for dolly-style files.
    #[serde(default, alias = "context", skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub response: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<InstructionRecord>,
    pub category_set: Vec<String>,
    pub source: DataSource,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// New manifest holding only the given records, in index order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            category_set: self.category_set.clone(),
            source: self.source.clone(),
        }
    }
}

/// Renders the record through the matching template. An empty-string input
/// is treated as absent.
pub fn render_prompt(record: &InstructionRecord) -> String {
    match record.input.as_deref() {
        Some(input) if !input.is_empty() => PROMPT_TEMPLATE_WITH_INPUT
            .replace("{instruction}", &record.instruction)
            .replace("{input}", input),
        _ => PROMPT_TEMPLATE_NO_INPUT.replace("{instruction}", &record.instruction),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub tokens: Vec<u32>,
    /// True exactly on response-byte positions and the terminal EOS.
    pub loss_mask: Vec<bool>,
}

/// Signal that a record cannot be tokenized because its prompt alone fills
/// the sequence budget. Callers count and report these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOverflow {
    pub prompt_len: usize,
    pub max_seq_len: usize,
}

/// BOS + prompt bytes + response bytes + EOS, truncating the response tail
/// (never the prompt head) to fit `max_seq_len`.
pub fn tokenize(
    record: &InstructionRecord,
    max_seq_len: usize,
) -> std::result::Result<TokenizedExample, PromptOverflow> {
    let prompt = render_prompt(record);
    let prompt_bytes = prompt.as_bytes();
    // +1 for BOS; at least one response token must fit.
    if 1 + prompt_bytes.len() >= max_seq_len {
        return Err(PromptOverflow {
            prompt_len: prompt_bytes.len(),
            max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(max_seq_len.min(2 + prompt_bytes.len() + record.response.len()));
    let mut mask = Vec::with_capacity(tokens.capacity());
    tokens.push(BOS);
    mask.push(false);
    for &b in prompt_bytes {
        tokens.push(b as u32);
        mask.push(false);
    }
    let room = max_seq_len - tokens.len();
    let response_bytes = record.response.as_bytes();
    if response_bytes.len() < room {
        for &b in response_bytes {
            tokens.push(b as u32);
            mask.push(true);
        }
        tokens.push(EOS);
        mask.push(true);
    } else {
        // No room for the terminal EOS; keep as much response as fits.
        for &b in &response_bytes[..room] {
            tokens.push(b as u32);
            mask.push(true);
        }
    }
    Ok(TokenizedExample {
        tokens,
        loss_mask: mask,
    })
}

/// Decodes the mask-true span back to text (EOS dropped).
pub fn decode_masked_span(example: &TokenizedExample) -> String {
    let bytes: Vec<u8> = example
        .tokens
        .iter()
        .zip(&example.loss_mask)
        .filter(|(&t, &m)| m && t < 256)
        .map(|(&t, _)| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Loads a JSONL instruction file. Field names follow dolly/alpaca usage:
/// instruction, input (or context), response, category. Unknown categories
/// are admitted and extend the category set in order of first appearance.
pub fn load_jsonl(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut category_set: Vec<String> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstructionRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!(
                "{}: line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if record.instruction.is_empty() || record.response.is_empty() {
            return Err(Error::Format(format!(
                "{}: line {}: instruction and response must be non-empty",
                path.display(),
                lineno + 1
            )));
        }
        if !category_set.contains(&record.category) {
            category_set.push(record.category.clone());
        }
        records.push(record);
    }
    Ok(DatasetManifest {
        records,
        category_set,
        source: DataSource::File(path.to_path_buf()),
    })
}

pub fn save_jsonl(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in &manifest.records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// The deterministic byte-level task behind a synthetic category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Uppercase,
    AddMod10,
    LastWord,
    SortLetters,
    CountVowels,
    Parity,
}

impl TaskKind {
    pub fn all() -> [TaskKind; 8] {
        [
            TaskKind::Copy,
            TaskKind::Reverse,
            TaskKind::Uppercase,
            TaskKind::AddMod10,
            TaskKind::LastWord,
            TaskKind::SortLetters,
            TaskKind::CountVowels,
            TaskKind::Parity,
        ]
    }

    pub fn default_name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Uppercase => "uppercase",
            TaskKind::AddMod10 => "add_mod10",
            TaskKind::LastWord => "last_word",
            TaskKind::SortLetters => "sort_letters",
            TaskKind::CountVowels => "count_vowels",
            TaskKind::Parity => "parity",
        }
    }

    fn instruction(self) -> &'static str {
        match self {
            TaskKind::Copy => "Copy the text.",
            TaskKind::Reverse => "Reverse the text.",
            TaskKind::Uppercase => "Convert the text to uppercase.",
            TaskKind::AddMod10 => "Add the digits modulo 10.",
            TaskKind::LastWord => "Return the last word.",
            TaskKind::SortLetters => "Sort the letters alphabetically.",
            TaskKind::CountVowels => "Count the vowels in the text.",
            TaskKind::Parity => "Say if the digit sum is even or odd.",
        }
    }

    /// The task as a pure function of its input.
    pub fn solve(self, input: &str) -> String {
        match self {
            TaskKind::Copy => input.to_string(),
            TaskKind::Reverse => input.chars().rev().collect(),
            TaskKind::Uppercase => input.to_uppercase(),
            TaskKind::AddMod10 => {
                let digits: Vec<u32> = input.chars().filter_map(|c| c.to_digit(10)).collect();
                ((digits.iter().sum::<u32>()) % 10).to_string()
            }
            TaskKind::LastWord => input.split_whitespace().last().unwrap_or("").to_string(),
            TaskKind::SortLetters => {
                let mut bytes: Vec<u8> = input.bytes().collect();
                bytes.sort_unstable();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TaskKind::CountVowels => input
                .chars()
                .filter(|c| "aeiou".contains(*c))
                .count()
                .to_string(),
            TaskKind::Parity => {
                let sum: u32 = input.chars().filter_map(|c| c.to_digit(10)).sum();
                if sum.is_multiple_of(2) {
                    "even".to_string()
                } else {
                    "odd".to_string()
                }
            }
        }
    }

    fn sample_input(self, rng: &mut impl Rng) -> String {
        fn word(rng: &mut impl Rng, min: usize, max: usize) -> String {
            let len = rng.gen_range(min..=max);
            (0..len)
                .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                .collect()
        }
        match self {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Uppercase | TaskKind::SortLetters => {
                word(rng, 4, 10)
            }
            TaskKind::AddMod10 => {
                let len = rng.gen_range(4..=6usize);
                (0..len)
                    .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
                    .collect()
            }
            TaskKind::LastWord => {
                let n = rng.gen_range(2..=3usize);
                (0..n)
                    .map(|_| word(rng, 2, 5))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
            TaskKind::CountVowels => word(rng, 4, 10),
            TaskKind::Parity => {
                let len = rng.gen_range(3..=6usize);
                (0..len)
                    .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub kind: TaskKind,
    pub proportion: f64,
}

/// The default eight-way split with equal proportions.
pub fn default_category_spec() -> Vec<CategorySpec> {
    TaskKind::all()
        .into_iter()
        .map(|kind| CategorySpec {
            name: kind.default_name().to_string(),
            kind,
            proportion: 1.0 / 8.0,
        })
        .collect()
}

/// Generates a deterministic synthetic instruction dataset. Category counts
/// follow the proportions by largest-remainder apportionment, so they match
/// within one record.
pub fn generate_synthetic(
    seed: u64,
    n_records: usize,
    category_spec: &[CategorySpec],
) -> Result<DatasetManifest> {
    if category_spec.is_empty() {
        return Err(Error::Config("category spec is empty".into()));
    }
    let total: f64 = category_spec.iter().map(|c| c.proportion).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "category proportions sum to {total}, expected 1"
        )));
    }
    if n_records == 0 {
        return Err(Error::Config("n_records must be positive".into()));
    }

    // Largest-remainder apportionment of n_records over categories.
    let mut counts: Vec<usize> = category_spec
        .iter()
        .map(|c| (c.proportion * n_records as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = category_spec
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.proportion * n_records as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n_records - assigned) {
        counts[remainders[k % remainders.len()].0] += 1;
    }

    let mut records = Vec::with_capacity(n_records);
    for (ci, spec) in category_spec.iter().enumerate() {
        let mut rng = seeded_rng(derive_seed(seed, &[ci as u64]));
        for _ in 0..counts[ci] {
            let input = spec.kind.sample_input(&mut rng);
            let response = spec.kind.solve(&input);
            records.push(InstructionRecord {
                instruction: spec.kind.instruction().to_string(),
                input: Some(input),
                response,
                category: spec.name.clone(),
            });
        }
    }

    Ok(DatasetManifest {
        records,
        category_set: category_spec.iter().map(|c| c.name.clone()).collect(),
        source: DataSource::Synthetic { seed },
    })
}
