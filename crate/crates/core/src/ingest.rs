//! Candidate ingestion: instructions, generated responses and the four-part
//! response format.
//!
//! A generated response is expected to be organised as
//!
//! ```text
//! [Reasoning] ... [Implementation] ... [Explanation] ... [Tests] ...
//! ```
//!
//! Only the `[Implementation]` and `[Tests]` bodies are kept. Header matching
//! is case-sensitive and a section runs until the next known header or the
//! end of the text.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REASONING_HEADER: &str = "[Reasoning]";
pub const IMPLEMENTATION_HEADER: &str = "[Implementation]";
pub const EXPLANATION_HEADER: &str = "[Explanation]";
pub const TESTS_HEADER: &str = "[Tests]";

const HEADERS: [&str; 4] = [
    REASONING_HEADER,
    IMPLEMENTATION_HEADER,
    EXPLANATION_HEADER,
    TESTS_HEADER,
];

const FENCE: &str = "```";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate candidate_index {index} for instruction {instruction_id:?}")]
    DuplicateCandidate {
        line: usize,
        instruction_id: String,
        index: usize,
    },
    #[error("instruction {instruction_id:?}: candidate indices must be contiguous from 0, missing {missing}")]
    MissingCandidate { instruction_id: String, missing: usize },
}

/// One task description with its optional entry point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Partial,
    Failed,
}

impl ParseStatus {
    fn from_presence(code: bool, test: bool) -> Self {
        match (code, test) {
            (true, true) => ParseStatus::Ok,
            (false, false) => ParseStatus::Failed,
            _ => ParseStatus::Partial,
        }
    }
}

/// A parsed code snippet and test drawn from one generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub code: String,
    pub test: String,
    pub raw_response: String,
    pub parse_status: ParseStatus,
}

impl Candidate {
    /// Builds a candidate from already separated code and test.
    pub fn from_parts(code: impl Into<String>, test: impl Into<String>) -> Self {
        let code = code.into();
        let test = test.into();
        let parse_status = ParseStatus::from_presence(!code.is_empty(), !test.is_empty());
        Candidate {
            code,
            test,
            raw_response: String::new(),
            parse_status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.parse_status == ParseStatus::Ok
    }
}

/// One instruction and its `J` candidates. Index `j` of `candidates` is the
/// code/test index used by the feedback matrix and the selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub instruction: InstructionRecord,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(instruction: InstructionRecord, candidates: Vec<Candidate>) -> Self {
        assert!(!candidates.is_empty(), "a candidate set needs at least one candidate");
        CandidateSet {
            instruction,
            candidates,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn id(&self) -> &str {
        &self.instruction.id
    }
}

/// Byte ranges `(header_start, body_start)` of the first occurrence of each
/// known header, in text order.
fn header_positions(text: &str) -> Vec<(usize, usize, &'static str)> {
    let mut found: Vec<(usize, usize, &'static str)> = HEADERS
        .iter()
        .filter_map(|h| text.find(h).map(|start| (start, start + h.len(), *h)))
        .collect();
    found.sort_by_key(|(start, _, _)| *start);
    found
}

fn section_body<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let positions = header_positions(text);
    let idx = positions.iter().position(|(_, _, h)| *h == header)?;
    let body_start = positions[idx].1;
    // The next header must start after this body begins; headers found inside
    // an earlier section are ignored.
    let body_end = positions
        .iter()
        .map(|(start, _, _)| *start)
        .filter(|start| *start >= body_start)
        .min()
        .unwrap_or(text.len());
    Some(&text[body_start..body_end])
}

/// Returns the contents of every fenced block in `text`, in order. An
/// unterminated fence runs to the end of the text.
fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.split('\n') {
        let is_fence = line.trim_start().starts_with(FENCE);
        match (&mut current, is_fence) {
            (None, true) => current = Some(Vec::new()),
            (None, false) => {}
            (Some(lines), true) => {
                blocks.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), false) => lines.push(line),
        }
    }
    if let Some(lines) = current {
        blocks.push(lines.join("\n"));
    }
    blocks
}

/// Section content with fences stripped. Multiple fenced blocks are joined
/// with a newline in order; unfenced content is trimmed.
fn clean_section(body: &str) -> String {
    let blocks = fenced_blocks(body);
    if blocks.is_empty() {
        body.trim().to_string()
    } else {
        blocks.join("\n")
    }
}

fn has_any_header(text: &str) -> bool {
    HEADERS.iter().any(|h| text.contains(h))
}

/// Splits a raw generation into code and test. Never fails; missing pieces
/// are reflected in [`ParseStatus`].
pub fn parse_response(raw_response: &str) -> Candidate {
    let code = section_body(raw_response, IMPLEMENTATION_HEADER)
        .map(clean_section)
        .unwrap_or_default();
    let test = section_body(raw_response, TESTS_HEADER)
        .map(clean_section)
        .unwrap_or_default();

    if code.is_empty() && test.is_empty() && !has_any_header(raw_response) {
        let blocks = fenced_blocks(raw_response);
        if blocks.len() == 1 && !blocks[0].is_empty() {
            return Candidate {
                code: blocks.into_iter().next().unwrap_or_default(),
                test: String::new(),
                raw_response: raw_response.to_string(),
                parse_status: ParseStatus::Partial,
            };
        }
    }

    let parse_status = ParseStatus::from_presence(!code.is_empty(), !test.is_empty());
    Candidate {
        code,
        test,
        raw_response: raw_response.to_string(),
        parse_status,
    }
}

/// The code snippet of a full response, or an empty string.
pub fn extract_code(response: &str) -> String {
    parse_response(response).code
}

/// Renders code and test in the four-part layout that [`parse_response`]
/// reads back.
pub fn render_response(code: &str, test: &str) -> String {
    format!(
        "{REASONING_HEADER}\n\n{IMPLEMENTATION_HEADER}\n{FENCE}python\n{code}\n{FENCE}\n\n{EXPLANATION_HEADER}\n\n{TESTS_HEADER}\n{FENCE}python\n{test}\n{FENCE}\n"
    )
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn contains_word(haystack: &str, word: &str) -> bool {
    let is_word = |c: char| c == '_' || c.is_ascii_alphanumeric();
    haystack.match_indices(word).any(|(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + word.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// True iff both code and test mention `entry_point` as a whole word.
pub fn validate_entry_point(code: &str, test: &str, entry_point: &str) -> bool {
    !entry_point.is_empty() && contains_word(code, entry_point) && contains_word(test, entry_point)
}

pub fn entry_point_directive(entry_point: &str) -> String {
    format!("The main function name is {entry_point}.")
}

fn remove_sentence(text: &str, sentence: &str) -> Option<String> {
    let start = text.find(sentence)?;
    let end = start + sentence.len();
    let before = &text[..start];
    let after = &text[end..];
    let trimmed_before = before.trim_end();
    if trimmed_before.is_empty() {
        Some(after.trim_start().to_string())
    } else {
        Some(format!("{trimmed_before}{after}"))
    }
}

/// Removes the entry-point directive sentence from an instruction. Text that
/// lacks the sentence is returned unchanged.
pub fn strip_entry_point(instruction_text: &str, entry_point: &str) -> String {
    let sentence = entry_point_directive(entry_point);
    let mut text = instruction_text.to_string();
    while let Some(next) = remove_sentence(&text, &sentence) {
        text = next;
    }
    text
}

fn directive_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"The main function name is [A-Za-z_][A-Za-z0-9_]*\.").expect("valid regex")
    })
}

/// Removes any entry-point directive sentence, whatever name it carries.
pub fn strip_any_entry_point(instruction_text: &str) -> String {
    let mut text = instruction_text.to_string();
    while let Some(m) = directive_regex().find(&text) {
        let sentence = m.as_str().to_string();
        match remove_sentence(&text, &sentence) {
            Some(next) => text = next,
            None => break,
        }
    }
    text
}

pub fn contains_entry_point_directive(text: &str) -> bool {
    directive_regex().is_match(text)
}

/// Prompt text for emitted datasets: the instruction with its directive
/// removed.
pub fn clean_prompt(instruction: &InstructionRecord) -> String {
    let text = match &instruction.entry_point {
        Some(ep) => strip_entry_point(&instruction.instruction_text, ep),
        None => instruction.instruction_text.clone(),
    };
    strip_any_entry_point(&text)
}

/// One line of the candidate input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    pub instruction_id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
    pub candidate_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl CandidateLine {
    fn into_candidate(self) -> Candidate {
        match (self.code, self.test) {
            (None, None) => parse_response(self.response.as_deref().unwrap_or("")),
            (code, test) => {
                let mut candidate =
                    Candidate::from_parts(code.unwrap_or_default(), test.unwrap_or_default());
                candidate.raw_response = self.response.unwrap_or_default();
                candidate
            }
        }
    }
}

/// Parses candidate records from any buffered reader. Line numbers in errors
/// are 1-based.
pub fn read_candidates<R: BufRead>(reader: R) -> Result<Vec<CandidateSet>, IngestError> {
    struct Pending {
        instruction: InstructionRecord,
        slots: Vec<Option<Candidate>>,
    }

    let mut groups: IndexMap<String, Pending> = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| IngestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CandidateLine =
            serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(ep) = &record.entry_point {
            if !is_identifier(ep) {
                return Err(IngestError::Malformed {
                    line: line_no,
                    message: format!("entry_point {ep:?} is not an identifier"),
                });
            }
        }
        if record.response.is_none() && record.code.is_none() && record.test.is_none() {
            return Err(IngestError::Malformed {
                line: line_no,
                message: "record needs a response or code/test fields".into(),
            });
        }

        let instruction = InstructionRecord {
            id: record.instruction_id.clone(),
            instruction_text: record.instruction.clone(),
            entry_point: record.entry_point.clone(),
        };
        let pending = groups
            .entry(record.instruction_id.clone())
            .or_insert_with(|| Pending {
                instruction: instruction.clone(),
                slots: Vec::new(),
            });
        if pending.instruction != instruction {
            return Err(IngestError::Malformed {
                line: line_no,
                message: format!(
                    "instruction {:?} repeats with different text or entry point",
                    record.instruction_id
                ),
            });
        }
        let index = record.candidate_index;
        if pending.slots.len() <= index {
            pending.slots.resize(index + 1, None);
        }
        if pending.slots[index].is_some() {
            return Err(IngestError::DuplicateCandidate {
                line: line_no,
                instruction_id: record.instruction_id,
                index,
            });
        }
        pending.slots[index] = Some(record.into_candidate());
    }

    groups
        .into_iter()
        .map(|(id, pending)| {
            let mut candidates = Vec::with_capacity(pending.slots.len());
            for (j, slot) in pending.slots.into_iter().enumerate() {
                match slot {
                    Some(c) => candidates.push(c),
                    None => {
                        return Err(IngestError::MissingCandidate {
                            instruction_id: id,
                            missing: j,
                        })
                    }
                }
            }
            Ok(CandidateSet::new(pending.instruction, candidates))
        })
        .collect()
}

/// Loads the candidate input file: one [`CandidateSet`] per instruction in
/// order of first appearance.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_candidates(BufReader::new(file))
}
