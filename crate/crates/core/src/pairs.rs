//! Chosen/rejected responses and the DPO / KTO datasets built from a
//! selection.
//!
//! A response is the selected code, a bridge sentence and the selected test,
//! one per line. Both sides of a pair use the same template.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{clean_prompt, CandidateSet};
use crate::select::SelectionResult;

pub const DEFAULT_BRIDGE: &str = "The provided code should satisfy the following assertions:";

#[derive(Debug, Error)]
pub enum PairError {
    #[error("cannot build a response from empty {0}")]
    EmptyPart(&'static str),
    #[error("bridge text must not be empty")]
    EmptyBridge,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcatTemplate {
    bridge_text: String,
}

impl ConcatTemplate {
    pub fn new(bridge_text: impl Into<String>) -> Result<Self, PairError> {
        let bridge_text = bridge_text.into();
        if bridge_text.trim().is_empty() {
            return Err(PairError::EmptyBridge);
        }
        Ok(ConcatTemplate { bridge_text })
    }

    pub fn bridge_text(&self) -> &str {
        &self.bridge_text
    }
}

impl Default for ConcatTemplate {
    fn default() -> Self {
        ConcatTemplate {
            bridge_text: DEFAULT_BRIDGE.to_string(),
        }
    }
}

/// `code \n bridge \n test`, with trailing whitespace trimmed from both parts.
pub fn concat_response(code: &str, test: &str, template: &ConcatTemplate) -> Result<String, PairError> {
    let code = code.trim_end();
    let test = test.trim_end();
    if code.trim().is_empty() {
        return Err(PairError::EmptyPart("code"));
    }
    if test.trim().is_empty() {
        return Err(PairError::EmptyPart("test"));
    }
    Ok(format!("{code}\n{}\n{test}", template.bridge_text))
}

/// Where a record came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub instruction_id: String,
    pub j_prime: Option<usize>,
    pub k_prime: Option<usize>,
    pub j_dagger: Option<usize>,
    pub k_dagger: Option<usize>,
}

impl Provenance {
    fn new(instruction_id: &str, sel: &SelectionResult) -> Self {
        Provenance {
            instruction_id: instruction_id.to_string(),
            j_prime: sel.j_prime,
            k_prime: sel.k_prime,
            j_dagger: sel.j_dagger,
            k_dagger: sel.k_dagger,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KtoExample {
    pub prompt: String,
    pub completion: String,
    /// 1 desirable, 0 undesirable.
    pub label: u8,
    pub meta: Provenance,
}

impl KtoExample {
    pub fn desirable(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BuildOptions {
    pub template: ConcatTemplate,
    /// Drop the rejected side when it reuses the chosen code snippet.
    pub forbid_same_code: bool,
}

fn response_for(cs: &CandidateSet, j: usize, k: usize, template: &ConcatTemplate) -> Option<String> {
    let code = cs.candidates.get(j)?;
    let test = cs.candidates.get(k)?;
    concat_response(&code.code, &test.test, template).ok()
}

/// DPO pair for a complete selection, else `None`.
pub fn build_dpo(sel: &SelectionResult, cs: &CandidateSet, opts: &BuildOptions) -> Option<PreferencePair> {
    let (jp, kp, jd, kd) = (sel.j_prime?, sel.k_prime?, sel.j_dagger?, sel.k_dagger?);
    if opts.forbid_same_code && jp == jd {
        return None;
    }
    let chosen = response_for(cs, jp, kp, &opts.template)?;
    let rejected = response_for(cs, jd, kd, &opts.template)?;
    if chosen == rejected {
        return None;
    }
    Some(PreferencePair {
        prompt: clean_prompt(&cs.instruction),
        chosen,
        rejected,
        meta: Provenance::new(cs.id(), sel),
    })
}

/// Zero, one (desirable) or two (desirable then undesirable) KTO examples.
pub fn build_kto(sel: &SelectionResult, cs: &CandidateSet, opts: &BuildOptions) -> Vec<KtoExample> {
    let (Some(jp), Some(kp)) = (sel.j_prime, sel.k_prime) else {
        return Vec::new();
    };
    let Some(chosen) = response_for(cs, jp, kp, &opts.template) else {
        return Vec::new();
    };
    let prompt = clean_prompt(&cs.instruction);
    let meta = Provenance::new(cs.id(), sel);
    let mut out = vec![KtoExample {
        prompt: prompt.clone(),
        completion: chosen.clone(),
        label: 1,
        meta: meta.clone(),
    }];
    if let (Some(jd), Some(kd)) = (sel.j_dagger, sel.k_dagger) {
        if !(opts.forbid_same_code && jd == jp) {
            if let Some(rejected) = response_for(cs, jd, kd, &opts.template).filter(|r| *r != chosen) {
                out.push(KtoExample {
                    prompt,
                    completion: rejected,
                    label: 0,
                    meta,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitSummary {
    pub written: usize,
    pub filtered: usize,
}

/// Per-instruction build outputs, in instruction order.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRecords {
    Dpo(Vec<Option<PreferencePair>>),
    Kto(Vec<Vec<KtoExample>>),
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<usize, PairError> {
    let io = |source| PairError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut written = 0;
    for record in records {
        serde_json::to_writer(&mut out, &record).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
        written += 1;
    }
    out.flush().map_err(io)?;
    Ok(written)
}

/// Writes one JSON object per line. `filtered` counts instructions that
/// contributed nothing.
pub fn emit_dataset(records: &DatasetRecords, path: impl AsRef<Path>) -> Result<EmitSummary, PairError> {
    let path = path.as_ref();
    match records {
        DatasetRecords::Dpo(pairs) => {
            let written = write_lines(path, pairs.iter().flatten())?;
            Ok(EmitSummary {
                written,
                filtered: pairs.len() - written,
            })
        }
        DatasetRecords::Kto(groups) => {
            let written = write_lines(path, groups.iter().flatten())?;
            Ok(EmitSummary {
                written,
                filtered: groups.iter().filter(|g| g.is_empty()).count(),
            })
        }
    }
}
