//! Reliability of selected pairs: accuracy of chosen/rejected code against
//! oracle verdicts, and a latent-correctness simulator comparing minimax
//! selection with a random pass/fail pairing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::select::{select_all, BinaryMatrix, PassMatrix, SelectionResult};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no oracle verdict for instruction {instruction_id:?}, code {code_index}")]
    MissingVerdict { instruction_id: String, code_index: usize },
    #[error("invalid latent model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub instruction_id: String,
    pub code_index: usize,
    pub correct: u8,
}

/// Externally supplied correctness of individual code snippets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleVerdicts {
    verdicts: HashMap<(String, usize), bool>,
}

impl OracleVerdicts {
    pub fn insert(&mut self, instruction_id: impl Into<String>, code_index: usize, correct: bool) {
        self.verdicts.insert((instruction_id.into(), code_index), correct);
    }

    pub fn get(&self, instruction_id: &str, code_index: usize) -> Result<bool, StatsError> {
        self.verdicts
            .get(&(instruction_id.to_string(), code_index))
            .copied()
            .ok_or_else(|| StatsError::MissingVerdict {
                instruction_id: instruction_id.to_string(),
                code_index,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StatsError> {
        let mut out = OracleVerdicts::default();
        for r in jsonl::read::<VerdictRecord>(path)? {
            out.insert(r.instruction_id, r.code_index, r.correct != 0);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub chosen_accuracy: f64,
    pub rejected_accuracy: f64,
    /// Chosen correct and rejected incorrect.
    pub strict_gap: f64,
    pub n_instructions: usize,
}

impl QualityReport {
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nchosen_accuracy,{}\nrejected_accuracy,{}\nstrict_gap,{}\nn_instructions,{}\n",
            self.chosen_accuracy, self.rejected_accuracy, self.strict_gap, self.n_instructions
        )
    }
}

/// Per-instruction averages over selections that admit a DPO pair; the rest
/// are skipped.
pub fn score_dataset<'a>(
    selections: impl IntoIterator<Item = (&'a str, &'a SelectionResult)>,
    oracle: &OracleVerdicts,
) -> Result<QualityReport, StatsError> {
    let (mut n, mut chosen, mut rejected, mut strict) = (0usize, 0usize, 0usize, 0usize);
    for (id, sel) in selections {
        let (Some(jp), Some(jd)) = (sel.j_prime, sel.j_dagger) else {
            continue;
        };
        if !sel.is_complete() {
            continue;
        }
        let c = oracle.get(id, jp)?;
        let r = oracle.get(id, jd)?;
        n += 1;
        chosen += c as usize;
        rejected += r as usize;
        strict += (c && !r) as usize;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(QualityReport {
        chosen_accuracy: frac(chosen),
        rejected_accuracy: frac(rejected),
        strict_gap: frac(strict),
        n_instructions: n,
    })
}

/// Generative model: each code is correct with `p_code_correct`, each test
/// valid with `p_test_valid`. A valid test passes exactly the correct codes;
/// an invalid test passes any code with probability `invalid_test_pass_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub p_code_correct: f64,
    pub p_test_valid: f64,
    pub invalid_test_pass_prob: f64,
    pub j: usize,
    pub seed: u64,
}

impl LatentModel {
    pub fn validate(&self) -> Result<(), StatsError> {
        for (name, p) in [
            ("p_code_correct", self.p_code_correct),
            ("p_test_valid", self.p_test_valid),
            ("invalid_test_pass_prob", self.invalid_test_pass_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(StatsError::InvalidModel(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.j < 2 {
            return Err(StatsError::InvalidModel(format!("J must be at least 2, got {}", self.j)));
        }
        Ok(())
    }

    /// Independent generator for trial `trial`.
    pub fn trial_rng(&self, trial: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial);
        rng
    }
}

/// One simulated feedback matrix and the latent correctness of each code.
pub fn simulate_matrix<R: Rng + ?Sized>(model: &LatentModel, rng: &mut R) -> (BinaryMatrix, Vec<bool>) {
    let n = model.j;
    let correct: Vec<bool> = (0..n).map(|_| rng.gen_bool(model.p_code_correct)).collect();
    let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(model.p_test_valid)).collect();
    let mut m = BinaryMatrix::zeros(n);
    for (j, &ok) in correct.iter().enumerate() {
        for (k, &v) in valid.iter().enumerate() {
            let pass = if v { ok } else { rng.gen_bool(model.invalid_test_pass_prob) };
            m.set(j, k, pass);
        }
    }
    (m, correct)
}

/// Uniformly random (passing cell, failing cell) pair, as code indices
/// `(chosen, rejected)`; `None` unless the matrix has both kinds of cell.
pub fn baseline_pair<M: PassMatrix + ?Sized, R: Rng + ?Sized>(m: &M, rng: &mut R) -> Option<(usize, usize)> {
    let n = m.size();
    let mut pass = Vec::new();
    let mut fail = Vec::new();
    for j in 0..n {
        for k in 0..n {
            if m.passes(j, k) {
                pass.push(j);
            } else {
                fail.push(j);
            }
        }
    }
    Some((*pass.choose(rng)?, *fail.choose(rng)?))
}

/// Binomial proportion with a normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: usize,
    pub n: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Proportion {
    pub fn new(successes: usize, n: usize, confidence: f64) -> Self {
        if n == 0 {
            return Proportion {
                successes,
                n,
                estimate: 0.0,
                ci_low: 0.0,
                ci_high: 1.0,
            };
        }
        let p = successes as f64 / n as f64;
        let half = z_score(confidence) * (p * (1.0 - p) / n as f64).sqrt();
        Proportion {
            successes,
            n,
            estimate: p,
            ci_low: (p - half).max(0.0),
            ci_high: (p + half).min(1.0),
        }
    }

    /// Strictly above `other` with non-overlapping intervals.
    pub fn separated_above(&self, other: &Proportion) -> bool {
        self.ci_low > other.ci_high
    }
}

/// Two-sided standard normal quantile for `confidence`.
pub fn z_score(confidence: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + confidence / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    /// Trials in which the policy produced a pair.
    pub feasible: usize,
    pub chosen_accuracy: Proportion,
    pub rejected_accuracy: Proportion,
    pub strict_gap: Proportion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: LatentModel,
    pub n_trials: usize,
    pub confidence: f64,
    pub dstc: PolicyStats,
    pub baseline: PolicyStats,
    /// Minimax chosen code correct, over trials with at least one correct code.
    pub dstc_chosen_given_any_correct: Proportion,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,metric,estimate,ci_low,ci_high,successes,n\n");
        let mut row = |policy: &str, metric: &str, p: &Proportion| {
            let _ = writeln!(
                out,
                "{policy},{metric},{:.6},{:.6},{:.6},{},{}",
                p.estimate, p.ci_low, p.ci_high, p.successes, p.n
            );
        };
        for (name, s) in [("dstc", &self.dstc), ("baseline", &self.baseline)] {
            row(name, "chosen_accuracy", &s.chosen_accuracy);
            row(name, "rejected_accuracy", &s.rejected_accuracy);
            row(name, "strict_gap", &s.strict_gap);
        }
        row("dstc", "chosen_given_any_correct", &self.dstc_chosen_given_any_correct);
        out
    }

    pub fn summary(&self) -> String {
        let pct = |p: &Proportion| {
            format!("{:.2}% [{:.2}, {:.2}]", 100.0 * p.estimate, 100.0 * p.ci_low, 100.0 * p.ci_high)
        };
        format!(
            "trials={} confidence={}\n\
             dstc:     feasible={} chosen={} rejected={} strict_gap={}\n\
             baseline: feasible={} chosen={} rejected={} strict_gap={}\n",
            self.n_trials,
            self.confidence,
            self.dstc.feasible,
            pct(&self.dstc.chosen_accuracy),
            pct(&self.dstc.rejected_accuracy),
            pct(&self.dstc.strict_gap),
            self.baseline.feasible,
            pct(&self.baseline.chosen_accuracy),
            pct(&self.baseline.rejected_accuracy),
            pct(&self.baseline.strict_gap),
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    dstc_feasible: usize,
    dstc_chosen: usize,
    dstc_rejected: usize,
    dstc_strict: usize,
    base_feasible: usize,
    base_chosen: usize,
    base_rejected: usize,
    base_strict: usize,
    any_correct: usize,
    chosen_given_any: usize,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.dstc_feasible += o.dstc_feasible;
        self.dstc_chosen += o.dstc_chosen;
        self.dstc_rejected += o.dstc_rejected;
        self.dstc_strict += o.dstc_strict;
        self.base_feasible += o.base_feasible;
        self.base_chosen += o.base_chosen;
        self.base_rejected += o.base_rejected;
        self.base_strict += o.base_strict;
        self.any_correct += o.any_correct;
        self.chosen_given_any += o.chosen_given_any;
        self
    }
}

fn run_trial(model: &LatentModel, trial: u64) -> Tally {
    let mut rng = model.trial_rng(trial);
    let (m, correct) = simulate_matrix(model, &mut rng);
    let mut t = Tally::default();

    let sel: SelectionResult = select_all(&m);
    let jp = sel.j_prime.expect("non-empty matrix");
    if correct.iter().any(|&c| c) {
        t.any_correct = 1;
        t.chosen_given_any = correct[jp] as usize;
    }
    if let (true, Some(jd)) = (sel.is_complete(), sel.j_dagger) {
        t.dstc_feasible = 1;
        t.dstc_chosen = correct[jp] as usize;
        t.dstc_rejected = correct[jd] as usize;
        t.dstc_strict = (correct[jp] && !correct[jd]) as usize;
    }
    if let Some((bc, br)) = baseline_pair(&m, &mut rng) {
        t.base_feasible = 1;
        t.base_chosen = correct[bc] as usize;
        t.base_rejected = correct[br] as usize;
        t.base_strict = (correct[bc] && !correct[br]) as usize;
    }
    t
}

/// Simulates `n_trials` matrices and scores both selection policies. Trials
/// use per-index streams of the model seed, so results do not depend on the
/// thread count.
pub fn compare_selection_policies(
    model: &LatentModel,
    n_trials: usize,
    confidence: f64,
) -> Result<ComparisonReport, StatsError> {
    model.validate()?;
    if n_trials == 0 {
        return Err(StatsError::InvalidModel("n_trials must be at least 1".into()));
    }
    let t = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| run_trial(model, trial))
        .reduce(Tally::default, Tally::merge);
    let p = |k, n| Proportion::new(k, n, confidence);
    Ok(ComparisonReport {
        model: *model,
        n_trials,
        confidence,
        dstc: PolicyStats {
            feasible: t.dstc_feasible,
            chosen_accuracy: p(t.dstc_chosen, t.dstc_feasible),
            rejected_accuracy: p(t.dstc_rejected, t.dstc_feasible),
            strict_gap: p(t.dstc_strict, t.dstc_feasible),
        },
        baseline: PolicyStats {
            feasible: t.base_feasible,
            chosen_accuracy: p(t.base_chosen, t.base_feasible),
            rejected_accuracy: p(t.base_rejected, t.base_feasible),
            strict_gap: p(t.base_strict, t.base_feasible),
        },
        dstc_chosen_given_any_correct: p(t.chosen_given_any, t.any_correct),
    })
}
