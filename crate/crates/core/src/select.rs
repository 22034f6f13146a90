//! Minimax selection of chosen/rejected code and tests over a binary
//! feedback matrix.
//!
//! With `r[j][k]` = 1 when code `j` passes test `k`:
//!
//! ```text
//! j'  = argmax_j  row_sum(j)
//! k'  = argmin_k  col_sum(k)   s.t. r[j'][k] = 1
//! k†  = argmax_k  col_sum(k)   s.t. col_sum(k) < J
//! j†  = argmin_j  row_sum(j)   s.t. r[j][k†] = 0
//! ```
//!
//! Infeasible problems yield `None`. Ties go to the lowest index unless a
//! seeded random tie-break is requested.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Read access to a square pass/fail grid, indexed (code, test).
pub trait PassMatrix {
    fn size(&self) -> usize;
    fn passes(&self, j: usize, k: usize) -> bool;

    fn row_sum(&self, j: usize) -> usize {
        (0..self.size()).filter(|&k| self.passes(j, k)).count()
    }

    fn col_sum(&self, k: usize) -> usize {
        (0..self.size()).filter(|&j| self.passes(j, k)).count()
    }

    fn row_sums(&self) -> Vec<usize> {
        (0..self.size()).map(|j| self.row_sum(j)).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        (0..self.size()).map(|k| self.col_sum(k)).collect()
    }
}

/// A plain dense binary matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        BinaryMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn ones(n: usize) -> Self {
        BinaryMatrix {
            n,
            bits: vec![true; n * n],
        }
    }

    /// Panics if `rows` is not square.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let mut bits = Vec::with_capacity(n * n);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), n, "matrix must be square");
            bits.extend(row.iter().map(|&v| v != 0));
        }
        BinaryMatrix { n, bits }
    }

    pub fn set(&mut self, j: usize, k: usize, pass: bool) {
        self.bits[j * self.n + k] = pass;
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.n.max(1)).take(self.n).map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }

    /// Copies any pass matrix into a dense one.
    pub fn from_matrix<M: PassMatrix + ?Sized>(m: &M) -> Self {
        let n = m.size();
        let mut out = BinaryMatrix::zeros(n);
        for j in 0..n {
            for k in 0..n {
                out.set(j, k, m.passes(j, k));
            }
        }
        out
    }
}

impl PassMatrix for BinaryMatrix {
    fn size(&self) -> usize {
        self.n
    }

    fn passes(&self, j: usize, k: usize) -> bool {
        self.bits[j * self.n + k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub j_prime: Option<usize>,
    pub k_prime: Option<usize>,
    pub k_dagger: Option<usize>,
    pub j_dagger: Option<usize>,
}

impl SelectionResult {
    /// All four indices present, i.e. a DPO pair can be built.
    pub fn is_complete(&self) -> bool {
        self.j_prime.is_some() && self.k_prime.is_some() && self.k_dagger.is_some() && self.j_dagger.is_some()
    }

    pub fn has_rejected(&self) -> bool {
        self.j_dagger.is_some() && self.k_dagger.is_some()
    }
}

/// One line of the selection audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionLogRecord {
    pub instruction_id: String,
    pub j_prime: Option<usize>,
    pub k_prime: Option<usize>,
    pub k_dagger: Option<usize>,
    pub j_dagger: Option<usize>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
}

impl SelectionLogRecord {
    pub fn new<M: PassMatrix + ?Sized>(instruction_id: impl Into<String>, m: &M, sel: &SelectionResult) -> Self {
        SelectionLogRecord {
            instruction_id: instruction_id.into(),
            j_prime: sel.j_prime,
            k_prime: sel.k_prime,
            k_dagger: sel.k_dagger,
            j_dagger: sel.j_dagger,
            row_sums: m.row_sums(),
            col_sums: m.col_sums(),
        }
    }

    pub fn selection(&self) -> SelectionResult {
        SelectionResult {
            j_prime: self.j_prime,
            k_prime: self.k_prime,
            k_dagger: self.k_dagger,
            j_dagger: self.j_dagger,
        }
    }
}

/// Tie-breaking rule among equally scored feasible indices.
pub enum TieBreak {
    LowestIndex,
    Random(Box<ChaCha8Rng>),
}

impl TieBreak {
    pub fn seeded(seed: u64) -> Self {
        TieBreak::Random(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    fn pick(&mut self, tied: &[usize]) -> Option<usize> {
        match self {
            TieBreak::LowestIndex => tied.first().copied(),
            TieBreak::Random(rng) => tied.choose(rng.as_mut()).copied(),
        }
    }
}

#[derive(Clone, Copy)]
enum Goal {
    Max,
    Min,
}

/// Indices in `0..n` that pass `feasible` and attain the best score.
fn optimal_set(
    n: usize,
    score: impl Fn(usize) -> usize,
    feasible: impl Fn(usize) -> bool,
    goal: Goal,
) -> Vec<usize> {
    let mut best: Option<usize> = None;
    let mut tied = Vec::new();
    for i in (0..n).filter(|&i| feasible(i)) {
        let s = score(i);
        let better = match (best, goal) {
            (None, _) => true,
            (Some(b), Goal::Max) => s > b,
            (Some(b), Goal::Min) => s < b,
        };
        if better {
            best = Some(s);
            tied.clear();
        }
        if best == Some(s) {
            tied.push(i);
        }
    }
    tied
}

pub fn select_chosen_code_with<M: PassMatrix + ?Sized>(m: &M, tie: &mut TieBreak) -> Option<usize> {
    let rows = m.row_sums();
    tie.pick(&optimal_set(m.size(), |j| rows[j], |_| true, Goal::Max))
}

pub fn select_chosen_test_with<M: PassMatrix + ?Sized>(
    m: &M,
    j_prime: usize,
    tie: &mut TieBreak,
) -> Option<usize> {
    let cols = m.col_sums();
    tie.pick(&optimal_set(m.size(), |k| cols[k], |k| m.passes(j_prime, k), Goal::Min))
}

pub fn select_rejected_test_with<M: PassMatrix + ?Sized>(m: &M, tie: &mut TieBreak) -> Option<usize> {
    let n = m.size();
    let cols = m.col_sums();
    tie.pick(&optimal_set(n, |k| cols[k], |k| cols[k] < n, Goal::Max))
}

pub fn select_rejected_code_with<M: PassMatrix + ?Sized>(
    m: &M,
    k_dagger: usize,
    tie: &mut TieBreak,
) -> Option<usize> {
    let rows = m.row_sums();
    tie.pick(&optimal_set(m.size(), |j| rows[j], |j| !m.passes(j, k_dagger), Goal::Min))
}

/// Code with the most passing tests (lowest index on ties). Always defined for
/// a non-empty matrix.
pub fn select_chosen_code<M: PassMatrix + ?Sized>(m: &M) -> usize {
    select_chosen_code_with(m, &mut TieBreak::LowestIndex).expect("matrix must be non-empty")
}

/// Hardest test that the chosen code passes.
pub fn select_chosen_test<M: PassMatrix + ?Sized>(m: &M, j_prime: usize) -> Option<usize> {
    select_chosen_test_with(m, j_prime, &mut TieBreak::LowestIndex)
}

/// Easiest test that at least one code fails.
pub fn select_rejected_test<M: PassMatrix + ?Sized>(m: &M) -> Option<usize> {
    select_rejected_test_with(m, &mut TieBreak::LowestIndex)
}

/// Code with the fewest passing tests among those failing `k_dagger`.
pub fn select_rejected_code<M: PassMatrix + ?Sized>(m: &M, k_dagger: usize) -> Option<usize> {
    select_rejected_code_with(m, k_dagger, &mut TieBreak::LowestIndex)
}

/// Runs the four selections in order j' → k' → k† → j†.
pub fn select_all_with<M: PassMatrix + ?Sized>(m: &M, tie: &mut TieBreak) -> SelectionResult {
    if m.size() == 0 {
        return SelectionResult::default();
    }
    let j_prime = select_chosen_code_with(m, tie);
    let k_prime = j_prime.and_then(|j| select_chosen_test_with(m, j, tie));
    let k_dagger = select_rejected_test_with(m, tie);
    let j_dagger = k_dagger.and_then(|k| select_rejected_code_with(m, k, tie));
    SelectionResult {
        j_prime,
        k_prime,
        k_dagger,
        j_dagger,
    }
}

pub fn select_all<M: PassMatrix + ?Sized>(m: &M) -> SelectionResult {
    select_all_with(m, &mut TieBreak::LowestIndex)
}
