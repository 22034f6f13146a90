//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::process::Command;

use dstc::dpl::{self, DplHyperparams, KtoState, LabeledIdx, PairIdx, TabularPolicy, ToyDataset};
use dstc::ingest::{Candidate, CandidateSet, InstructionRecord};
use dstc::select::{BinaryMatrix, PassMatrix, SelectionResult};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn python_available() -> bool {
    Command::new("python3")
        .arg("-c")
        .arg("pass")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

pub fn random_matrix<R: Rng>(n: usize, rng: &mut R) -> BinaryMatrix {
    let mut m = BinaryMatrix::zeros(n);
    for j in 0..n {
        for k in 0..n {
            m.set(j, k, rng.gen_bool(0.5));
        }
    }
    m
}

/// Selection by exhaustive search over every candidate index: the optimal
/// value is found first, then the smallest index attaining it.
pub fn brute_force_select(rows: &[Vec<u8>]) -> SelectionResult {
    let n = rows.len();
    let row_sum = |j: usize| rows[j].iter().map(|&v| v as usize).sum::<usize>();
    let col_sum = |k: usize| rows.iter().map(|r| r[k] as usize).sum::<usize>();
    let first_optimal = |feasible: &dyn Fn(usize) -> bool, score: &dyn Fn(usize) -> usize, max: bool| {
        let candidates: Vec<usize> = (0..n).filter(|&i| feasible(i)).collect();
        let best = if max {
            candidates.iter().map(|&i| score(i)).max()
        } else {
            candidates.iter().map(|&i| score(i)).min()
        }?;
        candidates.into_iter().find(|&i| score(i) == best)
    };

    let j_prime = first_optimal(&|_| true, &row_sum, true);
    let k_prime = j_prime.and_then(|jp| first_optimal(&|k| rows[jp][k] == 1, &col_sum, false));
    let k_dagger = first_optimal(&|k| col_sum(k) < n, &col_sum, true);
    let j_dagger = k_dagger.and_then(|kd| first_optimal(&|j| rows[j][kd] == 0, &row_sum, false));
    SelectionResult {
        j_prime,
        k_prime,
        k_dagger,
        j_dagger,
    }
}

/// Feasibility and dominance properties every selection must satisfy.
pub fn check_invariants(m: &BinaryMatrix, sel: &SelectionResult) -> Result<(), String> {
    if let (Some(jp), Some(kp)) = (sel.j_prime, sel.k_prime) {
        if !m.passes(jp, kp) {
            return Err(format!("r[j'][k'] = 0 for {:?}", m.to_rows()));
        }
    }
    if let (Some(jd), Some(kd)) = (sel.j_dagger, sel.k_dagger) {
        if m.passes(jd, kd) {
            return Err(format!("r[j†][k†] = 1 for {:?}", m.to_rows()));
        }
    }
    if let (Some(jp), Some(jd)) = (sel.j_prime, sel.j_dagger) {
        if m.row_sum(jp) < m.row_sum(jd) {
            return Err(format!("row_sum(j') < row_sum(j†) for {:?}", m.to_rows()));
        }
    }
    Ok(())
}

pub fn candidate_set(id: &str, n: usize) -> CandidateSet {
    CandidateSet::new(
        InstructionRecord {
            id: id.to_string(),
            instruction_text: format!("Task {id}."),
            entry_point: None,
        },
        (0..n)
            .map(|j| Candidate::from_parts(format!("def f():\n    return {j}"), format!("assert f() == {j}")))
            .collect(),
    )
}

pub fn random_policy<R: Rng>(shape: &[usize], rng: &mut R) -> TabularPolicy<f64> {
    TabularPolicy::new(
        shape
            .iter()
            .map(|&n| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect(),
    )
    .unwrap()
}

pub fn random_pairs<R: Rng>(shape: &[usize], count: usize, rng: &mut R) -> Vec<PairIdx> {
    (0..count)
        .map(|_| {
            let prompt = rng.gen_range(0..shape.len());
            let chosen = rng.gen_range(0..shape[prompt]);
            let mut rejected = rng.gen_range(0..shape[prompt] - 1);
            if rejected >= chosen {
                rejected += 1;
            }
            PairIdx {
                prompt,
                chosen,
                rejected,
            }
        })
        .collect()
}

pub fn random_labeled<R: Rng>(shape: &[usize], count: usize, rng: &mut R) -> Vec<LabeledIdx> {
    (0..count)
        .map(|_| {
            let prompt = rng.gen_range(0..shape.len());
            LabeledIdx {
                prompt,
                response: rng.gen_range(0..shape[prompt]),
                desirable: rng.gen_bool(0.5),
            }
        })
        .collect()
}

pub fn random_hyper<R: Rng>(rng: &mut R) -> DplHyperparams<f64> {
    DplHyperparams {
        beta: rng.gen_range(0.1..2.0),
        lambda_d: rng.gen_range(0.5..2.0),
        lambda_u: rng.gen_range(0.5..2.0),
    }
}

/// Central differences of the loss with `z0` frozen at `policy`.
pub fn finite_difference(
    policy: &TabularPolicy<f64>,
    reference: &TabularPolicy<f64>,
    data: &ToyDataset,
    hyper: &DplHyperparams<f64>,
    h: f64,
) -> Vec<Vec<f64>> {
    type Eval<'a> = Box<dyn Fn(&TabularPolicy<f64>) -> f64 + 'a>;
    let eval: Eval = match data {
        ToyDataset::Dpo(d) => Box::new(move |p| dpl::dpo_loss(p, reference, d, hyper).unwrap()),
        ToyDataset::Kto(d) => {
            let z0 = dpl::kto_z0(policy, reference, d.iter().map(|e| e.prompt)).z0;
            Box::new(move |p| dpl::kto_loss_at(p, reference, d, hyper, KtoState { z0 }).unwrap())
        }
    };
    let mut out: Vec<Vec<f64>> = policy.shape().into_iter().map(|n| vec![0.0; n]).collect();
    for (x, row) in out.iter_mut().enumerate() {
        for (a, g) in row.iter_mut().enumerate() {
            let mut plus = policy.clone();
            plus.scores_mut()[x][a] += h;
            let mut minus = policy.clone();
            minus.scores_mut()[x][a] -= h;
            *g = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
    }
    out
}

/// Largest componentwise `|a − n| / max(|a|, |n|, 1e-4)`. The floor keeps
/// components that are zero up to rounding from dominating.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
