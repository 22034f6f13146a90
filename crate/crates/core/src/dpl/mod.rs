//! Tabular direct preference learning: Bradley-Terry preference probability,
//! DPO and KTO losses with exact gradients, on finite prompt × response
//! policies.
//!
//! A policy stores one unnormalized score per (prompt, response); the
//! distribution is the per-prompt softmax. The implicit reward of a response
//! is `ln π(a|x) − ln π_ref(a|x)`.
//!
//! DPO, per pair: `−ln σ(β (r(x, a⁺) − r(x, a⁻)))`.
//!
//! KTO, per example: `λ_y − v(x, a)` with
//! `v = λ_D σ(β (r − z0))` for desirable and `λ_U σ(β (z0 − r))` otherwise,
//! where `z0` is the mean over dataset prompts of `KL(π(·|x) ‖ π_ref(·|x))`.
//! Gradients hold `z0` fixed within a step.

mod train;
mod universe;

pub use train::{train_toy, TrainConfig, TrainingTrace};
pub use universe::{Universe, UniverseError, UniverseFile, UniversePrompt};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{log_sigmoid, log_sum_exp, sigmoid, softplus, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum DplError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("prompt {prompt} / response {response} is outside the policy table")]
    OutOfRange { prompt: usize, response: usize },
    #[error("zero probability for prompt {prompt} / response {response}; implicit reward undefined")]
    ZeroProbability { prompt: usize, response: usize },
    #[error("policy and reference tables have different shapes")]
    ShapeMismatch,
    #[error("invalid policy table: {0}")]
    InvalidPolicy(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("steps must be at least 1")]
    NoSteps,
}

/// Per-prompt categorical distributions stored as logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy<T> {
    scores: Vec<Vec<T>>,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn new(scores: Vec<Vec<T>>) -> Result<Self, DplError> {
        for (x, row) in scores.iter().enumerate() {
            if row.is_empty() {
                return Err(DplError::InvalidPolicy(format!("prompt {x} has no responses")));
            }
            if row.iter().any(|s| !s.is_finite()) {
                return Err(DplError::InvalidPolicy(format!("prompt {x} has a non-finite score")));
            }
        }
        Ok(TabularPolicy { scores })
    }

    /// Uniform distributions with the given number of responses per prompt.
    pub fn uniform(shape: &[usize]) -> Self {
        TabularPolicy {
            scores: shape.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.scores.len()
    }

    pub fn num_responses(&self, x: usize) -> usize {
        self.scores[x].len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.scores.iter().map(Vec::len).collect()
    }

    pub fn scores(&self) -> &[Vec<T>] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.scores
    }

    fn check(&self, x: usize, a: usize) -> Result<(), DplError> {
        if x < self.scores.len() && a < self.scores[x].len() {
            Ok(())
        } else {
            Err(DplError::OutOfRange { prompt: x, response: a })
        }
    }

    pub fn log_probs(&self, x: usize) -> Vec<T> {
        let row = &self.scores[x];
        let lse = log_sum_exp(row);
        row.iter().map(|&s| s - lse).collect()
    }

    pub fn probs(&self, x: usize) -> Vec<T> {
        self.log_probs(x).into_iter().map(T::exp).collect()
    }

    pub fn log_prob(&self, x: usize, a: usize) -> Result<T, DplError> {
        self.check(x, a)?;
        Ok(self.scores[x][a] - log_sum_exp(&self.scores[x]))
    }

    pub fn prob(&self, x: usize, a: usize) -> Result<T, DplError> {
        self.log_prob(x, a).map(T::exp)
    }
}

fn same_shape<T: Scalar>(a: &TabularPolicy<T>, b: &TabularPolicy<T>) -> Result<(), DplError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DplError::ShapeMismatch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DplHyperparams<T> {
    pub beta: T,
    pub lambda_d: T,
    pub lambda_u: T,
}

impl<T: Scalar> DplHyperparams<T> {
    pub fn with_beta(beta: T) -> Self {
        DplHyperparams {
            beta,
            lambda_d: T::one(),
            lambda_u: T::one(),
        }
    }

    /// β = 0.2.
    pub fn dpo_default() -> Self {
        Self::with_beta(T::lit(0.2))
    }

    /// β = 0.3.
    pub fn kto_default() -> Self {
        Self::with_beta(T::lit(0.3))
    }

    pub fn validate(&self) -> Result<(), DplError> {
        let positive = |v: T| v.is_finite() && v > T::zero();
        if !positive(self.beta) {
            return Err(DplError::InvalidHyperparams("beta must be positive".into()));
        }
        if !positive(self.lambda_d) || !positive(self.lambda_u) {
            return Err(DplError::InvalidHyperparams("lambda_d and lambda_u must be positive".into()));
        }
        Ok(())
    }
}

/// A DPO record with prompt and responses resolved to table indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairIdx {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// A KTO record with prompt and response resolved to table indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledIdx {
    pub prompt: usize,
    pub response: usize,
    pub desirable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToyDataset {
    Dpo(Vec<PairIdx>),
    Kto(Vec<LabeledIdx>),
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        match self {
            ToyDataset::Dpo(d) => d.len(),
            ToyDataset::Kto(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    Kto,
}

/// `ln π(a|x) / π_ref(a|x)`.
pub fn implicit_reward<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    x: usize,
    a: usize,
) -> Result<T, DplError> {
    let lp = policy.log_prob(x, a)?;
    let lr = reference.log_prob(x, a)?;
    if !lr.is_finite() || lr.exp() == T::zero() || !lp.is_finite() {
        return Err(DplError::ZeroProbability { prompt: x, response: a });
    }
    Ok(lp - lr)
}

/// Probability that a response with reward `r1` is preferred to one with `r2`.
pub fn bt_preference_prob<T: Scalar>(r1: T, r2: T) -> T {
    sigmoid(r1 - r2)
}

/// `ln` of [`bt_preference_prob`], finite where the probability underflows.
pub fn bt_log_preference_prob<T: Scalar>(r1: T, r2: T) -> T {
    log_sigmoid(r1 - r2)
}

fn pair_margin<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    p: &PairIdx,
) -> Result<T, DplError> {
    Ok(implicit_reward(policy, reference, p.prompt, p.chosen)?
        - implicit_reward(policy, reference, p.prompt, p.rejected)?)
}

/// Mean over pairs of `−ln σ(β · margin)`.
pub fn dpo_loss<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &[PairIdx],
    hyper: &DplHyperparams<T>,
) -> Result<T, DplError> {
    hyper.validate()?;
    same_shape(policy, reference)?;
    if data.is_empty() {
        return Err(DplError::EmptyDataset);
    }
    let mut total = T::zero();
    for p in data {
        total = total + softplus(-hyper.beta * pair_margin(policy, reference, p)?);
    }
    Ok(total / T::from_count(data.len()))
}

/// Mean implicit-reward margin of chosen over rejected.
pub fn mean_margin<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &[PairIdx],
) -> Result<T, DplError> {
    if data.is_empty() {
        return Err(DplError::EmptyDataset);
    }
    let mut total = T::zero();
    for p in data {
        total = total + pair_margin(policy, reference, p)?;
    }
    Ok(total / T::from_count(data.len()))
}

/// KL reference point for KTO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtoState<T> {
    pub z0: T,
}

/// Exact `KL(π(·|x) ‖ π_ref(·|x))` by summation over the response set.
pub fn kl_divergence<T: Scalar>(policy: &TabularPolicy<T>, reference: &TabularPolicy<T>, x: usize) -> T {
    let lp = policy.log_probs(x);
    let lr = reference.log_probs(x);
    lp.iter()
        .zip(&lr)
        .map(|(&p, &r)| p.exp() * (p - r))
        .fold(T::zero(), |a, b| a + b)
        .max(T::zero())
}

/// Mean KL over the given prompt occurrences (one entry per dataset record).
pub fn kto_z0<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    prompts: impl IntoIterator<Item = usize>,
) -> KtoState<T> {
    let mut total = T::zero();
    let mut count = 0usize;
    for x in prompts {
        total = total + kl_divergence(policy, reference, x);
        count += 1;
    }
    let z0 = if count == 0 {
        T::zero()
    } else {
        total / T::from_count(count)
    };
    KtoState { z0 }
}

/// `λ_y − v` for one example with implicit reward `reward`.
pub fn kto_example_loss<T: Scalar>(reward: T, z0: T, desirable: bool, hyper: &DplHyperparams<T>) -> T {
    if desirable {
        hyper.lambda_d - hyper.lambda_d * sigmoid(hyper.beta * (reward - z0))
    } else {
        hyper.lambda_u - hyper.lambda_u * sigmoid(hyper.beta * (z0 - reward))
    }
}

/// KTO loss at a given reference point.
pub fn kto_loss_at<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &[LabeledIdx],
    hyper: &DplHyperparams<T>,
    state: KtoState<T>,
) -> Result<T, DplError> {
    hyper.validate()?;
    same_shape(policy, reference)?;
    if data.is_empty() {
        return Err(DplError::EmptyDataset);
    }
    let mut total = T::zero();
    for e in data {
        let r = implicit_reward(policy, reference, e.prompt, e.response)?;
        total = total + kto_example_loss(r, state.z0, e.desirable, hyper);
    }
    Ok(total / T::from_count(data.len()))
}

pub fn kto_loss<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &[LabeledIdx],
    hyper: &DplHyperparams<T>,
) -> Result<T, DplError> {
    same_shape(policy, reference)?;
    let state = kto_z0(policy, reference, data.iter().map(|e| e.prompt));
    kto_loss_at(policy, reference, data, hyper, state)
}

/// Mean reward on desirable examples minus mean reward on undesirable ones;
/// with no undesirable examples, the desirable mean alone.
pub fn reward_gap<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &[LabeledIdx],
) -> Result<T, DplError> {
    let mean = |want: bool| -> Result<Option<T>, DplError> {
        let mut total = T::zero();
        let mut n = 0;
        for e in data.iter().filter(|e| e.desirable == want) {
            total = total + implicit_reward(policy, reference, e.prompt, e.response)?;
            n += 1;
        }
        Ok((n > 0).then(|| total / T::from_count(n)))
    };
    match (mean(true)?, mean(false)?) {
        (Some(d), Some(u)) => Ok(d - u),
        (Some(d), None) => Ok(d),
        (None, Some(u)) => Ok(-u),
        (None, None) => Err(DplError::EmptyDataset),
    }
}

pub fn loss<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &ToyDataset,
    hyper: &DplHyperparams<T>,
) -> Result<T, DplError> {
    match data {
        ToyDataset::Dpo(d) => dpo_loss(policy, reference, d, hyper),
        ToyDataset::Kto(d) => kto_loss(policy, reference, d, hyper),
    }
}

/// Adds `coef · ∂ ln π(a|x) / ∂ scores[x]` into `grad[x]`.
fn add_log_prob_grad<T: Scalar>(grad: &mut [T], probs: &[T], a: usize, coef: T) {
    for (b, (g, &p)) in grad.iter_mut().zip(probs).enumerate() {
        let indicator = if b == a { T::one() } else { T::zero() };
        *g = *g + coef * (indicator - p);
    }
}

/// Exact gradient of the loss with respect to the policy scores; same shape
/// as the policy table. KTO treats `z0` as a constant.
pub fn loss_gradient<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &ToyDataset,
    hyper: &DplHyperparams<T>,
) -> Result<Vec<Vec<T>>, DplError> {
    hyper.validate()?;
    same_shape(policy, reference)?;
    if data.is_empty() {
        return Err(DplError::EmptyDataset);
    }
    let mut grad: Vec<Vec<T>> = policy.shape().into_iter().map(|n| vec![T::zero(); n]).collect();
    let n = T::from_count(data.len());
    match data {
        ToyDataset::Dpo(pairs) => {
            for p in pairs {
                let m = hyper.beta * pair_margin(policy, reference, p)?;
                // d/dm softplus(-m) = -σ(-m); the softmax terms of chosen and
                // rejected cancel within a prompt.
                let coef = hyper.beta * sigmoid(-m) / n;
                grad[p.prompt][p.chosen] = grad[p.prompt][p.chosen] - coef;
                grad[p.prompt][p.rejected] = grad[p.prompt][p.rejected] + coef;
            }
        }
        ToyDataset::Kto(examples) => {
            let z0 = kto_z0(policy, reference, examples.iter().map(|e| e.prompt)).z0;
            for e in examples {
                let r = implicit_reward(policy, reference, e.prompt, e.response)?;
                let d_loss_d_r = if e.desirable {
                    let u = hyper.beta * (r - z0);
                    -hyper.lambda_d * hyper.beta * sigmoid(u) * sigmoid(-u)
                } else {
                    let w = hyper.beta * (z0 - r);
                    hyper.lambda_u * hyper.beta * sigmoid(w) * sigmoid(-w)
                };
                let probs = policy.probs(e.prompt);
                add_log_prob_grad(&mut grad[e.prompt], &probs, e.response, d_loss_d_r / n);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIG1: f64 = 0.7310585786300049;

    fn two_response() -> (TabularPolicy<f64>, TabularPolicy<f64>) {
        // Scores (1, 0) give probabilities (σ(1), σ(−1)) ≈ (0.7311, 0.2689).
        (
            TabularPolicy::new(vec![vec![1.0, 0.0]]).unwrap(),
            TabularPolicy::uniform(&[2]),
        )
    }

    #[test]
    fn policy_validation() {
        assert!(TabularPolicy::<f64>::new(vec![vec![]]).is_err());
        assert!(TabularPolicy::new(vec![vec![f64::NAN]]).is_err());
        let p = TabularPolicy::new(vec![vec![0.3, -2.0, 5.0]]).unwrap();
        let s: f64 = p.probs(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.prob(1, 0).is_err());
    }

    #[test]
    fn implicit_reward_values() {
        let (pi, r) = two_response();
        assert_eq!(implicit_reward(&r, &r, 0, 1).unwrap(), 0.0);
        assert!((implicit_reward(&pi, &r, 0, 0).unwrap() - (SIG1 / 0.5).ln()).abs() < 1e-12);
        assert!((implicit_reward(&pi, &r, 0, 0).unwrap() - 0.3799).abs() < 1e-4);
        let quarter = TabularPolicy::new(vec![vec![0.0, 3f64.ln()]]).unwrap();
        assert!((implicit_reward(&quarter, &r, 0, 0).unwrap() - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_probability_errors() {
        let reference = TabularPolicy::new(vec![vec![0.0, -1e6]]).unwrap();
        let pi = TabularPolicy::uniform(&[2]);
        assert_eq!(
            implicit_reward(&pi, &reference, 0, 1),
            Err(DplError::ZeroProbability { prompt: 0, response: 1 })
        );
    }

    #[test]
    fn bt_values() {
        assert_eq!(bt_preference_prob(0.3f64, 0.3), 0.5);
        assert!((bt_preference_prob(2.0f64, 1.0) - 0.7310585786).abs() < 1e-10);
        let tiny = bt_preference_prob(0.0f64, 1000.0);
        assert!(tiny.is_finite() && (0.0..1e-300).contains(&tiny));
        assert!((bt_log_preference_prob(0.0f64, 1000.0) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn dpo_worked_case() {
        let (pi, r) = two_response();
        let h = DplHyperparams::with_beta(1.0);
        let fwd = [PairIdx { prompt: 0, chosen: 0, rejected: 1 }];
        let rev = [PairIdx { prompt: 0, chosen: 1, rejected: 0 }];
        let a = dpo_loss(&pi, &r, &fwd, &h).unwrap();
        let b = dpo_loss(&pi, &r, &rev, &h).unwrap();
        assert!((a - (-SIG1.ln())).abs() < 1e-12);
        assert!((a - 0.313262).abs() < 1e-6);
        assert!((b - 1.313262).abs() < 1e-6);
        assert!((b - a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dpo_identity_and_errors() {
        let r = TabularPolicy::<f64>::uniform(&[3]);
        let d = [PairIdx { prompt: 0, chosen: 2, rejected: 0 }];
        assert!((dpo_loss(&r, &r, &d, &DplHyperparams::dpo_default()).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(dpo_loss(&r, &r, &[], &DplHyperparams::dpo_default()), Err(DplError::EmptyDataset));
        assert!(dpo_loss(&r, &r, &d, &DplHyperparams::with_beta(0.0)).is_err());
    }

    #[test]
    fn z0_values() {
        let (pi, r) = two_response();
        assert_eq!(kto_z0(&r, &r, [0, 0]).z0, 0.0);
        let expected = SIG1 * (SIG1 / 0.5).ln() + (1.0 - SIG1) * ((1.0 - SIG1) / 0.5).ln();
        let z0 = kto_z0(&pi, &r, [0]).z0;
        assert!((z0 - expected).abs() < 1e-12);
        assert!((z0 - 0.1110).abs() < 1e-4);
    }

    #[test]
    fn kto_values() {
        let r = TabularPolicy::<f64>::uniform(&[2]);
        let h = DplHyperparams::with_beta(0.7);
        let d = [
            LabeledIdx { prompt: 0, response: 0, desirable: true },
            LabeledIdx { prompt: 0, response: 1, desirable: false },
        ];
        assert!((kto_loss(&r, &r, &d, &h).unwrap() - 0.5).abs() < 1e-15);
        let one = DplHyperparams::with_beta(1.0);
        assert!((kto_example_loss(1.0, 0.0, true, &one) - (1.0 - SIG1)).abs() < 1e-12);
        assert!((kto_example_loss(1.0, 0.0, true, &one) - 0.268941).abs() < 1e-6);
        assert!((kto_example_loss(1.0, 0.0, false, &one) - 0.731059).abs() < 1e-6);
        assert_eq!(kto_loss(&r, &r, &[], &h), Err(DplError::EmptyDataset));
    }

    #[test]
    fn dpo_gradient_sign_at_reference() {
        let r = TabularPolicy::<f64>::uniform(&[3, 2]);
        let d = ToyDataset::Dpo(vec![PairIdx { prompt: 0, chosen: 1, rejected: 2 }]);
        let g = loss_gradient(&r, &r, &d, &DplHyperparams::dpo_default()).unwrap();
        assert!(g[0][1] < 0.0);
        assert!(g[0][2] > 0.0);
        assert!(g[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f32_policy_works() {
        let pi = TabularPolicy::<f32>::new(vec![vec![1.0, 0.0]]).unwrap();
        let r = TabularPolicy::<f32>::uniform(&[2]);
        let d = [PairIdx { prompt: 0, chosen: 0, rejected: 1 }];
        let l = dpo_loss(&pi, &r, &d, &DplHyperparams::with_beta(1.0)).unwrap();
        assert!((l - 0.313262).abs() < 1e-5);
    }
}
