use serde::{Deserialize, Serialize};

use super::{loss, loss_gradient, mean_margin, reward_gap, DplError, DplHyperparams, TabularPolicy, ToyDataset};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub steps: usize,
    pub learning_rate: T,
}

/// Loss before every step, plus the preference metric (mean DPO margin, or
/// KTO desirable/undesirable reward gap) at start and end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace<T> {
    pub losses: Vec<T>,
    pub final_loss: T,
    pub initial_metric: T,
    pub final_metric: T,
}

fn metric<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &ToyDataset,
) -> Result<T, DplError> {
    match data {
        ToyDataset::Dpo(d) => mean_margin(policy, reference, d),
        ToyDataset::Kto(d) => reward_gap(policy, reference, d),
    }
}

/// Full-batch gradient descent on the policy scores, starting from the
/// reference.
pub fn train_toy<T: Scalar>(
    reference: &TabularPolicy<T>,
    data: &ToyDataset,
    hyper: &DplHyperparams<T>,
    config: &TrainConfig<T>,
) -> Result<(TabularPolicy<T>, TrainingTrace<T>), DplError> {
    if config.steps == 0 {
        return Err(DplError::NoSteps);
    }
    hyper.validate()?;
    if data.is_empty() {
        return Err(DplError::EmptyDataset);
    }
    let mut policy = reference.clone();
    let initial_metric = metric(&policy, reference, data)?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let value = loss(&policy, reference, data, hyper)?;
        if !value.is_finite() {
            return Err(DplError::Diverged { step });
        }
        losses.push(value);
        let grad = loss_gradient(&policy, reference, data, hyper)?;
        for (row, grow) in policy.scores_mut().iter_mut().zip(&grad) {
            for (s, &g) in row.iter_mut().zip(grow) {
                *s = *s - config.learning_rate * g;
            }
        }
        if policy.scores().iter().flatten().any(|s| !s.is_finite()) {
            return Err(DplError::Diverged { step });
        }
    }
    let final_loss = loss(&policy, reference, data, hyper)?;
    if !final_loss.is_finite() {
        return Err(DplError::Diverged { step: config.steps });
    }
    let final_metric = metric(&policy, reference, data)?;
    Ok((
        policy,
        TrainingTrace {
            losses,
            final_loss,
            initial_metric,
            final_metric,
        },
    ))
}
