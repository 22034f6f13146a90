//! Finite prompt/response universes that map emitted dataset records onto
//! policy table indices.

use std::path::{Path, PathBuf};

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LabeledIdx, PairIdx, TabularPolicy, ToyDataset};
use crate::pairs::{KtoExample, PreferencePair};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum UniverseError {
    #[error("cannot read universe {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid universe file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("prompt {0:?} is not in the universe")]
    UnknownPrompt(String),
    #[error("response is not in the response set of prompt {prompt:?}")]
    UnknownResponse { prompt: String },
    #[error("invalid universe: {0}")]
    Invalid(String),
}

/// On-disk universe definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseFile {
    pub prompts: Vec<UniversePrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversePrompt {
    pub prompt: String,
    pub responses: Vec<String>,
    /// Reference-policy logits, one per response; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    prompts: IndexMap<String, IndexSet<String>>,
    reference_scores: Vec<Vec<f64>>,
}

impl Universe {
    pub fn from_definition(def: UniverseFile) -> Result<Self, UniverseError> {
        let mut prompts = IndexMap::new();
        let mut reference_scores = Vec::new();
        for p in def.prompts {
            let responses: IndexSet<String> = p.responses.iter().cloned().collect();
            if responses.is_empty() {
                return Err(UniverseError::Invalid(format!("prompt {:?} has no responses", p.prompt)));
            }
            if responses.len() != p.responses.len() {
                return Err(UniverseError::Invalid(format!("prompt {:?} repeats a response", p.prompt)));
            }
            let scores = p.reference_scores.unwrap_or_else(|| vec![0.0; responses.len()]);
            if scores.len() != responses.len() || scores.iter().any(|s| !s.is_finite()) {
                return Err(UniverseError::Invalid(format!(
                    "prompt {:?} needs one finite reference score per response",
                    p.prompt
                )));
            }
            if prompts.insert(p.prompt.clone(), responses).is_some() {
                return Err(UniverseError::Invalid(format!("duplicate prompt {:?}", p.prompt)));
            }
            reference_scores.push(scores);
        }
        Ok(Universe {
            prompts,
            reference_scores,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, UniverseError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| UniverseError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_definition(serde_json::from_str(&text)?)
    }

    fn from_texts<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> Self {
        let mut prompts: IndexMap<String, IndexSet<String>> = IndexMap::new();
        for (prompt, response) in items {
            prompts.entry(prompt.to_string()).or_default().insert(response.to_string());
        }
        let reference_scores = prompts.values().map(|r| vec![0.0; r.len()]).collect();
        Universe {
            prompts,
            reference_scores,
        }
    }

    /// Universe spanned by the responses of a DPO dataset, uniform reference.
    pub fn from_pairs(pairs: &[PreferencePair]) -> Self {
        Self::from_texts(pairs.iter().flat_map(|p| {
            [(p.prompt.as_str(), p.chosen.as_str()), (p.prompt.as_str(), p.rejected.as_str())]
        }))
    }

    /// Universe spanned by the completions of a KTO dataset, uniform reference.
    pub fn from_kto(examples: &[KtoExample]) -> Self {
        Self::from_texts(examples.iter().map(|e| (e.prompt.as_str(), e.completion.as_str())))
    }

    pub fn definition(&self) -> UniverseFile {
        UniverseFile {
            prompts: self
                .prompts
                .iter()
                .zip(&self.reference_scores)
                .map(|((prompt, responses), scores)| UniversePrompt {
                    prompt: prompt.clone(),
                    responses: responses.iter().cloned().collect(),
                    reference_scores: Some(scores.clone()),
                })
                .collect(),
        }
    }

    pub fn reference_policy<T: Scalar>(&self) -> TabularPolicy<T> {
        TabularPolicy::new(
            self.reference_scores
                .iter()
                .map(|row| row.iter().map(|&s| T::lit(s)).collect())
                .collect(),
        )
        .expect("universe scores validated on construction")
    }

    fn lookup(&self, prompt: &str, response: &str) -> Result<(usize, usize), UniverseError> {
        let (x, _, responses) = self
            .prompts
            .get_full(prompt)
            .ok_or_else(|| UniverseError::UnknownPrompt(prompt.to_string()))?;
        let a = responses.get_index_of(response).ok_or_else(|| UniverseError::UnknownResponse {
            prompt: prompt.to_string(),
        })?;
        Ok((x, a))
    }

    pub fn intern_pairs(&self, pairs: &[PreferencePair]) -> Result<ToyDataset, UniverseError> {
        pairs
            .iter()
            .map(|p| {
                let (x, chosen) = self.lookup(&p.prompt, &p.chosen)?;
                let (_, rejected) = self.lookup(&p.prompt, &p.rejected)?;
                Ok(PairIdx { prompt: x, chosen, rejected })
            })
            .collect::<Result<_, _>>()
            .map(ToyDataset::Dpo)
    }

    pub fn intern_kto(&self, examples: &[KtoExample]) -> Result<ToyDataset, UniverseError> {
        examples
            .iter()
            .map(|e| {
                let (x, a) = self.lookup(&e.prompt, &e.completion)?;
                Ok(LabeledIdx { prompt: x, response: a, desirable: e.desirable() })
            })
            .collect::<Result<_, _>>()
            .map(ToyDataset::Kto)
    }

    pub fn prompt_text(&self, x: usize) -> Option<&str> {
        self.prompts.get_index(x).map(|(p, _)| p.as_str())
    }

    pub fn response_text(&self, x: usize, a: usize) -> Option<&str> {
        self.prompts.get_index(x)?.1.get_index(a).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::Provenance;

    fn meta() -> Provenance {
        Provenance { instruction_id: "i".into(), j_prime: None, k_prime: None, j_dagger: None, k_dagger: None }
    }

    #[test]
    fn interns_pairs() {
        let pairs = vec![
            PreferencePair { prompt: "p".into(), chosen: "good".into(), rejected: "bad".into(), meta: meta() },
            PreferencePair { prompt: "q".into(), chosen: "a".into(), rejected: "b".into(), meta: meta() },
        ];
        let u = Universe::from_pairs(&pairs);
        let ToyDataset::Dpo(d) = u.intern_pairs(&pairs).unwrap() else { panic!() };
        assert_eq!(d[1], PairIdx { prompt: 1, chosen: 0, rejected: 1 });
        assert_eq!(u.reference_policy::<f64>().shape(), vec![2, 2]);
        assert_eq!(u.response_text(0, 1), Some("bad"));
    }

    #[test]
    fn unknown_response_errors() {
        let u = Universe::from_definition(UniverseFile {
            prompts: vec![UniversePrompt { prompt: "p".into(), responses: vec!["x".into()], reference_scores: None }],
        })
        .unwrap();
        let e = KtoExample { prompt: "p".into(), completion: "y".into(), label: 1, meta: meta() };
        assert!(matches!(u.intern_kto(&[e]), Err(UniverseError::UnknownResponse { .. })));
    }

    #[test]
    fn definition_validation() {
        let bad = UniverseFile {
            prompts: vec![UniversePrompt {
                prompt: "p".into(),
                responses: vec!["x".into(), "y".into()],
                reference_scores: Some(vec![0.0]),
            }],
        };
        assert!(Universe::from_definition(bad).is_err());
    }
}
