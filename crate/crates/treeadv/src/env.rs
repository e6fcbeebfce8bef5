//! Synthetic sequence tasks with verifiable terminal rewards.
//!
//! Each family maps a prompt to a unique expected completion of the form
//! `answer tokens, delimiter, EOS`. The delimiter sits mid-sequence so a
//! correct policy exercises the earliest-branching gate, and the prompt
//! itself ends with the delimiter as a query marker. Rewards are binary
//! with a length-penalty override: any completion longer than the cap
//! scores -1 regardless of content.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::TokenId;

/// Fixed vocabulary layout: payload digits first, then the four reserved
/// tokens BOS, EOS, delimiter, and stall.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub vocab_size: usize,
}

impl Vocabulary {
    pub const RESERVED: usize = 4;

    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > Self::RESERVED + 1, "vocabulary too small");
        Vocabulary { vocab_size }
    }

    /// Number of payload digit tokens (ids `0..digit_count`).
    pub fn digit_count(&self) -> usize {
        self.vocab_size - Self::RESERVED
    }

    pub fn bos(&self) -> TokenId {
        TokenId((self.vocab_size - 4) as u16)
    }

    pub fn eos(&self) -> TokenId {
        TokenId((self.vocab_size - 3) as u16)
    }

    pub fn delimiter(&self) -> TokenId {
        TokenId((self.vocab_size - 2) as u16)
    }

    pub fn stall(&self) -> TokenId {
        TokenId((self.vocab_size - 1) as u16)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Parity,
    Copy,
    ModularSum,
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskFamily::Parity => write!(f, "parity"),
            TaskFamily::Copy => write!(f, "copy"),
            TaskFamily::ModularSum => write!(f, "modular-sum"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub vocab_size: usize,
    /// Number of payload tokens in every prompt (fixed per run so the
    /// policy window geometry is stable across instances).
    pub payload_len: usize,
    /// Digit alphabet size: parity uses 2, copy/modular-sum use `base`.
    pub base: usize,
    pub length_cap: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("task.{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

impl TaskConfig {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |field, message: String| Err(TaskError::Invalid { field, message });
        if self.vocab_size <= Vocabulary::RESERVED + 1 {
            return invalid(
                "vocab_size",
                format!("must exceed {} (reserved tokens plus one digit)", Vocabulary::RESERVED + 1),
            );
        }
        let base = if self.family == TaskFamily::Parity { 2 } else { self.base };
        if base < 2 || base > self.vocab().digit_count() {
            return invalid(
                "base",
                format!("must be in [2, {}]", self.vocab().digit_count()),
            );
        }
        if self.payload_len == 0 {
            return invalid("payload_len", "must be at least 1".into());
        }
        let answer_len = match self.family {
            TaskFamily::Copy => self.payload_len,
            _ => 1,
        };
        // Solvability: the unique correct completion must fit under the cap.
        if answer_len + 2 > self.length_cap {
            return invalid(
                "length_cap",
                format!("must be at least {} to fit a correct completion", answer_len + 2),
            );
        }
        Ok(())
    }

    fn effective_base(&self) -> usize {
        if self.family == TaskFamily::Parity {
            2
        } else {
            self.base
        }
    }
}

/// One synthetic problem with a deterministic verifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<TokenId>,
    /// Answer tokens; the full correct completion is
    /// `answer ++ [delimiter, EOS]`.
    pub answer: Vec<TokenId>,
    pub delimiter_tokens: BTreeSet<TokenId>,
    pub length_cap: usize,
    pub vocab_size: usize,
}

impl TaskInstance {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size)
    }

    /// The unique completion the verifier accepts.
    pub fn expected_completion(&self) -> Vec<TokenId> {
        let v = self.vocab();
        let mut out = self.answer.clone();
        out.push(v.delimiter());
        out.push(v.eos());
        out
    }

    /// Pure, total verifier over any completed token sequence.
    pub fn verify(&self, completion: &[TokenId]) -> bool {
        completion == self.expected_completion().as_slice()
    }
}

/// Deterministically generates `count` solvable instances.
pub fn generate(config: &TaskConfig, seed: u64, count: usize) -> Result<Vec<TaskInstance>, TaskError> {
    config.validate()?;
    assert!(count >= 1, "count must be at least 1");
    let vocab = config.vocab();
    let base = config.effective_base();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let payload: Vec<TokenId> = (0..config.payload_len)
            .map(|_| TokenId(rng.gen_range(0..base as u16)))
            .collect();
        out.push(instance_for(config, &vocab, payload));
    }
    Ok(out)
}

fn instance_for(config: &TaskConfig, vocab: &Vocabulary, payload: Vec<TokenId>) -> TaskInstance {
    let answer = answer_for(config.family, config.effective_base(), &payload);
    let mut prompt = vec![vocab.bos()];
    prompt.extend(&payload);
    prompt.push(vocab.delimiter());
    TaskInstance {
        prompt,
        answer,
        delimiter_tokens: BTreeSet::from([vocab.delimiter()]),
        length_cap: config.length_cap,
        vocab_size: config.vocab_size,
    }
}

fn answer_for(family: TaskFamily, base: usize, payload: &[TokenId]) -> Vec<TokenId> {
    match family {
        TaskFamily::Parity => {
            let ones = payload.iter().filter(|t| t.0 == 1).count();
            vec![TokenId((ones % 2) as u16)]
        }
        TaskFamily::Copy => payload.to_vec(),
        TaskFamily::ModularSum => {
            let sum: usize = payload.iter().map(|t| t.index()).sum();
            vec![TokenId((sum % base) as u16)]
        }
    }
}

/// Binary reward with the length-penalty override.
pub fn reward(instance: &TaskInstance, completion: &[TokenId]) -> f64 {
    if completion.len() > instance.length_cap {
        return -1.0;
    }
    if instance.verify(completion) {
        1.0
    } else {
        0.0
    }
}

/// Occurrences of configured stall tokens; diagnostic only.
pub fn stall_token_count(completion: &[TokenId], stall_tokens: &BTreeSet<TokenId>) -> usize {
    completion.iter().filter(|t| stall_tokens.contains(t)).count()
}
