//! Token budget estimation.
//!
//! The real tokenizer is not part of this crate; sequence budgets are enforced
//! against a pluggable counter instead.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Serializable selector for the built-in counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgeterMode {
    #[default]
    WhitespaceWord,
    ByteQuarter,
}

pub type CountFn = Arc<dyn Fn(&str) -> usize + Send + Sync>;

#[derive(Clone, Default)]
pub enum TokenBudgeter {
    /// Number of maximal non-whitespace runs.
    #[default]
    WhitespaceWord,
    /// `ceil(bytes / 4)`, a rough BPE density estimate.
    ByteQuarter,
    /// Caller-supplied counter. Must satisfy `count("") == 0` and be monotone under
    /// concatenation.
    External(CountFn),
}

impl TokenBudgeter {
    pub fn external(f: impl Fn(&str) -> usize + Send + Sync + 'static) -> Self {
        TokenBudgeter::External(Arc::new(f))
    }

    pub fn count(&self, text: &str) -> usize {
        match self {
            TokenBudgeter::WhitespaceWord => text.split_whitespace().count(),
            TokenBudgeter::ByteQuarter => text.len().div_ceil(4),
            TokenBudgeter::External(f) => f(text),
        }
    }
}

impl From<BudgeterMode> for TokenBudgeter {
    fn from(mode: BudgeterMode) -> Self {
        match mode {
            BudgeterMode::WhitespaceWord => TokenBudgeter::WhitespaceWord,
            BudgeterMode::ByteQuarter => TokenBudgeter::ByteQuarter,
        }
    }
}

impl fmt::Debug for TokenBudgeter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenBudgeter::WhitespaceWord => f.write_str("WhitespaceWord"),
            TokenBudgeter::ByteQuarter => f.write_str("ByteQuarter"),
            TokenBudgeter::External(_) => f.write_str("External(..)"),
        }
    }
}
