//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradients;
pub mod kernels;
pub mod masks;
pub mod routing;

use std::fmt;

/// Result of one check: pass or fail plus a one-line summary.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self { passed: true, detail: detail.into() }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self { passed: false, detail: detail.into() }
    }

    pub fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }

    /// Passes when `failures` is empty; otherwise lists the first few.
    pub fn from_failures(summary: String, failures: Vec<String>) -> Self {
        if failures.is_empty() {
            Self::pass(summary)
        } else {
            let shown: Vec<_> = failures.iter().take(5).cloned().collect();
            Self::fail(format!("{summary}: {} failures, e.g. {}", failures.len(), shown.join("; ")))
        }
    }

    #[track_caller]
    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}
