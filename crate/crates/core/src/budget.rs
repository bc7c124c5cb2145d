//! Process-wide resource caps.
//!
//! The defaults suit a desktop machine. [`set_limits`] replaces them for the
//! whole process, which is how the command-line driver applies overrides.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::observability::DEFAULT_MAX_FORM_DIM;
use crate::stabilizer::DEFAULT_MAX_PATH_STEPS;
use crate::tree::DEFAULT_MAX_LEAVES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_leaves: usize,
    pub max_form_dim: usize,
    pub max_path_steps: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_leaves: DEFAULT_MAX_LEAVES,
            max_form_dim: DEFAULT_MAX_FORM_DIM,
            max_path_steps: DEFAULT_MAX_PATH_STEPS,
        }
    }
}

static MAX_LEAVES: AtomicUsize = AtomicUsize::new(DEFAULT_MAX_LEAVES);
static MAX_FORM_DIM: AtomicUsize = AtomicUsize::new(DEFAULT_MAX_FORM_DIM);
static MAX_PATH_STEPS: AtomicUsize = AtomicUsize::new(DEFAULT_MAX_PATH_STEPS);

pub fn set_limits(l: Limits) {
    MAX_LEAVES.store(l.max_leaves, Ordering::Relaxed);
    MAX_FORM_DIM.store(l.max_form_dim, Ordering::Relaxed);
    MAX_PATH_STEPS.store(l.max_path_steps, Ordering::Relaxed);
}

pub fn limits() -> Limits {
    Limits {
        max_leaves: max_leaves(),
        max_form_dim: max_form_dim(),
        max_path_steps: max_path_steps(),
    }
}

pub fn max_leaves() -> usize {
    MAX_LEAVES.load(Ordering::Relaxed)
}

pub fn max_form_dim() -> usize {
    MAX_FORM_DIM.load(Ordering::Relaxed)
}

pub fn max_path_steps() -> usize {
    MAX_PATH_STEPS.load(Ordering::Relaxed)
}
