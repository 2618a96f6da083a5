use rand::seq::index;

use crate::error::{invalid, Result};
use crate::rng::seeded;

/// Square visibility matrix; `visible(i, j)` means row `i` may attend to
/// column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    /// All-invisible mask.
    pub fn new(size: usize) -> Self {
        Self { size, visible: vec![false; size * size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let visible = (0..size * size).map(|x| f(x / size, x % size)).collect();
        Self { size, visible }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.visible[i * self.size + j] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }
}

/// Columns (1-based real-token positions) hidden by random masking.
///
/// The first `ceil(prefix_fraction * n_real)` tokens are never hidden; of the
/// rest exactly `round(m * n_eligible)` are chosen uniformly.
pub fn hidden_columns(n_real: usize, m: f64, prefix_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("mask ratio {m} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&prefix_fraction) {
        return Err(invalid(format!("prefix fraction {prefix_fraction} outside [0, 1]")));
    }
    let n_prefix = ((prefix_fraction * n_real as f64).ceil() as usize).min(n_real);
    let eligible = n_real - n_prefix;
    let count = ((m * eligible as f64).round() as usize).min(eligible);
    let mut rng = seeded(seed);
    let mut cols: Vec<usize> = index::sample(&mut rng, eligible, count)
        .into_iter()
        .map(|i| n_prefix + 1 + i)
        .collect();
    cols.sort_unstable();
    Ok(cols)
}

/// Hybrid causal plus random mask over `n_real + n_pad + 1` positions with
/// the start-of-sequence slot at index 0.
pub fn build_decoder_mask(n_real: usize, n_pad: usize, m: f64, prefix_fraction: f64, seed: u64) -> Result<AttentionMask> {
    let hidden = hidden_columns(n_real, m, prefix_fraction, seed)?;
    let size = n_real + n_pad + 1;
    let mut is_hidden = vec![false; size];
    for c in hidden {
        is_hidden[c] = true;
    }
    Ok(AttentionMask::from_fn(size, |i, j| {
        if i > n_real || j > n_real {
            return false;
        }
        j == 0 || (j < i && (!is_hidden[j] || j + 1 == i))
    }))
}

/// Bidirectional mask over real tokens; padding rows and columns are
/// invisible.
pub fn build_encoder_mask(n_real: usize, n_pad: usize) -> AttentionMask {
    AttentionMask::from_fn(n_real + n_pad, |i, j| i < n_real && j < n_real)
}
