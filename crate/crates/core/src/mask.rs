//! The hybrid attention mask.
//!
//! Text-like tokens are causal. A clean block sees the text prefix, earlier
//! clean blocks and itself (bidirectionally). A noisy block sees the text
//! prefix, the clean blocks strictly before it and itself; never another noisy
//! block and never its own clean copy. The MLP ablation cuts noisy queries
//! down to their own block.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::layout::{Role, SequencePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Full,
    /// Noisy tokens attend only within their own block.
    MlpAblation,
}

/// `allowed[q * len + k]` is true when query `q` may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Row-major `rows × cols` sub-mask.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Vec<bool> {
        rows.iter()
            .flat_map(|&q| cols.iter().map(move |&k| self.allowed(q, k)))
            .collect()
    }

    /// Text grid with `1` for allowed and `.` for masked, one row per line.
    pub fn render(&self, tokens: &[usize]) -> String {
        let mut s = String::new();
        for &q in tokens {
            for &k in tokens {
                s.push(if self.allowed(q, k) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let all: Vec<usize> = (0..self.len).collect();
        f.write_str(&self.render(&all))
    }
}

/// Builds the mask entry by entry, filling whole rectangles of the matrix.
pub fn build_mask(plan: &SequencePlan, mode: MaskMode) -> AttentionMask {
    let n = plan.len();
    let mut allowed = vec![false; n * n];
    let mut spans = Vec::with_capacity(plan.entries.len());
    let mut start = 0;
    for e in &plan.entries {
        spans.push((e.role, start..start + e.token_count));
        start += e.token_count;
    }

    let mut fill = |rows: &core::ops::Range<usize>, cols: &core::ops::Range<usize>| {
        for q in rows.clone() {
            allowed[q * n + cols.start..q * n + cols.end].fill(true);
        }
    };

    for (qi, (q_role, q_span)) in spans.iter().enumerate() {
        let earlier = &spans[..qi];
        match *q_role {
            Role::Text | Role::Boi | Role::Eoi => {
                for (k_role, k_span) in earlier {
                    if !matches!(k_role, Role::NoisyBlock(_)) {
                        fill(q_span, k_span);
                    }
                }
                for q in q_span.clone() {
                    fill(&(q..q + 1), &(q_span.start..q + 1));
                }
            }
            Role::CleanBlock(i) => {
                for (k_role, k_span) in earlier {
                    let visible = match *k_role {
                        Role::Text | Role::Boi => true,
                        Role::CleanBlock(j) => j < i,
                        _ => false,
                    };
                    if visible {
                        fill(q_span, k_span);
                    }
                }
                fill(q_span, q_span);
            }
            Role::NoisyBlock(i) => {
                if mode == MaskMode::Full {
                    for (k_role, k_span) in earlier {
                        let visible = match *k_role {
                            Role::Text | Role::Boi => true,
                            Role::CleanBlock(j) => j < i,
                            _ => false,
                        };
                        if visible {
                            fill(q_span, k_span);
                        }
                    }
                }
                fill(q_span, q_span);
            }
        }
    }
    AttentionMask { len: n, allowed }
}

/// Evaluates the visibility rules for a single `(q, k)` pair straight from the
/// token roles. Kept independent of [`build_mask`] so the two can be checked
/// against each other.
pub fn mask_oracle(plan: &SequencePlan, mode: MaskMode, q: usize, k: usize) -> bool {
    if q == k {
        return true;
    }
    let key = plan.role(k);
    match plan.role(q) {
        Role::Text | Role::Boi | Role::Eoi => k < q && !matches!(key, Role::NoisyBlock(_)),
        Role::CleanBlock(i) => match key {
            Role::Text | Role::Boi => k < q,
            Role::CleanBlock(j) => j <= i,
            Role::NoisyBlock(_) | Role::Eoi => false,
        },
        Role::NoisyBlock(i) => match (mode, key) {
            (_, Role::NoisyBlock(j)) => j == i,
            (MaskMode::MlpAblation, _) => false,
            (MaskMode::Full, Role::Text | Role::Boi) => true,
            (MaskMode::Full, Role::CleanBlock(j)) => j < i,
            (MaskMode::Full, Role::Eoi) => false,
        },
    }
}
