//! Recovering the old→new parent map from data labeled under both
//! ontologies.
//!
//! When old data is re-annotated under the new ontology, no explicit
//! taxonomy links the two label sets. The parent of each new class is
//! taken to be the old class it co-occurs with most (by weight); samples
//! whose old label disagrees with the recovered parent of their new label
//! are flagged so coarse-supervision losses can skip them.

use std::path::Path;

use crate::error::{Error, Result};

/// Co-occurrence observations between an old and a new labeling of the
/// same underlying items. `weight` counts how many units (samples here,
/// pixels in segmentation) carry the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedLabeling {
    pub items: Vec<PairedItem>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedItem {
    pub old_label: usize,
    pub new_label: usize,
    pub weight: u64,
}

impl PairedLabeling {
    pub fn new(items: Vec<PairedItem>) -> Self {
        Self { items }
    }

    /// Parses lines of `<old_id> <new_id> <weight>`. Blank lines and `#`
    /// comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "pairs line {}: expected `<old> <new> <weight>`, got {line:?}",
                    lineno + 1
                )));
            }
            let parse = |s: &str, what: &str| -> Result<u64> {
                s.parse().map_err(|_| {
                    Error::Parse(format!("pairs line {}: bad {what} {s:?}", lineno + 1))
                })
            };
            items.push(PairedItem {
                old_label: parse(fields[0], "old label")? as usize,
                new_label: parse(fields[1], "new label")? as usize,
                weight: parse(fields[2], "weight")?,
            });
        }
        Ok(Self { items })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Largest label ids seen, as `(num_old, num_new)` label-set sizes.
    pub fn label_counts(&self) -> (usize, usize) {
        let old = self.items.iter().map(|i| i.old_label + 1).max().unwrap_or(0);
        let new = self.items.iter().map(|i| i.new_label + 1).max().unwrap_or(0);
        (old, new)
    }
}

/// Assigns each new label the old label it co-occurs with most, ties
/// broken toward the smallest old id. Errors if a new label has no
/// positive-weight evidence.
pub fn infer_parent_map(
    paired: &PairedLabeling,
    num_new: usize,
    num_old: usize,
) -> Result<Vec<usize>> {
    let mut weights = vec![vec![0u64; num_old]; num_new];
    for item in &paired.items {
        if item.new_label >= num_new || item.old_label >= num_old {
            return Err(Error::HierInfer(format!(
                "label pair ({}, {}) out of range for {num_old} old / {num_new} new labels",
                item.old_label, item.new_label
            )));
        }
        weights[item.new_label][item.old_label] += item.weight;
    }
    let mut parents = Vec::with_capacity(num_new);
    for (new_label, row) in weights.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::HierInfer(format!(
                "new label {new_label} has no co-occurrence evidence"
            )));
        }
        // max_by_key on the reversed index keeps the smallest id on ties.
        let parent = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id)
            .expect("nonempty row");
        parents.push(parent);
    }
    Ok(parents)
}

/// Marks the items whose old label disagrees with the parent of their new
/// label. Marked items are excluded from coarse-supervision losses.
pub fn mismatch_mask(paired: &PairedLabeling, parent_map: &[usize]) -> Result<Vec<bool>> {
    paired
        .items
        .iter()
        .map(|item| {
            let parent = *parent_map.get(item.new_label).ok_or_else(|| {
                Error::HierInfer(format!(
                    "new label {} out of range for parent map of {}",
                    item.new_label,
                    parent_map.len()
                ))
            })?;
            Ok(item.old_label != parent)
        })
        .collect()
}

/// Weighted fraction of mismatched items, as reported by the harness.
pub fn masked_fraction(paired: &PairedLabeling, mask: &[bool]) -> f64 {
    let total: u64 = paired.items.iter().map(|i| i.weight).sum();
    if total == 0 {
        return 0.0;
    }
    let masked: u64 = paired
        .items
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(i, _)| i.weight)
        .sum();
    masked as f64 / total as f64
}
