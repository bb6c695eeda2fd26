//! Evolving class ontologies: multi-level label sets, ancestor edge
//! matrices, and probability marginalization between levels.
//!
//! A taxonomy is an ordered list of label sets, one per time period, with
//! strictly growing sizes. Each label at level `t > 0` has exactly one
//! parent at level `t - 1`, so the whole structure is a tree rooted at the
//! coarsest level. The ancestor relation between any two levels collapses
//! to a 0/1 indicator matrix whose rows sum to one; right-multiplying a
//! fine probability vector by it marginalizes mass onto coarse classes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A multi-level label hierarchy. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    /// Label names per level, indexed by dense label id.
    names: Vec<Vec<String>>,
    /// `parents[t][i]` is the level `t - 1` parent of label `i` at level
    /// `t`. `parents[0]` is empty.
    parents: Vec<Vec<usize>>,
}

impl Taxonomy {
    /// Builds a taxonomy from per-level label names and parent maps,
    /// validating the tree invariants.
    pub fn new(names: Vec<Vec<String>>, parents: Vec<Vec<usize>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Taxonomy("taxonomy needs at least one level".into()));
        }
        if parents.len() != names.len() {
            return Err(Error::Taxonomy(format!(
                "expected {} parent maps, got {}",
                names.len(),
                parents.len()
            )));
        }
        if !parents[0].is_empty() {
            return Err(Error::Taxonomy("level 0 must not have parents".into()));
        }
        for (level, level_names) in names.iter().enumerate() {
            if level_names.is_empty() {
                return Err(Error::Taxonomy(format!("level {level} is empty")));
            }
            if level > 0 && level_names.len() <= names[level - 1].len() {
                return Err(Error::Taxonomy(format!(
                    "level sizes must be strictly increasing, got {} then {}",
                    names[level - 1].len(),
                    level_names.len()
                )));
            }
            for name in level_names {
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(Error::Taxonomy(format!(
                        "label name {name:?} must be nonempty and whitespace-free"
                    )));
                }
            }
        }
        for level in 1..names.len() {
            if parents[level].len() != names[level].len() {
                return Err(Error::Taxonomy(format!(
                    "level {level}: {} labels but {} parent entries",
                    names[level].len(),
                    parents[level].len()
                )));
            }
            let num_parents = names[level - 1].len();
            let mut has_child = vec![false; num_parents];
            for (label, &parent) in parents[level].iter().enumerate() {
                if parent >= num_parents {
                    return Err(Error::Taxonomy(format!(
                        "label {label} at level {level} has out-of-range parent {parent}"
                    )));
                }
                has_child[parent] = true;
            }
            if let Some(dead) = has_child.iter().position(|&c| !c) {
                return Err(Error::Taxonomy(format!(
                    "label {dead} at level {} has no children",
                    level - 1
                )));
            }
        }
        Ok(Self { names, parents })
    }

    /// Builds a deterministic taxonomy of the given level sizes. Children
    /// at each level are assigned to parents in contiguous blocks of
    /// near-equal size, and labels are named `l<level>_<id>`.
    pub fn from_level_sizes(sizes: &[usize]) -> Result<Self> {
        let names = synthetic_names(sizes);
        let mut parents = vec![Vec::new()];
        for level in 1..sizes.len() {
            let (fine, coarse) = (sizes[level], sizes[level - 1]);
            parents.push((0..fine).map(|i| i * coarse / fine).collect());
        }
        Self::new(names, parents)
    }

    /// Builds a random tree taxonomy of the given level sizes. Every
    /// parent is guaranteed at least one child.
    pub fn random_tree<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let names = synthetic_names(sizes);
        let mut parents = vec![Vec::new()];
        for level in 1..sizes.len() {
            let (fine, coarse) = (sizes[level], sizes[level - 1]);
            if fine <= coarse {
                return Err(Error::Taxonomy(
                    "level sizes must be strictly increasing".into(),
                ));
            }
            // Cover every parent once, then assign the rest uniformly.
            let mut slots: Vec<usize> = (0..fine).collect();
            slots.shuffle(rng);
            let mut map = vec![0usize; fine];
            for (parent, &child) in slots.iter().take(coarse).enumerate() {
                map[child] = parent;
            }
            for &child in slots.iter().skip(coarse) {
                map[child] = rng.random_range(0..coarse);
            }
            parents.push(map);
        }
        Self::new(names, parents)
    }

    pub fn num_levels(&self) -> usize {
        self.names.len()
    }

    /// Index of the finest level.
    pub fn finest_level(&self) -> usize {
        self.names.len() - 1
    }

    /// Number of labels at `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.names[level].len()
    }

    pub fn label_name(&self, level: usize, label: usize) -> &str {
        &self.names[level][label]
    }

    /// Parent at level `level - 1` of `label` at `level`. Panics on level 0.
    pub fn parent(&self, level: usize, label: usize) -> usize {
        self.parents[level][label]
    }

    /// Labels at `level + 1` whose parent is `label`.
    pub fn children(&self, level: usize, label: usize) -> Vec<usize> {
        self.parents[level + 1]
            .iter()
            .enumerate()
            .filter(|&(_, &p)| p == label)
            .map(|(c, _)| c)
            .collect()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.num_levels() {
            return Err(Error::Taxonomy(format!(
                "level {level} out of range (taxonomy has {} levels)",
                self.num_levels()
            )));
        }
        Ok(())
    }

    /// The unique ancestor of `label` (at level `t`) at the coarser level
    /// `t_prime < t`, by chained parent lookups.
    pub fn coarsen(&self, label: usize, t: usize, t_prime: usize) -> Result<usize> {
        self.check_level(t)?;
        self.check_level(t_prime)?;
        if t_prime >= t {
            return Err(Error::Taxonomy(format!(
                "coarsening requires t_prime < t, got t={t}, t_prime={t_prime}"
            )));
        }
        if label >= self.level_size(t) {
            return Err(Error::Taxonomy(format!(
                "label {label} out of range at level {t}"
            )));
        }
        let mut current = label;
        for level in (t_prime + 1..=t).rev() {
            current = self.parents[level][current];
        }
        Ok(current)
    }

    /// The full ancestor lineage of a finest-level label, one entry per
    /// level (finest included).
    pub fn lineage(&self, leaf: usize) -> Vec<usize> {
        let finest = self.finest_level();
        let mut labels = vec![0usize; self.num_levels()];
        labels[finest] = leaf;
        for level in (1..=finest).rev() {
            labels[level - 1] = self.parents[level][labels[level]];
        }
        labels
    }

    /// The ancestor indicator matrix from level `t` down to `t_prime`,
    /// equal to the product of the consecutive parent-map matrices.
    pub fn edge_matrix(&self, t: usize, t_prime: usize) -> Result<EdgeMatrix> {
        self.check_level(t)?;
        self.check_level(t_prime)?;
        if t_prime >= t {
            return Err(Error::Taxonomy(format!(
                "edge matrix requires t_prime < t, got t={t}, t_prime={t_prime}"
            )));
        }
        let rows = self.level_size(t);
        let cols = self.level_size(t_prime);
        let mut m = Array2::zeros((rows, cols));
        for fine in 0..rows {
            let coarse = self.coarsen(fine, t, t_prime)?;
            m[(fine, coarse)] = 1.0;
        }
        Ok(EdgeMatrix { m })
    }

    /// Serializes as one line per label: `<level> <label_id> <name>
    /// <parent_id>`, with parent id -1 at level 0.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for level in 0..self.num_levels() {
            for label in 0..self.level_size(level) {
                let parent = if level == 0 {
                    -1
                } else {
                    self.parents[level][label] as i64
                };
                writeln!(
                    out,
                    "{level} {label} {} {parent}",
                    self.names[level][label]
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut levels: Vec<Vec<(usize, String, i64)>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "taxonomy line {}: expected 4 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let level: usize = parse_field(fields[0], lineno, "level")?;
            let label: usize = parse_field(fields[1], lineno, "label id")?;
            let parent: i64 = parse_field(fields[3], lineno, "parent id")?;
            if levels.len() <= level {
                levels.resize(level + 1, Vec::new());
            }
            levels[level].push((label, fields[2].to_string(), parent));
        }
        let mut names = Vec::new();
        let mut parents = Vec::new();
        for (level, mut entries) in levels.into_iter().enumerate() {
            entries.sort_by_key(|e| e.0);
            for (expect, entry) in entries.iter().enumerate() {
                if entry.0 != expect {
                    return Err(Error::Parse(format!(
                        "level {level}: label ids are not dense (missing {expect})"
                    )));
                }
            }
            let mut level_parents = Vec::new();
            if level > 0 {
                for (label, _, parent) in &entries {
                    if *parent < 0 {
                        return Err(Error::Parse(format!(
                            "level {level} label {label}: parent id must be nonnegative"
                        )));
                    }
                    level_parents.push(*parent as usize);
                }
            }
            names.push(entries.into_iter().map(|e| e.1).collect());
            parents.push(level_parents);
        }
        Self::new(names, parents)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn synthetic_names(sizes: &[usize]) -> Vec<Vec<String>> {
    sizes
        .iter()
        .enumerate()
        .map(|(level, &n)| (0..n).map(|i| format!("l{level}_{i}")).collect())
        .collect()
}

fn parse_field<T: std::str::FromStr>(field: &str, lineno: usize, what: &str) -> Result<T> {
    field.parse().map_err(|_| {
        Error::Parse(format!(
            "taxonomy line {}: bad {what} {field:?}",
            lineno + 1
        ))
    })
}

/// 0/1 ancestor indicator between two taxonomy levels: entry `(i, j)` is 1
/// iff coarse label `j` is the ancestor of fine label `i`. Every row sums
/// to exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    m: Array2<f64>,
}

impl EdgeMatrix {
    /// Identity relation for the degenerate case of an unchanged ontology.
    pub fn identity(n: usize) -> Self {
        Self { m: Array2::eye(n) }
    }

    /// Builds the single-step relation from a parent map.
    pub fn from_parent_map(parents: &[usize], num_coarse: usize) -> Result<Self> {
        let mut m = Array2::zeros((parents.len(), num_coarse));
        for (fine, &coarse) in parents.iter().enumerate() {
            if coarse >= num_coarse {
                return Err(Error::Taxonomy(format!(
                    "parent {coarse} out of range for {num_coarse} coarse labels"
                )));
            }
            m[(fine, coarse)] = 1.0;
        }
        Ok(Self { m })
    }

    pub fn num_fine(&self) -> usize {
        self.m.nrows()
    }

    pub fn num_coarse(&self) -> usize {
        self.m.ncols()
    }

    pub fn entry(&self, fine: usize, coarse: usize) -> f64 {
        self.m[(fine, coarse)]
    }

    /// True iff `coarse` is the ancestor of `fine`.
    pub fn is_ancestor(&self, fine: usize, coarse: usize) -> bool {
        self.m[(fine, coarse)] == 1.0
    }

    /// The ancestor of `fine` (column index of its single 1 entry).
    pub fn ancestor_of(&self, fine: usize) -> usize {
        self.m
            .row(fine)
            .iter()
            .position(|&e| e == 1.0)
            .expect("edge matrix row has exactly one 1 entry")
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.m
    }

    /// Composes two relations: `(t -> t_mid) . (t_mid -> t_prime)`.
    pub fn compose(&self, coarser: &EdgeMatrix) -> Result<EdgeMatrix> {
        if self.num_coarse() != coarser.num_fine() {
            return Err(Error::Taxonomy(format!(
                "cannot compose {}x{} with {}x{}",
                self.num_fine(),
                self.num_coarse(),
                coarser.num_fine(),
                coarser.num_coarse()
            )));
        }
        Ok(EdgeMatrix {
            m: self.m.dot(&coarser.m),
        })
    }

    /// Marginalizes a fine probability vector onto the coarse level:
    /// `out[j] = sum_i q[i] * E[i, j]`. The input must sum to one within
    /// [`PROB_SUM_TOL`]; the output then does too.
    pub fn marginalize(&self, q: ArrayView1<f64>) -> Result<Vec<f64>> {
        if q.len() != self.num_fine() {
            return Err(Error::Taxonomy(format!(
                "marginalize: expected {} probabilities, got {}",
                self.num_fine(),
                q.len()
            )));
        }
        let total: f64 = q.sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Taxonomy(format!(
                "marginalize: input sums to {total}, not 1"
            )));
        }
        Ok(q.dot(&self.m).to_vec())
    }

    /// Row-batched marginalization without normalization checks, for
    /// softmax outputs that are normalized by construction.
    pub fn marginalize_rows(&self, q: &Array2<f64>) -> Array2<f64> {
        q.dot(&self.m)
    }
}

/// See [`Taxonomy::edge_matrix`].
pub fn build_edge_matrix(taxonomy: &Taxonomy, t: usize, t_prime: usize) -> Result<EdgeMatrix> {
    taxonomy.edge_matrix(t, t_prime)
}

/// See [`Taxonomy::coarsen`].
pub fn coarsen_label(taxonomy: &Taxonomy, label: usize, t: usize, t_prime: usize) -> Result<usize> {
    taxonomy.coarsen(label, t, t_prime)
}

/// Edge matrices from a fixed fine level down to every coarser level,
/// built once per time period and shared by losses and evaluation.
#[derive(Debug, Clone)]
pub struct EdgeCache {
    fine_level: usize,
    to_level: Vec<EdgeMatrix>,
}

impl EdgeCache {
    /// Relations from `fine_level` down to each of `0..fine_level`.
    pub fn build(taxonomy: &Taxonomy, fine_level: usize) -> Result<Self> {
        let to_level = (0..fine_level)
            .map(|t_prime| taxonomy.edge_matrix(fine_level, t_prime))
            .collect::<Result<_>>()?;
        Ok(Self {
            fine_level,
            to_level,
        })
    }

    /// A degenerate cache where every "coarser" level is the fine level
    /// itself, with identity relations.
    pub fn identity(fine_level: usize, num_classes: usize) -> Self {
        Self {
            fine_level,
            to_level: (0..fine_level)
                .map(|_| EdgeMatrix::identity(num_classes))
                .collect(),
        }
    }

    pub fn fine_level(&self) -> usize {
        self.fine_level
    }

    pub fn to(&self, t_prime: usize) -> &EdgeMatrix {
        &self.to_level[t_prime]
    }
}
