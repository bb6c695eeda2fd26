//! Synthetic hierarchical Gaussian data and the annotation protocol.
//!
//! Coarse class centers are drawn from an isotropic Gaussian, each child
//! center is its parent plus a smaller Gaussian offset, and samples add
//! per-coordinate noise around their leaf center. With the offset scale
//! well below the coarse scale this reproduces the coarse-easy /
//! fine-hard structure the protocol studies. Class frequencies follow a
//! power law (`tail_exponent` 0 is balanced).
//!
//! The pool is generated once per seed; annotation strategies only move
//! the per-sample *visible level*, the finest level whose label the
//! learner may use. Everything is deterministic given the spec and seed.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::Taxonomy;

/// Generator parameters. Identical spec and seed give a bitwise-identical
/// pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalGaussianSpec {
    pub dim: usize,
    /// Std of coarse (level 0) class centers.
    #[serde(default = "default_sigma_coarse")]
    pub sigma_coarse: f64,
    /// Std of each child center around its parent center.
    #[serde(default = "default_sigma_fine")]
    pub sigma_fine: f64,
    /// Std of per-sample noise around the leaf center.
    #[serde(default = "default_sigma_noise")]
    pub sigma_noise: f64,
    /// Power-law exponent for per-class frequencies; 0 is balanced.
    #[serde(default)]
    pub tail_exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma_coarse() -> f64 {
    4.0
}
fn default_sigma_fine() -> f64 {
    1.0
}
fn default_sigma_noise() -> f64 {
    0.6
}

impl Default for HierarchicalGaussianSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            sigma_coarse: default_sigma_coarse(),
            sigma_fine: default_sigma_fine(),
            sigma_noise: default_sigma_noise(),
            tail_exponent: 0.0,
            seed: 0,
        }
    }
}

impl HierarchicalGaussianSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Data("dim must be at least 1".into()));
        }
        for (name, v) in [
            ("sigma_coarse", self.sigma_coarse),
            ("sigma_fine", self.sigma_fine),
            ("sigma_noise", self.sigma_noise),
            ("tail_exponent", self.tail_exponent),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Data(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which split a drawn sample landed in. Validation takes 20% of each
/// TP's draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// One generated sample. `labels` is the full lineage, one label per
/// taxonomy level; `visible` is the finest level the learner may see
/// (`None` until the sample is drawn by an annotation strategy).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub visible: Option<usize>,
    pub split: Option<Split>,
    pub draw_tp: Option<usize>,
}

/// Annotation strategy for one time period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationStrategy {
    /// Draw N fresh samples and label them at the new level; history keeps
    /// its old labels.
    LabelNew,
    /// Upgrade the previous TP's N samples to the new level; nothing new.
    RelabelOld,
    /// Oracle: draw N fresh samples and upgrade all history to the new
    /// level.
    AllFine,
}

impl std::fmt::Display for AnnotationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnnotationStrategy::LabelNew => "LabelNew",
            AnnotationStrategy::RelabelOld => "RelabelOld",
            AnnotationStrategy::AllFine => "AllFine",
        };
        f.write_str(s)
    }
}

/// Fine-labeled samples at a fixed level, with their full lineage so
/// coarse labels at older levels can be read off directly.
#[derive(Debug, Clone)]
pub struct FineSet {
    pub x: Array2<f64>,
    /// `lineage[i][level]` is sample i's label at `level`.
    pub lineage: Vec<Vec<usize>>,
    /// The level these samples are labeled (and trained) at.
    pub level: usize,
}

impl FineSet {
    pub fn len(&self) -> usize {
        self.lineage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lineage.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.lineage[i][self.level]
    }
}

/// Coarse-only history samples. Only the label at each sample's visible
/// level is exposed; finer lineage is withheld by construction.
#[derive(Debug, Clone)]
pub struct CoarseSet {
    pub x: Array2<f64>,
    pub levels: Vec<usize>,
    pub labels: Vec<usize>,
    /// Samples excluded from coarse-supervision losses (see hierinfer).
    pub mask: Vec<bool>,
}

impl CoarseSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            x: Array2::zeros((0, dim)),
            levels: Vec::new(),
            labels: Vec::new(),
            mask: Vec::new(),
        }
    }
}

/// Labeled evaluation data at a single level.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub level: usize,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The per-TP data exposed to training: the new fine-labeled split, the
/// accumulated coarse pool, the TP's validation split, and the shared
/// finest-labeled test split.
#[derive(Debug, Clone)]
pub struct TpDatasets {
    pub tp: usize,
    pub train: FineSet,
    pub coarse: CoarseSet,
    pub val: EvalSet,
    pub test: EvalSet,
}

/// The generated sample pool plus the shared test split. Annotation
/// strategies consume unallocated samples in shuffled order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    pub spec: HierarchicalGaussianSpec,
    pub samples: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    cursor: usize,
    num_levels: usize,
}

/// Splits `total` into per-class counts proportional to `weights`,
/// distributing the remainder by largest fractional part (ties to the
/// smaller class id).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Generates the sample pool for all time periods plus a class-balanced
/// test split.
///
/// Level-0 centers are `N(0, sigma_coarse^2 I)`; each child center adds
/// `N(0, sigma_fine^2 I)` to its parent; each sample adds
/// `N(0, sigma_noise^2 I)` to its leaf center. Per-leaf counts in the
/// train pool follow `(rank + 1)^-tail_exponent`, normalized to the
/// requested totals.
pub fn generate_pool(
    spec: &HierarchicalGaussianSpec,
    taxonomy: &Taxonomy,
    sizes: &[usize],
    test_size: usize,
) -> Result<DataPool> {
    spec.validate()?;
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
        return Err(Error::Data("every TP needs a positive sample budget".into()));
    }
    if sizes.len() > taxonomy.num_levels() {
        return Err(Error::Data(format!(
            "{} TPs requested but taxonomy has {} levels",
            sizes.len(),
            taxonomy.num_levels()
        )));
    }
    let num_leaves = taxonomy.level_size(taxonomy.finest_level());
    let pool_total: usize = sizes.iter().sum();
    if spec.tail_exponent == 0.0 && pool_total < num_leaves {
        return Err(Error::Data(format!(
            "balanced sampling needs at least {num_leaves} samples, got {pool_total}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Data(e.to_string()))?;

    // Class centers, level by level.
    let mut centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(taxonomy.num_levels());
    for level in 0..taxonomy.num_levels() {
        let mut level_centers = Vec::with_capacity(taxonomy.level_size(level));
        for label in 0..taxonomy.level_size(level) {
            let center: Vec<f64> = if level == 0 {
                (0..spec.dim)
                    .map(|_| spec.sigma_coarse * unit.sample(&mut rng))
                    .collect()
            } else {
                let parent: &Vec<f64> = &centers[level - 1][taxonomy.parent(level, label)];
                parent
                    .iter()
                    .map(|&p| p + spec.sigma_fine * unit.sample(&mut rng))
                    .collect()
            };
            level_centers.push(center);
        }
        centers.push(level_centers);
    }
    let leaf_centers = &centers[taxonomy.finest_level()];

    let weights: Vec<f64> = (0..num_leaves)
        .map(|i| ((i + 1) as f64).powf(-spec.tail_exponent))
        .collect();
    let pool_counts = apportion(&weights, pool_total);
    let test_counts = apportion(&vec![1.0; num_leaves], test_size);

    let draw = |leaf: usize, rng: &mut ChaCha8Rng| -> LabeledSample {
        let features = leaf_centers[leaf]
            .iter()
            .map(|&c| c + spec.sigma_noise * unit.sample(rng))
            .collect();
        LabeledSample {
            features,
            labels: taxonomy.lineage(leaf),
            visible: None,
            split: None,
            draw_tp: None,
        }
    };

    let mut samples = Vec::with_capacity(pool_total);
    for (leaf, &count) in pool_counts.iter().enumerate() {
        for _ in 0..count {
            samples.push(draw(leaf, &mut rng));
        }
    }
    samples.shuffle(&mut rng);

    let mut test = Vec::with_capacity(test_size);
    for (leaf, &count) in test_counts.iter().enumerate() {
        for _ in 0..count {
            let mut s = draw(leaf, &mut rng);
            s.visible = Some(taxonomy.finest_level());
            test.push(s);
        }
    }

    Ok(DataPool {
        spec: spec.clone(),
        samples,
        test,
        cursor: 0,
        num_levels: taxonomy.num_levels(),
    })
}

impl DataPool {
    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn unallocated(&self) -> usize {
        self.samples.len() - self.cursor
    }

    fn draw_fresh(&mut self, tp: usize, budget: usize) -> Result<()> {
        if self.unallocated() < budget {
            return Err(Error::Data(format!(
                "TP {tp}: budget {budget} exceeds the {} unallocated samples",
                self.unallocated()
            )));
        }
        let val_from = self.cursor + budget - budget / 5;
        for i in self.cursor..self.cursor + budget {
            let s = &mut self.samples[i];
            s.visible = Some(tp);
            s.draw_tp = Some(tp);
            s.split = Some(if i < val_from { Split::Train } else { Split::Val });
        }
        self.cursor += budget;
        Ok(())
    }

    /// Applies one TP's annotation strategy, updating sample visibility.
    pub fn apply_annotation(
        &mut self,
        strategy: AnnotationStrategy,
        tp: usize,
        budget: usize,
    ) -> Result<()> {
        if tp >= self.num_levels {
            return Err(Error::Data(format!(
                "TP {tp} out of range for {} taxonomy levels",
                self.num_levels
            )));
        }
        if tp == 0 && strategy == AnnotationStrategy::RelabelOld {
            return Err(Error::Data("RelabelOld is undefined at TP 0".into()));
        }
        match strategy {
            AnnotationStrategy::LabelNew => self.draw_fresh(tp, budget)?,
            AnnotationStrategy::RelabelOld => {
                let prev: Vec<usize> = (0..self.samples.len())
                    .filter(|&i| self.samples[i].visible == Some(tp - 1))
                    .collect();
                if prev.len() != budget {
                    return Err(Error::Data(format!(
                        "RelabelOld at TP {tp}: budget {budget} but TP {} holds {} samples",
                        tp - 1,
                        prev.len()
                    )));
                }
                for i in prev {
                    self.samples[i].visible = Some(tp);
                }
            }
            AnnotationStrategy::AllFine => {
                self.draw_fresh(tp, budget)?;
                for s in &mut self.samples {
                    if s.visible.is_some_and(|v| v < tp) {
                        s.visible = Some(tp);
                    }
                }
            }
        }
        Ok(())
    }

    /// Assembles the training-facing view for one TP.
    pub fn tp_view(&self, tp: usize) -> TpDatasets {
        let dim = self.spec.dim;
        let gather = |pred: &dyn Fn(&LabeledSample) -> bool| -> Vec<&LabeledSample> {
            self.samples.iter().filter(|s| pred(s)).collect()
        };
        let to_matrix = |rows: &[&LabeledSample]| -> Array2<f64> {
            let mut x = Array2::zeros((rows.len(), dim));
            for (i, s) in rows.iter().enumerate() {
                x.row_mut(i)
                    .iter_mut()
                    .zip(&s.features)
                    .for_each(|(dst, &src)| *dst = src);
            }
            x
        };

        let train_rows = gather(&|s| s.visible == Some(tp) && s.split == Some(Split::Train));
        let val_rows = gather(&|s| s.visible == Some(tp) && s.split == Some(Split::Val));
        let coarse_rows = gather(&|s| s.visible.is_some_and(|v| v < tp));

        let train = FineSet {
            x: to_matrix(&train_rows),
            lineage: train_rows.iter().map(|s| s.labels.clone()).collect(),
            level: tp,
        };
        let val = EvalSet {
            x: to_matrix(&val_rows),
            labels: val_rows.iter().map(|s| s.labels[tp]).collect(),
            level: tp,
        };
        let coarse = CoarseSet {
            x: to_matrix(&coarse_rows),
            levels: coarse_rows.iter().map(|s| s.visible.unwrap()).collect(),
            labels: coarse_rows
                .iter()
                .map(|s| s.labels[s.visible.unwrap()])
                .collect(),
            mask: vec![false; coarse_rows.len()],
        };
        let test_rows: Vec<&LabeledSample> = self.test.iter().collect();
        let test = EvalSet {
            x: to_matrix(&test_rows),
            labels: test_rows
                .iter()
                .map(|s| *s.labels.last().expect("nonempty lineage"))
                .collect(),
            level: self.num_levels - 1,
        };
        TpDatasets {
            tp,
            train,
            coarse,
            val,
            test,
        }
    }

    /// Count of distinct labeled samples (train and validation parts)
    /// visible at or below `tp` — the annotation-cost bookkeeping the
    /// harness reports.
    pub fn labeled_count(&self, tp: usize) -> usize {
        self.samples
            .iter()
            .filter(|s| s.visible.is_some_and(|v| v <= tp))
            .count()
    }

    fn samples_to_text(dim: usize, num_levels: usize, samples: &[LabeledSample]) -> String {
        let mut out = String::new();
        let features: Vec<String> = (0..dim).map(|i| format!("feature_{i}")).collect();
        let labels: Vec<String> = (0..num_levels).map(|i| format!("label_level_{i}")).collect();
        writeln!(
            out,
            "{},{},visible_level",
            features.join(","),
            labels.join(",")
        )
        .expect("string write");
        for s in samples {
            let feats: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
            let labs: Vec<String> = s.labels.iter().map(|v| v.to_string()).collect();
            let visible = s.visible.map_or(-1i64, |v| v as i64);
            writeln!(out, "{},{},{visible}", feats.join(","), labs.join(","))
                .expect("string write");
        }
        out
    }

    fn samples_from_text(text: &str, what: &str) -> Result<(usize, usize, Vec<LabeledSample>)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{what}: empty file")))?;
        let cols: Vec<&str> = header.split(',').collect();
        let dim = cols.iter().filter(|c| c.starts_with("feature_")).count();
        let num_levels = cols.iter().filter(|c| c.starts_with("label_level_")).count();
        if dim == 0 || num_levels == 0 || cols.len() != dim + num_levels + 1 {
            return Err(Error::Parse(format!("{what}: malformed header {header:?}")));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + num_levels + 1 {
                return Err(Error::Parse(format!(
                    "{what} line {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + num_levels + 1,
                    fields.len()
                )));
            }
            let features: Vec<f64> = fields[..dim]
                .iter()
                .map(|f| {
                    f.parse()
                        .map_err(|_| Error::Parse(format!("{what}: bad float {f:?}")))
                })
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = fields[dim..dim + num_levels]
                .iter()
                .map(|f| {
                    f.parse()
                        .map_err(|_| Error::Parse(format!("{what}: bad label {f:?}")))
                })
                .collect::<Result<_>>()?;
            let visible: i64 = fields[dim + num_levels]
                .parse()
                .map_err(|_| Error::Parse(format!("{what}: bad visible level")))?;
            samples.push(LabeledSample {
                features,
                labels,
                visible: (visible >= 0).then_some(visible as usize),
                split: None,
                draw_tp: None,
            });
        }
        Ok((dim, num_levels, samples))
    }

    /// Writes `pool.csv` and `test.csv` under `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("pool.csv"),
            Self::samples_to_text(self.spec.dim, self.num_levels, &self.samples),
        )?;
        std::fs::write(
            dir.join("test.csv"),
            Self::samples_to_text(self.spec.dim, self.num_levels, &self.test),
        )?;
        Ok(())
    }

    /// Reads a pool written by [`DataPool::export`]. Allocation state is
    /// not preserved, so this is meant for pre-annotation pools.
    pub fn import(dir: &Path, spec: &HierarchicalGaussianSpec) -> Result<DataPool> {
        let (dim, num_levels, samples) = Self::samples_from_text(
            &std::fs::read_to_string(dir.join("pool.csv"))?,
            "pool.csv",
        )?;
        let (tdim, tlevels, test) = Self::samples_from_text(
            &std::fs::read_to_string(dir.join("test.csv"))?,
            "test.csv",
        )?;
        if dim != spec.dim || tdim != spec.dim || tlevels != num_levels {
            return Err(Error::Parse(
                "pool/test files disagree with the data spec".into(),
            ));
        }
        Ok(DataPool {
            spec: spec.clone(),
            samples,
            test,
            cursor: 0,
            num_levels,
        })
    }
}

/// Weak/strong feature augmentation standing in for image augmentation.
///
/// Weak adds small Gaussian noise; strong adds the same noise and then
/// zeroes each coordinate independently with probability `dropout_p`,
/// scaling survivors by `1/(1-dropout_p)` so the expectation is
/// preserved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub noise_std: f64,
    pub dropout_p: f64,
}

impl Augmenter {
    /// Weak noise is 5% of the data spec's sample noise.
    pub fn from_spec(spec: &HierarchicalGaussianSpec) -> Self {
        Self {
            noise_std: 0.05 * spec.sigma_noise,
            dropout_p: 0.2,
        }
    }

    pub fn weak<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        if self.noise_std == 0.0 {
            return x.to_vec();
        }
        let noise = Normal::new(0.0, self.noise_std).expect("finite std");
        x.iter().map(|&v| v + noise.sample(rng)).collect()
    }

    pub fn strong<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = self.weak(x, rng);
        if self.dropout_p > 0.0 {
            let keep_scale = 1.0 / (1.0 - self.dropout_p);
            for v in &mut out {
                if rng.random_range(0.0..1.0) < self.dropout_p {
                    *v = 0.0;
                } else {
                    *v *= keep_scale;
                }
            }
        }
        out
    }

    /// Row-wise augmentation of a feature matrix.
    pub fn batch<R: Rng>(&self, x: &Array2<f64>, strong: bool, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let row_vec: Vec<f64> = row.to_vec();
            let aug = if strong {
                self.strong(&row_vec, rng)
            } else {
                self.weak(&row_vec, rng)
            };
            out.row_mut(i)
                .iter_mut()
                .zip(&aug)
                .for_each(|(dst, &src)| *dst = src);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Taxonomy;

    fn spec(seed: u64) -> HierarchicalGaussianSpec {
        HierarchicalGaussianSpec {
            dim: 8,
            sigma_coarse: 4.0,
            sigma_fine: 1.0,
            sigma_noise: 0.6,
            tail_exponent: 0.0,
            seed,
        }
    }

    #[test]
    fn cifar_like_pool_has_requested_shape() {
        let tax = Taxonomy::from_level_sizes(&[20, 100]).unwrap();
        let pool = generate_pool(&spec(0), &tax, &[10_000, 10_000], 1000).unwrap();
        assert_eq!(pool.samples.len(), 20_000);
        assert_eq!(pool.test.len(), 1000);
        let mut counts = vec![0usize; 100];
        for s in &pool.samples {
            counts[s.labels[1]] += 1;
        }
        for &c in &counts {
            assert_eq!(c, 200, "balanced: 20000 / 100 classes");
        }
    }

    #[test]
    fn balanced_counts_stay_within_one() {
        let tax = Taxonomy::from_level_sizes(&[3, 7]).unwrap();
        let pool = generate_pool(&spec(1), &tax, &[100], 10).unwrap();
        let mut counts = vec![0usize; 7];
        for s in &pool.samples {
            counts[s.labels[1]] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn long_tail_counts_follow_power_law_ordering() {
        let mut s = spec(2);
        s.tail_exponent = 1.0;
        let tax = Taxonomy::from_level_sizes(&[3, 12]).unwrap();
        let pool = generate_pool(&s, &tax, &[1200], 12).unwrap();
        let mut counts = vec![0usize; 12];
        for smp in &pool.samples {
            counts[smp.labels[1]] += 1;
        }
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "counts must be nonincreasing: {counts:?}");
        }
        assert!(counts[0] > 4 * counts[11]);
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let tax = Taxonomy::from_level_sizes(&[4, 9]).unwrap();
        let a = generate_pool(&spec(7), &tax, &[500, 500], 90).unwrap();
        let b = generate_pool(&spec(7), &tax, &[500, 500], 90).unwrap();
        assert_eq!(a, b);
        let c = generate_pool(&spec(8), &tax, &[500, 500], 90).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lineage_matches_taxonomy_coarsening() {
        let tax = Taxonomy::from_level_sizes(&[3, 8, 17]).unwrap();
        let pool = generate_pool(&spec(3), &tax, &[200], 17).unwrap();
        for s in pool.samples.iter().take(50).chain(pool.test.iter().take(20)) {
            let leaf = s.labels[2];
            assert_eq!(s.labels[1], tax.coarsen(leaf, 2, 1).unwrap());
            assert_eq!(s.labels[0], tax.coarsen(leaf, 2, 0).unwrap());
        }
    }

    #[test]
    fn label_new_keeps_history_coarse() {
        let tax = Taxonomy::from_level_sizes(&[4, 12]).unwrap();
        let mut pool = generate_pool(&spec(4), &tax, &[1000, 1000], 120).unwrap();
        pool.apply_annotation(AnnotationStrategy::LabelNew, 0, 1000).unwrap();
        pool.apply_annotation(AnnotationStrategy::LabelNew, 1, 1000).unwrap();
        let view = pool.tp_view(1);
        assert_eq!(view.train.len(), 800);
        assert_eq!(view.val.len(), 200);
        assert_eq!(view.coarse.len(), 1000);
        assert!(view.coarse.levels.iter().all(|&l| l == 0));
        // The paper's core data-quantity asymmetry: 2N distinct labeled.
        assert_eq!(pool.labeled_count(1), 2000);
    }

    #[test]
    fn relabel_old_upgrades_in_place() {
        let tax = Taxonomy::from_level_sizes(&[4, 12]).unwrap();
        let mut pool = generate_pool(&spec(5), &tax, &[1000, 1000], 120).unwrap();
        pool.apply_annotation(AnnotationStrategy::LabelNew, 0, 1000).unwrap();
        pool.apply_annotation(AnnotationStrategy::RelabelOld, 1, 1000).unwrap();
        let view = pool.tp_view(1);
        assert_eq!(view.train.len(), 800);
        assert_eq!(view.val.len(), 200);
        assert!(view.coarse.is_empty());
        assert_eq!(pool.labeled_count(1), 1000);
        // TP0 is now empty.
        assert!(pool.tp_view(0).train.is_empty());
    }

    #[test]
    fn all_fine_upgrades_everything() {
        let tax = Taxonomy::from_level_sizes(&[4, 12]).unwrap();
        let mut pool = generate_pool(&spec(6), &tax, &[1000, 1000], 120).unwrap();
        pool.apply_annotation(AnnotationStrategy::LabelNew, 0, 1000).unwrap();
        pool.apply_annotation(AnnotationStrategy::AllFine, 1, 1000).unwrap();
        let view = pool.tp_view(1);
        assert_eq!(view.train.len(), 1600);
        assert_eq!(view.val.len(), 400);
        assert!(view.coarse.is_empty());
        assert_eq!(pool.labeled_count(1), 2000, "2N fine-labeled at TP 1");
    }

    #[test]
    fn annotation_error_paths() {
        let tax = Taxonomy::from_level_sizes(&[4, 12]).unwrap();
        let mut pool = generate_pool(&spec(7), &tax, &[100], 12).unwrap();
        assert!(pool
            .apply_annotation(AnnotationStrategy::RelabelOld, 0, 100)
            .is_err());
        assert!(pool
            .apply_annotation(AnnotationStrategy::LabelNew, 0, 101)
            .is_err());
        pool.apply_annotation(AnnotationStrategy::LabelNew, 0, 100).unwrap();
        assert!(pool
            .apply_annotation(AnnotationStrategy::LabelNew, 1, 1)
            .is_err());
        // Balanced sampling with fewer samples than classes is rejected.
        assert!(generate_pool(&spec(8), &tax, &[5], 12).is_err());
    }

    /// Nearest-class-mean probe, the "any classifier" stand-in.
    fn ncm_centroids(x: &[Vec<f64>], labels: &[usize], num: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; dim]; num];
        let mut counts = vec![0usize; num];
        for (f, &l) in x.iter().zip(labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                for v in s.iter_mut() {
                    *v /= c as f64;
                }
            }
        }
        sums
    }

    fn nearest(centroids: &[Vec<f64>], candidates: &[usize], x: &[f64]) -> usize {
        *candidates
            .iter()
            .min_by(|&&a, &&b| {
                let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .expect("nonempty candidates")
    }

    #[test]
    fn zero_fine_sigma_makes_fine_classes_chance_level() {
        let mut s = spec(11);
        s.sigma_fine = 0.0;
        s.sigma_noise = 1.0;
        let tax = Taxonomy::from_level_sizes(&[4, 12]).unwrap();
        let pool = generate_pool(&s, &tax, &[3000], 12).unwrap();
        let (probe, held): (Vec<_>, Vec<_>) = pool
            .samples
            .iter()
            .enumerate()
            .map(|(i, smp)| (i, smp))
            .partition(|(i, _)| *i < 2000);
        let probe_x: Vec<Vec<f64>> = probe.iter().map(|(_, s)| s.features.clone()).collect();
        let probe_y: Vec<usize> = probe.iter().map(|(_, s)| s.labels[1]).collect();
        let centroids = ncm_centroids(&probe_x, &probe_y, 12, s.dim);

        let mut correct = 0usize;
        for (_, smp) in &held {
            let parent = smp.labels[0];
            let candidates = tax.children(0, parent);
            let pred = nearest(&centroids, &candidates, &smp.features);
            if pred == smp.labels[1] {
                correct += 1;
            }
        }
        let acc = correct as f64 / held.len() as f64;
        assert!(
            acc <= 1.0 / 3.0 + 0.05,
            "within-parent fine accuracy {acc} should be near chance (1/3)"
        );
    }

    #[test]
    fn augment_degenerate_parameters_are_identity() {
        let aug = Augmenter {
            noise_std: 0.0,
            dropout_p: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(aug.weak(&x, &mut rng), x);
        assert_eq!(aug.strong(&x, &mut rng), x);
    }

    #[test]
    fn strong_augmentation_is_mean_preserving() {
        let aug = Augmenter {
            noise_std: 0.05,
            dropout_p: 0.2,
        };
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sums = vec![0.0; x.len()];
        let mut sq_sums = vec![0.0; x.len()];
        for _ in 0..n {
            let a = aug.strong(&x, &mut rng);
            for ((s, ss), &v) in sums.iter_mut().zip(sq_sums.iter_mut()).zip(&a) {
                *s += v;
                *ss += v * v;
            }
        }
        for i in 0..x.len() {
            let mean = sums[i] / n as f64;
            let var = sq_sums[i] / n as f64 - mean * mean;
            let stderr = (var / n as f64).sqrt();
            assert!(
                (mean - x[i]).abs() <= 3.0 * stderr,
                "coordinate {i}: mean {mean} vs {} (3 se = {})",
                x[i],
                3.0 * stderr
            );
        }
    }

    #[test]
    fn weak_augmentation_rarely_flips_confident_predictions() {
        // Well-separated two-level data; NCM predictions on raw samples
        // should survive weak augmentation >99% of the time.
        let mut s = spec(13);
        s.sigma_coarse = 10.0;
        s.sigma_fine = 2.0;
        s.sigma_noise = 0.1;
        let tax = Taxonomy::from_level_sizes(&[3, 9]).unwrap();
        let pool = generate_pool(&s, &tax, &[1800], 9).unwrap();
        let x: Vec<Vec<f64>> = pool.samples.iter().map(|p| p.features.clone()).collect();
        let y: Vec<usize> = pool.samples.iter().map(|p| p.labels[1]).collect();
        let centroids = ncm_centroids(&x[..900], &y[..900], 9, s.dim);
        let all: Vec<usize> = (0..9).collect();

        let aug = Augmenter::from_spec(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut flips = 0usize;
        for f in &x[900..] {
            let before = nearest(&centroids, &all, f);
            let after = nearest(&centroids, &all, &aug.weak(f, &mut rng));
            if before != after {
                flips += 1;
            }
        }
        assert!(
            (flips as f64) < 0.01 * 900.0,
            "{flips} flips out of 900 exceeds 1%"
        );
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tax = Taxonomy::from_level_sizes(&[3, 7]).unwrap();
        let pool = generate_pool(&spec(21), &tax, &[70], 7).unwrap();
        pool.export(dir.path()).unwrap();
        let back = DataPool::import(dir.path(), &spec(21)).unwrap();
        assert_eq!(back.samples.len(), pool.samples.len());
        assert_eq!(back.test.len(), pool.test.len());
        for (a, b) in pool.samples.iter().zip(&back.samples) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.labels, b.labels);
        }
    }
}
