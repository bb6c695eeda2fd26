//! Class-mean accuracy (mAcc) at any taxonomy level.
//!
//! Per-class accuracy is correct/total within each ground-truth class;
//! mAcc is their unweighted mean, so long-tailed test sets do not bias
//! the metric toward frequent classes. Classes absent from the truths
//! have no defined accuracy and are excluded from the mean (and
//! reported). Coarse-level evaluation of a fine model marginalizes the
//! fine probabilities before the argmax.

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::Model;
use crate::ontology::Taxonomy;
use crate::synthdata::EvalSet;

/// Result of a mAcc computation: the mean, plus per-class accuracies
/// (`None` for classes absent from the truths).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracies {
    pub macc: f64,
    pub per_class: Vec<Option<f64>>,
}

impl ClassAccuracies {
    pub fn absent_classes(&self) -> usize {
        self.per_class.iter().filter(|c| c.is_none()).count()
    }
}

/// Unweighted mean of per-class accuracies over the classes that appear
/// in `truths`.
pub fn mean_class_accuracy(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<ClassAccuracies> {
    if predictions.len() != truths.len() {
        return Err(Error::Metrics(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Metrics("empty evaluation set".into()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&pred, &truth) in predictions.iter().zip(truths) {
        if truth >= num_classes {
            return Err(Error::Metrics(format!(
                "truth class {truth} out of range for {num_classes} classes"
            )));
        }
        total[truth] += 1;
        if pred == truth {
            correct[truth] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macc = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassAccuracies { macc, per_class })
}

/// Evaluates a model at `level`, marginalizing the finest head's
/// probabilities when `level` is coarser than the head.
///
/// The eval set's labels must be at a level at least as fine as `level`;
/// truths are coarsened through the taxonomy as needed. Inputs are fed
/// unaugmented.
pub fn evaluate_at_level(
    model: &Model,
    data: &EvalSet,
    taxonomy: &Taxonomy,
    level: usize,
    use_ema: bool,
) -> Result<ClassAccuracies> {
    if level >= taxonomy.num_levels() {
        return Err(Error::Metrics(format!(
            "level {level} out of range for {} taxonomy levels",
            taxonomy.num_levels()
        )));
    }
    if level > data.level {
        return Err(Error::Metrics(format!(
            "labels are at level {} but evaluation wants finer level {level}",
            data.level
        )));
    }
    let head_level = model.num_heads() - 1;
    if level > head_level {
        return Err(Error::Metrics(format!(
            "model's finest head is {head_level}, cannot evaluate level {level}"
        )));
    }
    let (_, q, _) = model.forward_batch(&data.x, head_level, use_ema)?;
    let q_at_level = if level < head_level {
        taxonomy.edge_matrix(head_level, level)?.marginalize_rows(&q)
    } else {
        q
    };
    let predictions: Vec<usize> = q_at_level
        .rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("contiguous row")))
        .collect();
    let truths: Vec<usize> = data
        .labels
        .iter()
        .map(|&l| {
            if level == data.level {
                Ok(l)
            } else {
                taxonomy.coarsen(l, data.level, level)
            }
        })
        .collect::<Result<_>>()?;
    mean_class_accuracy(&predictions, &truths, taxonomy.level_size(level))
}
