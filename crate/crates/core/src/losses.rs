//! Training objectives: supervised cross-entropy, four semi-supervised
//! losses over coarse-only history data, joint multi-head training,
//! the marginalized partial-label loss, and pseudo-label refinement.
//!
//! Every loss is evaluated in two stages. `prepare_loss` draws the
//! augmented views and fixes the pseudo-label targets (the stop-gradient
//! quantities); `eval_loss` is then a deterministic differentiable
//! function of the model parameters that returns the loss value and the
//! full parameter gradient. Training calls both per iteration; gradient
//! checks perturb parameters between `eval_loss` calls on one fixed
//! preparation.
//!
//! Batch terms are means over their full batch, so rejected or masked
//! samples contribute exactly zero without changing the scale of the
//! surviving ones. Enabled terms are summed with unit weights.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, Gradients, Model};
use crate::ontology::{EdgeCache, EdgeMatrix, PROB_SUM_TOL};
use crate::synthdata::{Augmenter, CoarseSet, FineSet};

/// Probabilities are clamped here before logs; cross-entropy is undefined
/// at zero.
pub const Q_CLAMP: f64 = 1e-12;

/// Semi-supervised loss variant applied to the coarse-only batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SslMode {
    #[default]
    None,
    /// Teacher's one-hot argmax as target.
    StHard,
    /// Teacher's full probability vector as target.
    StSoft,
    /// Current model's confident argmax as target.
    Pl,
    /// Weak-view pseudo-label, strong-view prediction.
    FixMatch,
}

impl SslMode {
    pub fn needs_teacher(&self) -> bool {
        matches!(self, SslMode::StHard | SslMode::StSoft)
    }
}

impl std::fmt::Display for SslMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SslMode::None => "none",
            SslMode::StHard => "ST-Hard",
            SslMode::StSoft => "ST-Soft",
            SslMode::Pl => "PL",
            SslMode::FixMatch => "FixMatch",
        };
        f.write_str(s)
    }
}

/// Pseudo-label refinement using the sample's true coarse label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Refinement {
    #[default]
    None,
    /// Reject pseudo-labels whose argmax is not a descendant of the true
    /// coarse label.
    Filter,
    /// Zero out scores off the true coarse label's descendants and
    /// renormalize before thresholding/hardening.
    Condition,
}

impl std::fmt::Display for Refinement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Refinement::None => "none",
            Refinement::Filter => "Filter",
            Refinement::Condition => "Cond",
        };
        f.write_str(s)
    }
}

/// Declarative loss selection for one TP's training. All enabled terms
/// carry equal (unit) weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Supervised CE on the fine-labeled batch.
    #[serde(default = "default_true")]
    pub use_base: bool,
    #[serde(default)]
    pub ssl: SslMode,
    #[serde(default)]
    pub refinement: Refinement,
    /// Multi-head CE against each available coarse label.
    #[serde(default)]
    pub use_joint: bool,
    /// CE of marginalized fine probabilities against coarse labels.
    #[serde(default)]
    pub use_lpl: bool,
    /// Whether joint/LPL coarse supervision also covers the fine batch
    /// (coarse labels inferred from lineage).
    #[serde(default = "default_true")]
    pub apply_coarse_on_new: bool,
    /// Confidence gate for PL and FixMatch.
    #[serde(default = "default_pl_threshold")]
    pub pl_threshold: f64,
    /// Use the weak view's soft distribution instead of its argmax as the
    /// FixMatch target.
    #[serde(default)]
    pub fixmatch_soft_target: bool,
}

fn default_true() -> bool {
    true
}

fn default_pl_threshold() -> f64 {
    0.95
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            use_base: true,
            ssl: SslMode::None,
            refinement: Refinement::None,
            use_joint: false,
            use_lpl: false,
            apply_coarse_on_new: true,
            pl_threshold: default_pl_threshold(),
            fixmatch_soft_target: false,
        }
    }
}

impl LossSpec {
    pub fn base_only() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.refinement != Refinement::None && self.ssl == SslMode::None {
            return Err(Error::Loss(
                "pseudo-label refinement requires an SSL mode".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pl_threshold) {
            return Err(Error::Loss(format!(
                "pl_threshold must be in [0, 1], got {}",
                self.pl_threshold
            )));
        }
        Ok(())
    }

    /// Whether any term consumes the coarse-only batch.
    pub fn needs_old_batch(&self) -> bool {
        self.ssl != SslMode::None || self.use_joint || self.use_lpl
    }

    /// Short display tag used in result tables, e.g. `base+joint` or
    /// `base+lpl+FixMatch/Filter`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.use_base {
            parts.push("base".to_string());
        }
        if self.use_joint {
            parts.push("joint".to_string());
        }
        if self.use_lpl {
            parts.push("lpl".to_string());
        }
        if self.ssl != SslMode::None {
            if self.refinement != Refinement::None {
                parts.push(format!("{}/{}", self.ssl, self.refinement));
            } else {
                parts.push(self.ssl.to_string());
            }
        }
        if parts.is_empty() {
            parts.push("none".to_string());
        }
        parts.join("+")
    }
}

/// How a pseudo-label target was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoSource {
    Hard,
    Soft,
    WeakAug,
}

/// A fixed (stop-gradient) target for one coarse-batch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub target: Vec<f64>,
    pub accepted: bool,
    pub source_mode: PseudoSource,
}

impl PseudoLabel {
    fn rejected(num_classes: usize, source_mode: PseudoSource) -> Self {
        Self {
            target: vec![0.0; num_classes],
            accepted: false,
            source_mode,
        }
    }
}

/// Argmax with ties broken toward the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn one_hot(len: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[idx] = 1.0;
    v
}

fn check_normalized(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Loss(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Cross-entropy of `q` against `target`, both normalized, with the logit
/// gradient `q - target` for a softmax-producing head.
pub fn cross_entropy(q: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if q.len() != target.len() {
        return Err(Error::Loss(format!(
            "cross_entropy: {} probabilities vs {} targets",
            q.len(),
            target.len()
        )));
    }
    check_normalized(q, "prediction")?;
    check_normalized(target, "target")?;
    let loss = -target
        .iter()
        .zip(q)
        .map(|(&t, &p)| t * p.max(Q_CLAMP).ln())
        .sum::<f64>();
    let dlogits = q.iter().zip(target).map(|(&p, &t)| p - t).collect();
    Ok((loss, dlogits))
}

fn pseudo_from_q(
    q: &[f64],
    mode: SslMode,
    threshold: f64,
    soft_fixmatch: bool,
) -> PseudoLabel {
    let top = argmax(q);
    match mode {
        SslMode::None => unreachable!("no pseudo-labels without an SSL mode"),
        SslMode::StHard => PseudoLabel {
            target: one_hot(q.len(), top),
            accepted: true,
            source_mode: PseudoSource::Hard,
        },
        SslMode::StSoft => PseudoLabel {
            target: q.to_vec(),
            accepted: true,
            source_mode: PseudoSource::Soft,
        },
        SslMode::Pl => PseudoLabel {
            target: one_hot(q.len(), top),
            accepted: q[top] > threshold,
            source_mode: PseudoSource::Hard,
        },
        SslMode::FixMatch => PseudoLabel {
            target: if soft_fixmatch {
                q.to_vec()
            } else {
                one_hot(q.len(), top)
            },
            accepted: q[top] > threshold,
            source_mode: PseudoSource::WeakAug,
        },
    }
}

/// Self-training pseudo-label from a fixed teacher on an (augmented)
/// input view. Hard mode takes the argmax, soft mode the full
/// distribution; both are always accepted.
pub fn pseudo_label_st(
    teacher: &Model,
    x_view: &[f64],
    level: usize,
    hard: bool,
) -> Result<PseudoLabel> {
    let (_, q, _) = teacher.forward(x_view, level, true)?;
    let mode = if hard { SslMode::StHard } else { SslMode::StSoft };
    Ok(pseudo_from_q(&q, mode, 0.0, false))
}

/// Confidence-gated pseudo-label from the current model on a strong view.
pub fn pseudo_label_pl(
    model: &Model,
    x_strong: &[f64],
    level: usize,
    threshold: f64,
) -> Result<PseudoLabel> {
    let (_, q, _) = model.forward(x_strong, level, false)?;
    Ok(pseudo_from_q(&q, SslMode::Pl, threshold, false))
}

/// FixMatch pseudo-labeling: the gate and target come from a weak view,
/// the returned strong view is what the prediction loss runs on.
pub fn pseudo_label_fixmatch<R: Rng>(
    model: &Model,
    x: &[f64],
    level: usize,
    threshold: f64,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<(PseudoLabel, Vec<f64>)> {
    let weak = augmenter.weak(x, rng);
    let strong = augmenter.strong(x, rng);
    let (_, q_w, _) = model.forward(&weak, level, false)?;
    Ok((pseudo_from_q(&q_w, SslMode::FixMatch, threshold, false), strong))
}

/// Rejects an accepted pseudo-label whose argmax class is not a
/// descendant of the true coarse label.
pub fn refine_filter(
    p: &PseudoLabel,
    coarse_label: usize,
    edges: &EdgeMatrix,
) -> PseudoLabel {
    if p.accepted && !edges.is_ancestor(argmax(&p.target), coarse_label) {
        return PseudoLabel {
            accepted: false,
            ..p.clone()
        };
    }
    p.clone()
}

fn condition_opt(q: &[f64], coarse_label: usize, edges: &EdgeMatrix) -> Option<Vec<f64>> {
    let mut out: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(c, &v)| v * edges.entry(c, coarse_label))
        .collect();
    let mass: f64 = out.iter().sum();
    if mass <= 0.0 {
        return None;
    }
    for v in &mut out {
        *v /= mass;
    }
    Some(out)
}

/// Zeroes out scores unaligned with the true coarse label and
/// renormalizes. Errors when no descendant carries mass (the one true
/// singularity); the pipeline skips and counts such samples instead.
pub fn refine_condition(
    q: &[f64],
    coarse_label: usize,
    edges: &EdgeMatrix,
) -> Result<Vec<f64>> {
    if q.len() != edges.num_fine() {
        return Err(Error::Loss(format!(
            "conditioning: {} probabilities vs {} fine classes",
            q.len(),
            edges.num_fine()
        )));
    }
    condition_opt(q, coarse_label, edges).ok_or_else(|| {
        Error::Loss(format!(
            "conditioning undefined: no descendant of coarse label {coarse_label} carries mass"
        ))
    })
}

/// Per-term loss values; enabled terms sum with unit weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub base: f64,
    pub ssl: f64,
    pub joint: f64,
    pub lpl: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.base + self.ssl + self.joint + self.lpl
    }
}

/// Pseudo-label bookkeeping for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PseudoStats {
    pub total: usize,
    pub accepted: usize,
    pub condition_skipped: usize,
}

impl PseudoStats {
    pub fn accept_rate(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.accepted as f64 / self.total as f64
    }
}

/// Fixed views and targets for one optimization step. Everything the
/// gradient must not flow through lives here.
#[derive(Debug, Clone)]
pub struct PreparedLoss {
    pub spec: LossSpec,
    /// The fine level whose head the base/SSL/LPL terms drive.
    pub level: usize,
    bk_strong: Array2<f64>,
    bk_lineage: Vec<Vec<usize>>,
    bm_strong: Array2<f64>,
    bm_levels: Vec<usize>,
    bm_labels: Vec<usize>,
    bm_mask: Vec<bool>,
    pseudo: Vec<PseudoLabel>,
    pub stats: PseudoStats,
}

/// Draws augmented views and pseudo-label targets for one step.
///
/// The teacher is consulted (with EMA weights) for self-training targets;
/// PL and FixMatch read the current model's raw weights. Conditioning is
/// applied to the raw probability vector before hardening/thresholding;
/// filtering rejects afterwards.
pub fn prepare_loss<R: Rng>(
    spec: &LossSpec,
    model: &Model,
    teacher: Option<&Model>,
    batch_new: &FineSet,
    batch_old: &CoarseSet,
    edges: &EdgeCache,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<PreparedLoss> {
    spec.validate()?;
    let level = batch_new.level;
    if edges.fine_level() != level {
        return Err(Error::Loss(format!(
            "edge cache built for level {} but batch is at level {level}",
            edges.fine_level()
        )));
    }
    if spec.ssl.needs_teacher() != teacher.is_some() {
        return Err(Error::Loss(if spec.ssl.needs_teacher() {
            "self-training needs a teacher model".to_string()
        } else {
            "teacher provided but the SSL mode does not use one".to_string()
        }));
    }
    if model.num_heads() <= level {
        return Err(Error::Loss(format!(
            "model has {} heads, level {level} requires more",
            model.num_heads()
        )));
    }
    for &l in &batch_old.levels {
        if l >= level {
            return Err(Error::Loss(format!(
                "coarse batch sample at level {l} is not coarser than {level}"
            )));
        }
    }

    let bk_strong = augmenter.batch(&batch_new.x, true, rng);
    let bm_strong = augmenter.batch(&batch_old.x, true, rng);

    let mut stats = PseudoStats::default();
    let mut pseudo = Vec::new();
    if spec.ssl != SslMode::None && batch_old.len() > 0 {
        let q_matrix = match spec.ssl {
            SslMode::StHard | SslMode::StSoft => {
                let teacher = teacher.expect("validated above");
                teacher.forward_batch(&bm_strong, level, true)?.1
            }
            SslMode::Pl => model.forward_batch(&bm_strong, level, false)?.1,
            SslMode::FixMatch => {
                let bm_weak = augmenter.batch(&batch_old.x, false, rng);
                model.forward_batch(&bm_weak, level, false)?.1
            }
            SslMode::None => unreachable!(),
        };
        stats.total = batch_old.len();
        for i in 0..batch_old.len() {
            let q_row: Vec<f64> = q_matrix.row(i).to_vec();
            let e = edges.to(batch_old.levels[i]);
            let q_refined = if spec.refinement == Refinement::Condition {
                match condition_opt(&q_row, batch_old.labels[i], e) {
                    Some(q) => q,
                    None => {
                        stats.condition_skipped += 1;
                        pseudo.push(PseudoLabel::rejected(
                            q_row.len(),
                            PseudoSource::Hard,
                        ));
                        continue;
                    }
                }
            } else {
                q_row
            };
            let mut p = pseudo_from_q(
                &q_refined,
                spec.ssl,
                spec.pl_threshold,
                spec.fixmatch_soft_target,
            );
            if spec.refinement == Refinement::Filter {
                p = refine_filter(&p, batch_old.labels[i], e);
            }
            if p.accepted {
                stats.accepted += 1;
            }
            pseudo.push(p);
        }
    }

    Ok(PreparedLoss {
        spec: spec.clone(),
        level,
        bk_strong,
        bk_lineage: batch_new.lineage.clone(),
        bm_strong,
        bm_levels: batch_old.levels.clone(),
        bm_labels: batch_old.labels.clone(),
        bm_mask: batch_old.mask.clone(),
        pseudo,
        stats,
    })
}

/// Adds `(q - onehot(label)) / norm` to a gradient row and returns the
/// clamped-log CE value.
fn ce_row_hard(
    q: ndarray::ArrayView1<f64>,
    label: usize,
    norm: f64,
    mut dlogits: ndarray::ArrayViewMut1<f64>,
) -> f64 {
    for (j, d) in dlogits.iter_mut().enumerate() {
        *d += (q[j] - if j == label { 1.0 } else { 0.0 }) / norm;
    }
    -q[label].max(Q_CLAMP).ln() / norm
}

/// Marginalized CE against a coarse label: `-ln sum_desc q` with the
/// exact softmax-chain gradient.
fn lpl_row(
    q: ndarray::ArrayView1<f64>,
    e: &EdgeMatrix,
    coarse_label: usize,
    norm: f64,
    mut dlogits: ndarray::ArrayViewMut1<f64>,
) -> f64 {
    let mut mass = 0.0;
    for (j, &p) in q.iter().enumerate() {
        mass += p * e.entry(j, coarse_label);
    }
    let mass_clamped = mass.max(Q_CLAMP);
    for (j, d) in dlogits.iter_mut().enumerate() {
        let desc = e.entry(j, coarse_label);
        *d += q[j] * (1.0 - desc / mass_clamped) / norm;
    }
    -mass_clamped.ln() / norm
}

/// Evaluates the prepared loss at the model's current parameters,
/// returning the value, the parameter gradients, and the per-term
/// breakdown.
pub fn eval_loss(
    model: &Model,
    prep: &PreparedLoss,
    edges: &EdgeCache,
) -> Result<(f64, Gradients, LossTerms)> {
    let spec = &prep.spec;
    let t = prep.level;
    let mut grads = Gradients::zeros_like(model);
    let mut terms = LossTerms::default();
    let feature_dim = model.config.feature_dim();

    // Fine-labeled batch.
    let k = prep.bk_strong.nrows();
    let coarse_on_new = spec.apply_coarse_on_new && (spec.use_joint || spec.use_lpl) && t > 0;
    if k > 0 && (spec.use_base || coarse_on_new) {
        let norm = k as f64;
        let cache = model.extract(&prep.bk_strong, false);
        let features = cache.features().clone();
        let mut d_features = Array2::zeros((k, feature_dim));

        if spec.use_base || (spec.use_lpl && coarse_on_new) {
            let logits = model.head_logits(&features, t, false);
            let q = softmax_rows(&logits);
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for i in 0..k {
                if spec.use_base {
                    terms.base +=
                        ce_row_hard(q.row(i), prep.bk_lineage[i][t], norm, dlogits.row_mut(i));
                }
                if spec.use_lpl && coarse_on_new {
                    for t_prime in 0..t {
                        terms.lpl += lpl_row(
                            q.row(i),
                            edges.to(t_prime),
                            prep.bk_lineage[i][t_prime],
                            norm,
                            dlogits.row_mut(i),
                        );
                    }
                }
            }
            d_features += &model.backward_head(&features, t, &dlogits, &mut grads);
        }
        if spec.use_joint && coarse_on_new {
            for t_prime in 0..t {
                let logits = model.head_logits(&features, t_prime, false);
                let q = softmax_rows(&logits);
                let mut dlogits = Array2::zeros(logits.raw_dim());
                for i in 0..k {
                    terms.joint += ce_row_hard(
                        q.row(i),
                        prep.bk_lineage[i][t_prime],
                        norm,
                        dlogits.row_mut(i),
                    );
                }
                d_features += &model.backward_head(&features, t_prime, &dlogits, &mut grads);
            }
        }
        model.backward_extractor(&cache, d_features, &mut grads);
    }

    // Coarse-only batch.
    let m = prep.bm_strong.nrows();
    if m > 0 && spec.needs_old_batch() {
        let norm = m as f64;
        let cache = model.extract(&prep.bm_strong, false);
        let features = cache.features().clone();
        let mut d_features = Array2::zeros((m, feature_dim));

        if spec.ssl != SslMode::None || spec.use_lpl {
            let logits = model.head_logits(&features, t, false);
            let q = softmax_rows(&logits);
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for i in 0..m {
                if spec.ssl != SslMode::None {
                    let p = &prep.pseudo[i];
                    if p.accepted {
                        let q_row = q.row(i);
                        let mut value = 0.0;
                        for (j, (&target, d)) in
                            p.target.iter().zip(dlogits.row_mut(i)).enumerate()
                        {
                            value -= target * q_row[j].max(Q_CLAMP).ln();
                            *d += (q_row[j] * p.target.iter().sum::<f64>() - target) / norm;
                        }
                        terms.ssl += value / norm;
                    }
                }
                if spec.use_lpl && !prep.bm_mask[i] {
                    terms.lpl += lpl_row(
                        q.row(i),
                        edges.to(prep.bm_levels[i]),
                        prep.bm_labels[i],
                        norm,
                        dlogits.row_mut(i),
                    );
                }
            }
            d_features += &model.backward_head(&features, t, &dlogits, &mut grads);
        }
        if spec.use_joint {
            let mut levels_present: Vec<usize> = prep.bm_levels.clone();
            levels_present.sort_unstable();
            levels_present.dedup();
            for &t_prime in &levels_present {
                let logits = model.head_logits(&features, t_prime, false);
                let q = softmax_rows(&logits);
                let mut dlogits = Array2::zeros(logits.raw_dim());
                for i in 0..m {
                    if prep.bm_levels[i] == t_prime && !prep.bm_mask[i] {
                        terms.joint +=
                            ce_row_hard(q.row(i), prep.bm_labels[i], norm, dlogits.row_mut(i));
                    }
                }
                d_features += &model.backward_head(&features, t_prime, &dlogits, &mut grads);
            }
        }
        model.backward_extractor(&cache, d_features, &mut grads);
    }

    Ok((terms.total(), grads, terms))
}

/// Joint multi-head training alone: CE of each old head against the
/// available coarse labels, on the fine batch (labels inferred from
/// lineage, unless disabled) and the coarse batch (each at its own
/// level). Masked samples are excluded.
pub fn loss_joint<R: Rng>(
    model: &Model,
    batch_new: &FineSet,
    batch_old: &CoarseSet,
    edges: &EdgeCache,
    apply_coarse_on_new: bool,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<(f64, Gradients, LossTerms)> {
    let spec = LossSpec {
        use_base: false,
        use_joint: true,
        apply_coarse_on_new,
        ..LossSpec::default()
    };
    let prep = prepare_loss(&spec, model, None, batch_new, batch_old, edges, augmenter, rng)?;
    eval_loss(model, &prep, edges)
}

/// Partial-label loss alone: CE of the fine head's marginalized
/// probabilities against coarse labels.
pub fn loss_lpl<R: Rng>(
    model: &Model,
    batch_new: &FineSet,
    batch_old: &CoarseSet,
    edges: &EdgeCache,
    apply_coarse_on_new: bool,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<(f64, Gradients, LossTerms)> {
    let spec = LossSpec {
        use_base: false,
        use_lpl: true,
        apply_coarse_on_new,
        ..LossSpec::default()
    };
    let prep = prepare_loss(&spec, model, None, batch_new, batch_old, edges, augmenter, rng)?;
    eval_loss(model, &prep, edges)
}

/// One-call combination of [`prepare_loss`] and [`eval_loss`].
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng>(
    spec: &LossSpec,
    model: &Model,
    teacher: Option<&Model>,
    batch_new: &FineSet,
    batch_old: &CoarseSet,
    edges: &EdgeCache,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<(f64, Gradients, LossTerms, PseudoStats)> {
    let prep = prepare_loss(spec, model, teacher, batch_new, batch_old, edges, augmenter, rng)?;
    let (value, grads, terms) = eval_loss(model, &prep, edges)?;
    Ok((value, grads, terms, prep.stats))
}
