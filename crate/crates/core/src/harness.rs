//! Config-driven experiment orchestration: build a taxonomy and data
//! pool per seed, walk every strategy combination across time periods,
//! train, evaluate, and aggregate result tables.
//!
//! A config lists, per TP, the annotation strategies, training
//! strategies, and loss specs to cross. Combinations form a tree over
//! TPs; each unique prefix (e.g. the shared TP0 baseline) is trained
//! once per seed. Rows are keyed by the path, TP, seed, and evaluation
//! level, and aggregated as mean ± sample standard deviation over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::evaluate_at_level;
use crate::model::{InitStrategy, Model, ModelConfig};
use crate::ontology::Taxonomy;
use crate::synthdata::{
    generate_pool, AnnotationStrategy, Augmenter, DataPool, HierarchicalGaussianSpec,
};
use crate::trainer::{derive_seed, train_teacher_student, train_tp, TrainConfig, TrainResult};

/// Where the taxonomy comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomySource {
    /// Read from a taxonomy text file.
    File { path: PathBuf },
    /// Deterministically generated from level sizes (children split into
    /// near-equal contiguous blocks).
    Shape { level_sizes: Vec<usize> },
}

impl TaxonomySource {
    pub fn load(&self) -> Result<Taxonomy> {
        match self {
            TaxonomySource::File { path } => Taxonomy::read_file(path),
            TaxonomySource::Shape { level_sizes } => Taxonomy::from_level_sizes(level_sizes),
        }
    }
}

/// The strategy choices crossed at one TP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpPlanSet {
    pub annotations: Vec<AnnotationStrategy>,
    pub trainings: Vec<InitStrategy>,
    pub losses: Vec<LossSpec>,
}

impl TpPlanSet {
    pub fn single(
        annotation: AnnotationStrategy,
        training: InitStrategy,
        losses: LossSpec,
    ) -> Self {
        Self {
            annotations: vec![annotation],
            trainings: vec![training],
            losses: vec![losses],
        }
    }
}

/// A full experiment description. Everything needed to reproduce every
/// number in the output table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub taxonomy: TaxonomySource,
    pub data: HierarchicalGaussianSpec,
    pub num_tps: usize,
    /// Annotation budget N per TP.
    pub budget_per_tp: usize,
    /// Optional unequal budgets; overrides `budget_per_tp` when present.
    #[serde(default)]
    pub budgets: Option<Vec<usize>>,
    pub test_size: usize,
    /// One strategy set per TP; the cross product forms the run tree.
    pub plan: Vec<TpPlanSet>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Extractor hidden widths; the input dim comes from the data spec.
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tps == 0 {
            return Err(Error::Config("num_tps must be at least 1".into()));
        }
        if self.plan.len() != self.num_tps {
            return Err(Error::Config(format!(
                "plan has {} entries but num_tps is {}",
                self.plan.len(),
                self.num_tps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if let Some(budgets) = &self.budgets {
            if budgets.len() != self.num_tps {
                return Err(Error::Config(format!(
                    "budgets has {} entries but num_tps is {}",
                    budgets.len(),
                    self.num_tps
                )));
            }
        }
        for (tp, set) in self.plan.iter().enumerate() {
            if set.annotations.is_empty() || set.trainings.is_empty() || set.losses.is_empty() {
                return Err(Error::Config(format!("TP {tp}: empty strategy set")));
            }
            for spec in &set.losses {
                spec.validate()?;
            }
            if tp == 0 {
                if set.annotations.contains(&AnnotationStrategy::RelabelOld) {
                    return Err(Error::Config("RelabelOld is undefined at TP 0".into()));
                }
                for strategy in &set.trainings {
                    if *strategy != InitStrategy::TrainScratch {
                        return Err(Error::Config(
                            "TP 0 has no previous model; training must be TrainScratch".into(),
                        ));
                    }
                }
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn budget(&self, tp: usize) -> usize {
        self.budgets
            .as_ref()
            .map_or(self.budget_per_tp, |b| b[tp])
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.dim,
            hidden_widths: self.hidden_widths.clone(),
        }
    }

    /// Stable short hash of the resolved config, used to key output
    /// directories.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).fold(String::new(), |mut acc, b| {
            write!(acc, "{b:02x}").expect("string write");
            acc
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

/// One evaluated number: a strategy path, evaluated at `level` after
/// training TP `tp` under `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub combo: String,
    pub tp: usize,
    pub seed: u64,
    pub level: usize,
    pub macc: f64,
}

/// Seed-aggregated view of one (combo, tp, level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub combo: String,
    pub tp: usize,
    pub level: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// All rows of one experiment, with deterministic ordering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.combo, a.tp, a.seed, a.level).cmp(&(&b.combo, b.tp, b.seed, b.level))
        });
    }

    /// Mean and sample (n-1) standard deviation over the declared seeds.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut cells: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            cells
                .entry((r.combo.clone(), r.tp, r.level))
                .or_default()
                .push(r.macc);
        }
        cells
            .into_iter()
            .map(|((combo, tp, level), values)| {
                let n = values.len();
                let mean = values.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                AggregateRow {
                    combo,
                    tp,
                    level,
                    mean,
                    std,
                    n,
                }
            })
            .collect()
    }

    /// Seed-mean mAcc for one combo at its own TP level.
    pub fn mean_macc(&self, combo: &str, tp: usize, level: usize) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.combo == combo && a.tp == tp && a.level == level)
            .map(|a| a.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("combo,tp,seed,level,macc\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.combo, r.tp, r.seed, r.level, r.macc)
                .expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!(
                    "results line {}: expected 5 fields",
                    lineno + 1
                )));
            }
            let parse_err = |what: &str| Error::Parse(format!("results: bad {what}"));
            rows.push(ResultRow {
                combo: fields[0].to_string(),
                tp: fields[1].parse().map_err(|_| parse_err("tp"))?,
                seed: fields[2].parse().map_err(|_| parse_err("seed"))?,
                level: fields[3].parse().map_err(|_| parse_err("level"))?,
                macc: fields[4].parse().map_err(|_| parse_err("macc"))?,
            });
        }
        Ok(Self { rows })
    }

    /// Aggregate summary as csv, means and stds exact.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("combo,tp,level,mean,std,n\n");
        for a in self.aggregate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                a.combo, a.tp, a.level, a.mean, a.std, a.n
            )
            .expect("string write");
        }
        out
    }

    /// Human-readable table with `mean ± std` to two decimals (of
    /// percentage points).
    pub fn summary_text(&self) -> String {
        let aggregates = self.aggregate();
        let combo_width = aggregates
            .iter()
            .map(|a| a.combo.len())
            .chain(std::iter::once("combo".len()))
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<width$}  tp  level  mAcc (% mean ± std)  n\n",
            "combo",
            width = combo_width
        );
        for a in &aggregates {
            writeln!(
                out,
                "{:<width$}  {:>2}  {:>5}  {:>8.2} ± {:<8.2} {:>2}",
                a.combo,
                a.tp,
                a.level,
                100.0 * a.mean,
                100.0 * a.std,
                a.n,
                width = combo_width
            )
            .expect("string write");
        }
        out
    }
}

/// Report output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "text-table" => Ok(ReportFormat::Text),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (expected csv, json, or text)"
            ))),
        }
    }
}

/// Writes the table in the requested format under `dir`, returning the
/// written paths.
pub fn emit_report(table: &ResultTable, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::Config("refusing to report an empty table".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let results = dir.join("results.csv");
            std::fs::write(&results, table.to_csv())?;
            let summary = dir.join("summary.csv");
            std::fs::write(&summary, table.summary_csv())?;
            written.extend([results, summary]);
        }
        ReportFormat::Json => {
            let path = dir.join("results.json");
            let doc = serde_json::json!({
                "rows": table.rows,
                "aggregates": table.aggregate(),
            });
            std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
            written.push(path);
        }
        ReportFormat::Text => {
            let path = dir.join("summary.txt");
            std::fs::write(&path, table.summary_text())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Bookkeeping for one trained path segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub combo: String,
    pub tp: usize,
    pub seed: u64,
    /// Distinct labeled samples accumulated through this TP (the
    /// annotation-cost ledger; LabelNew reaches 2N at TP1, RelabelOld N).
    pub labeled_total: usize,
    pub train_size: usize,
    pub coarse_size: usize,
    pub val_size: usize,
    pub best_val_macc: f64,
    pub best_iteration: usize,
    pub teacher_best_val_macc: Option<f64>,
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub meta: Vec<RunMeta>,
    /// Where artifacts were persisted (empty when persistence is off).
    pub output_dir: Option<PathBuf>,
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    taxonomy: &'a Taxonomy,
    seed: u64,
    persist_dir: Option<PathBuf>,
    rows: Vec<ResultRow>,
    meta: Vec<RunMeta>,
}

impl<'a> SeedRun<'a> {
    /// Depth-first walk over the strategy tree. Each unique path prefix
    /// is trained exactly once.
    fn walk(
        &mut self,
        tp: usize,
        pool: &DataPool,
        prev_model: Option<&Model>,
        prefix: &str,
    ) -> Result<()> {
        let config = self.config;
        let set = &config.plan[tp];
        let augmenter = Augmenter::from_spec(&config.data);
        for annotation in &set.annotations {
            let mut pool_branch = pool.clone();
            pool_branch.apply_annotation(*annotation, tp, config.budget(tp))?;
            let data = pool_branch.tp_view(tp);
            for training in &set.trainings {
                for losses in &set.losses {
                    let segment = format!("{annotation}/{training}/{}", losses.tag());
                    let combo = if prefix.is_empty() {
                        segment.clone()
                    } else {
                        format!("{prefix}|{segment}")
                    };

                    let mut cfg = config.train.clone();
                    cfg.seed = derive_seed(self.seed, 101 + tp as u64);
                    let head_size = self.taxonomy.level_size(tp);
                    let (result, teacher) = if losses.ssl.needs_teacher() {
                        let ts = train_teacher_student(
                            &config.model_config(),
                            prev_model,
                            *training,
                            &data,
                            losses,
                            &cfg,
                            self.taxonomy,
                            &augmenter,
                        )?;
                        (ts.student, Some(ts.teacher))
                    } else {
                        let mut init_rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 201 + tp as u64));
                        let model = Model::init_for_tp(
                            &config.model_config(),
                            prev_model,
                            *training,
                            head_size,
                            &mut init_rng,
                        )?;
                        (
                            train_tp(model, &data, losses, &cfg, self.taxonomy, None, &augmenter)?,
                            None,
                        )
                    };

                    for level in 0..=tp {
                        let acc = evaluate_at_level(
                            &result.model,
                            &data.test,
                            self.taxonomy,
                            level,
                            !cfg.eval_raw_weights,
                        )?;
                        self.rows.push(ResultRow {
                            combo: combo.clone(),
                            tp,
                            seed: self.seed,
                            level,
                            macc: acc.macc,
                        });
                    }
                    self.meta.push(RunMeta {
                        combo: combo.clone(),
                        tp,
                        seed: self.seed,
                        labeled_total: pool_branch.labeled_count(tp),
                        train_size: data.train.len(),
                        coarse_size: data.coarse.len(),
                        val_size: data.val.len(),
                        best_val_macc: result.best_val_macc,
                        best_iteration: result.best_iteration,
                        teacher_best_val_macc: teacher.as_ref().map(|t| t.best_val_macc),
                    });
                    self.persist(tp, &combo, &result, teacher.as_ref())?;

                    if tp + 1 < config.num_tps {
                        self.walk(tp + 1, &pool_branch, Some(&result.model), &combo)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn persist(
        &self,
        tp: usize,
        combo: &str,
        result: &TrainResult,
        teacher: Option<&TrainResult>,
    ) -> Result<()> {
        let Some(dir) = &self.persist_dir else {
            return Ok(());
        };
        let safe_combo: String = combo
            .chars()
            .map(|c| if c == '/' || c == '|' { '_' } else { c })
            .collect();
        let run_dir = dir.join(safe_combo);
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(run_dir.join(format!("tp{tp}.log.csv")), result.log.to_csv())?;
        result.model.save(
            &run_dir.join(format!("tp{tp}.model.manifest.txt")),
            &run_dir.join(format!("tp{tp}.model.bin")),
        )?;
        if let Some(teacher) = teacher {
            std::fs::write(
                run_dir.join(format!("tp{tp}.teacher.log.csv")),
                teacher.log.to_csv(),
            )?;
        }
        Ok(())
    }
}

/// Runs the full experiment: per seed, generate the pool and walk every
/// strategy combination; then aggregate and (when `persist` is set)
/// write artifacts and tables under `<output_dir>/<config-hash>/`.
pub fn run_experiment(config: &ExperimentConfig, persist: bool) -> Result<ExperimentOutput> {
    config.validate()?;
    let taxonomy = config.taxonomy.load()?;
    if taxonomy.num_levels() < config.num_tps {
        return Err(Error::Config(format!(
            "taxonomy has {} levels but the experiment needs {}",
            taxonomy.num_levels(),
            config.num_tps
        )));
    }

    let out_dir = if persist {
        let dir = config.output_dir.join(config.hash());
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("resolved_config.json"),
            serde_json::to_string_pretty(config)?,
        )?;
        Some(dir)
    } else {
        None
    };

    let budgets: Vec<usize> = (0..config.num_tps).map(|tp| config.budget(tp)).collect();
    let mut seed_outputs: Vec<(u64, Vec<ResultRow>, Vec<RunMeta>)> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_> {
            let mut data_spec = config.data.clone();
            data_spec.seed = derive_seed(seed, 7);
            let pool = generate_pool(&data_spec, &taxonomy, &budgets, config.test_size)?;
            let persist_dir = out_dir.as_ref().map(|d| d.join(format!("seed{seed}")));
            if let Some(d) = &persist_dir {
                std::fs::create_dir_all(d)?;
            }
            let mut run = SeedRun {
                config,
                taxonomy: &taxonomy,
                seed,
                persist_dir,
                rows: Vec::new(),
                meta: Vec::new(),
            };
            run.walk(0, &pool, None, "")?;
            Ok((seed, run.rows, run.meta))
        })
        .collect::<Result<_>>()?;
    seed_outputs.sort_by_key(|(seed, _, _)| *seed);

    let mut table = ResultTable::default();
    let mut meta = Vec::new();
    for (_, rows, m) in seed_outputs {
        table.rows.extend(rows);
        meta.extend(m);
    }
    table.sort();
    meta.sort_by(|a, b| (&a.combo, a.tp, a.seed).cmp(&(&b.combo, b.tp, b.seed)));

    if let Some(dir) = &out_dir {
        emit_report(&table, ReportFormat::Csv, dir)?;
        emit_report(&table, ReportFormat::Json, dir)?;
        emit_report(&table, ReportFormat::Text, dir)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }

    Ok(ExperimentOutput {
        table,
        meta,
        output_dir: out_dir,
    })
}

/// A learning-rate x weight-decay grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

impl SweepGrid {
    /// The grid declared in the train config.
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_grid.clone(),
            weight_decay: cfg.wd_grid.clone(),
        }
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut cells = Vec::new();
        for &lr in &self.lr {
            for &wd in &self.weight_decay {
                cells.push((lr, wd));
            }
        }
        cells
    }
}

/// One grid cell's selection record. Holds validation quality only;
/// test numbers stay sealed until a winner is chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub weight_decay: f64,
    /// Mean (over seeds and final-TP paths) best validation mAcc.
    pub val_macc: f64,
}

/// Grid-search output: the per-cell audit log and the winning cell's
/// test table.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub selected: SweepCell,
    pub table: ResultTable,
    pub output: ExperimentOutput,
}

/// Picks the winning cell from validation metrics alone. Ties go to the
/// earlier cell in grid order, which keeps selection deterministic.
fn select_cell(cells: &[SweepCell]) -> usize {
    let mut best = 0;
    for (i, cell) in cells.iter().enumerate().skip(1) {
        if cell.val_macc > cells[best].val_macc {
            best = i;
        }
    }
    best
}

/// Trains every grid cell independently, selects the best by validation
/// mAcc, and reports test results only for the selected cell.
pub fn sweep(config: &ExperimentConfig, grid: &SweepGrid, persist: bool) -> Result<SweepOutput> {
    if grid.lr.is_empty() || grid.weight_decay.is_empty() {
        return Err(Error::Config("sweep grid must be nonempty".into()));
    }
    let cells = grid.cells();
    let mut outputs = Vec::with_capacity(cells.len());
    let mut audit = Vec::with_capacity(cells.len());
    for &(lr, wd) in &cells {
        let mut cell_config = config.clone();
        cell_config.train.base_lr = lr;
        cell_config.train.weight_decay = wd;
        let output = run_experiment(&cell_config, persist)?;
        let final_tp = config.num_tps - 1;
        let vals: Vec<f64> = output
            .meta
            .iter()
            .filter(|m| m.tp == final_tp)
            .map(|m| m.best_val_macc)
            .collect();
        let val_macc = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        audit.push(SweepCell {
            lr,
            weight_decay: wd,
            val_macc,
        });
        outputs.push(output);
    }
    let winner = select_cell(&audit);
    let selected = audit[winner].clone();
    let output = outputs.swap_remove(winner);
    Ok(SweepOutput {
        cells: audit,
        selected,
        table: output.table.clone(),
        output,
    })
}
