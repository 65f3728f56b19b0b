//! The two-task protocol: pretrain on task A, fine-tune a slice adapter on
//! task B for every start `s`, and measure what task A lost.
//!
//! The output layer holds one logit block per task (task A at `[0, C_A)`,
//! task B at `[C_A, C_A + C_B)`), so fine-tuning on B can only hurt A through
//! the shared hidden layers.

mod analyze;
mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analyze::{analyze_checkpoints, AnalysisRow};
pub use plot::{line_chart, Series};
pub use report::{binomial_tail, ushape_report, SignTest, StartStats, UShapeReport, SIGNIFICANCE};

use crate::adapter::SliceSpec;
use crate::data::{load_idx, make_task_pair, TaskPairConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_csv, write_json};
use crate::rng::{derive_seed, purpose};
use crate::train::{
    attach_adapters, evaluate, finetune, forgetting_abs, forgetting_soft_ce, pretrain, write_trace,
    Activation, LabeledDataset, Loss, Model, ModelSpec, OptimizerKind, TraceRow, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTask {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(TaskPairConfig),
    Idx { prior: IdxTask, new: IdxTask },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub param_space: bool,
    pub feature_space: bool,
    pub importance: bool,
    /// Probe rows for the feature-space analysis.
    #[serde(default = "default_probe")]
    pub feature_probe: usize,
}

fn default_probe() -> usize {
    100
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            param_space: true,
            feature_space: true,
            importance: true,
            feature_probe: default_probe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub rank: usize,
    /// LoRA scale numerator; defaults to `rank`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub starts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pretrain_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// One `(s, seed)` cell of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: usize,
    pub seed: u64,
    pub acc_new: f64,
    pub acc_prior_before: f64,
    pub acc_prior_after: f64,
    pub forgetting: f64,
    pub acc_sum: f64,
    pub soft_ce: f64,
    pub kl: f64,
    pub exploded: bool,
}

/// Best evaluation from the second half of fine-tuning, by accuracy sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub s: usize,
    pub seed: u64,
    pub epoch: usize,
    pub acc_new: f64,
    pub acc_prior_after: f64,
    pub forgetting: f64,
    pub acc_sum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config_sha256: String,
    version: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellRecord {
    row: SweepRow,
    best: Option<BestRow>,
    diverged_at: Option<(usize, usize)>,
}

pub const NEW_SPLIT: &str = "new_test";
pub const PRIOR_SPLIT: &str = "prior_test";

impl SweepConfig {
    /// The desk-scale grid: `k = 64`, `r = 8`, starts `0, 8, …, 56`, ten seeds.
    pub fn desk_scale() -> Self {
        let adamw = |wd| OptimizerKind::adamw(wd);
        Self {
            model: ModelSpec {
                layer_dims: vec![64, 64, 64, 8],
                activation: Activation::Identity,
                adapted_layers: [0, 1].into_iter().collect(),
                bias: true,
                init_scale: 0.05,
            },
            data: DataSource::Synthetic(TaskPairConfig {
                input_dim: 64,
                classes_a: 4,
                classes_b: 4,
                n_train: 1000,
                n_test: 2000,
                overlap: 0.5,
                noise_std: 0.0,
                seed: 0,
                teacher_hidden: 8,
                share_readout: false,
            }),
            rank: 8,
            alpha: None,
            starts: (0..8).map(|i| 8 * i).collect(),
            seeds: (0..10).collect(),
            pretrain_cfg: TrainConfig {
                learning_rate: 3e-3,
                epochs: 30,
                batch_size: 50,
                optimizer: adamw(0.1),
                seed: 0,
                loss: Loss::CrossEntropy,
                train_bias: true,
                eval_every: 10,
            },
            finetune_cfg: TrainConfig {
                learning_rate: 3e-3,
                epochs: 100,
                batch_size: 50,
                optimizer: adamw(0.01),
                seed: 0,
                loss: Loss::CrossEntropy,
                train_bias: true,
                eval_every: 10,
            },
            analysis: AnalysisConfig::default(),
            out_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn slice(&self, s: usize) -> SliceSpec {
        SliceSpec::with_alpha(s, self.rank, self.alpha())
    }

    fn classes(&self) -> Option<(usize, usize)> {
        match &self.data {
            DataSource::Synthetic(d) => Some((d.classes_a, d.classes_b)),
            DataSource::Idx { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.starts.is_empty() {
            return Err(Error::config("starts", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "must be positive"));
        }
        if !(self.alpha().is_finite() && self.alpha() > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if self.model.adapted_layers.is_empty() {
            return Err(Error::config("model.adapted_layers", "must not be empty"));
        }
        for &l in &self.model.adapted_layers {
            let k = self.model.layer_k(l);
            if let Some(&s) = self.starts.iter().find(|&&s| s + self.rank > k) {
                return Err(Error::config(
                    "starts",
                    format!("s = {s} with r = {} exceeds k = {k} of layer {l}", self.rank),
                ));
            }
        }
        if let DataSource::Synthetic(d) = &self.data {
            d.validate()?;
            if d.input_dim != self.model.input_dim() {
                return Err(Error::config("model.layer_dims", "first entry must equal data.input_dim"));
            }
        }
        if let Some((a, b)) = self.classes() {
            if a + b > self.model.output_dim() {
                return Err(Error::config(
                    "model.layer_dims",
                    format!("last entry must hold both logit blocks ({a} + {b})"),
                ));
            }
        }
        for (path, c) in [("pretrain_cfg", &self.pretrain_cfg), ("finetune_cfg", &self.finetune_cfg)] {
            if !(c.learning_rate.is_finite() && c.learning_rate > 0.0) {
                return Err(Error::config(format!("{path}.learning_rate"), "must be positive"));
            }
            if c.batch_size == 0 || c.eval_every == 0 {
                return Err(Error::config(path, "batch_size and eval_every must be positive"));
            }
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Task A and task B splits for one seed, with B on its own logit block.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub prior_train: LabeledDataset,
    pub prior_test: LabeledDataset,
    pub new_train: LabeledDataset,
    pub new_test: LabeledDataset,
}

pub fn seed_data(cfg: &SweepConfig, seed: u64) -> Result<SeedData> {
    let (a_train, a_test, b_train, b_test) = match &cfg.data {
        DataSource::Synthetic(d) => {
            let d = TaskPairConfig {
                seed: derive_seed(derive_seed(d.seed, seed), purpose::SWEEP_DATA),
                ..d.clone()
            };
            let p = make_task_pair(&d)?;
            (p.a.train, p.a.test, p.b.train, p.b.test)
        }
        DataSource::Idx { prior, new } => {
            let load = |t: &IdxTask| -> Result<(LabeledDataset, LabeledDataset)> {
                Ok((
                    load_idx(&t.train_images, &t.train_labels, t.limit)?,
                    load_idx(&t.test_images, &t.test_labels, t.limit)?,
                ))
            };
            let (a, at) = load(prior)?;
            let (b, bt) = load(new)?;
            (a, at, b, bt)
        }
    };
    let offset = a_train.classes.max(a_test.classes);
    let classes_b = b_train.classes.max(b_test.classes);
    if offset + classes_b > cfg.model.output_dim() || a_train.dim() != cfg.model.input_dim() {
        return Err(Error::config("model.layer_dims", "does not fit the loaded data"));
    }
    let widen = |mut d: LabeledDataset, c: usize| {
        d.classes = c;
        d
    };
    Ok(SeedData {
        prior_train: widen(a_train, offset),
        prior_test: widen(a_test, offset),
        new_train: widen(b_train, classes_b).with_logit_offset(offset),
        new_test: widen(b_test, classes_b).with_logit_offset(offset),
    })
}

fn seeded(c: &TrainConfig, seed: u64, label: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(derive_seed(c.seed, seed), label),
        ..c.clone()
    }
}

/// The pretrained base model for `seed`.
pub fn pretrain_base(cfg: &SweepConfig, seed: u64, data: &SeedData) -> Result<Model> {
    let pc = seeded(&cfg.pretrain_cfg, seed, purpose::SWEEP_PRETRAIN);
    pretrain(&cfg.model, &data.prior_train, Some(&data.prior_test), &pc)
}

/// A fine-tuning run of one cell: the final model, its row, and the trace.
pub struct CellRun {
    pub model: Model,
    pub row: SweepRow,
    pub best: Option<BestRow>,
    pub trace: Vec<TraceRow>,
    pub diverged_at: Option<(usize, usize)>,
}

pub fn run_cell(cfg: &SweepConfig, seed: u64, s: usize, base: &Model, data: &SeedData) -> Result<CellRun> {
    let fc = seeded(&cfg.finetune_cfg, seed, purpose::SWEEP_FINETUNE);
    let model = attach_adapters(base.clone(), cfg.slice(s))?;
    let evals = [(NEW_SPLIT, &data.new_test), (PRIOR_SPLIT, &data.prior_test)];
    let run = finetune(model, &data.new_train, &evals, &fc)?;
    let acc_prior_before = evaluate(base, &data.prior_test)?;
    let acc_new = evaluate(&run.model, &data.new_test)?;
    let acc_prior_after = evaluate(&run.model, &data.prior_test)?;
    let soft = forgetting_soft_ce(base, &run.model, &data.prior_test)?;
    let row = SweepRow {
        s,
        seed,
        acc_new,
        acc_prior_before,
        acc_prior_after,
        forgetting: forgetting_abs(acc_prior_before, acc_prior_after)?,
        acc_sum: acc_new + acc_prior_after,
        soft_ce: soft.soft_ce,
        kl: soft.kl,
        exploded: run.diverged.is_some(),
    };
    let best = best_from_halfway(&run.trace, s, seed, acc_prior_before, fc.epochs);
    Ok(CellRun {
        model: run.model,
        row,
        best,
        trace: run.trace,
        diverged_at: run.diverged,
    })
}

fn best_from_halfway(trace: &[TraceRow], s: usize, seed: u64, before: f64, epochs: usize) -> Option<BestRow> {
    let acc = |epoch: usize, split: &str| {
        trace
            .iter()
            .find(|r| r.epoch == epoch && r.split == split)
            .map(|r| r.accuracy)
    };
    let mut best: Option<BestRow> = None;
    for r in trace.iter().filter(|r| r.split == NEW_SPLIT && 2 * r.epoch >= epochs) {
        let Some(prior) = acc(r.epoch, PRIOR_SPLIT) else { continue };
        let cand = BestRow {
            s,
            seed,
            epoch: r.epoch,
            acc_new: r.accuracy,
            acc_prior_after: prior,
            forgetting: (before - prior).abs(),
            acc_sum: r.accuracy + prior,
        };
        if best.as_ref().is_none_or(|b| cand.acc_sum > b.acc_sum) {
            best = Some(cand);
        }
    }
    best
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn checkpoint_dir(out: &Path, seed: u64, s: Option<usize>) -> PathBuf {
    let d = out.join("checkpoints").join(format!("seed{seed}"));
    match s {
        Some(s) => d.join(format!("s{s}")),
        None => d.join("base"),
    }
}

/// Everything a finished sweep reports.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best: Vec<BestRow>,
    pub report: Option<UShapeReport>,
}

/// Runs every `(s, seed)` cell on a pool of `jobs` workers and writes
/// `results.csv`, `best_from_halfway.csv`, `summary.json`, `manifest.json`,
/// per-cell records under `runs/`, checkpoints, traces and plots into `out`.
///
/// Cells are independent and merged in `(s, seed)` order, so the CSV outputs
/// do not depend on `jobs` or scheduling. Diverged cells become rows with
/// `exploded = true`.
pub fn run_sweep(cfg: &SweepConfig, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let started = unix_now();
    let mut manifest = Manifest {
        config_sha256: cfg.sha256(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: None,
        cells: cfg.starts.len() * cfg.seeds.len(),
    };
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("manifest.json"), &manifest)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;

    let bases: Vec<(u64, SeedData, Model)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let data = seed_data(cfg, seed)?;
                let base = pretrain_base(cfg, seed, &data)?;
                base.save(&checkpoint_dir(out, seed, None))?;
                log::info!(
                    "seed {seed}: pretrained, prior-task test accuracy {:.4}",
                    base.summary.and_then(|s| s.val_accuracy).unwrap_or(f64::NAN)
                );
                Ok((seed, data, base))
            })
            .collect::<Result<_>>()
    })?;

    let cells: Vec<(usize, usize)> = cfg
        .starts
        .iter()
        .flat_map(|&s| (0..bases.len()).map(move |i| (s, i)))
        .collect();
    let records: Vec<CellRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, i)| {
                let (seed, data, base) = &bases[i];
                let cell = run_cell(cfg, *seed, s, base, data)?;
                cell.model.save(&checkpoint_dir(out, *seed, Some(s)))?;
                write_trace(&out.join("traces").join(format!("s{s}_seed{seed}.csv")), &cell.trace)?;
                let rec = CellRecord {
                    row: cell.row,
                    best: cell.best,
                    diverged_at: cell.diverged_at,
                };
                write_json(&out.join("runs").join(format!("s{s}_seed{seed}.json")), &rec)?;
                log::info!(
                    "s = {s}, seed {seed}: forgetting {:.4}, new-task accuracy {:.4}",
                    rec.row.forgetting,
                    rec.row.acc_new
                );
                Ok(rec)
            })
            .collect::<Result<_>>()
    })?;

    let mut rows: Vec<SweepRow> = records.iter().map(|r| r.row.clone()).collect();
    rows.sort_by_key(|r| (r.s, r.seed));
    let mut best: Vec<BestRow> = records.iter().filter_map(|r| r.best.clone()).collect();
    best.sort_by_key(|r| (r.s, r.seed));
    write_csv(&out.join("results.csv"), &rows)?;
    write_csv(&out.join("best_from_halfway.csv"), &best)?;
    let report = write_report(out, &rows)?;

    manifest.finished_unix = Some(unix_now());
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(SweepOutcome { rows, best, report })
}

/// Reads `results.csv` from a sweep directory.
pub fn read_results(dir: &Path) -> Result<Vec<SweepRow>> {
    let path = dir.join("results.csv");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn read_config(dir: &Path) -> Result<SweepConfig> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    read_json(&path)
}

/// Writes `summary.json` and the forgetting / accuracy-sum plots. Returns
/// `None` when there are too few starts or seeds for the U-shape statistics.
pub fn write_report(out: &Path, rows: &[SweepRow]) -> Result<Option<UShapeReport>> {
    let report = match ushape_report(rows) {
        Ok(r) => Some(r),
        Err(Error::InsufficientData(why)) => {
            log::warn!("no U-shape statistics: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    #[derive(Serialize)]
    struct Summary<'a> {
        rows: usize,
        exploded: usize,
        ushape: &'a Option<UShapeReport>,
    }
    write_json(
        &out.join("summary.json"),
        &Summary {
            rows: rows.len(),
            exploded: rows.iter().filter(|r| r.exploded).count(),
            ushape: &report,
        },
    )?;
    if let Some(rep) = &report {
        let curve = |name: &str, f: fn(&StartStats) -> (f64, f64)| Series {
            name: name.into(),
            points: rep
                .per_start
                .iter()
                .map(|st| {
                    let (m, sd) = f(st);
                    (st.s as f64, m, sd)
                })
                .collect(),
        };
        let forg = line_chart(
            "Forgetting of the prior task",
            "slice start s",
            "|acc before - acc after|",
            &[curve("mean ± std", |st| (st.forgetting_mean, st.forgetting_std))],
        );
        let sum = line_chart(
            "Accuracy sum",
            "slice start s",
            "acc new + acc prior",
            &[curve("mean ± std", |st| (st.acc_sum_mean, st.acc_sum_std))],
        );
        write_atomic(&out.join("plots").join("forgetting.svg"), forg.as_bytes())?;
        write_atomic(&out.join("plots").join("acc_sum.svg"), sum.as_bytes())?;
    }
    Ok(report)
}
