//! Experiment matrix: every (condition, seed) cell is independent, keyed by a
//! content hash, and optionally cached on disk so interrupted runs resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::report::{EvalReport, ReportRow};
use crate::data::{simulate_missing, subsample_labels, MissingPhase, MissingScenario, MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, StrategyKind};
use crate::model::{load_checkpoint, save_checkpoint, ModelSpec, ModelState};
use crate::numkernel::Rng;
use crate::parallel::map_jobs;
use crate::train::{evaluate, finetune, pretrain, train_supervised, FinetuneMode, TrainConfig};

const MISSING_STREAM: u64 = 0x3155;

/// Shared inputs of one experiment.
#[derive(Clone, Debug)]
pub struct EvalSetup<'a> {
    pub dataset: &'a MultimodalDataset,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Directory for cached pre-trained checkpoints and finished cells.
    pub cache_dir: Option<PathBuf>,
    pub jobs: usize,
}

impl EvalSetup<'_> {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.model.modalities != self.dataset.modalities {
            return Err(Error::config("model", "model modalities differ from the dataset"));
        }
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::config("model.num_classes", "differs from the dataset"));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
struct PretrainJob {
    mask: MaskSpec,
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
enum Method {
    Probe(FinetuneMode),
    Supervised,
}

impl Method {
    fn label(&self) -> &'static str {
        match self {
            Method::Probe(m) => m.as_str(),
            Method::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Cell {
    experiment: &'static str,
    scenario: Option<MissingScenario>,
    label_fraction: Option<f64>,
    grid_value: Option<f64>,
    pretrain: Option<PretrainJob>,
    method: Method,
    seed: u64,
}

struct Pretrained {
    state: ModelState,
    id: String,
    trace: String,
}

fn sha(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct SslKey<'a> {
    lr: f64,
    epochs: usize,
    max_steps: Option<usize>,
    patience: usize,
    batch_size: usize,
    loss: &'a crate::loss::LossWeights,
    mask: MaskSpec,
    seed: u64,
}

struct Runner<'a> {
    setup: &'a EvalSetup<'a>,
    dataset_hash: String,
    model_json: String,
}

impl<'a> Runner<'a> {
    fn new(setup: &'a EvalSetup<'a>) -> Result<Self> {
        setup.validate()?;
        if let Some(dir) = &setup.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            setup,
            dataset_hash: setup.dataset.content_hash(),
            model_json: serde_json::to_string(&setup.model).expect("spec serializes"),
        })
    }

    fn pretrain_id(&self, job: &PretrainJob) -> String {
        let t = &self.setup.train;
        let key = SslKey {
            lr: t.ssl_lr,
            epochs: t.ssl_epochs,
            max_steps: t.ssl_max_steps,
            patience: t.patience,
            batch_size: t.batch_size,
            loss: &t.loss,
            mask: job.mask,
            seed: job.seed,
        };
        sha(&["ssl", &self.dataset_hash, &self.model_json, &serde_json::to_string(&key).expect("key serializes")])
    }

    fn cell_id(&self, cell: &Cell) -> String {
        let pre = cell.pretrain.as_ref().map(|j| self.pretrain_id(j)).unwrap_or_default();
        sha(&[
            "cell",
            &self.dataset_hash,
            &self.model_json,
            &serde_json::to_string(&self.setup.train).expect("config serializes"),
            &serde_json::to_string(cell).expect("cell serializes"),
            &pre,
        ])
    }

    fn cache_path(&self, name: String) -> Option<PathBuf> {
        self.setup.cache_dir.as_ref().map(|d| d.join(name))
    }

    fn train_config(&self, seed: u64, mask: Option<MaskSpec>) -> TrainConfig {
        let mut cfg = self.setup.train.clone();
        cfg.seed = seed;
        if let Some(m) = mask {
            cfg.mask = m;
        }
        cfg
    }

    fn obtain_pretrained(&self, job: &PretrainJob) -> Result<Pretrained> {
        let id = self.pretrain_id(job);
        let ckpt = self.cache_path(format!("ssl-{id}.crsl"));
        let trace_path = self.cache_path(format!("ssl-{id}.trace"));
        if let (Some(c), Some(t)) = (&ckpt, &trace_path) {
            if c.exists() && t.exists() {
                let state = load_checkpoint(c)?;
                let trace = std::fs::read_to_string(t).map_err(|e| Error::io(t, e))?;
                return Ok(Pretrained { state, id, trace: trace.trim().to_string() });
            }
        }
        let init = ModelState::init(self.setup.model.clone(), job.seed)?;
        let unlabeled = self.setup.dataset.without_labels();
        let (state, trace) = pretrain(&unlabeled, &init, &self.train_config(job.seed, Some(job.mask)))?;
        let fingerprint = trace.fingerprint();
        if let (Some(c), Some(t)) = (&ckpt, &trace_path) {
            let tmp = c.with_extension("tmp");
            save_checkpoint(&state, &tmp)?;
            std::fs::rename(&tmp, c).map_err(|e| Error::io(c, e))?;
            write_atomic(t, &fingerprint)?;
        }
        Ok(Pretrained { state, id, trace: fingerprint })
    }

    fn run_cell(&self, cell: &Cell, pre: Option<&Pretrained>) -> Result<ReportRow> {
        let mut data = self.setup.dataset.clone();
        if let Some(f) = cell.label_fraction {
            data = subsample_labels(&data, f, cell.seed)?;
        }
        if let Some(s) = &cell.scenario {
            let mut rng = Rng::stream(cell.seed, MISSING_STREAM);
            data = simulate_missing(&data, s, &mut rng)?;
        }
        let cfg = self.train_config(cell.seed, cell.pretrain.map(|j| j.mask));
        let state = match (cell.method, pre) {
            (Method::Probe(mode), Some(p)) => finetune(&data, &p.state, &cfg, mode)?.0,
            (Method::Supervised, _) => train_supervised(&data, &self.setup.model, &cfg)?.0,
            (Method::Probe(_), None) => unreachable!("probe cells always carry a pretrain job"),
        };
        let scores = evaluate(&state, &data, Split::Test)?;
        Ok(ReportRow {
            experiment: cell.experiment.to_string(),
            scenario: cell.scenario.map(|s| s.phase.as_str().to_string()),
            strategy: cell.pretrain.map(|j| j.mask.strategy.to_string()),
            grid_value: cell.grid_value,
            label_fraction: cell.label_fraction,
            mode: cell.method.label().to_string(),
            seed: cell.seed,
            macro_f1: scores.macro_f1,
            per_class_f1: scores.per_class,
            support: scores.support,
            pretrain_id: pre.map(|p| p.id.clone()),
            pretrain_trace: pre.map(|p| p.trace.clone()),
        })
    }

    /// Runs every cell, reusing cached rows and sharing pre-training between
    /// cells with the same job.
    fn run(&self, experiment: &str, cells: Vec<Cell>) -> Result<EvalReport> {
        let ids: Vec<String> = cells.iter().map(|c| self.cell_id(c)).collect();
        let mut rows: Vec<Option<ReportRow>> = ids
            .iter()
            .map(|id| self.cache_path(format!("cell-{id}.json")).and_then(|p| read_row(&p)))
            .collect();

        let mut jobs: Vec<PretrainJob> = Vec::new();
        for (c, r) in cells.iter().zip(&rows) {
            if let (None, Some(j)) = (r, c.pretrain) {
                if !jobs.contains(&j) {
                    jobs.push(j);
                }
            }
        }
        let pretrained = map_jobs(&jobs, self.setup.jobs, |j| self.obtain_pretrained(j))?;
        let by_id: BTreeMap<String, &Pretrained> = pretrained.iter().map(|p| (p.id.clone(), p)).collect();

        let pending: Vec<usize> = (0..cells.len()).filter(|&i| rows[i].is_none()).collect();
        let fresh = map_jobs(&pending, self.setup.jobs, |&i| {
            let cell = &cells[i];
            let pre = cell.pretrain.as_ref().map(|j| by_id[&self.pretrain_id(j)]);
            let row = self.run_cell(cell, pre)?;
            if let Some(p) = self.cache_path(format!("cell-{}.json", ids[i])) {
                write_atomic(&p, &serde_json::to_string(&row).expect("row serializes"))?;
            }
            Ok(row)
        })?;
        for (i, row) in pending.into_iter().zip(fresh) {
            rows[i] = Some(row);
        }
        let rows = rows.into_iter().map(|r| r.expect("every cell filled")).collect();
        Ok(EvalReport::new(experiment, self.setup.dataset.num_classes, rows))
    }
}

fn read_row(path: &Path) -> Option<ReportRow> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

const PROBES: [FinetuneMode; 2] = [FinetuneMode::Fixed, FinetuneMode::Finetuned];

/// Three missing-modality scenarios crossed with the supervised baseline and
/// {fixed, finetuned} × {random, spatial} pre-training. Pre-training always
/// uses clean data; `missing_count` modalities are removed per sample in the
/// splits a scenario affects.
pub fn run_missing_scenarios(setup: &EvalSetup, missing_count: usize) -> Result<EvalReport> {
    let runner = Runner::new(setup)?;
    let m = setup.dataset.num_modalities();
    if missing_count >= m {
        return Err(Error::config("eval.missing_count", format!("must be below the number of modalities {m}")));
    }
    let base = setup.train.mask;
    let strategies = [
        MaskSpec { strategy: StrategyKind::Random, ..base },
        MaskSpec { strategy: StrategyKind::Spatial, ..base },
    ];
    for s in &strategies {
        s.validate(m)?;
    }
    let mut cells = Vec::new();
    for &seed in &setup.seeds {
        for phase in MissingPhase::ALL {
            let scenario = Some(MissingScenario { phase, missing_count });
            let cell = |pretrain, method| Cell {
                experiment: "missing",
                scenario,
                label_fraction: None,
                grid_value: None,
                pretrain,
                method,
                seed,
            };
            cells.push(cell(None, Method::Supervised));
            for mask in strategies {
                for mode in PROBES {
                    cells.push(cell(Some(PretrainJob { mask, seed }), Method::Probe(mode)));
                }
            }
        }
    }
    runner.run("missing", cells)
}

/// Pre-training with each grid value of `strategy`, then fixed and
/// fine-tuned evaluation of each.
pub fn sweep_mask(setup: &EvalSetup, strategy: StrategyKind, grid: &[f64]) -> Result<EvalReport> {
    let runner = Runner::new(setup)?;
    if grid.is_empty() {
        return Err(Error::config("eval.grid", "must not be empty"));
    }
    let m = setup.dataset.num_modalities();
    let mut specs = Vec::new();
    for &g in grid {
        let spec = match strategy {
            StrategyKind::Random if (0.0..=1.0).contains(&g) => MaskSpec::random(g),
            StrategyKind::Spatial if g.fract() == 0.0 && g >= 0.0 && (g as usize) < m => MaskSpec::spatial(g as usize),
            StrategyKind::Random => return Err(Error::config("eval.grid", format!("rate {g} outside [0, 1]"))),
            StrategyKind::Spatial => {
                return Err(Error::config("eval.grid", format!("count {g} must be an integer in [0, {}]", m - 1)))
            }
        };
        specs.push((g, spec));
    }
    let mut cells = Vec::new();
    for &seed in &setup.seeds {
        for &(g, mask) in &specs {
            for mode in PROBES {
                cells.push(Cell {
                    experiment: "mask_sweep",
                    scenario: None,
                    label_fraction: None,
                    grid_value: Some(g),
                    pretrain: Some(PretrainJob { mask, seed }),
                    method: Method::Probe(mode),
                    seed,
                });
            }
        }
    }
    runner.run("mask_sweep", cells)
}

/// One pre-training per seed on the full (unlabeled) training split, then
/// fixed, fine-tuned and supervised training at each label fraction.
pub fn sweep_labels(setup: &EvalSetup, fractions: &[f64]) -> Result<EvalReport> {
    let runner = Runner::new(setup)?;
    if fractions.is_empty() {
        return Err(Error::config("eval.fractions", "must not be empty"));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::config("eval.fractions", format!("{f} outside (0, 1]")));
    }
    setup.train.mask.validate(setup.dataset.num_modalities())?;
    let mut cells = Vec::new();
    for &seed in &setup.seeds {
        let job = PretrainJob { mask: setup.train.mask, seed };
        for &f in fractions {
            let cell = |pretrain, method| Cell {
                experiment: "label_sweep",
                scenario: None,
                label_fraction: Some(f),
                grid_value: None,
                pretrain,
                method,
                seed,
            };
            for mode in PROBES {
                cells.push(cell(Some(job), Method::Probe(mode)));
            }
            cells.push(cell(None, Method::Supervised));
        }
    }
    runner.run("label_sweep", cells)
}
