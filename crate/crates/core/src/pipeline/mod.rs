//! CLI-facing orchestration: reproducible experiment runs tying
//! train -> capture -> spectral -> screen -> ablate into a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run/
//!   config.toml        effective configuration (canonical form)
//!   manifest.json      config hash + content hashes of every artifact
//!   events.log         machine-parseable event lines (no wall-clock time)
//!   checkpoints/       step_NNNNNNN.ckpt (+ .meta.json sidecars)
//!   eval/              frozen eval batches (*.evalbatch)
//!   cache/             activation capture cache + index.json
//!   reports/           CSV tables with JSON mirrors
//! ```
//!
//! Commands are single-process; a `.lock` file excludes concurrent
//! invocations on the same run directory. Two runs from the same config
//! produce byte-identical reports.

mod config;
mod manifest;
mod reports;

pub use config::{ExperimentConfig, TaskKind};
pub use manifest::{RunLock, RunManifest};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablate::{
    compositional_experiment, cross_ablation, run_condition_suite, threshold_sweep,
    AblationResult, CompositionalResult, ControlPolicy, MatchedRandomSummary, SweepResult,
    ValLossConfig, SWEEP_THRESHOLDS,
};
use crate::capture::{CaptureCache, QueryPolicy};
use crate::error::{Error, Result};
use crate::model::{
    read_checkpoint, train, write_checkpoint, AblationMask, Checkpoint, CheckpointSink, HeadId,
    Model, TokenStream,
};
use crate::screen::{
    all_head_screen, classify_heads, null_calibration, screen_heads, CircuitProvenance,
    CircuitSpec, CircuitStatus, HeadClassification, NullCalibration, PatternClass,
};
use crate::spectral::{
    elbow, pr_trajectories, rank_heads, trajectory_features, FeatureKey, TrajectoryFeatures,
};
use crate::taskgen::{gen_induction_batch, gen_probe_corpus, EvalBatch, InductionMixStream};

/// Reserved low token ids; task token ranges start above them.
const TOKEN_RANGE_LO: u32 = 2;
/// Behavioral-curve accuracy that marks the grok step.
const GROK_ACCURACY: f64 = 0.5;
/// Spectral circuits take the elbow cutoff clamped to this range.
const SPECTRAL_K_RANGE: (usize, usize) = (2, 6);

pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub step: u64,
    pub tokens: u64,
    /// `None` on the step-0 checkpoint (no update has happened yet).
    pub loss: Option<f64>,
    pub eval_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoints: usize,
    pub final_loss: f64,
    pub final_eval_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub feature: String,
    pub batch: String,
    pub n_heads: usize,
    pub elbow_k: usize,
    pub elbow_fraction: f64,
    pub elbow_curvature: f64,
    pub elbow_weak: bool,
    pub grok_step: Option<u64>,
    pub spectral_circuit_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenSummary {
    pub step: u64,
    pub batch: String,
    pub batch_hash: String,
    pub classes: Vec<String>,
    pub circuits: BTreeMap<String, usize>,
    pub classified_heads: usize,
    pub total_heads: usize,
    pub prefilter_kept: usize,
    pub fraction_above_null_p99: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub circuit_file: String,
    pub circuit_hash: String,
    pub circuit: CircuitSpec,
    pub batch: String,
    pub batch_hash: String,
    pub step: u64,
    pub control_seeds: Vec<u64>,
    pub rows: Vec<AblationResult>,
    pub matched_summary: Option<MatchedRandomSummary>,
    pub multi_seed_recommended: bool,
}

impl RunDir {
    pub fn at(path: &Path) -> RunDir {
        RunDir {
            root: path.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn ensure_layout(&self) -> Result<()> {
        for dir in [
            self.root.clone(),
            self.checkpoints_dir(),
            self.eval_dir(),
            self.cache_dir(),
            self.reports_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_file(&self.root.join("config.toml"))
    }

    fn append_events(&self, lines: &[String]) -> Result<()> {
        let path = self.root.join("events.log");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        let dir = self.checkpoints_dir();
        let mut steps = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
            if let Some(num) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
            {
                if let Ok(step) = num.parse::<u64>() {
                    steps.push(step);
                }
            }
        }
        steps.sort_unstable();
        if steps.is_empty() {
            return Err(Error::invalid(format!(
                "no checkpoints under {} (run `train` first)",
                dir.display()
            )));
        }
        Ok(steps)
    }

    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("step_{step:07}.ckpt"))
    }

    pub fn load_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        read_checkpoint(&self.checkpoint_path(step))
    }

    pub fn load_checkpoints(&self) -> Result<Vec<Checkpoint>> {
        self.checkpoint_steps()?
            .into_iter()
            .map(|s| self.load_checkpoint(s))
            .collect()
    }

    pub fn last_step(&self) -> Result<u64> {
        Ok(*self.checkpoint_steps()?.last().expect("nonempty"))
    }

    fn eval_batch_path(&self, name: &str) -> PathBuf {
        self.eval_dir().join(format!("{name}.evalbatch"))
    }

    pub fn load_eval_batch(&self, name: &str) -> Result<EvalBatch> {
        EvalBatch::read(&self.eval_batch_path(name))
    }

    pub fn default_batch_name(&self) -> Result<&'static str> {
        Ok(match self.config()?.experiment.task {
            TaskKind::Induction => "induction",
            TaskKind::Probe => "probe_in",
        })
    }

    pub fn capture_cache(&self) -> Result<CaptureCache> {
        CaptureCache::at(&self.cache_dir())
    }

    pub fn val_loss_config(&self) -> Result<ValLossConfig> {
        let cfg = self.config()?;
        let model = cfg.model_config()?;
        let (lo, hi) = match cfg.experiment.task {
            TaskKind::Induction => (TOKEN_RANGE_LO, model.vocab_size as u32),
            TaskKind::Probe => {
                let part = cfg.probe_spec()?.partition()?;
                (part.filler.start, part.filler.end)
            }
        };
        Ok(ValLossConfig::new(cfg.train.seq_len, lo, hi))
    }

    fn training_summary(&self) -> Result<Vec<SummaryRow>> {
        let path = self.reports_dir().join("training_summary.json");
        Ok(serde_json::from_str(
            &fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
        )?)
    }

    pub fn grok_step(&self) -> Result<Option<u64>> {
        let rows = self.training_summary()?;
        Ok(rows
            .iter()
            .find(|r| r.eval_top1 >= GROK_ACCURACY)
            .map(|r| r.step))
    }

    fn finish(&self, config_hash: &str) -> Result<()> {
        RunManifest::rebuild(&self.root, config_hash)?;
        Ok(())
    }

    pub fn nominal_class(&self) -> Result<PatternClass> {
        Ok(match self.config()?.experiment.task {
            TaskKind::Induction => PatternClass::Induction,
            TaskKind::Probe => PatternClass::KeyRetrieval,
        })
    }
}

fn build_eval_batches(cfg: &ExperimentConfig) -> Result<Vec<(&'static str, EvalBatch)>> {
    let model = cfg.model_config()?;
    match cfg.experiment.task {
        TaskKind::Induction => {
            let batch = gen_induction_batch(
                cfg.eval.n_eval,
                cfg.eval.eval_seq_len,
                TOKEN_RANGE_LO,
                model.vocab_size as u32,
                cfg.eval.eval_seed,
            )?;
            Ok(vec![("induction", batch)])
        }
        TaskKind::Probe => {
            let (_, eval_in, eval_ood) =
                gen_probe_corpus(&cfg.probe_spec()?, cfg.train.data_seed, cfg.eval.n_eval)?;
            Ok(vec![("probe_in", eval_in), ("probe_ood", eval_ood)])
        }
    }
}

fn build_train_stream(cfg: &ExperimentConfig) -> Result<Box<dyn TokenStream>> {
    let model = cfg.model_config()?;
    match cfg.experiment.task {
        TaskKind::Induction => Ok(Box::new(InductionMixStream::new(
            cfg.train.data_seed,
            TOKEN_RANGE_LO,
            model.vocab_size as u32,
        )?)),
        TaskKind::Probe => {
            let (stream, _, _) =
                gen_probe_corpus(&cfg.probe_spec()?, cfg.train.data_seed, cfg.eval.n_eval)?;
            Ok(Box::new(stream))
        }
    }
}

struct PipelineSink<'a> {
    run: &'a RunDir,
    eval_subset: EvalBatch,
    rows: Vec<SummaryRow>,
    log_every: u64,
    pending_events: Vec<String>,
}

impl CheckpointSink for PipelineSink<'_> {
    fn on_step(&mut self, step: u64, loss: f64) -> Result<()> {
        if step % self.log_every == 0 {
            self.pending_events
                .push(format!("event=step step={step} loss={loss:.6}"));
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint, loss: Option<f64>) -> Result<()> {
        write_checkpoint(&self.run.checkpoint_path(ckpt.step), ckpt)?;
        let eval = crate::ablate::evaluate(
            ckpt,
            &self.eval_subset,
            &AblationMask::empty(),
            "train_eval",
            None,
        )?;
        self.rows.push(SummaryRow {
            step: ckpt.step,
            tokens: ckpt.tokens_seen,
            loss,
            eval_top1: eval.top1,
        });
        let loss_field = loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        self.pending_events.push(format!(
            "event=checkpoint step={} tokens={} loss={loss_field} eval_top1={:.6}",
            ckpt.step, ckpt.tokens_seen, eval.top1
        ));
        self.run.append_events(&std::mem::take(&mut self.pending_events))?;
        Ok(())
    }
}

/// Train per the config, freezing eval batches and emitting checkpoints,
/// the behavioral curve, the event log, and the manifest.
pub fn cmd_train(cfg: &ExperimentConfig, run_path: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run = RunDir::at(run_path);
    run.ensure_layout()?;
    let _lock = RunLock::acquire(run_path)?;

    let config_toml = cfg.to_canonical_toml();
    let config_path = run_path.join("config.toml");
    fs::write(&config_path, &config_toml).map_err(|e| Error::io(&config_path, e))?;

    let batches = build_eval_batches(cfg)?;
    for (name, batch) in &batches {
        batch.write(&run.eval_batch_path(name))?;
    }
    let eval_subset = batches[0].1.truncate(cfg.eval.checkpoint_eval_examples);

    let model_cfg = cfg.model_config()?;
    let mut model = Model::init(model_cfg, cfg.model.seed)?;
    let mut stream = build_train_stream(cfg)?;

    let mut sink = PipelineSink {
        run: &run,
        eval_subset,
        rows: Vec::new(),
        log_every: 25,
        pending_events: vec![format!(
            "event=run_start name={} task={} config_hash={}",
            cfg.experiment.name,
            cfg.experiment.task.name(),
            cfg.content_hash()
        )],
    };
    let checkpoints = train(
        &mut model,
        stream.as_mut(),
        &cfg.train_config(),
        &cfg.train.checkpoint_schedule,
        &mut sink,
    )?;

    let rows = sink.rows.clone();
    let summary_csv: Vec<(u64, u64, Option<f64>, f64)> = rows
        .iter()
        .map(|r| (r.step, r.tokens, r.loss, r.eval_top1))
        .collect();
    reports::training_summary_csv(
        &run.reports_dir().join("training_summary.csv"),
        &summary_csv,
    )?;
    reports::write_json(&run.reports_dir().join("training_summary.json"), &rows)?;
    run.append_events(&[format!("event=run_end checkpoints={}", checkpoints.len())])?;
    run.finish(&cfg.content_hash())?;

    let last = rows.last().expect("at least the step-0 checkpoint");
    Ok(TrainOutcome {
        steps: cfg.train.checkpoint_schedule.last().copied().unwrap_or(0),
        checkpoints: checkpoints.len(),
        final_loss: last.loss.unwrap_or(f64::NAN),
        final_eval_top1: last.eval_top1,
    })
}

/// PR trajectories, trajectory features, head ranking, elbow, and the
/// spectral top-k circuit manifest.
pub fn cmd_spectral(
    run_path: &Path,
    feature: FeatureKey,
    batch_name: Option<&str>,
) -> Result<SpectralSummary> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let checkpoints = run.load_checkpoints()?;
    let mut cache = run.capture_cache()?;

    let trajectories = pr_trajectories(&mut cache, &checkpoints, &batch)?;
    let grok_step = run.grok_step().unwrap_or(None);

    let mut features: BTreeMap<HeadId, TrajectoryFeatures> = BTreeMap::new();
    for t in &trajectories {
        features.insert(t.head, trajectory_features(t, grok_step)?);
    }

    let reports_dir = run.reports_dir();
    reports::trajectories_csv(&reports_dir.join("pr_trajectories.csv"), &trajectories)?;
    reports::write_json(&reports_dir.join("pr_trajectories.json"), &trajectories)?;

    let feature_rows: Vec<(HeadId, TrajectoryFeatures)> =
        features.iter().map(|(h, f)| (*h, *f)).collect();
    reports::features_csv(&reports_dir.join("features.csv"), &feature_rows)?;
    reports::write_json(&reports_dir.join("features.json"), &feature_rows)?;

    let order = rank_heads(&features, feature);
    let ranking: Vec<(HeadId, f64)> = order
        .iter()
        .map(|h| (*h, feature.value(&features[h])))
        .collect();
    reports::ranking_csv(
        &reports_dir.join(format!("ranking_{}.csv", feature.name())),
        &ranking,
    )?;
    reports::write_json(
        &reports_dir.join(format!("ranking_{}.json", feature.name())),
        &ranking,
    )?;

    let integrals: Vec<f64> = features.values().map(|f| f.integral).collect();
    let elbow_res = elbow(&integrals)?;
    let k = elbow_res
        .k
        .clamp(SPECTRAL_K_RANGE.0, SPECTRAL_K_RANGE.1)
        .min(order.len());
    let circuit = CircuitSpec {
        name: "spectral".into(),
        heads: {
            let mut heads: Vec<HeadId> = order[..k].to_vec();
            heads.sort();
            heads
        },
        class: run.nominal_class()?,
        threshold: k as f64,
        status: CircuitStatus::Accepted,
        source: CircuitProvenance {
            checkpoint_step: checkpoints.last().expect("nonempty").step,
            batch_hash: batch.content_hash(),
            mode: "spectral_topk".into(),
            n_examples: batch.n_examples(),
        },
    };
    circuit.validate()?;
    reports::write_json(&reports_dir.join("circuit_spectral.json"), &circuit)?;

    let summary = SpectralSummary {
        feature: feature.name().to_string(),
        batch: batch_name,
        n_heads: integrals.len(),
        elbow_k: elbow_res.k,
        elbow_fraction: elbow_res.k as f64 / integrals.len() as f64,
        elbow_curvature: elbow_res.curvature,
        elbow_weak: elbow_res.weak,
        grok_step,
        spectral_circuit_k: k,
    };
    reports::write_json(&reports_dir.join("spectral_summary.json"), &summary)?;
    run.append_events(&[format!(
        "event=spectral feature={} batch={} elbow_k={} circuit_k={k}",
        summary.feature, summary.batch, summary.elbow_k
    )])?;
    run.finish(&cfg.content_hash())?;
    Ok(summary)
}

fn member_threshold(cfg: &ExperimentConfig, class: PatternClass) -> f64 {
    match class {
        PatternClass::Induction => cfg.screen.induction_threshold,
        PatternClass::PrevToken => cfg.screen.prev_token_threshold,
        _ => cfg.screen.assign_threshold,
    }
}

/// Selectivity screen at a checkpoint: per-(head, class) records, best-class
/// assignments, circuit manifests for the requested classes, null
/// calibration, and the pre-filter set.
pub fn cmd_screen(
    run_path: &Path,
    step: Option<u64>,
    classes: &[PatternClass],
    batch_name: Option<&str>,
    threshold_override: Option<f64>,
) -> Result<ScreenSummary> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let step = match step {
        Some(s) => s,
        None => run.last_step()?,
    };
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let ckpt = run.load_checkpoint(step)?;
    let mut cache = run.capture_cache()?;
    let set = cache.capture(&ckpt, &batch, QueryPolicy::BatchDefined)?;

    // the six standard classes are always evaluated
    let mut all_classes: Vec<PatternClass> = PatternClass::STANDARD_SIX.to_vec();
    for c in classes {
        if !all_classes.contains(c) {
            all_classes.push(*c);
        }
    }
    let records = screen_heads(&set, &batch, &all_classes)?;
    let reports_dir = run.reports_dir();
    reports::screen_csv(&reports_dir.join(format!("screen_step{step}.csv")), &records)?;
    reports::write_json(&reports_dir.join(format!("screen_step{step}.json")), &records)?;

    let classified: Vec<HeadClassification> =
        classify_heads(&records, cfg.screen.assign_threshold)?;
    reports::classify_csv(
        &reports_dir.join(format!("classify_step{step}.csv")),
        &classified,
    )?;
    reports::write_json(
        &reports_dir.join(format!("classify_step{step}.json")),
        &classified,
    )?;

    let mut circuits = BTreeMap::new();
    for &class in classes {
        let threshold = threshold_override.unwrap_or_else(|| member_threshold(&cfg, class));
        let name = format!("{}{}", class.name(), threshold as u64);
        let circuit = all_head_screen(&set, &batch, class, threshold, &name)?;
        circuits.insert(name.clone(), circuit.heads.len());
        reports::write_json(
            &reports_dir.join(format!("circuit_{name}_step{step}.json")),
            &circuit,
        )?;
    }

    // null calibration for the first requested (or nominal) class
    let null_class = classes.first().copied().unwrap_or(run.nominal_class()?);
    let mut null_rows: Vec<NullCalibration> = Vec::new();
    let total_heads = ckpt.model.config.total_heads();
    let mut above = 0usize;
    for hf in 0..total_heads {
        let head = HeadId::from_flat(hf, ckpt.model.config.n_heads);
        let cal = null_calibration(&set, &batch, head, null_class, 500, cfg.eval.eval_seed)?;
        let sel = records
            .iter()
            .find(|r| r.head == head && r.class == null_class)
            .map(|r| r.sel)
            .unwrap_or(0.0);
        if sel > cal.null_p99 {
            above += 1;
        }
        null_rows.push(cal);
    }
    reports::write_json(
        &reports_dir.join(format!("null_{}_step{step}.json", null_class.name())),
        &null_rows,
    )?;

    let prefilter_sels: BTreeMap<HeadId, f64> = records
        .iter()
        .filter(|r| r.class == null_class)
        .map(|r| (r.head, r.sel))
        .collect();
    let kept = crate::screen::prefilter(&prefilter_sels, cfg.screen.prefilter_threshold)?;

    let summary = ScreenSummary {
        step,
        batch: batch_name,
        batch_hash: batch.content_hash(),
        classes: all_classes.iter().map(|c| c.name().to_string()).collect(),
        circuits,
        classified_heads: classified.iter().filter(|c| c.class.is_some()).count(),
        total_heads,
        prefilter_kept: kept.len(),
        fraction_above_null_p99: above as f64 / total_heads as f64,
    };
    reports::write_json(
        &reports_dir.join(format!("screen_summary_step{step}.json")),
        &summary,
    )?;
    run.append_events(&[format!(
        "event=screen step={step} batch={} classified={}/{} null_frac={:.6}",
        summary.batch, summary.classified_heads, summary.total_heads,
        summary.fraction_above_null_p99
    )])?;
    run.finish(&cfg.content_hash())?;
    Ok(summary)
}

fn load_circuit(path: &Path) -> Result<(CircuitSpec, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let circuit: CircuitSpec = serde_json::from_slice(&bytes)?;
    circuit.validate()?;
    Ok((circuit, hex::encode(Sha256::digest(&bytes))))
}

/// Ablation condition suite for a circuit manifest: baseline, circuit,
/// matched-random control(s), upper bound.
pub fn cmd_ablate(
    run_path: &Path,
    circuit_path: &Path,
    batch_name: Option<&str>,
    step: Option<u64>,
    with_val_loss: bool,
    control_seeds: Option<&[u64]>,
) -> Result<AblationReport> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let (circuit, circuit_hash) = load_circuit(circuit_path)?;
    if circuit.heads.is_empty() {
        return Err(Error::invalid(format!(
            "circuit {} is empty (status {:?}); nothing to ablate",
            circuit.name, circuit.status
        )));
    }
    let step = match step {
        Some(s) => s,
        None => circuit.source.checkpoint_step,
    };
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let ckpt = run.load_checkpoint(step)?;
    let seeds = match control_seeds {
        Some(s) if !s.is_empty() => s.to_vec(),
        _ => cfg.controls.seeds.clone(),
    };
    let controls = ControlPolicy {
        matched_random_seeds: seeds.clone(),
        upper_bound: cfg.controls.upper_bound,
    };
    let val_cfg = if with_val_loss {
        Some(run.val_loss_config()?)
    } else {
        None
    };
    let suite = run_condition_suite(&ckpt, &batch, &circuit, &controls, val_cfg.as_ref())?;

    let report = AblationReport {
        circuit_file: circuit_path.display().to_string(),
        circuit_hash,
        circuit: circuit.clone(),
        batch: batch_name.clone(),
        batch_hash: batch.content_hash(),
        step,
        control_seeds: seeds,
        rows: suite.rows.clone(),
        matched_summary: suite.matched_summary.clone(),
        multi_seed_recommended: suite.multi_seed_recommended,
    };
    let base = format!("ablation_{}_{}_step{step}", circuit.name, batch_name);
    reports::ablation_csv(&run.reports_dir().join(format!("{base}.csv")), &suite.rows)?;
    reports::write_json(&run.reports_dir().join(format!("{base}.json")), &report)?;
    run.append_events(&[format!(
        "event=ablate circuit={} batch={batch_name} step={step} rows={}",
        circuit.name,
        suite.rows.len()
    )])?;
    run.finish(&cfg.content_hash())?;
    Ok(report)
}

/// Ablation-floor sweep over screen thresholds.
pub fn cmd_sweep(
    run_path: &Path,
    class: PatternClass,
    thresholds: Option<&[f64]>,
    batch_name: Option<&str>,
    step: Option<u64>,
) -> Result<SweepResult> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let step = match step {
        Some(s) => s,
        None => run.last_step()?,
    };
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let ckpt = run.load_checkpoint(step)?;
    let mut cache = run.capture_cache()?;
    let sweep = threshold_sweep(
        &mut cache,
        &ckpt,
        &batch,
        class,
        thresholds.unwrap_or(&SWEEP_THRESHOLDS),
    )?;
    let base = format!("sweep_{}_step{step}", class.name());
    reports::sweep_csv(&run.reports_dir().join(format!("{base}.csv")), &sweep)?;
    reports::write_json(&run.reports_dir().join(format!("{base}.json")), &sweep)?;
    run.append_events(&[format!(
        "event=sweep class={} step={step} monotone={}",
        class.name(),
        sweep.monotone
    )])?;
    run.finish(&cfg.content_hash())?;
    Ok(sweep)
}

/// Evaluate a circuit from one run against this run's model.
pub fn cmd_cross_ablate(
    run_path: &Path,
    circuit_path: &Path,
    batch_name: Option<&str>,
    step: Option<u64>,
) -> Result<Vec<AblationResult>> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let (circuit, circuit_hash) = load_circuit(circuit_path)?;
    let step = match step {
        Some(s) => s,
        None => run.last_step()?,
    };
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let ckpt = run.load_checkpoint(step)?;
    let rows = cross_ablation(&circuit, &ckpt, &batch)?;
    #[derive(Serialize)]
    struct CrossReport<'a> {
        circuit_file: String,
        circuit_hash: String,
        circuit: &'a CircuitSpec,
        batch: String,
        batch_hash: String,
        step: u64,
        rows: &'a [AblationResult],
    }
    let base = format!("crossablate_{}_step{step}", circuit.name);
    reports::ablation_csv(&run.reports_dir().join(format!("{base}.csv")), &rows)?;
    reports::write_json(
        &run.reports_dir().join(format!("{base}.json")),
        &CrossReport {
            circuit_file: circuit_path.display().to_string(),
            circuit_hash,
            circuit: &circuit,
            batch: batch_name,
            batch_hash: batch.content_hash(),
            step,
            rows: &rows,
        },
    )?;
    run.finish(&cfg.content_hash())?;
    Ok(rows)
}

/// Prev-token compositional experiment against the induction batch.
pub fn cmd_compositional(
    run_path: &Path,
    prev_circuit_path: &Path,
    induction_circuit_path: Option<&Path>,
    batch_name: Option<&str>,
    step: Option<u64>,
) -> Result<CompositionalResult> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let (prev_circuit, _) = load_circuit(prev_circuit_path)?;
    let induction_circuit = match induction_circuit_path {
        Some(p) => Some(load_circuit(p)?.0),
        None => None,
    };
    let step = match step {
        Some(s) => s,
        None => run.last_step()?,
    };
    let batch_name = match batch_name {
        Some(n) => n.to_string(),
        None => run.default_batch_name()?.to_string(),
    };
    let batch = run.load_eval_batch(&batch_name)?;
    let ckpt = run.load_checkpoint(step)?;
    let controls = ControlPolicy {
        matched_random_seeds: cfg.controls.seeds.clone(),
        upper_bound: cfg.controls.upper_bound,
    };
    let result = compositional_experiment(
        &ckpt,
        &prev_circuit,
        &batch,
        induction_circuit.as_ref(),
        &controls,
    )?;
    let base = format!("compositional_{}_step{step}", prev_circuit.name);
    reports::ablation_csv(&run.reports_dir().join(format!("{base}.csv")), &result.rows)?;
    reports::write_json(&run.reports_dir().join(format!("{base}.json")), &result)?;
    run.finish(&cfg.content_hash())?;
    Ok(result)
}

const PRECISION_KS: [usize; 7] = [1, 5, 10, 15, 20, 25, 30];

/// Consolidated text report plus plot-data and precision-at-k tables.
pub fn cmd_report(run_path: &Path) -> Result<String> {
    let run = RunDir::at(run_path);
    let _lock = RunLock::acquire(run_path)?;
    let cfg = run.config()?;
    let reports_dir = run.reports_dir();
    let mut out = String::new();
    out.push_str(&format!(
        "run: {}\ntask: {}\nconfig_hash: {}\ntool_version: {}\n",
        cfg.experiment.name,
        cfg.experiment.task.name(),
        cfg.content_hash(),
        env!("CARGO_PKG_VERSION")
    ));

    if let Ok(rows) = run.training_summary() {
        out.push_str("\n## training\n");
        out.push_str("step tokens loss eval_top1\n");
        for r in &rows {
            let loss = r.loss.map(|l| format!("{l:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{} {} {loss} {:.6}\n",
                r.step, r.tokens, r.eval_top1
            ));
        }
    }

    // spectral section + precision-at-k when both ranking and classes exist
    let mut ranking: Option<Vec<(HeadId, f64)>> = None;
    let spectral_path = reports_dir.join("spectral_summary.json");
    if spectral_path.exists() {
        let summary: SpectralSummary = serde_json::from_str(
            &fs::read_to_string(&spectral_path).map_err(|e| Error::io(&spectral_path, e))?,
        )?;
        out.push_str(&format!(
            "\n## spectral\nfeature: {}\nelbow_k: {} ({:.1}% of heads{})\nspectral_circuit_k: {}\ngrok_step: {}\n",
            summary.feature,
            summary.elbow_k,
            100.0 * summary.elbow_fraction,
            if summary.elbow_weak { ", weak" } else { "" },
            summary.spectral_circuit_k,
            summary
                .grok_step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "none".into()),
        ));
        let rank_path = reports_dir.join(format!("ranking_{}.json", summary.feature));
        if rank_path.exists() {
            let r: Vec<(HeadId, f64)> = serde_json::from_str(
                &fs::read_to_string(&rank_path).map_err(|e| Error::io(&rank_path, e))?,
            )?;
            out.push_str("top heads:\n");
            for (i, (h, v)) in r.iter().take(10).enumerate() {
                out.push_str(&format!("  {} {} {:.6}\n", i + 1, h, v));
            }
            ranking = Some(r);
        }
    }

    // classification from the latest screen step
    let mut classify_files: Vec<PathBuf> = list_reports(&reports_dir, "classify_step", ".json")?;
    classify_files.sort();
    if let Some(path) = classify_files.last() {
        let classes: Vec<HeadClassification> = serde_json::from_str(
            &fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        )?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in &classes {
            let name = c
                .class
                .map(|cl| cl.name().to_string())
                .unwrap_or_else(|| "UNCLASSIFIED".into());
            *counts.entry(name).or_insert(0) += 1;
        }
        out.push_str("\n## classification\n");
        for (name, count) in &counts {
            out.push_str(&format!("{name}: {count}\n"));
        }
        if let Some(ranking) = &ranking {
            let class_map: BTreeMap<HeadId, Option<PatternClass>> =
                classes.iter().map(|c| (c.head, c.class)).collect();
            let order: Vec<HeadId> = ranking.iter().map(|(h, _)| *h).collect();
            let mut rows = Vec::new();
            for k in PRECISION_KS {
                if k >= 1 && k <= order.len() {
                    rows.push((k, crate::screen::precision_at_k(&order, &class_map, k)?));
                }
            }
            reports::precision_csv(&reports_dir.join("precision_at_k.csv"), &rows)?;
            out.push_str("\n## precision_at_k\n");
            for (k, p) in &rows {
                out.push_str(&format!("k={k}: {p:.6}\n"));
            }
        }
    }

    // every ablation/sweep/cross/compositional condition run
    for (title, prefix) in [
        ("ablation", "ablation_"),
        ("compositional", "compositional_"),
        ("cross-ablation", "crossablate_"),
        ("sweep", "sweep_"),
    ] {
        let files = list_reports(&reports_dir, prefix, ".csv")?;
        if files.is_empty() {
            continue;
        }
        out.push_str(&format!("\n## {title}\n"));
        for f in files {
            out.push_str(&format!(
                "--- {}\n",
                f.file_name().unwrap_or_default().to_string_lossy()
            ));
            out.push_str(&fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?);
        }
    }

    let report_path = reports_dir.join("report.txt");
    fs::write(&report_path, &out).map_err(|e| Error::io(&report_path, e))?;
    run.finish(&cfg.content_hash())?;
    Ok(out)
}

fn list_reports(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .map(|n| {
                    let n = n.to_string_lossy();
                    n.starts_with(prefix) && n.ends_with(suffix)
                })
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn mini_config(name: &str, model_seed: u64, data_seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::induction_default(name, model_seed, data_seed, &[15, 30]);
        cfg.train.batch_size = 4;
        cfg.train.seq_len = 48;
        cfg.train.warmup_steps = 10;
        cfg.eval.n_eval = 32;
        cfg.eval.eval_seq_len = 48;
        cfg.eval.checkpoint_eval_examples = 16;
        cfg
    }

    #[test]
    fn full_pipeline_smoke() {
        let dir = tempdir().unwrap();
        let run_path = dir.path().join("run");
        let cfg = mini_config("smoke", 3, 4);

        let outcome = cmd_train(&cfg, &run_path).unwrap();
        assert_eq!(outcome.checkpoints, 3);
        assert!(run_path.join("checkpoints/step_0000000.ckpt").exists());
        assert!(run_path.join("checkpoints/step_0000030.ckpt").exists());
        assert!(run_path.join("eval/induction.evalbatch").exists());

        let spectral = cmd_spectral(&run_path, FeatureKey::Integral, None).unwrap();
        assert_eq!(spectral.n_heads, 8);
        assert!(run_path.join("reports/pr_trajectories.csv").exists());
        assert!(run_path.join("reports/circuit_spectral.json").exists());

        let screen = cmd_screen(
            &run_path,
            None,
            &[PatternClass::Induction, PatternClass::PrevToken],
            None,
            None,
        )
        .unwrap();
        assert_eq!(screen.step, 30);
        assert_eq!(screen.total_heads, 8);
        // six standard classes always evaluated
        assert!(screen.classes.len() >= 6);

        // ablate the spectral circuit (random-init quality, but machinery runs)
        let report = cmd_ablate(
            &run_path,
            &run_path.join("reports/circuit_spectral.json"),
            None,
            None,
            false,
            None,
        )
        .unwrap();
        assert_eq!(report.rows[0].condition, "baseline");
        assert!(!report.circuit_hash.is_empty());

        let sweep = cmd_sweep(&run_path, PatternClass::Induction, None, None, None).unwrap();
        assert_eq!(sweep.rows.len(), 5);

        let text = cmd_report(&run_path).unwrap();
        assert!(text.contains("## training"));
        assert!(text.contains("## spectral"));
        assert!(run_path.join("reports/report.txt").exists());

        // manifest covers everything, run dir has no orphans
        let manifest = RunManifest::read(&run_path).unwrap();
        manifest.verify(&run_path).unwrap();
    }

    #[test]
    fn spectral_reuses_capture_cache() {
        let dir = tempdir().unwrap();
        let run_path = dir.path().join("run");
        let cfg = mini_config("cache", 5, 6);
        cmd_train(&cfg, &run_path).unwrap();

        cmd_spectral(&run_path, FeatureKey::Integral, None).unwrap();
        let run = RunDir::at(&run_path);
        let mut cache = run.capture_cache().unwrap();
        let batch = run.load_eval_batch("induction").unwrap();
        let checkpoints = run.load_checkpoints().unwrap();
        let _ = pr_trajectories(&mut cache, &checkpoints, &batch).unwrap();
        assert_eq!(
            cache.stats.forwards, 0,
            "second spectral pass recomputed forwards"
        );
        assert_eq!(cache.stats.cache_hits as usize, checkpoints.len());
    }

    #[test]
    fn rerunning_train_on_same_dir_is_locked_out_only_during_run() {
        let dir = tempdir().unwrap();
        let run_path = dir.path().join("run");
        let cfg = mini_config("lock", 7, 8);
        cmd_train(&cfg, &run_path).unwrap();
        // lock released: a second invocation may reuse the directory
        cmd_train(&cfg, &run_path).unwrap();
    }

    #[test]
    fn missing_checkpoints_is_usage_error() {
        let dir = tempdir().unwrap();
        let run_path = dir.path().join("run");
        fs::create_dir_all(run_path.join("checkpoints")).unwrap();
        let run = RunDir::at(&run_path);
        assert!(run.checkpoint_steps().is_err());
    }
}
