//! End-to-end runs: generator training, dataset construction, student
//! training and evaluation for every (config, seed) cell of a matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{digest_json, RunConfig, SelectionMode, StageSeeds};
use crate::embed::TrigramEmbedder;
use crate::error::{Error, Result};
use crate::eval::{coverage, evaluate_accuracy, train_student, Paradigm, TrainedStudent};
use crate::grpo::{train_generator, GrpoConfig};
use crate::pipeline::{build_labeled_dataset, pretrain_base, GenerateConfig, LabelConfig, PretrainConfig};
use crate::rewards::{fit_centers, RewardContext, RewardKind};
use crate::sample::{write_jsonl, Sample};
use crate::selection::{filtered_select, random_select, ScoredPool};
use crate::student::{checkpoint, StudentModel, Vocabulary};
use crate::task::{ToyTask, ToyTaskConfig};

/// Accuracy on one test split against the untrained base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// `accuracy - baseline_accuracy`.
    pub delta: f64,
}

impl TaskScore {
    pub fn new(accuracy: f64, baseline_accuracy: f64) -> Self {
        TaskScore {
            accuracy,
            baseline_accuracy,
            delta: accuracy - baseline_accuracy,
        }
    }
}

/// Statistics of the training set a student saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Samples generated before selection.
    pub generated: usize,
    /// Samples the student was trained on.
    pub used: usize,
    pub attempts: usize,
    pub discard_rate: f64,
    pub unlabeled: usize,
    pub degenerate_labels: usize,
    pub agreement_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// In-distribution test split.
    pub test: TaskScore,
    /// Held-out variant with shifted operands and operators.
    pub ood: TaskScore,
    /// Mean cosine similarity between training and test questions.
    pub coverage: f64,
    pub dataset: DatasetStats,
    /// Mean generator reward over the last ten training steps.
    pub final_generator_reward: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    Failed,
}

/// Outcome of one (config, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub reward: RewardKind,
    pub paradigm: Paradigm,
    pub dataset_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub status: ReportStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    /// Wall-clock time; kept out of the serialized report.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.test.accuracy)
    }

    pub fn delta(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.test.delta)
    }
}

#[derive(Debug, Clone)]
struct BaseArtifacts {
    model: StudentModel,
    baseline: f64,
    ood_baseline: f64,
}

type BaseSlot = Arc<OnceLock<std::result::Result<Arc<BaseArtifacts>, String>>>;

/// Shares warm-started base models between cells that would build the
/// same one.
#[derive(Default)]
pub struct BaseCache {
    slots: Mutex<HashMap<String, BaseSlot>>,
}

#[derive(Serialize)]
struct BaseKey<'a> {
    model: &'a crate::student::ModelShape,
    pretrain: &'a PretrainConfig,
    task: &'a ToyTaskConfig,
    template: crate::prompt::TemplateKind,
    checkpoint: &'a Option<std::path::PathBuf>,
    max_new_symbols: usize,
    seed: u64,
}

impl BaseCache {
    fn get(&self, cfg: &RunConfig, seed: u64, toy: &ToyTask, ood: &ToyTask) -> Result<Arc<BaseArtifacts>> {
        let key = digest_json(&BaseKey {
            model: &cfg.model,
            pretrain: &cfg.pretrain,
            task: &cfg.task,
            template: cfg.template,
            checkpoint: &cfg.paths.base_checkpoint,
            max_new_symbols: cfg.eval.max_new_symbols,
            seed,
        });
        let slot = self.slots.lock().expect("cache lock").entry(key).or_default().clone();
        slot.get_or_init(|| {
            let build = || -> Result<BaseArtifacts> {
                let model = base_model(cfg, seed)?;
                let plain = TrainedStudent::plain(model.clone(), cfg.eval.max_new_symbols);
                Ok(BaseArtifacts {
                    baseline: evaluate_accuracy(&plain, &toy.test)?,
                    ood_baseline: evaluate_accuracy(&plain, &ood.test)?,
                    model,
                })
            };
            build().map(Arc::new).map_err(|e| e.to_string())
        })
        .clone()
        .map_err(|e| Error::contract(format!("base model: {e}")))
    }
}

/// Loads `paths.base_checkpoint` or warm-starts a fresh model.
pub fn base_model(cfg: &RunConfig, seed: u64) -> Result<StudentModel> {
    let vocab = Arc::new(Vocabulary::default());
    if let Some(path) = &cfg.paths.base_checkpoint {
        return checkpoint::load(path, vocab);
    }
    let s = StageSeeds::new(seed);
    let pretrain = PretrainConfig {
        seed: s.pretrain,
        ..cfg.pretrain.clone()
    };
    pretrain_base(vocab, cfg.model, s.init, &cfg.task, cfg.template, &pretrain)
}

/// The toy task and its held-out variant (test split only).
pub fn tasks(cfg: &RunConfig) -> Result<(ToyTask, ToyTask)> {
    let toy = ToyTask::new(cfg.task.clone())?;
    let ood = ToyTask::new(ToyTaskConfig {
        train_size: 0,
        ..cfg.task.out_of_distribution()
    })?;
    Ok((toy, ood))
}

/// Generator settings with the stage seed applied.
pub fn generator_config(cfg: &RunConfig, seed: u64) -> GrpoConfig {
    GrpoConfig {
        seed: StageSeeds::new(seed).generator,
        ..cfg.generator.clone()
    }
}

pub fn generate_config(cfg: &RunConfig, seed: u64) -> GenerateConfig {
    GenerateConfig {
        seed: StageSeeds::new(seed).generate,
        template: cfg.template,
        ..cfg.pipeline.generate.clone()
    }
}

pub fn label_config(cfg: &RunConfig, seed: u64) -> LabelConfig {
    LabelConfig {
        seed: StageSeeds::new(seed).label,
        ..cfg.pipeline.label.clone()
    }
}

pub fn student_config(cfg: &RunConfig, seed: u64) -> crate::eval::StudentConfig {
    let s = StageSeeds::new(seed).student;
    let mut out = cfg.eval.clone();
    out.seed = s;
    out.rl.seed = crate::rng::derive_seed(s, &[1]);
    out
}

/// A training set drawn from `generator` per the pipeline settings.
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub stats: DatasetStats,
    /// Scores of the generated pool under filtered selection.
    pub scored: Option<ScoredPool>,
}

/// Generates, labels and optionally selects the student's training set.
pub fn build_training_set(
    cfg: &RunConfig,
    seed: u64,
    generator: &StudentModel,
    student: &StudentModel,
    seeds: &[Sample],
) -> Result<TrainingSet> {
    let p = &cfg.pipeline;
    let requested = match p.selection {
        SelectionMode::None => p.n,
        SelectionMode::Random | SelectionMode::Filtered => p.pool_size,
    };
    let gen_cfg = generate_config(cfg, seed);
    let ds = build_labeled_dataset(generator, student, seeds, requested, &gen_cfg, &label_config(cfg, seed))?;
    let generated = ds.samples.len();
    let select_seed = StageSeeds::new(seed).select;
    let k = p.n.min(generated);
    let (samples, scored) = match p.selection {
        SelectionMode::None => (ds.samples, None),
        SelectionMode::Random => (random_select(&ds.samples, k, select_seed)?, None),
        SelectionMode::Filtered => {
            let embedder = TrigramEmbedder::default();
            let limit = cfg.generator.seed_limit.min(seeds.len());
            let centers = fit_centers(&seeds[..limit], &embedder, cfg.generator.reward.min_cluster_size)?;
            let ctx = RewardContext {
                student,
                centers: &centers,
                embedder,
                sampling: cfg.generator.response_generation,
            };
            let (chosen, scored) =
                filtered_select(&ds.samples, k, &ctx, &cfg.generator.reward, p.normalization, select_seed)?;
            (chosen, Some(scored))
        }
    };
    Ok(TrainingSet {
        stats: DatasetStats {
            generated,
            used: samples.len(),
            attempts: ds.manifest.attempts,
            discard_rate: ds.manifest.discard_rate,
            unlabeled: ds.unlabeled,
            degenerate_labels: ds.degenerate_labels,
            agreement_rate: ds.agreement_rate,
        },
        samples,
        scored,
    })
}

/// Mean cosine similarity between trigram embeddings of two question
/// sets.
pub fn question_coverage(generated: &[Sample], test: &[Sample]) -> Result<f64> {
    let e = TrigramEmbedder::default();
    let g: Vec<_> = generated.iter().map(|s| e.embed(&s.question)).collect();
    let t: Vec<_> = test.iter().map(|s| e.embed(&s.question)).collect();
    coverage(&g, &t)
}

fn run_cell_inner(cfg: &RunConfig, seed: u64, cache: &BaseCache, dir: Option<&Path>) -> Result<Metrics> {
    let (toy, ood) = tasks(cfg)?;
    let base = cache.get(cfg, seed, &toy, &ood)?;
    let gen_cfg = generator_config(cfg, seed);
    let outcome = match dir {
        Some(d) => {
            let mut log = BufWriter::new(File::create(d.join("generator_log.jsonl"))?);
            let out = train_generator(&base.model, &base.model, &toy.train, &gen_cfg, cfg.template, Some(&mut log))?;
            log.flush()?;
            out
        }
        None => train_generator(&base.model, &base.model, &toy.train, &gen_cfg, cfg.template, None)?,
    };
    let curve = &outcome.reward_curve;
    let final_generator_reward = (!curve.is_empty()).then(|| {
        let tail = &curve[curve.len().saturating_sub(10)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    });
    let set = build_training_set(cfg, seed, &outcome.model, &base.model, &toy.train)?;
    if let Some(d) = dir {
        write_jsonl(d.join("dataset.jsonl"), &set.samples)?;
        if let Some(scored) = &set.scored {
            scored.write_ledger(BufWriter::new(File::create(d.join("scores.jsonl"))?))?;
        }
    }
    let student = train_student(&base.model, &set.samples, &student_config(cfg, seed))?;
    Ok(Metrics {
        test: TaskScore::new(evaluate_accuracy(&student, &toy.test)?, base.baseline),
        ood: TaskScore::new(evaluate_accuracy(&student, &ood.test)?, base.ood_baseline),
        coverage: question_coverage(&set.samples, &toy.test)?,
        dataset: set.stats,
        final_generator_reward,
    })
}

/// Runs one cell. Failures are recorded in the report, not returned.
pub fn run_cell(cfg: &RunConfig, seed: u64, cache: &BaseCache, artifacts: Option<&Path>) -> EvalReport {
    let start = Instant::now();
    let digest = cfg.digest();
    let dataset_id = format!("{}-{}-s{seed}", cfg.name, &digest[..8]);
    let result = (|| {
        let dir = match artifacts {
            Some(root) => {
                let d = root.join(&dataset_id);
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        run_cell_inner(cfg, seed, cache, dir.as_deref())
    })();
    if let Err(e) = &result {
        log::error!("{dataset_id} failed: {e}");
    }
    let (status, error, metrics) = match result {
        Ok(m) => (ReportStatus::Ok, None, Some(m)),
        Err(e) => (ReportStatus::Failed, Some(e.to_string()), None),
    };
    EvalReport {
        name: cfg.name.clone(),
        reward: cfg.generator.reward.reward,
        paradigm: cfg.eval.paradigm,
        dataset_id,
        seed,
        config_digest: digest,
        status,
        error,
        metrics,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

/// One report per (config, seed), in config order then seed order. At
/// most `jobs` worker threads are used.
pub fn run_matrix(configs: &[RunConfig], jobs: usize, artifacts: Option<&Path>) -> Result<Vec<EvalReport>> {
    for c in configs {
        c.validate()?;
    }
    let cells: Vec<(&RunConfig, u64)> = configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let cache = BaseCache::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(c, s)| run_cell(c, s, &cache, artifacts))
            .collect()
    }))
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

/// Reports of one method and paradigm summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub paradigm: Paradigm,
    pub runs: usize,
    pub failed: usize,
    pub accuracy: Option<MeanStd>,
    pub delta: Option<MeanStd>,
    pub baseline: Option<MeanStd>,
    pub ood_accuracy: Option<MeanStd>,
    pub ood_delta: Option<MeanStd>,
    pub ood_baseline: Option<MeanStd>,
    pub coverage: Option<MeanStd>,
}

/// Groups reports by (name, paradigm) in order of first appearance.
pub fn aggregate(reports: &[EvalReport]) -> Vec<Aggregate> {
    let mut order: Vec<(String, Paradigm)> = Vec::new();
    for r in reports {
        let key = (r.name.clone(), r.paradigm);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(name, paradigm)| {
            let group: Vec<&EvalReport> = reports.iter().filter(|r| r.name == name && r.paradigm == paradigm).collect();
            let ok: Vec<&Metrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let col = |f: &dyn Fn(&Metrics) -> f64| MeanStd::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            Aggregate {
                runs: group.len(),
                failed: group.iter().filter(|r| r.status == ReportStatus::Failed).count(),
                accuracy: col(&|m| m.test.accuracy),
                delta: col(&|m| m.test.delta),
                baseline: col(&|m| m.test.baseline_accuracy),
                ood_accuracy: col(&|m| m.ood.accuracy),
                ood_delta: col(&|m| m.ood.delta),
                ood_baseline: col(&|m| m.ood.baseline_accuracy),
                coverage: col(&|m| m.coverage),
                name,
                paradigm,
            }
        })
        .collect()
}

fn cell(acc: Option<MeanStd>, delta: Option<MeanStd>) -> String {
    match (acc, delta) {
        (Some(a), Some(d)) => format!("{:.3}±{:.3} ({:+.3})", a.mean, a.std, d.mean),
        _ => "failed".to_string(),
    }
}

/// Plain-text table: one row per method with accuracy and the mean delta
/// against the untrained base, one column per test split.
pub fn render_summary(reports: &[EvalReport]) -> String {
    let groups = aggregate(reports);
    let mut rows: Vec<[String; 5]> = vec![[
        "method".into(),
        "paradigm".into(),
        "toy".into(),
        "toy-ood".into(),
        "coverage".into(),
    ]];
    if let Some(first) = groups.iter().find(|g| g.baseline.is_some()) {
        let b = |m: Option<MeanStd>| m.map(|m| format!("{:.3}±{:.3}", m.mean, m.std)).unwrap_or_default();
        rows.push([
            "untrained".into(),
            "-".into(),
            b(first.baseline),
            b(first.ood_baseline),
            "-".into(),
        ]);
    }
    for g in &groups {
        let failed = if g.failed > 0 {
            format!(" [{} of {} failed]", g.failed, g.runs)
        } else {
            String::new()
        };
        rows.push([
            format!("{}{failed}", g.name),
            g.paradigm.to_string(),
            cell(g.accuracy, g.delta),
            cell(g.ood_accuracy, g.ood_delta),
            g.coverage.map(|c| format!("{:.3}", c.mean)).unwrap_or_else(|| "-".into()),
        ]);
    }
    let widths: Vec<usize> = (0..5).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Writes one JSON object per line.
pub fn write_reports(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Wall-clock times, kept apart from the reproducible reports.
pub fn write_timings(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    #[derive(Serialize)]
    struct Timing<'a> {
        dataset_id: &'a str,
        runtime_seconds: f64,
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(
            &mut w,
            &Timing {
                dataset_id: &r.dataset_id,
                runtime_seconds: r.runtime_seconds,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
